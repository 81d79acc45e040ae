from .model import (ANCHOR_SIZES, MANIFEST, NUM_ANCHORS, STRIDE, AnchorGrid, DetectorParams,
                    Proposal, RoiOutput, RpnOutput, forward, forward_roi, init_params, pool_boxes,
                    propose, roi_features, sigmoid)
from .backprop import (LossSpec, NonFiniteLossError, PatchTask, loss_gradient, loss_value)
from .optim import OptimState, load_checkpoint, save_checkpoint, sgd_step
