"""Source-free domain adaptation for 3D nodule detection (contrastive + teacher-student)."""

__version__ = "0.1.0"
