"""CT-style preprocessing, patch extraction, synthetic scans and on-disk layout.

Scan directory layout::

    scan_<id>/header.json   {"dims": [z, y, x], "spacing": [...], "dtype": "u8", "version": 1}
    scan_<id>/voxels.raw    z-major uint8 bytes

Annotations for a corpus live in one shared ``annotations.csv``; the corpus
``dataset.json`` lists scan ids with their domain and split.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geom import Annotation

HU_MIN = -1200.0
HU_MAX = 600.0
PAD_VALUE = 170
HEADER_VERSION = 1
SPLIT_RATIOS = (7, 1, 2)


def pad_value() -> int:
    """Fill value for padding and out-of-lung voxels."""
    return PAD_VALUE


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def hu_clip_rescale(hu_volume) -> np.ndarray:
    """Clip HU to [-1200, 600] and map linearly onto uint8 [0, 255]."""
    hu = np.asarray(hu_volume, dtype=np.float64)
    scaled = (np.clip(hu, HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN) * 255.0
    return np.clip(round_half_away(scaled), 0, 255).astype(np.uint8)


def resample_isotropic(volume, spacing) -> np.ndarray:
    """Trilinear resample to 1 mm spacing.

    Output voxel ``i`` sits at ``i`` mm from the first input voxel center, so
    each axis gets ``round(n * spacing)`` samples; samples past the last input
    voxel take the edge value.
    """
    volume = np.asarray(volume)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (3,) or np.any(spacing <= 0):
        raise ValueError(f"spacing must be 3 positive values, got {spacing}")
    if np.all(spacing == 1.0):
        return volume.copy()
    out_shape = [max(1, int(round_half_away(n * s))) for n, s in zip(volume.shape, spacing)]
    coords = np.meshgrid(*[np.arange(n) / s for n, s in zip(out_shape, spacing)], indexing="ij")
    out = ndimage.map_coordinates(volume.astype(np.float64), coords, order=1, mode="nearest")
    if volume.dtype == np.uint8:
        return np.clip(round_half_away(out), 0, 255).astype(np.uint8)
    return out


def extract_patch(volume, origin, side) -> np.ndarray:
    """Cube of ``side`` starting at ``origin``; voxels outside the volume get 170."""
    volume = np.asarray(volume)
    sides = (side,) * 3 if np.isscalar(side) else tuple(side)
    out = np.full(sides, PAD_VALUE, dtype=volume.dtype)
    src, dst = [], []
    for o, s, n in zip(origin, sides, volume.shape):
        lo, hi = max(o, 0), min(o + s, n)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - o, hi - o))
    out[tuple(dst)] = volume[tuple(src)]
    return out


def _tile_origins(n, side, step):
    origins = [0]
    while origins[-1] + side < n:
        origins.append(origins[-1] + step)
    return origins


def crop_patches(volume, patch_side: int = 128, overlap: int = 0, stride: int = 4):
    """Tile a volume into ``patch_side`` cubes; returns ``[(patch, (z, y, x) offset), ...]``.

    Patch coordinate ``q`` maps to scan coordinate ``q + offset``.
    """
    if patch_side % stride:
        raise ValueError(f"patch_side {patch_side} not divisible by stride {stride}")
    if not 0 <= overlap < patch_side:
        raise ValueError("overlap must be in [0, patch_side)")
    volume = np.asarray(volume)
    step = patch_side - overlap
    grids = [_tile_origins(n, patch_side, step) for n in volume.shape]
    out = []
    for z in grids[0]:
        for y in grids[1]:
            for x in grids[2]:
                out.append((extract_patch(volume, (z, y, x), patch_side), (z, y, x)))
    return out


def pad_to_multiple(volume, multiple: int = 4) -> np.ndarray:
    """Pad the far end of each axis with 170 up to a multiple of ``multiple``."""
    volume = np.asarray(volume)
    pads = [(0, (-n) % multiple) for n in volume.shape]
    if not any(p[1] for p in pads):
        return volume
    return np.pad(volume, pads, constant_values=PAD_VALUE)


@dataclass
class ScanRecord:
    id: str
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    annotations: list = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise ValueError(f"scan {self.id}: voxels must be 3D")
        if v.dtype != np.uint8:
            if v.size and (v.min() < 0 or v.max() > 255):
                raise ValueError(f"scan {self.id}: voxel values outside [0, 255]")
            v = v.astype(np.uint8)
        self.voxels = v
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"scan {self.id}: spacing must be positive")


@dataclass(frozen=True)
class SynthDomainSpec:
    """Appearance model for one synthetic domain (intensities in HU)."""

    name: str = "source"
    side: int = 64
    nodules_min: int = 1
    nodules_max: int = 3
    radius_min: float = 3.0
    radius_max: float = 6.0
    base_hu: float = -800.0
    blob_peak_hu: float = 0.0
    noise_std: float = 50.0
    noise_smooth: float = 1.0
    contrast_scale: float = 1.0
    edge_width: float = 1.0
    vessels: int = 0
    vessel_radius: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.side < 8:
            raise ValueError("side must be >= 8")
        if not 0 <= self.nodules_min <= self.nodules_max:
            raise ValueError("need 0 <= nodules_min <= nodules_max")
        if not 0 < self.radius_min <= self.radius_max < self.side / 4:
            raise ValueError(f"radius range must lie in (0, side/4), got "
                             f"[{self.radius_min}, {self.radius_max}]")
        if self.noise_std < 0 or self.edge_width <= 0 or self.contrast_scale <= 0:
            raise ValueError("noise_std >= 0, edge_width > 0, contrast_scale > 0 required")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthDomainSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SynthDomainSpec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _place_nodules(rng, spec, n):
    centers, radii = [], []
    for _ in range(n):
        for _attempt in range(200):
            r = float(rng.uniform(spec.radius_min, spec.radius_max))
            c = rng.uniform(r, spec.side - r, size=3)
            if all(np.linalg.norm(c - c2) > r + r2 for c2, r2 in zip(centers, radii)):
                centers.append(c)
                radii.append(r)
                break
    return centers, radii


def gen_synth_hu(spec: SynthDomainSpec, index: int):
    """HU volume and annotations for scan ``index``; deterministic per (seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    shape = (spec.side,) * 3
    noise = rng.normal(size=shape)
    if spec.noise_smooth > 0:
        noise = ndimage.gaussian_filter(noise, spec.noise_smooth)
        noise /= max(noise.std(), 1e-12)
    hu = spec.base_hu + spec.noise_std * noise
    amp = spec.contrast_scale * (spec.blob_peak_hu - spec.base_hu)
    grid = np.stack(np.meshgrid(*[np.arange(spec.side) + 0.0] * 3, indexing="ij"), axis=-1)

    for _ in range(spec.vessels):
        p0 = rng.uniform(0, spec.side, size=3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        rel = grid - p0
        along = rel @ direction
        dist = np.linalg.norm(rel - along[..., None] * direction, axis=-1)
        hu += amp * 0.8 / (1.0 + np.exp((dist - spec.vessel_radius) / spec.edge_width))

    n = int(rng.integers(spec.nodules_min, spec.nodules_max + 1))
    centers, radii = _place_nodules(rng, spec, n)
    anns = []
    for c, r in zip(centers, radii):
        dist = np.linalg.norm(grid - c, axis=-1)
        hu += amp / (1.0 + np.exp((dist - r) / spec.edge_width))
        anns.append(Annotation(tuple(float(v) for v in c), float(r)))
    return hu, anns


def gen_synth_scan(spec: SynthDomainSpec, index: int, scan_id: str | None = None) -> ScanRecord:
    hu, anns = gen_synth_hu(spec, index)
    sid = scan_id if scan_id is not None else f"{spec.name}-{index:04d}"
    return ScanRecord(sid, hu_clip_rescale(hu), (1.0, 1.0, 1.0), anns)


def split_counts(n: int, ratios=SPLIT_RATIOS) -> tuple[int, int, int]:
    """Train/val/test sizes for ``n`` scans at 7:1:2 (largest remainder)."""
    total = sum(ratios)
    raw = [n * r / total for r in ratios]
    counts = [int(math.floor(x)) for x in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


def assign_splits(n: int) -> list[str]:
    tr, va, te = split_counts(n)
    return ["train"] * tr + ["val"] * va + ["test"] * te


# -- I/O -------------------------------------------------------------------

def scan_dir(root, scan_id) -> Path:
    return Path(root) / f"scan_{scan_id}"


def write_scan(scan: ScanRecord, root) -> Path:
    d = scan_dir(root, scan.id)
    d.mkdir(parents=True, exist_ok=True)
    header = {"id": scan.id, "dims": list(scan.voxels.shape), "spacing": list(scan.spacing),
              "dtype": "u8", "version": HEADER_VERSION}
    (d / "header.json").write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")
    (d / "voxels.raw").write_bytes(np.ascontiguousarray(scan.voxels, dtype=np.uint8).tobytes())
    return d


def read_scan(path, annotations=None) -> ScanRecord:
    """Load ``scan_<id>/``. ``annotations`` maps scan id to a list of Annotation."""
    d = Path(path)
    try:
        header = json.loads((d / "header.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{d}: unreadable header.json ({exc})") from exc
    for key in ("dims", "spacing", "dtype", "version"):
        if key not in header:
            raise ValueError(f"{d}: header missing {key!r}")
    if header["dtype"] != "u8":
        raise ValueError(f"{d}: unsupported dtype {header['dtype']!r}")
    if header["version"] != HEADER_VERSION:
        raise ValueError(f"{d}: unsupported header version {header['version']}")
    dims = tuple(int(v) for v in header["dims"])
    if len(dims) != 3 or any(v <= 0 for v in dims):
        raise ValueError(f"{d}: malformed dims {header['dims']}")
    raw = (d / "voxels.raw").read_bytes()
    expected = dims[0] * dims[1] * dims[2]
    if len(raw) != expected:
        raise ValueError(f"{d}: voxels.raw has {len(raw)} bytes, dims {dims} need {expected}")
    sid = header.get("id", d.name.removeprefix("scan_"))
    voxels = np.frombuffer(raw, dtype=np.uint8).reshape(dims).copy()
    anns = list((annotations or {}).get(sid, []))
    return ScanRecord(sid, voxels, tuple(header["spacing"]), anns)


def write_manifest(root, entries) -> Path:
    path = Path(root) / "dataset.json"
    path.write_text(json.dumps({"version": 1, "scans": entries}, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(root) -> list[dict]:
    data = json.loads((Path(root) / "dataset.json").read_text())
    return data["scans"]


def load_split(root, domain: str, split: str, with_annotations: bool = True) -> list[ScanRecord]:
    from .froc import read_annotations_csv

    root = Path(root)
    anns = read_annotations_csv(root / "annotations.csv") if with_annotations else {}
    return [read_scan(scan_dir(root, e["id"]), anns) for e in read_manifest(root)
            if e["domain"] == domain and e["split"] == split]
