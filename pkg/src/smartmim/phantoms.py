"""Synthetic 3D phantoms, volume I/O and augmented view sampling."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError, PlacementError, ShapeError, ValidationError

SHAPE_CLASSES = ("sphere", "box", "shell")
RAW_MAGIC = b"SMRTVOL1"
_RAW_HEADER = struct.Struct("<8s3I3fII8x")  # 48 bytes
_NO_LABEL = 0xFFFFFFFF


@dataclass
class VolumeSample:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    label: Optional[int] = None
    roi: Optional[np.ndarray] = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValidationError(f"spacing must be three positive values, got {self.spacing}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValidationError("volume contains non-finite intensities")
        if self.roi is not None:
            self.roi = np.asarray(self.roi, dtype=bool)
            if self.roi.shape != self.voxels.shape:
                raise ShapeError(f"roi shape {self.roi.shape} != voxel shape {self.voxels.shape}")


@dataclass
class PhantomSpec:
    grid_size: int = 32
    n_structures: int = 1
    structure_classes: Sequence[str] = ("sphere",)
    intensity_contrast: float = 1.0
    seed: int = 0
    size_range: tuple[int, int] = (4, 8)
    max_retries: int = 200

    def __post_init__(self):
        if self.grid_size < 8:
            raise ValidationError("grid_size must be >= 8")
        if self.n_structures < 0:
            raise ValidationError("n_structures must be >= 0")
        if self.n_structures > 0 and self.intensity_contrast == 0:
            raise ValidationError("intensity_contrast must be nonzero when structures are placed")
        bad = set(self.structure_classes) - set(SHAPE_CLASSES)
        if bad or not self.structure_classes:
            raise ValidationError(f"unknown structure classes {sorted(bad)}")
        lo, hi = self.size_range
        if lo < 1 or hi < lo:
            raise ValidationError(f"bad size_range {self.size_range}")


@dataclass
class ViewPair:
    u: np.ndarray
    v: np.ndarray
    provenance: dict = field(default_factory=dict)


# ---------------------------------------------------------------- phantoms

def _shape_mask(kind: str, size: int, center, shape, rng) -> np.ndarray:
    zz, yy, xx = np.ogrid[:shape[0], :shape[1], :shape[2]]
    dz, dy, dx = zz - center[0], yy - center[1], xx - center[2]
    if kind == "sphere":
        return dz * dz + dy * dy + dx * dx <= size * size
    if kind == "shell":
        r2 = dz * dz + dy * dy + dx * dx
        inner = max(size - max(2, size // 3), 0)
        return (r2 <= size * size) & (r2 > inner * inner)
    half = [int(rng.integers(max(1, size - 2), size + 1)) for _ in range(3)]
    return (np.abs(dz) <= half[0]) & (np.abs(dy) <= half[1]) & (np.abs(dx) <= half[2])


def generate_phantom(spec: PhantomSpec) -> VolumeSample:
    """Gaussian-noise background with ``n_structures`` non-overlapping bright shapes.

    Deterministic in ``spec``. The label is the class id (index into
    ``SHAPE_CLASSES``) covering the most voxels, or None for an empty phantom.
    """
    rng = np.random.default_rng(spec.seed)
    shape = (spec.grid_size,) * 3
    sd = 0.1 * abs(spec.intensity_contrast) if spec.intensity_contrast else 0.1
    noise = rng.normal(0.0, sd, size=shape)
    roi = np.zeros(shape, dtype=bool)
    counts = np.zeros(len(SHAPE_CLASSES), dtype=np.int64)
    classes = list(spec.structure_classes)
    for _ in range(spec.n_structures):
        for _attempt in range(spec.max_retries):
            kind = classes[int(rng.integers(len(classes)))]
            size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            if 2 * size + 1 > spec.grid_size:
                continue
            center = rng.integers(size, spec.grid_size - size, size=3)
            mask = _shape_mask(kind, size, center, shape, rng)
            # one-voxel clearance keeps structures from touching
            if not (ndimage.binary_dilation(mask) & roi).any():
                roi |= mask
                counts[SHAPE_CLASSES.index(kind)] += mask.sum()
                break
        else:
            raise PlacementError(
                f"could not place structure without overlap after {spec.max_retries} tries")
    voxels = noise + spec.intensity_contrast * roi
    label = int(np.argmax(counts)) if spec.n_structures else None
    return VolumeSample(voxels.astype(np.float32), (1.0, 1.0, 1.0), label, roi)


def phantom_set(n: int, seed: int, **spec_kw) -> list[VolumeSample]:
    """``n`` phantoms from consecutive derived seeds."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [generate_phantom(PhantomSpec(seed=int(s), **spec_kw)) for s in seeds]


# ---------------------------------------------------------------- volume I/O

def write_raw_volume(path, vol: VolumeSample):
    dims = vol.voxels.shape
    label = _NO_LABEL if vol.label is None else int(vol.label)
    header = _RAW_HEADER.pack(RAW_MAGIC, *dims, *vol.spacing, label, int(vol.roi is not None))
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(vol.voxels, dtype="<f4").tobytes())
        if vol.roi is not None:
            f.write(np.ascontiguousarray(vol.roi, dtype=np.uint8).tobytes())


def read_raw_volume(path) -> VolumeSample:
    data = Path(path).read_bytes()
    if len(data) < _RAW_HEADER.size:
        raise FormatError(f"{path}: file shorter than the 48-byte header")
    magic, d, h, w, sx, sy, sz, label, has_roi = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    n = d * h * w
    expected = _RAW_HEADER.size + 4 * n + (n if has_roi else 0)
    if len(data) != expected:
        raise FormatError(f"{path}: {len(data)} bytes, header implies {expected}")
    voxels = np.frombuffer(data, dtype="<f4", count=n, offset=_RAW_HEADER.size).reshape(d, h, w)
    roi = None
    if has_roi:
        roi = np.frombuffer(data, dtype=np.uint8, count=n, offset=_RAW_HEADER.size + 4 * n)
        roi = roi.reshape(d, h, w).astype(bool)
    spacing = (sx, sy, sz)
    if min(spacing) <= 0:
        raise ValidationError(f"{path}: non-positive spacing {spacing}")
    return VolumeSample(voxels.astype(np.float32), spacing,
                        None if label == _NO_LABEL else int(label), roi)


def _read_nifti(path) -> VolumeSample:
    import nibabel as nib

    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
        zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    except Exception as exc:
        raise FormatError(f"{path}: unreadable NIfTI ({exc})") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise FormatError(f"{path}: expected a scalar 3D volume, got shape {data.shape}")
    if min(zooms) <= 0:
        raise ValidationError(f"{path}: non-positive spacing {zooms}")
    return VolumeSample(data, zooms)


def load_volume(path) -> VolumeSample:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    with open(path, "rb") as f:
        head = f.read(8)
    if head == RAW_MAGIC:
        return read_raw_volume(path)
    if path.name.endswith((".nii", ".nii.gz")):
        return _read_nifti(path)
    raise FormatError(f"{path}: neither a raw volume nor NIfTI")


def resample(vol: VolumeSample, target_spacing) -> VolumeSample:
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise ValidationError(f"target spacing must be three positive values, got {target}")
    if target == vol.spacing:
        return vol
    shape = vol.voxels.shape
    new_shape = tuple(max(1, int(round(n * s / t))) for n, s, t in zip(shape, vol.spacing, target))
    # output voxel j sits at physical position j * target from the first voxel centre
    coords = np.meshgrid(*[np.arange(m) * t / s for m, s, t in zip(new_shape, vol.spacing, target)],
                         indexing="ij")
    voxels = ndimage.map_coordinates(vol.voxels.astype(np.float64), coords, order=1, mode="nearest")
    roi = None
    if vol.roi is not None:
        roi = ndimage.map_coordinates(vol.roi.astype(np.uint8), coords, order=0, mode="nearest") > 0
    return VolumeSample(voxels.astype(np.float32), target, vol.label, roi)


def ingest_volume(path, target_spacing=(2.0, 2.0, 2.0)) -> VolumeSample:
    """Read a raw or NIfTI volume and resample it trilinearly to ``target_spacing`` mm."""
    return resample(load_volume(path), target_spacing)


# ---------------------------------------------------------------- views

def normalize_crop(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return ((x - x.mean()) / (sd if sd > 1e-8 else 1.0)).astype(np.float32)


def sample_views(volume: VolumeSample, crop_size: int, rng: np.random.Generator, *,
                 augment: bool = True, shift: float = 0.1, scale: float = 0.1,
                 normalize: bool = True) -> ViewPair:
    """Two independently placed cubic crops with independent intensity jitter."""
    shape = volume.voxels.shape
    if crop_size < 1 or any(crop_size > s for s in shape):
        raise ValidationError(f"crop {crop_size} larger than volume {shape}")
    crops, prov = [], {}
    for name in ("u", "v"):
        off = tuple(int(rng.integers(0, s - crop_size + 1)) for s in shape)
        x = volume.voxels[off[0]:off[0] + crop_size, off[1]:off[1] + crop_size,
                          off[2]:off[2] + crop_size].copy()
        a, b = 1.0, 0.0
        if augment:
            a = float(1.0 + rng.uniform(-scale, scale))
            b = float(rng.uniform(-shift, shift))
            x = x * a + b
        if normalize:
            x = normalize_crop(x)
        crops.append(x.astype(np.float32))
        prov[name] = {"offset": off, "scale": a, "shift": b}
    prov["normalize"] = normalize
    return ViewPair(crops[0], crops[1], prov)


def center_crop(volume: VolumeSample, crop_size: int, normalize: bool = True):
    """Deterministic central crop of voxels (and roi), used for evaluation."""
    shape = volume.voxels.shape
    if any(crop_size > s for s in shape):
        raise ValidationError(f"crop {crop_size} larger than volume {shape}")
    off = [(s - crop_size) // 2 for s in shape]
    sl = tuple(slice(o, o + crop_size) for o in off)
    x = volume.voxels[sl]
    x = normalize_crop(x) if normalize else x.astype(np.float32)
    roi = None if volume.roi is None else volume.roi[sl]
    return x, roi
