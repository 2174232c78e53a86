"""Volumes, masks, NIfTI I/O, preprocessing and the phantom generator.

Conventions:
  - Volume.data is a float32 (H, W, D) array, HU before windowing, dimensionless after.
  - VoxelMask.data is a uint8 (H, W, D) array with values in {0, 1}.
  - orientation is a nibabel axis-code triple ("R","A","S" = identity affine):
    each code names the world direction the voxel axis increases towards.
  - spacing and origin are in mm; origin is the world position of voxel (0, 0, 0).

Both types are immutable: the payload array is copied and flagged read-only on
construction. Every operation returns a new value.

Case directories (one per case):
  volume.nii.gz, organ.nii.gz, lesion.nii.gz, meta.json

This module does NOT deal with networks or training.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError
from nibabel.orientations import apply_orientation, axcodes2ornt, inv_ornt_aff, ornt_transform
from nibabel.spatialimages import HeaderDataError
from scipy import ndimage as ndi
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

log = logging.getLogger(__name__)

# --- Default constants ------------------------------------------------------

DEFAULT_AXCODES: tuple[str, str, str] = ("R", "A", "S")
_AXIS_PAIRS = (("R", "L"), ("A", "P"), ("S", "I"))

VOLUME_FILE = "volume.nii.gz"
ORGAN_FILE = "organ.nii.gz"
LESION_FILE = "lesion.nii.gz"
META_FILE = "meta.json"

# 6-connectivity (faces only)
CONNECTIVITY_6 = ndi.generate_binary_structure(3, 1)


class VolumeError(ValueError):
    pass


class VolumeIOError(VolumeError):
    pass


class PhantomError(VolumeError):
    pass


# --- Types ------------------------------------------------------------------


def _check_triple(name: str, xs: Sequence[float], *, positive: bool = False) -> tuple[float, float, float]:
    if len(xs) != 3:
        raise VolumeError(f"{name} must have 3 components, got {len(xs)}")
    out = tuple(float(x) for x in xs)
    if not all(np.isfinite(out)):
        raise VolumeError(f"{name} must be finite: {out}")
    if positive and any(x <= 0 for x in out):
        raise VolumeError(f"{name} components must be > 0: {out}")
    return out  # type: ignore[return-value]


def validate_axcodes(axcodes: Sequence[str]) -> tuple[str, str, str]:
    codes = tuple(str(c).upper() for c in axcodes)
    if len(codes) != 3:
        raise VolumeError(f"invalid axcodes: {axcodes!r}")
    seen = []
    for c in codes:
        pair = next((i for i, p in enumerate(_AXIS_PAIRS) if c in p), None)
        if pair is None or pair in seen:
            raise VolumeError(f"invalid axcodes: {axcodes!r}")
        seen.append(pair)
    return codes  # type: ignore[return-value]


@dataclass(frozen=True)
class WindowSpec:
    lo: float
    hi: float
    out_lo: float
    out_hi: float

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise VolumeError(f"window lo must be < hi: lo={self.lo} hi={self.hi}")
        if not self.out_lo < self.out_hi:
            raise VolumeError(f"window out_lo must be < out_hi: out_lo={self.out_lo} out_hi={self.out_hi}")


# Abdominal window, mapped to the autoencoder range and to the segmentation range.
AE_WINDOW = WindowSpec(-175.0, 250.0, -1.0, 1.0)
SEG_WINDOW = WindowSpec(-175.0, 250.0, 0.0, 1.0)


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with physical geometry."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: tuple[str, str, str] = DEFAULT_AXCODES
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # window applied by window_normalize, None for raw HU
    window: WindowSpec | None = None

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 3:
            raise VolumeError(f"non-3D payload: shape={arr.shape}")
        if min(arr.shape) < 1:
            raise VolumeError(f"degenerate extent: shape={arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_triple("spacing", self.spacing, positive=True))
        object.__setattr__(self, "origin", _check_triple("origin", self.origin))
        object.__setattr__(self, "orientation", validate_axcodes(self.orientation))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)  # type: ignore[return-value]

    def affine(self) -> np.ndarray:
        return geometry_affine(self.spacing, self.orientation, self.origin)

    def with_data(self, data: np.ndarray) -> Volume:
        return replace(self, data=data)


@dataclass(frozen=True)
class VoxelMask:
    """A binary grid on the same lattice as its paired Volume."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: tuple[str, str, str] = DEFAULT_AXCODES
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        raw = np.asarray(self.data)
        if raw.ndim != 3:
            raise VolumeError(f"non-3D payload: shape={raw.shape}")
        if raw.dtype != np.bool_ and not np.isin(raw, (0, 1)).all():
            raise VolumeError("mask values must be in {0, 1}")
        arr = np.array(raw, dtype=np.uint8, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", _check_triple("spacing", self.spacing, positive=True))
        object.__setattr__(self, "origin", _check_triple("origin", self.origin))
        object.__setattr__(self, "orientation", validate_axcodes(self.orientation))

    @classmethod
    def empty_like(cls, ref: Volume | VoxelMask) -> VoxelMask:
        return cls(np.zeros(ref.shape, dtype=np.uint8), ref.spacing, ref.orientation, ref.origin)

    @classmethod
    def like(cls, ref: Volume | VoxelMask, data: np.ndarray) -> VoxelMask:
        return cls(np.asarray(data).astype(np.uint8), ref.spacing, ref.orientation, ref.origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)  # type: ignore[return-value]

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)

    def count(self) -> int:
        return int(self.data.sum())

    def any(self) -> bool:
        return bool(self.data.any())

    def affine(self) -> np.ndarray:
        return geometry_affine(self.spacing, self.orientation, self.origin)


def geometry_affine(
    spacing: Sequence[float], orientation: Sequence[str], origin: Sequence[float]
) -> np.ndarray:
    """Voxel -> world (RAS+) affine for an axis-aligned grid."""
    aff = np.eye(4)
    aff[:3, :3] = 0.0
    for i, code in enumerate(orientation):
        world = next(j for j, p in enumerate(_AXIS_PAIRS) if code in p)
        sign = 1.0 if code == _AXIS_PAIRS[world][0] else -1.0
        aff[world, i] = sign * float(spacing[i])
    aff[:3, 3] = origin
    return aff


def same_grid(a: Volume | VoxelMask, b: Volume | VoxelMask) -> bool:
    return a.shape == b.shape and np.allclose(a.spacing, b.spacing)


def require_same_grid(a: Volume | VoxelMask, b: Volume | VoxelMask, what: str = "grid") -> None:
    if not same_grid(a, b):
        raise VolumeError(f"{what} mismatch: shape {a.shape} vs {b.shape}, spacing {a.spacing} vs {b.spacing}")


# --- NIfTI I/O --------------------------------------------------------------


def _load_image(path: str | Path) -> nib.Nifti1Image:
    p = Path(path)
    if not p.is_file():
        raise VolumeIOError(f"missing file: {p}")
    try:
        img = nib.load(str(p))
        shape = img.shape
    except (ImageFileError, HeaderDataError, EOFError, OSError) as e:
        raise VolumeIOError(f"malformed header: {p} ({e})") from e
    if len(shape) != 3:
        raise VolumeIOError(f"non-3D payload: shape={tuple(shape)} in {p}")
    return img


def _geometry_from_image(img: nib.Nifti1Image) -> dict:
    aff = img.affine
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return {
        "spacing": spacing,
        "orientation": tuple(nib.aff2axcodes(aff)),
        "origin": tuple(float(x) for x in aff[:3, 3]),
    }


_WINDOW_TAG = "window="


def _window_descrip(window: WindowSpec | None) -> str:
    if window is None:
        return ""
    text = _WINDOW_TAG + ",".join(repr(float(v)) for v in (window.lo, window.hi, window.out_lo, window.out_hi))
    # NIfTI-1 descrip holds 80 bytes
    if len(text) > 79:
        raise VolumeIOError(f"window does not fit the NIfTI descrip field: {window}")
    return text


def _window_from_descrip(img: nib.Nifti1Image, path: str | Path) -> WindowSpec | None:
    raw = img.header["descrip"]
    text = (raw.item() if hasattr(raw, "item") else raw).decode("ascii", errors="replace").strip("\x00 ")
    if not text.startswith(_WINDOW_TAG):
        return None
    try:
        lo, hi, out_lo, out_hi = (float(v) for v in text[len(_WINDOW_TAG) :].split(","))
        return WindowSpec(lo, hi, out_lo, out_hi)
    except (ValueError, VolumeError) as e:
        raise VolumeIOError(f"malformed window in header: {path} ({text!r})") from e


def load_volume(path: str | Path) -> Volume:
    img = _load_image(path)
    try:
        data = np.asanyarray(img.dataobj).astype(np.float32, copy=False)
    except (EOFError, OSError, ValueError) as e:
        raise VolumeIOError(f"malformed payload: {path} ({e})") from e
    return Volume(data, window=_window_from_descrip(img, path), **_geometry_from_image(img))


def load_mask(path: str | Path) -> VoxelMask:
    img = _load_image(path)
    data = np.asanyarray(img.dataobj)
    try:
        return VoxelMask(np.rint(data).astype(np.uint8) if data.dtype.kind == "f" else data, **_geometry_from_image(img))
    except VolumeError as e:
        raise VolumeIOError(f"{e}: {path}") from e


def _save_image(data: np.ndarray, affine: np.ndarray, path: str | Path, descrip: str = "") -> None:
    p = Path(path)
    if not p.parent.is_dir():
        raise VolumeIOError(f"unwritable path: parent directory missing for {p}")
    img = nib.Nifti1Image(data, affine)
    img.header.set_xyzt_units("mm")
    img.header.set_data_dtype(data.dtype)
    if descrip:
        img.header["descrip"] = descrip.encode("ascii")
    try:
        nib.save(img, str(p))
    except OSError as e:
        raise VolumeIOError(f"unwritable path: {p} ({e})") from e


def save_volume(volume: Volume, path: str | Path) -> None:
    _save_image(np.asarray(volume.data, dtype=np.float32), volume.affine(), path, _window_descrip(volume.window))


def save_mask(mask: VoxelMask, path: str | Path) -> None:
    _save_image(np.asarray(mask.data, dtype=np.uint8), mask.affine(), path)


# --- Preprocessing ----------------------------------------------------------


def reorient(volume: Volume | VoxelMask, axcodes: Sequence[str]) -> Volume | VoxelMask:
    """Permute/flip data axes so that the orientation equals `axcodes`."""
    target = validate_axcodes(axcodes)
    if target == volume.orientation:
        return volume
    transform = ornt_transform(axcodes2ornt(volume.orientation), axcodes2ornt(target))
    data = apply_orientation(np.asarray(volume.data), transform)
    spacing = [0.0, 0.0, 0.0]
    for i, (j, _flip) in enumerate(transform):
        spacing[int(j)] = volume.spacing[i]
    affine = volume.affine() @ inv_ornt_aff(transform, volume.shape)
    return replace(
        volume,
        data=np.ascontiguousarray(data),
        spacing=tuple(spacing),
        orientation=target,
        origin=tuple(float(x) for x in affine[:3, 3]),
    )


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(int)


def resample_isotropic(
    volume: Volume | VoxelMask,
    target_spacing: float,
    interp: str = "linear",
) -> Volume | VoxelMask:
    """Resample onto an isotropic grid with voxel-center alignment.

    Output shape is round-half-up(shape * spacing / target). Voxel j of the output
    samples input coordinate (j + 0.5) * target / spacing - 0.5, edges clamp.
    """
    if interp not in {"linear", "nearest"}:
        raise VolumeError(f"unknown interp: {interp!r}")
    if not target_spacing > 0:
        raise VolumeError(f"target_spacing must be > 0, got {target_spacing}")
    if isinstance(volume, VoxelMask) and interp != "nearest":
        raise VolumeError("masks must be resampled with interp='nearest'")

    in_shape = np.asarray(volume.shape, dtype=np.float64)
    spacing = np.asarray(volume.spacing, dtype=np.float64)
    out_shape = tuple(int(s) for s in _round_half_up(in_shape * spacing / target_spacing))
    if min(out_shape) < 1:
        raise VolumeError(f"degenerate extent: shape={volume.shape} spacing={volume.spacing} target={target_spacing}")

    scale = target_spacing / spacing
    offset = 0.5 * scale - 0.5
    order = 1 if interp == "linear" else 0
    src = np.asarray(volume.data, dtype=np.float32)
    out = ndi.affine_transform(src, scale, offset=offset, output_shape=out_shape, order=order, mode="nearest")

    origin = volume.affine() @ np.append(offset, 1.0)
    fields = {"spacing": (float(target_spacing),) * 3, "origin": tuple(float(x) for x in origin[:3])}
    if isinstance(volume, VoxelMask):
        return replace(volume, data=np.rint(out).astype(np.uint8), **fields)
    return replace(volume, data=out, **fields)


def window_normalize(volume: Volume, spec: WindowSpec) -> Volume:
    """Clip to [lo, hi] and map affinely onto [out_lo, out_hi].

    A volume already normalized with `spec` is returned as is.
    """
    if volume.window == spec:
        return volume
    x = np.clip(np.asarray(volume.data, dtype=np.float64), spec.lo, spec.hi)
    y = spec.out_lo + (x - spec.lo) * (spec.out_hi - spec.out_lo) / (spec.hi - spec.lo)
    y = np.clip(y, spec.out_lo, spec.out_hi)
    return replace(volume, data=y.astype(np.float32), window=spec)


def preprocess(
    volume: Volume,
    *,
    axcodes: Sequence[str] = DEFAULT_AXCODES,
    spacing: float = 1.0,
    window: WindowSpec = AE_WINDOW,
) -> Volume:
    """reorient -> resample_isotropic (linear) -> window_normalize."""
    v = reorient(volume, axcodes)
    v = resample_isotropic(v, spacing, "linear")
    return window_normalize(v, window)


def preprocess_mask(mask: VoxelMask, *, axcodes: Sequence[str] = DEFAULT_AXCODES, spacing: float = 1.0) -> VoxelMask:
    m = reorient(mask, axcodes)
    return resample_isotropic(m, spacing, "nearest")


def crop_patch(
    volume: Volume | VoxelMask,
    center: Sequence[int],
    size: Sequence[int],
    pad_value: float = 0.0,
) -> Volume | VoxelMask:
    """Return a `size`-shaped patch whose voxel `size // 2` sits on `center`.

    Out-of-bounds regions are filled with `pad_value` (0 for masks).
    """
    size_t = tuple(int(s) for s in size)
    if len(size_t) != 3 or min(size_t) < 1:
        raise VolumeError(f"patch size components must be >= 1: {size}")
    start = np.asarray(center, dtype=int) - np.asarray(size_t) // 2
    is_mask = isinstance(volume, VoxelMask)
    fill = 0 if is_mask else pad_value
    out = np.full(size_t, fill, dtype=volume.data.dtype)

    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(start + np.asarray(size_t), np.asarray(volume.shape))
    if np.all(src_hi > src_lo):
        dst_lo = src_lo - start
        dst_hi = dst_lo + (src_hi - src_lo)
        out[dst_lo[0] : dst_hi[0], dst_lo[1] : dst_hi[1], dst_lo[2] : dst_hi[2]] = volume.data[
            src_lo[0] : src_hi[0], src_lo[1] : src_hi[1], src_lo[2] : src_hi[2]
        ]

    origin = volume.affine() @ np.append(start.astype(np.float64), 1.0)
    return replace(volume, data=out, origin=tuple(float(x) for x in origin[:3]))


def paste_patch(base: np.ndarray, patch: np.ndarray, center: Sequence[int]) -> np.ndarray:
    """Inverse of crop_patch on raw arrays: writes the in-bounds part of `patch` into a copy of `base`."""
    out = np.array(base, copy=True)
    size = np.asarray(patch.shape)
    start = np.asarray(center, dtype=int) - size // 2
    lo = np.maximum(start, 0)
    hi = np.minimum(start + size, np.asarray(base.shape))
    if np.all(hi > lo):
        plo = lo - start
        phi = plo + (hi - lo)
        out[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = patch[plo[0] : phi[0], plo[1] : phi[1], plo[2] : phi[2]]
    return out


def random_crop_center(mask: VoxelMask | None, shape: Sequence[int], rng: np.random.Generator, fg_ratio: float) -> tuple[int, int, int]:
    """Draw a crop center: a mask-positive voxel with probability `fg_ratio`, else a background voxel."""
    if not 0.0 <= fg_ratio <= 1.0:
        raise VolumeError(f"fg_ratio must be in [0, 1], got {fg_ratio}")
    pick_fg = rng.random() < fg_ratio
    if mask is not None and mask.any():
        pool = np.argwhere(mask.data > 0) if pick_fg else np.argwhere(mask.data == 0)
        if len(pool):
            return tuple(int(v) for v in pool[rng.integers(len(pool))])  # type: ignore[return-value]
    return tuple(int(rng.integers(s)) for s in shape)  # type: ignore[return-value]


def crop_random_patch(
    volume: Volume,
    mask: VoxelMask | None,
    size: Sequence[int],
    rng: np.random.Generator,
    fg_ratio: float = 0.5,
) -> tuple[Volume, VoxelMask | None, tuple[int, int, int]]:
    center = random_crop_center(mask, volume.shape, rng, fg_ratio)
    patch = crop_patch(volume, center, size)
    mpatch = crop_patch(mask, center, size) if mask is not None else None
    return patch, mpatch, center  # type: ignore[return-value]


# --- Geometry helpers -------------------------------------------------------


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    labels, n = ndi.label(np.asarray(mask) > 0, structure=CONNECTIVITY_6)
    return labels, int(n)


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = label_components(mask)
    if n <= 1:
        return labels > 0
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def max_diameter_mm(mask: np.ndarray, spacing: Sequence[float]) -> float:
    """Largest distance between two foreground voxel centers, in mm."""
    pts = np.argwhere(np.asarray(mask) > 0).astype(np.float64) * np.asarray(spacing, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    if len(pts) > 64:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass  # coplanar set, fall back to all points
    return float(pdist(pts).max())


# --- Phantom generator ------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    grid_shape: tuple[int, int, int] = (64, 64, 64)
    spacing_mm: float = 1.0
    organ_radius_range: tuple[float, float] = (18.0, 24.0)
    organ_mean: float = 60.0
    organ_label: str = "liver"
    background_mean: float = -80.0
    background_noise_sigma: float = 10.0
    # amplitude of the smoothed perturbation that makes the organ a blob
    organ_irregularity: float = 0.25
    with_lesion: bool = True
    lesion_radius_range: tuple[float, float] = (3.0, 7.0)
    lesion_contrast: float = -50.0
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.grid_shape) != 3 or min(self.grid_shape) < 8:
            raise PhantomError(f"grid_shape must be 3 sides >= 8: {self.grid_shape}")
        if not self.spacing_mm > 0:
            raise PhantomError("spacing_mm must be > 0")
        lo, hi = self.organ_radius_range
        if not 0 < lo <= hi:
            raise PhantomError(f"invalid organ_radius_range: {self.organ_radius_range}")
        llo, lhi = self.lesion_radius_range
        if not 0 < llo <= lhi:
            raise PhantomError(f"invalid lesion_radius_range: {self.lesion_radius_range}")
        if self.background_noise_sigma < 0:
            raise PhantomError("background_noise_sigma must be >= 0")
        if not 0 <= self.organ_irregularity < 1:
            raise PhantomError("organ_irregularity must be in [0, 1)")
        # organ (at max radius, max bulge) + 1 voxel margin must fit
        half_extent_mm = (min(self.grid_shape) / 2.0 - 1.0) * self.spacing_mm
        if hi * (1.0 + self.organ_irregularity) > half_extent_mm:
            raise PhantomError(
                f"organ cannot fit: radius {hi} mm (+{self.organ_irregularity:.0%}) > half extent {half_extent_mm} mm"
            )

    def to_dict(self) -> dict:
        return asdict(self)


# Organ presets: different size, density and lesion look so multi-organ studies have distinct classes.
ORGAN_PRESETS: dict[str, dict] = {
    "liver": {"organ_radius_range": (18.0, 24.0), "organ_mean": 60.0, "organ_irregularity": 0.25},
    "pancreas": {"organ_radius_range": (12.0, 16.0), "organ_mean": 40.0, "organ_irregularity": 0.35},
    "kidney": {"organ_radius_range": (10.0, 14.0), "organ_mean": 30.0, "organ_irregularity": 0.2},
}


def phantom_spec_for(organ: str, **overrides) -> PhantomSpec:
    if organ not in ORGAN_PRESETS:
        raise PhantomError(f"unknown organ preset: {organ!r} (known: {sorted(ORGAN_PRESETS)})")
    fields = dict(ORGAN_PRESETS[organ])
    fields.update(overrides)
    return PhantomSpec(organ_label=organ, **fields)


def _mm_grid(shape: tuple[int, int, int], spacing: float, center: np.ndarray) -> list[np.ndarray]:
    axes = [(np.arange(n) - c) * spacing for n, c in zip(shape, center)]
    return np.meshgrid(*axes, indexing="ij")


def make_phantom(spec: PhantomSpec) -> tuple[Volume, VoxelMask, VoxelMask]:
    """Generate (volume in HU, organ mask, lesion mask). The lesion mask is empty when not requested."""
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(s) for s in spec.grid_shape)
    sp = float(spec.spacing_mm)
    geom = {"spacing": (sp, sp, sp)}

    # organ: sphere + smoothed perturbation of the radius, thresholded
    radius = rng.uniform(*spec.organ_radius_range)
    max_bulge = radius * (1.0 + spec.organ_irregularity)
    slack = np.asarray(shape) / 2.0 - 1.0 - max_bulge / sp
    center = np.asarray(shape) / 2.0 - 0.5 + rng.uniform(-1.0, 1.0, size=3) * np.maximum(slack, 0.0)
    xx, yy, zz = _mm_grid(shape, sp, center)
    dist = np.sqrt(xx**2 + yy**2 + zz**2)

    noise = ndi.gaussian_filter(rng.standard_normal(shape), sigma=max(radius / sp / 3.0, 1.0))
    noise /= max(float(np.abs(noise).max()), 1e-12)
    organ = dist <= radius * (1.0 + spec.organ_irregularity * noise)
    organ = ndi.binary_fill_holes(largest_component(organ))
    organ[[0, -1], :, :] = False
    organ[:, [0, -1], :] = False
    organ[:, :, [0, -1]] = False
    organ = largest_component(organ)
    if not organ.any():
        raise PhantomError("organ cannot fit: empty organ after thresholding")

    lesion = np.zeros(shape, dtype=bool)
    if spec.with_lesion:
        depth = ndi.distance_transform_edt(organ, sampling=geom["spacing"])
        r = rng.uniform(*spec.lesion_radius_range)
        candidates = np.argwhere(depth >= r + sp)
        while len(candidates) == 0 and r > sp:
            r *= 0.8
            candidates = np.argwhere(depth >= r + sp)
        if len(candidates) == 0:
            log.warning("[phantom] seed=%d no room for a lesion, leaving it empty", spec.seed)
        else:
            lc = candidates[rng.integers(len(candidates))].astype(np.float64)
            lx, ly, lz = _mm_grid(shape, sp, lc)
            lesion = (np.sqrt(lx**2 + ly**2 + lz**2) <= r) & organ

    data = np.full(shape, spec.background_mean, dtype=np.float64)
    data[organ] = spec.organ_mean
    data[lesion] += spec.lesion_contrast
    data += rng.normal(0.0, spec.background_noise_sigma, size=shape)

    volume = Volume(data.astype(np.float32), **geom)
    return volume, VoxelMask(organ, **geom), VoxelMask(lesion, **geom)


# --- Cases ------------------------------------------------------------------


@dataclass(frozen=True)
class Case:
    case_id: str
    volume: Volume
    organ: VoxelMask
    tumor: VoxelMask
    organ_label: str = "liver"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        require_same_grid(self.volume, self.organ, "organ grid")
        require_same_grid(self.volume, self.tumor, "tumor grid")

    @property
    def healthy(self) -> bool:
        return not self.tumor.any()


def save_case(case: Case, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_volume(case.volume, d / VOLUME_FILE)
    save_mask(case.organ, d / ORGAN_FILE)
    save_mask(case.tumor, d / LESION_FILE)
    meta = {"case": case.case_id, "organ_label": case.organ_label, **case.meta}
    (d / META_FILE).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return d


def load_case(directory: str | Path) -> Case:
    d = Path(directory)
    meta_path = d / META_FILE
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.is_file() else {}
    volume = load_volume(d / VOLUME_FILE)
    organ = load_mask(d / ORGAN_FILE)
    tumor = load_mask(d / LESION_FILE) if (d / LESION_FILE).is_file() else VoxelMask.empty_like(volume)
    case_id = str(meta.pop("case", d.name))
    organ_label = str(meta.pop("organ_label", "liver"))
    return Case(case_id, volume, organ, tumor, organ_label, meta)


def case_dirs(root: str | Path) -> list[Path]:
    r = Path(root)
    if (r / VOLUME_FILE).is_file():
        return [r]
    if not r.is_dir():
        raise VolumeIOError(f"missing directory: {r}")
    return sorted(p for p in r.iterdir() if (p / VOLUME_FILE).is_file())


def iter_cases(root: str | Path, jobs: int = 1) -> Iterator[Case]:
    """Yield cases under `root` in sorted directory order; loading may run on `jobs` threads."""
    dirs = case_dirs(root)
    if jobs <= 1:
        for d in dirs:
            yield load_case(d)
        return
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        yield from pool.map(load_case, dirs)


def load_cases(root: str | Path, jobs: int = 1) -> list[Case]:
    return list(iter_cases(root, jobs))


__all__ = [
    "AE_WINDOW",
    "SEG_WINDOW",
    "Case",
    "PhantomError",
    "PhantomSpec",
    "Volume",
    "VolumeError",
    "VolumeIOError",
    "VoxelMask",
    "WindowSpec",
    "crop_patch",
    "crop_random_patch",
    "iter_cases",
    "label_components",
    "largest_component",
    "load_case",
    "load_cases",
    "load_mask",
    "load_volume",
    "make_phantom",
    "max_diameter_mm",
    "paste_patch",
    "phantom_spec_for",
    "preprocess",
    "random_crop_center",
    "reorient",
    "resample_isotropic",
    "save_case",
    "save_mask",
    "save_volume",
    "window_normalize",
]
