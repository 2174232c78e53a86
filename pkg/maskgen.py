"""Procedural tumor masks: ellipsoid -> elastic deformation -> placement inside an organ.

Size classes (max diameter):
  early   < 20 mm
  medium  20..50 mm
  large   > 50 mm

Every function takes an explicit numpy Generator; the same seed gives the same mask.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial.transform import Rotation

from volcore import VoxelMask, label_components, max_diameter_mm

log = logging.getLogger(__name__)

SIZE_CLASSES = ("early", "medium", "large")
EARLY_MAX_MM = 20.0
LARGE_MIN_MM = 50.0


class MaskGenError(ValueError):
    pass


class PlacementError(MaskGenError):
    """No feasible position for the tumor inside the organ."""


def size_class_of(diameter_mm: float) -> str:
    if diameter_mm < EARLY_MAX_MM:
        return "early"
    if diameter_mm <= LARGE_MIN_MM:
        return "medium"
    return "large"


def in_size_class(diameter_mm: float, size_class: str) -> bool:
    return size_class_of(diameter_mm) == size_class


@dataclass(frozen=True)
class TumorSpec:
    size_class: str
    diameter_mm: float
    semi_axes_mm: tuple[float, float, float]
    # Euler angles "xyz", radians
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    deform_sigma_mm: float = 3.0
    deform_magnitude_mm: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.size_class not in SIZE_CLASSES:
            raise MaskGenError(f"unknown size class: {self.size_class!r}")
        if len(self.semi_axes_mm) != 3 or min(self.semi_axes_mm) <= 0:
            raise MaskGenError(f"semi_axes_mm must be 3 values > 0: {self.semi_axes_mm}")
        if self.size_class == "early" and 2.0 * max(self.semi_axes_mm) >= EARLY_MAX_MM:
            raise MaskGenError(f"early tumor must be < {EARLY_MAX_MM} mm, got {2.0 * max(self.semi_axes_mm):.2f}")
        if not (math.isfinite(self.deform_magnitude_mm) and self.deform_magnitude_mm >= 0):
            raise MaskGenError("deform_magnitude_mm must be finite and >= 0")
        if not (math.isfinite(self.deform_sigma_mm) and self.deform_sigma_mm > 0):
            raise MaskGenError("deform_sigma_mm must be finite and > 0")

    def to_dict(self) -> dict:
        return {
            "size_class": self.size_class,
            "diameter_mm": float(self.diameter_mm),
            "semi_axes_mm": [float(a) for a in self.semi_axes_mm],
            "rotation": [float(r) for r in self.rotation],
            "deform_sigma_mm": float(self.deform_sigma_mm),
            "deform_magnitude_mm": float(self.deform_magnitude_mm),
            "seed": int(self.seed),
        }


def _default_ranges() -> dict[str, tuple[float, float]]:
    return {"early": (5.0, 19.5), "medium": (20.0, 50.0), "large": (50.5, 80.0)}


def _default_weights() -> dict[str, float]:
    return {"early": 1.0, "medium": 0.0, "large": 0.0}


def _default_containment() -> dict[str, float]:
    return {"early": 1.0, "medium": 0.9, "large": 0.8}


@dataclass(frozen=True)
class MaskPolicy:
    """Parameter ranges of the tumor generator (JSON document, see `MASK_POLICIES`)."""

    diameter_ranges_mm: dict[str, tuple[float, float]] = field(default_factory=_default_ranges)
    class_weights: dict[str, float] = field(default_factory=_default_weights)
    # max / min semi-axis; 1.0 gives spheres
    aspect_ratio_max: float = 1.5
    deform_sigma_mm: float = 3.0
    deform_magnitude_mm: float = 2.0
    containment: dict[str, float] = field(default_factory=_default_containment)
    tumor_probability: float = 1.0
    volume_tolerance: float = 0.25
    max_deform_tries: int = 10
    # fresh specs drawn when the rasterized tumor measures outside its size class
    max_spec_tries: int = 10
    max_placement_tries: int = 200

    def __post_init__(self) -> None:
        weights = {k: float(v) for k, v in self.class_weights.items() if float(v) != 0.0}
        if not weights:
            raise MaskGenError("empty policy: no size class has positive weight")
        for k, w in self.class_weights.items():
            if k not in SIZE_CLASSES:
                raise MaskGenError(f"unknown size class in class_weights: {k!r}")
            if w < 0:
                raise MaskGenError(f"negative weight for {k!r}")
        for k in weights:
            if k not in self.diameter_ranges_mm:
                raise MaskGenError(f"no diameter range for size class {k!r}")
            lo, hi = self.diameter_ranges_mm[k]
            if not 0 < lo <= hi:
                raise MaskGenError(f"invalid diameter range for {k!r}: {(lo, hi)}")
            if not (in_size_class(lo, k) and in_size_class(hi, k)):
                raise MaskGenError(f"diameter range {(lo, hi)} leaves size class {k!r}")
            c = self.containment.get(k, 1.0)
            if not 0 < c <= 1:
                raise MaskGenError(f"containment for {k!r} must be in (0, 1], got {c}")
        if not self.aspect_ratio_max >= 1.0:
            raise MaskGenError(f"aspect_ratio_max must be >= 1, got {self.aspect_ratio_max}")
        if self.deform_magnitude_mm < 0 or not self.deform_sigma_mm > 0:
            raise MaskGenError("deform_magnitude_mm must be >= 0 and deform_sigma_mm > 0")
        if not 0.0 <= self.tumor_probability <= 1.0:
            raise MaskGenError("tumor_probability must be in [0, 1]")
        if not 0.0 <= self.volume_tolerance < 1.0:
            raise MaskGenError("volume_tolerance must be in [0, 1)")
        if min(self.max_deform_tries, self.max_spec_tries, self.max_placement_tries) < 1:
            raise MaskGenError("retry bounds must be >= 1")

    def classes_and_probs(self) -> tuple[list[str], np.ndarray]:
        names = [k for k in SIZE_CLASSES if self.class_weights.get(k, 0.0) > 0]
        w = np.asarray([self.class_weights[k] for k in names], dtype=np.float64)
        return names, w / w.sum()

    def containment_for(self, size_class: str) -> float:
        return float(self.containment.get(size_class, 1.0))


MASK_POLICIES: dict[str, MaskPolicy] = {
    "early": MaskPolicy(),
    "mixed": MaskPolicy(class_weights={"early": 0.5, "medium": 0.3, "large": 0.2}),
}


# --- Sampling and rasterization ---------------------------------------------


def sample_tumor_spec(policy: MaskPolicy, rng: np.random.Generator) -> TumorSpec:
    names, probs = policy.classes_and_probs()
    size_class = names[int(rng.choice(len(names), p=probs))]
    lo, hi = policy.diameter_ranges_mm[size_class]
    diameter = float(rng.uniform(lo, hi))
    if not in_size_class(diameter, size_class):
        diameter = lo
    r = diameter / 2.0
    shrink = rng.uniform(1.0, policy.aspect_ratio_max, size=2)
    axes = np.asarray([r, r / shrink[0], r / shrink[1]])[rng.permutation(3)]
    rotation = rng.uniform(0.0, 2.0 * math.pi, size=3)
    return TumorSpec(
        size_class=size_class,
        diameter_mm=diameter,
        semi_axes_mm=tuple(float(a) for a in axes),  # type: ignore[arg-type]
        rotation=tuple(float(a) for a in rotation),  # type: ignore[arg-type]
        deform_sigma_mm=policy.deform_sigma_mm,
        deform_magnitude_mm=policy.deform_magnitude_mm,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def _spacing3(spacing: float | tuple[float, float, float]) -> tuple[float, float, float]:
    if np.isscalar(spacing):
        s = float(spacing)  # type: ignore[arg-type]
        return (s, s, s)
    return tuple(float(x) for x in spacing)  # type: ignore[return-value,union-attr]


def ellipsoid_level(spec: TumorSpec, points_mm: np.ndarray) -> np.ndarray:
    """Normalized ellipsoid equation sum((R^T p / a)^2) at (N, 3) points relative to the center."""
    rot = Rotation.from_euler("xyz", spec.rotation).as_matrix()
    body = points_mm @ rot
    return np.sum((body / np.asarray(spec.semi_axes_mm)) ** 2, axis=1)


def rasterize_ellipsoid(
    spec: TumorSpec,
    grid_shape: tuple[int, int, int],
    center: tuple[int, int, int],
    spacing: float | tuple[float, float, float] = 1.0,
) -> VoxelMask:
    shape = tuple(int(s) for s in grid_shape)
    c = np.asarray(center, dtype=int)
    if np.any(c < 0) or np.any(c >= np.asarray(shape)):
        raise MaskGenError(f"center {tuple(c)} outside grid {shape}")
    sp = np.asarray(_spacing3(spacing))

    reach = np.ceil(max(spec.semi_axes_mm) / sp).astype(int) + 1
    lo = np.maximum(c - reach, 0)
    hi = np.minimum(c + reach + 1, np.asarray(shape))
    idx = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), axis=-1)
    pts = (idx.reshape(-1, 3) - c) * sp
    inside = (ellipsoid_level(spec, pts) <= 1.0 + 1e-9).reshape(idx.shape[:3])

    out = np.zeros(shape, dtype=np.uint8)
    out[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = inside
    return VoxelMask(out, spacing=tuple(sp))  # type: ignore[arg-type]


def local_grid(spec: TumorSpec, spacing: float | tuple[float, float, float] = 1.0) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """A box that holds the ellipsoid plus room for the deformation: (shape, center)."""
    sp = np.asarray(_spacing3(spacing))
    margin = np.ceil((max(spec.semi_axes_mm) + 2.0 * spec.deform_magnitude_mm) / sp).astype(int) + 2
    shape = tuple(int(2 * m + 1) for m in margin)
    return shape, tuple(int(m) for m in margin)  # type: ignore[return-value]


# --- Deformation ------------------------------------------------------------


def _single_component(mask: np.ndarray) -> bool:
    return label_components(mask)[1] == 1


def elastic_deform(
    mask: VoxelMask,
    spec: TumorSpec,
    rng: np.random.Generator,
    *,
    max_tries: int = 10,
    volume_tolerance: float = 0.25,
) -> VoxelMask:
    """Warp `mask` with a Gaussian-smoothed random displacement field (max |d| = deform_magnitude_mm).

    A warp is accepted when it stays one 6-connected component, keeps the voxel count
    within `volume_tolerance` and keeps the diameter in the spec's size class.
    After `max_tries` rejections the undeformed mask is returned.
    """
    if spec.deform_magnitude_mm == 0 or not mask.any():
        return mask
    src = mask.data.astype(np.float32)
    sp = np.asarray(mask.spacing, dtype=np.float64)
    n0 = mask.count()
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in mask.shape], indexing="ij")

    for attempt in range(max_tries):
        disp = [ndi.gaussian_filter(rng.random(mask.shape) * 2.0 - 1.0, spec.deform_sigma_mm / s) for s in sp]
        peak = max(float(np.abs(d).max()) for d in disp)
        if peak <= 0:
            continue
        coords = [g + d * (spec.deform_magnitude_mm / peak) / s for g, d, s in zip(grid, disp, sp)]
        warped = ndi.map_coordinates(src, coords, order=1, mode="constant", cval=0.0) >= 0.5
        n = int(warped.sum())
        reason = None
        if n == 0 or not _single_component(warped):
            reason = "split"
        elif abs(n - n0) > volume_tolerance * n0:
            reason = "volume"
        elif not in_size_class(max_diameter_mm(warped, mask.spacing), spec.size_class):
            reason = "size"
        if reason is None:
            return VoxelMask.like(mask, warped)
        log.debug("[maskgen] retry=%d reason=%s", attempt + 1, reason)
    log.debug("[maskgen] deformation rejected %d times, keeping ellipsoid", max_tries)
    return mask


# --- Placement --------------------------------------------------------------


def _offsets(mask: VoxelMask) -> np.ndarray:
    pts = np.argwhere(mask.data > 0)
    anchor = np.floor(pts.mean(axis=0) + 0.5).astype(int)
    return pts - anchor


def place_in_organ(
    mask: VoxelMask,
    organ: VoxelMask,
    rng: np.random.Generator,
    containment: float = 1.0,
    *,
    max_tries: int = 200,
) -> VoxelMask:
    """Translate the tumor (any grid) onto the organ grid with >= `containment` of it inside the organ.

    Candidate centers are organ voxels drawn uniformly; every tumor voxel must land in the grid.
    """
    if not organ.any():
        raise PlacementError("empty organ")
    if not 0 < containment <= 1:
        raise PlacementError(f"containment must be in (0, 1], got {containment}")
    if not mask.any():
        return VoxelMask.empty_like(organ)
    offsets = _offsets(mask)
    n = len(offsets)
    if math.ceil(containment * n - 1e-9) > organ.count():
        raise PlacementError(f"no feasible placement: tumor of {n} voxels, organ of {organ.count()} voxels")

    shape = np.asarray(organ.shape)
    organ_pts = np.argwhere(organ.data > 0)
    inside = organ.as_bool()
    for _ in range(max_tries):
        center = organ_pts[rng.integers(len(organ_pts))]
        pos = offsets + center
        if np.any(pos < 0) or np.any(pos >= shape):
            continue
        frac = float(inside[pos[:, 0], pos[:, 1], pos[:, 2]].mean())
        if frac + 1e-12 >= containment:
            out = np.zeros(organ.shape, dtype=np.uint8)
            out[pos[:, 0], pos[:, 1], pos[:, 2]] = 1
            return VoxelMask.like(organ, out)
    raise PlacementError(f"no feasible placement after {max_tries} tries (containment {containment})")


def generate_tumor_mask(organ: VoxelMask, policy: MaskPolicy, rng: np.random.Generator) -> tuple[VoxelMask, TumorSpec | None]:
    """sample_tumor_spec -> rasterize -> elastic_deform -> place_in_organ.

    A tumor whose final shape measures outside its size class is drawn again from a fresh spec.

    With probability 1 - tumor_probability the mask is empty and the spec is None.
    """
    if not organ.any():
        raise PlacementError("empty organ")
    if rng.random() >= policy.tumor_probability:
        return VoxelMask.empty_like(organ), None
    for attempt in range(policy.max_spec_tries):
        spec = sample_tumor_spec(policy, rng)
        shape, center = local_grid(spec, organ.spacing)
        local = rasterize_ellipsoid(spec, shape, center, organ.spacing)
        local = elastic_deform(
            local,
            spec,
            np.random.default_rng(spec.seed),
            max_tries=policy.max_deform_tries,
            volume_tolerance=policy.volume_tolerance,
        )
        measured = max_diameter_mm(local.data, local.spacing)
        if in_size_class(measured, spec.size_class):
            break
        log.debug("[maskgen] resample=%d class=%s measured=%.1fmm", attempt + 1, spec.size_class, measured)
    else:
        raise MaskGenError(f"no tumor inside its size class after {policy.max_spec_tries} specs")
    placed = place_in_organ(
        local, organ, rng, policy.containment_for(spec.size_class), max_tries=policy.max_placement_tries
    )
    log.debug("[maskgen] class=%s  diameter=%.1fmm  voxels=%d", spec.size_class, spec.diameter_mm, placed.count())
    return placed, spec


__all__ = [
    "EARLY_MAX_MM",
    "LARGE_MIN_MM",
    "MASK_POLICIES",
    "MaskGenError",
    "MaskPolicy",
    "PlacementError",
    "SIZE_CLASSES",
    "TumorSpec",
    "elastic_deform",
    "ellipsoid_level",
    "generate_tumor_mask",
    "in_size_class",
    "place_in_organ",
    "rasterize_ellipsoid",
    "sample_tumor_spec",
    "size_class_of",
]
