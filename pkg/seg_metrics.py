"""Segmentation metrics: DSC, NSD, tumor-wise sensitivity (overall and by size class).

Conventions:
  - both masks empty -> dsc = nsd = 1.0; exactly one empty -> 0.0
  - boundary = mask voxels with at least one 6-neighbor outside the mask
    (grid edges count as outside)
  - nsd pools both directions: (|dA within tau| + |dB within tau|) / (|dA| + |dB|)
  - a ground-truth component is detected when |pred & comp| / |comp| >= min_overlap
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage as ndi

from maskgen import SIZE_CLASSES, size_class_of
from volcore import CONNECTIVITY_6, VoxelMask, label_components, max_diameter_mm, same_grid

DEFAULT_TAU_MM = 2.0
DEFAULT_MIN_OVERLAP = 0.1


class SegError(ValueError):
    pass


def _pair(pred: VoxelMask, gt: VoxelMask) -> tuple[np.ndarray, np.ndarray]:
    if not same_grid(pred, gt):
        raise SegError(f"grid mismatch: shape {pred.shape} vs {gt.shape}, spacing {pred.spacing} vs {gt.spacing}")
    return pred.as_bool(), gt.as_bool()


def dsc(pred: VoxelMask, gt: VoxelMask) -> float:
    a, b = _pair(pred, gt)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def boundary(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    return m & ~ndi.binary_erosion(m, structure=CONNECTIVITY_6, border_value=0)


def nsd(pred: VoxelMask, gt: VoxelMask, tau_mm: float = DEFAULT_TAU_MM, spacing: Sequence[float] | None = None) -> float:
    """Normalized surface Dice at tolerance `tau_mm`, pooled over both surfaces.

    (|dA within tau of dB| + |dB within tau of dA|) / (|dA| + |dB|), where dA and dB are the
    6-connected boundary voxels of `pred` and `gt`.
    """
    if tau_mm < 0:
        raise SegError(f"tau_mm must be >= 0, got {tau_mm}")
    a, b = _pair(pred, gt)
    sp = tuple(float(s) for s in (spacing if spacing is not None else gt.spacing))
    if not a.any() and not b.any():
        return 1.0
    if not a.any() or not b.any():
        return 0.0
    ba, bb = boundary(a), boundary(b)
    dist_to_b = ndi.distance_transform_edt(~bb, sampling=sp)
    dist_to_a = ndi.distance_transform_edt(~ba, sampling=sp)
    hit = int((dist_to_b[ba] <= tau_mm).sum()) + int((dist_to_a[bb] <= tau_mm).sum())
    return hit / (int(ba.sum()) + int(bb.sum()))


@dataclass(frozen=True)
class TumorDetection:
    voxels: int
    diameter_mm: float
    overlap: float
    detected: bool

    @property
    def size_class(self) -> str:
        return size_class_of(self.diameter_mm)


def tumor_detections(pred: VoxelMask, gt: VoxelMask, min_overlap_fraction: float = DEFAULT_MIN_OVERLAP) -> list[TumorDetection]:
    if not 0.0 <= min_overlap_fraction <= 1.0:
        raise SegError(f"min_overlap_fraction must be in [0, 1], got {min_overlap_fraction}")
    a, b = _pair(pred, gt)
    labels, n = label_components(b)
    out = []
    for k in range(1, n + 1):
        comp = labels == k
        size = int(comp.sum())
        overlap = int(np.logical_and(a, comp).sum()) / size
        out.append(TumorDetection(size, max_diameter_mm(comp, gt.spacing), overlap, overlap >= min_overlap_fraction))
    return out


def tumor_sensitivity(pred: VoxelMask, gt: VoxelMask, min_overlap_fraction: float = DEFAULT_MIN_OVERLAP) -> float:
    found = tumor_detections(pred, gt, min_overlap_fraction)
    if not found:
        return 1.0
    return sum(d.detected for d in found) / len(found)


def size_counts(detections: Sequence[TumorDetection]) -> dict[str, tuple[int, int]]:
    """(n_gt, n_detected) per size class."""
    out = {}
    for cls in SIZE_CLASSES:
        sel = [d for d in detections if d.size_class == cls]
        out[cls] = (len(sel), sum(d.detected for d in sel))
    return out


def sensitivity_by_size(counts: dict[str, tuple[int, int]]) -> dict[str, float | None]:
    """Detected fraction per size class; None for classes with no ground-truth tumor."""
    return {cls: (det / n if n else None) for cls, (n, det) in counts.items()}


@dataclass(frozen=True)
class SegMetrics:
    dsc: float
    nsd: float
    nsd_tau_mm: float
    sensitivity: float
    detection_criterion: float
    n_gt_tumors: int
    n_detected: int
    # size class -> (n_gt, n_detected)
    by_size: dict[str, tuple[int, int]] = field(default_factory=dict)
    case: str = ""

    def __post_init__(self) -> None:
        for k in ("dsc", "nsd", "sensitivity"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise SegError(f"{k} out of [0, 1]: {v}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["by_size"] = {k: list(v) for k, v in self.by_size.items()}
        out["sensitivity_by_size"] = sensitivity_by_size(self.by_size)
        return out


def evaluate_masks(
    pred: VoxelMask,
    gt: VoxelMask,
    *,
    tau_mm: float = DEFAULT_TAU_MM,
    min_overlap_fraction: float = DEFAULT_MIN_OVERLAP,
    case: str = "",
) -> SegMetrics:
    det = tumor_detections(pred, gt, min_overlap_fraction)
    n_det = sum(d.detected for d in det)
    return SegMetrics(
        dsc=dsc(pred, gt),
        nsd=nsd(pred, gt, tau_mm),
        nsd_tau_mm=float(tau_mm),
        sensitivity=n_det / len(det) if det else 1.0,
        detection_criterion=float(min_overlap_fraction),
        n_gt_tumors=len(det),
        n_detected=n_det,
        by_size=size_counts(det),
        case=case,
    )


def aggregate(metrics: Sequence[SegMetrics]) -> dict:
    """Mean dsc/nsd over cases; sensitivity pooled over all ground-truth tumors."""
    if not metrics:
        raise SegError("no cases to aggregate")
    n_gt = sum(m.n_gt_tumors for m in metrics)
    n_det = sum(m.n_detected for m in metrics)
    counts = {
        cls: (
            sum(m.by_size.get(cls, (0, 0))[0] for m in metrics),
            sum(m.by_size.get(cls, (0, 0))[1] for m in metrics),
        )
        for cls in SIZE_CLASSES
    }
    return {
        "cases": len(metrics),
        "dsc": float(np.mean([m.dsc for m in metrics])),
        "nsd": float(np.mean([m.nsd for m in metrics])),
        "nsd_tau_mm": metrics[0].nsd_tau_mm,
        "sensitivity": n_det / n_gt if n_gt else 1.0,
        "detection_criterion": metrics[0].detection_criterion,
        "n_gt_tumors": n_gt,
        "n_detected": n_det,
        "by_size": {k: list(v) for k, v in counts.items()},
        "sensitivity_by_size": sensitivity_by_size(counts),
    }


__all__ = [
    "DEFAULT_MIN_OVERLAP",
    "DEFAULT_TAU_MM",
    "SegError",
    "SegMetrics",
    "TumorDetection",
    "aggregate",
    "boundary",
    "dsc",
    "evaluate_masks",
    "nsd",
    "sensitivity_by_size",
    "size_counts",
    "tumor_detections",
    "tumor_sensitivity",
]
