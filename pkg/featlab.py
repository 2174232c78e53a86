"""Tumor appearance features and the organ-of-origin classification study.

12 features per (volume, tumor mask):

  shape        voxel_volume_mm3, surface_area_mm2, sphericity, max_3d_diameter_mm
  first order  mean, variance, skewness, entropy (log2, 32 bins over the mask range)
  GLCM         contrast, correlation, energy, homogeneity
               32 gray levels over the mask's intensity range, symmetric,
               13 one-voxel offsets, features averaged over offsets

Intensities are taken as they are (callers window first). Only voxels inside
the mask are read.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi
from scipy import stats
from skimage import measure
from sklearn.decomposition import PCA
from sklearn.linear_model import SGDClassifier
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support
from sklearn.model_selection import train_test_split
from sklearn.neighbors import KNeighborsClassifier
from sklearn.pipeline import Pipeline, make_pipeline
from sklearn.preprocessing import StandardScaler

from volcore import Volume, VoxelMask, max_diameter_mm, same_grid

log = logging.getLogger(__name__)

GRAY_LEVELS = 32
MESH_SMOOTHING_SIGMA = 0.7
CLASSIFIER_KINDS = ("linear_hinge", "nearest_neighbor")

# 13 unique one-voxel offsets of the 26-neighborhood (the other 13 are their negatives)
GLCM_OFFSETS: tuple[tuple[int, int, int], ...] = tuple(
    (i, j, k)
    for i in (-1, 0, 1)
    for j in (-1, 0, 1)
    for k in (-1, 0, 1)
    if (i, j, k) > (0, 0, 0)
)


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    kinds: tuple[str, ...] = CLASSIFIER_KINDS
    repeats: int = 10
    test_fraction: float = 0.3

    def __post_init__(self) -> None:
        for k in self.kinds:
            if k not in CLASSIFIER_KINDS:
                raise FeatureError(f"unknown classifier kind: {k!r} (known: {list(CLASSIFIER_KINDS)})")
        if not self.kinds:
            raise FeatureError("kinds must be non-empty")
        if self.repeats < 1:
            raise FeatureError("repeats must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise FeatureError("test_fraction must be in (0, 1)")


@dataclass(frozen=True)
class FeatureVector:
    voxel_volume_mm3: float
    surface_area_mm2: float
    sphericity: float
    max_3d_diameter_mm: float
    mean: float
    variance: float
    skewness: float
    entropy: float
    glcm_contrast: float
    glcm_correlation: float
    glcm_energy: float
    glcm_homogeneity: float

    def as_array(self) -> np.ndarray:
        return np.asarray([getattr(self, n) for n in FEATURE_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> FeatureVector:
        if len(values) != len(FEATURE_NAMES):
            raise FeatureError(f"expected {len(FEATURE_NAMES)} values, got {len(values)}")
        return cls(*(float(v) for v in values))


FEATURE_NAMES: tuple[str, ...] = tuple(f.name for f in fields(FeatureVector))


# --- Shape ------------------------------------------------------------------


def _mesh(mask: np.ndarray, spacing: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    padded = np.pad(mask.astype(np.float64), 2)
    smooth = ndi.gaussian_filter(padded, MESH_SMOOTHING_SIGMA)
    # tiny masks blur below the iso-level; mesh the binary mask instead
    field_ = smooth if smooth.max() > 0.5 else padded
    verts, faces, _normals, _values = measure.marching_cubes(field_, level=0.5, spacing=tuple(spacing))
    return verts, faces


def mesh_volume(verts: np.ndarray, faces: np.ndarray) -> float:
    tri = verts[faces]
    return float(abs(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()) / 6.0)


def shape_features(mask: np.ndarray, spacing: Sequence[float]) -> dict[str, float]:
    voxel_volume = float(mask.sum()) * float(np.prod(spacing))
    verts, faces = _mesh(mask, spacing)
    area = float(measure.mesh_surface_area(verts, faces))
    vol = mesh_volume(verts, faces)
    sphericity = (36.0 * np.pi * vol**2) ** (1.0 / 3.0) / area if area > 0 else 1.0
    return {
        "voxel_volume_mm3": voxel_volume,
        "surface_area_mm2": area,
        "sphericity": float(np.clip(sphericity, 1e-12, 1.0)),
        "max_3d_diameter_mm": max_diameter_mm(mask, spacing),
    }


# --- Intensity --------------------------------------------------------------


def first_order_features(values: np.ndarray) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    var = float(v.var())
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        counts, _ = np.histogram(v, bins=GRAY_LEVELS, range=(lo, hi))
        p = counts[counts > 0] / v.size
        entropy = float(-(p * np.log2(p)).sum())
    else:
        entropy = 0.0
    return {
        "mean": float(v.mean()),
        "variance": var,
        "skewness": float(stats.skew(v, bias=True)) if var > 0 else 0.0,
        "entropy": entropy,
    }


def quantize_levels(data: np.ndarray, mask: np.ndarray, levels: int = GRAY_LEVELS) -> np.ndarray:
    """Gray level in 0..levels-1 inside the mask (range = mask min..max), -1 outside."""
    out = np.full(mask.shape, -1, dtype=np.int64)
    vals = np.asarray(data, dtype=np.float64)[mask]
    lo, hi = float(vals.min()), float(vals.max())
    if hi > lo:
        q = np.floor((vals - lo) / (hi - lo) * levels).astype(np.int64)
        out[mask] = np.clip(q, 0, levels - 1)
    else:
        out[mask] = 0
    return out


def glcm(levels: np.ndarray, offset: tuple[int, int, int], n: int = GRAY_LEVELS) -> np.ndarray:
    """Symmetric co-occurrence counts (n x n) for one offset; pairs need both voxels in the mask."""
    src, dst = [], []
    for d in offset:
        if d >= 0:
            src.append(slice(0, levels.shape[len(src)] - d))
            dst.append(slice(d, None))
        else:
            src.append(slice(-d, None))
            dst.append(slice(0, levels.shape[len(dst)] + d))
    a = levels[tuple(src)].ravel()
    b = levels[tuple(dst)].ravel()
    keep = (a >= 0) & (b >= 0)
    m = np.zeros((n, n), dtype=np.float64)
    np.add.at(m, (a[keep], b[keep]), 1.0)
    return m + m.T


def glcm_features(levels: np.ndarray, n: int = GRAY_LEVELS) -> dict[str, float]:
    i, j = np.indices((n, n), dtype=np.float64)
    acc: dict[str, list[float]] = {"glcm_contrast": [], "glcm_correlation": [], "glcm_energy": [], "glcm_homogeneity": []}
    for off in GLCM_OFFSETS:
        m = glcm(levels, off, n)
        total = m.sum()
        if total == 0:
            continue
        p = m / total
        mu = float((i * p).sum())
        var = float((((i - mu) ** 2) * p).sum())
        acc["glcm_contrast"].append(float((((i - j) ** 2) * p).sum()))
        acc["glcm_energy"].append(float((p**2).sum()))
        acc["glcm_homogeneity"].append(float((p / (1.0 + (i - j) ** 2)).sum()))
        acc["glcm_correlation"].append(float(((i - mu) * (j - mu) * p).sum() / var) if var > 0 else 1.0)
    if not acc["glcm_energy"]:
        # no voxel pair inside the mask
        return {"glcm_contrast": 0.0, "glcm_correlation": 1.0, "glcm_energy": 1.0, "glcm_homogeneity": 1.0}
    return {k: float(np.mean(v)) for k, v in acc.items()}


def extract_features(volume: Volume, tumor: VoxelMask) -> FeatureVector:
    if not same_grid(volume, tumor):
        raise FeatureError(f"grid mismatch: volume {volume.shape} vs mask {tumor.shape}")
    if not tumor.any():
        raise FeatureError("empty mask")
    mask = tumor.as_bool()
    # crop to the mask bounding box (+1 voxel) so everything else is ignored
    box = ndi.find_objects(mask.astype(np.int8))[0]
    box = tuple(slice(max(s.start - 1, 0), s.stop + 1) for s in box)
    m = mask[box]
    data = np.asarray(volume.data)[box]
    feats: dict[str, float] = {}
    feats.update(shape_features(m, tumor.spacing))
    feats.update(first_order_features(data[m]))
    feats.update(glcm_features(quantize_levels(data, m)))
    return FeatureVector(**feats)


# --- Feature tables ---------------------------------------------------------


@dataclass(frozen=True)
class FeatureRow:
    case_id: str
    organ_label: str
    features: FeatureVector


def write_features_csv(rows: Sequence[FeatureRow], path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["case", "organ_label", *FEATURE_NAMES])
        for r in rows:
            w.writerow([r.case_id, r.organ_label, *(repr(float(v)) for v in r.features.as_array())])
    return p


def read_features_csv(path: str | Path) -> list[FeatureRow]:
    p = Path(path)
    if not p.is_file():
        raise FeatureError(f"missing file: {p}")
    with p.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        expected = ["case", "organ_label", *FEATURE_NAMES]
        if reader.fieldnames != expected:
            raise FeatureError(f"{p.name}: header must be {expected}, got {reader.fieldnames}")
        try:
            return [
                FeatureRow(row["case"], row["organ_label"], FeatureVector.from_array([float(row[n]) for n in FEATURE_NAMES]))
                for row in reader
            ]
        except ValueError as e:
            raise FeatureError(f"{p.name}: bad value ({e})") from e


EMBEDDING_COLUMNS = ("case", "organ_label", "x", "y")


def write_embedding_csv(points: Sequence[dict], path: str | Path) -> Path:
    """One row per lesion: case, organ_label and its 2D embedding coordinates."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EMBEDDING_COLUMNS)
        for pt in points:
            try:
                w.writerow([pt["case"], pt["organ_label"], repr(float(pt["x"])), repr(float(pt["y"]))])
            except KeyError as e:
                raise FeatureError(f"embedding point without {e}") from e
    return p


# --- Classification study ---------------------------------------------------


@dataclass(frozen=True)
class ClassifierReport:
    classes: tuple[str, ...]
    precision: dict[str, float]
    recall: dict[str, float]
    macro_precision: float
    macro_recall: float
    confusion: tuple[tuple[int, ...], ...]
    split: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["classes"] = list(self.classes)
        out["confusion"] = [list(r) for r in self.confusion]
        return out


def classification_report(y_true: Sequence[str], y_pred: Sequence[str], classes: Sequence[str], split: dict | None = None) -> ClassifierReport:
    labels = list(classes)
    prec, rec, _f1, _support = precision_recall_fscore_support(y_true, y_pred, labels=labels, zero_division=0)
    cm = confusion_matrix(y_true, y_pred, labels=labels)
    return ClassifierReport(
        classes=tuple(labels),
        precision={c: float(v) for c, v in zip(labels, prec)},
        recall={c: float(v) for c, v in zip(labels, rec)},
        macro_precision=float(np.mean(prec)),
        macro_recall=float(np.mean(rec)),
        confusion=tuple(tuple(int(x) for x in row) for row in cm),
        split=dict(split or {}),
    )


def _matrix(features: Sequence[FeatureVector] | np.ndarray) -> np.ndarray:
    if isinstance(features, np.ndarray):
        x = np.asarray(features, dtype=np.float64)
    else:
        x = np.stack([f.as_array() for f in features]) if len(features) else np.zeros((0, len(FEATURE_NAMES)))
    if x.ndim != 2:
        raise FeatureError(f"feature matrix must be 2D, got shape {x.shape}")
    return x


def make_classifier(kind: str, seed: int = 0) -> Pipeline:
    if kind == "linear_hinge":
        est = SGDClassifier(loss="hinge", alpha=1e-4, max_iter=2000, tol=1e-4, random_state=seed)
    elif kind == "nearest_neighbor":
        est = KNeighborsClassifier(n_neighbors=1)
    else:
        raise FeatureError(f"unknown classifier kind: {kind!r} (known: {list(CLASSIFIER_KINDS)})")
    return make_pipeline(StandardScaler(), est)


@dataclass(frozen=True)
class OriginStudy:
    kind: str
    seed: int
    test: ClassifierReport
    train: ClassifierReport

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "test": self.test.to_dict(), "train": self.train.to_dict()}


def train_origin_classifier(
    features: Sequence[FeatureVector] | np.ndarray,
    labels: Sequence[str],
    kind: str = "linear_hinge",
    *,
    seed: int = 0,
    test_fraction: float = 0.3,
) -> tuple[Pipeline, OriginStudy]:
    """Standardize, fit on a stratified split, report on both halves."""
    x = _matrix(features)
    y = np.asarray([str(v) for v in labels])
    if len(x) != len(y):
        raise FeatureError(f"{len(x)} feature rows vs {len(y)} labels")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise FeatureError(f"degenerate label set: need >= 2 classes, got {list(classes)}")
    if counts.min() < 2:
        raise FeatureError(f"degenerate label set: class {classes[int(np.argmin(counts))]!r} has < 2 samples")
    if not 0.0 < test_fraction < 1.0:
        raise FeatureError("test_fraction must be in (0, 1)")

    n_test = min(max(len(classes), int(round(test_fraction * len(y)))), len(y) - len(classes))
    x_tr, x_te, y_tr, y_te = train_test_split(x, y, test_size=n_test, stratify=y, random_state=seed)
    clf = make_classifier(kind, seed).fit(x_tr, y_tr)
    split = {"n_train": int(len(y_tr)), "n_test": int(len(y_te)), "seed": int(seed), "stratified": True}
    study = OriginStudy(
        kind=kind,
        seed=seed,
        test=classification_report(y_te, clf.predict(x_te), classes, split),
        train=classification_report(y_tr, clf.predict(x_tr), classes, split),
    )
    log.debug("[origin] kind=%s  seed=%d  macro_p=%.3f  macro_r=%.3f", kind, seed, study.test.macro_precision, study.test.macro_recall)
    return clf, study


def repeat_origin_study(
    features: Sequence[FeatureVector] | np.ndarray,
    labels: Sequence[str],
    kind: str = "linear_hinge",
    seeds: Sequence[int] = tuple(range(10)),
    *,
    test_fraction: float = 0.3,
) -> dict:
    """Held-out macro precision/recall over repeated splits."""
    runs = [train_origin_classifier(features, labels, kind, seed=s, test_fraction=test_fraction)[1] for s in seeds]
    prec = [r.test.macro_precision for r in runs]
    rec = [r.test.macro_recall for r in runs]
    return {
        "kind": kind,
        "seeds": [int(s) for s in seeds],
        "macro_precision_mean": float(np.mean(prec)),
        "macro_precision_std": float(np.std(prec)),
        "macro_recall_mean": float(np.mean(rec)),
        "macro_recall_std": float(np.std(rec)),
        "train_macro_precision_mean": float(np.mean([r.train.macro_precision for r in runs])),
        "runs": [r.to_dict() for r in runs],
    }


def embed_2d(features: Sequence[FeatureVector] | np.ndarray, *, standardize: bool = True) -> np.ndarray:
    """(n, 2) principal-component projection of the (standardized) features."""
    x = _matrix(features)
    if len(x) < 2:
        raise FeatureError(f"need >= 2 samples to embed, got {len(x)}")
    if x.shape[1] < 2:
        raise FeatureError("need >= 2 feature dimensions")
    if standardize:
        x = StandardScaler().fit_transform(x)
    return PCA(n_components=2, svd_solver="full").fit_transform(x)


__all__ = [
    "CLASSIFIER_KINDS",
    "ClassifierReport",
    "EMBEDDING_COLUMNS",
    "FEATURE_NAMES",
    "FeatureConfig",
    "FeatureError",
    "FeatureRow",
    "FeatureVector",
    "OriginStudy",
    "classification_report",
    "embed_2d",
    "extract_features",
    "first_order_features",
    "glcm",
    "glcm_features",
    "make_classifier",
    "quantize_levels",
    "read_features_csv",
    "repeat_origin_study",
    "shape_features",
    "train_origin_classifier",
    "write_embedding_csv",
    "write_features_csv",
]
