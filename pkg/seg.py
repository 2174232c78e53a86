"""Tumor segmentation: small 3D U-Net, training with real + synthetic tumors, sliding-window inference.

Training pool:
  - annotated cases, used as they are,
  - healthy cases, only when an augmentation hook with probability > 0 is given;
    each draw may receive a synthetic tumor (label = the mask used for synthesis).

Inputs are windowed with SEG_WINDOW ([-175, 250] HU -> [0, 1]). No mirroring.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from maskgen import MaskGenError
from seg_metrics import DEFAULT_MIN_OVERLAP, DEFAULT_TAU_MM, SegError, SegMetrics, evaluate_masks
from training import check_finite, seeded, to_tensor, warmup_cosine
from volcore import SEG_WINDOW, Case, Volume, VoxelMask, crop_random_patch, label_components, same_grid, window_normalize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegConfig:
    patch_size: tuple[int, int, int] = (32, 32, 32)
    epochs: int = 10
    batch_size: int = 2
    # 0 = one pass over the pool per epoch
    steps_per_epoch: int = 0
    base_lr: float = 2e-4
    weight_decay: float = 1e-5
    warmup_fraction: float = 0.05
    foreground_crop_ratio: float = 0.5
    rot90_probability: float = 0.1
    # (offset, probability): add U(-offset, offset) with the given probability
    intensity_shift: tuple[float, float] = (0.1, 0.2)
    sliding_overlap: float = 0.75
    base_channels: int = 8
    norm_groups: int = 4
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    log_every: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.patch_size) != 3 or min(self.patch_size) < 4 or any(p % 4 for p in self.patch_size):
            raise SegError(f"patch_size must be 3 sides divisible by 4: {self.patch_size}")
        if self.epochs < 0 or self.batch_size < 1 or self.steps_per_epoch < 0:
            raise SegError("epochs/steps_per_epoch must be >= 0 and batch_size >= 1")
        if not self.base_lr > 0:
            raise SegError("base_lr must be > 0")
        if not 0.0 <= self.sliding_overlap < 1.0:
            raise SegError(f"sliding_overlap must be in [0, 1), got {self.sliding_overlap}")
        offset, prob = self.intensity_shift
        for name, p in (
            ("foreground_crop_ratio", self.foreground_crop_ratio),
            ("rot90_probability", self.rot90_probability),
            ("intensity_shift probability", prob),
            ("warmup_fraction", self.warmup_fraction),
        ):
            if not 0.0 <= p <= 1.0:
                raise SegError(f"{name} must be in [0, 1], got {p}")
        if offset < 0:
            raise SegError("intensity_shift offset must be >= 0")
        if self.rot90_probability > 0 and self.patch_size[0] != self.patch_size[1]:
            raise SegError("rot90 needs a square H x W patch")

    @property
    def stride(self) -> tuple[int, int, int]:
        return tuple(max(1, int(p * (1.0 - self.sliding_overlap))) for p in self.patch_size)  # type: ignore[return-value]


SEG_PRESETS: dict[str, SegConfig] = {
    "desk": SegConfig(),
    "paper": SegConfig(patch_size=(96, 96, 96), epochs=200, batch_size=2, base_channels=32, norm_groups=8),
}


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv3d(cin, cout, 3, padding=1),
            nn.GroupNorm(math.gcd(groups, cout), cout),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv3d(cout, cout, 3, padding=1),
            nn.GroupNorm(math.gcd(groups, cout), cout),
            nn.LeakyReLU(0.01, inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class SegNet3d(nn.Module):
    """3-level U-Net, one logit channel."""

    def __init__(self, cfg: SegConfig):
        super().__init__()
        self.config = cfg
        c, g = cfg.base_channels, cfg.norm_groups
        self.enc1 = ConvBlock(1, c, g)
        self.enc2 = ConvBlock(c, 2 * c, g)
        self.bottom = ConvBlock(2 * c, 4 * c, g)
        self.up2 = nn.ConvTranspose3d(4 * c, 2 * c, 2, stride=2)
        self.dec2 = ConvBlock(4 * c, 2 * c, g)
        self.up1 = nn.ConvTranspose3d(2 * c, c, 2, stride=2)
        self.dec1 = ConvBlock(2 * c, c, g)
        self.head = nn.Conv3d(c, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool3d(e1, 2))
        b = self.bottom(F.max_pool3d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head(d1)


def build_segmenter(cfg: SegConfig, seed: int | None = None) -> SegNet3d:
    with seeded(cfg.seed if seed is None else seed):
        return SegNet3d(cfg)


def dice_bce_loss(logits: torch.Tensor, target: torch.Tensor, cfg: SegConfig) -> dict[str, torch.Tensor]:
    prob = torch.sigmoid(logits)
    inter = (prob * target).sum()
    dice = 1.0 - (2.0 * inter + 1e-5) / (prob.sum() + target.sum() + 1e-5)
    bce = F.binary_cross_entropy_with_logits(logits, target)
    return {"loss": cfg.dice_weight * dice + cfg.ce_weight * bce, "dice": dice, "bce": bce}


# --- Training ---------------------------------------------------------------


Augmenter = Callable[[Volume, VoxelMask, np.random.Generator], tuple[Volume, VoxelMask]]


def _seg_ready(case: Case) -> Case:
    return replace(case, volume=window_normalize(case.volume, SEG_WINDOW))


def augment_patch(x: np.ndarray, y: np.ndarray, cfg: SegConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """90-degree rotation in the H x W plane and a random intensity offset."""
    if rng.random() < cfg.rot90_probability:
        k = int(rng.integers(1, 4))
        x = np.rot90(x, k, axes=(0, 1))
        y = np.rot90(y, k, axes=(0, 1))
    offset, prob = cfg.intensity_shift
    if rng.random() < prob:
        x = x + np.float32(rng.uniform(-offset, offset))
    return np.ascontiguousarray(x, dtype=np.float32), np.ascontiguousarray(y, dtype=np.float32)


def draw_sample(case: Case, healthy: bool, hook: Augmenter | None, cfg: SegConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    volume, label = case.volume, case.tumor
    if healthy and hook is not None:
        try:
            volume, label = hook(volume, case.organ, rng)
        except MaskGenError as e:
            log.debug("[seg] case=%s synthesis skipped: %s", case.case_id, e)
    patch, mpatch, _ = crop_random_patch(volume, label, cfg.patch_size, rng, cfg.foreground_crop_ratio)
    return augment_patch(patch.data, mpatch.data, cfg, rng)


def train_segmenter(
    real: Sequence[Case],
    healthy: Sequence[Case],
    hook: Augmenter | None,
    cfg: SegConfig,
    *,
    model: SegNet3d | None = None,
) -> tuple[SegNet3d, list[dict[str, float]]]:
    """Dice + BCE with AdamW, linear warmup then cosine decay."""
    use_healthy = hook is not None and float(getattr(hook, "probability", 1.0)) > 0.0
    pool = [(_seg_ready(c), False) for c in real]
    if use_healthy:
        pool += [(_seg_ready(c), True) for c in healthy]
    if not pool:
        raise SegError("empty training pool: no annotated cases and no healthy cases with synthesis")

    model = model or build_segmenter(cfg)
    steps_per_epoch = cfg.steps_per_epoch or max(1, math.ceil(len(pool) / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_cosine(int(cfg.warmup_fraction * total), total))
    rng = np.random.default_rng(cfg.seed)
    history: list[dict[str, float]] = []
    model.train()

    for step in range(total):
        xs, ys = [], []
        for i in rng.integers(len(pool), size=cfg.batch_size):
            case, is_healthy = pool[int(i)]
            x, y = draw_sample(case, is_healthy, hook, cfg, rng)
            xs.append(x)
            ys.append(y)
        x = torch.from_numpy(np.stack(xs))[:, None]
        y = torch.from_numpy(np.stack(ys))[:, None]
        terms = dice_bce_loss(model(x), y, cfg)
        check_finite("seg", step, terms)
        opt.zero_grad(set_to_none=True)
        terms["loss"].backward()
        opt.step()
        sched.step()
        rec = {k: float(v.detach()) for k, v in terms.items()}
        rec["lr"] = float(opt.param_groups[0]["lr"])
        history.append(rec)
        if cfg.log_every and (step % cfg.log_every == 0 or step == total - 1):
            log.info("[seg] step=%d  loss=%.4f  dice=%.4f  lr=%.2e", step, rec["loss"], rec["dice"], rec["lr"])

    model.eval()
    return model, history


# --- Inference --------------------------------------------------------------


def window_starts(n: int, p: int, s: int) -> list[int]:
    """Window origins along one axis; the last window ends at n (n >= p)."""
    starts = list(range(0, n - p + 1, s))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


@torch.no_grad()
def sliding_window_logits(
    net: nn.Module | Callable[[torch.Tensor], torch.Tensor],
    data: np.ndarray,
    patch_size: Sequence[int],
    overlap: float,
) -> np.ndarray:
    """Average of overlapping window logits; volumes smaller than a patch are padded then cropped back."""
    if not 0.0 <= overlap < 1.0:
        raise SegError(f"overlap must be in [0, 1), got {overlap}")
    shape = np.asarray(data.shape)
    p = np.asarray(patch_size, dtype=int)
    padded_shape = np.maximum(shape, p)
    x = np.pad(np.asarray(data, dtype=np.float32), [(0, int(a - b)) for a, b in zip(padded_shape, shape)])
    stride = [max(1, int(pi * (1.0 - overlap))) for pi in p]

    acc = np.zeros(padded_shape, dtype=np.float64)
    cnt = np.zeros(padded_shape, dtype=np.float64)
    for i in window_starts(int(padded_shape[0]), int(p[0]), stride[0]):
        for j in window_starts(int(padded_shape[1]), int(p[1]), stride[1]):
            for k in window_starts(int(padded_shape[2]), int(p[2]), stride[2]):
                sl = (slice(i, i + p[0]), slice(j, j + p[1]), slice(k, k + p[2]))
                out = net(to_tensor(x[sl]))
                acc[sl] += out[0, 0].detach().cpu().numpy()
                cnt[sl] += 1.0
    avg = acc / cnt
    return avg[: shape[0], : shape[1], : shape[2]]


def predict(model: nn.Module | Callable[[torch.Tensor], torch.Tensor], volume: Volume, cfg: SegConfig) -> VoxelMask:
    vol = window_normalize(volume, SEG_WINDOW)
    if isinstance(model, nn.Module):
        model.eval()
    logits = sliding_window_logits(model, vol.data, cfg.patch_size, cfg.sliding_overlap)
    # sigmoid(l) >= 0.5
    return VoxelMask.like(volume, logits >= 0.0)


def organ_filter(pred: VoxelMask, organ: VoxelMask) -> VoxelMask:
    """Drop predicted components that do not touch the organ."""
    if not same_grid(pred, organ):
        raise SegError(f"grid mismatch: shape {pred.shape} vs {organ.shape}")
    labels, n = label_components(pred.data)
    if n == 0:
        return pred
    keep = np.unique(labels[(labels > 0) & organ.as_bool()])
    return VoxelMask.like(pred, np.isin(labels, keep) & (labels > 0))


def evaluate_cases(
    model: nn.Module,
    cases: Sequence[Case],
    cfg: SegConfig,
    *,
    tau_mm: float = DEFAULT_TAU_MM,
    min_overlap_fraction: float = DEFAULT_MIN_OVERLAP,
) -> list[SegMetrics]:
    out = []
    for case in cases:
        pred = organ_filter(predict(model, case.volume, cfg), case.organ)
        m = evaluate_masks(pred, case.tumor, tau_mm=tau_mm, min_overlap_fraction=min_overlap_fraction, case=case.case_id)
        log.debug("[eval] case=%s  dsc=%.4f  nsd=%.4f", case.case_id, m.dsc, m.nsd)
        out.append(m)
    return out


__all__ = [
    "SEG_PRESETS",
    "SegConfig",
    "SegNet3d",
    "augment_patch",
    "build_segmenter",
    "dice_bce_loss",
    "draw_sample",
    "evaluate_cases",
    "organ_filter",
    "predict",
    "sliding_window_logits",
    "train_segmenter",
    "window_starts",
]
