"""Tumor synthesis on healthy volumes: mask -> latent inpainting -> decode -> composite.

A cubic patch around the generated tumor (`patch_size`^3, grown when the tumor
and its cross-fade band do not fit) is encoded, the tumor region of its latent
is sampled by the denoiser (the rest is kept from the healthy latent), the result
is quantized and decoded, and the decoded patch is blended back into the full
volume inside the tumor mask plus a cross-fade band.

Volumes may come in any window (raw HU, the autoencoder window or the
segmentation window); the output keeps the input's window.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage as ndi

from autoenc import VQAutoencoder, decode, encode, quantize
from latdiff import (
    DEFAULT_SAMPLING_STEPS,
    Denoiser3d,
    DiffusionCondition,
    ddpm_sample,
    downsample_mask,
    space_steps,
    validate_steps,
)
from maskgen import MaskPolicy, TumorSpec, generate_tumor_mask
from training import generator, to_array, to_tensor
from volcore import AE_WINDOW, Volume, VolumeError, VoxelMask, WindowSpec, crop_patch, paste_patch, require_same_grid

log = logging.getLogger(__name__)


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True)
class SynthesisConfig:
    # explicit step subset; None = `sampling_steps` evenly spaced steps of the denoiser horizon
    steps: tuple[int, ...] | None = None
    sampling_steps: int = DEFAULT_SAMPLING_STEPS
    # None = MaskPolicy() defaults
    policy: MaskPolicy | None = None
    composite_dilation_mm: float = 2.0
    augment_probability: float = 0.5
    tumor_count: int = 1
    # None = the autoencoder's training patch size
    patch_size: int | None = None

    def __post_init__(self) -> None:
        if self.steps is not None and len(self.steps) == 0:
            raise SynthesisError("steps must be non-empty")
        if self.sampling_steps < 1:
            raise SynthesisError("sampling_steps must be >= 1")
        if not self.composite_dilation_mm >= 0:
            raise SynthesisError("composite_dilation_mm must be >= 0")
        if not 0.0 <= self.augment_probability <= 1.0:
            raise SynthesisError("augment_probability must be in [0, 1]")
        if self.tumor_count < 1:
            raise SynthesisError("tumor_count must be >= 1")
        if self.patch_size is not None and self.patch_size < 1:
            raise SynthesisError("patch_size must be >= 1")

    def resolve_steps(self, T: int) -> tuple[int, ...]:
        return tuple(self.steps) if self.steps is not None else space_steps(T, self.sampling_steps)


def _to_hu(data: np.ndarray, window: WindowSpec | None) -> np.ndarray:
    if window is None:
        return np.asarray(data, dtype=np.float64)
    scale = (window.hi - window.lo) / (window.out_hi - window.out_lo)
    return window.lo + (np.asarray(data, dtype=np.float64) - window.out_lo) * scale


def convert_window(data: np.ndarray, src: WindowSpec | None, dst: WindowSpec | None) -> np.ndarray:
    """Re-express intensities of window `src` in window `dst` (None = HU)."""
    if src == dst:
        return np.asarray(data, dtype=np.float32)
    hu = _to_hu(data, src)
    if dst is None:
        return hu.astype(np.float32)
    y = dst.out_lo + (np.clip(hu, dst.lo, dst.hi) - dst.lo) * (dst.out_hi - dst.out_lo) / (dst.hi - dst.lo)
    return y.astype(np.float32)


def composite(original: Volume, decoded: Volume, mask: VoxelMask, dilation_mm: float) -> Volume:
    """Decoded inside the mask, original beyond `dilation_mm` of it, linear cross-fade in between."""
    try:
        require_same_grid(original, decoded, "decoded grid")
        require_same_grid(original, mask, "mask grid")
    except VolumeError as e:
        raise SynthesisError(str(e)) from e
    if dilation_mm < 0:
        raise SynthesisError(f"dilation_mm must be >= 0, got {dilation_mm}")
    if not mask.any():
        return original
    inside = mask.as_bool()
    if dilation_mm == 0:
        w = inside.astype(np.float64)
    else:
        dist = ndi.distance_transform_edt(~inside, sampling=original.spacing)
        w = np.clip(1.0 - dist / dilation_mm, 0.0, 1.0)
    a = original.data
    b = decoded.data
    blend = (a.astype(np.float64) * (1.0 - w) + b.astype(np.float64) * w).astype(np.float32)
    out = np.where(w >= 1.0, b, np.where(w <= 0.0, a, blend))
    return original.with_data(out)


@dataclass(frozen=True)
class SynthModels:
    """Frozen autoencoder + denoiser pair used for synthesis."""

    ae: VQAutoencoder
    dn: Denoiser3d

    def __post_init__(self) -> None:
        if self.ae.config.latent_channels != self.dn.config.latent_channels:
            raise SynthesisError(
                f"latent channel mismatch: autoencoder {self.ae.config.latent_channels}, denoiser {self.dn.config.latent_channels}"
            )


def patch_window(mask: VoxelMask, base: int, unit: int, dilation_mm: float = 0.0) -> tuple[tuple[int, int, int], int]:
    """(center, edge) of a cubic patch holding the mask plus its cross-fade band.

    The edge is at least `base` and a multiple of `unit`; the center is the bounding-box center.
    """
    pts = np.argwhere(mask.data > 0)
    if len(pts) == 0:
        raise SynthesisError("empty tumor mask has no patch")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    margin = np.ceil(dilation_mm / np.asarray(mask.spacing, dtype=np.float64)).astype(int)
    need = int(np.max(hi - lo + 1 + 2 * margin)) + 1
    edge = max(base, -(-need // unit) * unit)
    center = tuple(int(v) for v in (lo + hi) // 2)
    return center, edge  # type: ignore[return-value]


@torch.no_grad()
def inpaint_tumor(volume: Volume, mask: VoxelMask, models: SynthModels, cfg: SynthesisConfig, rng: np.random.Generator) -> Volume:
    """Synthesize texture for one given tumor mask and composite it into `volume`."""
    if not mask.any():
        return volume
    ae, dn = models.ae, models.dn
    p = cfg.patch_size or ae.config.patch_size
    if p % ae.config.compression or (p // ae.config.compression) % dn.downsampling:
        raise SynthesisError(f"patch_size {p} incompatible with compression {ae.config.compression}")
    unit = ae.config.compression * dn.downsampling
    center, p0 = patch_window(mask, p, unit, cfg.composite_dilation_mm)
    if p0 != p:
        log.debug("[synth] patch=%d -> %d  tumor_voxels=%d", p, p0, mask.count())
    p = p0
    scale = dn.config.latent_scale
    schedule = dn.config.schedule()
    steps = validate_steps(cfg.resolve_steps(schedule.T), schedule)

    ae_in = volume.with_data(convert_window(volume.data, volume.window, AE_WINDOW))
    patch = crop_patch(ae_in, center, (p, p, p), pad_value=AE_WINDOW.out_lo)
    mpatch = crop_patch(mask, center, (p, p, p))

    z0 = encode(ae, to_tensor(patch)) * scale
    m_lat = downsample_mask(mpatch, ae.config.compression)
    cond = DiffusionCondition.from_latent(z0, m_lat)
    z = ddpm_sample(dn, cond, schedule, steps, generator(int(rng.integers(0, 2**31 - 1))))
    x_hat = decode(ae, quantize(z / scale, ae.codebook))

    decoded_patch = convert_window(to_array(x_hat), AE_WINDOW, volume.window)
    decoded = volume.with_data(paste_patch(volume.data, decoded_patch, center))
    return composite(volume, decoded, mask, cfg.composite_dilation_mm)


def synthesize_tumors(
    volume: Volume,
    organ: VoxelMask,
    models: SynthModels,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
) -> tuple[Volume, VoxelMask, list[TumorSpec]]:
    """Place `tumor_count` generated tumors in the organ and synthesize them one after the other.

    Returns the tumor-bearing volume, the union of the masks used for conditioning and
    the specs of the tumors actually drawn.
    """
    try:
        require_same_grid(volume, organ, "organ grid")
    except VolumeError as e:
        raise SynthesisError(str(e)) from e
    if not organ.any():
        raise SynthesisError("empty organ")
    out = volume
    label = np.zeros(volume.shape, dtype=bool)
    specs: list[TumorSpec] = []
    for k in range(cfg.tumor_count):
        mask, spec = generate_tumor_mask(organ, cfg.policy or MaskPolicy(), rng)
        if spec is None or not mask.any():
            continue
        out = inpaint_tumor(out, mask, models, cfg, rng)
        label |= mask.as_bool()
        specs.append(spec)
        log.debug("[synth] tumor=%d  class=%s  voxels=%d", k, spec.size_class, mask.count())
    return out, VoxelMask.like(organ, label), specs


def synthesize(
    volume: Volume,
    organ: VoxelMask,
    ae: VQAutoencoder,
    dn: Denoiser3d,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
) -> tuple[Volume, VoxelMask]:
    """synthesize_tumors without the specs: (tumor-bearing volume, tumor label)."""
    out, label, _specs = synthesize_tumors(volume, organ, SynthModels(ae, dn), cfg, rng)
    return out, label


Synthesizer = Callable[[Volume, VoxelMask, np.random.Generator], tuple[Volume, VoxelMask]]


def augment_sample(
    volume: Volume,
    organ: VoxelMask,
    models: SynthModels | Synthesizer,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
) -> tuple[Volume, VoxelMask]:
    """With probability `augment_probability` give a healthy sample a synthetic tumor.

    `models` is a SynthModels pair or any synthesizer callable (volume, organ, rng).
    """
    if rng.random() >= cfg.augment_probability:
        return volume, VoxelMask.empty_like(volume)
    if isinstance(models, SynthModels):
        return synthesize(volume, organ, models.ae, models.dn, cfg, rng)
    return models(volume, organ, rng)


@dataclass(frozen=True)
class AugmentHook:
    """On-the-fly augmentation handed to the segmentation trainer."""

    models: SynthModels | Synthesizer
    cfg: SynthesisConfig = field(default_factory=SynthesisConfig)

    @property
    def probability(self) -> float:
        return self.cfg.augment_probability

    def __call__(self, volume: Volume, organ: VoxelMask, rng: np.random.Generator) -> tuple[Volume, VoxelMask]:
        return augment_sample(volume, organ, self.models, self.cfg, rng)


__all__ = [
    "AugmentHook",
    "SynthModels",
    "SynthesisConfig",
    "SynthesisError",
    "augment_sample",
    "composite",
    "convert_window",
    "inpaint_tumor",
    "patch_window",
    "synthesize",
    "synthesize_tumors",
]
