"""Vector-quantized 3D autoencoder: encoder f, codebook q, decoder g, and the loss stack.

Tensor layout is channel-first, (B, C, H, W, D). A latent grid for a (B, 1, H, W, D)
patch is (B, c, H/k, W/k, D/k) with k = compression.

Losses (all means over elements):
  recon       = |x - x_hat|
  codebook    = (sg(continuous) - embedded)^2
  commit      = alpha * (sg(embedded) - continuous)^2
  perceptual  = L1 between fixed 2D conv features of every axis-aligned slice, per plane (HW, HD, WD), averaged
  disc        = log D(x) + log(1 - D(x_hat)), summed over the slice and volume discriminators
  gan         = -log D(x_hat)   (non-saturating generator form)
  match       = sum_i |D_i(x_hat) - D_i(x)| over discriminator feature layers
  total       = recon + codebook + commit + l_perc*perceptual + l_match*match + l_gan*gan
"""

from __future__ import annotations

import copy
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from training import check_finite, generator, seeded, stack_batch

log = logging.getLogger(__name__)

PLANES = ("hw", "hd", "wd")
# tensor axis each plane's slices are taken along, in (B, C, H, W, D)
_PLANE_AXIS = {"hw": 4, "hd": 3, "wd": 2}
# rows of the pairwise distance matrix computed per chunk in the quantizer
_QUANT_CHUNK_ELEMS = 1 << 24


class AutoencoderError(ValueError):
    pass


# --- Config -----------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.25
    lambda_perceptual: float = 1.0
    lambda_match: float = 1.0
    lambda_gan: float = 0.1

    def __post_init__(self) -> None:
        for k in ("alpha", "lambda_perceptual", "lambda_match", "lambda_gan"):
            if getattr(self, k) < 0:
                raise AutoencoderError(f"{k} must be >= 0")


@dataclass(frozen=True)
class AutoencoderConfig:
    in_channels: int = 1
    base_channels: int = 16
    latent_channels: int = 4
    codebook_size: int = 512
    compression: int = 4
    disc_channels: int = 16
    perceptual_channels: int = 8
    perceptual_layers: int = 3
    norm_groups: int = 8
    patch_size: int = 32

    def __post_init__(self) -> None:
        if self.codebook_size < 1:
            raise AutoencoderError("codebook_size (K) must be >= 1")
        if self.latent_channels < 1:
            raise AutoencoderError("latent_channels (c) must be >= 1")
        if self.compression < 1 or self.compression & (self.compression - 1):
            raise AutoencoderError(f"compression must be a power of 2, got {self.compression}")
        if self.patch_size % self.compression:
            raise AutoencoderError(f"patch_size {self.patch_size} not divisible by compression {self.compression}")
        if min(self.base_channels, self.disc_channels, self.perceptual_channels, self.perceptual_layers) < 1:
            raise AutoencoderError("channel counts must be >= 1")

    @property
    def levels(self) -> int:
        return int(math.log2(self.compression))


AE_PRESETS: dict[str, AutoencoderConfig] = {
    "desk": AutoencoderConfig(),
    "paper": AutoencoderConfig(
        base_channels=64, latent_channels=8, codebook_size=16384, disc_channels=64, perceptual_channels=32, patch_size=96
    ),
}


@dataclass(frozen=True)
class AETrainConfig:
    steps: int = 200
    batch_size: int = 2
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    gan_warmup_steps: int = 100
    perceptual_mode: str = "all"
    log_every: int = 50
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise AutoencoderError("steps must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise AutoencoderError("lr must be > 0")
        if self.perceptual_mode not in {"all", "mid"}:
            raise AutoencoderError(f"perceptual_mode must be 'all' or 'mid', got {self.perceptual_mode!r}")


# --- Building blocks --------------------------------------------------------


def _norm(ch: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, ch), ch)


class ResBlock3d(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int):
        super().__init__()
        self.norm1 = _norm(cin, groups)
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm2 = _norm(cout, groups)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder3d(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        g = cfg.norm_groups
        ch = cfg.base_channels
        self.conv_in = nn.Conv3d(cfg.in_channels, ch, 3, padding=1)
        down = []
        for _ in range(cfg.levels):
            down += [ResBlock3d(ch, ch, g), nn.Conv3d(ch, ch * 2, 4, stride=2, padding=1)]
            ch *= 2
        self.down = nn.Sequential(*down)
        self.mid = ResBlock3d(ch, ch, g)
        self.norm_out = _norm(ch, g)
        self.conv_out = nn.Conv3d(ch, cfg.latent_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.mid(self.down(self.conv_in(x)))
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder3d(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        g = cfg.norm_groups
        ch = cfg.base_channels * 2**cfg.levels
        self.conv_in = nn.Conv3d(cfg.latent_channels, ch, 3, padding=1)
        self.mid = ResBlock3d(ch, ch, g)
        up = []
        for _ in range(cfg.levels):
            up += [ResBlock3d(ch, ch, g), nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv3d(ch, ch // 2, 3, padding=1)]
            ch //= 2
        self.up = nn.Sequential(*up)
        self.norm_out = _norm(ch, g)
        self.conv_out = nn.Conv3d(ch, cfg.in_channels, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.up(self.mid(self.conv_in(z)))
        return torch.tanh(self.conv_out(F.silu(self.norm_out(h))))


class Codebook(nn.Module):
    """K learned entries of dimension c, addressable by index 0..K-1."""

    def __init__(self, size: int, dim: int):
        super().__init__()
        if size < 1 or dim < 1:
            raise AutoencoderError(f"codebook needs K >= 1 and c >= 1, got K={size} c={dim}")
        self.embedding = nn.Embedding(size, dim)
        self.embedding.weight.data.uniform_(-1.0 / size, 1.0 / size)

    @property
    def size(self) -> int:
        return int(self.embedding.num_embeddings)

    @property
    def dim(self) -> int:
        return int(self.embedding.embedding_dim)

    @property
    def entries(self) -> torch.Tensor:
        return self.embedding.weight


class _PatchDiscriminator(nn.Module):
    """Strided conv stack returning (logit map, intermediate features)."""

    def __init__(self, conv: type[nn.Module], cin: int, ch: int, groups: int, layers: int = 2):
        super().__init__()
        blocks = []
        c = cin
        for i in range(layers):
            cout = ch * 2**i
            blocks.append(nn.Sequential(conv(c, cout, 4, stride=2, padding=1), nn.GroupNorm(math.gcd(groups, cout), cout)))
            c = cout
        self.blocks = nn.ModuleList(blocks)
        self.head = conv(c, 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        feats = []
        h = x
        for b in self.blocks:
            h = F.leaky_relu(b(h), 0.2)
            feats.append(h)
        return self.head(h), feats


class SliceDiscriminator(_PatchDiscriminator):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__(nn.Conv2d, cfg.in_channels, cfg.disc_channels, cfg.norm_groups)


class VolumeDiscriminator(_PatchDiscriminator):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__(nn.Conv3d, cfg.in_channels, cfg.disc_channels, cfg.norm_groups)


class FeatureNet2d(nn.Module):
    """Fixed (never trained) random 2D conv stack used for the perceptual loss."""

    def __init__(self, cin: int, ch: int, layers: int):
        super().__init__()
        convs = []
        c = cin
        for _ in range(layers):
            convs.append(nn.Conv2d(c, ch, 3, padding=1))
            c = ch
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
            feats.append(h)
        return feats


class VQAutoencoder(nn.Module):
    """All autoencoder weights: f, g, the codebook, both discriminators and the fixed feature net."""

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder3d(cfg)
        self.decoder = Decoder3d(cfg)
        self.codebook = Codebook(cfg.codebook_size, cfg.latent_channels)
        self.disc_slice = SliceDiscriminator(cfg)
        self.disc_volume = VolumeDiscriminator(cfg)
        self.perceptual = FeatureNet2d(cfg.in_channels, cfg.perceptual_channels, cfg.perceptual_layers)

    def generator_parameters(self) -> list[nn.Parameter]:
        return [*self.encoder.parameters(), *self.decoder.parameters(), *self.codebook.parameters()]

    def discriminator_parameters(self) -> list[nn.Parameter]:
        return [*self.disc_slice.parameters(), *self.disc_volume.parameters()]

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, LatentGrid]:
        grid = quantize(encode(self, x), self.codebook)
        return decode(self, grid), grid


def build_autoencoder(cfg: AutoencoderConfig, seed: int = 0) -> VQAutoencoder:
    with seeded(seed):
        model = VQAutoencoder(cfg)
    return model


def freeze(model: nn.Module) -> nn.Module:
    """Detached evaluation snapshot; later training of `model` does not affect it."""
    snap = copy.deepcopy(model).eval()
    snap.requires_grad_(False)
    return snap


# --- Encode / quantize / decode ---------------------------------------------


@dataclass(frozen=True)
class LatentGrid:
    """Quantizer output.

    continuous: encoder output f(x), (B, c, h, w, d)
    indices:    nearest codebook index per position, (B, h, w, d), int64
    embedded:   codebook entries at `indices` (gradients reach the codebook)
    quantized:  straight-through tensor, value of `embedded`, gradient of `continuous`
    """

    continuous: torch.Tensor
    indices: torch.Tensor
    embedded: torch.Tensor
    quantized: torch.Tensor

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.indices.shape[1:])  # type: ignore[return-value]

    @classmethod
    def from_indices(cls, indices: torch.Tensor, codebook: Codebook) -> LatentGrid:
        emb = codebook.embedding(indices).permute(0, 4, 1, 2, 3)
        return cls(emb, indices, emb, emb)


def encode(model: VQAutoencoder, x: torch.Tensor) -> torch.Tensor:
    if x.ndim != 5:
        raise AutoencoderError(f"expected (B, C, H, W, D) input, got shape {tuple(x.shape)}")
    k = model.config.compression
    if any(s % k for s in x.shape[2:]):
        raise AutoencoderError(f"non-divisible dims: {tuple(x.shape[2:])} by compression {k}")
    return model.encoder(x)


def nearest_indices(vectors: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """argmin_k ||v - e_k||^2 per row; ties go to the lowest index."""
    n, c = vectors.shape
    rows = max(1, _QUANT_CHUNK_ELEMS // max(entries.shape[0] * c, 1))
    out = []
    for chunk in torch.split(vectors, rows):
        d = ((chunk[:, None, :] - entries[None, :, :]) ** 2).sum(-1)
        out.append(torch.argmin(d, dim=1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def quantize(latent: torch.Tensor, codebook: Codebook) -> LatentGrid:
    if latent.ndim != 5 or latent.shape[1] != codebook.dim:
        raise AutoencoderError(f"latent channel dim must be {codebook.dim}, got shape {tuple(latent.shape)}")
    b, c, h, w, d = latent.shape
    flat = latent.permute(0, 2, 3, 4, 1).reshape(-1, c)
    idx = nearest_indices(flat.detach(), codebook.entries.detach()).view(b, h, w, d)
    embedded = codebook.embedding(idx).permute(0, 4, 1, 2, 3)
    quantized = latent + (embedded - latent).detach()
    return LatentGrid(latent, idx, embedded, quantized)


def decode(model: VQAutoencoder, grid: LatentGrid | torch.Tensor) -> torch.Tensor:
    z = grid.quantized if isinstance(grid, LatentGrid) else grid
    c = model.config.latent_channels
    if z.ndim != 5 or z.shape[1] != c:
        raise AutoencoderError(f"shape mismatch: decoder expects (B, {c}, h, w, d), got {tuple(z.shape)}")
    return model.decoder(z)


# --- Losses -----------------------------------------------------------------


@dataclass
class LossBreakdown:
    """Scalar tensors for every loss term; `total` is the generator objective."""

    recon: torch.Tensor
    codebook: torch.Tensor
    commit: torch.Tensor
    perceptual: torch.Tensor
    match: torch.Tensor
    gan_generator: torch.Tensor
    disc: torch.Tensor
    total: torch.Tensor

    @classmethod
    def compose(
        cls,
        weights: LossWeights,
        *,
        recon: torch.Tensor,
        codebook: torch.Tensor,
        commit: torch.Tensor,
        perceptual: torch.Tensor | None = None,
        match: torch.Tensor | None = None,
        gan_generator: torch.Tensor | None = None,
        disc: torch.Tensor | None = None,
    ) -> LossBreakdown:
        zero = torch.zeros((), dtype=recon.dtype, device=recon.device)
        perceptual = zero if perceptual is None else perceptual
        match = zero if match is None else match
        gan_generator = zero if gan_generator is None else gan_generator
        disc = zero if disc is None else disc
        total = (
            recon
            + codebook
            + commit
            + weights.lambda_perceptual * perceptual
            + weights.lambda_match * match
            + weights.lambda_gan * gan_generator
        )
        return cls(recon, codebook, commit, perceptual, match, gan_generator, disc, total)

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in self.__dataclass_fields__}


def vq_losses(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    continuous: torch.Tensor,
    embedded: torch.Tensor,
    weights: LossWeights,
) -> LossBreakdown:
    """Partial breakdown with recon/codebook/commit filled, other terms zero."""
    if x.shape != x_hat.shape:
        raise AutoencoderError(f"shape mismatch: x {tuple(x.shape)} vs x_hat {tuple(x_hat.shape)}")
    if continuous.shape != embedded.shape:
        raise AutoencoderError(f"shape mismatch: continuous {tuple(continuous.shape)} vs embedded {tuple(embedded.shape)}")
    recon = (x - x_hat).abs().mean()
    codebook = F.mse_loss(embedded, continuous.detach())
    commit = weights.alpha * F.mse_loss(continuous, embedded.detach())
    return LossBreakdown.compose(weights, recon=recon, codebook=codebook, commit=commit)


def plane_slices(v: torch.Tensor, plane: str, mode: str = "all") -> torch.Tensor:
    """Stack of 2D slices of `v` (B, C, H, W, D) lying in `plane`, as a (N, C, a, b) batch."""
    axis = _PLANE_AXIS[plane]
    if mode == "mid":
        return v.select(axis, v.shape[axis] // 2)
    moved = v.movedim(axis, 1)
    return moved.reshape(-1, *moved.shape[2:])


def perceptual_terms(
    x: torch.Tensor, x_hat: torch.Tensor, feature_net: nn.Module, mode: str = "all"
) -> dict[str, torch.Tensor]:
    if x.shape != x_hat.shape:
        raise AutoencoderError(f"shape mismatch: x {tuple(x.shape)} vs x_hat {tuple(x_hat.shape)}")
    terms = {}
    for plane in PLANES:
        fa = feature_net(plane_slices(x, plane, mode))
        fb = feature_net(plane_slices(x_hat, plane, mode))
        terms[plane] = torch.stack([(a - b).abs().mean() for a, b in zip(fa, fb)]).mean()
    return terms


def perceptual_loss(x: torch.Tensor, x_hat: torch.Tensor, feature_net: nn.Module, mode: str = "all") -> torch.Tensor:
    terms = perceptual_terms(x, x_hat, feature_net, mode)
    return torch.stack([terms[p] for p in PLANES]).mean()


@dataclass
class AdversarialTerms:
    disc: torch.Tensor
    gan_generator: torch.Tensor
    match: torch.Tensor


def _adversarial_one(
    disc: nn.Module, real: torch.Tensor, fake: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    real_logit, real_feats = disc(real)
    fake_logit_det, _ = disc(fake.detach())
    fake_logit, fake_feats = disc(fake)
    d_term = F.logsigmoid(real_logit).mean() + F.logsigmoid(-fake_logit_det).mean()
    g_term = -F.logsigmoid(fake_logit).mean()
    if fake_feats:
        m_term = torch.stack([(f - r.detach()).abs().mean() for f, r in zip(fake_feats, real_feats)]).sum()
    else:
        m_term = torch.zeros((), dtype=real.dtype, device=real.device)
    return d_term, g_term, m_term


def discriminator_losses(
    x: torch.Tensor, x_hat: torch.Tensor, d_slice: nn.Module, d_volume: nn.Module
) -> AdversarialTerms:
    """`disc` sees x_hat detached (discriminator step); `gan_generator` and `match` carry generator gradients."""
    if x.shape != x_hat.shape:
        raise AutoencoderError(f"shape mismatch: x {tuple(x.shape)} vs x_hat {tuple(x_hat.shape)}")
    ds, gs, ms = _adversarial_one(d_slice, plane_slices(x, "hw"), plane_slices(x_hat, "hw"))
    dv, gv, mv = _adversarial_one(d_volume, x, x_hat)
    return AdversarialTerms(disc=ds + dv, gan_generator=gs + gv, match=ms + mv)


# --- Training ---------------------------------------------------------------


def autoencoder_step_losses(
    model: VQAutoencoder, x: torch.Tensor, weights: LossWeights, *, adversarial: bool, perceptual_mode: str = "all"
) -> tuple[LossBreakdown, torch.Tensor]:
    x_hat, grid = model(x)
    vq = vq_losses(x, x_hat, grid.continuous, grid.embedded, weights)
    perc = perceptual_loss(x, x_hat, model.perceptual, perceptual_mode)
    if adversarial:
        adv = discriminator_losses(x, x_hat, model.disc_slice, model.disc_volume)
        parts = {"match": adv.match, "gan_generator": adv.gan_generator, "disc": adv.disc}
    else:
        parts = {}
    breakdown = LossBreakdown.compose(
        weights, recon=vq.recon, codebook=vq.codebook, commit=vq.commit, perceptual=perc, **parts
    )
    return breakdown, x_hat


def _as_patch_tensor(dataset: Sequence) -> torch.Tensor:
    if len(dataset) == 0:
        raise AutoencoderError("empty dataset")
    return stack_batch(list(dataset))


def train_autoencoder(
    dataset: Sequence,
    cfg: AETrainConfig,
    model_cfg: AutoencoderConfig | None = None,
    *,
    model: VQAutoencoder | None = None,
    on_checkpoint=None,
) -> tuple[VQAutoencoder, list[dict[str, float]]]:
    """Alternating generator / discriminator Adam steps over random batches of `dataset` patches.

    `on_checkpoint(model, step)` is called every `cfg.checkpoint_every` steps when set.
    """
    data = _as_patch_tensor(dataset)
    if model is None:
        model = build_autoencoder(model_cfg or AutoencoderConfig(), seed=cfg.seed)
    k = model.config.compression
    if any(s % k for s in data.shape[2:]):
        raise AutoencoderError(f"non-divisible dims: {tuple(data.shape[2:])} by compression {k}")

    opt_g = torch.optim.Adam(model.generator_parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=cfg.lr, betas=cfg.betas)
    gen = generator(cfg.seed)
    history: list[dict[str, float]] = []
    model.train()

    for step in range(cfg.steps):
        idx = torch.randint(len(data), (min(cfg.batch_size, len(data)),), generator=gen)
        x = data[idx]
        adversarial = step >= cfg.gan_warmup_steps

        breakdown, _x_hat = autoencoder_step_losses(
            model, x, cfg.weights, adversarial=adversarial, perceptual_mode=cfg.perceptual_mode
        )
        record = breakdown.as_floats()
        check_finite("ae", step, record)

        opt_g.zero_grad(set_to_none=True)
        breakdown.total.backward()
        opt_g.step()

        if adversarial:
            # discriminators maximize disc; recompute on the updated generator output
            with torch.no_grad():
                x_hat = model(x)[0]
            opt_d.zero_grad(set_to_none=True)
            d_real, _ = model.disc_slice(plane_slices(x, "hw"))
            d_fake, _ = model.disc_slice(plane_slices(x_hat, "hw"))
            v_real, _ = model.disc_volume(x)
            v_fake, _ = model.disc_volume(x_hat)
            disc = (
                F.logsigmoid(d_real).mean()
                + F.logsigmoid(-d_fake).mean()
                + F.logsigmoid(v_real).mean()
                + F.logsigmoid(-v_fake).mean()
            )
            check_finite("ae", step, {"disc": disc})
            (-disc).backward()
            opt_d.step()

        history.append(record)
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.info(
                "[ae] step=%d  recon=%.4f  codebook=%.4f  commit=%.4f  perc=%.4f  gan=%.4f",
                step,
                record["recon"],
                record["codebook"],
                record["commit"],
                record["perceptual"],
                record["gan_generator"],
            )
        if on_checkpoint is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(model, step + 1)

    model.eval()
    return model, history


def reconstruct(model: VQAutoencoder, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return model(x)[0]


def codebook_usage(model: VQAutoencoder, patches: Sequence) -> np.ndarray:
    """Histogram of codebook indices over `patches` (diagnostic for dead entries)."""
    counts = np.zeros(model.config.codebook_size, dtype=np.int64)
    with torch.no_grad():
        for p in patches:
            grid = quantize(encode(model, stack_batch([p])), model.codebook)
            counts += np.bincount(grid.indices.ravel().numpy(), minlength=counts.size)
    return counts


__all__ = [
    "AE_PRESETS",
    "AETrainConfig",
    "AdversarialTerms",
    "AutoencoderConfig",
    "AutoencoderError",
    "Codebook",
    "LatentGrid",
    "LossBreakdown",
    "LossWeights",
    "VQAutoencoder",
    "build_autoencoder",
    "codebook_usage",
    "decode",
    "discriminator_losses",
    "encode",
    "freeze",
    "perceptual_loss",
    "perceptual_terms",
    "quantize",
    "reconstruct",
    "train_autoencoder",
    "vq_losses",
]
