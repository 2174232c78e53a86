"""Mask-conditioned latent diffusion (DDPM, epsilon-prediction).

Timesteps are 1-indexed: t in 1..T, schedule arrays are indexed with t - 1.

  forward:   z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) noise
  marginal:  z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps
  loss:      || eps - eps_theta([z_t, healthy, m_lat], t) ||^2,  t ~ U{1..T}

Sampling runs on a respaced subset s_1 < ... < s_k of 1..T with
beta'_i = 1 - abar_{s_i} / abar_{s_{i-1}} (abar_{s_0} = 1). After every update the
voxels outside the latent mask are replaced by q_sample(healthy, s_{i-1}).
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from autoenc import VQAutoencoder, encode
from training import check_finite, generator, seeded, to_tensor
from volcore import AE_WINDOW, Case, VoxelMask, crop_patch, window_normalize

log = logging.getLogger(__name__)

DEFAULT_T = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02
DEFAULT_SAMPLING_STEPS = 4


class DiffusionError(ValueError):
    pass


# --- Noise schedule ---------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        beta = np.array(self.beta, dtype=np.float64, copy=True).reshape(-1)
        if beta.size < 1:
            raise DiffusionError("schedule needs T >= 1")
        if not np.all((beta > 0) & (beta < 1)):
            raise DiffusionError("every beta_t must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for a in (beta, alpha, alpha_bar):
            a.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_t(self, t: int | torch.Tensor) -> None:
        lo, hi = (int(t.min()), int(t.max())) if isinstance(t, torch.Tensor) else (int(t), int(t))
        if lo < 1 or hi > self.T:
            raise DiffusionError(f"t out of range: expected 1..{self.T}, got {lo if lo < 1 else hi}")


def make_schedule(kind: str = "linear", T: int = DEFAULT_T, beta_min: float = DEFAULT_BETA_MIN, beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    if kind != "linear":
        raise DiffusionError(f"unknown schedule kind: {kind!r}")
    if T < 1:
        raise DiffusionError(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise DiffusionError(f"invalid bounds: need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    return NoiseSchedule(np.linspace(beta_min, beta_max, T, dtype=np.float64))


def space_steps(T: int, n: int) -> tuple[int, ...]:
    """n evenly spaced steps of 1..T, both ends included; a single step is T."""
    if n < 1:
        raise DiffusionError("need at least one sampling step")
    if n >= T:
        return tuple(range(1, T + 1))
    if n == 1:
        return (T,)
    stride = (T - 1) / (n - 1)
    return tuple(sorted({1 + int(math.floor(i * stride + 0.5)) for i in range(n)}))


def validate_steps(steps: Sequence[int], schedule: NoiseSchedule) -> tuple[int, ...]:
    s = tuple(int(x) for x in steps)
    if not s:
        raise DiffusionError("empty steps")
    if any(b <= a for a, b in zip(s, s[1:])):
        raise DiffusionError(f"steps must be strictly increasing: {s}")
    if s[0] < 1 or s[-1] > schedule.T:
        raise DiffusionError(f"steps must lie in 1..{schedule.T}: {s}")
    return s


def respace(schedule: NoiseSchedule, steps: Sequence[int]) -> NoiseSchedule:
    s = validate_steps(steps, schedule)
    abar = schedule.alpha_bar[np.asarray(s) - 1]
    prev = np.concatenate([[1.0], abar[:-1]])
    return NoiseSchedule(1.0 - abar / prev)


def _coef(values: np.ndarray, t: int | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        c = torch.as_tensor(values, dtype=like.dtype, device=like.device)[t.long() - 1]
        return c.view(-1, *([1] * (like.ndim - 1)))
    return torch.as_tensor(float(values[int(t) - 1]), dtype=like.dtype, device=like.device)


def forward_step(z_prev: torch.Tensor, t: int | torch.Tensor, schedule: NoiseSchedule, noise: torch.Tensor) -> torch.Tensor:
    schedule.check_t(t)
    if noise.shape != z_prev.shape:
        raise DiffusionError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z_prev.shape)}")
    beta = _coef(schedule.beta, t, z_prev)
    return torch.sqrt(1.0 - beta) * z_prev + torch.sqrt(beta) * noise


def q_sample(z0: torch.Tensor, t: int | torch.Tensor, schedule: NoiseSchedule, eps: torch.Tensor) -> torch.Tensor:
    schedule.check_t(t)
    if eps.shape != z0.shape:
        raise DiffusionError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    abar = _coef(schedule.alpha_bar, t, z0)
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


# --- Conditioning -----------------------------------------------------------


def downsample_mask(m: VoxelMask | np.ndarray | torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Max-pool a voxel mask to latent resolution: (B, 1, H/k, W/k, D/k) float tensor."""
    t = to_tensor(m)
    if any(s % factor for s in t.shape[2:]):
        raise DiffusionError(f"mask shape {tuple(t.shape[2:])} not divisible by {factor}")
    return F.max_pool3d((t > 0).to(torch.float32), kernel_size=factor, stride=factor)


@dataclass(frozen=True)
class DiffusionCondition:
    """healthy = (1 - m_lat) * z0, exactly zero inside the latent mask."""

    healthy: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self) -> None:
        if self.healthy.ndim != 5 or self.mask.ndim != 5 or self.mask.shape[1] != 1:
            raise DiffusionError(
                f"condition expects healthy (B, c, h, w, d) and mask (B, 1, h, w, d), got {tuple(self.healthy.shape)} / {tuple(self.mask.shape)}"
            )
        if self.mask.shape[0] != self.healthy.shape[0] or self.mask.shape[2:] != self.healthy.shape[2:]:
            raise DiffusionError(f"mask shape {tuple(self.mask.shape)} does not match latent {tuple(self.healthy.shape)}")
        if bool((self.healthy * (self.mask > 0)).abs().max() > 0):
            raise DiffusionError("inconsistent condition: healthy latent is non-zero inside the mask")

    @staticmethod
    def healthy_of(z0: torch.Tensor, m_lat: torch.Tensor) -> torch.Tensor:
        return torch.where(m_lat > 0, torch.zeros_like(z0), z0)

    @classmethod
    def from_latent(cls, z0: torch.Tensor, m_lat: torch.Tensor) -> DiffusionCondition:
        m = m_lat.to(z0.dtype)
        return cls(cls.healthy_of(z0, m), m)


# --- Denoiser ---------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    # levels with factorized attention; None = the coarsest two
    attention_levels: tuple[int, ...] | None = None
    heads: int = 4
    norm_groups: int = 8
    timesteps: int = DEFAULT_T
    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX
    # multiplier applied to encoder latents before diffusion
    latent_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.latent_channels < 1 or self.base_channels < 1 or not self.channel_mults:
            raise DiffusionError("invalid denoiser widths")
        for lvl in self.attention_levels or ():
            if not 0 <= lvl < len(self.channel_mults):
                raise DiffusionError(f"attention level {lvl} out of range")
        if any(self.base_channels * m % self.heads for m in self.channel_mults):
            raise DiffusionError("every level width must be divisible by heads")
        if not self.latent_scale > 0:
            raise DiffusionError("latent_scale must be > 0")

    @property
    def resolved_attention_levels(self) -> tuple[int, ...]:
        if self.attention_levels is not None:
            return tuple(self.attention_levels)
        n = len(self.channel_mults)
        return tuple(range(max(0, n - 2), n))

    def schedule(self) -> NoiseSchedule:
        return make_schedule("linear", self.timesteps, self.beta_min, self.beta_max)


DENOISER_PRESETS: dict[str, DenoiserConfig] = {
    "desk": DenoiserConfig(),
    "paper": DenoiserConfig(latent_channels=8, base_channels=64, channel_mults=(1, 2, 4), heads=8),
}


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / max(half, 1))
    args = t.to(torch.float32)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, ch), ch)


class TimeResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, groups: int):
        super().__init__()
        self.norm1 = _norm(cin, groups)
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = _norm(cout, groups)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class FactorizedAttention(nn.Module):
    """Self-attention within each 2D (H, W) slice, then along depth for every (h, w) column.

    `last_score_elements` holds (spatial, depth) attention-score element counts of the last call.
    """

    def __init__(self, ch: int, heads: int, groups: int):
        super().__init__()
        self.heads = heads
        self.norm_s = _norm(ch, groups)
        self.qkv_s = nn.Conv3d(ch, 3 * ch, 1)
        self.proj_s = nn.Conv3d(ch, ch, 1)
        self.norm_d = _norm(ch, groups)
        self.qkv_d = nn.Conv3d(ch, 3 * ch, 1)
        self.proj_d = nn.Conv3d(ch, ch, 1)
        self.last_score_elements: tuple[int, int] = (0, 0)

    def _attend(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, int]:
        # q, k, v: (N, heads, L, dh)
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        return torch.softmax(scores, dim=-1) @ v, scores.numel()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w, d = x.shape
        nh, dh = self.heads, c // self.heads

        # per-slice: tokens are the h*w positions of each depth slice
        q, k, v = self.qkv_s(self.norm_s(x)).chunk(3, dim=1)

        def to_slices(t: torch.Tensor) -> torch.Tensor:
            return t.permute(0, 4, 2, 3, 1).reshape(b * d, h * w, nh, dh).transpose(1, 2)

        out, n_spatial = self._attend(to_slices(q), to_slices(k), to_slices(v))
        out = out.transpose(1, 2).reshape(b, d, h, w, c).permute(0, 4, 2, 3, 1)
        x = x + self.proj_s(out)

        # along depth: tokens are the d positions of each (h, w) column
        q, k, v = self.qkv_d(self.norm_d(x)).chunk(3, dim=1)

        def to_columns(t: torch.Tensor) -> torch.Tensor:
            return t.permute(0, 2, 3, 4, 1).reshape(b * h * w, d, nh, dh).transpose(1, 2)

        out, n_depth = self._attend(to_columns(q), to_columns(k), to_columns(v))
        out = out.transpose(1, 2).reshape(b, h, w, d, c).permute(0, 4, 1, 2, 3)
        x = x + self.proj_d(out)

        self.last_score_elements = (n_spatial, n_depth)
        return x


class Denoiser3d(nn.Module):
    """3D U-Net eps_theta over [z_t, healthy, m_lat] with factorized attention at configured levels."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.config = cfg
        self.calls = 0
        c = cfg.latent_channels
        g = cfg.norm_groups
        base = cfg.base_channels
        temb = 4 * base
        attn = set(cfg.resolved_attention_levels)

        self.time_mlp = nn.Sequential(nn.Linear(base, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv3d(2 * c + 1, base, 3, padding=1)

        widths = [base * m for m in cfg.channel_mults]
        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = base
        for i, wdt in enumerate(widths):
            self.down_res.append(TimeResBlock(ch, wdt, temb, g))
            self.down_attn.append(FactorizedAttention(wdt, cfg.heads, g) if i in attn else nn.Identity())
            self.downsample.append(nn.Conv3d(wdt, wdt, 4, stride=2, padding=1) if i < len(widths) - 1 else nn.Identity())
            ch = wdt

        self.mid1 = TimeResBlock(ch, ch, temb, g)
        self.mid_attn = FactorizedAttention(ch, cfg.heads, g)
        self.mid2 = TimeResBlock(ch, ch, temb, g)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(widths))):
            wdt = widths[i]
            self.up_res.append(TimeResBlock(ch + wdt, wdt, temb, g))
            self.up_attn.append(FactorizedAttention(wdt, cfg.heads, g) if i in attn else nn.Identity())
            lower = widths[i - 1] if i > 0 else wdt
            self.upsample.append(
                nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv3d(wdt, lower, 3, padding=1))
                if i > 0
                else nn.Identity()
            )
            ch = lower if i > 0 else wdt

        self.norm_out = _norm(ch, g)
        self.conv_out = nn.Conv3d(ch, c, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @property
    def downsampling(self) -> int:
        return 2 ** (len(self.config.channel_mults) - 1)

    def attention_blocks(self) -> list[FactorizedAttention]:
        return [m for m in self.modules() if isinstance(m, FactorizedAttention)]

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.config.base_channels))
        h = self.conv_in(x)
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.downsample):
            h = attn(res(h, temb))
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)
        for res, attn, up in zip(self.up_res, self.up_attn, self.upsample):
            h = attn(res(torch.cat([h, skips.pop()], dim=1), temb))
            h = up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


def build_denoiser(cfg: DenoiserConfig, seed: int = 0) -> Denoiser3d:
    with seeded(seed):
        return Denoiser3d(cfg)


# params may be a Denoiser3d or any callable (z_t, cond, t) -> eps_hat
NoisePredictor = Denoiser3d | Callable[[torch.Tensor, DiffusionCondition, torch.Tensor], torch.Tensor]


def _t_tensor(t: int | torch.Tensor, batch: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        return t.long()
    return torch.full((batch,), int(t), dtype=torch.long)


def predict_noise(params: NoisePredictor, z_t: torch.Tensor, cond: DiffusionCondition, t: int | torch.Tensor) -> torch.Tensor:
    if z_t.shape != cond.healthy.shape:
        raise DiffusionError(f"shape mismatch: z_t {tuple(z_t.shape)} vs healthy {tuple(cond.healthy.shape)}")
    tt = _t_tensor(t, z_t.shape[0])
    if isinstance(params, Denoiser3d):
        c = params.config.latent_channels
        if z_t.shape[1] != c:
            raise DiffusionError(f"shape mismatch: denoiser expects {c} latent channels, got {z_t.shape[1]}")
        k = params.downsampling
        if any(s % k for s in z_t.shape[2:]):
            raise DiffusionError(f"shape mismatch: latent dims {tuple(z_t.shape[2:])} not divisible by {k}")
        params.calls += 1
        x = torch.cat([z_t, cond.healthy, cond.mask.to(z_t.dtype)], dim=1)
        out = params(x, tt)
    else:
        out = params(z_t, cond, tt)
    if out.shape != z_t.shape:
        raise DiffusionError(f"shape mismatch: eps_hat {tuple(out.shape)} vs z_t {tuple(z_t.shape)}")
    return out


# --- Objective and sampler --------------------------------------------------


def diffusion_loss(
    params: NoisePredictor,
    z0: torch.Tensor,
    cond: DiffusionCondition,
    schedule: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    if not torch.equal(cond.healthy, DiffusionCondition.healthy_of(z0, cond.mask)):
        raise DiffusionError("inconsistent condition: healthy != (1 - m) * z0")
    t = torch.randint(1, schedule.T + 1, (z0.shape[0],), generator=rng)
    eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    z_t = q_sample(z0, t, schedule, eps)
    return F.mse_loss(predict_noise(params, z_t, cond, t), eps)


@dataclass
class SampleTrace:
    """Per-step snapshots recorded by ddpm_sample when requested."""

    steps: list[int] = field(default_factory=list)
    latents: list[torch.Tensor] = field(default_factory=list)
    known: list[torch.Tensor] = field(default_factory=list)


@torch.no_grad()
def ddpm_sample(
    params: NoisePredictor,
    cond: DiffusionCondition,
    schedule: NoiseSchedule,
    steps: Sequence[int],
    rng: torch.Generator,
    trace: SampleTrace | None = None,
) -> torch.Tensor:
    s = validate_steps(steps, schedule)
    healthy = cond.healthy
    inside = cond.mask > 0
    abar = [float(schedule.alpha_bar[t - 1]) for t in s]

    def known_at(level: int) -> torch.Tensor:
        # healthy latent noised to the marginal of step s[level]; level -1 is the clean latent
        if level < 0:
            return healthy
        eps = torch.randn(healthy.shape, generator=rng, dtype=healthy.dtype)
        return q_sample(healthy, s[level], schedule, eps)

    z = torch.randn(healthy.shape, generator=rng, dtype=healthy.dtype)
    known = known_at(len(s) - 1)
    z = torch.where(inside, z, known)
    if trace is not None:
        trace.steps.append(s[-1])
        trace.latents.append(z.clone())
        trace.known.append(known.clone())

    for i in reversed(range(len(s))):
        ab_t = abar[i]
        ab_prev = abar[i - 1] if i > 0 else 1.0
        beta_t = 1.0 - ab_t / ab_prev
        eps_hat = predict_noise(params, z, cond, s[i])
        mean = (z - beta_t / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(1.0 - beta_t)
        if i > 0:
            var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
            z = mean + math.sqrt(var) * torch.randn(z.shape, generator=rng, dtype=z.dtype)
        else:
            z = mean
        known = known_at(i - 1)
        z = torch.where(inside, z, known)
        if trace is not None:
            trace.steps.append(s[i - 1] if i > 0 else 0)
            trace.latents.append(z.clone())
            trace.known.append(known.clone())
    return z


# --- Training ---------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionTrainConfig:
    steps: int = 500
    batch_size: int = 10
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    auto_scale: bool = True
    log_every: int = 100
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise DiffusionError("steps must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise DiffusionError("lr must be > 0")


LatentPair = tuple[torch.Tensor, torch.Tensor]


def _stack_pairs(pairs: Sequence[LatentPair]) -> tuple[torch.Tensor, torch.Tensor]:
    if not pairs:
        raise DiffusionError("empty latent dataset")
    zs, ms = [], []
    for z, m in pairs:
        zs.append(z if z.ndim == 5 else z[None])
        ms.append(to_tensor(m) if m.ndim < 5 else m)
    Z = torch.cat(zs).to(torch.float32)
    M = torch.cat(ms).to(torch.float32)
    if Z.shape[0] != M.shape[0] or Z.shape[2:] != M.shape[2:]:
        raise DiffusionError(f"latent/mask shape mismatch: {tuple(Z.shape)} vs {tuple(M.shape)}")
    return Z, M


def latent_scale_of(latents: torch.Tensor) -> float:
    std = float(latents.std()) if latents.numel() > 1 else 0.0
    return 1.0 / std if std > 1e-8 else 1.0


def train_diffusion(
    pairs: Sequence[LatentPair],
    cfg: DiffusionTrainConfig,
    model_cfg: DenoiserConfig | None = None,
    *,
    model: Denoiser3d | None = None,
    on_checkpoint=None,
) -> tuple[Denoiser3d, list[dict[str, float]]]:
    """Minimize the noise-prediction loss with Adam over (z0, m_lat) pairs from a frozen autoencoder."""
    Z, M = _stack_pairs(pairs)
    if model is None:
        mcfg = model_cfg or DenoiserConfig(latent_channels=int(Z.shape[1]))
        if cfg.auto_scale:
            mcfg = replace(mcfg, latent_scale=latent_scale_of(Z))
        model = build_denoiser(mcfg, seed=cfg.seed)
    if Z.shape[1] != model.config.latent_channels:
        raise DiffusionError(f"latent channels {Z.shape[1]} != denoiser channels {model.config.latent_channels}")
    Z = Z * model.config.latent_scale
    schedule = model.config.schedule()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    gen = generator(cfg.seed)
    history: list[dict[str, float]] = []
    model.train()

    for step in range(cfg.steps):
        idx = torch.randint(len(Z), (min(cfg.batch_size, len(Z)),), generator=gen)
        z0, m = Z[idx], M[idx]
        cond = DiffusionCondition.from_latent(z0, m)
        loss = diffusion_loss(model, z0, cond, schedule, gen)
        check_finite("diff", step, {"loss": loss})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append({"loss": float(loss.detach())})
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.info("[diff] step=%d  loss=%.5f", step, history[-1]["loss"])
        if on_checkpoint is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(model, step + 1)

    model.eval()
    model.calls = 0
    return model, history


def tumor_center(mask: VoxelMask) -> tuple[int, int, int]:
    pts = np.argwhere(mask.data > 0)
    if len(pts) == 0:
        raise DiffusionError("empty tumor mask has no center")
    return tuple(int(v) for v in np.floor(pts.mean(axis=0) + 0.5))  # type: ignore[return-value]


@torch.no_grad()
def encode_pairs(ae: VQAutoencoder, cases: Sequence[Case], patch_size: int | None = None) -> list[LatentPair]:
    """(z0, m_lat) for every annotated case: a patch centered on the tumor, through the frozen encoder."""
    p = patch_size or ae.config.patch_size
    out: list[LatentPair] = []
    for case in cases:
        if case.healthy:
            continue
        center = tumor_center(case.tumor)
        vol = window_normalize(case.volume, AE_WINDOW)
        x = to_tensor(crop_patch(vol, center, (p, p, p), pad_value=-1.0))
        m = crop_patch(case.tumor, center, (p, p, p))
        z0 = encode(ae, x)
        out.append((z0[0], downsample_mask(m, ae.config.compression)[0]))
    if not out:
        raise DiffusionError("no annotated tumors to build latent pairs from")
    return out


__all__ = [
    "DENOISER_PRESETS",
    "DEFAULT_SAMPLING_STEPS",
    "DenoiserConfig",
    "Denoiser3d",
    "DiffusionCondition",
    "DiffusionError",
    "DiffusionTrainConfig",
    "FactorizedAttention",
    "NoiseSchedule",
    "SampleTrace",
    "build_denoiser",
    "ddpm_sample",
    "diffusion_loss",
    "downsample_mask",
    "encode_pairs",
    "forward_step",
    "make_schedule",
    "predict_noise",
    "q_sample",
    "respace",
    "space_steps",
    "train_diffusion",
    "tumor_center",
]
