from __future__ import annotations

import numpy as np

from autoenc import AETrainConfig, AutoencoderConfig, build_autoencoder
from latdiff import DenoiserConfig, build_denoiser
from runs import ExperimentConfig, resolve_config
from seg import SegConfig
from volcore import Case, PhantomSpec, Volume, VoxelMask, make_phantom


def tiny_ae_config(**kw) -> AutoencoderConfig:
    """Autoencoder small enough for CPU tests (16^3 patches -> 4^3 latents)."""
    base = dict(
        base_channels=4,
        latent_channels=2,
        codebook_size=16,
        compression=4,
        disc_channels=4,
        perceptual_channels=4,
        perceptual_layers=2,
        norm_groups=2,
        patch_size=16,
    )
    base.update(kw)
    return AutoencoderConfig(**base)


def tiny_ae_train(**kw) -> AETrainConfig:
    base = dict(steps=2, batch_size=1, gan_warmup_steps=1, log_every=0)
    base.update(kw)
    return AETrainConfig(**base)


def tiny_dn_config(**kw) -> DenoiserConfig:
    base = dict(latent_channels=2, base_channels=8, channel_mults=(1, 2), heads=2, norm_groups=2, timesteps=50)
    base.update(kw)
    return DenoiserConfig(**base)


def tiny_seg_config(**kw) -> SegConfig:
    base = dict(
        patch_size=(16, 16, 16),
        epochs=1,
        batch_size=1,
        steps_per_epoch=2,
        base_channels=4,
        norm_groups=2,
        log_every=0,
    )
    base.update(kw)
    return SegConfig(**base)


def tiny_models(seed: int = 0):
    ae = build_autoencoder(tiny_ae_config(), seed=seed).eval()
    dn = build_denoiser(tiny_dn_config(), seed=seed).eval()
    return ae, dn


def ball(shape: tuple[int, int, int], center: tuple[float, float, float], radius: float) -> np.ndarray:
    """Boolean ball of voxel centers within `radius` (voxel units) of `center`."""
    idx = np.indices(shape, dtype=np.float64)
    d2 = sum((idx[i] - center[i]) ** 2 for i in range(3))
    return d2 <= radius**2


def mask_of(arr: np.ndarray, spacing: float = 1.0) -> VoxelMask:
    return VoxelMask(np.asarray(arr, dtype=np.uint8), spacing=(spacing,) * 3)


def small_phantom_spec(**kw) -> PhantomSpec:
    base = dict(grid_shape=(32, 32, 32), organ_radius_range=(9.0, 11.0), lesion_radius_range=(2.0, 3.0), seed=0)
    base.update(kw)
    return PhantomSpec(**base)


def small_case(case_id: str = "c0", *, seed: int = 0, with_lesion: bool = True, **kw) -> Case:
    vol, organ, lesion = make_phantom(small_phantom_spec(seed=seed, with_lesion=with_lesion, **kw))
    return Case(case_id, vol, organ, lesion, "liver", {"seed": seed})


def constant_volume(shape: tuple[int, int, int], value: float = 0.0, spacing: float = 1.0) -> Volume:
    return Volume(np.full(shape, value, dtype=np.float32), spacing=(spacing,) * 3)


# `--set` assignments shrinking every stage of an experiment to CPU-test size
TINY_OVERRIDES = [
    "corpus.organ=kidney",
    "corpus.grid_size=40",
    "corpus.n_real=2",
    "corpus.n_healthy=2",
    "corpus.n_test=1",
    "autoenc.base_channels=4",
    "autoenc.latent_channels=2",
    "autoenc.codebook_size=16",
    "autoenc.disc_channels=4",
    "autoenc.perceptual_channels=4",
    "autoenc.perceptual_layers=2",
    "autoenc.norm_groups=2",
    "autoenc.patch_size=16",
    "ae_train.steps=2",
    "ae_train.batch_size=1",
    "ae_train.gan_warmup_steps=1",
    "ae_train.log_every=0",
    "latdiff.latent_channels=2",
    "latdiff.base_channels=8",
    "latdiff.heads=2",
    "latdiff.norm_groups=2",
    "latdiff.timesteps=50",
    "diff_train.steps=2",
    "diff_train.batch_size=2",
    "diff_train.log_every=0",
    'maskgen.diameter_ranges_mm={"early": [4, 8], "medium": [20, 50], "large": [50.5, 80]}',
    "maskgen.deform_magnitude_mm=1.0",
    "seg.patch_size=[16,16,16]",
    "seg.epochs=1",
    "seg.batch_size=1",
    "seg.steps_per_epoch=2",
    "seg.base_channels=4",
    "seg.norm_groups=2",
    "seg.log_every=0",
    "seg.sliding_overlap=0.0",
    "featlab.repeats=2",
]


def tiny_experiment(*extra: str, seed: int = 0) -> ExperimentConfig:
    return resolve_config(overrides=[*TINY_OVERRIDES, *extra], seed=seed)
