"""Experiment harnesses on phantom corpora.

Stages are wired in this order:

  corpus (real / healthy / test)
    -> autoencoder  (patches of every training case)
    -> denoiser     (latent pairs of the annotated cases, autoencoder frozen)
    -> segmenter    (annotated cases, plus healthy cases with synthetic tumors)
    -> eval         (test cases)

Trained stages may be cached under LLL_CACHE_DIR (see ckpt.cached_checkpoint);
with the variable unset every call trains from scratch.
"""

from __future__ import annotations

import contextlib
import json
import logging
from collections.abc import Callable, Sequence
from contextlib import AbstractContextManager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from autoenc import AutoencoderConfig, VQAutoencoder, build_autoencoder, freeze, train_autoencoder
from ckpt import MANIFEST, CheckpointError, cached_checkpoint, load_into, read_manifest, save_module
from config import ConfigError, from_dict, to_dict
from featlab import (
    FeatureRow,
    embed_2d,
    extract_features,
    repeat_origin_study,
)
from latdiff import DenoiserConfig, Denoiser3d, build_denoiser, encode_pairs, train_diffusion
from maskgen import MaskGenError, generate_tumor_mask
from runs import CorpusConfig, ExperimentConfig, PreprocessConfig, stage_seed
from seg import SegConfig, SegNet3d, build_segmenter, evaluate_cases, train_segmenter
from seg_metrics import aggregate
from synth import AugmentHook, SynthModels, SynthesisConfig, inpaint_tumor
from volcore import (
    AE_WINDOW,
    Case,
    crop_patch,
    load_cases,
    make_phantom,
    phantom_spec_for,
    preprocess_mask,
    random_crop_center,
    reorient,
    resample_isotropic,
    save_case,
    window_normalize,
)

log = logging.getLogger(__name__)

AE_KIND = "autoencoder"
DN_KIND = "denoiser"
SEG_KIND = "segmenter"

CORPUS_SPLITS = ("real", "healthy", "test")

# absolute lesion HU per organ for the organ-dependent origin study
ORGAN_LESION_HU = {"liver": 10.0, "pancreas": 60.0, "kidney": -10.0}
# shared lesion HU when lesions do not depend on the organ
SHARED_LESION_HU = 20.0

Timer = Callable[[str], AbstractContextManager[None]]


class ExperimentError(ValueError):
    pass


def _no_timer(_stage: str) -> AbstractContextManager[None]:
    return contextlib.nullcontext()


# --- Corpus -----------------------------------------------------------------


@dataclass(frozen=True)
class Corpus:
    real: tuple[Case, ...]
    healthy: tuple[Case, ...]
    test: tuple[Case, ...]

    def split(self, name: str) -> tuple[Case, ...]:
        if name not in CORPUS_SPLITS:
            raise ExperimentError(f"unknown split: {name!r}")
        return getattr(self, name)

    @property
    def training(self) -> tuple[Case, ...]:
        return self.real + self.healthy


def phantom_case(
    organ: str,
    split: str,
    index: int,
    cfg: CorpusConfig,
    seed: int,
    *,
    with_lesion: bool = True,
    lesion_contrast: float | None = None,
) -> Case:
    s = stage_seed(seed, f"phantom:{organ}:{split}:{index}")
    g = cfg.grid_size
    spec = phantom_spec_for(
        organ,
        grid_shape=(g, g, g),
        spacing_mm=cfg.spacing_mm,
        with_lesion=with_lesion,
        lesion_contrast=cfg.lesion_contrast if lesion_contrast is None else lesion_contrast,
        seed=s,
    )
    volume, organ_mask, lesion = make_phantom(spec)
    return Case(f"{split}-{index:03d}", volume, organ_mask, lesion, organ, {"split": split, "seed": s})


def build_corpus(cfg: CorpusConfig, seed: int, *, organ: str | None = None) -> Corpus:
    """real: annotated tumors; healthy: no tumor; test: annotated, held out."""
    o = organ or cfg.organ
    real = tuple(phantom_case(o, "real", i, cfg, seed) for i in range(cfg.n_real))
    healthy = tuple(phantom_case(o, "healthy", i, cfg, seed, with_lesion=False) for i in range(cfg.n_healthy))
    test = tuple(phantom_case(o, "test", i, cfg, seed) for i in range(cfg.n_test))
    log.info("[corpus] organ=%s  real=%d  healthy=%d  test=%d", o, len(real), len(healthy), len(test))
    return Corpus(real, healthy, test)


def save_corpus(corpus: Corpus, root: str | Path) -> Path:
    r = Path(root)
    for name in CORPUS_SPLITS:
        for case in corpus.split(name):
            save_case(case, r / name / case.case_id)
    return r


def load_corpus(root: str | Path, jobs: int = 1) -> Corpus:
    r = Path(root)
    parts = {name: tuple(load_cases(r / name, jobs)) if (r / name).is_dir() else () for name in CORPUS_SPLITS}
    if not any(parts.values()):
        raise ExperimentError(f"no corpus splits under {r} (expected {list(CORPUS_SPLITS)})")
    return Corpus(**parts)


def load_manifest_cases(path: str | Path, jobs: int = 1) -> list[Case]:
    """Cases listed by a JSON manifest: a list of paths, or {"cases": [...]}.

    Each entry is a case directory or a directory of cases, relative to the manifest.
    """
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"case manifest not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    entries = obj.get("cases") if isinstance(obj, dict) else obj
    if not isinstance(entries, list) or not all(isinstance(e, str) for e in entries):
        raise ConfigError(f"{p.name}: expected a list of case paths or an object with a \"cases\" list")
    cases: list[Case] = []
    for entry in entries:
        cases.extend(load_cases(p.parent / entry, jobs))
    return cases


def preprocess_case(case: Case, cfg: PreprocessConfig) -> Case:
    """Reorient and resample to isotropic spacing; intensities stay in HU."""
    volume = resample_isotropic(reorient(case.volume, cfg.axcodes), cfg.spacing_mm, "linear")
    organ = preprocess_mask(case.organ, axcodes=cfg.axcodes, spacing=cfg.spacing_mm)
    tumor = preprocess_mask(case.tumor, axcodes=cfg.axcodes, spacing=cfg.spacing_mm)
    return replace(case, volume=volume, organ=organ, tumor=tumor)


# --- Checkpoints ------------------------------------------------------------


def save_model(model: nn.Module, kind: str, path: str | Path, *, seed: int = 0, step: int = 0) -> Path:
    save_module(model, path, kind=kind, config=to_dict(model.config), seed=seed, step=step)
    return Path(path)


def checkpoint_dir(path: str | Path, kind: str) -> Path:
    """`path` itself, or the `kind` checkpoint inside a run directory."""
    p = Path(path)
    if (p / kind / MANIFEST).is_file():
        return p / kind
    return p


def load_autoencoder(path: str | Path) -> VQAutoencoder:
    path = checkpoint_dir(path, AE_KIND)
    cfg = from_dict(AutoencoderConfig, read_manifest(path).config, where=AE_KIND)
    model = build_autoencoder(cfg)
    load_into(model, path, kind=AE_KIND)
    return freeze(model)


def load_denoiser(path: str | Path) -> Denoiser3d:
    path = checkpoint_dir(path, DN_KIND)
    cfg = from_dict(DenoiserConfig, read_manifest(path).config, where=DN_KIND)
    model = build_denoiser(cfg)
    load_into(model, path, kind=DN_KIND)
    model.eval().requires_grad_(False)
    return model


def load_segmenter(path: str | Path) -> SegNet3d:
    path = checkpoint_dir(path, SEG_KIND)
    cfg = from_dict(SegConfig, read_manifest(path).config, where=SEG_KIND)
    model = build_segmenter(cfg)
    load_into(model, path, kind=SEG_KIND)
    return model.eval()


_LOADERS: dict[str, Callable[[Path], nn.Module]] = {
    AE_KIND: load_autoencoder,
    DN_KIND: load_denoiser,
    SEG_KIND: load_segmenter,
}


def _cached(kind: str, key: dict, seed: int, train: Callable[[], tuple[nn.Module, list[dict]]]) -> tuple[nn.Module, list[dict]]:
    path = cached_checkpoint(kind, key, seed)
    if path is not None and (path / MANIFEST).is_file():
        try:
            model = _LOADERS[kind](path)
        except CheckpointError as e:
            log.warning("[cache] kind=%s  path=%s unusable (%s), retraining", kind, path, e)
        else:
            log.info("[cache] hit kind=%s  path=%s", kind, path)
            return model, []
    model, history = train()
    if path is not None:
        save_model(model, kind, path, seed=seed, step=len(history))
        log.info("[cache] stored kind=%s  path=%s", kind, path)
    return model, history


def _case_key(cases: Sequence[Case]) -> list[str]:
    return [f"{c.organ_label}/{c.case_id}/{c.meta.get('seed', '')}" for c in cases]


# --- Stages -----------------------------------------------------------------


def autoencoder_patches(cases: Sequence[Case], patch_size: int, rng: np.random.Generator, per_case: int = 2) -> list[torch.Tensor]:
    """Random AE-windowed patches; half of them centered inside the organ."""
    out = []
    for case in cases:
        vol = window_normalize(case.volume, AE_WINDOW)
        for _ in range(per_case):
            center = random_crop_center(case.organ, vol.shape, rng, 0.5)
            patch = crop_patch(vol, center, (patch_size,) * 3, pad_value=AE_WINDOW.out_lo)
            out.append(torch.from_numpy(np.ascontiguousarray(patch.data, dtype=np.float32))[None, None])
    return out


def fit_autoencoder(cases: Sequence[Case], cfg: ExperimentConfig) -> tuple[VQAutoencoder, list[dict]]:
    if not cases:
        raise ExperimentError("no cases to train the autoencoder on")
    seed = cfg.ae_train.seed

    def train() -> tuple[nn.Module, list[dict]]:
        rng = np.random.default_rng(seed)
        patches = autoencoder_patches(cases, cfg.autoenc.patch_size, rng)
        model, history = train_autoencoder(patches, cfg.ae_train, cfg.autoenc)
        return freeze(model), history

    key = {"autoenc": to_dict(cfg.autoenc), "ae_train": to_dict(cfg.ae_train), "cases": _case_key(cases)}
    return _cached(AE_KIND, key, seed, train)  # type: ignore[return-value]


def fit_denoiser(ae: VQAutoencoder, cases: Sequence[Case], cfg: ExperimentConfig, *, ae_key: str = "") -> tuple[Denoiser3d, list[dict]]:
    annotated = [c for c in cases if not c.healthy]
    if not annotated:
        raise ExperimentError("no annotated tumors to train the denoiser on")
    seed = cfg.diff_train.seed

    def train() -> tuple[nn.Module, list[dict]]:
        pairs = encode_pairs(ae, annotated)
        model, history = train_diffusion(pairs, cfg.diff_train, cfg.latdiff)
        return model.eval().requires_grad_(False), history

    key = {
        "latdiff": to_dict(cfg.latdiff),
        "diff_train": to_dict(cfg.diff_train),
        "autoenc": ae_key,
        "cases": _case_key(annotated),
    }
    return _cached(DN_KIND, key, seed, train)  # type: ignore[return-value]


def fit_generator(corpus: Corpus, cfg: ExperimentConfig, *, timer: Timer = _no_timer) -> tuple[SynthModels, dict[str, list[dict]]]:
    """Autoencoder on every training case, denoiser on the annotated ones."""
    with timer("train-ae"):
        ae, ae_hist = fit_autoencoder(corpus.training, cfg)
    ae_key = "/".join(_case_key(corpus.training)) + f"#{cfg.ae_train.seed}"
    with timer("train-diff"):
        dn, dn_hist = fit_denoiser(ae, corpus.real, cfg, ae_key=ae_key)
    return SynthModels(ae, dn), {"ae": ae_hist, "diff": dn_hist}


def fit_segmenter(
    real: Sequence[Case],
    healthy: Sequence[Case],
    models: SynthModels | None,
    cfg: ExperimentConfig,
    synth_cfg: SynthesisConfig | None = None,
) -> tuple[SegNet3d, list[dict]]:
    """Real-only when `models` is None, otherwise healthy cases receive synthetic tumors on the fly."""
    hook = AugmentHook(models, synth_cfg or cfg.synthesis()) if models is not None else None
    model = build_segmenter(cfg.seg, seed=cfg.seg.seed)
    return train_segmenter(real, healthy if hook else (), hook, cfg.seg, model=model)


def downstream_dsc(model: SegNet3d, cases: Sequence[Case], cfg: ExperimentConfig) -> dict:
    """Aggregate test metrics plus the per-case rows."""
    if not cases:
        raise ExperimentError("no test cases")
    metrics = evaluate_cases(
        model, cases, cfg.seg, tau_mm=cfg.eval.tau_mm, min_overlap_fraction=cfg.eval.min_overlap_fraction
    )
    out = aggregate(metrics)
    out["per_case"] = [m.to_dict() for m in metrics]
    return out


def fit_pipeline(corpus: Corpus, cfg: ExperimentConfig, *, timer: Timer = _no_timer) -> dict:
    """Real-only vs real + synthetic segmentation on the same corpus and seeds."""
    models, histories = fit_generator(corpus, cfg, timer=timer)
    out: dict = {"histories": {k: len(v) for k, v in histories.items()}}
    for name, m in (("real_only", None), ("synthetic", models)):
        with timer(f"train-seg:{name}"):
            seg, _ = fit_segmenter(corpus.real, corpus.healthy, m, cfg)
        with timer(f"eval:{name}"):
            out[name] = downstream_dsc(seg, corpus.test, cfg)
        log.info("[pipeline] mode=%s  dsc=%.4f  nsd=%.4f", name, out[name]["dsc"], out[name]["nsd"])
    out["dsc_gain"] = out["synthetic"]["dsc"] - out["real_only"]["dsc"]
    return out


# --- Ablations --------------------------------------------------------------


def unique_values(values: Sequence[int], what: str) -> list[int]:
    """Order-preserving dedupe; duplicates are reported with a warning."""
    out: list[int] = []
    for v in values:
        if int(v) in out:
            log.warning("[ablate] duplicate %s=%d ignored", what, int(v))
            continue
        out.append(int(v))
    if not out:
        raise ExperimentError(f"no {what} values")
    return out


def _trial_case(corpus: Corpus) -> Case:
    pool = corpus.healthy or corpus.test or corpus.real
    if not pool:
        raise ExperimentError("empty corpus")
    return pool[0]


def trial_synthesis(models: SynthModels, case: Case, synth_cfg: SynthesisConfig, seed: int) -> dict:
    """Synthesize one tumor into `case`: denoiser calls and intensity contrast against the organ."""
    rng = np.random.default_rng(seed)
    policy = replace(synth_cfg.policy, tumor_probability=1.0) if synth_cfg.policy else None
    if policy is None:
        raise ExperimentError("synthesis config without a mask policy")
    mask, spec = generate_tumor_mask(case.organ, policy, rng)
    if spec is None:
        raise MaskGenError("no tumor drawn")
    before = models.dn.calls
    out = inpaint_tumor(case.volume, mask, models, synth_cfg, rng)
    calls = models.dn.calls - before
    inside = mask.as_bool()
    ring = case.organ.as_bool() & ~inside
    tumor_mean = float(np.mean(out.data[inside]))
    organ_mean = float(np.mean(case.volume.data[ring])) if ring.any() else float("nan")
    return {
        "denoiser_calls": int(calls),
        "tumor_voxels": int(inside.sum()),
        "tumor_class": spec.size_class,
        "tumor_mean": tumor_mean,
        "organ_mean": organ_mean,
        "contrast": tumor_mean - organ_mean,
    }


def ablate_timesteps(
    corpus: Corpus,
    cfg: ExperimentConfig,
    step_counts: Sequence[int],
    *,
    models: SynthModels | None = None,
    evaluate: bool = True,
    timer: Timer = _no_timer,
) -> dict:
    """Sampling-step count vs denoiser calls per tumor (and downstream DSC when `evaluate`)."""
    counts = unique_values(step_counts, "sampling_steps")
    if min(counts) < 1:
        raise ExperimentError(f"sampling steps must be >= 1: {counts}")
    if models is None:
        models, _ = fit_generator(corpus, cfg, timer=timer)
    T = models.dn.config.timesteps
    if max(counts) > T:
        raise ExperimentError(f"sampling steps {max(counts)} > T={T}")
    trial = _trial_case(corpus)
    rows = []
    for n in counts:
        synth_cfg = replace(cfg.synthesis(), steps=None, sampling_steps=n)
        row: dict = {"sampling_steps": n, "steps": list(synth_cfg.resolve_steps(T))}
        with timer(f"trial:{n}"):
            p = trial_synthesis(models, trial, synth_cfg, stage_seed(cfg.global_seed, "trial"))
        row["denoiser_calls_per_tumor"] = p["denoiser_calls"]
        row["trial_contrast"] = p["contrast"]
        if evaluate:
            with timer(f"train-seg:{n}"):
                seg, _ = fit_segmenter(corpus.real, corpus.healthy, models, cfg, synth_cfg)
            with timer(f"eval:{n}"):
                ev = downstream_dsc(seg, corpus.test, cfg)
            row.update(dsc=ev["dsc"], nsd=ev["nsd"], sensitivity=ev["sensitivity"])
        log.info("[ablate] sampling_steps=%d  calls=%d%s", n, row["denoiser_calls_per_tumor"], f"  dsc={row['dsc']:.4f}" if evaluate else "")
        rows.append(row)
    return {"T": T, "rows": rows}


def ablate_annotations(
    corpus: Corpus,
    cfg: ExperimentConfig,
    n_values: Sequence[int],
    *,
    ae: VQAutoencoder | None = None,
    noise_sigma: float | None = None,
    timer: Timer = _no_timer,
) -> dict:
    """Downstream DSC vs number of annotated tumors the denoiser is trained on (autoencoder frozen)."""
    ns = unique_values(n_values, "n")
    if min(ns) < 1:
        raise ExperimentError(f"n must be >= 1: {ns}")
    if max(ns) > len(corpus.real):
        raise ExperimentError(f"insufficient corpus: n={max(ns)} > {len(corpus.real)} annotated cases")
    if ae is None:
        with timer("train-ae"):
            ae, _ = fit_autoencoder(corpus.training, cfg)
    sigma = noise_sigma if noise_sigma is not None else phantom_spec_for(cfg.corpus.organ).background_noise_sigma
    ae_key = "/".join(_case_key(corpus.training)) + f"#{cfg.ae_train.seed}"
    trial = _trial_case(corpus)
    rows = []
    for n in ns:
        annotated = corpus.real[:n]
        with timer(f"train-diff:{n}"):
            dn, _ = fit_denoiser(ae, annotated, cfg, ae_key=ae_key)
        models = SynthModels(ae, dn)
        p = trial_synthesis(models, trial, cfg.synthesis(), stage_seed(cfg.global_seed, "trial"))
        with timer(f"train-seg:{n}"):
            seg, _ = fit_segmenter(annotated, corpus.healthy, models, cfg)
        with timer(f"eval:{n}"):
            ev = downstream_dsc(seg, corpus.test, cfg)
        row = {
            "n_annotated": n,
            "dsc": ev["dsc"],
            "nsd": ev["nsd"],
            "sensitivity": ev["sensitivity"],
            "synthetic_contrast_hu": p["contrast"],
            "synthetic_contrast_sigma": abs(p["contrast"]) / sigma if sigma > 0 else float("inf"),
        }
        log.info("[ablate] n=%d  dsc=%.4f  contrast_sigma=%.2f", n, row["dsc"], row["synthetic_contrast_sigma"])
        rows.append(row)
    return {"noise_sigma": sigma, "rows": rows}


def cross_organ_study(cfg: ExperimentConfig, source: str, target: str, *, timer: Timer = _no_timer) -> dict:
    """Generator trained on `source` tumors, synthetic tumors placed in `target` healthy organs.

    Both arms are evaluated on the target organ's real tumors; `real_only` trains on the
    target's annotated cases instead of synthetic ones.
    """
    src = build_corpus(replace(cfg.corpus, organ=source), stage_seed(cfg.global_seed, f"corpus:{source}"))
    tgt = build_corpus(replace(cfg.corpus, organ=target), stage_seed(cfg.global_seed, f"corpus:{target}"))
    models, _ = fit_generator(src, cfg, timer=timer)
    with timer("train-seg:synthetic"):
        seg_syn, _ = fit_segmenter((), tgt.healthy, models, cfg)
    with timer("train-seg:real_only"):
        seg_real, _ = fit_segmenter(tgt.real, (), None, cfg)
    with timer("eval"):
        syn = downstream_dsc(seg_syn, tgt.test, cfg)
        real = downstream_dsc(seg_real, tgt.test, cfg)
    log.info("[cross] %s->%s  synthetic_dsc=%.4f  real_only_dsc=%.4f", source, target, syn["dsc"], real["dsc"])
    return {"source": source, "target": target, "synthetic": syn, "real_only": real}


# --- Origin study -----------------------------------------------------------


def lesion_rows(cases: Sequence[Case]) -> list[FeatureRow]:
    rows = []
    for c in cases:
        if c.healthy:
            continue
        rows.append(FeatureRow(c.case_id, c.organ_label, extract_features(c.volume, c.tumor)))
    return rows


def origin_corpus(cfg: ExperimentConfig, organs: Sequence[str], per_organ: int, *, organ_dependent: bool) -> list[Case]:
    """Early-lesion phantoms; lesion HU is organ-specific only when `organ_dependent`."""
    cases = []
    for organ in organs:
        base = phantom_spec_for(organ).organ_mean
        hu = ORGAN_LESION_HU.get(organ, SHARED_LESION_HU) if organ_dependent else SHARED_LESION_HU
        ccfg = replace(cfg.corpus, organ=organ)
        for i in range(per_organ):
            case = phantom_case(organ, "origin", i, ccfg, cfg.global_seed, lesion_contrast=hu - base)
            cases.append(replace(case, case_id=f"{organ}-{i:03d}"))
    return cases


def _null_band(features: np.ndarray, labels: np.ndarray, kind: str, seeds: Sequence[int], test_fraction: float, base_seed: int) -> dict:
    """Macro precision with shuffled labels: the chance band is mean +- 2 std."""
    prec = []
    for s in seeds:
        perm = np.random.default_rng(stage_seed(base_seed, f"perm:{s}")).permutation(labels)
        prec.append(repeat_origin_study(features, perm, kind, [s], test_fraction=test_fraction)["macro_precision_mean"])
    mu, sd = float(np.mean(prec)), float(np.std(prec))
    return {"mean": mu, "std": sd, "low": mu - 2.0 * sd, "high": mu + 2.0 * sd}


def origin_study(rows: Sequence[FeatureRow], cfg: ExperimentConfig) -> dict:
    """Held-out classification of lesion origin, per classifier kind, against a permutation null."""
    if len(rows) < 4:
        raise ExperimentError(f"need >= 4 feature rows, got {len(rows)}")
    x = np.stack([r.features.as_array() for r in rows])
    y = np.asarray([r.organ_label for r in rows])
    fcfg = cfg.featlab
    seeds = [stage_seed(cfg.global_seed, f"origin:{i}") for i in range(fcfg.repeats)]
    out: dict = {"organs": sorted(set(y.tolist())), "n": int(len(y)), "kinds": {}}
    for kind in fcfg.kinds:
        res = repeat_origin_study(x, y, kind, seeds, test_fraction=fcfg.test_fraction)
        band = _null_band(x, y, kind, seeds, fcfg.test_fraction, cfg.global_seed)
        res["chance_band"] = band
        res["within_chance"] = band["low"] <= res["macro_precision_mean"] <= band["high"]
        log.info(
            "[origin] kind=%s  macro_p=%.3f  chance=[%.3f, %.3f]",
            kind,
            res["macro_precision_mean"],
            band["low"],
            band["high"],
        )
        out["kinds"][kind] = res
    emb = embed_2d(x)
    out["embedding"] = [
        {"case": r.case_id, "organ_label": r.organ_label, "x": float(e[0]), "y": float(e[1])} for r, e in zip(rows, emb)
    ]
    return out


__all__ = [
    "AE_KIND",
    "CORPUS_SPLITS",
    "Corpus",
    "DN_KIND",
    "ExperimentError",
    "SEG_KIND",
    "ablate_annotations",
    "ablate_timesteps",
    "autoencoder_patches",
    "build_corpus",
    "checkpoint_dir",
    "cross_organ_study",
    "downstream_dsc",
    "fit_autoencoder",
    "fit_denoiser",
    "fit_generator",
    "fit_pipeline",
    "fit_segmenter",
    "lesion_rows",
    "load_autoencoder",
    "load_corpus",
    "load_denoiser",
    "load_manifest_cases",
    "load_segmenter",
    "origin_corpus",
    "origin_study",
    "phantom_case",
    "preprocess_case",
    "trial_synthesis",
    "save_corpus",
    "save_model",
    "unique_values",
]
