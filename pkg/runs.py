"""Experiment configuration, seeds and run directories.

ExperimentConfig groups one section per stage. Resolution order:

  preset ("desk" | "paper")  <  --config file  <  flags (--seed, --set section.key=value)

Per-stage seeds come from the global seed:

  stage_seed(global_seed, stage) = int.from_bytes(sha256(f"{global_seed}:{stage}")[:4], "big")

Run directory (`--out`):
  config.json     fully resolved config
  manifest.json   RunManifest, written last
  ...             command artifacts

JSON is written with sorted keys through a temp file + os.replace. Timings and
timestamps only go to manifest.json, so every other JSON file is reproducible.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
import time
from collections.abc import Collection, Iterator
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from autoenc import AE_PRESETS, AETrainConfig, AutoencoderConfig
from ckpt import config_digest
from config import ConfigError, from_dict, load_json, merge, nested, parse_assignment, to_dict
from featlab import FeatureConfig
from latdiff import DENOISER_PRESETS, DenoiserConfig, DiffusionTrainConfig
from maskgen import MaskPolicy
from seg import SEG_PRESETS, SegConfig
from seg_metrics import DEFAULT_MIN_OVERLAP, DEFAULT_TAU_MM
from synth import SynthesisConfig
from volcore import DEFAULT_AXCODES, ORGAN_PRESETS

__version__ = "0.1.0"

CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"


def utc_now_iso() -> str:
    """UTC now in ISO format without microseconds, suffixed with 'Z'."""
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat().replace("+00:00", "Z")


def stage_seed(global_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{int(global_seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


# config section -> stage name fed to stage_seed
STAGE_SECTIONS = {"ae_train": "ae", "diff_train": "diff", "seg": "seg"}


# --- Config sections --------------------------------------------------------


@dataclass(frozen=True)
class PreprocessConfig:
    axcodes: tuple[str, str, str] = DEFAULT_AXCODES
    spacing_mm: float = 1.0
    jobs: int = 1

    def __post_init__(self) -> None:
        if not self.spacing_mm > 0:
            raise ConfigError("volcore.spacing_mm must be > 0")
        if self.jobs < 1:
            raise ConfigError("volcore.jobs must be >= 1")


@dataclass(frozen=True)
class CorpusConfig:
    """Phantom corpus used by the experiment harnesses."""

    organ: str = "liver"
    grid_size: int = 64
    spacing_mm: float = 1.0
    n_real: int = 40
    n_healthy: int = 120
    n_test: int = 40
    lesion_contrast: float = -50.0

    def __post_init__(self) -> None:
        if self.organ not in ORGAN_PRESETS:
            raise ConfigError(f"corpus.organ: unknown organ {self.organ!r} (known: {sorted(ORGAN_PRESETS)})")
        if self.grid_size < 16:
            raise ConfigError("corpus.grid_size must be >= 16")
        if min(self.n_real, self.n_healthy, self.n_test) < 0:
            raise ConfigError("corpus sizes must be >= 0")


@dataclass(frozen=True)
class EvalConfig:
    tau_mm: float = DEFAULT_TAU_MM
    min_overlap_fraction: float = DEFAULT_MIN_OVERLAP

    def __post_init__(self) -> None:
        if self.tau_mm < 0:
            raise ConfigError("eval.tau_mm must be >= 0")
        if not 0.0 <= self.min_overlap_fraction <= 1.0:
            raise ConfigError("eval.min_overlap_fraction must be in [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    volcore: PreprocessConfig = field(default_factory=PreprocessConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    autoenc: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    ae_train: AETrainConfig = field(default_factory=AETrainConfig)
    latdiff: DenoiserConfig = field(default_factory=DenoiserConfig)
    diff_train: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    maskgen: MaskPolicy = field(default_factory=MaskPolicy)
    synth: SynthesisConfig = field(default_factory=SynthesisConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    featlab: FeatureConfig = field(default_factory=FeatureConfig)
    global_seed: int = 0
    output_dir: str = ""
    run_id: str = ""

    def __post_init__(self) -> None:
        if self.latdiff.latent_channels != self.autoenc.latent_channels:
            raise ConfigError(
                f"latdiff.latent_channels ({self.latdiff.latent_channels}) != autoenc.latent_channels ({self.autoenc.latent_channels})"
            )

    def synthesis(self) -> SynthesisConfig:
        """synth section with the maskgen policy filled in."""
        return replace(self.synth, policy=self.synth.policy or self.maskgen)

    def with_stage_seeds(self, keep: Collection[str] = ()) -> ExperimentConfig:
        """Derive the seed of every stage section not named in `keep` from the global seed."""
        g = self.global_seed
        seeded = {
            section: replace(getattr(self, section), seed=stage_seed(g, stage))
            for section, stage in STAGE_SECTIONS.items()
            if section not in keep
        }
        return replace(self, **seeded)

    def digest(self) -> str:
        return config_digest(to_dict(replace(self, output_dir="", run_id="")))


PRESETS: dict[str, ExperimentConfig] = {
    "desk": ExperimentConfig(),
    "paper": ExperimentConfig(
        autoenc=AE_PRESETS["paper"],
        ae_train=AETrainConfig(steps=20_000, batch_size=4, gan_warmup_steps=2_000, log_every=200),
        latdiff=DENOISER_PRESETS["paper"],
        diff_train=DiffusionTrainConfig(steps=50_000, batch_size=10, log_every=500),
        seg=SEG_PRESETS["paper"],
    ),
}
DEFAULT_PRESET = "desk"


def resolve_config(
    *,
    preset: str | None = None,
    config_path: str | Path | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
    output_dir: str | Path | None = None,
) -> ExperimentConfig:
    """preset < config file < --set overrides < --seed.

    Stage seeds are derived last, except those the config file or an override sets.
    """
    name = preset or DEFAULT_PRESET
    if name not in PRESETS:
        raise ConfigError(f"unknown preset: {name!r} (known: {sorted(PRESETS)})")
    obj = to_dict(PRESETS[name])
    explicit: set[str] = set()
    if config_path is not None:
        doc = load_json(config_path)
        explicit |= _seeded_sections(doc)
        obj = merge(obj, doc)
    for text in overrides or []:
        parts, value = parse_assignment(text)
        patch = nested(parts, value)
        explicit |= _seeded_sections(patch)
        obj = merge(obj, patch)
    if seed is not None:
        obj["global_seed"] = int(seed)
    if output_dir is not None:
        obj["output_dir"] = str(output_dir)
    cfg = from_dict(ExperimentConfig, obj, where="config")
    return cfg.with_stage_seeds(keep=explicit)


def _seeded_sections(obj: object) -> set[str]:
    if not isinstance(obj, dict):
        return set()
    return {s for s in STAGE_SECTIONS if isinstance(obj.get(s), dict) and "seed" in obj[s]}


# --- Run directories --------------------------------------------------------


def dump_json(obj: object) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path: str | Path, obj: object) -> Path:
    """Atomic JSON write (temp file in the same directory + os.replace)."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_text(dump_json(obj), encoding="utf-8")
    os.replace(tmp, p)
    return p


@dataclass
class RunManifest:
    run_id: str
    command: str
    config_hash: str
    artifacts: dict[str, str] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    code_version: str = __version__
    created_utc: str | None = None
    status: str = "ok"

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "command": self.command,
            "config_hash": self.config_hash,
            "artifacts": dict(sorted(self.artifacts.items())),
            "metrics": self.metrics,
            "timings": {k: round(v, 6) for k, v in sorted(self.timings.items())},
            "code_version": self.code_version,
            "created_utc": self.created_utc,
            "status": self.status,
        }


class RunDir:
    """One command's output directory. Artifact names are paths relative to the root."""

    def __init__(self, root: str | Path, command: str, config: ExperimentConfig):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config = config
        digest = config.digest()
        self.manifest = RunManifest(
            run_id=config.run_id or f"{command}-{digest[:12]}",
            command=command,
            config_hash=digest,
        )
        write_json(self.root / CONFIG_FILE, to_dict(config))
        self.manifest.artifacts["config"] = CONFIG_FILE

    def path(self, name: str | Path) -> Path:
        p = (self.root / name).resolve()
        if self.root.resolve() not in (p, *p.parents):
            raise ConfigError(f"artifact path escapes the run directory: {name}")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def artifact(self, key: str, name: str | Path) -> Path:
        p = self.path(name)
        self.manifest.artifacts[key] = p.relative_to(self.root.resolve()).as_posix()
        return p

    def write_json(self, key: str, name: str, obj: object) -> Path:
        return write_json(self.artifact(key, name), obj)

    @contextlib.contextmanager
    def timer(self, stage: str) -> Iterator[None]:
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.manifest.timings[stage] = self.manifest.timings.get(stage, 0.0) + time.perf_counter() - t0

    def finish(self, metrics: dict | None = None, status: str = "ok") -> Path:
        if metrics is not None:
            self.manifest.metrics = metrics
        self.manifest.status = status
        self.manifest.created_utc = utc_now_iso()
        return write_json(self.root / MANIFEST_FILE, self.manifest.to_json())


__all__ = [
    "CONFIG_FILE",
    "CorpusConfig",
    "DEFAULT_PRESET",
    "EvalConfig",
    "ExperimentConfig",
    "MANIFEST_FILE",
    "PRESETS",
    "PreprocessConfig",
    "RunDir",
    "RunManifest",
    "dump_json",
    "resolve_config",
    "stage_seed",
    "utc_now_iso",
    "write_json",
]
