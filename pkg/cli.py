#!/usr/bin/env python3
"""CLI for latent-lesion-lab.

Usage examples:
  - Phantom corpus (real / healthy / test splits):
      python3 latent_lesion_lab.py phantom-gen --out runs/corpus --seed 0

  - A handful of healthy phantoms of another organ, or one phantom from a PhantomSpec JSON:
      python3 latent_lesion_lab.py phantom-gen --out runs/kidney --organ kidney --count 5 --lesions off
      python3 latent_lesion_lab.py phantom-gen --out runs/one --spec phantom.json

  - Train the stages one after the other:
      python3 latent_lesion_lab.py train-ae   --out runs/ae   --data runs/corpus/corpus
      python3 latent_lesion_lab.py train-diff --out runs/diff --data runs/corpus/corpus --ae runs/ae
      python3 latent_lesion_lab.py train-seg  --out runs/seg  --real runs/corpus/corpus/real \
          --healthy runs/corpus/corpus/healthy --synth on --ae runs/ae --diff runs/diff
      python3 latent_lesion_lab.py eval       --out runs/eval --data runs/corpus/corpus --seg runs/seg

  - One mask, one synthetic volume:
      python3 latent_lesion_lab.py maskgen --organ organ.nii.gz --policy early --seed 3 --out runs/m/mask.nii.gz
      python3 latent_lesion_lab.py synth --volume volume.nii.gz --organ organ.nii.gz \
          --ae runs/ae --diff runs/diff --seed 3 --out runs/syn

  - Ablations on a fresh phantom corpus:
      python3 latent_lesion_lab.py ablate-timesteps --out runs/abl-t --steps 1,4 --report timesteps.json
      python3 latent_lesion_lab.py ablate-annotations --out runs/abl-n --n 1,5,10

  - Lesion features and the origin study:
      python3 latent_lesion_lab.py features --cases cases.json --out runs/feat/features.csv
      python3 latent_lesion_lab.py origin-study --out runs/origin --features runs/feat/features.csv \
          --report report.json --plot embedding.csv

Checkpoint flags (--ae, --diff, --seg) take a checkpoint directory or the run directory
of the command that trained it.

Every command writes config.json and manifest.json into --out (into its directory when
--out names a file). Config resolution:
preset < --config file < flags (--seed, --jobs, --set section.key=value).

Exit codes: 0 ok, 2 usage error, 3 config error, 1 any other failure
(a JSON line {"error", "message", "command"} goes to stderr).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable
from dataclasses import replace
from pathlib import Path

import numpy as np

from autoenc import codebook_usage, train_autoencoder
from ckpt import crc32_hex
from config import ConfigError, from_dict, load_json, to_dict
from experiments import (
    AE_KIND,
    DN_KIND,
    SEG_KIND,
    Corpus,
    ablate_annotations,
    ablate_timesteps,
    autoencoder_patches,
    build_corpus,
    cross_organ_study,
    downstream_dsc,
    fit_segmenter,
    lesion_rows,
    load_autoencoder,
    load_corpus,
    load_denoiser,
    load_manifest_cases,
    load_segmenter,
    origin_corpus,
    origin_study,
    phantom_case,
    preprocess_case,
    save_corpus,
    save_model,
)
from featlab import read_features_csv, write_embedding_csv, write_features_csv
from latdiff import encode_pairs, train_diffusion
from maskgen import MASK_POLICIES, MaskPolicy, generate_tumor_mask
from runs import PRESETS, ExperimentConfig, RunDir, resolve_config, stage_seed
from synth import SynthesisConfig, SynthModels, synthesize, synthesize_tumors
from volcore import (
    LESION_FILE,
    META_FILE,
    ORGAN_FILE,
    ORGAN_PRESETS,
    VOLUME_FILE,
    Case,
    PhantomSpec,
    case_dirs,
    load_case,
    load_cases,
    load_mask,
    load_volume,
    make_phantom,
    save_case,
    save_mask,
    save_volume,
)

log = logging.getLogger("lll")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


def _parse_int_csv(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"atteso un elenco CSV di interi, ricevuto {text!r}") from e


def _parse_str_csv(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


# --- Argparser --------------------------------------------------------------


def _common(ap: argparse.ArgumentParser) -> None:
    ap.add_argument(
        "--out",
        required=True,
        help="Directory di output del run (config.json, manifest.json, artefatti); maskgen e features accettano anche un file.",
    )
    ap.add_argument("--config", default=None, help="File JSON di configurazione (sovrascrive il preset).")
    ap.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        default=None,
        help="Preset: desk (default, piccolo, CPU) oppure paper. --config e i flag vincono sempre.",
    )
    ap.add_argument("--seed", type=int, default=None, help="Seed globale; i seed di stadio ne derivano.")
    ap.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override puntuale (ripetibile), valore JSON o stringa: --set seg.epochs=2",
    )
    ap.add_argument("--jobs", type=int, default=None, help="Casi caricati in parallelo (volcore.jobs).")
    verbosity = ap.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="Log di debug.")
    verbosity.add_argument("--quiet", action="store_true", help="Solo warning ed errori.")


def _data_arg(ap: argparse.ArgumentParser, required: bool = False) -> None:
    ap.add_argument(
        "--data",
        required=required,
        default=None,
        help="Corpus (sottodirectory real/healthy/test) oppure directory di casi. Se assente: corpus phantom.",
    )


def build_argparser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lll", description="latent-lesion-lab: tumori sintetici in CT via diffusione latente."
    )
    sub = ap.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("phantom-gen", help="Genera volumi phantom (corpus o singoli casi).")
    _common(sp)
    what = sp.add_mutually_exclusive_group()
    what.add_argument("--count", type=int, default=None, help="Numero di casi; senza --count né --spec: corpus completo.")
    what.add_argument("--spec", default=None, help="PhantomSpec JSON: un solo caso scritto direttamente in --out.")
    sp.add_argument("--organ", choices=sorted(ORGAN_PRESETS), default=None, help="Organo (default corpus.organ).")
    sp.add_argument("--lesions", choices=["on", "off"], default="on", help="Con --count: lesione presente o no.")

    sp = sub.add_parser("preprocess", help="Riorienta e ricampiona casi a spaziatura isotropa.")
    _common(sp)
    sp.add_argument("--input", required=True, help="Directory di un caso o radice di più casi.")

    sp = sub.add_parser("train-ae", help="Allena l'autoencoder VQ.")
    _common(sp)
    _data_arg(sp)

    sp = sub.add_parser("train-diff", help="Allena il denoiser latente (autoencoder congelato).")
    _common(sp)
    _data_arg(sp)
    sp.add_argument("--ae", required=True, help="Checkpoint dell'autoencoder.")

    sp = sub.add_parser("maskgen", help="Genera maschere tumorali dentro una maschera d'organo.")
    _common(sp)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--case", help="Directory di un caso (usa organ.nii.gz).")
    src.add_argument("--organ", help="Maschera d'organo NIfTI.")
    sp.add_argument("--count", type=int, default=1, help="Numero di maschere (1 se --out è un file .nii.gz).")
    sp.add_argument(
        "--policy",
        default=None,
        help=f"Policy: preset ({', '.join(sorted(MASK_POLICIES))}) oppure file JSON; sovrascrive la sezione maskgen.",
    )

    sp = sub.add_parser("synth", help="Sintetizza tumori su casi sani.")
    _common(sp)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="Directory di un caso o radice di più casi.")
    src.add_argument("--volume", help="Volume NIfTI sano (con --organ): scrive synthetic.nii.gz, tumor.nii.gz, spec.json.")
    sp.add_argument("--organ", default=None, help="Maschera d'organo NIfTI del volume passato con --volume.")
    sp.add_argument("--ae", required=True, help="Checkpoint dell'autoencoder (o run di train-ae).")
    sp.add_argument("--diff", required=True, help="Checkpoint del denoiser (o run di train-diff).")
    sp.add_argument("--count", type=int, default=1, help="Volumi sintetici per caso (solo con --input).")
    sp.add_argument("--steps", type=_parse_int_csv, default=None, help="Sottoinsieme esplicito di timestep, CSV.")

    sp = sub.add_parser("train-seg", help="Allena la segmentazione (reali + sintetici se --ae/--diff).")
    _common(sp)
    _data_arg(sp)
    sp.add_argument("--real", default=None, help="Directory di casi annotati (alternativa a --data).")
    sp.add_argument("--healthy", default=None, help="Directory di casi sani per la sintesi (con --real).")
    sp.add_argument(
        "--synth",
        choices=["off", "on"],
        default=None,
        help="Tumori sintetici nel training; default: on se ci sono --ae e --diff.",
    )
    sp.add_argument("--ae", default=None, help="Checkpoint dell'autoencoder (abilita la sintesi).")
    sp.add_argument("--diff", default=None, help="Checkpoint del denoiser (abilita la sintesi).")

    sp = sub.add_parser("eval", help="Valuta un segmentatore (DSC, NSD, sensibilità per tumore).")
    _common(sp)
    _data_arg(sp, required=True)
    sp.add_argument("--seg", required=True, help="Checkpoint del segmentatore.")

    sp = sub.add_parser("ablate-timesteps", help="Numero di passi di campionamento vs chiamate al denoiser e DSC.")
    _common(sp)
    _data_arg(sp)
    sp.add_argument("--steps", type=_parse_int_csv, required=True, help="Numeri di passi, CSV (es. 1,4).")
    sp.add_argument("--ae", default=None, help="Checkpoint dell'autoencoder (altrimenti allenato).")
    sp.add_argument("--diff", default=None, help="Checkpoint del denoiser (altrimenti allenato).")
    sp.add_argument("--calls-only", action="store_true", help="Solo conteggio chiamate, niente segmentazione.")
    sp.add_argument("--report", default="ablate_timesteps.json", help="Report JSON, relativo a --out.")

    sp = sub.add_parser("ablate-annotations", help="Tumori annotati per il denoiser vs DSC a valle.")
    _common(sp)
    _data_arg(sp)
    sp.add_argument("--n", type=_parse_int_csv, required=True, help="Valori di n, CSV (es. 1,5,10).")
    sp.add_argument("--ae", default=None, help="Checkpoint dell'autoencoder (altrimenti allenato).")

    sp = sub.add_parser("features", help="Estrae feature radiomiche delle lesioni in CSV.")
    _common(sp)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", default=None, help="Corpus (real/healthy/test) oppure directory di casi.")
    src.add_argument("--cases", default=None, help="Manifest JSON: elenco di directory di casi (relative al manifest).")

    sp = sub.add_parser("origin-study", help="Classificazione dell'organo di origine delle lesioni.")
    _common(sp)
    sp.add_argument("--features", default=None, help="CSV di feature; senza: phantom generati.")
    sp.add_argument("--organs", type=_parse_str_csv, default=["liver", "pancreas", "kidney"], help="Organi, CSV.")
    sp.add_argument("--per-organ", type=int, default=20, help="Lesioni phantom per organo.")
    sp.add_argument(
        "--mode",
        choices=["independent", "dependent"],
        default="independent",
        help="Lesioni indipendenti dall'organo o con contrasto dipendente dall'organo.",
    )
    sp.add_argument("--report", default="origin_study.json", help="Report JSON, relativo a --out.")
    sp.add_argument("--plot", default="embedding.csv", help="Embedding 2D in CSV (case, organ_label, x, y), relativo a --out.")

    sp = sub.add_parser("cross-organ", help="Denoiser allenato su un organo, tumori sintetici in un altro.")
    _common(sp)
    sp.add_argument("--source", choices=sorted(ORGAN_PRESETS), required=True, help="Organo dei tumori annotati.")
    sp.add_argument("--target", choices=sorted(ORGAN_PRESETS), required=True, help="Organo di destinazione.")

    return ap


# --- Helpers ----------------------------------------------------------------


# commands whose --out may name the output file itself
FILE_OUTPUTS: dict[str, tuple[str, ...]] = {"maskgen": (".nii.gz", ".nii"), "features": (".csv",)}


def split_out(cmd: str, out: str | Path) -> tuple[Path, str | None]:
    """(run directory, output file name) for --out; the file name is None when --out is a directory."""
    p = Path(out)
    if p.name.endswith(FILE_OUTPUTS.get(cmd, ())):
        return p.parent, p.name
    return p, None


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(format="%(message)s")
    logging.getLogger().setLevel(level)


def _resolve(args: argparse.Namespace) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.jobs is not None:
        overrides.append(f"volcore.jobs={int(args.jobs)}")
    return resolve_config(
        preset=args.preset, config_path=args.config, overrides=overrides, seed=args.seed, output_dir=args.run_root
    )


def _corpus(args: argparse.Namespace, cfg: ExperimentConfig) -> Corpus:
    """--data as a corpus root or as a flat case directory; phantom corpus when absent."""
    if args.data is None:
        return build_corpus(cfg.corpus, stage_seed(cfg.global_seed, "corpus"))
    root = Path(args.data)
    if any((root / name).is_dir() for name in ("real", "healthy", "test")):
        return load_corpus(root, cfg.volcore.jobs)
    cases = load_cases(root, cfg.volcore.jobs)
    real = tuple(c for c in cases if not c.healthy)
    healthy = tuple(c for c in cases if c.healthy)
    return Corpus(real, healthy, ())


def _synth_models(args: argparse.Namespace) -> SynthModels | None:
    ae_path, dn_path = getattr(args, "ae", None), getattr(args, "diff", None)
    if ae_path is None and dn_path is None:
        return None
    if ae_path is None or dn_path is None:
        raise ConfigError("--ae and --diff must be given together")
    return SynthModels(load_autoencoder(ae_path), load_denoiser(dn_path))


def _volume_digest(case: Case) -> dict:
    return {
        "case": case.case_id,
        "volume_crc32": crc32_hex(np.ascontiguousarray(case.volume.data).tobytes()),
        "organ_voxels": case.organ.count(),
        "tumor_voxels": case.tumor.count(),
    }


def _final(history: list[dict]) -> dict:
    return dict(history[-1]) if history else {}


# --- Commands ---------------------------------------------------------------


def _phantom_from_spec(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    """One phantom case written straight into the run directory; meta.json echoes spec and seed."""
    name = Path(args.spec).name
    obj = load_json(args.spec)
    obj.setdefault("seed", stage_seed(cfg.global_seed, "phantom"))
    spec = from_dict(PhantomSpec, obj, where=name)
    volume, organ, lesion = make_phantom(spec)
    case = Case(Path(args.spec).stem, volume, organ, lesion, spec.organ_label, {"spec": to_dict(spec), "seed": spec.seed})
    with run.timer("write"):
        save_case(case, run.root)
    for key, file in (("volume", VOLUME_FILE), ("organ", ORGAN_FILE), ("lesion", LESION_FILE), ("meta", META_FILE)):
        run.artifact(key, file)
    print(f"[phantom] spec={name}  seed={spec.seed}  organ={spec.organ_label}  lesion_voxels={lesion.count()}")
    print(f"[io] wrote {run.root}")
    return {"cases": 1, "organ_voxels": organ.count(), "lesion_voxels": lesion.count()}


def _cmd_phantom_gen(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    if args.spec is not None:
        return _phantom_from_spec(args, cfg, run)
    seed = stage_seed(cfg.global_seed, "corpus")
    if args.count is None:
        corpus = build_corpus(cfg.corpus, seed, organ=args.organ)
        with run.timer("write"):
            root = save_corpus(corpus, run.artifact("corpus", "corpus"))
        rows = {name: [_volume_digest(c) for c in corpus.split(name)] for name in ("real", "healthy", "test")}
        print(f"[phantom] real={len(corpus.real)}  healthy={len(corpus.healthy)}  test={len(corpus.test)}")
    else:
        if args.count < 1:
            raise ConfigError("--count must be >= 1")
        organ = args.organ or cfg.corpus.organ
        cases = [
            phantom_case(organ, "phantom", i, cfg.corpus, seed, with_lesion=args.lesions == "on") for i in range(args.count)
        ]
        root = run.artifact("cases", "cases")
        with run.timer("write"):
            for c in cases:
                save_case(c, root / f"{organ}-{c.case_id}")
        rows = {"phantom": [_volume_digest(c) for c in cases]}
        print(f"[phantom] organ={organ}  count={len(cases)}  lesions={args.lesions}")
    run.write_json("phantoms", "phantoms.json", rows)
    print(f"[io] wrote {root}")
    return {"cases": sum(len(v) for v in rows.values())}


def _cmd_preprocess(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    root = run.artifact("cases", "cases")
    rows = []
    with run.timer("preprocess"):
        for d in case_dirs(args.input):
            case = preprocess_case(load_case(d), cfg.volcore)
            save_case(case, root / case.case_id)
            rows.append({"case": case.case_id, "shape": list(case.volume.shape), "spacing": list(case.volume.spacing)})
    run.write_json("preprocess", "preprocess.json", rows)
    print(f"[preprocess] cases={len(rows)}  spacing_mm={cfg.volcore.spacing_mm}  axcodes={''.join(cfg.volcore.axcodes)}")
    print(f"[io] wrote {root}")
    return {"cases": len(rows)}


def _cmd_train_ae(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    corpus = _corpus(args, cfg)
    rng = np.random.default_rng(cfg.ae_train.seed)
    patches = autoencoder_patches(corpus.training, cfg.autoenc.patch_size, rng)
    with run.timer("train-ae"):
        model, history = train_autoencoder(patches, cfg.ae_train, cfg.autoenc)
    path = save_model(model, AE_KIND, run.artifact("autoencoder", "autoencoder"), seed=cfg.ae_train.seed, step=len(history))
    usage = codebook_usage(model, patches)
    run.write_json("history", "ae_history.json", history)
    metrics = {
        "steps": len(history),
        "final": _final(history),
        "codebook_used": int((usage > 0).sum()),
        "codebook_size": int(usage.size),
    }
    print(f"[ae] steps={len(history)}  codebook_used={metrics['codebook_used']}/{metrics['codebook_size']}")
    print(f"[io] wrote {path}")
    return metrics


def _cmd_train_diff(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    corpus = _corpus(args, cfg)
    ae = load_autoencoder(args.ae)
    pairs = encode_pairs(ae, corpus.real)
    with run.timer("train-diff"):
        model, history = train_diffusion(pairs, cfg.diff_train, replace(cfg.latdiff, latent_channels=ae.config.latent_channels))
    path = save_model(model, DN_KIND, run.artifact("denoiser", "denoiser"), seed=cfg.diff_train.seed, step=len(history))
    run.write_json("history", "diff_history.json", history)
    metrics = {"steps": len(history), "pairs": len(pairs), "latent_scale": model.config.latent_scale, "final": _final(history)}
    print(f"[diff] steps={len(history)}  pairs={len(pairs)}  latent_scale={model.config.latent_scale:.4f}")
    print(f"[io] wrote {path}")
    return metrics


def _mask_policy(text: str | None, cfg: ExperimentConfig) -> MaskPolicy:
    """--policy as a preset name or a MaskPolicy JSON file; the maskgen section otherwise."""
    if text is None:
        return cfg.maskgen
    if text in MASK_POLICIES:
        return MASK_POLICIES[text]
    p = Path(text)
    if not p.is_file():
        raise ConfigError(f"--policy: neither a preset {sorted(MASK_POLICIES)} nor a JSON file: {text}")
    return from_dict(MaskPolicy, load_json(p), where=p.name)


def _cmd_maskgen(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    organ = load_case(args.case).organ if args.case else load_mask(args.organ)
    policy = _mask_policy(args.policy, cfg)
    rng = np.random.default_rng(stage_seed(cfg.global_seed, "maskgen"))
    if args.out_file is not None:
        if args.count != 1:
            raise ConfigError(f"--out {args.out_file} holds a single mask, got --count {args.count}")
        mask, spec = generate_tumor_mask(organ, policy, rng)
        path = run.artifact("mask", args.out_file)
        save_mask(mask, path)
        stem = args.out_file.removesuffix(".gz").removesuffix(".nii")
        row = {"file": args.out_file, "seed": cfg.global_seed, "voxels": mask.count(), "spec": spec.to_dict() if spec else None}
        run.write_json("spec", f"{stem}.json", row)
        print(f"[maskgen] voxels={row['voxels']}  class={spec.size_class if spec else None}")
        print(f"[io] wrote {path}")
        return {"masks": 1, "voxels": row["voxels"]}
    root = run.artifact("masks", "masks")
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(args.count):
        mask, spec = generate_tumor_mask(organ, policy, rng)
        name = f"mask-{i:03d}.nii.gz"
        save_mask(mask, root / name)
        rows.append({"file": name, "voxels": mask.count(), "spec": spec.to_dict() if spec else None})
    run.write_json("specs", "masks.json", rows)
    print(f"[maskgen] count={len(rows)}  empty={sum(r['spec'] is None for r in rows)}")
    print(f"[io] wrote {root}")
    return {"masks": len(rows)}


def _synth_volume(
    args: argparse.Namespace,
    cfg: ExperimentConfig,
    run: RunDir,
    models: SynthModels,
    synth_cfg: SynthesisConfig,
    rng: np.random.Generator,
) -> dict:
    if args.organ is None:
        raise ConfigError("--volume needs --organ")
    if args.count != 1:
        raise ConfigError(f"--volume writes one synthetic volume, got --count {args.count}")
    volume, organ = load_volume(args.volume), load_mask(args.organ)
    with run.timer("synth"):
        out, label, specs = synthesize_tumors(volume, organ, models, synth_cfg, rng)
    path = run.artifact("synthetic", "synthetic.nii.gz")
    save_volume(out, path)
    save_mask(label, run.artifact("tumor", "tumor.nii.gz"))
    steps = list(synth_cfg.resolve_steps(models.dn.config.timesteps))
    doc = {"seed": cfg.global_seed, "steps": steps, "tumor_voxels": label.count(), "tumors": [s.to_dict() for s in specs]}
    run.write_json("spec", "spec.json", doc)
    print(f"[synth] tumors={len(specs)}  voxels={label.count()}  steps={steps}")
    print(f"[io] wrote {path}")
    return {"volumes": 1, "tumors": len(specs), "denoiser_calls": models.dn.calls}


def _cmd_synth(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    models = _synth_models(args)
    synth_cfg = cfg.synthesis()
    if args.steps:
        synth_cfg = replace(synth_cfg, steps=tuple(args.steps))
    rng = np.random.default_rng(stage_seed(cfg.global_seed, "synth"))
    if args.volume is not None:
        return _synth_volume(args, cfg, run, models, synth_cfg, rng)
    if args.organ is not None:
        raise ConfigError("--organ goes with --volume; with --input the organ comes from each case")
    root = run.artifact("synthetic", "synthetic")
    rows = []
    with run.timer("synth"):
        for d in case_dirs(args.input):
            case = load_case(d)
            for k in range(args.count):
                volume, mask = synthesize(case.volume, case.organ, models.ae, models.dn, synth_cfg, rng)
                out = Case(f"{case.case_id}-syn{k:02d}", volume, case.organ, mask, case.organ_label, {"source": case.case_id})
                save_case(out, root / out.case_id)
                rows.append(_volume_digest(out))
    run.write_json("synthetic_index", "synthetic.json", rows)
    print(f"[synth] volumes={len(rows)}  steps={list(synth_cfg.resolve_steps(models.dn.config.timesteps))}")
    print(f"[io] wrote {root}")
    return {"volumes": len(rows), "denoiser_calls": models.dn.calls}


def _seg_corpus(args: argparse.Namespace, cfg: ExperimentConfig) -> Corpus:
    """--real/--healthy case directories, or --data as for the other commands."""
    if args.real is None and args.healthy is None:
        return _corpus(args, cfg)
    if args.data is not None:
        raise ConfigError("--data excludes --real/--healthy")
    if args.real is None:
        raise ConfigError("--healthy needs --real")
    real = tuple(load_cases(args.real, cfg.volcore.jobs))
    healthy = tuple(load_cases(args.healthy, cfg.volcore.jobs)) if args.healthy else ()
    return Corpus(real, healthy, ())


def _seg_models(args: argparse.Namespace) -> SynthModels | None:
    if args.synth == "off":
        return None
    models = _synth_models(args)
    if args.synth == "on" and models is None:
        raise ConfigError("--synth on needs --ae and --diff")
    return models


def _cmd_train_seg(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    corpus = _seg_corpus(args, cfg)
    models = _seg_models(args)
    with run.timer("train-seg"):
        model, history = fit_segmenter(corpus.real, corpus.healthy, models, cfg)
    path = save_model(model, SEG_KIND, run.artifact("segmenter", "segmenter"), seed=cfg.seg.seed, step=len(history))
    run.write_json("history", "seg_history.json", history)
    mode = "synthetic" if models is not None else "real_only"
    print(f"[seg] mode={mode}  steps={len(history)}  real={len(corpus.real)}  healthy={len(corpus.healthy) if models else 0}")
    print(f"[io] wrote {path}")
    return {"mode": mode, "steps": len(history), "final": _final(history)}


def _cmd_eval(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    corpus = _corpus(args, cfg)
    model = load_segmenter(args.seg)
    cases = corpus.test or corpus.real
    with run.timer("eval"):
        report = downstream_dsc(model, cases, cfg)
    run.write_json("eval", "eval.json", report)
    print(f"[eval] cases={report['cases']}  dsc={report['dsc']:.4f}  nsd={report['nsd']:.4f}  sens={report['sensitivity']:.4f}")
    return {k: v for k, v in report.items() if k != "per_case"}


def _cmd_ablate_timesteps(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    run.path(args.report)  # rejects names outside the run before any training
    corpus = _corpus(args, cfg)
    report = ablate_timesteps(
        corpus, cfg, args.steps, models=_synth_models(args), evaluate=not args.calls_only, timer=run.timer
    )
    run.write_json("ablation", args.report, report)
    for row in report["rows"]:
        print(f"[ablate] steps={row['sampling_steps']}  calls_per_tumor={row['denoiser_calls_per_tumor']}")
    return {"rows": len(report["rows"])}


def _cmd_ablate_annotations(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    corpus = _corpus(args, cfg)
    ae = load_autoencoder(args.ae) if args.ae else None
    report = ablate_annotations(corpus, cfg, args.n, ae=ae, timer=run.timer)
    run.write_json("ablation", "ablate_annotations.json", report)
    for row in report["rows"]:
        print(f"[ablate] n={row['n_annotated']}  dsc={row['dsc']:.4f}  contrast_sigma={row['synthetic_contrast_sigma']:.2f}")
    return {"rows": len(report["rows"])}


def _cmd_features(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    if args.cases is not None:
        cases = load_manifest_cases(args.cases, cfg.volcore.jobs)
    else:
        corpus = _corpus(args, cfg)
        cases = [*corpus.real, *corpus.test]
    with run.timer("features"):
        rows = lesion_rows(cases)
    path = write_features_csv(rows, run.artifact("features", args.out_file or "features.csv"))
    print(f"[features] cases={len(cases)}  lesions={len(rows)}")
    print(f"[io] wrote {path}")
    return {"lesions": len(rows)}


def _cmd_origin_study(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    for name in (args.report, args.plot):
        run.path(name)  # rejects names outside the run before the study
    if args.features:
        rows = read_features_csv(args.features)
    else:
        for organ in args.organs:
            if organ not in ORGAN_PRESETS:
                raise ConfigError(f"--organs: unknown organ {organ!r} (known: {sorted(ORGAN_PRESETS)})")
        with run.timer("phantoms"):
            cases = origin_corpus(cfg, args.organs, args.per_organ, organ_dependent=args.mode == "dependent")
            rows = lesion_rows(cases)
        write_features_csv(rows, run.artifact("features", "features.csv"))
    with run.timer("study"):
        report = origin_study(rows, cfg)
    report["mode"] = "file" if args.features else args.mode
    run.write_json("origin", args.report, report)
    write_embedding_csv(report["embedding"], run.artifact("embedding", args.plot))
    for kind, res in report["kinds"].items():
        band = res["chance_band"]
        print(
            f"[origin] kind={kind}  macro_p={res['macro_precision_mean']:.3f}  "
            f"chance=[{band['low']:.3f}, {band['high']:.3f}]  within_chance={res['within_chance']}"
        )
    return {k: {"macro_precision_mean": v["macro_precision_mean"], "within_chance": v["within_chance"]} for k, v in report["kinds"].items()}


def _cmd_cross_organ(args: argparse.Namespace, cfg: ExperimentConfig, run: RunDir) -> dict:
    if args.source == args.target:
        raise ConfigError("--source and --target must differ")
    report = cross_organ_study(cfg, args.source, args.target, timer=run.timer)
    run.write_json("cross_organ", "cross_organ.json", report)
    print(f"[cross] {args.source}->{args.target}  synthetic_dsc={report['synthetic']['dsc']:.4f}  real_only_dsc={report['real_only']['dsc']:.4f}")
    return {"synthetic_dsc": report["synthetic"]["dsc"], "real_only_dsc": report["real_only"]["dsc"]}


COMMANDS: dict[str, Callable[[argparse.Namespace, ExperimentConfig, RunDir], dict]] = {
    "phantom-gen": _cmd_phantom_gen,
    "preprocess": _cmd_preprocess,
    "train-ae": _cmd_train_ae,
    "train-diff": _cmd_train_diff,
    "maskgen": _cmd_maskgen,
    "synth": _cmd_synth,
    "train-seg": _cmd_train_seg,
    "eval": _cmd_eval,
    "ablate-timesteps": _cmd_ablate_timesteps,
    "ablate-annotations": _cmd_ablate_annotations,
    "features": _cmd_features,
    "origin-study": _cmd_origin_study,
    "cross-organ": _cmd_cross_organ,
}


def _report_error(e: BaseException, cmd: str | None) -> None:
    line = {"error": type(e).__name__, "message": str(e), "command": cmd}
    print(json.dumps(line, sort_keys=True), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    ap = build_argparser()
    try:
        args, extras = ap.parse_known_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    cmd = args.cmd
    _configure_logging(args)
    run: RunDir | None = None
    try:
        if extras:
            raise ConfigError(f"unknown option: {extras[0]}")
        args.run_root, args.out_file = split_out(cmd, args.out)
        cfg = _resolve(args)
        run = RunDir(args.run_root, cmd, cfg)
        metrics = COMMANDS[cmd](args, cfg, run)
        path = run.finish(to_dict(metrics))
        print(f"[io] wrote {path}")
        return EXIT_OK
    except Exception as e:
        log.debug("[error] %s", cmd, exc_info=True)
        _report_error(e, cmd)
        if run is not None:
            run.finish({"error": type(e).__name__, "message": str(e)}, status="error")
        return EXIT_CONFIG if isinstance(e, ConfigError) else EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
