from __future__ import annotations

import json
from pathlib import Path

import pytest

import cli
from experiments import AE_KIND, DN_KIND, save_model
from featlab import FEATURE_NAMES, FeatureRow, FeatureVector, write_features_csv
from runs import stage_seed
from tests._helpers import TINY_OVERRIDES, tiny_models
from volcore import load_mask, load_volume


def _tiny_args() -> list[str]:
    out: list[str] = []
    for s in TINY_OVERRIDES:
        out += ["--set", s]
    return out


def _run(argv: list[str]) -> int:
    return cli.main(argv)


def _manifest(out) -> dict:
    return json.loads((out / "manifest.json").read_text(encoding="utf-8"))


def _stderr_line(capsys) -> dict:
    lines = [ln for ln in capsys.readouterr().err.splitlines() if ln.startswith("{")]
    assert lines, "no JSON error line on stderr"
    return json.loads(lines[-1])


@pytest.fixture(autouse=True)
def _no_cache(monkeypatch):
    monkeypatch.delenv("LLL_CACHE_DIR", raising=False)


def test_phantom_gen_is_reproducible(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        rc = _run(["phantom-gen", "--out", str(out), "--seed", "5", "--count", "2", *_tiny_args()])
        assert rc == 0
    a, b = ((o / "phantoms.json").read_text(encoding="utf-8") for o in outs)
    assert a == b
    rows = json.loads(a)["phantom"]
    assert [r["case"] for r in rows] == ["phantom-000", "phantom-001"]
    assert all(r["tumor_voxels"] > 0 for r in rows)
    assert _manifest(outs[0])["config_hash"] == _manifest(outs[1])["config_hash"]
    m = _manifest(outs[0])
    assert m["status"] == "ok"
    assert m["command"] == "phantom-gen"
    assert m["run_id"].startswith("phantom-gen-")
    assert m["metrics"] == {"cases": 2}
    assert (outs[0] / "cases" / "kidney-phantom-000" / "organ.nii.gz").is_file()


def test_phantom_gen_without_lesions(tmp_path):
    rc = _run(["phantom-gen", "--out", str(tmp_path), "--count", "1", "--lesions", "off", *_tiny_args()])
    assert rc == 0
    rows = json.loads((tmp_path / "phantoms.json").read_text(encoding="utf-8"))["phantom"]
    assert rows[0]["tumor_voxels"] == 0


def test_phantom_gen_full_corpus(tmp_path):
    rc = _run(["phantom-gen", "--out", str(tmp_path), *_tiny_args()])
    assert rc == 0
    rows = json.loads((tmp_path / "phantoms.json").read_text(encoding="utf-8"))
    assert {k: len(v) for k, v in rows.items()} == {"real": 2, "healthy": 2, "test": 1}
    assert (tmp_path / "corpus" / "healthy" / "healthy-001").is_dir()


def test_unknown_option_is_a_config_error(tmp_path, capsys):
    rc = _run(["phantom-gen", "--out", str(tmp_path), "--bogus", "1"])
    assert rc == cli.EXIT_CONFIG
    err = _stderr_line(capsys)
    assert err["command"] == "phantom-gen"
    assert err["error"] == "ConfigError"
    assert "--bogus" in err["message"]


def test_unknown_subcommand_is_a_usage_error(tmp_path):
    assert _run(["frobnicate", "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_missing_out_is_a_usage_error():
    assert _run(["phantom-gen"]) == cli.EXIT_USAGE


def test_bad_set_key_is_a_config_error(tmp_path, capsys):
    rc = _run(["phantom-gen", "--out", str(tmp_path), "--set", "bogus.key=1"])
    assert rc == cli.EXIT_CONFIG
    assert "bogus" in _stderr_line(capsys)["message"]


def test_runtime_failure_writes_error_manifest(tmp_path, capsys):
    out = tmp_path / "run"
    rc = _run(["maskgen", "--out", str(out), "--organ", str(tmp_path / "missing.nii.gz"), *_tiny_args()])
    assert rc == cli.EXIT_FAILURE
    assert _stderr_line(capsys)["command"] == "maskgen"
    m = _manifest(out)
    assert m["status"] == "error"
    assert "missing" in m["metrics"]["message"]


def test_maskgen_from_a_case(tmp_path):
    cases = tmp_path / "cases"
    assert _run(["phantom-gen", "--out", str(cases), "--count", "1", "--lesions", "off", *_tiny_args()]) == 0
    case_dir = cases / "cases" / "kidney-phantom-000"
    out = tmp_path / "masks"
    rc = _run(["maskgen", "--out", str(out), "--case", str(case_dir), "--count", "3", *_tiny_args()])
    assert rc == 0
    rows = json.loads((out / "masks.json").read_text(encoding="utf-8"))
    assert [r["file"] for r in rows] == ["mask-000.nii.gz", "mask-001.nii.gz", "mask-002.nii.gz"]
    for r in rows:
        assert (out / "masks" / r["file"]).is_file()
        assert (r["spec"] is None) == (r["voxels"] == 0)
    assert _manifest(out)["metrics"] == {"masks": 3}


def test_origin_study_on_phantoms(tmp_path):
    rc = _run(
        [
            "origin-study",
            "--out",
            str(tmp_path),
            "--organs",
            "kidney,pancreas",
            "--per-organ",
            "6",
            *_tiny_args(),
            "--set",
            "corpus.grid_size=48",
        ]
    )
    assert rc == 0
    report = json.loads((tmp_path / "origin_study.json").read_text(encoding="utf-8"))
    assert report["mode"] == "independent"
    assert report["organs"] == ["kidney", "pancreas"]
    assert report["n"] == 12
    assert (tmp_path / "features.csv").is_file()
    assert set(_manifest(tmp_path)["metrics"]) == {"linear_hinge", "nearest_neighbor"}


def test_origin_study_rejects_unknown_organ(tmp_path):
    rc = _run(["origin-study", "--out", str(tmp_path), "--organs", "kidney,spleen", *_tiny_args()])
    assert rc == cli.EXIT_CONFIG


def test_cross_organ_needs_distinct_organs(tmp_path):
    rc = _run(["cross-organ", "--out", str(tmp_path), "--source", "kidney", "--target", "kidney", *_tiny_args()])
    assert rc == cli.EXIT_CONFIG


def test_ablate_timesteps_calls_only(tmp_path):
    rc = _run(
        ["ablate-timesteps", "--out", str(tmp_path), "--steps", "1,4", "--calls-only", "--report", "t.json", *_tiny_args()]
    )
    assert rc == 0
    assert _manifest(tmp_path)["artifacts"]["ablation"] == "t.json"
    report = json.loads((tmp_path / "t.json").read_text(encoding="utf-8"))
    assert [r["denoiser_calls_per_tumor"] for r in report["rows"]] == [1, 4]
    timings = _manifest(tmp_path)["timings"]
    assert {"train-ae", "train-diff", "trial:1", "trial:4"} <= set(timings)


@pytest.mark.slow
def test_stagewise_pipeline(tmp_path):
    tiny = _tiny_args()
    assert _run(["phantom-gen", "--out", str(tmp_path / "corpus"), *tiny]) == 0
    data = str(tmp_path / "corpus" / "corpus")
    assert _run(["train-ae", "--out", str(tmp_path / "ae"), "--data", data, *tiny]) == 0
    ae = str(tmp_path / "ae")
    assert _run(["train-diff", "--out", str(tmp_path / "diff"), "--data", data, "--ae", ae, *tiny]) == 0
    dn = str(tmp_path / "diff" / "denoiser")
    assert _run(["synth", "--out", str(tmp_path / "syn"), "--input", data + "/healthy", "--ae", ae, "--diff", dn, *tiny]) == 0
    syn = json.loads((tmp_path / "syn" / "synthetic.json").read_text(encoding="utf-8"))
    assert len(syn) == 2
    seg_args = ["--real", data + "/real", "--healthy", data + "/healthy", "--synth", "on", "--ae", ae, "--diff", dn]
    assert _run(["train-seg", "--out", str(tmp_path / "seg"), *seg_args, *tiny]) == 0
    assert _manifest(tmp_path / "seg")["metrics"]["mode"] == "synthetic"
    seg = str(tmp_path / "seg")
    assert _run(["eval", "--out", str(tmp_path / "eval"), "--data", data, "--seg", seg, *tiny]) == 0
    report = json.loads((tmp_path / "eval" / "eval.json").read_text(encoding="utf-8"))
    assert 0.0 <= report["dsc"] <= 1.0


PHANTOM_SPEC = {
    "grid_shape": [32, 32, 32],
    "organ_radius_range": [9.0, 11.0],
    "lesion_radius_range": [2.0, 3.0],
    "organ_label": "kidney",
}
SMALL_POLICY = {"diameter_ranges_mm": {"early": [4.0, 8.0]}, "deform_magnitude_mm": 1.0}


def _write(path, obj) -> str:
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


def _phantom(tmp_path, name: str = "one", **spec) -> str:
    out = tmp_path / name
    spec_path = _write(tmp_path / f"{name}.json", {**PHANTOM_SPEC, **spec})
    assert _run(["phantom-gen", "--spec", spec_path, "--out", str(out), "--seed", "5"]) == 0
    return str(out)


def test_phantom_gen_from_spec_file(tmp_path):
    out = Path(_phantom(tmp_path))
    for name in ("volume.nii.gz", "organ.nii.gz", "lesion.nii.gz", "meta.json", "manifest.json"):
        assert (out / name).is_file(), name
    meta = json.loads((out / "meta.json").read_text(encoding="utf-8"))
    assert meta["seed"] == stage_seed(5, "phantom")
    assert meta["spec"]["grid_shape"] == [32, 32, 32]
    assert meta["spec"]["seed"] == meta["seed"]
    assert meta["organ_label"] == "kidney"
    assert load_volume(out / "volume.nii.gz").shape == (32, 32, 32)
    assert _manifest(out)["metrics"]["lesion_voxels"] == load_mask(out / "lesion.nii.gz").count()


def test_phantom_gen_spec_seed_wins(tmp_path):
    out = Path(_phantom(tmp_path, seed=77))
    assert json.loads((out / "meta.json").read_text(encoding="utf-8"))["seed"] == 77


def test_phantom_gen_bad_spec_is_a_config_error(tmp_path, capsys):
    spec_path = _write(tmp_path / "bad.json", {**PHANTOM_SPEC, "bogus": 1})
    assert _run(["phantom-gen", "--spec", spec_path, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "bogus" in _stderr_line(capsys)["message"]
    spec_path = _write(tmp_path / "tight.json", {**PHANTOM_SPEC, "organ_radius_range": [20.0, 30.0]})
    assert _run(["phantom-gen", "--spec", spec_path, "--out", str(tmp_path / "p")]) == cli.EXIT_CONFIG


def test_phantom_gen_spec_excludes_count(tmp_path):
    spec_path = _write(tmp_path / "s.json", PHANTOM_SPEC)
    assert _run(["phantom-gen", "--spec", spec_path, "--count", "2", "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE


def test_maskgen_writes_a_single_mask_file(tmp_path):
    organ = f"{_phantom(tmp_path)}/organ.nii.gz"
    policy = _write(tmp_path / "p.json", SMALL_POLICY)
    outs = [tmp_path / "a" / "mask.nii.gz", tmp_path / "b" / "mask.nii.gz"]
    for out in outs:
        assert _run(["maskgen", "--organ", organ, "--policy", policy, "--seed", "3", "--out", str(out)]) == 0
    mask = load_mask(outs[0])
    assert mask.any()
    assert not (mask.as_bool() & ~load_mask(organ).as_bool()).any()
    a, b = ((o.parent / "mask.json").read_text(encoding="utf-8") for o in outs)
    assert a == b
    doc = json.loads(a)
    assert doc["file"] == "mask.nii.gz" and doc["seed"] == 3
    assert doc["voxels"] == mask.count()
    assert doc["spec"]["size_class"] == "early"
    m = _manifest(outs[0].parent)
    assert m["artifacts"]["mask"] == "mask.nii.gz"
    assert m["metrics"] == {"masks": 1, "voxels": mask.count()}


def test_maskgen_policy_errors(tmp_path):
    organ = f"{_phantom(tmp_path)}/organ.nii.gz"
    out = str(tmp_path / "m" / "mask.nii.gz")
    assert _run(["maskgen", "--organ", organ, "--policy", "nope", "--out", out]) == cli.EXIT_CONFIG
    bad = _write(tmp_path / "bad.json", {"class_weights": {"huge": 1.0}})
    assert _run(["maskgen", "--organ", organ, "--policy", bad, "--out", out]) == cli.EXIT_CONFIG
    assert _run(["maskgen", "--organ", organ, "--count", "2", "--out", out]) == cli.EXIT_CONFIG


def _checkpoints(tmp_path) -> tuple[str, str]:
    ae, dn = tiny_models()
    save_model(ae, AE_KIND, tmp_path / "ae-run" / AE_KIND)
    save_model(dn, DN_KIND, tmp_path / "dn")
    return str(tmp_path / "ae-run"), str(tmp_path / "dn")


def test_synth_on_a_single_volume(tmp_path):
    case = _phantom(tmp_path, with_lesion=False)
    ae, dn = _checkpoints(tmp_path)
    out = tmp_path / "syn"
    argv = ["synth", "--ae", ae, "--diff", dn, "--volume", f"{case}/volume.nii.gz", "--organ", f"{case}/organ.nii.gz"]
    rc = _run([*argv, "--seed", "2", "--out", str(out), "--set", "maskgen.diameter_ranges_mm={\"early\": [4, 8]}"])
    assert rc == 0
    tumor = load_mask(out / "tumor.nii.gz")
    assert tumor.any()
    assert not (tumor.as_bool() & ~load_mask(f"{case}/organ.nii.gz").as_bool()).any()
    assert load_volume(out / "synthetic.nii.gz").shape == (32, 32, 32)
    spec = json.loads((out / "spec.json").read_text(encoding="utf-8"))
    assert spec["seed"] == 2
    assert spec["tumor_voxels"] == tumor.count()
    assert len(spec["tumors"]) == 1 and spec["tumors"][0]["size_class"] == "early"


def test_synth_single_volume_flag_errors(tmp_path):
    case = _phantom(tmp_path, with_lesion=False)
    ae, dn = _checkpoints(tmp_path)
    base = ["synth", "--ae", ae, "--diff", dn, "--out", str(tmp_path / "syn")]
    assert _run([*base, "--volume", f"{case}/volume.nii.gz"]) == cli.EXIT_CONFIG
    assert _run([*base, "--input", case, "--organ", f"{case}/organ.nii.gz"]) == cli.EXIT_CONFIG
    assert _run([*base, "--volume", f"{case}/volume.nii.gz", "--input", case]) == cli.EXIT_USAGE


def test_train_seg_from_real_and_healthy_dirs(tmp_path):
    tiny = _tiny_args()
    assert _run(["phantom-gen", "--out", str(tmp_path / "real"), "--count", "2", "--seed", "5", *tiny]) == 0
    assert _run(["phantom-gen", "--out", str(tmp_path / "healthy"), "--count", "1", "--lesions", "off", *tiny]) == 0
    real, healthy = str(tmp_path / "real" / "cases"), str(tmp_path / "healthy" / "cases")
    seg = tmp_path / "seg"
    base = ["train-seg", "--real", real, "--healthy", healthy, *tiny]
    assert _run([*base, "--synth", "on", "--out", str(seg)]) == cli.EXIT_CONFIG
    assert _run([*base, "--data", real, "--out", str(seg)]) == cli.EXIT_CONFIG
    assert _run([*base, "--synth", "off", "--out", str(seg)]) == 0
    assert _manifest(seg)["metrics"]["mode"] == "real_only"
    assert _run(["eval", "--data", real, "--seg", str(seg), "--out", str(tmp_path / "eval"), *tiny]) == 0
    report = json.loads((tmp_path / "eval" / "eval.json").read_text(encoding="utf-8"))
    assert report["cases"] == 2


def test_features_from_a_case_manifest(tmp_path):
    tiny = _tiny_args()
    assert _run(["phantom-gen", "--out", str(tmp_path / "ph"), "--count", "2", "--seed", "5", *tiny]) == 0
    listing = _write(tmp_path / "cases.json", {"cases": ["ph/cases"]})
    out = tmp_path / "feat" / "features.csv"
    assert _run(["features", "--cases", listing, "--out", str(out), *tiny]) == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(["case", "organ_label", *FEATURE_NAMES])
    assert len(lines) == 3
    assert _manifest(out.parent)["artifacts"]["features"] == "features.csv"
    bad = _write(tmp_path / "bad.json", {"cases": [1, 2]})
    assert _run(["features", "--cases", bad, "--out", str(tmp_path / "f2.csv")]) == cli.EXIT_CONFIG


def test_origin_study_from_features_file(tmp_path):
    rows = []
    for label, offset in (("liver", 0.0), ("kidney", 8.0)):
        for i in range(6):
            vec = [offset + 0.1 * i + 0.01 * j for j in range(len(FEATURE_NAMES))]
            rows.append(FeatureRow(f"{label}-{i}", label, FeatureVector.from_array(vec)))
    features = write_features_csv(rows, tmp_path / "features.csv")
    out = tmp_path / "origin"
    argv = ["origin-study", "--features", str(features), "--report", "report.json", "--plot", "embedding.csv"]
    assert _run([*argv, "--out", str(out), *_tiny_args()]) == 0
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["mode"] == "file" and report["n"] == 12
    lines = (out / "embedding.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "case,organ_label,x,y"
    assert len(lines) == 13
    assert _manifest(out)["artifacts"]["embedding"] == "embedding.csv"


def test_report_names_stay_inside_the_run(tmp_path, capsys):
    argv = ["origin-study", "--out", str(tmp_path / "o"), "--organs", "kidney,pancreas", "--per-organ", "2"]
    assert _run([*argv, "--report", "../escape.json", *_tiny_args()]) == cli.EXIT_CONFIG
    assert "escapes" in _stderr_line(capsys)["message"]
