from __future__ import annotations

import hashlib
import json

import pytest

from config import ConfigError
from runs import CONFIG_FILE, MANIFEST_FILE, PRESETS, RunDir, resolve_config, stage_seed


def test_stage_seed_formula():
    expected = int.from_bytes(hashlib.sha256(b"7:ae").digest()[:4], "big")
    assert stage_seed(7, "ae") == expected
    assert stage_seed(7, "ae") != stage_seed(7, "diff")
    assert 0 <= stage_seed(123, "seg") < 2**32


def test_default_preset_is_desk():
    assert resolve_config() == resolve_config(preset="desk")
    assert set(PRESETS) == {"desk", "paper"}


def test_paper_preset_is_larger():
    desk, paper = resolve_config(preset="desk"), resolve_config(preset="paper")
    assert paper.ae_train.steps > desk.ae_train.steps
    assert paper.diff_train.steps > desk.diff_train.steps


def test_resolution_order(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"global_seed": 5, "seg": {"epochs": 7, "batch_size": 3}}), encoding="utf-8")
    cfg = resolve_config(config_path=cfg_path, overrides=["seg.epochs=9"], seed=11)
    assert cfg.seg.epochs == 9  # --set over file
    assert cfg.seg.batch_size == 3  # file over preset
    assert cfg.global_seed == 11  # --seed over file


def test_stage_seeds_follow_global_seed():
    cfg = resolve_config(seed=4)
    assert cfg.ae_train.seed == stage_seed(4, "ae")
    assert cfg.diff_train.seed == stage_seed(4, "diff")
    assert cfg.seg.seed == stage_seed(4, "seg")


def test_explicit_stage_seeds_win_over_global_seed(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"ae_train": {"seed": 17}}), encoding="utf-8")
    cfg = resolve_config(config_path=cfg_path, overrides=["seg.seed=23"], seed=4)
    assert cfg.ae_train.seed == 17
    assert cfg.seg.seed == 23
    assert cfg.diff_train.seed == stage_seed(4, "diff")


@pytest.mark.parametrize(
    "overrides, fragment",
    [
        (["bogus.key=1"], "unknown keys: \\['bogus'\\]"),
        (["seg.nope=1"], "config.seg: unknown keys"),
        (["corpus.organ=spleen"], "unknown organ"),
        (["latdiff.latent_channels=7"], "latent_channels"),
    ],
)
def test_bad_overrides_raise_config_error(overrides, fragment):
    with pytest.raises(ConfigError, match=fragment):
        resolve_config(overrides=overrides)


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        resolve_config(preset="huge")


def test_digest_ignores_output_dir():
    a = resolve_config(output_dir="/tmp/a")
    b = resolve_config(output_dir="/tmp/b")
    assert a.digest() == b.digest()
    assert a.digest() != resolve_config(seed=1).digest()


def test_synthesis_fills_policy_from_maskgen():
    cfg = resolve_config(overrides=["maskgen.tumor_probability=0.5"])
    assert cfg.synthesis().policy == cfg.maskgen


def test_run_dir_writes_config_and_manifest(tmp_path):
    cfg = resolve_config(output_dir=str(tmp_path / "run"))
    run = RunDir(tmp_path / "run", "maskgen", cfg)
    saved = json.loads((tmp_path / "run" / CONFIG_FILE).read_text(encoding="utf-8"))
    assert saved["output_dir"] == str(tmp_path / "run")

    run.write_json("report", "sub/report.json", {"b": 1, "a": 2})
    with run.timer("stage"):
        pass
    run.finish({"n": 1})

    text = (tmp_path / "run" / "sub" / "report.json").read_text(encoding="utf-8")
    assert text.index('"a"') < text.index('"b"')
    man = json.loads((tmp_path / "run" / MANIFEST_FILE).read_text(encoding="utf-8"))
    assert man["run_id"] == f"maskgen-{cfg.digest()[:12]}"
    assert man["config_hash"] == cfg.digest()
    assert man["artifacts"] == {"config": CONFIG_FILE, "report": "sub/report.json"}
    assert man["metrics"] == {"n": 1}
    assert man["status"] == "ok"
    assert "stage" in man["timings"]
    assert man["created_utc"].endswith("Z")
    assert not list((tmp_path / "run").rglob("*.tmp"))


def test_run_dir_rejects_escaping_paths(tmp_path):
    run = RunDir(tmp_path / "run", "eval", resolve_config())
    with pytest.raises(ConfigError, match="escapes"):
        run.path("../outside.json")


def test_explicit_run_id(tmp_path):
    run = RunDir(tmp_path, "eval", resolve_config(overrides=["run_id=my-run"]))
    assert run.finish(status="error").is_file()
    man = json.loads((tmp_path / MANIFEST_FILE).read_text(encoding="utf-8"))
    assert man["run_id"] == "my-run"
    assert man["status"] == "error"
