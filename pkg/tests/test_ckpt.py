from __future__ import annotations

import json

import pytest
import torch

from ckpt import (
    CACHE_ENV,
    MANIFEST,
    CheckpointError,
    cached_checkpoint,
    config_digest,
    load_into,
    load_state,
    read_manifest,
    save_module,
    save_state,
)


def _net(seed: int = 0) -> torch.nn.Module:
    torch.manual_seed(seed)
    return torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.GroupNorm(2, 4), torch.nn.Linear(4, 2))


def test_roundtrip_restores_parameters(tmp_path):
    src, dst = _net(0), _net(1)
    m = save_module(src, tmp_path / "ck", kind="toy", config={"width": 4}, seed=5, step=12)
    assert m.kind == "toy" and m.step == 12
    back = load_into(dst, tmp_path / "ck", kind="toy")
    assert back.config == {"width": 4}
    assert back.seed == 5
    for (ka, a), (kb, b) in zip(src.state_dict().items(), dst.state_dict().items()):
        assert ka == kb
        assert torch.equal(a, b)


def test_manifest_layout(tmp_path):
    save_state({"w": torch.ones(2, 3)}, tmp_path, kind="toy", config={})
    obj = json.loads((tmp_path / MANIFEST).read_text(encoding="utf-8"))
    assert obj["format"] == "lll-ckpt"
    assert obj["version"] == 1
    (p,) = obj["params"]
    assert p["name"] == "w"
    assert p["shape"] == [2, 3]
    assert p["dtype"] == "float32"
    assert len(p["crc32"]) == 8
    assert (tmp_path / p["file"]).stat().st_size == 24


def test_resave_is_byte_identical(tmp_path):
    net = _net()
    save_module(net, tmp_path / "a", kind="toy", config={"x": 1})
    save_module(net, tmp_path / "b", kind="toy", config={"x": 1})
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_integer_buffers_are_skipped(tmp_path):
    m = save_state({"w": torch.zeros(2), "n": torch.tensor(3)}, tmp_path, kind="toy", config={})
    assert [p.name for p in m.params] == ["w"]


def test_corrupted_blob_fails_crc(tmp_path):
    save_module(_net(), tmp_path, kind="toy", config={})
    blob = tmp_path / read_manifest(tmp_path).params[0].file
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="CRC32 mismatch"):
        load_state(tmp_path)


def test_missing_blob(tmp_path):
    save_module(_net(), tmp_path, kind="toy", config={})
    (tmp_path / read_manifest(tmp_path).params[0].file).unlink()
    with pytest.raises(CheckpointError, match="missing blob"):
        load_state(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError, match="missing manifest"):
        read_manifest(tmp_path)


def test_unknown_manifest_keys(tmp_path):
    save_state({"w": torch.zeros(1)}, tmp_path, kind="toy", config={})
    obj = json.loads((tmp_path / MANIFEST).read_text(encoding="utf-8"))
    obj["surprise"] = 1
    (tmp_path / MANIFEST).write_text(json.dumps(obj), encoding="utf-8")
    with pytest.raises(CheckpointError, match="unknown keys"):
        read_manifest(tmp_path)


def test_kind_mismatch(tmp_path):
    save_module(_net(), tmp_path, kind="toy", config={})
    with pytest.raises(CheckpointError, match="kind mismatch"):
        load_state(tmp_path, kind="other")


def test_shape_and_parameter_set_mismatch(tmp_path):
    save_module(_net(), tmp_path / "a", kind="toy", config={})
    wider = torch.nn.Sequential(torch.nn.Linear(3, 6), torch.nn.GroupNorm(2, 6), torch.nn.Linear(6, 2))
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_into(wider, tmp_path / "a")
    with pytest.raises(CheckpointError, match="parameter set mismatch"):
        load_into(torch.nn.Linear(3, 4), tmp_path / "a")


def test_cache_is_off_without_env(monkeypatch):
    monkeypatch.delenv(CACHE_ENV, raising=False)
    assert cached_checkpoint("toy", {"a": 1}, 0) is None


def test_cache_key_depends_on_kind_config_seed(monkeypatch, tmp_path):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path))
    p = cached_checkpoint("toy", {"a": 1, "b": 2}, 0)
    assert p.parent == tmp_path
    assert p.name.startswith("toy-")
    assert p == cached_checkpoint("toy", {"b": 2, "a": 1}, 0)
    assert p != cached_checkpoint("toy", {"a": 1, "b": 2}, 1)
    assert p != cached_checkpoint("toy", {"a": 2, "b": 2}, 0)


def test_config_digest_ignores_key_order():
    assert config_digest({"a": 1, "b": [1, 2]}) == config_digest({"b": [1, 2], "a": 1})
