"""Checkpoint directory backend (manifest.json + raw float32 blobs) with CRC32.

Layout:
  <dir>/manifest.json
  <dir>/<dotted.param.name>.f32      one blob per tensor

manifest.json (sorted keys, no timestamps, so save->load->save is byte-identical):
  {
    "format": "lll-ckpt",
    "version": 1,
    "kind": "autoencoder" | "denoiser" | "segmenter" | ...,
    "config": {...},            echo of the model config
    "seed": int,
    "step": int,
    "extra": {...},             free-form metadata (e.g. latent_scale)
    "params": [
      {"name": "encoder.conv_in.weight", "shape": [16, 1, 3, 3, 3],
       "dtype": "float32", "file": "encoder.conv_in.weight.f32",
       "crc32": "0a1b2c3d"}
    ]
  }

Blobs are little-endian float32, C order, no header. crc32 is the big-endian hex
of zlib.crc32 over the blob bytes.

This module does NOT know about model classes: callers rebuild the module from
`config` and load the returned state dict.
"""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT = "lll-ckpt"
VERSION = 1
MANIFEST = "manifest.json"
BLOB_SUFFIX = ".f32"
CACHE_ENV = "LLL_CACHE_DIR"

_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def crc32_hex(data: bytes) -> str:
    c = zlib.crc32(data) & 0xFFFFFFFF
    return c.to_bytes(4, "big").hex()


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple[int, ...]
    file: str
    crc32: str
    dtype: str = "float32"

    def to_json(self) -> dict:
        return {"name": self.name, "shape": list(self.shape), "dtype": self.dtype, "file": self.file, "crc32": self.crc32}


@dataclass(frozen=True)
class CheckpointManifest:
    kind: str
    config: dict
    seed: int
    step: int
    params: tuple[ParamEntry, ...] = ()
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "kind": self.kind,
            "config": self.config,
            "seed": int(self.seed),
            "step": int(self.step),
            "extra": self.extra,
            "params": [p.to_json() for p in self.params],
        }


def _dump_json(obj: object) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _validate_manifest(obj: dict) -> CheckpointManifest:
    allowed = {"format", "version", "kind", "config", "seed", "step", "extra", "params"}
    extra = set(obj) - allowed
    if extra:
        raise CheckpointError(f"manifest: unknown keys: {sorted(extra)}")
    if obj.get("format") != FORMAT:
        raise CheckpointError(f"manifest: format must be {FORMAT!r}")
    if obj.get("version") != VERSION:
        raise CheckpointError(f"manifest: unsupported version {obj.get('version')!r}")
    params = []
    for p in obj.get("params", []):
        if set(p) != {"name", "shape", "dtype", "file", "crc32"}:
            raise CheckpointError(f"manifest: bad param entry keys: {sorted(p)}")
        if p["dtype"] != "float32":
            raise CheckpointError(f"manifest: unsupported dtype {p['dtype']!r} for {p['name']}")
        params.append(ParamEntry(p["name"], tuple(int(s) for s in p["shape"]), p["file"], p["crc32"]))
    return CheckpointManifest(
        kind=str(obj.get("kind", "")),
        config=dict(obj.get("config", {})),
        seed=int(obj.get("seed", 0)),
        step=int(obj.get("step", 0)),
        params=tuple(params),
        extra=dict(obj.get("extra", {})),
    )


def _blob_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
    return arr.astype(_LE_F32, copy=False).tobytes(order="C")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_state(
    state: Mapping[str, torch.Tensor],
    path: str | Path,
    *,
    kind: str,
    config: dict,
    seed: int = 0,
    step: int = 0,
    extra: dict | None = None,
) -> CheckpointManifest:
    """Write a state dict as a checkpoint directory. Existing blobs are overwritten."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    entries: list[ParamEntry] = []
    for name in sorted(state):
        t = state[name]
        if not torch.is_floating_point(t):
            # integer buffers (e.g. counters) are not part of the float32 format
            continue
        blob = _blob_bytes(t)
        fname = name + BLOB_SUFFIX
        _atomic_write(d / fname, blob)
        entries.append(ParamEntry(name, tuple(int(s) for s in t.shape), fname, crc32_hex(blob)))
    manifest = CheckpointManifest(kind, config, seed, step, tuple(entries), dict(extra or {}))
    _atomic_write(d / MANIFEST, _dump_json(manifest.to_json()).encode("utf-8"))
    return manifest


def save_module(module: torch.nn.Module, path: str | Path, **kw) -> CheckpointManifest:
    return save_state(module.state_dict(), path, **kw)


def read_manifest(path: str | Path) -> CheckpointManifest:
    d = Path(path)
    mp = d / MANIFEST
    if not mp.is_file():
        raise CheckpointError(f"missing manifest: {mp}")
    try:
        obj = json.loads(mp.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"manifest: invalid JSON ({e})") from e
    if not isinstance(obj, dict):
        raise CheckpointError("manifest: top-level value must be an object")
    return _validate_manifest(obj)


def load_state(path: str | Path, *, kind: str | None = None) -> tuple[dict[str, torch.Tensor], CheckpointManifest]:
    d = Path(path)
    manifest = read_manifest(d)
    if kind is not None and manifest.kind != kind:
        raise CheckpointError(f"checkpoint kind mismatch: expected {kind!r}, got {manifest.kind!r}")
    state: dict[str, torch.Tensor] = {}
    for p in manifest.params:
        bp = d / p.file
        if not bp.is_file():
            raise CheckpointError(f"missing blob: {p.file}")
        blob = bp.read_bytes()
        if crc32_hex(blob) != p.crc32:
            raise CheckpointError(f"CRC32 mismatch for blob {p.name!r}")
        n = int(np.prod(p.shape, dtype=np.int64)) if p.shape else 1
        if len(blob) != 4 * n:
            raise CheckpointError(f"blob size mismatch for {p.name!r}: {len(blob)} bytes for shape {list(p.shape)}")
        arr = np.frombuffer(blob, dtype=_LE_F32).astype(np.float32).reshape(p.shape)
        state[p.name] = torch.from_numpy(arr.copy())
    return state, manifest


def load_into(module: torch.nn.Module, path: str | Path, *, kind: str | None = None) -> CheckpointManifest:
    state, manifest = load_state(path, kind=kind)
    own = module.state_dict()
    missing = sorted(k for k, v in own.items() if torch.is_floating_point(v) and k not in state)
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise CheckpointError(f"parameter set mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    for k, v in state.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise CheckpointError(f"shape mismatch for {k!r}: {list(own[k].shape)} vs {list(v.shape)}")
    module.load_state_dict(state, strict=False)
    return manifest


def config_digest(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def cache_dir() -> Path | None:
    """Checkpoint cache root from LLL_CACHE_DIR, or None when caching is off."""
    raw = os.environ.get(CACHE_ENV)
    return Path(raw) if raw else None


def cached_checkpoint(kind: str, config: dict, seed: int) -> Path | None:
    root = cache_dir()
    if root is None:
        return None
    key = config_digest({"kind": kind, "config": config, "seed": int(seed)})[:16]
    return root / f"{kind}-{key}"


__all__ = [
    "CheckpointError",
    "CheckpointManifest",
    "cache_dir",
    "cached_checkpoint",
    "config_digest",
    "crc32_hex",
    "load_into",
    "load_state",
    "read_manifest",
    "save_module",
    "save_state",
]
