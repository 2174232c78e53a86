"""Shared training plumbing: divergence checks, seeded init, LR schedule, tensor conversion."""

from __future__ import annotations

import contextlib
import math
from collections.abc import Iterator, Mapping

import numpy as np
import torch

from volcore import Volume, VoxelMask


class DivergenceError(RuntimeError):
    """A loss went NaN/Inf. Carries the step and the offending terms."""

    def __init__(self, stage: str, step: int, terms: list[str]):
        self.stage = stage
        self.step = step
        self.terms = terms
        super().__init__(f"[{stage}] divergence at step={step}: non-finite {', '.join(terms)}")


def check_finite(stage: str, step: int, terms: Mapping[str, float | torch.Tensor]) -> None:
    bad = [k for k, v in terms.items() if not math.isfinite(float(v))]
    if bad:
        raise DivergenceError(stage, step, sorted(bad))


@contextlib.contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block with the global torch RNG seeded, restoring the previous state afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)


def warmup_cosine(warmup_steps: int, total_steps: int):
    """LambdaLR factor: linear warmup to 1, then cosine decay to 0 at total_steps."""

    def factor(step: int) -> float:
        if warmup_steps > 0 and step < warmup_steps:
            return (step + 1) / warmup_steps
        span = max(total_steps - warmup_steps, 1)
        progress = min(max(step - warmup_steps, 0) / span, 1.0)
        return 0.5 * (1.0 + math.cos(math.pi * progress))

    return factor


def to_tensor(x: Volume | VoxelMask | np.ndarray | torch.Tensor) -> torch.Tensor:
    """(H, W, D) payload -> float32 tensor (1, 1, H, W, D); 5D tensors pass through."""
    if isinstance(x, torch.Tensor):
        t = x.to(torch.float32)
    else:
        arr = x.data if isinstance(x, (Volume, VoxelMask)) else x
        t = torch.from_numpy(np.array(arr, dtype=np.float32, copy=True))
    if t.ndim == 3:
        t = t[None, None]
    elif t.ndim == 4:
        t = t[None]
    return t


def to_array(t: torch.Tensor) -> np.ndarray:
    """(1, 1, H, W, D) or (H, W, D) tensor -> float32 numpy (H, W, D)."""
    a = t.detach().cpu().to(torch.float32).numpy()
    while a.ndim > 3:
        a = a[0]
    return a


def stack_batch(items: list[torch.Tensor]) -> torch.Tensor:
    return torch.cat([to_tensor(i) for i in items], dim=0)


__all__ = [
    "DivergenceError",
    "check_finite",
    "generator",
    "seeded",
    "stack_batch",
    "to_array",
    "to_tensor",
    "warmup_cosine",
]
