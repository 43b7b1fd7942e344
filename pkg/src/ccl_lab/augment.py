"""Weak and strong feature-space views.

Rows are plain vectors, so "weak" is a light Gaussian jitter and "strong"
stacks heavier jitter, a couple of random coordinate ops, and a contiguous
zeroed block standing in for image crops/Cutout. All views are pure
functions of (x, seed, policy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

_STRONG_OPS = ("scale", "shift", "gamma")


def _as_array(x) -> tuple[np.ndarray, bool]:
    if isinstance(x, Tensor):
        return np.asarray(x.data, dtype=np.float64), True
    return np.asarray(x, dtype=np.float64), False


def _rewrap(arr: np.ndarray, was_tensor: bool):
    return Tensor(arr) if was_tensor else arr


@dataclass(frozen=True)
class AugmentPolicy:
    kind: str                 # "weak" | "strong"
    jitter_sd: float
    mask_fraction: float = 0.0
    n_strong_ops: int = 0
    op_magnitude: float = 0.3

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ConfigError(f"unknown augment kind {self.kind!r}")
        if self.jitter_sd < 0:
            raise ConfigError("jitter_sd must be nonnegative")
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ConfigError("mask_fraction must lie in [0, 1)")
        if self.kind == "weak" and (self.mask_fraction != 0.0 or self.n_strong_ops != 0):
            raise ConfigError("weak policy cannot mask or apply strong ops")


def default_policies(feature_sd: float) -> tuple[AugmentPolicy, AugmentPolicy]:
    """(weak, strong) with jitter scaled to the data's feature spread."""
    weak = AugmentPolicy("weak", jitter_sd=0.05 * feature_sd)
    strong = AugmentPolicy("strong", jitter_sd=0.15 * feature_sd,
                           mask_fraction=0.1, n_strong_ops=2)
    return weak, strong


def weak_view(x, policy: AugmentPolicy, seed: int):
    """Gaussian jitter only."""
    rng = np.random.default_rng(seed)
    arr, was_tensor = _as_array(x)
    return _rewrap(arr + policy.jitter_sd * rng.normal(size=arr.shape), was_tensor)


def _apply_strong_op(rng: np.random.Generator, x: np.ndarray,
                     magnitude: float) -> np.ndarray:
    op = _STRONG_OPS[rng.integers(0, len(_STRONG_OPS))]
    if op == "scale":
        # per-coordinate scaling within 1 ± magnitude
        return x * rng.uniform(1.0 - magnitude, 1.0 + magnitude, size=x.shape)
    if op == "shift":
        return x + rng.uniform(-magnitude, magnitude)
    # sign-preserving gamma on magnitude-normalized values
    scale = np.abs(x).max()
    if scale == 0.0:
        return x
    gamma = rng.uniform(1.0 - magnitude, 1.0 + magnitude)
    return np.sign(x) * (np.abs(x) / scale) ** gamma * scale


def strong_view(x, policy: AugmentPolicy, seed: int):
    """Heavy jitter, n_strong_ops random coordinate ops, contiguous cutout."""
    rng = np.random.default_rng(seed)
    arr, was_tensor = _as_array(x)
    out = arr + policy.jitter_sd * rng.normal(size=arr.shape)
    for _ in range(policy.n_strong_ops):
        out = _apply_strong_op(rng, out, policy.op_magnitude)
    d = arr.shape[-1]
    block = math.ceil(policy.mask_fraction * d)
    if block:
        start = int(rng.integers(0, d - block + 1))
        out[..., start:start + block] = 0.0
    return _rewrap(out, was_tensor)


def make_views(batch: np.ndarray, weak: AugmentPolicy, strong: AugmentPolicy,
               seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row weak and strong views of a batch, deterministic in seed.

    Row i of each view uses its own derived seed, so views are independent
    across rows and between the two strengths.
    """
    root = np.random.default_rng(seed)
    weak_seeds = root.integers(0, 2**63 - 1, size=batch.shape[0])
    strong_seeds = root.integers(0, 2**63 - 1, size=batch.shape[0])
    xw = np.stack([weak_view(row, weak, s)
                   for row, s in zip(batch, weak_seeds)]) if batch.shape[0] else batch.copy()
    xs = np.stack([strong_view(row, strong, s)
                   for row, s in zip(batch, strong_seeds)]) if batch.shape[0] else batch.copy()
    return xw, xs
