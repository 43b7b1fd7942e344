"""Synthetic datasets, label-noise injection, and dataset file I/O.

Datasets are Gaussian blobs: one mean per class, pairwise-separated,
isotropic spread. Noise is injected on the train split only, either
through a class-conditional transition matrix (symmetric or pair) or
through an instance-dependent recipe where each sample's flip
probability and flip target depend on its feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, DimensionError, EmptyClassError, FormatError
from .tensor import Tensor

TRAIN, TEST = 0, 1


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix with clean and (possibly corrupted) observed labels.

    Clean labels exist purely for evaluation; training code sees only the
    noisy ones through `TrainView`.
    """

    features: np.ndarray      # (n, d) float64 (values exactly representable in f32)
    clean_labels: np.ndarray  # (n,) int64 in [0, C)
    noisy_labels: np.ndarray  # (n,) int64 in [0, C)
    split: np.ndarray         # (n,) uint8, 0=train 1=test
    C: int
    noise_applied: bool = False

    def __post_init__(self):
        n = self.features.shape[0]
        if not (len(self.clean_labels) == len(self.noisy_labels) == len(self.split) == n):
            raise DimensionError("label/split arrays must match feature count")
        for name, labels in (("clean", self.clean_labels), ("noisy", self.noisy_labels)):
            if labels.size and (labels.min() < 0 or labels.max() >= self.C):
                raise ConfigError(f"{name} labels outside [0, {self.C})")
        test = self.split == TEST
        if np.any(self.clean_labels[test] != self.noisy_labels[test]):
            raise ConfigError("test-split labels must stay clean")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split == TRAIN)

    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split == TEST)


class TrainView:
    """What the trainer is allowed to see: features and observed labels of
    the train split. Clean labels are deliberately not reachable here."""

    __slots__ = ("features", "labels", "C")

    def __init__(self, ds: LabeledDataset):
        idx = ds.train_indices()
        self.features = ds.features[idx]
        self.labels = ds.noisy_labels[idx].copy()
        self.C = ds.C

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def feature_tensor(self, indices: Optional[np.ndarray] = None) -> Tensor:
        rows = self.features if indices is None else self.features[indices]
        return Tensor(rows)


@dataclass(frozen=True)
class TransitionMatrix:
    T: np.ndarray   # (C, C), rows sum to 1
    kind: str       # "symmetric" | "pair"
    tau0: float

    def __post_init__(self):
        if np.any(self.T < 0):
            raise ConfigError("transition matrix entries must be nonnegative")
        if not np.allclose(self.T.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigError("transition matrix rows must sum to 1")

    @property
    def C(self) -> int:
        return self.T.shape[0]


def gen_blobs(C: int, n_per_class: int, dim: int, separation: float,
              spread: float, seed: int, *,
              n_test_per_class: Optional[int] = None) -> LabeledDataset:
    """Gaussian blob dataset: C classes, pairwise mean distance >= separation.

    The train split holds n_per_class samples per class; the test split
    holds n_test_per_class (default n_per_class // 4, at least 1).
    """
    if C < 2:
        raise ConfigError(f"need C >= 2 classes, got {C}")
    if dim < 2:
        raise ConfigError(f"need dim >= 2, got {dim}")
    if separation <= 0:
        raise ConfigError(f"separation must be positive, got {separation}")
    if spread < 0:
        raise ConfigError(f"spread must be nonnegative, got {spread}")
    if n_per_class <= 0:
        raise EmptyClassError("n_per_class must be at least 1")
    if n_test_per_class is None:
        n_test_per_class = max(1, n_per_class // 4)

    rng = np.random.default_rng(seed)

    # Class means: random unit directions, best of several draws by minimum
    # pairwise distance, then scaled so that minimum equals `separation`.
    best_dirs, best_min = None, -1.0
    for _ in range(16):
        dirs = rng.normal(size=(C, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        dmin = min(np.linalg.norm(dirs[i] - dirs[j])
                   for i in range(C) for j in range(i + 1, C))
        if dmin > best_min:
            best_dirs, best_min = dirs, dmin
    means = best_dirs * (separation / best_min)

    def draw(count_per_class: int, tag: int):
        feats, labels = [], []
        for c in range(C):
            x = means[c] + spread * rng.normal(size=(count_per_class, dim))
            feats.append(x)
            labels.append(np.full(count_per_class, c, dtype=np.int64))
        feats = np.concatenate(feats)
        labels = np.concatenate(labels)
        order = rng.permutation(len(labels))
        tags = np.full(len(labels), tag, dtype=np.uint8)
        return feats[order], labels[order], tags

    xtr, ytr, str_ = draw(n_per_class, TRAIN)
    xte, yte, ste = draw(n_test_per_class, TEST)
    features = np.concatenate([xtr, xte]).astype(np.float32).astype(np.float64)
    labels = np.concatenate([ytr, yte])
    return LabeledDataset(features, labels.copy(), labels.copy(),
                          np.concatenate([str_, ste]), C)


def build_transition_matrix(kind: str, tau0: float, C: int,
                            pair_map: Optional[Sequence[int]] = None) -> TransitionMatrix:
    """Class-conditional label corruption matrix.

    symmetric: stay with 1-tau0, flip uniformly to the other C-1 classes.
    pair: stay with 1-tau0, flip to pair_map[i] with tau0 (default cyclic
    shift i -> (i+1) mod C).
    """
    if not 0.0 <= tau0 < 1.0:
        raise ConfigError(f"tau0 must lie in [0, 1), got {tau0}")
    if C < 2:
        raise ConfigError(f"need C >= 2, got {C}")
    if kind in ("symmetric", "sym"):
        T = np.full((C, C), tau0 / (C - 1))
        np.fill_diagonal(T, 1.0 - tau0)
        return TransitionMatrix(T, "symmetric", tau0)
    if kind == "pair":
        if pair_map is None:
            pair_map = [(i + 1) % C for i in range(C)]
        pair_map = list(pair_map)
        if sorted(pair_map) != list(range(C)):
            raise ConfigError("pair_map must be a permutation of [0, C)")
        if any(pair_map[i] == i for i in range(C)):
            raise ConfigError("pair_map must have no fixed points")
        T = np.zeros((C, C))
        np.fill_diagonal(T, 1.0 - tau0)
        for i in range(C):
            T[i, pair_map[i]] += tau0
        return TransitionMatrix(T, "pair", tau0)
    raise ConfigError(f"unknown noise kind {kind!r}; expected symmetric|pair")


def inject_label_noise(ds: LabeledDataset, tm: TransitionMatrix, seed: int) -> LabeledDataset:
    """Resample each train label from the transition row of its clean class."""
    if tm.C != ds.C:
        raise DimensionError(f"transition matrix C={tm.C} but dataset C={ds.C}")
    if ds.noise_applied:
        raise ConfigError("noise already applied to this dataset")
    rng = np.random.default_rng(seed)
    noisy = ds.clean_labels.copy()
    idx = ds.train_indices()
    if idx.size:
        cum = np.cumsum(tm.T, axis=1)
        u = rng.random(idx.size)
        rows = cum[ds.clean_labels[idx]]
        noisy[idx] = np.minimum((rows <= u[:, None]).sum(axis=1), ds.C - 1)
    return replace(ds, noisy_labels=noisy, noise_applied=True)


def inject_instance_noise(ds: LabeledDataset, tau0: float, seed: int,
                          rate_sd: float = 0.1) -> LabeledDataset:
    """Feature-dependent corruption.

    Each train sample gets a flip probability q_i drawn from a Normal
    (mean tau0, sd rate_sd) truncated to [0, 1]; if it flips, the target
    class is sampled from a softmax over the sample's projections onto
    per-class random directions, own class excluded.
    """
    if not 0.0 < tau0 < 1.0:
        raise ConfigError(f"tau0 must lie in (0, 1), got {tau0}")
    if ds.noise_applied:
        raise ConfigError("noise already applied to this dataset")
    rng = np.random.default_rng(seed)
    idx = ds.train_indices()
    n = idx.size
    noisy = ds.clean_labels.copy()
    if n == 0:
        return replace(ds, noisy_labels=noisy, noise_applied=True)

    # per-sample rates by rejection from the truncated Normal
    q = np.empty(n)
    pending = np.arange(n)
    while pending.size:
        draw = rng.normal(tau0, rate_sd, size=pending.size)
        ok = (draw >= 0.0) & (draw <= 1.0)
        q[pending[ok]] = draw[ok]
        pending = pending[~ok]

    w = rng.normal(size=(ds.C, ds.d))                    # per-class projections
    scores = ds.features[idx] @ w.T                      # (n, C)
    y = ds.clean_labels[idx]
    scores[np.arange(n), y] = -np.inf                    # never "flip" to itself
    scores -= scores.max(axis=1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=1, keepdims=True)

    flip = rng.random(n) < q
    u = rng.random(n)
    cum = np.cumsum(probs, axis=1)
    target = np.minimum((cum <= u[:, None]).sum(axis=1), ds.C - 1)
    noisy[idx[flip]] = target[flip]
    return replace(ds, noisy_labels=noisy, noise_applied=True)


def save_container(ds: LabeledDataset, path) -> None:
    header = {"n": ds.n, "d": ds.d, "C": ds.C, "dtype": "f32"}
    write_container(path, header, [
        ("features", ds.features),
        ("clean_labels", ds.clean_labels),
        ("noisy_labels", ds.noisy_labels),
        ("split", ds.split),
    ])


def load_container(path) -> LabeledDataset:
    header, arrays = read_container(path)
    required = {"features", "clean_labels", "noisy_labels", "split"}
    missing = required - arrays.keys()
    if missing:
        raise FormatError(f"container missing arrays: {sorted(missing)}")
    features = arrays["features"].astype(np.float64)
    if features.ndim != 2:
        raise FormatError("features array must be 2-D")
    if features.shape != (header.get("n"), header.get("d")):
        raise FormatError("features shape disagrees with header n/d")
    clean = arrays["clean_labels"].astype(np.int64)
    noisy = arrays["noisy_labels"].astype(np.int64)
    split = arrays["split"].astype(np.uint8)
    ds = LabeledDataset(features, clean, noisy, split, int(header["C"]),
                        noise_applied=bool(np.any(clean != noisy)))
    return ds
