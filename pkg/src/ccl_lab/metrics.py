"""Evaluation and diagnostic metrics.

Everything here is a pure function over frozen models or prediction dumps.
This module (together with the noise injectors' bookkeeping) is the only
place allowed to look at clean labels; training code never does.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, ContractError
from .losses import cclrl_loss
from .model import Model, ModelPair
from .refurbish import RefurbishedLabels
from .tensor import Tensor

logger = logging.getLogger(__name__)


def _as_ndarray(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _predict(model, features: np.ndarray) -> np.ndarray:
    return model.predict_probs(Tensor(features)).data


def _models_of(model_or_pair) -> list:
    if isinstance(model_or_pair, ModelPair):
        return list(model_or_pair.models)
    if isinstance(model_or_pair, (tuple, list)):
        return list(model_or_pair)
    return [model_or_pair]


def test_accuracy(model_or_pair, ds: LabeledDataset) -> float:
    """Fraction of test samples whose argmax prediction hits the clean label.

    A pair (or any sequence of models) is scored as an ensemble: class
    probabilities are averaged before the argmax."""
    idx = ds.test_indices()
    if idx.size == 0:
        raise ContractError("test_accuracy: empty test split")
    feats = ds.features[idx]
    models = _models_of(model_or_pair)
    probs = sum(_predict(m, feats) for m in models) / len(models)
    return float(np.mean(probs.argmax(axis=1) == ds.clean_labels[idx]))


def _sample_features(ds_sample) -> np.ndarray:
    if isinstance(ds_sample, LabeledDataset):
        return ds_sample.features[ds_sample.test_indices()]
    return _as_ndarray(ds_sample)


def m_embed_from_embeddings(emb0: np.ndarray, emb1: np.ndarray,
                            n_pairs: int, seed: int) -> float:
    """Mean cosine between cross-model embedding difference vectors.

    For each sampled pair of distinct rows (i, j), compares
    emb0[i]-emb0[j] against emb1[i]-emb1[j]. Pairs where either
    difference vanishes are skipped.
    """
    emb0 = _as_ndarray(emb0)
    emb1 = _as_ndarray(emb1)
    if emb0.shape[0] != emb1.shape[0]:
        raise ContractError("embedding sets must describe the same rows")
    n = emb0.shape[0]
    if n < 2:
        raise ContractError("need at least two rows to form a pair")
    if n_pairs < 1:
        raise ContractError("n_pairs must be positive")
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=n_pairs)
    j = rng.integers(0, n - 1, size=n_pairs)
    j = j + (j >= i)  # uniform over ordered pairs with i != j
    d0 = emb0[i] - emb0[j]
    d1 = emb1[i] - emb1[j]
    n0 = np.linalg.norm(d0, axis=1)
    n1 = np.linalg.norm(d1, axis=1)
    valid = (n0 > 0.0) & (n1 > 0.0)
    skipped = int(n_pairs - valid.sum())
    if skipped:
        logger.warning("m_embed: skipped %d degenerate pair(s)", skipped)
    if not valid.any():
        raise ContractError("m_embed: every sampled pair was degenerate")
    cos = (d0[valid] * d1[valid]).sum(axis=1) / (n0[valid] * n1[valid])
    return float(cos.mean())


def m_embed(ds_sample, model0: Model, model1: Model,
            n_pairs: int, seed: int) -> float:
    """Cross-model semantic consistency of embeddings, in [-1, 1]."""
    feats = _sample_features(ds_sample)
    emb0 = model0.encode(Tensor(feats)).data
    emb1 = model1.encode(Tensor(feats)).data
    return m_embed_from_embeddings(emb0, emb1, n_pairs, seed)


def m_logit(logits0, logits1) -> float:
    """Mean per-class 1-D Wasserstein-1 distance between two logit dumps.

    With equal sample counts W1 reduces to the mean absolute difference of
    the sorted per-class values."""
    l0 = _as_ndarray(logits0)
    l1 = _as_ndarray(logits1)
    if l0.ndim != 2 or l1.ndim != 2:
        raise ContractError("logit sets must be (n, C) matrices")
    if l0.shape != l1.shape:
        raise ContractError(f"logit shapes differ: {l0.shape} vs {l1.shape}")
    s0 = np.sort(l0, axis=0)
    s1 = np.sort(l1, axis=0)
    return float(np.abs(s0 - s1).mean())


def class_variance_entropy(probs) -> float:
    """Entropy (nats) of the normalized per-class prediction variances.

    v_c is the variance of probs[:, c] over samples; the vector v is
    normalized to a distribution and its Shannon entropy returned. Higher
    values mean prediction variability is spread evenly over classes.
    Degenerate all-constant predictions score log C by convention.
    """
    p = _as_ndarray(probs)
    if p.ndim != 2:
        raise ContractError("probs must be a (n, C) matrix")
    n, c = p.shape
    if n < 2:
        raise ContractError("variance needs at least two samples")
    v = p.var(axis=0)
    total = v.sum()
    if total == 0.0:
        logger.info("class_variance_entropy: zero variance everywhere, "
                    "returning log C")
        return float(math.log(c))
    w = v / total
    nz = w > 0.0
    return float(-(w[nz] * np.log(w[nz])).sum())


@dataclass(frozen=True)
class Taxonomy:
    """Rooted class tree: every class name is a leaf.

    `children` maps an internal node to its children; `classes` orders the
    leaves so integer predictions index into the tree.
    """

    root: str
    children: dict[str, tuple[str, ...]]
    classes: tuple[str, ...]

    def __post_init__(self):
        seen_child: set[str] = set()
        for parent, kids in self.children.items():
            if not kids:
                raise ConfigError(f"taxonomy node {parent!r} lists no children")
            for kid in kids:
                if kid in seen_child:
                    raise ConfigError(f"taxonomy node {kid!r} has two parents")
                seen_child.add(kid)
        if self.root in seen_child:
            raise ConfigError("taxonomy root cannot be a child")
        # reachability doubles as the cycle check
        reached = {self.root}
        frontier = [self.root]
        while frontier:
            node = frontier.pop()
            for kid in self.children.get(node, ()):
                if kid in reached:
                    raise ConfigError(f"taxonomy is not a tree near {kid!r}")
                reached.add(kid)
                frontier.append(kid)
        for parent in self.children:
            if parent not in reached:
                raise ConfigError(f"taxonomy node {parent!r} unreachable from root")
        leaves = {node for node in reached if node not in self.children}
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("duplicate class names")
        for name in self.classes:
            if name not in leaves:
                raise ConfigError(f"class {name!r} is not a leaf of the taxonomy")

    @property
    def parent(self) -> dict[str, str]:
        out = {}
        for p, kids in self.children.items():
            for kid in kids:
                out[kid] = p
        return out

    def depth(self, name: str) -> int:
        parent = self.parent
        d = 0
        while name != self.root:
            name = parent[name]
            d += 1
        return d

    @classmethod
    def from_mapping(cls, obj: dict, classes: Sequence[str] | None = None) -> "Taxonomy":
        allowed = {"root", "children", "classes"}
        unknown = set(obj) - allowed
        if unknown:
            raise ConfigError(f"unknown taxonomy keys: {sorted(unknown)}")
        if "root" not in obj or "children" not in obj:
            raise ConfigError("taxonomy needs 'root' and 'children'")
        children = {str(k): tuple(str(c) for c in v)
                    for k, v in obj["children"].items()}
        if classes is None:
            classes = obj.get("classes")
        if classes is None:
            classes = _integer_leaf_order(str(obj["root"]), children)
        return cls(root=str(obj["root"]), children=children,
                   classes=tuple(str(c) for c in classes))

    @classmethod
    def from_file(cls, path, classes: Sequence[str] | None = None) -> "Taxonomy":
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls.from_mapping(obj, classes)


def _integer_leaf_order(root: str, children: dict[str, tuple[str, ...]]) -> tuple[str, ...]:
    """Class order for taxonomies whose leaves are integer strings."""
    nodes = {root}
    for kids in children.values():
        nodes.update(kids)
    leaves = [n for n in nodes if n not in children]
    try:
        order = sorted(leaves, key=int)
    except ValueError:
        raise ConfigError("taxonomy leaves are not integers; "
                          "supply an explicit class order") from None
    if [int(n) for n in order] != list(range(len(order))):
        raise ConfigError("integer leaves must be exactly 0..C-1")
    return tuple(order)


def lca_distance(taxonomy: Taxonomy, top1, top2) -> float:
    """Mean edge count from the deeper predicted leaf up to the lowest
    common ancestor of (top1_i, top2_i). 0 means the two predictions
    always coincide."""
    a = np.asarray(top1, dtype=np.int64)
    b = np.asarray(top2, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("top1/top2 must be equal-length vectors")
    C = len(taxonomy.classes)
    for name, arr in (("top1", a), ("top2", b)):
        if arr.size and (arr.min() < 0 or arr.max() >= C):
            raise ConfigError(f"{name} contains a class absent from the taxonomy")
    if a.size == 0:
        raise ContractError("no samples")
    parent = taxonomy.parent
    chains: list[dict[str, int]] = []
    for name in taxonomy.classes:
        chain = {}
        node, d = name, taxonomy.depth(name)
        while True:
            chain[node] = d
            if node == taxonomy.root:
                break
            node, d = parent[node], d - 1
        chains.append(chain)

    cache: dict[tuple[int, int], int] = {}

    def dist(i: int, j: int) -> int:
        if i == j:
            return 0
        key = (min(i, j), max(i, j))
        if key not in cache:
            ci, cj = chains[i], chains[j]
            node = taxonomy.classes[j]
            while node not in ci:
                node = parent[node]
            cache[key] = max(chains[i][taxonomy.classes[i]],
                             cj[taxonomy.classes[j]]) - ci[node]
        return cache[key]

    return float(np.mean([dist(int(x), int(y)) for x, y in zip(a, b)]))


def label_recovery_rate(refurbished, ds: LabeledDataset) -> float | None:
    """On train samples whose observed label is wrong: how often the hard
    refurbished label equals the clean one. None when nothing is corrupted.

    `refurbished` is a RefurbishedLabels or a hard-label vector aligned
    with ds.train_indices() order."""
    y_hard = refurbished.y_hard if isinstance(refurbished, RefurbishedLabels) \
        else np.asarray(refurbished, dtype=np.int64)
    idx = ds.train_indices()
    if y_hard.shape[0] != idx.size:
        raise ContractError("refurbished labels must align with the train split")
    clean = ds.clean_labels[idx]
    noisy = ds.noisy_labels[idx]
    corrupted = noisy != clean
    if not corrupted.any():
        return None
    return float(np.mean(y_hard[corrupted] == clean[corrupted]))


def confidence_split_means(omega, ds: LabeledDataset) -> tuple[float | None, float | None]:
    """Mean label confidence over (actually clean, actually corrupted)
    train samples; a side with no members reports None."""
    w = np.asarray(omega, dtype=np.float64)
    idx = ds.train_indices()
    if w.shape[0] != idx.size:
        raise ContractError("omega must align with the train split")
    clean_mask = ds.noisy_labels[idx] == ds.clean_labels[idx]
    clean = float(w[clean_mask].mean()) if clean_mask.any() else None
    corrupted = float(w[~clean_mask].mean()) if (~clean_mask).any() else None
    return clean, corrupted


class MiBound(NamedTuple):
    i_plugin: float   # plug-in mutual information of the sampled joint
    bound: float      # log N - mean contrastive loss
    holds: bool       # i_plugin >= bound - 0.02


def mi_bound_check(K: int, N: int, tau: float, n_batches: int, seed: int) -> MiBound:
    """Check the information bound on a discrete toy.

    A latent symbol is uniform over K values and both models embed it as
    the same one-hot vector. Batches hold N distinct symbols, so each
    anchor's only positive is itself and the contrastive loss lower-bounds
    the (known) mutual information: I >= log N - E[loss]. The plug-in MI
    is estimated from the empirical joint over all sampled batches.
    """
    if N < 2:
        raise ConfigError(f"N must be at least 2, got {N}")
    if K < N:
        raise ConfigError(f"K must be >= N, got K={K} N={N}")
    if n_batches < 1:
        raise ConfigError("n_batches must be positive")
    if tau <= 0:
        raise ConfigError("tau must be positive")
    rng = np.random.default_rng(seed)
    scores = rng.random((n_batches, K))
    latents = np.argpartition(scores, N - 1, axis=1)[:, :N] if N < K \
        else np.tile(np.arange(K), (n_batches, 1))

    counts = np.bincount(latents.ravel(), minlength=K).astype(np.float64)
    marginal = counts / counts.sum()
    joint = np.diag(marginal)  # the two embeddings always agree
    outer = np.outer(marginal, marginal)
    nz = joint > 0.0
    i_plugin = float((joint[nz] * np.log(joint[nz] / outer[nz])).sum())

    eye = np.eye(K, dtype=np.float64)
    total = 0.0
    for row in latents:
        emb = eye[row]
        total += cclrl_loss(emb, emb, row, tau).item()
    mean_loss = total / n_batches

    bound = float(math.log(N) - mean_loss)
    return MiBound(i_plugin=i_plugin, bound=bound, holds=i_plugin >= bound - 0.02)
