"""Per-sample confidence estimation and label refurbishment.

Each model's per-sample training losses under the *other* model are fit
with a 1-D two-component Gaussian mixture; the posterior of the low-mean
component is that sample's probability of carrying a clean label (omega).
Omega then blends the observed one-hot label with the peer's (sharpened)
prediction into collaborative labels, and the two models' averaged
predictions give the refurbishment target used by the confidence-blend
baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TrainView
from .errors import ConfigError, ContractError, DegenerateFitError
from .losses import sharpen
from .model import Model
from .tensor import Tensor, onehot

_VAR_FLOOR = 1e-6


@dataclass
class GmmParams:
    """Two-component 1-D mixture, ordered so mean0 <= mean1."""

    mean0: float
    mean1: float
    var0: float
    var1: float
    weight0: float
    weight1: float
    log_likelihood_trace: list[float]


@dataclass(frozen=True)
class RefurbishedLabels:
    y_soft: np.ndarray   # (n, C) rows on simplex
    y_hard: np.ndarray   # (n,) argmax of y_soft


def per_sample_losses(peer_model: Model, view_features: np.ndarray,
                      labels: np.ndarray) -> np.ndarray:
    """-log p_label under the peer for every row of view_features."""
    probs = peer_model.predict_probs(Tensor(view_features)).data
    n = probs.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(n), labels]
    return -np.log(np.clip(picked, 1e-12, None))


def _normal_pdf(x: np.ndarray, mean: float, var: float) -> np.ndarray:
    return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def gmm_fit_1d(losses: np.ndarray, max_iters: int = 100, tol: float = 1e-6,
               seed: int | None = None) -> GmmParams:
    """EM for a two-component 1-D GMM.

    Means start at the 10th and 90th percentiles (deterministic, so `seed`
    is accepted for interface stability but unused); variances are
    floored; iteration stops when the log-likelihood gain drops below tol
    (a decrease — possible only through floor clipping — reverts to the
    previous parameters and stops).
    """
    x = np.asarray(losses, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ContractError("need at least two 1-D loss values")
    if not np.all(np.isfinite(x)):
        raise ContractError("losses must be finite")
    if np.ptp(x) == 0.0:
        raise DegenerateFitError("all losses identical; mixture cannot separate")

    mu = np.array([np.percentile(x, 10), np.percentile(x, 90)])
    overall_var = max(x.var(), _VAR_FLOOR)
    var = np.array([overall_var, overall_var])
    pi = np.array([0.5, 0.5])

    def log_likelihood():
        dens = pi[0] * _normal_pdf(x, mu[0], var[0]) + pi[1] * _normal_pdf(x, mu[1], var[1])
        return float(np.log(np.clip(dens, 1e-300, None)).sum())

    trace = [log_likelihood()]
    for _ in range(max_iters):
        prev = (mu.copy(), var.copy(), pi.copy())
        # E step
        d0 = pi[0] * _normal_pdf(x, mu[0], var[0])
        d1 = pi[1] * _normal_pdf(x, mu[1], var[1])
        total = np.clip(d0 + d1, 1e-300, None)
        r0 = d0 / total
        r1 = 1.0 - r0
        # M step
        n0, n1 = r0.sum(), r1.sum()
        if n0 < 1e-12 or n1 < 1e-12:
            break   # one component starved; keep previous parameters
        mu = np.array([(r0 * x).sum() / n0, (r1 * x).sum() / n1])
        var = np.array([
            max((r0 * (x - mu[0]) ** 2).sum() / n0, _VAR_FLOOR),
            max((r1 * (x - mu[1]) ** 2).sum() / n1, _VAR_FLOOR),
        ])
        pi = np.array([n0, n1]) / x.size
        ll = log_likelihood()
        if ll < trace[-1]:
            mu, var, pi = prev
            break
        trace.append(ll)
        if ll - trace[-2] < tol:
            break

    if mu[0] > mu[1]:
        mu, var, pi = mu[::-1], var[::-1], pi[::-1]
    return GmmParams(float(mu[0]), float(mu[1]), float(var[0]), float(var[1]),
                     float(pi[0]), float(pi[1]), trace)


def confidence(params: GmmParams, losses: np.ndarray) -> np.ndarray:
    """Posterior of the low-mean component for each loss value.

    Computed in log space so far-tail losses keep the correct limit
    instead of underflowing both densities to zero.
    """
    x = np.asarray(losses, dtype=np.float64)

    def log_dens(w, mean, var):
        return (np.log(max(w, 1e-300)) - 0.5 * np.log(2.0 * np.pi * var)
                - 0.5 * (x - mean) ** 2 / var)

    gap = log_dens(params.weight1, params.mean1, params.var1) \
        - log_dens(params.weight0, params.mean0, params.var0)
    omega = 1.0 / (1.0 + np.exp(np.clip(gap, -700.0, 700.0)))
    return np.clip(omega, 0.0, 1.0)


def estimate_confidence(peer_model: Model, view: TrainView,
                        features: np.ndarray | None = None) -> tuple[np.ndarray, GmmParams | None]:
    """Losses under the peer -> GMM -> omega; degenerate fits fall back to
    a flat 0.5. `features` overrides the view's raw features (e.g. a weak
    augmentation of them)."""
    feats = view.features if features is None else features
    losses = per_sample_losses(peer_model, feats, view.labels)
    try:
        params = gmm_fit_1d(losses)
    except DegenerateFitError:
        return np.full(view.n, 0.5), None
    return confidence(params, losses), params


def collaborative_labels(omega: np.ndarray, y_noisy: np.ndarray,
                         p_w_peer: np.ndarray, T: float,
                         num_classes: int, sharpen_peer: bool = True) -> RefurbishedLabels:
    """Blend observed labels with the peer's prediction, per sample:
    y' = omega * onehot(y) + (1 - omega) * sharpen(peer, T)."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega.min() < 0.0 or omega.max() > 1.0:
        raise ContractError("omega entries must lie in [0, 1]")
    y_hot = onehot(np.asarray(y_noisy, dtype=np.int64), num_classes)
    peer = np.asarray(p_w_peer, dtype=np.float64)
    if peer.shape != y_hot.shape:
        raise ContractError(f"peer predictions {peer.shape} vs labels {y_hot.shape}")
    target = sharpen(Tensor(peer), T).data if sharpen_peer else peer
    y_soft = omega[:, None] * y_hot + (1.0 - omega[:, None]) * target
    y_soft = y_soft / y_soft.sum(axis=1, keepdims=True)
    return RefurbishedLabels(y_soft=y_soft, y_hard=y_soft.argmax(axis=1))


def rolr_pseudo_labels(p_w_0: np.ndarray, p_w_1: np.ndarray, T: float) -> np.ndarray:
    """Sharpened two-model average: sharpen((p0 + p1) / 2, T)."""
    p0 = np.asarray(p_w_0, dtype=np.float64)
    p1 = np.asarray(p_w_1, dtype=np.float64)
    if p0.shape != p1.shape:
        raise ContractError("model predictions must share a shape")
    return sharpen(Tensor((p0 + p1) / 2.0), T).data
