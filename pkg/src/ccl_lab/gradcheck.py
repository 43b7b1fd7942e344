"""Finite-difference validation for every loss family.

Each check parameterizes the loss through softmax or raw embeddings so the
perturbed point always satisfies the loss's preconditions (probabilities
stay on the simplex, embeddings stay away from zero norm). Packed inputs
carry several logical arrays in one matrix: columns are split back out
with transpose + select_rows so the whole thing stays on the tape.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .losses import (
    BatchContext,
    acl_loss,
    cclrl_loss,
    cross_entropy,
    div_loss,
    mm_loss,
    pg_loss,
    rolr_loss,
    sharpen,
    total_loss,
    vm_loss,
)
from .tensor import Tensor, apply, finite_difference_check


def _cols(x: Tensor, lo: int, hi: int) -> Tensor:
    """Differentiable column slice [lo, hi) of a 2-D tensor."""
    picked = apply("select_rows", [x.T], {"indices": np.arange(lo, hi)})
    return picked.T


def _softmax(z: Tensor) -> Tensor:
    return apply("softmax_rows", [z])


def _simplex_rows(rng: np.random.Generator, n: int, c: int) -> np.ndarray:
    raw = rng.dirichlet(np.ones(c), size=n)
    return np.clip(raw, 1e-6, None) / np.clip(raw, 1e-6, None).sum(axis=1, keepdims=True)


def _loss_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, Tensor]]:
    """Map family name -> (fn, point) for one random trial."""
    n, c, d_e = 3, 4, 5
    tau = 0.5

    target = Tensor(_simplex_rows(rng, n, c))
    pseudo = Tensor(_simplex_rows(rng, n, c))
    y = rng.integers(0, c, size=n)
    omega = rng.uniform(0.05, 0.95, size=n)
    labels_mixed = np.array([0, 1, 0])

    # weak predictions with some rows confidently above the pg threshold
    p_w = _simplex_rows(rng, n, c)
    p_w[0] = np.eye(c)[0] * 0.97 + 0.03 / c
    p_w /= p_w.sum(axis=1, keepdims=True)
    p_w_t = Tensor(p_w)

    z_point = Tensor(rng.normal(size=(n, c)))
    e_point = Tensor(rng.normal(size=(2 * n, d_e)))

    def packed_pair(fn2):
        def fn(e):
            return fn2(apply("select_rows", [e], {"indices": np.arange(n)}),
                       apply("select_rows", [e], {"indices": np.arange(n, 2 * n)}))
        return fn

    peer_emb_w = Tensor(rng.normal(size=(n, d_e)))
    peer_p_w = Tensor(_simplex_rows(rng, n, c))
    collab = rng.integers(0, c, size=n)
    # p_w feeds only stop-gradient paths (pg mask and target), so the FD
    # point excludes it: perturbing it would move the frozen target, which
    # the analytic gradient excludes by design. Its zero-gradient property
    # has its own dedicated test.
    width = 2 * d_e + c
    x_point = Tensor(rng.normal(size=(n, width)))

    def total_fn(x):
        emb_s = _cols(x, 0, d_e)
        emb_w = _cols(x, d_e, 2 * d_e)
        p_s = _softmax(_cols(x, 2 * d_e, width))
        ctx = BatchContext(
            p_s=p_s, p_w=p_w_t, emb_s=emb_s, emb_w=emb_w,
            peer_emb_w=peer_emb_w, peer_p_w=peer_p_w,
            y_noisy=y, omega=omega, collab_hard=collab,
            conf_threshold=0.3, sharpen_T=0.5, tau=tau)
        return total_loss(ctx)[0]

    return {
        "sharpen_ce": (lambda z: cross_entropy(sharpen(_softmax(z), 0.5), target),
                       z_point),
        "cross_entropy": (lambda z: cross_entropy(_softmax(z), target), z_point),
        "rolr": (lambda z: rolr_loss(_softmax(z), y, omega, pseudo), z_point),
        "pg": (lambda z: pg_loss(p_w_t, _softmax(z), 0.7), z_point),
        "div": (lambda z: div_loss(_softmax(z)), z_point),
        "acl": (packed_pair(lambda a, b: acl_loss(a, b, tau)), e_point),
        "vm": (packed_pair(lambda a, b: vm_loss(a, b, tau)), e_point),
        "cclrl": (packed_pair(lambda a, b: cclrl_loss(a, b, labels_mixed, tau)),
                  e_point),
        "mm": (packed_pair(lambda a, b: mm_loss(a, b, tau)), e_point),
        "total": (total_fn, x_point),
    }


def run_loss_gradchecks(n_points: int = 50, tol: float = 1e-4,
                        seed: int = 0) -> dict[str, dict]:
    """FD-check every loss family at n_points random points.

    Returns {family: {"max_error": float, "passed": bool, "points": int,
    "seconds": float}}.
    """
    out: dict[str, dict] = {}
    families = list(_loss_cases(np.random.default_rng(0)).keys())
    for family in families:
        worst = 0.0
        t0 = time.perf_counter()
        for k in range(n_points):
            rng = np.random.default_rng(seed * 100003 + k)
            fn, point = _loss_cases(rng)[family]
            err = finite_difference_check(fn, point, eps=1e-5)
            worst = max(worst, err)
        out[family] = {"max_error": worst, "passed": worst <= tol,
                       "points": n_points,
                       "seconds": time.perf_counter() - t0}
    return out
