"""Training objectives.

Two families feed the total objective:

* cross-view terms computed within one model — prediction guidance on
  confident weak views (pg), instance alignment between a sample's strong
  and weak embeddings (acl), and relation mimicry between the two views'
  similarity structures (vm);
* cross-model terms computed against a frozen peer — soft cross-entropy
  toward the peer's sharpened weak prediction, supervised contrastive
  alignment grouped by collaborative labels (cclrl), and cross-model
  relation mimicry (mm).

The total blends a per-sample confidence-weighted cross-entropy on the
observed labels with the two families weighted by the complementary
confidence mass, plus a prediction-diversity regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import EPSILON, Tensor, apply, onehot


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_simplex(arr: np.ndarray, what: str, atol: float = 1e-6) -> None:
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.size == 0:
        return
    if arr.min() < -1e-9:
        raise ContractError(f"{what} has negative entries")
    sums = arr.sum(axis=-1)
    if np.abs(sums - 1.0).max() > atol:
        raise ContractError(f"{what} rows must sum to 1 (max dev {np.abs(sums - 1).max():.2e})")


def _log_guarded(t: Tensor) -> Tensor:
    return apply("log", [apply("clamp_min", [t], {"min": EPSILON})])


def _row_sum(t: Tensor) -> Tensor:
    return apply("sum", [t], {"axis": t.ndim - 1})


@dataclass(frozen=True)
class ContrastiveDistribution:
    """Row-stochastic similarity distribution between two embedding sets."""

    q: Tensor                  # (N, N)
    log_q: Tensor              # (N, N), kept for numerically clean losses
    direction: str             # "s->w" | "w->s"
    scope: str                 # "within-model" | "cross-model"
    temperature: float


@dataclass
class LossBreakdown:
    """Scalar values of every term plus the blend that produced the total.

    cvl = pg + acl + vm; cml = cm_ce + cclrl + mm;
    total = ce + refurb_weight * (cvl + cml) + div.
    """

    total: float
    ce: float
    pg: float
    acl: float
    vm: float
    cclrl: float
    mm: float
    div: float
    cvl: float
    cml: float
    cm_ce: float
    refurb_weight: float


def sharpen(p, T: float) -> Tensor:
    """Temperature-sharpened distribution: p_i^(1/T), renormalized."""
    if T <= 0:
        raise ConfigError(f"sharpen temperature must be positive, got {T}")
    p = _as_tensor(p)
    _check_simplex(p.data, "sharpen input")
    scaled = apply("scalar_mul", [_log_guarded(p)], {"value": 1.0 / T})
    return apply("softmax_rows", [scaled])


def cross_entropy(p, target) -> Tensor:
    """Mean over rows of -sum(target * log p); target hard int[N] or soft [N,C]."""
    p = _as_tensor(p)
    if p.ndim != 2:
        raise ContractError("cross_entropy expects (N, C) predictions")
    n, c = p.shape
    if n == 0:
        raise ContractError("cross_entropy on an empty batch")
    soft = isinstance(target, Tensor) or np.asarray(target).ndim == 2
    if soft:
        t = _as_tensor(target)
        if t.shape != p.shape:
            raise ContractError(f"target shape {t.shape} != predictions {p.shape}")
        _check_simplex(t.data, "cross_entropy target")
    else:
        labels = np.asarray(target, dtype=np.int64)
        if labels.shape != (n,):
            raise ContractError("hard targets must be int[N]")
        if labels.min() < 0 or labels.max() >= c:
            raise ContractError("hard target outside [0, C)")
        t = Tensor(onehot(labels, c))
    picked = _row_sum(t * _log_guarded(p))
    return apply("scalar_mul", [picked.mean()], {"value": -1.0})


def per_sample_cross_entropy(p: Tensor, target: Tensor) -> Tensor:
    """(N,) vector of -sum(target * log p) per row, on the tape."""
    return apply("scalar_mul", [_row_sum(target * _log_guarded(p))], {"value": -1.0})


def rolr_loss(p_s, y_noisy, omega, pseudo) -> Tensor:
    """Confidence blend of observed-label CE and refurbished-label CE:
    mean_j of omega_j * CE_j(p_s, y_noisy) + (1 - omega_j) * CE_j(p_s, pseudo)."""
    p_s = _as_tensor(p_s)
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim != 1 or omega.shape[0] != p_s.shape[0]:
        raise ContractError("omega must be per-sample, length N")
    if omega.min() < 0.0 or omega.max() > 1.0:
        raise ContractError("omega entries must lie in [0, 1]")
    pseudo = _as_tensor(pseudo)
    _check_simplex(pseudo.data, "refurbished labels")
    y = Tensor(onehot(np.asarray(y_noisy, dtype=np.int64), p_s.shape[1]))
    ce_obs = per_sample_cross_entropy(p_s, y)
    ce_ref = per_sample_cross_entropy(p_s, pseudo)
    blended = Tensor(omega) * ce_obs + Tensor(1.0 - omega) * ce_ref
    return blended.mean()


def contrastive_distribution(anchors, candidates, tau: float,
                             direction: str = "s->w",
                             scope: str = "within-model") -> ContrastiveDistribution:
    """Row j: softmax over k of <anchor_j, candidate_k> / tau, embeddings
    L2-normalized first."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    a = apply("l2_normalize_rows", [_as_tensor(anchors)])
    c = apply("l2_normalize_rows", [_as_tensor(candidates)])
    if a.shape != c.shape or a.ndim != 2:
        raise ContractError("anchors and candidates must both be (N, d_e)")
    sims = apply("scalar_mul", [a @ c.T], {"value": 1.0 / tau})
    return ContrastiveDistribution(
        q=apply("softmax_rows", [sims]),
        log_q=apply("log_softmax_rows", [sims]),
        direction=direction, scope=scope, temperature=tau)


def _diag_mask(n: int) -> Tensor:
    return Tensor(np.eye(n))


def acl_loss(emb_s, emb_w, tau: float) -> Tensor:
    """Anchor each strong view to its own weak view: mean_j -log q^{s->w}_{jj}."""
    dist = contrastive_distribution(emb_s, emb_w, tau, "s->w", "within-model")
    n = dist.log_q.shape[0]
    diag = _row_sum(dist.log_q * _diag_mask(n))
    return apply("scalar_mul", [diag.mean()], {"value": -1.0})


def _kl_rows_mean(dist_p: ContrastiveDistribution,
                  dist_q: ContrastiveDistribution) -> Tensor:
    """Mean over rows of KL(p_j || q_j); both sides stay on the tape."""
    diff = dist_p.log_q - dist_q.log_q
    return _row_sum(dist_p.q * diff).mean()


def vm_loss(emb_s, emb_w, tau: float) -> Tensor:
    """Match the two views' similarity structures within one model."""
    sw = contrastive_distribution(emb_s, emb_w, tau, "s->w", "within-model")
    ws = contrastive_distribution(emb_w, emb_s, tau, "w->s", "within-model")
    return _kl_rows_mean(sw, ws)


def pg_loss(p_w, p_s, c: float, hard_target: bool = False) -> Tensor:
    """Soft CE toward confident weak predictions; below-threshold rows
    contribute zero. No gradient flows through the target."""
    if not 0.0 < c < 1.0:
        raise ConfigError(f"confidence threshold must lie in (0, 1), got {c}")
    p_w = _as_tensor(p_w)
    p_s = _as_tensor(p_s)
    if p_w.shape != p_s.shape:
        raise ContractError("pg_loss: view predictions must share a shape")
    n, num_classes = p_w.shape
    conf = p_w.data.max(axis=1)
    mask = (conf >= c).astype(np.float64)
    if hard_target:
        target = Tensor(onehot(p_w.data.argmax(axis=1), num_classes))
    else:
        target = Tensor(p_w.data.copy())          # detached soft target
    rows = per_sample_cross_entropy(p_s, target)
    return (Tensor(mask) * rows).mean()


def cclrl_loss(emb_s_m, emb_w_peer, labels_hard, tau: float) -> Tensor:
    """Supervised contrastive pull toward all peer weak views sharing the
    anchor's collaborative label: mean_j -log sum_{k: y'_k=y'_j} q_{jk}."""
    dist = contrastive_distribution(emb_s_m, emb_w_peer, tau, "s->w", "cross-model")
    labels = np.asarray(labels_hard, dtype=np.int64)
    n = dist.q.shape[0]
    if labels.shape != (n,):
        raise ContractError("labels_hard must be int[N]")
    positives = Tensor((labels[:, None] == labels[None, :]).astype(np.float64))
    pos_mass = _row_sum(dist.q * positives)
    return apply("scalar_mul", [_log_guarded(pos_mass).mean()], {"value": -1.0})


def mm_loss(emb_s_m, emb_w_peer, tau: float) -> Tensor:
    """Match similarity structure across models (strong anchors vs the
    peer's weak anchors)."""
    sw = contrastive_distribution(emb_s_m, emb_w_peer, tau, "s->w", "cross-model")
    ws = contrastive_distribution(emb_w_peer, emb_s_m, tau, "w->s", "cross-model")
    return _kl_rows_mean(sw, ws)


def div_loss(p_s) -> Tensor:
    """KL(uniform || batch-mean prediction): pushes average predictions
    toward using every class."""
    p_s = _as_tensor(p_s)
    if p_s.ndim != 2 or p_s.shape[0] == 0:
        raise ContractError("div_loss expects a nonempty (N, C) batch")
    num_classes = p_s.shape[1]
    pbar = apply("mean", [p_s], {"axis": 0})
    uniform = np.full(num_classes, 1.0 / num_classes)
    log_ratio = Tensor(np.log(uniform)) - _log_guarded(pbar)
    return apply("sum", [Tensor(uniform) * log_ratio])


@dataclass
class BatchContext:
    """Everything one model's training step needs for the total objective.

    Peer quantities come from a frozen snapshot of the other model and
    carry no gradients; omega and the collaborative labels were computed
    before the step and are constants here.
    """

    p_s: Tensor                # own strong-view probs (N, C)
    p_w: Tensor                # own weak-view probs (N, C)
    emb_s: Tensor              # own strong-view embeddings (N, d_e)
    emb_w: Tensor              # own weak-view embeddings (N, d_e)
    peer_emb_w: Tensor         # peer weak-view embeddings (constant)
    peer_p_w: Tensor           # peer weak-view probs (constant)
    y_noisy: np.ndarray        # observed labels int[N]
    omega: np.ndarray          # per-sample clean-label confidence [N]
    collab_hard: np.ndarray    # argmax of collaborative labels int[N]
    conf_threshold: float = 0.95
    sharpen_T: float = 0.5
    tau: float = 0.1
    pg_hard_target: bool = False


def total_loss(ctx: BatchContext) -> tuple[Tensor, LossBreakdown]:
    """Blend all terms; returns the differentiable scalar and its breakdown.

    total = mean_j(omega_j * CE_j(p_s, y_noisy))
          + mean_j((1 - omega_j) / 2) * (cvl + cml)
          + div
    with cvl = pg + acl + vm and cml = cm_ce + cclrl + mm.
    """
    omega = np.asarray(ctx.omega, dtype=np.float64)
    if omega.min() < 0.0 or omega.max() > 1.0:
        raise ContractError("omega entries must lie in [0, 1]")
    num_classes = ctx.p_s.shape[1]

    y = Tensor(onehot(np.asarray(ctx.y_noisy, dtype=np.int64), num_classes))
    ce = (Tensor(omega) * per_sample_cross_entropy(ctx.p_s, y)).mean()

    pg = pg_loss(ctx.p_w, ctx.p_s, ctx.conf_threshold, ctx.pg_hard_target)
    acl = acl_loss(ctx.emb_s, ctx.emb_w, ctx.tau)
    vm = vm_loss(ctx.emb_s, ctx.emb_w, ctx.tau)
    cvl = pg + acl + vm

    peer_target = sharpen(ctx.peer_p_w.detach(), ctx.sharpen_T).detach()
    cm_ce = cross_entropy(ctx.p_s, peer_target)
    cclrl = cclrl_loss(ctx.emb_s, ctx.peer_emb_w, ctx.collab_hard, ctx.tau)
    mm = mm_loss(ctx.emb_s, ctx.peer_emb_w, ctx.tau)
    cml = cm_ce + cclrl + mm

    div = div_loss(ctx.p_s)
    refurb_weight = float(((1.0 - omega) / 2.0).mean())
    total = ce + apply("scalar_mul", [cvl + cml], {"value": refurb_weight}) + div

    breakdown = LossBreakdown(
        total=total.item(), ce=ce.item(), pg=pg.item(), acl=acl.item(),
        vm=vm.item(), cclrl=cclrl.item(), mm=mm.item(), div=div.item(),
        cvl=cvl.item(), cml=cml.item(), cm_ce=cm_ce.item(),
        refurb_weight=refurb_weight)
    return total, breakdown
