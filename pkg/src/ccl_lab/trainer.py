"""Training loops: warm-up, confidence-guided co-training, and baselines.

Each epoch of the collaborative method snapshots both models first, then
trains each one in turn against the *other's* frozen snapshot: the peer
scores every training sample, a two-component mixture over those losses
yields per-sample label confidence, and minibatches optimize the blended
objective on weak/strong views. The refurbish-only loop (same confidence,
no consistency terms) and a plain supervised loop serve as baselines.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .augment import AugmentPolicy, default_policies, make_views
from .config import ExperimentConfig, expand_seeds, mix64
from .data import (LabeledDataset, TrainView, build_transition_matrix,
                   gen_blobs, inject_instance_noise, inject_label_noise,
                   load_container)
from .errors import ConfigError, ContractError
from .losses import (BatchContext, LossBreakdown, cross_entropy, rolr_loss,
                     total_loss)
from .metrics import (class_variance_entropy, confidence_split_means,
                      label_recovery_rate, m_embed, m_logit, test_accuracy)
from .model import AdamState, Model, ModelPair, adam_step, init_pair
from .refurbish import (collaborative_labels, estimate_confidence,
                        rolr_pseudo_labels)
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Training-loop knobs; dataset and noise settings live upstream."""

    method: str = "ccl"
    epochs: int = 60
    warmup_epochs: int = 10
    batch_size: int = 128
    lr: float = 0.001
    conf_threshold: float = 0.95      # c: weak-view confidence gate
    sharpen_temp: float = 0.5         # T: sharpening temperature
    tau: float = 0.1                  # contrastive temperature
    pg_hard_target: bool = False
    eval_every: int = 1
    hidden_dims: tuple = (128, 64)
    seed_shuffle: int = 11
    seed_augment: int = 12
    weak_policy: AugmentPolicy | None = None    # None: scaled to the data
    strong_policy: AugmentPolicy | None = None

    def __post_init__(self):
        if self.method not in ("ccl", "rolr", "ce"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs cannot exceed epochs")
        if not 0.0 < self.conf_threshold < 1.0:
            raise ConfigError(f"c must lie in (0, 1), got {self.conf_threshold}")
        if self.sharpen_temp <= 0 or self.tau <= 0:
            raise ConfigError("temperatures must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be at least 1")


@dataclass
class EpochRecord:
    """One epoch's losses, accuracy, and refurbishment diagnostics."""

    epoch: int
    phase: str                        # "warmup" | "main"
    method: str
    loss0: LossBreakdown | None = None
    loss1: LossBreakdown | None = None
    acc0: float | None = None
    acc1: float | None = None
    acc_ensemble: float | None = None
    label_recovery: float | None = None
    omega_clean_mean: float | None = None
    omega_corrupted_mean: float | None = None
    variance_entropy: float | None = None
    wall_time: float = 0.0
    rng_checkpoint: str = ""

    def to_dict(self) -> dict:
        out = asdict(self)
        out["loss0"] = asdict(self.loss0) if self.loss0 else None
        out["loss1"] = asdict(self.loss1) if self.loss1 else None
        return out


def _policies(cfg: TrainConfig, view: TrainView) -> tuple[AugmentPolicy, AugmentPolicy]:
    if cfg.weak_policy is not None and cfg.strong_policy is not None:
        return cfg.weak_policy, cfg.strong_policy
    return default_policies(float(view.features.std()))


def _batches(n: int, batch_size: int, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _ce_breakdown(value: float) -> LossBreakdown:
    """Vanilla epochs carry only a supervised term."""
    return LossBreakdown(total=value, ce=value, pg=0.0, acl=0.0, vm=0.0,
                         cclrl=0.0, mm=0.0, div=0.0, cvl=0.0, cml=0.0,
                         cm_ce=0.0, refurb_weight=0.0)


def _mean_breakdown(sums: dict[str, float], count: int) -> LossBreakdown:
    return LossBreakdown(**{k: v / count for k, v in sums.items()})


def _accumulate(sums: dict[str, float], bd: LossBreakdown, weight: int) -> None:
    for k, v in asdict(bd).items():
        sums[k] = sums.get(k, 0.0) + v * weight


def _vanilla_pass(model: Model, state, view: TrainView, cfg: TrainConfig,
                  epoch: int, m: int) -> float:
    """One shuffled pass of plain cross-entropy on observed labels."""
    total, count = 0.0, 0
    for idx in _batches(view.n, cfg.batch_size, mix64(cfg.seed_shuffle, epoch, m)):
        x = view.feature_tensor(idx)
        model.zero_grad()
        loss = cross_entropy(model.predict_probs(x), view.labels[idx])
        loss.backward()
        adam_step(state, model.parameters())
        total += loss.item() * idx.size
        count += idx.size
    return total / count


def _phase(cfg: TrainConfig, epoch: int) -> str:
    return "warmup" if epoch < cfg.warmup_epochs else "main"


def _evaluate(rec: EpochRecord, pair: ModelPair, ds: LabeledDataset,
              cfg: TrainConfig, epoch: int) -> None:
    if epoch % cfg.eval_every != 0 and epoch != cfg.epochs - 1:
        return
    m0, m1 = pair.models
    rec.acc0 = test_accuracy(m0, ds)
    rec.acc1 = test_accuracy(m1, ds)
    rec.acc_ensemble = test_accuracy(pair, ds)
    feats = Tensor(ds.features[ds.test_indices()])
    probs = (m0.predict_probs(feats).data + m1.predict_probs(feats).data) / 2.0
    rec.variance_entropy = class_variance_entropy(probs)


def _finish(rec: EpochRecord, cfg: TrainConfig, epoch: int, t0: float) -> EpochRecord:
    rec.wall_time = time.perf_counter() - t0
    rec.rng_checkpoint = f"{mix64(cfg.seed_shuffle, epoch):016x}"
    return rec


def warmup(pair: ModelPair, ds: LabeledDataset, W: int,
           cfg: TrainConfig | None = None, record_cb=None) -> ModelPair:
    """W epochs of vanilla cross-entropy on observed labels for both models;
    no refurbishment. W=0 leaves the pair untouched."""
    if W < 0:
        raise ConfigError("warm-up length must be nonnegative")
    cfg = cfg if cfg is not None else TrainConfig()
    for epoch in range(W):
        rec = _vanilla_epoch(pair, ds, cfg, epoch)
        if record_cb:
            record_cb(rec)
    return pair


def _vanilla_epoch(pair: ModelPair, ds: LabeledDataset, cfg: TrainConfig,
                   epoch: int) -> EpochRecord:
    t0 = time.perf_counter()
    view = TrainView(ds)
    ce0 = _vanilla_pass(pair.models[0], pair.optimizer_states[0], view, cfg, epoch, 0)
    ce1 = _vanilla_pass(pair.models[1], pair.optimizer_states[1], view, cfg, epoch, 1)
    rec = EpochRecord(epoch=epoch, phase=_phase(cfg, epoch), method=cfg.method,
                      loss0=_ce_breakdown(ce0), loss1=_ce_breakdown(ce1))
    _evaluate(rec, pair, ds, cfg, epoch)
    return _finish(rec, cfg, epoch, t0)


def train_epoch_ce(model: Model, ds: LabeledDataset, cfg: TrainConfig,
                   epoch: int, model_index: int = 0, state=None) -> EpochRecord:
    """Vanilla supervised epoch for a single model."""
    t0 = time.perf_counter()
    view = TrainView(ds)
    if state is None:
        state = AdamState(lr=cfg.lr)
    ce = _vanilla_pass(model, state, view, cfg, epoch, model_index)
    rec = EpochRecord(epoch=epoch, phase=_phase(cfg, epoch), method="ce")
    if model_index == 0:
        rec.loss0 = _ce_breakdown(ce)
    else:
        rec.loss1 = _ce_breakdown(ce)
    acc = test_accuracy(model, ds)
    if model_index == 0:
        rec.acc0 = acc
    else:
        rec.acc1 = acc
    return _finish(rec, cfg, epoch, t0)


def _refurb_diagnostics(rec: EpochRecord, snaps, omegas, view: TrainView,
                        ds: LabeledDataset, cfg: TrainConfig,
                        pseudo_mode: bool) -> None:
    """Full-train-set refurbishment quality, averaged over both models'
    perspectives. Clean labels are consulted only through metrics helpers."""
    plain = view.feature_tensor()
    p_snap = [s.predict_probs(plain).data for s in snaps]
    pseudo = rolr_pseudo_labels(p_snap[0], p_snap[1], cfg.sharpen_temp) \
        if pseudo_mode else None
    rates = []
    for m in (0, 1):
        if pseudo_mode:
            collab = collaborative_labels(omegas[m], view.labels, pseudo,
                                          cfg.sharpen_temp, view.C,
                                          sharpen_peer=False)
        else:
            collab = collaborative_labels(omegas[m], view.labels, p_snap[1 - m],
                                          cfg.sharpen_temp, view.C)
        rate = label_recovery_rate(collab.y_hard, ds)
        if rate is not None:
            rates.append(rate)
    rec.label_recovery = float(np.mean(rates)) if rates else None
    omega_avg = (omegas[0] + omegas[1]) / 2.0
    rec.omega_clean_mean, rec.omega_corrupted_mean = \
        confidence_split_means(omega_avg, ds)


def train_epoch_ccl(pair: ModelPair, ds: LabeledDataset, cfg: TrainConfig,
                    epoch: int, order: tuple = (0, 1)) -> EpochRecord:
    """One collaborative epoch: each model trains a full shuffled pass
    against the other's pre-epoch snapshot.

    Targets never depend on parameters updated this epoch, so `order` is
    immaterial to the result (it exists for exactly that assertion).
    """
    if epoch < cfg.warmup_epochs:
        raise ContractError("collaborative epochs start after warm-up")
    t0 = time.perf_counter()
    view = TrainView(ds)
    weak, strong = _policies(cfg, view)
    snaps = (pair.models[0].snapshot(), pair.models[1].snapshot())
    breakdowns: list = [None, None]
    omegas: list = [None, None]
    for m in order:
        peer = snaps[1 - m]
        omega, params = estimate_confidence(peer, view)
        if params is None:
            logger.warning("epoch %d model %d: degenerate loss mixture; "
                           "confidence fixed at 0.5", epoch, m)
        omegas[m] = omega
        model, state = pair.models[m], pair.optimizer_states[m]
        sums: dict[str, float] = {}
        count = 0
        for b, idx in enumerate(_batches(view.n, cfg.batch_size,
                                         mix64(cfg.seed_shuffle, epoch, m))):
            xw, xs = make_views(view.features[idx], weak, strong,
                                mix64(cfg.seed_augment, epoch, m, b))
            tw, ts = Tensor(xw), Tensor(xs)
            emb_s = model.encode(ts)
            p_s = model.classify(emb_s)
            emb_w = model.encode(tw)
            p_w = model.classify(emb_w)
            peer_emb_w = peer.encode(tw)
            peer_p_w = peer.classify(peer_emb_w)
            y = view.labels[idx]
            om = omega[idx]
            collab = collaborative_labels(om, y, peer_p_w.data,
                                          cfg.sharpen_temp, view.C)
            ctx = BatchContext(p_s=p_s, p_w=p_w, emb_s=emb_s, emb_w=emb_w,
                               peer_emb_w=peer_emb_w, peer_p_w=peer_p_w,
                               y_noisy=y, omega=om, collab_hard=collab.y_hard,
                               conf_threshold=cfg.conf_threshold,
                               sharpen_T=cfg.sharpen_temp, tau=cfg.tau,
                               pg_hard_target=cfg.pg_hard_target)
            model.zero_grad()
            loss, bd = total_loss(ctx)
            loss.backward()
            adam_step(state, model.parameters())
            _accumulate(sums, bd, idx.size)
            count += idx.size
        breakdowns[m] = _mean_breakdown(sums, count)
    rec = EpochRecord(epoch=epoch, phase="main", method=cfg.method,
                      loss0=breakdowns[0], loss1=breakdowns[1])
    _refurb_diagnostics(rec, snaps, omegas, view, ds, cfg, pseudo_mode=False)
    _evaluate(rec, pair, ds, cfg, epoch)
    return _finish(rec, cfg, epoch, t0)


def train_epoch_rolr(pair: ModelPair, ds: LabeledDataset, cfg: TrainConfig,
                     epoch: int, order: tuple = (0, 1)) -> EpochRecord:
    """Refurbish-only epoch: confidence-weighted blend of observed labels
    and sharpened two-snapshot pseudo-labels on the weak view, with none of
    the consistency terms."""
    if epoch < cfg.warmup_epochs:
        raise ContractError("refurbished epochs start after warm-up")
    t0 = time.perf_counter()
    view = TrainView(ds)
    weak, strong = _policies(cfg, view)
    snaps = (pair.models[0].snapshot(), pair.models[1].snapshot())
    breakdowns: list = [None, None]
    omegas: list = [None, None]
    for m in order:
        peer = snaps[1 - m]
        omega, params = estimate_confidence(peer, view)
        if params is None:
            logger.warning("epoch %d model %d: degenerate loss mixture; "
                           "confidence fixed at 0.5", epoch, m)
        omegas[m] = omega
        model, state = pair.models[m], pair.optimizer_states[m]
        total_val, count = 0.0, 0
        for b, idx in enumerate(_batches(view.n, cfg.batch_size,
                                         mix64(cfg.seed_shuffle, epoch, m))):
            xw, _ = make_views(view.features[idx], weak, strong,
                               mix64(cfg.seed_augment, epoch, m, b))
            tw = Tensor(xw)
            p = pair.models[m].predict_probs(tw)
            p0 = snaps[0].predict_probs(tw).data
            p1 = snaps[1].predict_probs(tw).data
            pseudo = rolr_pseudo_labels(p0, p1, cfg.sharpen_temp)
            model.zero_grad()
            loss = rolr_loss(p, view.labels[idx], omega[idx], pseudo)
            loss.backward()
            adam_step(state, model.parameters())
            total_val += loss.item() * idx.size
            count += idx.size
        breakdowns[m] = _ce_breakdown(total_val / count)
    rec = EpochRecord(epoch=epoch, phase="main", method=cfg.method,
                      loss0=breakdowns[0], loss1=breakdowns[1])
    _refurb_diagnostics(rec, snaps, omegas, view, ds, cfg, pseudo_mode=True)
    _evaluate(rec, pair, ds, cfg, epoch)
    return _finish(rec, cfg, epoch, t0)


def _build_dataset(cfg: ExperimentConfig, seeds) -> LabeledDataset:
    if cfg.data_path:
        ds = load_container(cfg.data_path)
    else:
        ds = gen_blobs(cfg.classes, cfg.n_per_class, cfg.dim, cfg.separation,
                       cfg.spread, seeds.data,
                       n_test_per_class=cfg.n_test_per_class)
    if cfg.noise_kind == "none":
        return ds
    if ds.noise_applied:
        logger.info("dataset already carries label noise; not re-injecting")
        return ds
    if cfg.noise_kind == "instance":
        return inject_instance_noise(ds, cfg.noise_tau0, seeds.noise)
    tm = build_transition_matrix(cfg.noise_kind, cfg.noise_tau0, ds.C)
    return inject_label_noise(ds, tm, seeds.noise)


def _train_config(cfg: ExperimentConfig, ds: LabeledDataset, seeds) -> TrainConfig:
    feature_sd = float(ds.features[ds.train_indices()].std())
    weak = AugmentPolicy("weak", jitter_sd=cfg.weak_jitter * feature_sd)
    strong = AugmentPolicy("strong", jitter_sd=cfg.strong_jitter * feature_sd,
                           mask_fraction=cfg.mask_fraction,
                           n_strong_ops=cfg.n_strong_ops,
                           op_magnitude=cfg.op_magnitude)
    return TrainConfig(method=cfg.method, epochs=cfg.epochs,
                       warmup_epochs=cfg.warmup_epochs,
                       batch_size=cfg.batch_size, lr=cfg.lr,
                       conf_threshold=cfg.conf_threshold,
                       sharpen_temp=cfg.sharpen_temp, tau=cfg.tau,
                       pg_hard_target=cfg.pg_hard_target,
                       eval_every=cfg.eval_every,
                       hidden_dims=tuple(cfg.hidden_dims),
                       seed_shuffle=seeds.shuffle,
                       seed_augment=seeds.augment,
                       weak_policy=weak, strong_policy=strong)


def _summarize(cfg: ExperimentConfig, pair: ModelPair, ds: LabeledDataset,
               records: list, seeds) -> dict:
    main_accs = [r.acc_ensemble for r in records
                 if r.phase == "main" and r.acc_ensemble is not None]
    if main_accs:
        k = min(10, len(main_accs))
        last_mean = float(np.mean(main_accs[-k:]))
    else:
        recorded = [r.acc_ensemble for r in records if r.acc_ensemble is not None]
        last_mean = recorded[-1] if recorded else None

    final: dict = {"epoch": records[-1].epoch if records else None}
    if records:
        last = records[-1]
        final.update(acc0=last.acc0, acc1=last.acc1,
                     acc_ensemble=last.acc_ensemble,
                     label_recovery=last.label_recovery,
                     omega_clean_mean=last.omega_clean_mean,
                     omega_corrupted_mean=last.omega_corrupted_mean)
        test_feats = Tensor(ds.features[ds.test_indices()])
        m0, m1 = pair.models
        logits0 = m0.logits(m0.encode(test_feats)).data
        logits1 = m1.logits(m1.encode(test_feats)).data
        probs = (m0.predict_probs(test_feats).data
                 + m1.predict_probs(test_feats).data) / 2.0
        final["m_embed"] = m_embed(ds, m0, m1, cfg.metric_pairs, seeds.metrics)
        final["m_logit"] = m_logit(logits0, logits1)
        final["variance_entropy"] = class_variance_entropy(probs)
    return {
        "config": cfg.to_dict(),
        "method": cfg.method,
        "epochs": cfg.epochs,
        "warmup_epochs": cfg.warmup_epochs,
        "n_train": int(ds.train_indices().size),
        "n_test": int(ds.test_indices().size),
        "last10_mean_accuracy": last_mean,
        "final": final,
    }


class ExperimentResult(NamedTuple):
    records: list
    summary: dict
    pair: ModelPair
    dataset: LabeledDataset


def run_experiment(cfg: ExperimentConfig, record_cb=None) -> ExperimentResult:
    """Data -> noise -> pair -> warm-up -> method epochs.

    `record_cb` receives each EpochRecord as soon as its epoch finishes.
    The summary accuracy is the mean over the last (up to) 10 post-warm-up
    epochs, or the last recorded accuracy when the run is warm-up only.
    The trained pair and the (noisy) dataset ride along for persistence.
    """
    seeds = expand_seeds(cfg.seed)
    ds = _build_dataset(cfg, seeds)
    tcfg = _train_config(cfg, ds, seeds)
    pair = init_pair(seeds.init0, seeds.init1,
                     (ds.d, *tcfg.hidden_dims), ds.C, lr=cfg.lr)
    records: list[EpochRecord] = []
    for epoch in range(cfg.epochs):
        if cfg.method == "ce" or epoch < tcfg.warmup_epochs:
            rec = _vanilla_epoch(pair, ds, tcfg, epoch)
        elif cfg.method == "ccl":
            rec = train_epoch_ccl(pair, ds, tcfg, epoch)
        else:
            rec = train_epoch_rolr(pair, ds, tcfg, epoch)
        records.append(rec)
        if record_cb:
            record_cb(rec)
    summary = _summarize(cfg, pair, ds, records, seeds)
    return ExperimentResult(records, summary, pair, ds)
