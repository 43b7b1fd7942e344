"""Command-line harness: data generation, noise injection, training runs,
checkpoint scoring, dump diagnostics, and self-checks.

    ccl-lab gen-data --out blobs.ccl --classes 4 --dim 20 --seed 1
    ccl-lab inject-noise --in blobs.ccl --out noisy.ccl --kind symmetric --tau0 0.4
    ccl-lab train --config exp.ini --tau0 0.4 --out runs/exp1
    ccl-lab eval --run runs/exp1
    ccl-lab metrics --run runs/exp1 --taxonomy tree.json
    ccl-lab gradcheck --points 50
    ccl-lab mi-check --grid

Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime
failure (unreadable artifacts, failed checks).

Training writes into the output directory (``CCL_LAB_OUT`` overrides it):
``epochs.jsonl`` (one record per epoch, stable key order), ``epochs.csv``
(the same records with flat columns), ``summary.json`` (config echo, build
id, last-10-epoch mean accuracy, final metrics), ``dataset.ccl``,
``model{0,1}.ckpt``, and ``dump.ccl`` with final test-split embeddings,
logits, and probabilities unless dumping is disabled.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import parse_config
from .container import read_container, write_container
from .data import (build_transition_matrix, gen_blobs, inject_instance_noise,
                   inject_label_noise, load_container, save_container)
from .errors import CclError, ConfigError, ContractError
from .gradcheck import run_loss_gradchecks
from .losses import LossBreakdown
from .metrics import (Taxonomy, class_variance_entropy, lca_distance,
                      m_embed_from_embeddings, m_logit, mi_bound_check,
                      test_accuracy)
from .model import load_checkpoint, save_checkpoint
from .tensor import Tensor
from .trainer import EpochRecord, run_experiment

_SCALAR_COLUMNS = ["epoch", "phase", "method", "acc0", "acc1", "acc_ensemble",
                   "label_recovery", "omega_clean_mean",
                   "omega_corrupted_mean", "variance_entropy", "wall_time",
                   "rng_checkpoint"]
_LOSS_FIELDS = [f.name for f in dataclasses.fields(LossBreakdown)]
_CSV_COLUMNS = _SCALAR_COLUMNS + [f"{side}_{name}" for side in ("loss0", "loss1")
                                  for name in _LOSS_FIELDS]


def _plain(obj):
    """JSON-safe copy: numpy scalars/arrays to native Python values."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _build_id() -> str:
    """Content hash of the installed package sources (git-style hex id)."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha1()
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


class MetricsSink:
    """Append-only epoch record streams under one output directory.

    Each emitted record becomes one JSONL line and one flat CSV row, both
    flushed immediately so an interrupted run keeps every finished epoch.
    """

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._jsonl = open(self.out_dir / "epochs.jsonl", "w", encoding="utf-8")
        self._csv_file = open(self.out_dir / "epochs.csv", "w",
                              encoding="utf-8", newline="")
        self._csv = csv.DictWriter(self._csv_file, fieldnames=_CSV_COLUMNS)
        self._csv.writeheader()
        self._csv_file.flush()
        self._last_epoch = -1

    def emit(self, record: EpochRecord) -> None:
        if record.epoch <= self._last_epoch:
            raise ContractError(
                f"epoch {record.epoch} emitted after {self._last_epoch}; "
                "records must arrive in increasing epoch order")
        self._last_epoch = record.epoch
        d = _plain(record.to_dict())
        self._jsonl.write(json.dumps(d, sort_keys=True) + "\n")
        self._jsonl.flush()
        row = {k: d.get(k) for k in _SCALAR_COLUMNS}
        for side in ("loss0", "loss1"):
            bd = d.get(side) or {}
            for name in _LOSS_FIELDS:
                row[f"{side}_{name}"] = bd.get(name)
        self._csv.writerow({k: ("" if v is None else v) for k, v in row.items()})
        self._csv_file.flush()

    def write_summary(self, summary: dict) -> None:
        path = self.out_dir / "summary.json"
        path.write_text(json.dumps(_plain(summary), sort_keys=True, indent=2)
                        + "\n", encoding="utf-8")

    def close(self) -> None:
        self._jsonl.close()
        self._csv_file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def emit_records(sink: MetricsSink, records) -> None:
    """Stream already-collected records through a sink."""
    for rec in records:
        sink.emit(rec)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    from .config import expand_seeds
    ds = gen_blobs(args.classes, args.n_per_class, args.dim, args.separation,
                   args.spread, expand_seeds(args.seed).data,
                   n_test_per_class=args.n_test_per_class)
    save_container(ds, args.out)
    print(json.dumps({"path": str(args.out), "n": ds.n, "d": ds.d,
                      "C": ds.C}, sort_keys=True))
    return 0


def _cmd_inject_noise(args) -> int:
    from .config import expand_seeds
    ds = load_container(args.infile)
    seed = expand_seeds(args.seed).noise
    if args.kind == "instance":
        out = inject_instance_noise(ds, args.tau0, seed)
    else:
        tm = build_transition_matrix(args.kind, args.tau0, ds.C)
        out = inject_label_noise(ds, tm, seed)
    save_container(out, args.out)
    train = out.train_indices()
    changed = int((out.noisy_labels[train] != out.clean_labels[train]).sum())
    print(json.dumps({"path": str(args.out), "kind": args.kind,
                      "tau0": args.tau0, "corrupted": changed,
                      "train": int(train.size)}, sort_keys=True))
    return 0


_TRAIN_OVERRIDES = [
    # (flag, config field, type)
    ("--method", "method", str),
    ("--epochs", "epochs", int),
    ("--warmup-epochs", "warmup_epochs", int),
    ("--batch-size", "batch_size", int),
    ("--lr", "lr", float),
    ("--c", "conf_threshold", float),
    ("--T", "sharpen_temp", float),
    ("--tau", "tau", float),
    ("--eval-every", "eval_every", int),
    ("--seed", "seed", int),
    ("--data", "data_path", str),
    ("--classes", "classes", int),
    ("--dim", "dim", int),
    ("--n-per-class", "n_per_class", int),
    ("--n-test-per-class", "n_test_per_class", int),
    ("--separation", "separation", float),
    ("--spread", "spread", float),
    ("--noise-kind", "noise_kind", str),
    ("--tau0", "noise_tau0", float),
    ("--pairs", "metric_pairs", int),
]


def _cmd_train(args) -> int:
    overrides = {field: getattr(args, field) for _, field, _ in _TRAIN_OVERRIDES}
    if args.dump_final is not None:
        overrides["dump_final"] = args.dump_final
    out_dir = os.environ.get("CCL_LAB_OUT") or args.out
    if out_dir:
        overrides["out_dir"] = out_dir
    cfg = parse_config(args.config, overrides=overrides)

    sink = MetricsSink(cfg.out_dir)
    try:
        res = run_experiment(cfg, record_cb=sink.emit)
        summary = dict(res.summary)
        summary["build_id"] = _build_id()
        sink.write_summary(summary)
    finally:
        sink.close()

    out = Path(cfg.out_dir)
    save_container(res.dataset, out / "dataset.ccl")
    for i in (0, 1):
        save_checkpoint(res.pair.models[i], out / f"model{i}.ckpt",
                        step=cfg.epochs)
    if cfg.dump_final:
        _write_dump(res, out / "dump.ccl")
    print(json.dumps(_plain({
        "out_dir": str(out), "method": cfg.method,
        "last10_mean_accuracy": summary["last10_mean_accuracy"],
    }), sort_keys=True))
    return 0


def _write_dump(res, path) -> None:
    ds = res.dataset
    feats = Tensor(ds.features[ds.test_indices()])
    arrays = []
    for i, model in enumerate(res.pair.models):
        emb = model.encode(feats)
        logits = model.logits(emb)
        probs = model.classify(emb)
        arrays += [(f"emb{i}", emb.data), (f"logits{i}", logits.data),
                   (f"probs{i}", probs.data)]
    write_container(path, {"kind": "dump", "dtype": "f64",
                           "n": int(feats.shape[0])}, arrays)


def _cmd_eval(args) -> int:
    if args.run:
        run = Path(args.run)
        ckpts = [run / "model0.ckpt", run / "model1.ckpt"]
        data = run / "dataset.ccl"
    elif args.checkpoint and args.data:
        ckpts = [Path(p) for p in args.checkpoint]
        data = Path(args.data)
    else:
        raise ConfigError("eval needs --run DIR or --checkpoint ... --data PATH")
    models = [load_checkpoint(p)[0] for p in ckpts]
    ds = load_container(data)
    out = {"accuracy": test_accuracy(tuple(models), ds)}
    if len(models) > 1:
        for i, m in enumerate(models):
            out[f"acc{i}"] = test_accuracy(m, ds)
    print(json.dumps(_plain(out), sort_keys=True))
    return 0


def _cmd_metrics(args) -> int:
    if args.run:
        src = Path(args.run) / "dump.ccl"
    elif args.dump:
        src = Path(args.dump)
    else:
        raise ConfigError("metrics needs --run DIR or --dump PATH")
    _, arrays = read_container(src)
    need = {"emb0", "emb1", "logits0", "logits1", "probs0", "probs1"}
    missing = need - arrays.keys()
    if missing:
        raise ConfigError(f"dump missing arrays: {sorted(missing)}")
    probs = (arrays["probs0"] + arrays["probs1"]) / 2.0
    out = {
        "m_embed": m_embed_from_embeddings(arrays["emb0"], arrays["emb1"],
                                           args.pairs, args.seed),
        "m_logit": m_logit(arrays["logits0"], arrays["logits1"]),
        "variance_entropy": class_variance_entropy(probs),
    }
    if args.taxonomy:
        tax = Taxonomy.from_file(args.taxonomy)
        order = np.argsort(probs, axis=1)
        out["lca_top1_top2"] = lca_distance(tax, order[:, -1], order[:, -2])
    if args.run:
        path = Path(args.run) / "metrics.json"
        path.write_text(json.dumps(_plain(out), sort_keys=True, indent=2)
                        + "\n", encoding="utf-8")
    print(json.dumps(_plain(out), sort_keys=True))
    return 0


def _cmd_gradcheck(args) -> int:
    report = run_loss_gradchecks(n_points=args.points, tol=args.tol,
                                 seed=args.seed)
    width = max(len(k) for k in report)
    ok = True
    for name, row in report.items():
        status = "pass" if row["passed"] else "FAIL"
        ok = ok and row["passed"]
        print(f"{name:<{width}}  max_rel_err={row['max_error']:.3e}  "
              f"points={row['points']}  {status}")
    print(f"gradcheck: {'all passed' if ok else 'FAILURES above'}")
    return 0 if ok else 2


def _cmd_mi_check(args) -> int:
    if args.grid:
        cells = [(K, N, tau)
                 for K in (4, 8, 16, 64)
                 for N in sorted({2, 4, min(8, K)})
                 for tau in (0.1, 0.5, 1.0)]
    else:
        if args.K is None or args.N is None:
            raise ConfigError("mi-check needs --K and --N (or --grid)")
        cells = [(args.K, args.N, args.tau)]
    ok = True
    for K, N, tau in cells:
        res = mi_bound_check(K, N, tau, args.batches, args.seed)
        ok = ok and res.holds
        print(f"K={K:<3} N={N:<2} tau={tau:<4} I={res.i_plugin:.6f} "
              f"bound={res.bound:.6f} slack={res.i_plugin - res.bound:+.6f} "
              f"{'holds' if res.holds else 'VIOLATED'}")
    return 0 if ok else 2


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on bad arguments, per the exit-code
    contract: 1 = validation, 2 = runtime failure."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ccl-lab", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic blobs container")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--dim", type=int, default=20)
    g.add_argument("--n-per-class", type=int, default=1000)
    g.add_argument("--n-test-per-class", type=int, default=250)
    g.add_argument("--separation", type=float, default=6.0)
    g.add_argument("--spread", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gen_data)

    i = sub.add_parser("inject-noise", help="corrupt train labels in a container")
    i.add_argument("--in", dest="infile", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--kind", choices=("symmetric", "pair", "instance"),
                   default="symmetric")
    i.add_argument("--tau0", type=float, required=True)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=_cmd_inject_noise)

    t = sub.add_parser("train", help="run an experiment and persist artifacts")
    t.add_argument("--config", default=None, help="INI config file")
    t.add_argument("--out", default=None, help="output directory "
                   "(CCL_LAB_OUT env var takes precedence)")
    t.add_argument("--no-dump", dest="dump_final", action="store_const",
                   const=False, default=None,
                   help="skip the final embeddings/logits dump")
    for flag, field, typ in _TRAIN_OVERRIDES:
        t.add_argument(flag, dest=field, type=typ, default=None)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="score checkpoints on a dataset container")
    e.add_argument("--run", default=None, help="directory written by train")
    e.add_argument("--checkpoint", nargs="+", default=None)
    e.add_argument("--data", default=None)
    e.set_defaults(func=_cmd_eval)

    m = sub.add_parser("metrics", help="semantic diagnostics from a dump")
    m.add_argument("--run", default=None, help="directory written by train")
    m.add_argument("--dump", default=None, help="dump container path")
    m.add_argument("--taxonomy", default=None, help="taxonomy JSON file")
    m.add_argument("--pairs", type=int, default=2000)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=_cmd_metrics)

    c = sub.add_parser("gradcheck", help="finite-difference check all losses")
    c.add_argument("--points", type=int, default=50)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_cmd_gradcheck)

    mi = sub.add_parser("mi-check", help="verify the contrastive MI bound")
    mi.add_argument("--K", type=int, default=None, help="latent classes")
    mi.add_argument("--N", type=int, default=None, help="batch size")
    mi.add_argument("--tau", type=float, default=0.1)
    mi.add_argument("--batches", type=int, default=2000)
    mi.add_argument("--seed", type=int, default=0)
    mi.add_argument("--grid", action="store_true",
                    help="run the full K/N/tau verification grid")
    mi.set_defaults(func=_cmd_mi_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CclError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
