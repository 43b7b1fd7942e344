"""Experiment configuration: INI schema, defaults, and seed derivation.

One master seed expands through a splitmix-style stream into independent
per-purpose seeds (data, noise, init0, init1, shuffle, augment, metrics),
so changing e.g. the noise draw never perturbs initialization. The same
mixer derives per-epoch/per-batch seeds inside the trainer.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from typing import Iterator, Mapping

from .errors import ConfigError

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> int:
    """One output of the splitmix64 scrambler for the given state."""
    z = (state + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def seed_stream(master: int) -> Iterator[int]:
    """Infinite stream of decorrelated 64-bit seeds."""
    state = master & _MASK
    while True:
        state = (state + _GOLDEN) & _MASK
        yield splitmix64(state)


def mix64(*parts: int) -> int:
    """Fold integers into one 64-bit seed (order-sensitive)."""
    h = 0xC0FFEE123456789A
    for p in parts:
        h = splitmix64((h ^ (int(p) & _MASK)) & _MASK)
    return h


@dataclass(frozen=True)
class SeedBundle:
    data: int
    noise: int
    init0: int
    init1: int
    shuffle: int
    augment: int
    metrics: int


def expand_seeds(master: int) -> SeedBundle:
    """Per-purpose seeds drawn in a fixed, documented order."""
    stream = seed_stream(master)
    vals = [next(stream) for _ in range(7)]
    if vals[2] == vals[3]:  # the pair initializer insists the two differ
        vals[3] = (vals[3] + 1) & _MASK
    return SeedBundle(*vals)


# INI schema: section -> {key: (field name, parser)}. The file keys mirror
# the symbols used throughout (c, T, tau, tau0), not the field names.

def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_dims(s: str) -> tuple:
    return tuple(int(tok) for tok in s.replace(" ", "").split(",") if tok)


_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "experiment": {
        "method": ("method", str),
        "epochs": ("epochs", int),
        "warmup_epochs": ("warmup_epochs", int),
        "batch_size": ("batch_size", int),
        "lr": ("lr", float),
        "c": ("conf_threshold", float),
        "T": ("sharpen_temp", float),
        "tau": ("tau", float),
        "pg_hard_target": ("pg_hard_target", _parse_bool),
        "eval_every": ("eval_every", int),
        "seed": ("seed", int),
        "hidden_dims": ("hidden_dims", _parse_dims),
    },
    "data": {
        "path": ("data_path", str),
        "classes": ("classes", int),
        "dim": ("dim", int),
        "n_per_class": ("n_per_class", int),
        "n_test_per_class": ("n_test_per_class", int),
        "separation": ("separation", float),
        "spread": ("spread", float),
    },
    "noise": {
        "kind": ("noise_kind", str),
        "tau0": ("noise_tau0", float),
    },
    "augment": {
        "weak_jitter": ("weak_jitter", float),
        "strong_jitter": ("strong_jitter", float),
        "mask_fraction": ("mask_fraction", float),
        "n_strong_ops": ("n_strong_ops", int),
        "op_magnitude": ("op_magnitude", float),
    },
    "metrics": {
        "n_pairs": ("metric_pairs", int),
        "dump_final": ("dump_final", _parse_bool),
    },
    "output": {
        "dir": ("out_dir", str),
    },
}

_FIELD_TO_PATH = {entry[0]: f"{sect}.{key}"
                  for sect, keys in _SCHEMA.items()
                  for key, entry in keys.items()}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully defaulted description of one experiment run."""

    method: str = "ccl"
    epochs: int = 60
    warmup_epochs: int = 10
    batch_size: int = 128
    lr: float = 0.001
    conf_threshold: float = 0.95
    sharpen_temp: float = 0.5
    tau: float = 0.1
    pg_hard_target: bool = False
    eval_every: int = 1
    seed: int = 0
    hidden_dims: tuple = (128, 64)
    data_path: str = ""
    classes: int = 4
    dim: int = 20
    n_per_class: int = 1000
    n_test_per_class: int = 250
    separation: float = 6.0
    spread: float = 1.0
    noise_kind: str = "symmetric"
    noise_tau0: float = 0.4
    weak_jitter: float = 0.05
    strong_jitter: float = 0.15
    mask_fraction: float = 0.1
    n_strong_ops: int = 2
    op_magnitude: float = 0.3
    metric_pairs: int = 2000
    dump_final: bool = True
    out_dir: str = "runs/exp"

    def __post_init__(self):
        problems = []

        def check(cond, field_name, msg):
            if not cond:
                problems.append(f"{_FIELD_TO_PATH[field_name]}: {msg}")

        check(self.method in ("ccl", "rolr", "ce"), "method",
              f"must be ccl, rolr or ce, got {self.method!r}")
        check(self.epochs >= 0, "epochs", "must be nonnegative")
        check(self.warmup_epochs >= 0, "warmup_epochs", "must be nonnegative")
        check(self.warmup_epochs <= self.epochs, "warmup_epochs",
              f"cannot exceed epochs ({self.warmup_epochs} > {self.epochs})")
        check(self.batch_size >= 2, "batch_size", "must be at least 2")
        check(self.lr > 0, "lr", "must be positive")
        check(0.0 < self.conf_threshold < 1.0, "conf_threshold",
              f"must lie in (0, 1), got {self.conf_threshold}")
        check(self.sharpen_temp > 0, "sharpen_temp", "must be positive")
        check(self.tau > 0, "tau", "must be positive")
        check(self.eval_every >= 1, "eval_every", "must be at least 1")
        check(self.seed >= 0, "seed", "must be nonnegative")
        check(bool(self.hidden_dims)
              and all(isinstance(h, int) and h > 0 for h in self.hidden_dims),
              "hidden_dims", "must be positive integers")
        check(self.classes >= 2, "classes", "need at least two classes")
        check(self.dim >= 2, "dim", "must be at least 2")
        check(self.n_per_class >= 1, "n_per_class", "must be positive")
        check(self.n_test_per_class >= 1, "n_test_per_class", "must be positive")
        check(self.separation > 0, "separation", "must be positive")
        check(self.spread >= 0, "spread", "must be nonnegative")
        check(self.noise_kind in ("none", "symmetric", "pair", "instance"),
              "noise_kind", f"unknown noise kind {self.noise_kind!r}")
        check(0.0 <= self.noise_tau0 <= 1.0, "noise_tau0", "must lie in [0, 1]")
        check(self.weak_jitter >= 0, "weak_jitter", "must be nonnegative")
        check(self.strong_jitter >= 0, "strong_jitter", "must be nonnegative")
        check(0.0 <= self.mask_fraction < 1.0, "mask_fraction",
              "must lie in [0, 1)")
        check(self.n_strong_ops >= 0, "n_strong_ops", "must be nonnegative")
        check(self.op_magnitude > 0, "op_magnitude", "must be positive")
        check(self.metric_pairs >= 1, "metric_pairs", "must be positive")
        check(bool(self.out_dir), "out_dir", "must be nonempty")
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        """Echo in file-schema shape: {section: {key: value}}."""
        out: dict[str, dict] = {}
        for sect, keys in _SCHEMA.items():
            out[sect] = {}
            for key, (field_name, _) in keys.items():
                val = getattr(self, field_name)
                out[sect][key] = list(val) if isinstance(val, tuple) else val
        return out

    @classmethod
    def from_mapping(cls, nested: Mapping) -> "ExperimentConfig":
        """Inverse of to_dict (accepts the summary.json config echo)."""
        kwargs = {}
        unknown = []
        for sect, keys in nested.items():
            if sect not in _SCHEMA:
                unknown.append(str(sect))
                continue
            for key, val in keys.items():
                if key not in _SCHEMA[sect]:
                    unknown.append(f"{sect}.{key}")
                    continue
                field_name, _ = _SCHEMA[sect][key]
                kwargs[field_name] = tuple(val) if field_name == "hidden_dims" else val
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**kwargs)


def parse_config(path=None, overrides: Mapping[str, object] | None = None) -> ExperimentConfig:
    """Config file plus CLI overrides, fully defaulted and validated.

    `overrides` maps dataclass field names to already-typed values (None
    entries are ignored); they take precedence over file keys.
    """
    kwargs: dict[str, object] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive ("T" vs "tau")
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not readable: {path}")
        unknown = []
        for sect in parser.sections():
            if sect not in _SCHEMA:
                unknown.extend(f"{sect}.{key}" for key in parser[sect])
                continue
            for key, raw in parser[sect].items():
                if key not in _SCHEMA[sect]:
                    unknown.append(f"{sect}.{key}")
                    continue
                field_name, parse = _SCHEMA[sect][key]
                try:
                    kwargs[field_name] = parse(raw)
                except ValueError as exc:
                    raise ConfigError(f"{sect}.{key}: cannot parse {raw!r} "
                                      f"({exc})") from exc
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for field_name, val in (overrides or {}).items():
        if val is None:
            continue
        if field_name not in {f.name for f in fields(ExperimentConfig)}:
            raise ConfigError(f"unknown override field {field_name!r}")
        kwargs[field_name] = val
    return ExperimentConfig(**kwargs)
