"""MLP encoder/classifier pair and the Adam optimizer.

Each network decomposes into a feature extractor (relu MLP ending in a
linear embedding layer) and a linear classifier head whose softmax gives
class probabilities. Experiments always train two such networks with
independent initializations; snapshots of one provide frozen targets for
the other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .tensor import Tensor, apply, get_default_dtype


@dataclass
class Model:
    """Encoder layers (weight, bias) pairs with relu between, then a linear
    classifier. The final encoder layer is linear so embeddings can take
    any sign."""

    layer_dims: list[int]          # input dim, hidden dims..., embedding dim
    num_classes: int
    weights: list[Tensor] = field(default_factory=list)   # encoder weights
    biases: list[Tensor] = field(default_factory=list)    # encoder biases
    cls_weight: Tensor | None = None
    cls_bias: Tensor | None = None

    @property
    def embed_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases, self.cls_weight, self.cls_bias]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def encode(self, batch: Tensor) -> Tensor:
        """Map a batch of rows to embeddings (not L2-normalized)."""
        if batch.ndim != 2 or batch.shape[1] != self.layer_dims[0]:
            raise DimensionError(
                f"encode: batch width {batch.shape} does not match input dim "
                f"{self.layer_dims[0]}")
        h = batch
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = (h @ w) + b
            if i < last:
                h = apply("relu", [h])
        return h

    def classify(self, embeddings: Tensor) -> Tensor:
        """Softmax class probabilities from embeddings."""
        return apply("softmax_rows", [self.logits(embeddings)])

    def logits(self, embeddings: Tensor) -> Tensor:
        if embeddings.ndim != 2 or embeddings.shape[1] != self.embed_dim:
            raise DimensionError(
                f"classify: embedding width {embeddings.shape} does not match "
                f"d_e {self.embed_dim}")
        return (embeddings @ self.cls_weight) + self.cls_bias

    def predict_probs(self, batch: Tensor) -> Tensor:
        return self.classify(self.encode(batch))

    def snapshot(self) -> "Model":
        """Frozen deep copy: parameters detached so no gradients flow to or
        from the copy."""
        clone = Model(list(self.layer_dims), self.num_classes)
        clone.weights = [Tensor(w.data.copy()) for w in self.weights]
        clone.biases = [Tensor(b.data.copy()) for b in self.biases]
        clone.cls_weight = Tensor(self.cls_weight.data.copy())
        clone.cls_bias = Tensor(self.cls_bias.data.copy())
        return clone


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def ensure(self, params: Sequence[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        for slot, p in zip(self.m, params):
            if slot.shape != p.data.shape:
                raise ContractError("optimizer state shape does not match parameter")


@dataclass
class ModelPair:
    models: tuple[Model, Model]
    optimizer_states: tuple[AdamState, AdamState]


def _init_model(rng: np.random.Generator, layer_dims: Sequence[int], C: int) -> Model:
    dtype = get_default_dtype()
    model = Model(list(layer_dims), C)
    dims = list(layer_dims)
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        model.weights.append(Tensor(w, requires_grad=True))
        model.biases.append(Tensor(np.zeros((fan_out,), dtype=dtype), requires_grad=True))
    bound = np.sqrt(6.0 / dims[-1])
    cw = rng.uniform(-bound, bound, size=(dims[-1], C)).astype(dtype)
    model.cls_weight = Tensor(cw, requires_grad=True)
    model.cls_bias = Tensor(np.zeros((C,), dtype=dtype), requires_grad=True)
    return model


def init_pair(seed0: int, seed1: int, layer_dims: Sequence[int], C: int,
              lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> ModelPair:
    """Two fresh models from distinct seeds, each with its own optimizer."""
    if seed0 == seed1:
        raise ConfigError("seed0 and seed1 must differ so the models differ")
    if not layer_dims:
        raise ConfigError("layer_dims must be nonempty")
    if len(layer_dims) < 2:
        raise ConfigError("layer_dims needs at least input and embedding dims")
    if C < 2:
        raise ConfigError(f"need at least two classes, got {C}")
    m0 = _init_model(np.random.default_rng(seed0), layer_dims, C)
    m1 = _init_model(np.random.default_rng(seed1), layer_dims, C)
    opt = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    return ModelPair((m0, m1), (AdamState(**opt), AdamState(**opt)))


def adam_step(state: AdamState, params: Sequence[Tensor]) -> None:
    """One bias-corrected Adam update in place; increments state.t."""
    state.ensure(params)
    for p in params:
        if p.grad is None:
            raise ContractError("adam_step: parameter has no gradient")
        if p.grad.shape != p.data.shape:
            raise ContractError("adam_step: gradient shape mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for i, p in enumerate(params):
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def _param_entries(model: Model) -> list[tuple[str, Tensor]]:
    entries = [(f"enc_w{i}", w) for i, w in enumerate(model.weights)]
    entries += [(f"enc_b{i}", b) for i, b in enumerate(model.biases)]
    entries += [("cls_w", model.cls_weight), ("cls_b", model.cls_bias)]
    return entries


def save_checkpoint(model: Model, path, step: int = 0) -> None:
    """Persist architecture and parameters (f64 payload)."""
    header = {"kind": "checkpoint", "layer_dims": list(model.layer_dims),
              "C": model.num_classes, "step": int(step), "dtype": "f64"}
    write_container(path, header, [(n, t.data) for n, t in _param_entries(model)])


def load_checkpoint(path) -> tuple[Model, int]:
    """Rebuild a model from a checkpoint; returns (model, step)."""
    header, arrays = read_container(path)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"not a checkpoint container: kind={header.get('kind')!r}")
    model = Model(list(header["layer_dims"]), int(header["C"]))
    dtype = get_default_dtype()
    n_layers = len(model.layer_dims) - 1
    try:
        model.weights = [Tensor(arrays[f"enc_w{i}"].astype(dtype), requires_grad=True)
                         for i in range(n_layers)]
        model.biases = [Tensor(arrays[f"enc_b{i}"].astype(dtype), requires_grad=True)
                        for i in range(n_layers)]
        model.cls_weight = Tensor(arrays["cls_w"].astype(dtype), requires_grad=True)
        model.cls_bias = Tensor(arrays["cls_b"].astype(dtype), requires_grad=True)
    except KeyError as exc:
        raise FormatError(f"checkpoint missing parameter array {exc}") from exc
    for (fan_in, fan_out), w in zip(
            zip(model.layer_dims[:-1], model.layer_dims[1:]), model.weights):
        if w.shape != (fan_in, fan_out):
            raise FormatError("checkpoint parameter shapes disagree with layer_dims")
    if model.cls_weight.shape != (model.layer_dims[-1], model.num_classes):
        raise FormatError("checkpoint classifier shape disagrees with header")
    return model, int(header["step"])

