"""Feed-forward classifier on a flat parameter vector, with SGD and Adam."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from meshprop.data import Dataset, DeviceShard
from meshprop.rng import derive_rng

log = logging.getLogger(__name__)

# (fan_in, fan_out, has_bias) per layer
LayerShape = tuple[int, int, bool]


class ModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    shape: tuple[LayerShape, ...]

    def __post_init__(self):
        shape = tuple((int(r), int(c), bool(b)) for r, c, b in self.shape)
        object.__setattr__(self, "shape", shape)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != n_params(shape):
            raise ModelError(f"expected {n_params(shape)} values for shape {shape}, got {values.shape}")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    def layers(self):
        """Yield ``(W, b)`` views per layer; ``W`` is (fan_in, fan_out), ``b`` may be None."""
        off = 0
        for rows, cols, bias in self.shape:
            w = self.values[off:off + rows * cols].reshape(rows, cols)
            off += rows * cols
            b = None
            if bias:
                b = self.values[off:off + cols]
                off += cols
            yield w, b

    def with_values(self, values) -> ParamVector:
        return ParamVector(values, self.shape)

    def save(self, path) -> None:
        header = json.dumps({"shape": [list(s) for s in self.shape], "dtype": "<f8"}).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(self.values.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> ParamVector:
        raw = Path(path).read_bytes()
        (hlen,) = struct.unpack("<I", raw[:4])
        header = json.loads(raw[4:4 + hlen])
        values = np.frombuffer(raw[4 + hlen:], dtype="<f8").astype(np.float64)
        return cls(values, tuple(tuple(s) for s in header["shape"]))


def n_params(shape) -> int:
    return sum(r * c + (c if b else 0) for r, c, b in shape)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    lr: float = 1e-2
    optimizer: str = "sgd"
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ModelError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ModelError(f"lr must be > 0, got {self.lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ModelError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ModelError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> AdamState:
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)


def init_model(layer_dims, seed: int) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ModelError(f"layer_dims needs >= 2 positive sizes, got {layer_dims}")
    rng = derive_rng(seed, -1, -1, "model:init")
    shape = tuple((a, b, True) for a, b in zip(dims[:-1], dims[1:]))
    chunks = []
    for fan_in, fan_out, _ in shape:
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamVector(np.concatenate(chunks), shape)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Logits for a batch; ReLU between layers."""
    if x.shape[1] != params.shape[0][0]:
        raise ModelError(f"input dim {x.shape[1]} does not match model input {params.shape[0][0]}")
    layers = list(params.layers())
    h = x
    for k, (w, b) in enumerate(layers):
        h = h @ w
        if b is not None:
            h = h + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def loss_and_grad(params: ParamVector, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient (flat, aligned with params)."""
    layers = list(params.layers())
    acts = [x]
    h = x
    for k, (w, b) in enumerate(layers):
        h = h @ w
        if b is not None:
            h = h + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0)
            acts.append(h)
    logits = h
    m = len(y)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(m), y]))

    delta = np.exp(z - logsum[:, None])
    delta[np.arange(m), y] -= 1.0
    delta /= m

    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        w, b = layers[k]
        a = acts[k]
        gw = a.T @ delta
        gb = delta.sum(axis=0) if b is not None else None
        grads[k] = (gw, gb)
        if k > 0:
            delta = (delta @ w.T) * (a > 0)
    flat = []
    for gw, gb in grads:
        flat.append(gw.ravel())
        if gb is not None:
            flat.append(gb)
    return loss, np.concatenate(flat)


def local_train(params: ParamVector, shard: DeviceShard, dataset: Dataset, config: TrainConfig,
                rng: np.random.Generator, state: AdamState | None = None,
                history: TrainLog | None = None) -> ParamVector:
    """E epochs of shuffled mini-batch descent on the shard; returns new parameters.

    ``params`` is not modified. For Adam, ``state`` carries the device's moment
    estimates across calls and is updated in place.
    """
    if len(shard) == 0:
        log.warning("device %d has an empty shard; parameters left unchanged", shard.device)
        return params
    x = dataset.features[shard.indices]
    y = dataset.labels[shard.indices]
    if x.shape[1] != params.shape[0][0]:
        raise ModelError(f"input dim {x.shape[1]} does not match model input {params.shape[0][0]}")
    theta = params.values.copy()
    if config.optimizer == "adam" and state is None:
        state = AdamState.zeros(theta.size)
    m = len(y)
    bs = config.batch_size
    for _ in range(config.epochs):
        order = rng.permutation(m)
        total = 0.0
        for start in range(0, m, bs):
            idx = order[start:start + bs]
            loss, g = loss_and_grad(ParamVector(theta, params.shape), x[idx], y[idx])
            total += loss * len(idx)
            if config.optimizer == "sgd":
                theta -= config.lr * g
            else:
                state.t += 1
                state.m = config.beta1 * state.m + (1 - config.beta1) * g
                state.v = config.beta2 * state.v + (1 - config.beta2) * g * g
                mhat = state.m / (1 - config.beta1 ** state.t)
                vhat = state.v / (1 - config.beta2 ** state.t)
                theta -= config.lr * mhat / (np.sqrt(vhat) + config.eps)
        if history is not None:
            history.epoch_loss.append(total / m)
    return ParamVector(theta, params.shape)


def predict(params: ParamVector, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Argmax class per row; ties resolve to the smallest class id."""
    out = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), chunk):
        out[start:start + chunk] = np.argmax(forward(params, x[start:start + chunk]), axis=1)
    return out


def evaluate(params: ParamVector, test: Dataset, backdoor_target: int | None = None) -> float:
    """Accuracy on ``test``; with ``backdoor_target`` set, the rate of predicting that class."""
    if len(test) == 0:
        raise ModelError("cannot evaluate on an empty test set")
    if test.dim != params.shape[0][0]:
        raise ModelError(f"test dim {test.dim} does not match model input {params.shape[0][0]}")
    pred = predict(params, test.features)
    want = test.labels if backdoor_target is None else backdoor_target
    return float(np.mean(pred == want))
