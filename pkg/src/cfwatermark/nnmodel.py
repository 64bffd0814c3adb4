"""Small feed-forward binary classifiers (ReLU hidden layers, sigmoid output).

Training, fine-tuning and prediction run on plain numpy with hand-written
backpropagation; :func:`forward_tensor` gives the same network on
:mod:`numkit` tensors for the places that need to differentiate through it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit as nk
from .rng import stream

log = logging.getLogger(__name__)

PROB_EPS = nk.PROB_EPS


@dataclass(frozen=True)
class MlpParams:
    """Weights and biases, ``layers[i] = (W_i, b_i)`` with ``W_i`` (fan_in, fan_out)."""

    layers: tuple
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        layers = tuple((np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64).reshape(1, -1))
                       for w, b in self.layers)
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        for i, (w, b) in enumerate(layers):
            if w.ndim != 2 or b.shape[1] != w.shape[1]:
                raise nk.ShapeError(f"layer {i}", w.shape, b.shape)
            if i and layers[i - 1][0].shape[1] != w.shape[0]:
                raise nk.ShapeError(f"layer {i} composition", layers[i - 1][0].shape, w.shape)
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise nk.NonFiniteError(f"layer {i} has non-finite parameters")
        if layers[-1][0].shape[1] != 1:
            raise nk.ShapeError("output layer", layers[-1][0].shape)
        object.__setattr__(self, "layers", layers)

    @property
    def n_features(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.n_features] + [w.shape[1] for w, _ in self.layers]

    def flat(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    @classmethod
    def from_flat(cls, arrays: Sequence[np.ndarray], meta: dict | None = None) -> "MlpParams":
        arrays = list(arrays)
        return cls(tuple(zip(arrays[0::2], arrays[1::2])), dict(meta or {}))

    def predict_proba(self, X) -> np.ndarray:
        return predict_proba(self, X)

    def equal(self, other: "MlpParams") -> bool:
        return len(self.layers) == len(other.layers) and all(
            np.array_equal(a, b) for a, b in zip(self.flat(), other.flat()))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    hidden: tuple = (32, 32)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def init_params(sizes: Sequence[int], seed: int) -> MlpParams:
    """He-style uniform init, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``; zero biases."""
    rng = stream(seed, "mlp", "init")
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros((1, fan_out))))
    return MlpParams(tuple(layers), {"seed": int(seed)})


def _check_X(params: MlpParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != params.n_features:
        raise nk.ShapeError("predict_proba", X.shape, (None, params.n_features))
    return X


def _forward(layers, X):
    acts = [X]
    h = X
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < last:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            return z, acts
    raise AssertionError


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logits(params: MlpParams, X) -> np.ndarray:
    X = _check_X(params, X)
    return _forward(params.layers, X)[0].ravel()


def predict_proba(params: MlpParams, X) -> np.ndarray:
    """P(y=1 | x) for each row, clamped to ``[1e-7, 1 - 1e-7]``."""
    return np.clip(_sigmoid(logits(params, X)), PROB_EPS, 1.0 - PROB_EPS)


def predict_label(params: MlpParams, X) -> np.ndarray:
    return (predict_proba(params, X) >= 0.5).astype(np.int64)


def bce_loss(params: MlpParams, X, y) -> float:
    p = predict_proba(params, X)
    y = np.asarray(y, dtype=np.float64).ravel()
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def loss_and_grads(layers, X, y):
    """Mean clamped BCE and its gradients w.r.t. every (W, b)."""
    z, acts = _forward(layers, X)
    p_raw = _sigmoid(z)
    p = np.clip(p_raw, PROB_EPS, 1.0 - PROB_EPS)
    y = y.reshape(-1, 1)
    n = X.shape[0]
    loss = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    inside = (p_raw >= PROB_EPS) & (p_raw <= 1.0 - PROB_EPS)
    delta = np.where(inside, (p - y) / n, 0.0)
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a = acts[i]
        grads[i] = (a.T @ delta, delta.sum(axis=0, keepdims=True))
        if i:
            delta = (delta @ w.T) * (a > 0)
    return loss, grads


def input_gradient(params: MlpParams, X, upstream) -> np.ndarray:
    """d(sum(upstream * P(y=1|x)))/dX, using the unclamped sigmoid."""
    X = _check_X(params, X)
    z, acts = _forward(params.layers, X)
    p = _sigmoid(z)
    delta = np.asarray(upstream, dtype=np.float64).reshape(-1, 1) * p * (1 - p)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        delta = delta @ w.T
        if i:
            delta = delta * (acts[i] > 0)
    return delta


class Adam:
    """Plain Adam over a list of arrays; updates in place."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 / (1.0 - b1 ** self.t)
        c2 = 1.0 / (1.0 - b2 ** self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * c1 * m / (np.sqrt(v * c2) + self.eps)


def _validate_data(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training data is empty")
    if X.shape[0] != y.shape[0]:
        raise nk.ShapeError("train", X.shape, y.shape)
    if not np.isfinite(X).all():
        raise ValueError("training features contain NaN or Inf")
    if not np.isfinite(y).all() or y.min() < 0 or y.max() > 1:
        raise ValueError("labels must lie in [0, 1]")
    hard = np.isin(y, (0.0, 1.0)).all()
    if hard and np.unique(y).size < 2:
        log.warning("training labels contain a single class")
    return X, y


def _fit(layers_flat: list[np.ndarray], X, y, epochs, batch_size, lr, seed, tag, cfg_betas):
    opt = Adam(layers_flat, lr, *cfg_betas)
    rng = stream(seed, "mlp", tag, "shuffle")
    n = X.shape[0]
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            layers = list(zip(layers_flat[0::2], layers_flat[1::2]))
            _, grads = loss_and_grads(layers, X[idx], y[idx])
            opt.step(layers_flat, [g for pair in grads for g in pair])
        layers = list(zip(layers_flat[0::2], layers_flat[1::2]))
        history.append(loss_and_grads(layers, X, y)[0])
    return history


def train(X, y, cfg: TrainConfig = TrainConfig()) -> MlpParams:
    """Fit an MLP with Adam on (soft or hard) labels; deterministic given ``cfg.seed``."""
    X, y = _validate_data(X, y)
    init = init_params([X.shape[1], *cfg.hidden, 1], cfg.seed)
    flat = [a.copy() for a in init.flat()]
    initial_loss = bce_loss(init, X, y)
    history = _fit(flat, X, y, cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed, "train",
                   (cfg.beta1, cfg.beta2, cfg.eps))
    meta = {"seed": int(cfg.seed), "epochs": cfg.epochs, "lr": cfg.lr, "batch_size": cfg.batch_size,
            "initial_loss": initial_loss, "loss_history": history}
    return MlpParams.from_flat(flat, meta)


def finetune(params: MlpParams, X, y, epochs: int, lr: float, seed: int = 0,
             batch_size: int = 32) -> MlpParams:
    """Continue training ``params`` with a fresh Adam state."""
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if epochs == 0:
        return params
    X, y = _validate_data(X, y)
    if X.shape[1] != params.n_features:
        raise nk.ShapeError("finetune", X.shape, (None, params.n_features))
    if not lr > 0:
        raise ValueError("learning rate must be > 0")
    flat = [a.copy() for a in params.flat()]
    history = _fit(flat, X, y, epochs, batch_size, lr, seed, "finetune", (0.9, 0.999, 1e-8))
    meta = dict(params.meta)
    meta["finetune"] = {"epochs": epochs, "lr": lr, "seed": int(seed), "loss_history": history}
    return MlpParams.from_flat(flat, meta)


def prune(params: MlpParams, rate: float) -> MlpParams:
    """Zero the ``floor(rate * n_weights)`` smallest-magnitude weights, globally.

    Biases are never pruned. Ties are broken by position (stable order).
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"pruning rate must be in [0, 1], got {rate}")
    weights = [w for w, _ in params.layers]
    flat = np.concatenate([w.ravel() for w in weights])
    k = int(np.floor(rate * flat.size))
    pruned = flat.copy()
    if k:
        order = np.argsort(np.abs(flat), kind="stable")
        pruned[order[:k]] = 0.0
    layers, pos = [], 0
    for w, b in params.layers:
        layers.append((pruned[pos:pos + w.size].reshape(w.shape), b.copy()))
        pos += w.size
    meta = dict(params.meta)
    meta["pruned_rate"] = rate
    return MlpParams(tuple(layers), meta)


def agreement(a: MlpParams, b: MlpParams, X) -> float:
    """Fraction of rows where both models give the same thresholded label."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("agreement needs a non-empty matrix")
    return float(np.mean(predict_label(a, X) == predict_label(b, X)))


def negate_output(params: MlpParams) -> MlpParams:
    """The same network with its pre-sigmoid output negated."""
    layers = list(params.layers)
    w, b = layers[-1]
    layers[-1] = (-w, -b)
    return replace(params, layers=tuple(layers))


def forward_tensor(weights: Sequence[nk.Tensor], X) -> nk.Tensor:
    """P(y=1|x) on the tape; ``weights`` is the flat ``[W0, b0, W1, b1, ...]`` list."""
    h = X
    n_layers = len(weights) // 2
    for i in range(n_layers):
        h = nk.add(nk.matmul(h, weights[2 * i]), weights[2 * i + 1])
        if i < n_layers - 1:
            h = nk.relu(h)
    return nk.sigmoid(h)


# ---------------------------------------------------------------------------
# persistence


def to_dict(params: MlpParams) -> dict:
    return {
        "format": "cfwatermark.mlp/1",
        "sizes": params.sizes,
        "layers": [{"weight": w.tolist(), "bias": b.ravel().tolist()} for w, b in params.layers],
        "meta": _jsonable(params.meta),
    }


def from_dict(doc: dict) -> MlpParams:
    layers = tuple((np.array(l["weight"], dtype=np.float64).reshape(-1, len(l["bias"])),
                    np.array(l["bias"], dtype=np.float64).reshape(1, -1)) for l in doc["layers"])
    params = MlpParams(layers, dict(doc.get("meta", {})))
    if params.sizes != list(doc["sizes"]):
        raise ValueError(f"layer sizes {params.sizes} do not match declared {doc['sizes']}")
    return params


def save(params: MlpParams, path) -> None:
    Path(path).write_text(json.dumps(to_dict(params)))


def load(path) -> MlpParams:
    return from_dict(json.loads(Path(path).read_text()))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
