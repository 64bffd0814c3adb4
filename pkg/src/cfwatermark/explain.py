"""Counterfactual generation and CF quality metrics.

Two explainers are provided: a gradient method that minimises
``(F(x') - y_cf)^2 + lambda_cf * |x' - x|_1`` by projected (sub)gradient
descent, and growing spheres, a random search over expanding l2 shells
followed by a greedy sparsification pass. Immutable columns are never moved
and every counterfactual stays in [0, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nnmodel
from .nnmodel import MlpParams
from .rng import stream

THRESHOLD = 0.5


@dataclass(frozen=True)
class CfConfig:
    method: str = "growing_sphere"
    max_iter: int = 1000
    step_size: float = 0.05
    lambda_cf: float = 0.1
    eta: float = 0.02
    samples_per_shell: int = 100
    max_shells: int = 50
    sparsify: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("gradient", "growing_sphere"):
            raise ValueError(f"unknown CF method {self.method!r}")
        if self.max_iter < 1 or self.max_shells < 1:
            raise ValueError("max iterations must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")


@dataclass
class CfBatch:
    x: np.ndarray
    x_cf: np.ndarray
    y_cf: np.ndarray
    valid: np.ndarray
    radius: np.ndarray | None = None
    row_ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.x_cf = np.asarray(self.x_cf, dtype=np.float64)
        if self.x.shape != self.x_cf.shape:
            raise ValueError(f"originals {self.x.shape} and counterfactuals {self.x_cf.shape} differ in shape")
        self.y_cf = np.asarray(self.y_cf, dtype=np.float64).ravel()
        self.valid = np.asarray(self.valid, dtype=bool).ravel()
        if self.row_ids is None:
            self.row_ids = np.arange(self.x.shape[0])

    def __len__(self):
        return int(self.x.shape[0])

    def to_csv(self, path) -> None:
        d = self.x_cf.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row_id", *[f"cf_{j}" for j in range(d)], "target", "valid"])
            for rid, row, t, v in zip(self.row_ids, self.x_cf, self.y_cf, self.valid):
                w.writerow([int(rid), *[repr(float(c)) for c in row], int(t), int(v)])


def target_labels(model: MlpParams, X) -> np.ndarray:
    """CF target: the flip of the model's thresholded prediction."""
    return 1.0 - nnmodel.predict_label(model, X).astype(np.float64)


def _mask(mask, d) -> np.ndarray:
    if mask is None:
        return np.zeros(d, dtype=bool)
    mask = np.asarray(mask, dtype=bool).ravel()
    if mask.size != d:
        raise ValueError(f"immutable mask has {mask.size} entries for {d} features")
    return mask


def _is_valid(model, X, target) -> np.ndarray:
    return (nnmodel.predict_proba(model, X) >= THRESHOLD).astype(np.float64) == target


def gradient_cf(model: MlpParams, X, cfg: CfConfig = CfConfig(method="gradient"), mask=None,
                target=None) -> CfBatch:
    """Projected gradient descent on the squared-error plus L1 distance objective, batched over rows.

    Returns, per row, the iterate with the lowest objective among valid
    iterates (or among all iterates if none was valid).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    m = _mask(mask, d)
    free = (~m).astype(np.float64)
    tgt = target_labels(model, X) if target is None else np.asarray(target, dtype=np.float64).ravel()

    cur = X.copy()
    best = X.copy()
    best_obj = np.full(n, np.inf)
    best_valid = np.zeros(n, dtype=bool)
    for _ in range(cfg.max_iter + 1):
        p = nnmodel.predict_proba(model, cur)
        obj = (p - tgt) ** 2 + cfg.lambda_cf * np.abs(cur - X).sum(axis=1)
        valid = (p >= THRESHOLD).astype(np.float64) == tgt
        better = (valid & ~best_valid) | ((valid == best_valid) & (obj < best_obj))
        best[better] = cur[better]
        best_obj[better] = obj[better]
        best_valid |= valid
        g = nnmodel.input_gradient(model, cur, 2.0 * (p - tgt))
        g += cfg.lambda_cf * np.sign(cur - X)
        cur = np.clip(cur - cfg.step_size * g * free, 0.0, 1.0)
        cur[:, m] = X[:, m]
    # rows already at the target keep x itself
    already = _is_valid(model, X, tgt)
    best[already] = X[already]
    best[:, m] = X[:, m]
    return CfBatch(X, best, tgt, _is_valid(model, best, tgt))


def _shell_sample(rng, center, free_idx, r_in, r_out, k) -> tuple[np.ndarray, np.ndarray]:
    dm = free_idx.size
    direction = rng.normal(size=(k, dm))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    u = rng.uniform(size=k)
    radius = (u * (r_out ** dm - r_in ** dm) + r_in ** dm) ** (1.0 / dm)
    pts = np.repeat(center[None, :], k, axis=0)
    pts[:, free_idx] += direction * radius[:, None]
    return np.clip(pts, 0.0, 1.0), radius


def _sparsify(model, x, cf, target, free_idx) -> np.ndarray:
    # restore coordinates to x, smallest change first, while the CF stays valid
    cf = cf.copy()
    order = free_idx[np.argsort(np.abs(cf[free_idx] - x[free_idx]), kind="stable")]
    for j in order:
        if cf[j] == x[j]:
            continue
        trial = cf.copy()
        trial[j] = x[j]
        if _is_valid(model, trial[None, :], np.array([target]))[0]:
            cf = trial
    return cf


def growing_sphere_one(model: MlpParams, x, cfg: CfConfig, rng, mask=None, target=None):
    """Growing spheres for one row; returns ``(x_cf, valid, radius)``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    m = _mask(mask, x.size)
    tgt = float(target_labels(model, x[None, :])[0] if target is None else target)
    if _is_valid(model, x[None, :], np.array([tgt]))[0]:
        return x.copy(), True, 0.0
    free_idx = np.flatnonzero(~m)
    if free_idx.size == 0:
        return x.copy(), False, 0.0
    best, best_score = x.copy(), -np.inf
    for shell in range(cfg.max_shells):
        r_in, r_out = shell * cfg.eta, (shell + 1) * cfg.eta
        pts, _ = _shell_sample(rng, x, free_idx, r_in, r_out, cfg.samples_per_shell)
        p = nnmodel.predict_proba(model, pts)
        score = p if tgt == 1.0 else 1.0 - p
        hit = (p >= THRESHOLD) == (tgt == 1.0)
        if hit.any():
            cand = np.flatnonzero(hit)
            dist = np.linalg.norm(pts[cand] - x, axis=1)
            cf = pts[cand[np.argmin(dist)]]
            if cfg.sparsify:
                cf = _sparsify(model, x, cf, tgt, free_idx)
            cf[m] = x[m]
            return cf, True, r_out
        j = int(np.argmax(score))
        if score[j] > best_score:
            best, best_score = pts[j].copy(), score[j]
    best[m] = x[m]
    return best, False, cfg.max_shells * cfg.eta


def growing_sphere_cf(model: MlpParams, X, cfg: CfConfig = CfConfig(), mask=None, target=None,
                      stream_key=("cf",)) -> CfBatch:
    """Growing spheres for every row; row ``i`` uses stream ``(seed, *stream_key, i)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    tgt = target_labels(model, X) if target is None else np.asarray(target, dtype=np.float64).ravel()
    out = np.empty_like(X)
    valid = np.zeros(X.shape[0], dtype=bool)
    radius = np.zeros(X.shape[0])
    for i in range(X.shape[0]):
        rng = stream(cfg.seed, *stream_key, "row", i)
        out[i], valid[i], radius[i] = growing_sphere_one(model, X[i], cfg, rng, mask, tgt[i])
    return CfBatch(X, out, tgt, valid, radius)


def generate(model: MlpParams, X, cfg: CfConfig, mask=None, stream_key=("cf",)) -> CfBatch:
    if cfg.method == "gradient":
        return gradient_cf(model, X, cfg, mask)
    return growing_sphere_cf(model, X, cfg, mask, stream_key=stream_key)


def validity(batch: CfBatch, model: MlpParams, x_cf=None) -> float:
    """Fraction of counterfactuals whose thresholded prediction equals the target."""
    x_cf = batch.x_cf if x_cf is None else x_cf
    if len(batch) == 0:
        return float("nan")
    return float(np.mean(_is_valid(model, x_cf, batch.y_cf)))


def proximity(batch: CfBatch, x_cf=None) -> float:
    """Mean l1 distance between inputs and counterfactuals."""
    x_cf = batch.x_cf if x_cf is None else x_cf
    if len(batch) == 0:
        return float("nan")
    return float(np.mean(np.abs(np.asarray(x_cf) - batch.x).sum(axis=1)))


def load_cf_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Read a CF CSV written by :meth:`CfBatch.to_csv`: (row_ids, x_cf, target, valid)."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    body = np.array([[float(v) for v in r] for r in rows[1:]]) if len(rows) > 1 else np.zeros((0, 3))
    return body[:, 0].astype(int), body[:, 1:-2], body[:, -2], body[:, -1].astype(bool)
