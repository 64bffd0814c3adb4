"""Embedding bounded per-instance watermarks into counterfactual explanations.

The watermark is a perturbation ``theta`` added to the served counterfactuals
(``x_cf + theta``, clipped to [0, 1]) with ``|theta|_inf <= delta``. It is
chosen by projected sign-gradient ascent on

    L = l1 * poison(surrogate) - l2 * validity(proprietary) - l3 * regularization(benign)

where the surrogate is a simulated extracted model trained on the queries, a
sample of the defender's training data and the watermarked counterfactuals,
and the benign model is trained without the counterfactuals. Each outer step
advances both by K Adam steps; the surrogate's steps are kept on the tape so
the gradient of L flows back through them into ``theta``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nnmodel
from . import numkit as nk
from .nnmodel import MlpParams
from .rng import derive_seed, stream

LOSS_FORMS = ("log_diff", "kl", "residual")


class EmbeddingDiverged(FloatingPointError):
    def __init__(self, iteration: int, detail: str):
        self.iteration = iteration
        super().__init__(f"watermark embedding diverged at outer iteration {iteration}: {detail}")


@dataclass(frozen=True)
class WatermarkConfig:
    T: int = 50
    K: int = 10
    delta: float = 0.05
    step_size: float | None = None
    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 1.0
    ensembles: int = 4
    inner_lr: float = 0.01
    inner_batch: int | None = None
    hidden: tuple = (32, 32)
    poison_form: str = "log_diff"
    validity_form: str = "kl"
    reinit_each_step: bool = False
    train_sample_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if self.T < 1 or self.K < 1 or self.ensembles < 1:
            raise ValueError("T, K and ensembles must all be >= 1")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be >= 0")
        for form in (self.poison_form, self.validity_form):
            if form not in LOSS_FORMS:
                raise ValueError(f"unknown loss form {form!r}; expected one of {LOSS_FORMS}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step size must be > 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.delta / self.T

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EmbedInputs:
    """Everything the defender knows when watermarking one attack session.

    ``cf_labels`` are the labels an extractor would train the counterfactuals
    with (the flip of the thresholded prediction on the source point).
    """

    x_query: np.ndarray
    p_query: np.ndarray
    x_cf: np.ndarray
    cf_labels: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    proprietary: MlpParams
    mask: np.ndarray | None = None

    def __post_init__(self):
        f = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
        self.x_query, self.x_cf = np.atleast_2d(f(self.x_query)), np.atleast_2d(f(self.x_cf))
        self.x_train = f(self.x_train).reshape(-1, self.x_cf.shape[1])
        self.p_query, self.cf_labels, self.y_train = (f(a).ravel() for a in (self.p_query, self.cf_labels, self.y_train))
        d = self.x_cf.shape[1]
        if self.x_query.shape[1] != d or self.proprietary.n_features != d:
            raise nk.ShapeError("EmbedInputs", self.x_query.shape, self.x_cf.shape)
        if self.p_query.size != self.x_query.shape[0] or self.cf_labels.size != self.x_cf.shape[0]:
            raise ValueError("labels must align with their rows")
        if self.y_train.size != self.x_train.shape[0]:
            raise ValueError("training labels must align with training rows")
        if not np.isin(self.cf_labels, (0.0, 1.0)).all():
            raise ValueError("counterfactual labels must be hard 0/1 labels")
        self.mask = np.zeros(d, dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool).ravel()


@dataclass
class WatermarkTheta:
    theta: np.ndarray
    delta: float
    mask: np.ndarray
    provenance: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    def check(self, atol: float = 1e-12) -> None:
        if not np.isfinite(self.theta).all():
            raise nk.NonFiniteError("theta has non-finite entries")
        if np.abs(self.theta).max(initial=0.0) > self.delta + atol:
            raise ValueError("theta leaves the l-inf ball")
        if np.any(self.theta[:, self.mask] != 0.0):
            raise ValueError("theta perturbs an immutable column")

    def to_dict(self) -> dict:
        return {
            "format": "cfwatermark.theta/1",
            "shape": list(self.theta.shape),
            "theta": self.theta.ravel().tolist(),
            "delta": self.delta,
            "mask": self.mask.astype(int).tolist(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "WatermarkTheta":
        theta = np.array(doc["theta"], dtype=np.float64).reshape(doc["shape"])
        return cls(theta, float(doc["delta"]), np.array(doc["mask"], dtype=bool), dict(doc.get("provenance", {})))

    def save(self, path, trace_path=None) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))
        if trace_path is not None:
            write_trace(self.trace, trace_path)


def write_trace(trace: list, path) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")


def apply(theta, x_cf) -> np.ndarray:
    """Watermarked counterfactuals ``clip(x_cf + theta, 0, 1)``."""
    t = theta.theta if isinstance(theta, WatermarkTheta) else np.asarray(theta, dtype=np.float64)
    return np.clip(np.asarray(x_cf, dtype=np.float64) + t, 0.0, 1.0)


# ---------------------------------------------------------------------------
# losses


def divergence(p_new, p_old, form: str) -> float:
    """Mean over rows of the chosen comparison between two probability vectors."""
    p_new = np.clip(np.asarray(p_new, dtype=np.float64), nk.PROB_EPS, 1 - nk.PROB_EPS)
    p_old = np.clip(np.asarray(p_old, dtype=np.float64), nk.PROB_EPS, 1 - nk.PROB_EPS)
    if form == "log_diff":
        v = np.log(p_new) - np.log(p_old)
    elif form == "kl":
        v = p_new * np.log(p_new / p_old) + (1 - p_new) * np.log((1 - p_new) / (1 - p_old))
    elif form == "residual":
        v = p_new - p_old
    else:
        raise ValueError(f"unknown loss form {form!r}")
    return float(np.mean(v))


def _divergence_t(p_new: nk.Tensor, p_old: nk.Tensor, form: str) -> nk.Tensor:
    p_new, p_old = nk.clamp_prob(p_new), nk.clamp_prob(p_old)
    if form == "log_diff":
        return nk.mean(nk.sub(nk.log(p_new), nk.log(p_old)))
    if form == "kl":
        q_new, q_old = nk.sub(1.0, p_new), nk.sub(1.0, p_old)
        a = nk.mul(p_new, nk.sub(nk.log(p_new), nk.log(p_old)))
        b = nk.mul(q_new, nk.sub(nk.log(q_new), nk.log(q_old)))
        return nk.mean(nk.add(a, b))
    if form == "residual":
        return nk.mean(nk.sub(p_new, p_old))
    raise ValueError(f"unknown loss form {form!r}")


def _label_prob_t(p_one: nk.Tensor, labels: np.ndarray) -> nk.Tensor:
    y = labels.reshape(-1, 1)
    # y * p + (1 - y) * (1 - p) = (1 - y) + (2y - 1) * p
    return nk.add(nk.mul(p_one, nk.Tensor(2.0 * y - 1.0)), nk.Tensor(1.0 - y))


def _pair_probs(model: MlpParams, x_cf, theta, labels):
    x_cf = np.asarray(x_cf, dtype=np.float64)
    x_wm = apply(theta, x_cf)
    lab = np.asarray(labels, dtype=np.float64).ravel()
    p_wm = nnmodel.predict_proba(model, x_wm)
    p_cf = nnmodel.predict_proba(model, x_cf)
    return np.where(lab >= 0.5, p_wm, 1 - p_wm), np.where(lab >= 0.5, p_cf, 1 - p_cf)


def poison_loss(surrogate: MlpParams, x_cf, theta, labels, form: str = "log_diff") -> float:
    """Surrogate's gain in confidence on the CF labels from watermarking."""
    return divergence(*_pair_probs(surrogate, x_cf, theta, labels), form)


def validity_loss(proprietary: MlpParams, x_cf, theta, labels=None, form: str = "kl") -> float:
    """Change of the proprietary model's output caused by watermarking (KL by default)."""
    if labels is None:
        labels = np.ones(np.asarray(x_cf).shape[0])
    return divergence(*_pair_probs(proprietary, x_cf, theta, labels), form)


def regularization_loss(benign: MlpParams, x_cf, theta, labels, form: str = "log_diff") -> float:
    """The poison loss evaluated on a benign model."""
    return poison_loss(benign, x_cf, theta, labels, form)


def outer_objective(cfg: WatermarkConfig, poison: float, validity: float, reg: float) -> float:
    return cfg.lambda1 * poison - cfg.lambda2 * validity - cfg.lambda3 * reg


# ---------------------------------------------------------------------------
# inner models


@dataclass
class _InnerModel:
    flat: list
    m: list | None = None
    v: list | None = None
    t: int = 0

    @classmethod
    def fresh(cls, sizes, seed):
        return cls([a.copy() for a in nnmodel.init_params(sizes, seed).flat()])


class _Ensemble:
    """One (surrogate, benign) model pair with its minibatch stream."""

    def __init__(self, sizes, cfg: WatermarkConfig, index: int):
        self.sizes, self.cfg, self.index = sizes, cfg, index
        self.surrogate = _InnerModel.fresh(sizes, derive_seed(cfg.seed, "embed", "w1", index))
        self.benign = _InnerModel.fresh(sizes, derive_seed(cfg.seed, "embed", "w2", index))
        self.rng = stream(cfg.seed, "embed", "batch", index)
        self.reinits = 0

    def reinit(self):
        self.reinits += 1
        seed, i, r = self.cfg.seed, self.index, self.reinits
        self.surrogate = _InnerModel.fresh(self.sizes, derive_seed(seed, "embed", "w1", i, r))
        self.benign = _InnerModel.fresh(self.sizes, derive_seed(seed, "embed", "w2", i, r))

    def batches(self, n: int, k: int) -> list:
        b = self.cfg.inner_batch
        if b is None or b >= n:
            return [None] * k
        return [np.sort(self.rng.choice(n, size=b, replace=False)) for _ in range(k)]


def _unrolled_surrogate(state: _InnerModel, data: nk.Tensor, labels: np.ndarray, batches, lr: float) -> list:
    """K differentiable Adam steps; returns the final weights as tape values."""
    tape = nk._active_tape()
    params = [tape.leaf(a) for a in state.flat]
    opt = nk.DiffAdam(lr, m=None if state.m is None else [nk.Tensor(a) for a in state.m],
                      v=None if state.v is None else [nk.Tensor(a) for a in state.v], t=state.t)
    y_all = labels.reshape(-1, 1)
    for idx in batches:
        if idx is None:
            xb, yb = data, y_all
        else:
            xb, yb = nk.take_rows(data, idx), y_all[idx]
        loss = nk.bce(nnmodel.forward_tensor(params, xb), nk.Tensor(yb))
        grads = nk.grad(loss, params, create_graph=True)
        params = opt.step(params, grads)
    state.flat = [p.value.copy() for p in params]
    state.m, state.v, state.t = opt.detached_state()
    return params


def _plain_steps(state: _InnerModel, X: np.ndarray, y: np.ndarray, batches, lr: float) -> None:
    opt = nnmodel.Adam(state.flat, lr)
    if state.m is not None:
        opt.m, opt.v, opt.t = state.m, state.v, state.t
    for idx in batches:
        xb, yb = (X, y) if idx is None else (X[idx], y[idx])
        layers = list(zip(state.flat[0::2], state.flat[1::2]))
        _, grads = nnmodel.loss_and_grads(layers, xb, yb)
        opt.step(state.flat, [g for pair in grads for g in pair])
    state.m, state.v, state.t = opt.m, opt.v, opt.t


def _project(theta: np.ndarray, x_cf: np.ndarray, delta: float, mask: np.ndarray) -> np.ndarray:
    theta = np.clip(theta, -delta, delta)
    theta[:, mask] = 0.0
    return np.clip(x_cf + theta, 0.0, 1.0) - x_cf


@dataclass
class _EmbedData:
    """Fixed arrays shared by every outer iteration."""
    x_clean: np.ndarray
    y_clean: np.ndarray
    y_surrogate: np.ndarray
    x_cf: np.ndarray
    labels: np.ndarray
    prop_w: list
    p_prop_cf: nk.Tensor

    @classmethod
    def build(cls, inputs: EmbedInputs) -> "_EmbedData":
        x_clean = np.vstack([inputs.x_query, inputs.x_train])
        y_clean = np.concatenate([inputs.p_query, inputs.y_train])
        lab = inputs.cf_labels
        p = nnmodel.predict_proba(inputs.proprietary, inputs.x_cf)
        p = nk.Tensor(np.where(lab >= 0.5, p, 1 - p).reshape(-1, 1))
        return cls(x_clean, y_clean, np.concatenate([y_clean, lab]), inputs.x_cf, lab,
                   [nk.Tensor(a) for a in inputs.proprietary.flat()], p)


def _member_terms(ens: _Ensemble, theta: np.ndarray, data: _EmbedData, cfg: WatermarkConfig):
    """Gradient of lambda1 * poison - lambda3 * reg for one pair; advances its state."""
    n_clean, lab, x_cf = data.x_clean.shape[0], data.labels, data.x_cf
    batches = ens.batches(n_clean + x_cf.shape[0], cfg.K)
    with nk.Tape() as tape:
        th = tape.leaf(theta, name="theta")
        x_wm = nk.add(nk.Tensor(x_cf), th)
        rows = nk.concat_rows([nk.Tensor(data.x_clean), x_wm])
        surrogate = _unrolled_surrogate(ens.surrogate, rows, data.y_surrogate, batches, cfg.inner_lr)
        # the benign model never sees the counterfactuals; draw its batches from the clean rows only
        clean_batches = [None if b is None else b[b < n_clean] for b in batches]
        _plain_steps(ens.benign, data.x_clean, data.y_clean, clean_batches, cfg.inner_lr)
        benign = [nk.Tensor(a) for a in ens.benign.flat]
        poison = _divergence_t(_label_prob_t(nnmodel.forward_tensor(surrogate, x_wm), lab),
                               _label_prob_t(nnmodel.forward_tensor(surrogate, nk.Tensor(x_cf)), lab),
                               cfg.poison_form)
        reg = _divergence_t(_label_prob_t(nnmodel.forward_tensor(benign, x_wm), lab),
                            _label_prob_t(nnmodel.forward_tensor(benign, nk.Tensor(x_cf)), lab),
                            cfg.poison_form)
        total = nk.sub(nk.mul(poison, cfg.lambda1), nk.mul(reg, cfg.lambda3))
    (g,) = nk.grad(total, [th])
    return g.value, poison.item(), reg.item()


def _validity_terms(theta: np.ndarray, data: _EmbedData, cfg: WatermarkConfig):
    with nk.Tape() as tape:
        th = tape.leaf(theta, name="theta")
        x_wm = nk.add(nk.Tensor(data.x_cf), th)
        p_new = _label_prob_t(nnmodel.forward_tensor(data.prop_w, x_wm), data.labels)
        validity = _divergence_t(p_new, data.p_prop_cf, cfg.validity_form)
    (gv,) = nk.grad(validity, [th])
    return gv.value, validity.item()


def outer_gradient(theta, inputs: EmbedInputs, cfg: WatermarkConfig) -> tuple[float, np.ndarray]:
    """Outer objective and its gradient at ``theta`` from freshly initialised pairs.

    Same computation as the first step of :func:`embed` but evaluated at an
    arbitrary theta, so it can be checked against finite differences.
    """
    theta = np.asarray(theta, dtype=np.float64)
    data = _EmbedData.build(inputs)
    sizes = [inputs.x_cf.shape[1], *cfg.hidden, 1]
    grad_sum = np.zeros_like(theta)
    poison_acc = reg_acc = 0.0
    for e in range(cfg.ensembles):
        g, poison, reg = _member_terms(_Ensemble(sizes, cfg, e), theta, data, cfg)
        grad_sum += g
        poison_acc += poison
        reg_acc += reg
    gv, val = _validity_terms(theta, data, cfg)
    E = cfg.ensembles
    return outer_objective(cfg, poison_acc / E, val, reg_acc / E), grad_sum / E - cfg.lambda2 * gv


# ---------------------------------------------------------------------------
# embedding


def embed(inputs: EmbedInputs, cfg: WatermarkConfig = WatermarkConfig(), provenance: dict | None = None,
          record_steps: bool = False) -> WatermarkTheta:
    """Optimise theta for one batch of counterfactuals.

    Outer loop: K inner Adam steps per ensemble pair, one sign-gradient
    ascent step on L averaged over pairs, then projection (l-inf clamp,
    immutable columns zeroed, ``x_cf + theta`` kept inside [0, 1]).
    With ``record_steps`` each trace record also carries the pre-projection
    theta.
    """
    x_cf, mask = inputs.x_cf, inputs.mask
    sizes = [x_cf.shape[1], *cfg.hidden, 1]
    ensembles = [_Ensemble(sizes, cfg, e) for e in range(cfg.ensembles)]
    data = _EmbedData.build(inputs)
    theta = np.zeros_like(x_cf)
    trace = []
    alpha = cfg.alpha
    for it in range(cfg.T):
        grad_sum = np.zeros_like(theta)
        poison_acc = reg_acc = 0.0
        for ens in ensembles:
            if cfg.reinit_each_step:
                ens.reinit()
            g, poison, reg = _member_terms(ens, theta, data, cfg)
            grad_sum += g
            poison_acc += poison
            reg_acc += reg
        gv, val = _validity_terms(theta, data, cfg)

        E = len(ensembles)
        grad_total = grad_sum / E - cfg.lambda2 * gv
        poison_m, reg_m = poison_acc / E, reg_acc / E
        objective = outer_objective(cfg, poison_m, val, reg_m)
        if not (np.isfinite(grad_total).all() and math.isfinite(objective)):
            raise EmbeddingDiverged(it, f"objective={objective}, finite grad={np.isfinite(grad_total).all()}")
        rec = {"iteration": it, "poison": poison_m, "validity": val, "regularization": reg_m, "L": objective}
        grad_total[:, mask] = 0.0
        stepped = theta + alpha * np.sign(grad_total)
        if record_steps:
            rec["theta_before_projection"] = stepped.tolist()
        trace.append(rec)
        theta = _project(stepped, x_cf, cfg.delta, mask)

    prov = {"config_digest": cfg.digest(), "config": cfg.to_dict()}
    prov.update(provenance or {})
    out = WatermarkTheta(theta, cfg.delta, mask.copy(), prov, trace)
    out.check()
    return out
