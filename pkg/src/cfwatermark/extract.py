"""Model-extraction attacks against a defended prediction + explanation service.

The service answers prediction queries with the proprietary model's
probability and CF queries with watermarked counterfactuals only. Unwatermarked counterfactuals stay
inside the service, which keeps them so the defender can later run the paired
verification test.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import explain, nnmodel
from . import watermark as wm
from .nnmodel import MlpParams, TrainConfig
from .rng import derive_seed, stream

ATTACKS = ("querying", "mrce", "dualcf")
CF_ATTACKS = ("mrce", "dualcf")


class BudgetError(ValueError):
    pass


@dataclass
class QueryLog:
    predictions: int = 0
    counterfactuals: int = 0

    def to_dict(self) -> dict:
        return {"predictions": self.predictions, "counterfactuals": self.counterfactuals}


@dataclass
class ServedBatch:
    """CF pairs the defender released in one session.

    ``x_cf`` is the defender-side unwatermarked copy; only ``x_wm`` is handed
    to the attacker.
    """

    x_src: np.ndarray
    x_cf: np.ndarray
    x_wm: np.ndarray
    labels: np.ndarray
    theta: wm.WatermarkTheta | None


class DefenderService:
    """Black-box front end for the proprietary model that watermarks every CF it releases.

    ``x_train``/``y_train`` are the defender's own data; a sample of them is
    mixed into each embedding problem. ``watermark=False`` serves raw CFs
    (used to check the pipeline is transparent when theta is zero).
    """

    def __init__(self, model: MlpParams, cf_cfg: explain.CfConfig, wm_cfg: wm.WatermarkConfig,
                 x_train: np.ndarray, y_train: np.ndarray, mask=None, seed: int = 0,
                 watermark: bool = True, per_round_dual: bool = False, provenance: dict | None = None):
        self.model = model
        self.cf_cfg = cf_cfg
        self.wm_cfg = wm_cfg
        self.x_train = np.asarray(x_train, dtype=np.float64)
        self.y_train = np.asarray(y_train, dtype=np.float64).ravel()
        self.mask = np.zeros(model.n_features, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        self.seed = seed
        self.watermark = watermark
        self.per_round_dual = per_round_dual
        self.provenance = dict(provenance or {})
        # one embedding per session key; repeated requests reuse it
        self._cache: dict = {}

    def session(self, key) -> "Session":
        return Session(self, key)

    # -- defender internals ---------------------------------------------------

    def predict(self, X) -> np.ndarray:
        return nnmodel.predict_proba(self.model, X)

    def explain_raw(self, X, *stream_key) -> explain.CfBatch:
        return explain.generate(self.model, X, self.cf_cfg, self.mask, stream_key=("cf", *stream_key))

    def _train_sample(self, n: int, *key) -> tuple[np.ndarray, np.ndarray]:
        size = self.wm_cfg.train_sample_size if self.wm_cfg.train_sample_size is not None else n
        if size == 0 or self.x_train.shape[0] == 0:
            return np.zeros((0, self.model.n_features)), np.zeros(0)
        rng = stream(self.seed, "embed", "train_sample", *key)
        idx = rng.choice(self.x_train.shape[0], size=size, replace=size > self.x_train.shape[0])
        return self.x_train[idx], self.y_train[idx]

    def watermark_batch(self, x_query, x_cf, cf_labels, key) -> wm.WatermarkTheta:
        key = tuple(key)
        if key not in self._cache:
            self._cache[key] = self._embed(x_query, x_cf, cf_labels, key)
        return self._cache[key]

    def _embed(self, x_query, x_cf, cf_labels, key) -> wm.WatermarkTheta:
        x_query = np.asarray(x_query, dtype=np.float64)
        if not self.watermark:
            return wm.WatermarkTheta(np.zeros_like(x_cf), self.wm_cfg.delta, self.mask.copy(),
                                     {"disabled": True})
        xt, yt = self._train_sample(x_query.shape[0], *key)
        inputs = wm.EmbedInputs(x_query, self.predict(x_query), x_cf, cf_labels, xt, yt, self.model, self.mask)
        cfg = self.wm_cfg
        cfg = wm.WatermarkConfig(**{**cfg.to_dict(), "seed": derive_seed(cfg.seed, "embed", *key)})
        prov = {**self.provenance, "session": [str(k) for k in key], "base_config_digest": self.wm_cfg.digest()}
        return wm.embed(inputs, cfg, provenance=prov)


class Session:
    """One attacker's view of the service: a query log and the released batches."""

    def __init__(self, service: DefenderService, key):
        self.service = service
        self.key = key if isinstance(key, tuple) else (key,)
        self.log = QueryLog()
        self.retained: list[ServedBatch] = []

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        self.log.predictions += X.shape[0]
        return self.service.predict(X)

    def counterfactuals(self, X, *tag) -> ServedBatch:
        """Watermarked CFs for ``X``; the embedding sees ``X`` with the proprietary model's scores."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.log.counterfactuals += X.shape[0]
        raw = self.service.explain_raw(X, *self.key, *tag)
        theta = self.service.watermark_batch(X, raw.x_cf, raw.y_cf, (*self.key, *tag))
        batch = ServedBatch(X, raw.x_cf, wm.apply(theta, raw.x_cf), raw.y_cf, theta)
        self.retained.append(batch)
        return batch

    def dual_counterfactuals(self, X) -> tuple[ServedBatch, ServedBatch]:
        """Two-round DualCF exchange, released together.

        Round one explains ``X``; round two explains the round-one CFs. With
        the default joint mode a single theta covers both rounds.
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        svc = self.service
        self.log.counterfactuals += 2 * X.shape[0]
        r1 = svc.explain_raw(X, *self.key, "dual", "r1")
        r2 = svc.explain_raw(r1.x_cf, *self.key, "dual", "r2")
        if svc.per_round_dual:
            t1 = svc.watermark_batch(X, r1.x_cf, r1.y_cf, (*self.key, "dual", "r1"))
            t2 = svc.watermark_batch(r1.x_cf, r2.x_cf, r2.y_cf, (*self.key, "dual", "r2"))
            thetas = (t1, t2)
        else:
            joint = svc.watermark_batch(np.vstack([X, r1.x_cf]), np.vstack([r1.x_cf, r2.x_cf]),
                                        np.concatenate([r1.y_cf, r2.y_cf]), (*self.key, "dual"))
            n = X.shape[0]
            thetas = tuple(wm.WatermarkTheta(joint.theta[s], joint.delta, joint.mask, joint.provenance,
                                             joint.trace) for s in (slice(0, n), slice(n, None)))
        out = []
        for src, raw, th in zip((X, r1.x_cf), (r1, r2), thetas):
            b = ServedBatch(src, raw.x_cf, wm.apply(th, raw.x_cf), raw.y_cf, th)
            self.retained.append(b)
            out.append(b)
        return out[0], out[1]


@dataclass
class AttackTranscript:
    kind: str
    budget: int
    x_query: np.ndarray
    served: list
    model: MlpParams
    positive: bool
    log: QueryLog = field(default_factory=QueryLog)

    def verification_pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x_cf, x_wm, labels) over every batch this session received."""
        if not self.served:
            return np.zeros((0, self.model.n_features)), np.zeros((0, self.model.n_features)), np.zeros(0)
        return (np.vstack([b.x_cf for b in self.served]), np.vstack([b.x_wm for b in self.served]),
                np.concatenate([b.labels for b in self.served]))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "budget": self.budget,
            "positive": self.positive,
            "query_log": self.log.to_dict(),
            "n_query_rows": int(self.x_query.shape[0]),
            "n_served_cfs": int(sum(b.x_wm.shape[0] for b in self.served)),
            "served_wm": [b.x_wm.tolist() for b in self.served],
            "model": nnmodel.to_dict(self.model),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(nnmodel._jsonable(self.to_dict()), fh)


def _check_budget(M: int, rows: np.ndarray, even: bool) -> None:
    if M <= 0:
        raise BudgetError(f"query budget must be positive, got {M}")
    if even and M % 2:
        raise BudgetError(f"this attack splits its budget in half; M={M} is odd")
    if M > rows.shape[0]:
        raise BudgetError(f"budget {M} exceeds the {rows.shape[0]} available attack rows")


def _fit(X, y, cfg: TrainConfig) -> MlpParams:
    return nnmodel.train(X, y, cfg)


def querying_attack(session: Session, rows, M: int, cfg: TrainConfig) -> AttackTranscript:
    """Surrogate trained on ``M`` (input, proprietary score) pairs."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    _check_budget(M, rows, even=False)
    X = rows[:M]
    p = session.predict(X)
    model = _fit(X, p, cfg)
    return AttackTranscript("querying", M, X, [], model, False, session.log)


def mrce_attack(session: Session, rows, M: int, cfg: TrainConfig) -> AttackTranscript:
    """M/2 prediction queries plus their M/2 (watermarked) counterfactuals."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    _check_budget(M, rows, even=True)
    X = rows[: M // 2]
    p = session.predict(X)
    served = session.counterfactuals(X)
    model = _fit(np.vstack([X, served.x_wm]), np.concatenate([p, served.labels]), cfg)
    return AttackTranscript("mrce", M, X, [served], model, True, session.log)


def dualcf_attack(session: Session, rows, M: int, cfg: TrainConfig) -> AttackTranscript:
    """Surrogate trained on M/2 CFs and the M/2 CFs of those CFs."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    _check_budget(M, rows, even=True)
    X = rows[: M // 2]
    session.predict(X)
    r1, r2 = session.dual_counterfactuals(X)
    model = _fit(np.vstack([r1.x_wm, r2.x_wm]), np.concatenate([r1.labels, r2.labels]), cfg)
    return AttackTranscript("dualcf", M, X, [r1, r2], model, True, session.log)


ATTACK_FNS = {"querying": querying_attack, "mrce": mrce_attack, "dualcf": dualcf_attack}


def run_attack(kind: str, session: Session, rows, M: int, cfg: TrainConfig) -> AttackTranscript:
    try:
        fn = ATTACK_FNS[kind]
    except KeyError:
        raise ValueError(f"unknown attack {kind!r}; expected one of {ATTACKS}") from None
    return fn(session, rows, M, cfg)
