"""Ownership verification by a one-sided paired t-test.

A suspect model is flagged when its probability for the counterfactual's
training label is, on average, more than ``tau`` higher on watermarked
counterfactuals than on their unwatermarked originals.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ._backend import kernels
from .rng import stream

DEFAULT_TAU = 0.05
DEFAULT_ALPHA = 0.05
DEFAULT_MAX_PAIRS = 128


def _check_df(df) -> float:
    df = float(df)
    if not df >= 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {df}")
    return df


def t_cdf(x: float, df: float) -> float:
    """Student-t CDF through the regularized incomplete beta function."""
    return kernels.t_cdf(float(x), _check_df(df))


def t_sf(x: float, df: float) -> float:
    """Upper tail ``1 - t_cdf(x, df)``, computed without cancellation."""
    return kernels.t_sf(float(x), _check_df(df))


def t_quantile(q: float, df: float) -> float:
    """Inverse of :func:`t_cdf` by bracketed bisection."""
    q = float(q)
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    return kernels.t_quantile(q, _check_df(df))


@dataclass(frozen=True)
class PairedSample:
    p_wm: np.ndarray
    p_unwm: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.p_wm, dtype=np.float64).ravel()
        b = np.asarray(self.p_unwm, dtype=np.float64).ravel()
        if a.shape != b.shape:
            raise ValueError(f"paired sample length mismatch: {a.size} vs {b.size}")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise ValueError("paired sample contains non-finite values")
        object.__setattr__(self, "p_wm", a)
        object.__setattr__(self, "p_unwm", b)

    @property
    def n(self) -> int:
        return int(self.p_wm.size)

    @property
    def differences(self) -> np.ndarray:
        return self.p_wm - self.p_unwm


@dataclass
class VerificationResult:
    mean_diff: float
    sum_sq_diff: float
    sd_diff: float
    t_stat: float
    p_value: float
    tau: float
    alpha: float
    positive: bool
    n: int

    @property
    def decision(self) -> str:
        return "positive" if self.positive else "negative"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decision"] = self.decision
        return d


def paired_t_test(sample: PairedSample, tau: float = DEFAULT_TAU,
                  alpha: float = DEFAULT_ALPHA) -> VerificationResult:
    """Test H0: mean(p_wm - p_unwm) = tau against H1: mean > tau."""
    n = sample.n
    if n < 2:
        raise ValueError(f"paired t-test needs n >= 2, got {n}")
    d = sample.differences
    dbar = float(d.mean())
    dsq = float(np.sum(d * d))
    if np.ptp(d) == 0.0:
        sd = 0.0
        positive = dbar > tau
        t_stat = math.copysign(math.inf, dbar - tau) if dbar != tau else 0.0
        p_value = 0.0 if positive else 1.0
    else:
        sd = float(np.sqrt(np.sum((d - dbar) ** 2) / (n - 1)))
        t_stat = math.sqrt(n) * (dbar - tau) / sd
        p_value = t_sf(t_stat, n - 1)
        positive = p_value < alpha
    return VerificationResult(dbar, dsq, sd, t_stat, p_value, float(tau), float(alpha),
                              bool(positive), n)


def theorem_condition(mean_diff: float, sum_sq_diff: float, n: int, tau: float = DEFAULT_TAU,
                      alpha: float = DEFAULT_ALPHA, literal: bool = False) -> bool:
    """Closed-form rejection condition on (mean difference, sum of squares, n).

    Uses ``sum((d - mean)^2) = sum_sq - n * mean^2``. ``literal=True`` uses
    ``sum_sq + n * mean^2`` instead, for comparison with the printed form; it is
    not equivalent to the t-test.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if literal:
        centered = sum_sq_diff + n * mean_diff ** 2
    else:
        centered = sum_sq_diff - n * mean_diff ** 2
        if centered < -1e-12 * max(1.0, sum_sq_diff):
            raise ValueError(f"inconsistent inputs: sum_sq - n*mean^2 = {centered} < 0")
        centered = max(centered, 0.0)
    tq = t_quantile(1.0 - alpha, n - 1)
    return math.sqrt(n * n - n) * (mean_diff - tau) - tq * math.sqrt(centered) > 0


def _suspect_proba(suspect, X: np.ndarray) -> np.ndarray:
    if hasattr(suspect, "n_features") and suspect.n_features != X.shape[1]:
        raise ValueError(f"suspect expects {suspect.n_features} features, pairs have {X.shape[1]}")
    if hasattr(suspect, "predict_proba"):
        return np.asarray(suspect.predict_proba(X), dtype=np.float64).ravel()
    return np.asarray(suspect(X), dtype=np.float64).ravel()


def label_probability(p_one: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Probability assigned to ``labels`` given P(y=1)."""
    labels = np.asarray(labels, dtype=np.float64).ravel()
    return np.where(labels >= 0.5, p_one, 1.0 - p_one)


def verify_ownership(suspect, x_cf: np.ndarray, x_wm: np.ndarray, labels: np.ndarray,
                     tau: float = DEFAULT_TAU, alpha: float = DEFAULT_ALPHA,
                     sample_size: int | None = DEFAULT_MAX_PAIRS, seed: int = 0) -> VerificationResult:
    """Run the paired test on a suspect's probabilities for the CF labels.

    ``suspect`` is anything with ``predict_proba(X)`` returning P(y=1), or a
    plain callable. ``x_cf`` and ``x_wm`` are index-aligned unwatermarked and
    watermarked counterfactuals; ``labels`` are their training labels.
    """
    x_cf = np.asarray(x_cf, dtype=np.float64)
    x_wm = np.asarray(x_wm, dtype=np.float64)
    if x_cf.shape != x_wm.shape:
        raise ValueError(f"pair shapes differ: {x_cf.shape} vs {x_wm.shape}")
    n_all = x_cf.shape[0]
    if sample_size is not None and sample_size < n_all:
        idx = np.sort(stream(seed, "verify", "sample").choice(n_all, size=sample_size, replace=False))
        x_cf, x_wm, labels = x_cf[idx], x_wm[idx], np.asarray(labels)[idx]
    p_wm = label_probability(_suspect_proba(suspect, x_wm), labels)
    p_unwm = label_probability(_suspect_proba(suspect, x_cf), labels)
    return paired_t_test(PairedSample(p_wm, p_unwm), tau, alpha)
