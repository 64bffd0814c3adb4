import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cfwatermark import nnmodel, verify
from cfwatermark.verify import PairedSample, paired_t_test, theorem_condition


def reference_test(d, tau):
    """Independent one-sided paired test via scipy."""
    res = stats.ttest_1samp(d - tau, 0.0, alternative="greater")
    return float(res.pvalue), float(res.statistic)


def test_t_cdf_examples():
    assert verify.t_cdf(0.0, 3) == 0.5
    assert verify.t_cdf(1.8125, 10) == pytest.approx(0.95, abs=1e-4)
    assert verify.t_cdf(1.3, 5) + verify.t_cdf(-1.3, 5) == pytest.approx(1.0, abs=1e-15)


def test_t_quantile_examples():
    assert verify.t_quantile(0.5, 8) == pytest.approx(0.0, abs=1e-12)
    assert verify.t_quantile(0.95, 10) == pytest.approx(1.8125, abs=1e-3)
    q = verify.t_quantile(0.975, 20)
    assert abs(verify.t_cdf(q, 20) - 0.975) < 1e-9


@pytest.mark.parametrize("df", [0, 0.5, -1])
def test_invalid_degrees_of_freedom(df):
    with pytest.raises(ValueError):
        verify.t_cdf(1.0, df)


@pytest.mark.parametrize("q", [0.0, 1.0, -0.1, 1.5])
def test_invalid_quantile_level(q):
    with pytest.raises(ValueError):
        verify.t_quantile(q, 5)


def test_equal_probabilities_are_negative():
    p = np.linspace(0.2, 0.8, 20)
    r = paired_t_test(PairedSample(p, p), tau=0.05)
    assert r.mean_diff == 0 and not r.positive


def test_constant_difference_uses_degenerate_rule():
    base = np.full(100, 0.3)
    r = paired_t_test(PairedSample(base + 0.2, base), tau=0.05)
    assert r.sd_diff == 0.0 and r.positive and r.p_value == 0.0
    r = paired_t_test(PairedSample(base + 0.02, base), tau=0.05)
    assert r.sd_diff == 0.0 and not r.positive and r.p_value == 1.0


def test_small_sample_example_rejects():
    d = np.array([0.10, 0.12, 0.08, 0.11, 0.09, 0.13, 0.10, 0.12, 0.09, 0.11])
    r = paired_t_test(PairedSample(0.5 + d, np.full(10, 0.5)), tau=0.05)
    assert r.positive and r.p_value < 1e-6
    p_ref, t_ref = reference_test(d, 0.05)
    assert r.p_value == pytest.approx(p_ref, abs=1e-12)
    assert r.t_stat == pytest.approx(t_ref, rel=1e-6)
    assert theorem_condition(r.mean_diff, r.sum_sq_diff, r.n, 0.05, 0.05)


def test_errors():
    with pytest.raises(ValueError):
        paired_t_test(PairedSample([0.5], [0.4]))
    with pytest.raises(ValueError):
        PairedSample([0.5, 0.6], [0.4])
    with pytest.raises(ValueError):
        PairedSample([0.5, np.nan], [0.4, 0.4])
    with pytest.raises(ValueError):
        theorem_condition(0.5, 0.1, 10)  # sum of squares below n * mean^2


def test_theorem_condition_at_tau_is_false():
    assert not theorem_condition(0.05, 0.05 ** 2 * 10 + 0.01, 10, tau=0.05)


def test_literal_mode_differs_from_corrected():
    rng = np.random.default_rng(1)
    disagree = 0
    for _ in range(500):
        d = rng.normal(0.1, 0.05, size=12)
        args = (d.mean(), float(np.sum(d * d)), d.size)
        disagree += theorem_condition(*args) != theorem_condition(*args, literal=True)
    assert disagree > 0


def test_result_serializes():
    r = paired_t_test(PairedSample([0.9, 0.8, 0.85], [0.5, 0.5, 0.5]))
    doc = r.to_dict()
    assert doc["decision"] in ("positive", "negative")
    json.dumps(doc)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(2, 60), mu=st.floats(-0.2, 0.4), sd=st.floats(1e-3, 0.3), seed=st.integers(0, 2**32 - 1))
def test_matches_reference_and_theorem(n, mu, sd, seed):
    rng = np.random.default_rng(seed)
    p_unwm = rng.uniform(0.05, 0.6, size=n)
    p_wm = np.clip(p_unwm + rng.normal(mu, sd, size=n), 0.0, 1.0)
    r = paired_t_test(PairedSample(p_wm, p_unwm), tau=0.05, alpha=0.05)
    d = p_wm - p_unwm
    if np.ptp(d) == 0:
        return
    p_ref, _ = reference_test(d, 0.05)
    assert abs(r.p_value - p_ref) < 1e-8
    assert theorem_condition(r.mean_diff, r.sum_sq_diff, n, 0.05, 0.05) == r.positive


@settings(max_examples=100, deadline=None)
@given(n=st.integers(3, 40), sd=st.floats(0.01, 0.5), m1=st.floats(-0.5, 0.5), m2=st.floats(-0.5, 0.5))
def test_p_value_monotone_in_mean(n, sd, m1, m2):
    lo, hi = sorted((m1, m2))
    t_lo = math.sqrt(n) * (lo - 0.05) / sd
    t_hi = math.sqrt(n) * (hi - 0.05) / sd
    assert verify.t_sf(t_hi, n - 1) <= verify.t_sf(t_lo, n - 1)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), t1=st.floats(0, 0.3), t2=st.floats(0, 0.3))
def test_raising_tau_never_creates_a_positive(seed, t1, t2):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.1, 0.9, size=15)
    q = np.clip(p + rng.normal(0.1, 0.1, size=15), 0, 1)
    lo, hi = sorted((t1, t2))
    if not paired_t_test(PairedSample(q, p), tau=lo).positive:
        assert not paired_t_test(PairedSample(q, p), tau=hi).positive


def test_constant_half_suspect_is_negative():
    rng = np.random.default_rng(0)
    x_cf = rng.uniform(size=(30, 3))
    r = verify.verify_ownership(lambda X: np.full(len(X), 0.5), x_cf, np.clip(x_cf + 0.03, 0, 1),
                                np.ones(30))
    assert r.mean_diff == 0 and not r.positive


def test_verify_ownership_rejects_wrong_width():
    model = nnmodel.init_params([4, 3, 1], 0)
    x = np.zeros((5, 3))
    with pytest.raises(ValueError):
        verify.verify_ownership(model, x, x, np.ones(5))


def test_verify_ownership_samples_deterministically():
    model = nnmodel.init_params([3, 4, 1], 0)
    rng = np.random.default_rng(2)
    x_cf = rng.uniform(size=(300, 3))
    x_wm = np.clip(x_cf + rng.normal(0, 0.05, size=x_cf.shape), 0, 1)
    lab = rng.integers(0, 2, size=300)
    a = verify.verify_ownership(model, x_cf, x_wm, lab, sample_size=128, seed=5)
    b = verify.verify_ownership(model, x_cf, x_wm, lab, sample_size=128, seed=5)
    assert a.n == 128 and a == b


def test_size_under_null():
    """A suspect with no watermark signal is flagged at most at the nominal rate (tau = 0)."""
    rng = np.random.default_rng(11)
    R, alpha = 400, 0.05
    pos = 0
    for _ in range(R):
        p = rng.uniform(0.2, 0.8, size=40)
        q = np.clip(p + rng.normal(0, 0.05, size=40), 0, 1)
        pos += paired_t_test(PairedSample(q, p), tau=0.0, alpha=alpha).positive
    assert pos / R <= alpha + 3 * math.sqrt(alpha * (1 - alpha) / R)
