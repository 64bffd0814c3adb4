"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4-8 run the full bootstrap experiments from ``configs/`` and take
several minutes each; deselect them with ``-m "not slow"``.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from test_numkit import OPS, check_grad

from cfwatermark import harness, nnmodel, verify
from cfwatermark import watermark as wm
from cfwatermark.harness import ExperimentConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def load_config(name, **overrides):
    doc = json.loads((CONFIGS / name).read_text())
    return ExperimentConfig.from_dict({**doc, **overrides})


def tiny_inputs(n=16, seed=0, mask=None, d=2):
    rng = np.random.default_rng(seed)
    prop = nnmodel.init_params([d, 8, 1], seed)
    xq = rng.uniform(size=(n, d))
    x_cf = np.clip(xq + rng.normal(0, 0.2, size=xq.shape), 0, 1)
    x_tr = rng.uniform(size=(16, d))
    return wm.EmbedInputs(xq, nnmodel.predict_proba(prop, xq), x_cf, 1.0 - nnmodel.predict_label(prop, xq),
                          x_tr, (x_tr.sum(axis=1) > d / 2).astype(float), prop, mask)


# -- 1. gradient correctness ------------------------------------------------

def test_criterion_1_gradients(criterion):
    for name, fn, inputs in OPS:
        check_grad(fn, *inputs, tol=1e-3)
    inp = tiny_inputs()
    theta = np.random.default_rng(2).uniform(-0.03, 0.03, size=inp.x_cf.shape)
    worst = 0.0
    for K in (1, 3):
        cfg = wm.WatermarkConfig(K=K, hidden=(8,), ensembles=1, inner_lr=0.05, lambda3=0.5)
        _, g = wm.outer_gradient(theta, inp, cfg)
        fd = np.zeros_like(theta)
        for i in np.ndindex(theta.shape):
            e = np.zeros_like(theta)
            e[i] = 1e-6
            fd[i] = (wm.outer_gradient(theta + e, inp, cfg)[0] - wm.outer_gradient(theta - e, inp, cfg)[0]) / 2e-6
        worst = max(worst, float(np.abs(g - fd).max() / np.abs(fd).max()))
    criterion(1, worst < 1e-3, f"{len(OPS)} ops within 1e-3; unrolled objective K in {{1,3}} max rel err {worst:.2e}")


# -- 2. statistical core ----------------------------------------------------

def test_criterion_2_statistics(criterion):
    rng = np.random.default_rng(2024)
    worst, agree, total = 0.0, 0, 0
    for _ in range(10_000):
        n = int(rng.integers(2, 129))
        p_unwm = rng.uniform(0.05, 0.9, size=n)
        p_wm = np.clip(p_unwm + rng.normal(rng.uniform(-0.1, 0.3), rng.uniform(0.005, 0.3), size=n), 0, 1)
        d = p_wm - p_unwm
        if np.ptp(d) == 0:
            continue
        r = verify.paired_t_test(verify.PairedSample(p_wm, p_unwm), tau=0.05, alpha=0.05)
        ref = stats.ttest_1samp(d - 0.05, 0.0, alternative="greater").pvalue
        worst = max(worst, abs(r.p_value - ref))
        agree += verify.theorem_condition(r.mean_diff, r.sum_sq_diff, n, 0.05, 0.05) == r.positive
        total += 1
    q = verify.t_quantile(0.95, 10)
    ok = worst < 1e-8 and agree == total and abs(q - 1.8125) <= 1e-3
    criterion(2, ok, f"max |p - p_ref| {worst:.1e} over {total} samples; "
                     f"theorem agreement {agree}/{total}; t_quantile(0.95,10)={q:.4f}")


# -- 3. watermark invariants ------------------------------------------------

_inv_failures: list = []


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), delta=st.floats(0.001, 0.3), T=st.integers(1, 5), K=st.integers(1, 3),
       mask=st.lists(st.booleans(), min_size=3, max_size=3),
       forms=st.tuples(st.sampled_from(wm.LOSS_FORMS), st.sampled_from(wm.LOSS_FORMS)))
def _invariants(seed, delta, T, K, mask, forms):
    inp = tiny_inputs(n=8, seed=seed % 100, mask=mask, d=3)
    cfg = wm.WatermarkConfig(T=T, K=K, delta=delta, hidden=(4,), ensembles=1, seed=seed,
                             poison_form=forms[0], validity_form=forms[1])
    th = wm.embed(inp, cfg).theta
    if np.abs(th).max(initial=0.0) > delta + 1e-12 or np.any(th[:, np.array(mask)] != 0.0):
        _inv_failures.append((seed, delta, mask))
    zero = np.zeros_like(inp.x_cf)
    for form in wm.LOSS_FORMS:
        vals = (wm.poison_loss(inp.proprietary, inp.x_cf, zero, inp.cf_labels, form),
                wm.validity_loss(inp.proprietary, inp.x_cf, zero, inp.cf_labels, form),
                wm.regularization_loss(inp.proprietary, inp.x_cf, zero, inp.cf_labels, form))
        if any(v != 0.0 for v in vals):
            _inv_failures.append(("zero-theta", form, vals))


def test_criterion_3_invariants(criterion):
    _inv_failures.clear()
    _invariants()
    criterion(3, not _inv_failures, f"25 random configs; violations: {_inv_failures[:3] or 'none'}")


# -- 4 and 8. synthetic end-to-end run with robustness sweeps ---------------

@pytest.fixture(scope="module")
def blobs_run():
    cfg = load_config("blobs.json")
    start = time.perf_counter()
    base = harness.run_evaluation(cfg)
    elapsed = time.perf_counter() - start
    return cfg, base, elapsed


@pytest.mark.slow
def test_criterion_4_synthetic_detection(criterion, blobs_run):
    cfg, rep, elapsed = blobs_run
    fp_q = rep.per_attack["querying"]["fpr"]
    ok = (rep.f1 >= 0.85 and fp_q <= 0.15 and elapsed <= 600 and not rep.failures
          and cfg.watermark.delta == 0.05 and cfg.watermark.T == 50 and cfg.watermark.lambda3 >= 0.5)
    tpr = {k: rep.per_attack[k]["tpr"] for k in ("mrce", "dualcf")}
    criterion(4, ok, f"F1 {rep.f1:.3f} (>= 0.85), querying FP rate {fp_q:.2f} (<= 0.15), "
                     f"TPR {tpr}, {elapsed:.0f}s (<= 600s)")


@pytest.mark.slow
def test_criterion_7_regularization_trend(criterion, blobs_run):
    cfg, rep_one, _ = blobs_run
    assert cfg.watermark.lambda3 == 1.0
    (row_zero,) = harness.run_ablation_regularization(cfg, [0.0])
    fp0, fp1 = row_zero["per_attack"]["querying"]["fpr"], rep_one.per_attack["querying"]["fpr"]
    tp1 = harness.rates(rep_one.confusion)["tpr"]
    ok = fp0 - fp1 >= 0.2 and tp1 >= 0.9
    criterion(7, ok, f"querying FP rate lambda3=0: {fp0:.2f}, lambda3=1: {fp1:.2f} (gap >= 0.2); "
                     f"TP rate at lambda3=1: {tp1:.2f} (>= 0.9)")


@pytest.mark.slow
def test_criterion_8_robustness(criterion):
    rep = harness.run_robustness(load_config("blobs.json"))
    rob = rep.robustness
    base = rob["baseline_tpr"]
    ft10 = next(r for r in rob["finetune"] if r["epochs"] == 10)["tpr"]
    pr50 = next(r for r in rob["prune"] if r["rate"] == 0.5)["tpr"]
    agree = [r["agreement"] for r in rob["prune"]]
    ok = ft10 >= 0.9 * base and pr50 >= 0.75
    criterion(8, ok, f"baseline TPR {base:.2f}; after 10 fine-tune epochs {ft10:.2f} (>= {0.9 * base:.2f}); "
                     f"at prune 0.5 {pr50:.2f} (>= 0.75); agreement by prune rate {np.round(agree, 3).tolist()}")


# -- 5 and 6. Cancer run ----------------------------------------------------

@pytest.fixture(scope="module")
def cancer_run():
    cfg = load_config("cancer.json")
    start = time.perf_counter()
    rep = harness.run_evaluation(cfg)
    return cfg, rep, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_5_cancer_detection(criterion, cancer_run):
    cfg, rep, elapsed = cancer_run
    ok = cfg.explainer.method == "growing_sphere" and rep.f1 >= 0.85 and elapsed <= 1800 and not rep.failures
    tpr = {k: rep.per_attack[k]["tpr"] for k in ("mrce", "dualcf")}
    criterion(5, ok, f"F1 {rep.f1:.3f} (>= 0.85), confusion {rep.confusion}, TPR {tpr}, "
                     f"querying FP rate {rep.per_attack['querying']['fpr']:.2f}, {elapsed:.0f}s (<= 1800s)")


@pytest.mark.slow
def test_criterion_6_usability(criterion, cancer_run):
    _, rep, _ = cancer_run
    q = rep.cf_quality
    drop_pp = -q["validity_change_pp"]
    prox_pct = q["proximity_change_pct"]
    ok = drop_pp <= 5.0 and prox_pct <= 5.0 and not math.isnan(prox_pct)
    criterion(6, ok, f"validity {q['validity']:.3f} -> {q['validity_wm']:.3f} (drop {drop_pp:.1f}pp, <= 5pp); "
                     f"proximity {q['proximity']:.3f} -> {q['proximity_wm']:.3f} ({prox_pct:+.1f}%, <= +5%)")
