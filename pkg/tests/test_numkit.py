import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfwatermark import nnmodel
from cfwatermark import numkit as nk


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def check_grad(fn, *inputs, tol=1e-4, h=1e-5):
    """Compare tape gradients of scalar fn against central differences for every input."""
    _, grads = nk.value_and_grad(fn, *inputs)
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = [nk.const(a) for a in inputs]
            args[i] = nk.const(xi)
            with nk.no_grad():
                return fn(*args).item()
        fd = nk.finite_difference(f, x, h)
        assert rel_err(grads[i], fd) < tol, (i, grads[i], fd)


rng = np.random.default_rng(0)
A = rng.normal(size=(3, 4))
B = rng.normal(size=(3, 4))
C = rng.normal(size=(4, 2))
POS = rng.uniform(0.5, 2.0, size=(3, 4))
ROW = rng.normal(size=(1, 4))


OPS = [
    ("add", lambda a, b: nk.sum_(nk.mul(nk.add(a, b), a)), (A, B)),
    ("add_broadcast", lambda a, r: nk.sum_(nk.square(nk.add(a, r))), (A, ROW)),
    ("sub", lambda a, b: nk.sum_(nk.square(nk.sub(a, b))), (A, B)),
    ("neg", lambda a: nk.sum_(nk.mul(nk.neg(a), a)), (A,)),
    ("mul", lambda a, b: nk.sum_(nk.mul(a, b)), (A, B)),
    ("div", lambda a, p: nk.sum_(nk.div(a, p)), (A, POS)),
    ("matmul", lambda a, c: nk.sum_(nk.square(nk.matmul(a, c))), (A, C)),
    ("transpose", lambda a, c: nk.sum_(nk.matmul(nk.transpose(c), nk.transpose(a))), (A, C)),
    ("relu", lambda a: nk.sum_(nk.mul(nk.relu(a), a)), (A + 0.05,)),
    ("sigmoid", lambda a: nk.sum_(nk.sigmoid(a)), (A,)),
    ("log", lambda p: nk.sum_(nk.log(p)), (POS,)),
    ("exp", lambda a: nk.sum_(nk.exp(a)), (A,)),
    ("sqrt", lambda p: nk.sum_(nk.sqrt(p)), (POS,)),
    ("abs", lambda a: nk.sum_(nk.abs_(a)), (A,)),
    ("clamp", lambda a: nk.sum_(nk.square(nk.clamp(a, -0.5, 0.5))), (A,)),
    ("mean_axis0", lambda a: nk.sum_(nk.square(nk.mean(a, axis=0))), (A,)),
    ("sum_axis1", lambda a: nk.sum_(nk.square(nk.sum_(a, axis=1))), (A,)),
    ("take_rows", lambda a: nk.sum_(nk.square(nk.take_rows(a, np.array([2, 0, 2])))), (A,)),
    ("concat_rows", lambda a, b: nk.sum_(nk.mul(nk.concat_rows([a, b]), nk.concat_rows([b, a]))), (A, B)),
    ("bce", lambda z: nk.bce(nk.sigmoid(z), nk.const(np.array([[1.0], [0.0], [0.3]]))), (A[:, :1],)),
    ("bce_logits", lambda z: nk.bce_logits(z, nk.const(np.array([[1.0], [0.0], [0.3]]))), (A[:, :1],)),
]


@pytest.mark.parametrize("name,fn,inputs", OPS)
def test_op_gradients_match_finite_differences(name, fn, inputs):
    check_grad(fn, *inputs)


def test_log_sigmoid_derivative_at_zero():
    _, (g,) = nk.value_and_grad(lambda t: nk.log(nk.sigmoid(t)), np.zeros((1, 1)))
    assert g[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_second_order_gradient():
    # d2/dx2 of sum(x^3) = 6x
    x = np.array([[0.5, -1.0, 2.0]])
    with nk.Tape() as tape:
        t = tape.leaf(x)
        y = nk.sum_(nk.mul(nk.mul(t, t), t))
        (g,) = nk.grad(y, [t], create_graph=True)
        s = nk.sum_(g)
    (h,) = nk.grad(s, [t])
    np.testing.assert_allclose(h.value, 6 * x, rtol=1e-12)


def _tiny_problem(seed=0, rows=16):
    r = np.random.default_rng(seed)
    X = r.uniform(size=(rows, 2))
    y = (X[:, :1] + X[:, 1:] > 1.0).astype(float)
    init = [a.copy() for a in nnmodel.init_params([2, 8, 1], seed).flat()]
    theta0 = r.normal(scale=0.05, size=(4, 2))
    x_cf = r.uniform(0.2, 0.8, size=(4, 2))
    cf_lab = np.array([[1.0], [0.0], [1.0], [0.0]])

    def inner(params, th, j):
        data = nk.concat_rows([nk.const(X), nk.add(nk.const(x_cf), th)])
        lab = nk.const(np.vstack([y, cf_lab]))
        return nk.bce(nnmodel.forward_tensor(params, data), lab)

    def outer(params, th):
        p = nnmodel.forward_tensor(params, nk.add(nk.const(x_cf), th))
        return nk.mean(nk.log(nk.clamp_prob(p)))

    def outer_value(th_arr, k, step, lr):
        with nk.no_grad():
            params = [nk.const(a) for a in init]
            opt = nk.DiffAdam(lr) if step == "adam" else None
            th = nk.const(th_arr)
            for j in range(k):
                with nk.Tape() as tape:
                    ps = [tape.leaf(p.value) for p in params]
                    loss = inner(ps, nk.const(th_arr), j)
                gs = nk.grad(loss, ps)
                with nk.no_grad():
                    params = opt.step(params, gs) if opt else nk.sgd_step(params, gs, lr)
            return outer(params, th).item()

    return init, theta0, inner, outer, outer_value


@pytest.mark.parametrize("k,step", [(1, "sgd"), (3, "sgd"), (1, "adam"), (3, "adam")])
def test_unrolled_gradient_matches_finite_differences(k, step):
    init, theta0, inner, outer, outer_value = _tiny_problem()
    lr = 0.1 if step == "sgd" else 0.05
    g, val = nk.unrolled_grad(init, theta0, inner, outer, k, step=step, lr=lr)
    assert val == pytest.approx(outer_value(theta0, k, step, lr), rel=1e-12)
    fd = nk.finite_difference(lambda t: outer_value(t, k, step, lr), theta0, 1e-5)
    assert rel_err(g, fd) < 1e-4


def test_unrolled_k0_is_frozen_gradient():
    init, theta0, inner, outer, _ = _tiny_problem()
    g0, _ = nk.unrolled_grad(init, theta0, inner, outer, 0)
    _, (g,) = nk.value_and_grad(lambda th: outer([nk.const(a) for a in init], th), theta0)
    np.testing.assert_allclose(g0, g, rtol=1e-12)


def test_gradient_accumulates_over_reuse():
    _, (g,) = nk.value_and_grad(lambda a: nk.sum_(nk.add(nk.mul(a, 3.0), nk.mul(a, a))), A)
    np.testing.assert_allclose(g, 3.0 + 2 * A)


def test_unreached_leaf_gets_zero_gradient():
    with nk.Tape() as tape:
        a, b = tape.leaf(A), tape.leaf(B)
        y = nk.sum_(nk.square(a))
    ga, gb = nk.grad(y, [a, b])
    assert np.all(gb.value == 0)
    np.testing.assert_allclose(ga.value, 2 * A)


def test_relu_subgradient_at_zero_is_zero():
    _, (g,) = nk.value_and_grad(lambda a: nk.sum_(nk.relu(a)), np.array([[0.0, 1.0, -1.0]]))
    np.testing.assert_array_equal(g, [[0.0, 1.0, 0.0]])


def test_sqrt_gradient_at_zero_is_zero():
    _, (g,) = nk.value_and_grad(lambda a: nk.sum_(nk.sqrt(a)), np.array([[0.0, 4.0]]))
    np.testing.assert_allclose(g, [[0.0, 0.25]])


def test_clamped_probability_stays_finite():
    with nk.Tape() as tape:
        p = tape.leaf(np.array([[0.0], [1.0]]))
        loss = nk.bce(p, nk.const(np.array([[1.0], [0.0]])))
    (g,) = nk.grad(loss, [p])
    assert np.isfinite(loss.item()) and np.isfinite(g.value).all()
    assert np.all(g.value == 0)  # outside the clamp range


def test_shape_mismatch_names_operation_and_shapes():
    with pytest.raises(nk.ShapeError, match=r"matmul.*\(3, 4\).*\(3, 4\)"):
        nk.matmul(nk.const(A), nk.const(B))
    with pytest.raises(nk.ShapeError):
        nk.add(nk.const(A), nk.const(C))


def test_backward_before_forward_raises():
    tape = nk.Tape()
    with pytest.raises(nk.TapeError):
        tape.backward(nk.const(np.ones((1, 1))))


def test_backward_on_foreign_output_raises():
    t1 = nk.Tape()
    out = t1.forward(lambda a: nk.sum_(a), A)
    t2 = nk.Tape()
    t2.forward(lambda a: nk.sum_(a), A)
    with pytest.raises(nk.TapeError):
        t2.backward(out)


def test_nonfinite_input_rejected():
    with pytest.raises(nk.NonFiniteError):
        nk.as_matrix(np.array([[np.nan]]))


def test_no_grad_records_nothing():
    with nk.Tape() as tape:
        a = tape.leaf(A)
        with nk.no_grad():
            nk.sum_(nk.square(a))
    assert len(tape) == 1


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite),
       st.floats(-2, 2), st.floats(-2, 2))
def test_gradient_is_linear_in_the_loss(x, w, a, b):
    f1 = lambda t: nk.sum_(nk.mul(nk.sigmoid(t), nk.const(w)))  # noqa: E731
    f2 = lambda t: nk.sum_(nk.square(t))  # noqa: E731
    _, (g1,) = nk.value_and_grad(f1, x)
    _, (g2,) = nk.value_and_grad(f2, x)
    _, (g,) = nk.value_and_grad(lambda t: nk.add(nk.mul(f1(t), a), nk.mul(f2(t), b)), x)
    np.testing.assert_allclose(g, a * g1 + b * g2, rtol=1e-10, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite))
def test_gradient_is_deterministic(x):
    f = lambda t: nk.sum_(nk.log(nk.clamp_prob(nk.sigmoid(nk.matmul(t, nk.const(C[:2]))))))  # noqa: E731
    _, g1 = nk.value_and_grad(f, x)
    _, g2 = nk.value_and_grad(f, x)
    assert np.array_equal(g1[0], g2[0])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 2), elements=st.floats(-2, 2)))
def test_mlp_gradient_matches_manual_backprop(x):
    params = nnmodel.init_params([2, 4, 1], 3)
    y = np.array([1.0, 0.0])
    _, grads = nnmodel.loss_and_grads(params.layers, x, y)
    with nk.Tape() as tape:
        ws = [tape.leaf(a) for a in params.flat()]
        loss = nk.bce(nnmodel.forward_tensor(ws, nk.const(x)), nk.const(y.reshape(-1, 1)))
    tg = nk.grad(loss, ws)
    manual = [g for pair in grads for g in pair]
    for a, b in zip(tg, manual):
        np.testing.assert_allclose(a.value, b, rtol=1e-9, atol=1e-12)
