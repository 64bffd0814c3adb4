"""Dense 2-D arrays with reverse-mode automatic differentiation.

Every value is a 2-D ``float64`` array wrapped in a :class:`Tensor`. While a
:class:`Tape` is active, operations on tensors that depend on a leaf are
appended to the tape in execution order, so the tape is always a valid
topological order. Backward rules are themselves written in terms of tensor
operations: with ``create_graph=True`` the gradient computation is recorded
on the same tape and can be differentiated again. That is what makes it
possible to differentiate through optimizer updates (:func:`unrolled_grad`).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_EPS = 1e-7

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = ", ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_matrix(x, name: str = "value") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array (scalars become 1x1)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"as_matrix({name})", arr.shape)
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def _active_tape() -> "Tape | None":
    tape = getattr(_state, "tape", None)
    if tape is None or not getattr(_state, "recording", True):
        return None
    return tape


class Tensor:
    """A 2-D value, optionally a node on a tape."""

    __slots__ = ("value", "parents", "rule", "tape", "index", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, parents=(), rule=None, tape=None, name=None):
        self.value = value
        self.parents = parents
        self.rule = rule
        self.tape = tape
        self.index = -1
        self.requires_grad = tape is not None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else _raise_item(self)

    def __repr__(self):
        kind = "leaf" if self.requires_grad and self.rule is None else ("node" if self.requires_grad else "const")
        return f"Tensor({kind}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _raise_item(t: Tensor):
    raise ShapeError("item", t.shape)


def const(x) -> Tensor:
    """Wrap ``x`` as a constant (non-differentiable) tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(as_matrix(x))


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim < 2:
        arr = arr.reshape(1, -1) if arr.ndim == 1 else arr.reshape(1, 1)
    return Tensor(arr)


def _make(value: np.ndarray, parents: tuple, rule) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(p.requires_grad and p.tape is tape for p in parents):
        return Tensor(value)
    out = Tensor(value, parents, rule, tape)
    tape._record(out)
    return out


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; leaves are created with :meth:`leaf`. Nodes are
    appended in execution order, so reverse iteration is a valid
    reverse-topological order and each node is visited once per backward pass.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        self._forward_done = False
        self._prev = None

    def __enter__(self):
        self._prev = (getattr(_state, "tape", None), getattr(_state, "recording", True))
        _state.tape = self
        _state.recording = True
        return self

    def __exit__(self, *exc):
        _state.tape, _state.recording = self._prev
        self._forward_done = True
        return False

    def __len__(self):
        return len(self.nodes)

    def _record(self, t: Tensor) -> None:
        t.index = len(self.nodes)
        self.nodes.append(t)

    def leaf(self, value, name: str | None = None) -> Tensor:
        t = Tensor(as_matrix(value, name or "leaf"), tape=self, name=name)
        self._record(t)
        self.leaves.append(t)
        return t

    def forward(self, fn: Callable[..., Tensor], *leaves, shapes: Sequence[tuple[int, int]] | None = None):
        """Run ``fn`` on fresh leaves built from ``leaves`` and record it.

        ``shapes`` optionally declares the expected leaf shapes.
        """
        if shapes is not None:
            for i, (v, s) in enumerate(zip(leaves, shapes)):
                got = np.shape(as_matrix(v))
                if tuple(got) != tuple(s):
                    raise ShapeError(f"forward(leaf {i})", tuple(s), tuple(got))
        with self:
            ts = [self.leaf(v, name=f"leaf{i}") for i, v in enumerate(leaves)]
            out = fn(*ts)
        if not np.isfinite(out.value).all():
            raise NonFiniteError("forward produced a non-finite value")
        return out

    def backward(self, output: Tensor) -> list[np.ndarray]:
        """Gradients of a scalar ``output`` for every leaf of this tape."""
        if not self._forward_done and getattr(_state, "tape", None) is not self:
            raise TapeError("backward called before forward")
        if output.tape is not self:
            raise TapeError("output was not recorded on this tape")
        grads = grad(output, self.leaves)
        return [g.value for g in grads]


class no_grad:
    """Suspend recording on the active tape."""

    def __enter__(self):
        self._prev = getattr(_state, "recording", True)
        _state.recording = False

    def __exit__(self, *exc):
        _state.recording = self._prev
        return False


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False,
         seed: Tensor | None = None) -> list[Tensor]:
    """Reverse-mode gradient of ``output`` with respect to ``wrt``.

    ``output`` must be 1x1 unless ``seed`` (the upstream adjoint) is given.
    Unreached inputs get zero gradients. With ``create_graph`` the returned
    gradients are tape nodes and can be differentiated again.
    """
    tape = output.tape
    if tape is None or not output.requires_grad:
        return [Tensor(np.zeros_like(w.value)) for w in wrt]
    if seed is None:
        if output.value.size != 1:
            raise ShapeError("grad(seed)", output.shape)
        seed = Tensor(np.ones_like(output.value))
    elif seed.shape != output.shape:
        raise ShapeError("grad(seed)", seed.shape, output.shape)

    prev_tape = getattr(_state, "tape", None)
    prev_rec = getattr(_state, "recording", True)
    _state.tape = tape
    _state.recording = bool(create_graph)
    try:
        adj: dict[int, Tensor] = {output.index: seed}
        nodes = tape.nodes
        # adjoints of nodes older than the oldest target cannot reach a target
        stop = min((w.index for w in wrt if w.tape is tape and w.requires_grad), default=output.index + 1)
        for i in range(output.index, stop - 1, -1):
            g = adj.get(i)
            if g is None:
                continue
            node = nodes[i]
            if node.rule is None:
                continue
            pgrads = node.rule(g, node)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad or p.tape is not tape:
                    continue
                prev = adj.get(p.index)
                adj[p.index] = pg if prev is None else add(prev, pg)
        out = []
        for w in wrt:
            g = adj.get(w.index) if (w.tape is tape and w.requires_grad) else None
            out.append(g if g is not None else Tensor(np.zeros_like(w.value)))
        return out
    finally:
        _state.tape = prev_tape
        _state.recording = prev_rec


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(op, a, b)
    return tuple(out)


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    """Sum ``a`` down to ``shape`` (inverse of broadcasting)."""
    if a.shape == tuple(shape):
        return a
    v = a.value
    if shape[0] == 1 and v.shape[0] != 1:
        v = v.sum(axis=0, keepdims=True)
    if shape[1] == 1 and v.shape[1] != 1:
        v = v.sum(axis=1, keepdims=True)
    if v.shape != tuple(shape):
        raise ShapeError("sum_to", a.shape, tuple(shape))
    src = a.shape
    return _make(v, (a,), lambda g, n: (broadcast_to(g, src),))


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    if a.shape == tuple(shape):
        return a
    _broadcast_shape("broadcast_to", a.shape, tuple(shape))
    src = a.shape
    v = np.broadcast_to(a.value, shape).copy()
    return _make(v, (a,), lambda g, n: (sum_to(g, src),))


# ---------------------------------------------------------------------------
# elementwise binary ops


def _is_num(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def add(a, b) -> Tensor:
    if _is_num(b):
        a = _lift(a)
        c = float(b)
        return _make(a.value + c, (a,), lambda g, n: (g,))
    if _is_num(a):
        return add(b, a)
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g, n: (sum_to(g, sa), sum_to(g, sb)))


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.value, (a,), lambda g, n: (neg(g),))


def sub(a, b) -> Tensor:
    if _is_num(b):
        return add(a, -float(b))
    if _is_num(a):
        return add(neg(b), float(a))
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g, n: (sum_to(g, sa), neg(sum_to(g, sb))))


def mul(a, b) -> Tensor:
    if _is_num(b):
        a = _lift(a)
        c = float(b)
        return _make(a.value * c, (a,), lambda g, n: (mul(g, c),))
    if _is_num(a):
        return mul(b, a)
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.value * b.value, (a, b),
                 lambda g, n: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)))


def div(a, b) -> Tensor:
    if _is_num(b):
        return mul(a, 1.0 / float(b))
    a, b = _lift(a), _lift(b)
    _broadcast_shape("div", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def rule(g, n):
        ga = sum_to(div(g, b), sa)
        gb = sum_to(neg(div(mul(g, n), b)), sb)
        return ga, gb

    return _make(a.value / b.value, (a, b), rule)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make(a.value @ b.value, (a, b),
                 lambda g, n: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a) -> Tensor:
    a = _lift(a)
    return _make(a.value.T.copy(), (a,), lambda g, n: (transpose(g),))


# ---------------------------------------------------------------------------
# elementwise unary ops


def relu(a) -> Tensor:
    a = _lift(a)
    mask = (a.value > 0).astype(np.float64)
    return _make(a.value * mask, (a,), lambda g, n: (mul(g, Tensor(mask)),))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    v = a.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _make(out, (a,), lambda g, n: (mul(g, mul(n, sub(1.0, n))),))


def log(a) -> Tensor:
    a = _lift(a)
    if (a.value <= 0).any():
        raise NonFiniteError("log of a non-positive value; clamp first")
    return _make(np.log(a.value), (a,), lambda g, n: (div(g, a),))


def exp(a) -> Tensor:
    a = _lift(a)
    return _make(np.exp(a.value), (a,), lambda g, n: (mul(g, n),))


def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0 (subgradient)."""
    a = _lift(a)
    out = np.sqrt(a.value)
    zero = (out == 0).astype(np.float64)

    def rule(g, n):
        if zero.any():
            safe = add(n, Tensor(zero))
            return (mul(div(mul(g, 0.5), safe), Tensor(1.0 - zero)),)
        return (div(mul(g, 0.5), n),)

    return _make(out, (a,), rule)


def square(a) -> Tensor:
    a = _lift(a)
    return _make(a.value * a.value, (a,), lambda g, n: (mul(g, mul(a, 2.0)),))


def abs_(a) -> Tensor:
    a = _lift(a)
    s = np.sign(a.value)
    return _make(np.abs(a.value), (a,), lambda g, n: (mul(g, Tensor(s)),))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes through inside, 0 outside."""
    a = _lift(a)
    v = a.value
    mask = ((v >= lo) & (v <= hi)).astype(np.float64)
    return _make(np.clip(v, lo, hi), (a,), lambda g, n: (mul(g, Tensor(mask)),))


def clamp_prob(a) -> Tensor:
    return clamp(a, PROB_EPS, 1.0 - PROB_EPS)


# ---------------------------------------------------------------------------
# reductions and indexing


def sum_(a, axis: int | None = None) -> Tensor:
    a = _lift(a)
    if axis is None:
        v = a.value.sum().reshape(1, 1)
    else:
        v = a.value.sum(axis=axis, keepdims=True)
    src = a.shape
    return _make(v, (a,), lambda g, n: (broadcast_to(g, src),))


def mean(a, axis: int | None = None) -> Tensor:
    a = _lift(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / count)


def take_rows(a, idx) -> Tensor:
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    nrows = a.shape[0]
    return _make(a.value[idx], (a,), lambda g, n: (scatter_rows(g, idx, nrows),))


def scatter_rows(a, idx, nrows: int) -> Tensor:
    """Inverse of :func:`take_rows`: add rows of ``a`` into a zero matrix."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((nrows, a.shape[1]))
    np.add.at(out, idx, a.value)
    return _make(out, (a,), lambda g, n: (take_rows(g, idx),))


def concat_rows(parts: Sequence) -> Tensor:
    parts = [_lift(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError("concat_rows", *[p.shape for p in parts])
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def rule(g, n):
        return tuple(take_rows(g, np.arange(bounds[i], bounds[i + 1])) for i in range(len(parts)))

    return _make(np.vstack([p.value for p in parts]), tuple(parts), rule)


# ---------------------------------------------------------------------------
# losses shared by several modules


def bce(p, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against (soft) targets ``y``."""
    p = clamp_prob(p)
    y = _lift(y)
    return neg(mean(add(mul(y, log(p)), mul(sub(1.0, y), log(sub(1.0, p))))))


def bce_logits(z, y) -> Tensor:
    """Binary cross-entropy on logits, clamped per the probability guard."""
    return bce(sigmoid(z), y)


# ---------------------------------------------------------------------------
# differentiable optimizer steps


class DiffAdam:
    """Adam whose moment accumulators are tape values.

    ``step`` takes parameter tensors and gradient tensors (typically produced
    with ``create_graph=True``) and returns new parameter tensors that remain
    differentiable functions of whatever the gradients depend on.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 m=None, v=None, t: int = 0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = m
        self.v = v
        self.t = t

    def step(self, params: Sequence[Tensor], grads: Sequence[Tensor]) -> list[Tensor]:
        if self.m is None:
            self.m = [Tensor(np.zeros_like(p.value)) for p in params]
            self.v = [Tensor(np.zeros_like(p.value)) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 / (1.0 - b1 ** self.t)
        c2 = 1.0 / (1.0 - b2 ** self.t)
        new_params, new_m, new_v = [], [], []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m = add(mul(m, b1), mul(g, 1.0 - b1))
            v = add(mul(v, b2), mul(square(g), 1.0 - b2))
            denom = add(sqrt(mul(v, c2)), self.eps)
            new_params.append(sub(p, mul(div(m, denom), self.lr * c1)))
            new_m.append(m)
            new_v.append(v)
        self.m, self.v = new_m, new_v
        return new_params

    def detached_state(self):
        """Moment values as plain arrays (for warm-starting the next unroll)."""
        if self.m is None:
            return None, None, self.t
        return [m.value.copy() for m in self.m], [v.value.copy() for v in self.v], self.t


def sgd_step(params: Sequence[Tensor], grads: Sequence[Tensor], lr: float) -> list[Tensor]:
    return [sub(p, mul(g, lr)) for p, g in zip(params, grads)]


def unrolled_grad(init_params: Sequence[np.ndarray], theta: np.ndarray,
                  inner_loss: Callable[[list[Tensor], Tensor, int], Tensor],
                  outer_loss: Callable[[list[Tensor], Tensor], Tensor],
                  k: int, step: Callable | str = "sgd", lr: float = 0.1) -> tuple[np.ndarray, float]:
    """Gradient of ``outer_loss(w_K(theta), theta)`` with respect to ``theta``.

    ``w_0 = init_params`` are constants; ``w_{j+1}`` is one optimizer step on
    ``inner_loss(w_j, theta, j)``. With ``k == 0`` the weights are constants
    and the result is the plain gradient through the frozen model.
    ``step`` is ``"sgd"``, ``"adam"`` or a callable ``(params, grads) -> params``.
    Returns ``(gradient, outer_loss_value)``.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    with Tape() as tape:
        th = tape.leaf(theta, name="theta")
        params = [Tensor(as_matrix(p)) for p in init_params]
        if k > 0:
            params = [tape.leaf(p.value, name=f"w{i}") for i, p in enumerate(params)]
        if step == "adam":
            opt = DiffAdam(lr)
            step_fn = opt.step
        elif step == "sgd":
            step_fn = lambda ps, gs: sgd_step(ps, gs, lr)  # noqa: E731
        else:
            step_fn = step
        for j in range(k):
            loss = inner_loss(params, th, j)
            gs = grad(loss, params, create_graph=True)
            params = step_fn(params, gs)
        out = outer_loss(params, th)
    (g,) = grad(out, [th])
    if not np.isfinite(g.value).all():
        raise NonFiniteError("unrolled gradient is not finite")
    return g.value, out.item()


def value_and_grad(fn: Callable[..., Tensor], *args) -> tuple[float, list[np.ndarray]]:
    """Evaluate scalar ``fn`` on fresh leaves and return (value, gradients)."""
    tape = Tape()
    out = tape.forward(fn, *args)
    return out.item(), tape.backward(out)


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = fn(x)
        x[i] = orig - h
        fm = fn(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def parameters_to_tensors(arrays: Iterable[np.ndarray]) -> list[Tensor]:
    return [Tensor(as_matrix(a)) for a in arrays]
