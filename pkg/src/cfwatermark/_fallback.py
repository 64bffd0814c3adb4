"""Pure-Python versions of the compiled kernels in ``_kernels.pyx``.

Both implementations follow the same algorithms step by step so that they
agree to rounding error; ``tests/test_kernels.py`` checks this.
"""

from math import exp, lgamma, log

_FPMIN = 1e-300
_EPS = 1e-16
_MAX_ITER = 500


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h


def betainc_pair(a: float, b: float, x: float, y: float) -> float:
    """Regularized incomplete beta I_x(a, b) where ``y = 1 - x`` is passed exactly."""
    if x <= 0.0:
        return 0.0
    if y <= 0.0:
        return 1.0
    lbt = lgamma(a + b) - lgamma(a) - lgamma(b) + a * log(x) + b * log(y)
    if x < (a + 1.0) / (a + b + 2.0):
        return exp(lbt) * _betacf(a, b, x) / a
    return 1.0 - exp(lbt) * _betacf(b, a, y) / b


def betainc(a: float, b: float, x: float) -> float:
    if a <= 0.0 or b <= 0.0:
        raise ValueError("betainc requires a > 0 and b > 0")
    if x < 0.0 or x > 1.0:
        raise ValueError("betainc requires 0 <= x <= 1")
    return betainc_pair(a, b, x, 1.0 - x)


def t_tail(t: float, df: float) -> float:
    """P(T > |t|) for Student's t with ``df`` degrees of freedom."""
    t2 = t * t
    denom = df + t2
    return 0.5 * betainc_pair(0.5 * df, 0.5, df / denom, t2 / denom)


def t_cdf(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0.0:
        return 0.5
    tail = t_tail(t, df)
    return 1.0 - tail if t > 0 else tail


def t_sf(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0.0:
        return 0.5
    tail = t_tail(t, df)
    return tail if t > 0 else 1.0 - tail


def t_quantile(q: float, df: float) -> float:
    """Inverse CDF: bracket the upper-tail mass, then bisect to machine precision."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if q == 0.5:
        return 0.0
    upper = q > 0.5
    # solve for the upper-tail mass p = P(T > t), t > 0
    p = 1.0 - q if upper else q
    lo, hi = 0.0, 1.0
    while t_tail(hi, df) > p:
        lo = hi
        hi *= 2.0
        if hi > 1e300:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if t_tail(mid, df) > p:
            lo = mid
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    return t if upper else -t


def t_sf_many(ts, df: float) -> list:
    return [t_sf(float(t), df) for t in ts]
