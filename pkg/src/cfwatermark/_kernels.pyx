# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Student-t kernels (regularized incomplete beta, CDF, quantile).

Mirrors ``_fallback.py`` line for line.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, lgamma, log, fabs

cnp.import_array()

cdef double FPMIN = 1e-300
cdef double EPS = 1e-16
cdef int MAX_ITER = 500


cdef double _betacf(double a, double b, double x) noexcept nogil:
    cdef double qab = a + b
    cdef double qap = a + 1.0
    cdef double qam = a - 1.0
    cdef double c = 1.0
    cdef double d = 1.0 - qab * x / qap
    cdef double h, aa, delta
    cdef int m, m2
    if fabs(d) < FPMIN:
        d = FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if fabs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if fabs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if fabs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if fabs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if fabs(delta - 1.0) < EPS:
            break
    return h


cdef double _betainc_pair(double a, double b, double x, double y) noexcept nogil:
    cdef double lbt
    if x <= 0.0:
        return 0.0
    if y <= 0.0:
        return 1.0
    lbt = lgamma(a + b) - lgamma(a) - lgamma(b) + a * log(x) + b * log(y)
    if x < (a + 1.0) / (a + b + 2.0):
        return exp(lbt) * _betacf(a, b, x) / a
    return 1.0 - exp(lbt) * _betacf(b, a, y) / b


cdef double _t_tail(double t, double df) noexcept nogil:
    cdef double t2 = t * t
    cdef double denom = df + t2
    return 0.5 * _betainc_pair(0.5 * df, 0.5, df / denom, t2 / denom)


def betainc_pair(double a, double b, double x, double y):
    return _betainc_pair(a, b, x, y)


def betainc(double a, double b, double x):
    if a <= 0.0 or b <= 0.0:
        raise ValueError("betainc requires a > 0 and b > 0")
    if x < 0.0 or x > 1.0:
        raise ValueError("betainc requires 0 <= x <= 1")
    return _betainc_pair(a, b, x, 1.0 - x)


def t_tail(double t, double df):
    return _t_tail(t, df)


def t_cdf(double t, double df):
    cdef double tail
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0.0:
        return 0.5
    tail = _t_tail(t, df)
    return 1.0 - tail if t > 0 else tail


def t_sf(double t, double df):
    cdef double tail
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0.0:
        return 0.5
    tail = _t_tail(t, df)
    return tail if t > 0 else 1.0 - tail


def t_quantile(double q, double df):
    cdef double p, lo, hi, mid, t
    cdef bint upper
    cdef int i
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if q == 0.5:
        return 0.0
    upper = q > 0.5
    p = 1.0 - q if upper else q
    lo = 0.0
    hi = 1.0
    while _t_tail(hi, df) > p:
        lo = hi
        hi *= 2.0
        if hi > 1e300:
            break
    for i in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if _t_tail(mid, df) > p:
            lo = mid
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    return t if upper else -t


def t_sf_many(ts, double df):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] arr = np.ascontiguousarray(ts, dtype=np.float64).ravel()
    cdef Py_ssize_t n = arr.shape[0], i
    cdef double t, tail
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    for i in range(n):
        t = arr[i]
        if t == 0.0:
            o[i] = 0.5
            continue
        tail = _t_tail(t, df)
        o[i] = tail if t > 0 else 1.0 - tail
    return out
