"""Small numeric routines shared by environments and harnesses.

Ordinary least squares for the macro regressions, MAE and the sorted-sample
optimal-transport MAE for distribution comparison, and a paired t-test whose
p-value comes from the regularized incomplete beta function.
"""

from __future__ import annotations

import math
from typing import Sequence

from .errors import DegenerateX, LengthMismatch, TooFewSamples, ZeroVariance


def fit_line(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """OLS fit of y = slope*x + intercept; returns (slope, intercept, r).

    Raises :class:`DegenerateX` when all xs coincide. r is the Pearson
    correlation, defined as 0.0 when the ys are constant.
    """
    if len(xs) != len(ys):
        raise LengthMismatch(f"{len(xs)} xs vs {len(ys)} ys")
    n = len(xs)
    if n < 2:
        raise DegenerateX("need at least two points")
    mean_x = math.fsum(xs) / n
    mean_y = math.fsum(ys) / n
    sxx = math.fsum((x - mean_x) ** 2 for x in xs)
    if sxx == 0.0:
        raise DegenerateX("all x values are equal")
    sxy = math.fsum((x - mean_x) * (y - mean_y) for x, y in zip(xs, ys))
    syy = math.fsum((y - mean_y) ** 2 for y in ys)
    slope = sxy / sxx
    intercept = mean_y - slope * mean_x
    r = 0.0 if syy == 0.0 else sxy / math.sqrt(sxx * syy)
    return slope, intercept, r


def mae(a: Sequence[float], b: Sequence[float]) -> float:
    """Mean absolute error between paired lists."""
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} vs {len(b)}")
    if not a:
        raise LengthMismatch("empty samples")
    return math.fsum(abs(x - y) for x, y in zip(a, b)) / len(a)


def sorted_ot_mae(samples_a: Sequence[float], samples_b: Sequence[float]) -> float:
    """1-D optimal transport cost with |.| ground cost: MAE of the sorted pairs."""
    if len(samples_a) != len(samples_b):
        raise LengthMismatch(f"{len(samples_a)} vs {len(samples_b)}")
    return mae(sorted(samples_a), sorted(samples_b))


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    max_iter = 300
    eps = 3e-16
    fpmin = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    # Use the continued fraction directly where it converges fast, else the symmetry.
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def paired_t_test(diffs: Sequence[float]) -> tuple[float, float, int]:
    """One-sample t-test of the paired differences against zero.

    Returns (t, two-sided p, df) with t = mean/(sd/sqrt(n)), df = n-1, and
    p = I_{df/(df+t^2)}(df/2, 1/2).
    """
    n = len(diffs)
    if n < 2:
        raise TooFewSamples(f"need >= 2 differences, got {n}")
    mean = math.fsum(diffs) / n
    var = math.fsum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0:
        raise ZeroVariance("all differences are equal")
    sd = math.sqrt(var)
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return t, p, df


def mean_and_pstdev(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    n = len(values)
    if n == 0:
        raise LengthMismatch("empty values")
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(var)
