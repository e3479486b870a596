"""Brent's method for scalar roots (bisection + secant + inverse quadratic)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

EPS = 2.220446049250313e-16


class NoBracketError(ValueError):
    """f(a) and f(b) share a sign; ``best`` is the endpoint with smaller |f|."""

    def __init__(self, msg, best, f_best):
        super().__init__(msg)
        self.best = best
        self.f_best = f_best


@dataclass(frozen=True)
class RootResult:
    root: float
    f_root: float
    iterations: int
    calls: int
    converged: bool


def brent(f: Callable[[float], float], a: float, b: float, tol: float = 1e-10,
          max_iter: int = 100, ftol: float = 0.0, fa: float | None = None,
          fb: float | None = None) -> RootResult:
    """Root of ``f`` on [a, b]. Never evaluates outside the bracket.

    Stops when the bracket half-width drops below ``tol`` (plus a few ulps of
    the iterate) or |f| <= ``ftol``. Endpoint values may be passed in to save
    evaluations.
    """
    calls = 0
    if fa is None:
        fa = f(a)
        calls += 1
    if fb is None:
        fb = f(b)
        calls += 1
    if fa == 0.0:
        return RootResult(a, 0.0, 0, calls, True)
    if fb == 0.0:
        return RootResult(b, 0.0, 0, calls, True)
    if (fa > 0) == (fb > 0):
        best, fbest = (a, fa) if abs(fa) <= abs(fb) else (b, fb)
        raise NoBracketError(f"no sign change on [{a}, {b}]", best, fbest)

    c, fc = a, fa
    d = e = b - a
    for it in range(1, max_iter + 1):
        if (fb > 0) == (fc > 0):
            c, fc = a, fa
            d = e = b - a
        if abs(fc) < abs(fb):
            a, b, c = b, c, b
            fa, fb, fc = fb, fc, fb
        tol1 = 2.0 * EPS * abs(b) + 0.5 * tol
        xm = 0.5 * (c - b)
        if abs(xm) <= tol1 or abs(fb) <= ftol:
            return RootResult(b, fb, it - 1, calls, True)
        if abs(e) >= tol1 and abs(fa) > abs(fb):
            s = fb / fa
            if a == c:
                p = 2.0 * xm * s
                q = 1.0 - s
            else:
                q = fa / fc
                r = fb / fc
                p = s * (2.0 * xm * q * (q - r) - (b - a) * (r - 1.0))
                q = (q - 1.0) * (r - 1.0) * (s - 1.0)
            if p > 0:
                q = -q
            p = abs(p)
            if 2.0 * p < min(3.0 * xm * q - abs(tol1 * q), abs(e * q)):
                e = d
                d = p / q
            else:
                d = xm
                e = d
        else:
            d = xm
            e = d
        a, fa = b, fb
        if abs(d) > tol1:
            b = b + d
        else:
            b = b + math.copysign(tol1, xm)
        fb = f(b)
        calls += 1
        if fb == 0.0:
            return RootResult(b, 0.0, it, calls, True)
    return RootResult(b, fb, max_iter, calls, False)


def brent_root(f: Callable[[float], float], a: float, b: float, tol: float = 1e-10,
               max_iter: int = 100) -> float:
    return brent(f, a, b, tol, max_iter).root
