import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from aerocap.roots import NoBracketError, brent, brent_root


def test_simple_roots():
    assert brent_root(lambda x: x * x - 2.0, 0.0, 2.0, tol=1e-14) == pytest.approx(math.sqrt(2), abs=1e-13)
    assert brent_root(math.cos, 0.0, 3.0, tol=1e-14) == pytest.approx(math.pi / 2, abs=1e-13)


def test_exact_endpoint_root():
    res = brent(lambda x: x - 1.0, 1.0, 3.0)
    assert res.root == 1.0 and res.converged and res.iterations == 0


def test_no_bracket_reports_best_endpoint():
    with pytest.raises(NoBracketError) as info:
        brent(lambda x: x * x + 1.0, -2.0, 0.5)
    assert info.value.best == 0.5
    assert info.value.f_best == pytest.approx(1.25)


def test_stays_inside_bracket():
    seen = []

    def f(x):
        seen.append(x)
        return math.tanh(50 * (x - 0.3)) + 0.01

    brent(f, 0.0, 1.0, tol=1e-12)
    assert all(0.0 <= x <= 1.0 for x in seen)


def test_ftol_stop_and_iteration_cap():
    res = brent(lambda x: x - 0.123456, 0.0, 1.0, ftol=1e-2)
    assert abs(res.f_root) <= 1e-2
    res = brent(lambda x: x ** 3 - 0.5, 0.0, 1.0, tol=0.0, max_iter=3)
    assert not res.converged and res.iterations == 3


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(0.1, 10), st.integers(1, 3))
def test_matches_scipy(root, scale, power):
    odd = 2 * power - 1

    def f(x):
        return scale * (x - root) ** odd + 0.1 * (x - root)

    a, b = root - 3.7, root + 6.1
    mine = brent_root(f, a, b, tol=1e-12)
    ref = brentq(f, a, b, xtol=1e-12)
    assert mine == pytest.approx(ref, abs=1e-9)
    assert mine == pytest.approx(root, abs=1e-9)
