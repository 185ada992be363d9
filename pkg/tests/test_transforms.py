import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from vpr.errors import DimensionError, DomainError
from vpr.transforms import BoundedBox, log_abs_det_jacobian, to_physical, to_unbounded

finite = st.floats(-30, 30, allow_nan=False)


@st.composite
def boxes(draw, max_n=6):
    n = draw(st.integers(1, max_n))
    lo = np.array(draw(st.lists(st.floats(-1e4, 1e4), min_size=n, max_size=n)))
    width = np.array(draw(st.lists(st.floats(1e-2, 1e4), min_size=n, max_size=n)))
    return BoundedBox(lo, lo + width)


def test_midpoint():
    assert to_physical(np.zeros(1), BoundedBox.uniform(1, 0, 1))[0] == 0.5
    assert to_physical(np.zeros(1), BoundedBox.uniform(1, 1500, 5500))[0] == 3500.0


def test_saturation_stays_strictly_inside():
    m = to_physical(np.array([40.0, -40.0, 800.0, -800.0]), BoundedBox.uniform(4, 0, 1))
    assert 1 - 1e-15 < m[0] < 1
    assert 0 < m[1] < 1e-15
    assert 0 < m[2] < 1 and 0 < m[3] < 1


def test_inverse_examples():
    box = BoundedBox.uniform(1, 2.0, 6.0)
    assert to_unbounded(np.array([4.0]), box)[0] == 0.0
    with pytest.raises(DomainError, match="index 0"):
        to_unbounded(np.array([2.0]), box)
    assert to_unbounded(to_physical(np.array([1.7]), box), box)[0] == pytest.approx(1.7, abs=1e-10)


def test_domain_error_names_index():
    box = BoundedBox.uniform(4, 0, 1)
    with pytest.raises(DomainError, match="index 2"):
        to_unbounded(np.array([0.5, 0.5, 1.5, 0.5]), box)


def test_log_jacobian_examples():
    assert log_abs_det_jacobian(np.zeros(1), BoundedBox.uniform(1, 0, 1)) == pytest.approx(-1.3862943611198906, abs=1e-12)
    assert log_abs_det_jacobian(np.zeros(2), BoundedBox.uniform(2, 0, 1)) == pytest.approx(-2.772588722239781, abs=1e-12)


def test_log_jacobian_no_overflow():
    v = log_abs_det_jacobian(np.array([700.0, -700.0]), BoundedBox.uniform(2, 0, 1))
    assert np.isfinite(v)
    assert v == pytest.approx(-1400.0, rel=1e-12)


@given(boxes(), st.integers(0, 10_000))
def test_log_jacobian_finite_difference(box, seed):
    th = np.random.default_rng(seed).uniform(-4, 4, box.n)
    def central(i, h):
        e = np.zeros(box.n)
        e[i] = h
        return (to_physical(th + e, box)[i] - to_physical(th - e, box)[i]) / (2 * h)

    for i in range(box.n):
        # Richardson-extrapolated central difference
        d = (4 * central(i, 1e-3) - central(i, 2e-3)) / 3
        sub = BoundedBox(box.lower[i:i + 1], box.upper[i:i + 1])
        lj = log_abs_det_jacobian(th[i:i + 1], sub)
        assert lj == pytest.approx(math.log(d), rel=1e-6, abs=1e-9)
    ref = sum(float(box.logjac_free(th)[i]) for i in range(box.n))
    assert log_abs_det_jacobian(th, box) == pytest.approx(ref, rel=1e-12)


@given(boxes(), st.lists(finite, min_size=6, max_size=6))
def test_round_trip(box, vals):
    th = np.array(vals[:box.n]) / 3.0
    back = to_unbounded(to_physical(th, box), box)
    np.testing.assert_allclose(back, th, atol=1e-7 * max(1.0, float(np.max(box.upper - box.lower))))


@given(boxes(max_n=3), finite, finite)
def test_monotone(box, t1, t2):
    if t1 == t2:
        return
    lo, hi = min(t1, t2), max(t1, t2)
    a = to_physical(np.full(box.n, lo), box)
    b = to_physical(np.full(box.n, hi), box)
    assert np.all(a <= b)
    assert np.all((a > box.lower) & (b < box.upper))


@given(st.lists(finite, min_size=4, max_size=4))
def test_fixed_cells_take_stored_values(vals):
    box = BoundedBox(np.zeros(4), np.ones(4), fixed_mask=[True, False, True, False],
                     fixed_values=[1500.0, 0.0, 7.0, 0.0])
    m = to_physical(np.array(vals), box)
    assert m[0] == 1500.0 and m[2] == 7.0
    assert log_abs_det_jacobian(np.array(vals), box) == pytest.approx(
        float(np.sum(box.logjac_free(np.array(vals)[[1, 3]]))))


def test_unbounded_entries_are_identity():
    box = BoundedBox.unbounded(3)
    th = np.array([-2.0, 0.0, 5.0])
    np.testing.assert_array_equal(to_physical(th, box), th)
    assert log_abs_det_jacobian(th, box) == 0.0


def test_change_of_variables_identity():
    # unnormalised density on m in [a, b], pulled back to theta
    a, b = 1500.0, 5500.0
    box = BoundedBox.uniform(1, a, b)

    def f(m):
        return math.exp(-0.5 * ((m - 3000.0) / 400.0) ** 2)

    def g(t):
        th = np.array([t])
        return f(to_physical(th, box)[0]) * math.exp(log_abs_det_jacobian(th, box))

    zm = quad(f, a, b, epsabs=0, epsrel=1e-13, limit=200)[0]
    zt = quad(g, -60, 60, epsabs=0, epsrel=1e-13, limit=400, points=[-2, 0, 2])[0]
    for t in np.linspace(-6, 6, 41):
        th = np.array([t])
        lhs = math.log(f(to_physical(th, box)[0]) / zm)
        rhs = math.log(g(t) / zt) - log_abs_det_jacobian(th, box)
        assert lhs == pytest.approx(rhs, abs=1e-8)


def test_box_validation():
    with pytest.raises(DomainError):
        BoundedBox(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
    with pytest.raises(DomainError):
        BoundedBox(np.array([-np.inf]), np.array([1.0]))
    with pytest.raises(DimensionError):
        BoundedBox(np.zeros(2), np.ones(3))
    with pytest.raises(DimensionError):
        to_physical(np.zeros(3), BoundedBox.uniform(2, 0, 1))
    # a fixed cell may carry degenerate bounds
    BoundedBox(np.array([0.0, 5.0]), np.array([1.0, 5.0]), fixed_mask=[False, True], fixed_values=[0, 5])


def test_depth_profile_and_uniform_std():
    box = BoundedBox.from_depth_profile([0.0, 10.0], [12.0, 22.0], nx=3)
    np.testing.assert_array_equal(box.lower, [0, 0, 0, 10, 10, 10])
    np.testing.assert_allclose(box.uniform_std(), 12.0 / math.sqrt(12.0))
    np.testing.assert_allclose(box.center(), [6, 6, 6, 16, 16, 16])
