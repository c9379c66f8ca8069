"""Closed-form constrained minima, gap functions, and tail machinery.

Each closed form is checked against an independently coded quadrature
oracle over an explicit exponential-family density, so the algebra in the
library is never used to validate itself.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpcost import (
    bar_delta, delta0, diag_bound, eta_alpha, gap_diag, gap_offdiag,
    gap_trace, make_grid, offdiag_bound, out_cost, trace_bound,
    uniform_measure, wrapped_heat_kernel,
)


# ---------------------------------------------------------------------------
# quadrature oracle: minimise sum w (log w + |v|^2 / 2h) over densities w(v)
# subject to linear moment constraints, via the known exponential-family
# shape of the minimiser with brute-force multiplier search


def _quad_value(h, weights, v, dv):
    """Objective value of a discretised density against the h-reference."""
    kin = (v ** 2).sum(axis=-1) / (2.0 * h)
    mask = weights > 0
    return float((weights[mask]
                  * (np.log(weights[mask] / dv) + kin[mask])).sum())


def _grid_1d(h, reach=12.0, m=4001):
    return np.linspace(-reach * math.sqrt(h), reach * math.sqrt(h), m)


def _minimise_trace_1d(a, delta, h, m=4001):
    """Direct minimisation for p=1: density exp(c0 + c1 v + c2 v^2)."""
    from scipy import optimize

    v = _grid_1d(h, m=m)
    dv = v[1] - v[0]
    kin = v ** 2 / (2 * h)

    def density(lam):
        c1, c2 = lam
        logw = c1 * v - c2 * (v - h * a) ** 2 - kin
        logw -= logw.max()
        w = np.exp(logw)
        w /= w.sum() * dv
        return w * dv

    def residual(lam):
        w = density(lam)
        return [float((w * v).sum() - h * a),
                float((w * (v - h * a) ** 2).sum() - h * delta)]

    sol = optimize.fsolve(residual, [a, 0.0], full_output=True)
    assert sol[2] == 1, "oracle multiplier solve failed"
    w = density(sol[0])
    return _quad_value(h, w, v[:, None], dv)


@pytest.mark.parametrize("a,delta,h", [
    (0.0, 1.0, 0.1), (0.5, 1.0, 0.1), (0.3, 0.7, 0.05), (-0.8, 2.0, 0.2),
])
def test_trace_bound_against_quadrature(a, delta, h):
    got = trace_bound(np.array([a]), delta, h, p=1)
    want = _minimise_trace_1d(a, delta, h)
    assert got == pytest.approx(want, abs=5e-4)


def test_trace_bound_identity_spread_is_entropy_only():
    # delta = 1, a = 0 leaves only the reference normalisation
    for h in (0.05, 0.1, 0.3):
        for p in (1, 2):
            want = -(p / 2) * math.log(2 * math.pi * h)
            assert trace_bound(np.zeros(p), 1.0, h, p) == pytest.approx(want)
            assert diag_bound(np.zeros(p), 1.0, h, p) == pytest.approx(want)


def test_diag_equals_trace_in_one_dimension():
    a = np.array([0.4])
    for delta in (0.5, 1.0, 2.5):
        assert diag_bound(a, delta, 0.1, 1) == pytest.approx(
            trace_bound(a, delta, 0.1, 1), rel=1e-12)


def test_diag_below_trace_in_two_dimensions():
    # pinning one diagonal entry is weaker than pinning the full trace,
    # and the difference is exactly the one-axis gap
    a = np.array([0.3, -0.2])
    for delta in (0.5, 2.0):
        tr = trace_bound(a, delta, 0.1, 2)
        dg = diag_bound(a, delta, 0.1, 2)
        assert dg <= tr + 1e-12
        assert tr - dg == pytest.approx(gap_diag(delta), rel=1e-10)


def test_offdiag_bound_at_zero_matches_unconstrained():
    a = np.array([0.3, -0.2])
    assert offdiag_bound(a, 0.0, 0.1, 2) == pytest.approx(
        trace_bound(a, 1.0, 0.1, 2), rel=1e-12)


def test_offdiag_bound_increases_with_correlation():
    a = np.array([0.1, 0.1])
    vals = [offdiag_bound(a, d, 0.1, 2) for d in (0.0, 0.2, 0.4, 0.8)]
    assert all(b > v for v, b in zip(vals, vals[1:]))


def test_eta_alpha_consistency():
    # the multiplier pair satisfies alpha = 1 - eta^2 and
    # eta / (1 - eta^2) = delta, and stays in the admissible band
    for delta in (0.0, 0.1, 0.5, 0.9, 5.0):
        eta, alpha = eta_alpha(delta)
        assert 0.0 <= eta < 1.0
        assert alpha == pytest.approx(1.0 - eta * eta, rel=1e-12)
        if delta > 0:
            assert eta / alpha == pytest.approx(delta, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(delta=st.floats(min_value=0.05, max_value=20.0))
def test_gap_functions_nonnegative(delta):
    assert gap_trace(delta, 1) >= -1e-12
    assert gap_trace(delta, 2) >= -1e-12
    assert gap_diag(delta) >= -1e-12
    assert gap_offdiag(delta) >= -1e-12


def test_gap_functions_vanish_at_minimiser():
    assert gap_trace(1.0, 1) == pytest.approx(0.0, abs=1e-12)
    assert gap_diag(1.0) == pytest.approx(0.0, abs=1e-12)
    assert gap_offdiag(0.0) == pytest.approx(0.0, abs=1e-12)


def test_gap_quadratic_near_minimiser():
    # second-order behaviour: g(1 + s) / s^2 approaches a positive limit
    ratios = [gap_trace(1.0 + s, 1) / s ** 2 for s in (0.08, 0.04, 0.02)]
    assert all(r > 0 for r in ratios)
    assert abs(ratios[-1] - ratios[-2]) < 0.1 * ratios[-1]


def test_gap_linear_in_tail():
    # growth rate g(delta)/delta stabilises for large delta
    ratios = [gap_trace(d, 1) / d for d in (50.0, 100.0, 200.0)]
    assert all(r > 0 for r in ratios)
    assert abs(ratios[-1] - ratios[-2]) < 0.05 * ratios[-1]


def test_bar_delta_monotone_in_eta():
    # the attainable spread shrinks as the tail multiplier grows
    vals = [bar_delta(eta, 1.0, 0.1, 1) for eta in (-0.5, 0.0, 1.0, 5.0)]
    assert all(b < v for v, b in zip(vals, vals[1:]))


def test_out_cost_meets_target_and_is_gap_shaped():
    # zero exactly at the unconstrained tail mass, growing away from it
    h, r, p = 0.1, 1.0, 1
    free = bar_delta(0.0, r, h, p)
    assert out_cost(r, free, h, p).value == pytest.approx(0.0, abs=1e-10)
    for delta in (1e-3, 1e-2, 0.05, 0.5, 2.0):
        res = out_cost(r, delta, h, p)
        assert res.achieved_delta == pytest.approx(delta, rel=1e-6)
        assert res.value >= -1e-12
    values = [out_cost(r, d, h, p).value for d in (0.05, 0.5, 2.0)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_out_cost_rejects_unattainable_target():
    h, r, p = 0.1, 1.0, 1
    ceiling = bar_delta(-1.0 + 1e-12, r, h, p)
    with pytest.raises(ValueError):
        out_cost(r, ceiling * 10, h, p)


def test_delta0_threshold_and_monotone():
    prev = None
    for h in (0.2, 0.1, 0.05, 0.025):
        d0 = delta0(1.0, h)
        # from the threshold on, the tail cost dominates delta / 2
        ceiling = bar_delta(-1.0 + 1e-12, 1.0, h, 1)
        for d in np.geomspace(d0, min(50.0, 0.99 * ceiling), 8):
            assert out_cost(1.0, d, h, 1).value >= d / 2 - 1e-12
        if prev is not None:
            assert d0 < prev
        prev = d0


def test_wrapped_heat_kernel_is_stochastic_and_uniform_invariant():
    g = make_grid(1, 64, h_max=0.25)
    ker = wrapped_heat_kernel(g, h=0.04)
    assert np.allclose(ker.row_sums(), 1.0, atol=1e-12)
    mu = uniform_measure(g)
    from fpcost import push_forward
    assert np.allclose(push_forward(mu, ker).weights, mu.weights, atol=1e-12)


def test_closed_forms_reject_bad_arguments():
    with pytest.raises(ValueError):
        trace_bound(np.zeros(1), -0.5, 0.1, 1)
    with pytest.raises(ValueError):
        trace_bound(np.zeros(1), 1.0, -0.1, 1)
    with pytest.raises(ValueError):
        offdiag_bound(np.zeros(1), 0.5, 0.1, 1)  # needs two axes
    with pytest.raises(ValueError):
        bar_delta(-1.5, 1.0, 0.1, 1)  # multiplier below the admissible edge
