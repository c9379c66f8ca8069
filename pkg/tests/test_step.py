"""Entropic step solver: optimality, moments, penalization, tails."""

import numpy as np
import pytest

from fpcost import (
    GridMeasure, SinkhornOptions, dirac_measure, kernel_moments,
    kernel_step_cost, make_grid, penalized_cost, push_forward, solve_step,
    tail_moments, uniform_measure, wrapped_gaussian_measure,
    wrapped_heat_kernel,
)


def _random_measure(grid, rng, floor=0.05):
    w = rng.random(grid.n_cells) + floor
    return GridMeasure(grid=grid, weights=w / w.sum())


def test_heat_flow_costs_nothing(small_grid):
    mu = wrapped_gaussian_measure(small_grid, 0.3, 0.01)
    ker = wrapped_heat_kernel(small_grid, h=1 / 16)
    res = solve_step(mu, push_forward(mu, ker), h=1 / 16)
    assert res.converged
    assert abs(res.cost) <= 1e-8
    # the minimiser is the heat kernel itself, row by row
    tv = 0.5 * np.abs(res.kernel.cells - ker.cells).sum(axis=1)
    assert tv[mu.weights > 1e-12].max() <= 1e-6


def test_cost_matches_independent_integrand(small_grid, rng):
    # the Sinkhorn objective and the kinetic-plus-entropy integral are
    # two routes to the same number, up to the reference normalisation
    import math

    mu1 = _random_measure(small_grid, rng)
    mu2 = _random_measure(small_grid, rng)
    h = 1 / 16
    res = solve_step(mu1, mu2, h=h)
    assert res.converged
    offset = -(small_grid.p / 2) * math.log(2 * math.pi * h)
    assert res.ah_value == pytest.approx(res.cost + offset, abs=1e-6)


def test_cost_nonnegative_and_zero_only_at_heat(small_grid, rng):
    mu1 = _random_measure(small_grid, rng)
    mu2 = _random_measure(small_grid, rng)
    assert solve_step(mu1, mu2, h=1 / 16).cost >= -1e-10
    assert solve_step(mu1, mu2, h=1 / 16).cost > 1e-4  # generic pair


def test_minimiser_unique_across_initialisations(small_grid, rng):
    mu1 = _random_measure(small_grid, rng)
    mu2 = _random_measure(small_grid, rng)
    base = solve_step(mu1, mu2, h=1 / 16)
    warm = solve_step(mu1, mu2, h=1 / 16,
                      g_init=rng.normal(size=small_grid.n_cells))
    assert warm.cost == pytest.approx(base.cost, abs=1e-7)
    assert np.abs(warm.kernel.cells - base.kernel.cells).max() < 1e-5


def test_kernel_marginal_reaches_target(small_grid, rng):
    mu1 = _random_measure(small_grid, rng)
    mu2 = _random_measure(small_grid, rng)
    res = solve_step(mu1, mu2, h=1 / 16)
    out = push_forward(mu1, res.kernel)
    assert np.abs(out.weights - mu2.weights).sum() <= 1e-7


def test_prescribed_kernel_dominates_minimum(small_grid, rng):
    # any admissible kernel transporting mu1 to its own push-forward
    # costs at least the minimum for that pair
    mu1 = _random_measure(small_grid, rng)
    ker = wrapped_heat_kernel(small_grid, h=1 / 16)
    # perturb the heat kernel rows, renormalise
    cells = ker.cells * (1.0 + 0.3 * np.sin(
        2 * np.pi * np.arange(small_grid.n_cells) / small_grid.n_cells))
    cells = cells / cells.sum(axis=1, keepdims=True)
    from fpcost import JumpKernel
    pert = JumpKernel(grid=small_grid, h=1 / 16, cells=cells,
                      model="gaussian")
    mu2 = push_forward(mu1, pert)
    prescribed = kernel_step_cost(mu1, pert)
    minimal = solve_step(mu1, mu2, h=1 / 16).cost
    assert minimal <= prescribed + 1e-8
    assert prescribed > 0


def test_kernel_moments_consistent_with_result(small_grid, rng):
    mu1 = _random_measure(small_grid, rng)
    mu2 = _random_measure(small_grid, rng)
    res = solve_step(mu1, mu2, h=1 / 16)
    vel, cov = kernel_moments(res.kernel)
    assert np.allclose(vel, res.velocity, atol=1e-8)
    assert np.allclose(cov, res.covariance, atol=1e-8)
    assert vel.shape == (small_grid.n_cells, 1)
    assert cov.shape == (small_grid.n_cells, 1, 1)


def test_velocity_tracks_translation(small_grid):
    # moving a blob a short distance induces a velocity of matching sign
    mu1 = wrapped_gaussian_measure(small_grid, 0.4, 0.01)
    mu2 = GridMeasure(grid=small_grid,
                      weights=np.roll(mu1.weights, 1))
    res = solve_step(mu1, mu2, h=1 / 32)
    heavy = mu1.weights > 0.01
    assert res.velocity[heavy, 0].mean() > 0
    drift = float((mu1.weights * res.velocity[:, 0]).sum())
    # displacement 1/32 over time 1/32: unit mean speed, damped by
    # the entropic smoothing
    assert 0.5 < drift < 1.2


def test_solver_respects_tolerance_option(small_grid, rng):
    mu1 = _random_measure(small_grid, rng)
    mu2 = _random_measure(small_grid, rng)
    tight = solve_step(mu1, mu2, h=1 / 16,
                       opts=SinkhornOptions(tolerance=1e-12))
    assert tight.marginal_error <= 1e-12
    assert tight.converged


def test_solve_step_rejects_mismatched_grids():
    a = make_grid(1, 16, h_max=0.25)
    b = make_grid(1, 32, h_max=0.25)
    with pytest.raises(ValueError):
        solve_step(uniform_measure(a), uniform_measure(b), h=0.1)


def test_two_dimensional_step(rng):
    g = make_grid(2, 12, h_max=0.25)
    mu1 = wrapped_gaussian_measure(g, (0.3, 0.3), 0.02)
    mu2 = wrapped_gaussian_measure(g, (0.4, 0.35), 0.02)
    res = solve_step(mu1, mu2, h=1 / 8)
    assert res.converged
    assert res.cost > 0
    assert res.velocity.shape == (g.n_cells, 2)
    heavy = mu1.weights > 1e-3
    assert res.velocity[heavy, 0].mean() > 0  # pushed along +x


def test_penalized_cost_ladder(small_grid, rng):
    mu1 = _random_measure(small_grid, rng)
    mu2 = _random_measure(small_grid, rng)
    h = 1 / 16
    exact = solve_step(mu1, mu2, h).cost
    lams = (1.0, 10.0, 100.0)
    costs = [penalized_cost(mu1, mu2, h, lam) for lam in lams]
    assert all(b >= a - 1e-9 for a, b in zip(costs, costs[1:]))
    assert all(c <= exact + 1e-6 for c in costs)
    assert penalized_cost(mu1, mu2, h, 1e6) == pytest.approx(exact, abs=1e-3)


def test_penalized_cost_rejects_bad_weight(small_grid):
    mu = uniform_measure(small_grid)
    with pytest.raises(ValueError):
        penalized_cost(mu, mu, 1 / 16, lam=0.0)


def test_tail_moments_split(small_grid, rng):
    mu1 = _random_measure(small_grid, rng)
    mu2 = _random_measure(small_grid, rng)
    res = solve_step(mu1, mu2, h=1 / 16)
    tm = tail_moments(res, mu1, r=0.25)
    assert tm.epsilon_out >= 0
    assert tm.delta_out >= 0
    assert tm.third_moment >= 0
    # widening the radius can only shrink the tail
    tm_wide = tail_moments(res, mu1, r=0.45)
    assert tm_wide.epsilon_out <= tm.epsilon_out + 1e-12
    assert tm_wide.delta_out <= tm.delta_out + 1e-12
