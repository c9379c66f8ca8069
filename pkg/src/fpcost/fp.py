"""Fokker-Planck evolution, transition kernels, and weak-form residuals.

Solves ``d/dt mu = (1/2) Lap mu - div(X mu)`` on the periodic grid with a
Strang splitting: exact spectral diffusion half-steps around a conservative
upwind finite-volume advection step.  The same stepping, applied to unit
masses, yields transition kernels; a frozen-drift approximation and an
Euler-Maruyama particle sampler provide independent routes to the same
evolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import interpolate
from scipy.special import ndtr

from .torus import GridMeasure, MeasurePath, TorusGrid

__all__ = [
    "DriftField",
    "StochasticKernel",
    "constant_drift",
    "sine_drift",
    "table_drift",
    "fp_solve",
    "transition_kernels",
    "compose_kernels",
    "frozen_drift_semigroup",
    "sde_sample",
    "weak_residual",
    "drift_recovery",
    "LadderDivergence",
]


@dataclass(frozen=True)
class DriftField:
    """Time-dependent velocity field sampled at cell centres.

    ``evaluator(t)`` returns the drift at every cell centre, shape
    ``(n_cells, p)``.  ``bound`` dominates ``|X|`` and ``lipschitz`` its
    spatial increments; both feed stability checks.
    """

    grid: TorusGrid
    evaluator: Callable[[float], np.ndarray]
    bound: float
    lipschitz: float

    def __call__(self, t: float) -> np.ndarray:
        X = np.asarray(self.evaluator(t), dtype=float)
        if X.shape != (self.grid.n_cells, self.grid.p):
            raise ValueError(
                f"drift evaluator returned shape {X.shape}, expected "
                f"({self.grid.n_cells}, {self.grid.p})")
        return X


def constant_drift(grid: TorusGrid, a) -> DriftField:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    X = np.broadcast_to(a, (grid.n_cells, grid.p)).copy()
    return DriftField(grid, lambda t: X, bound=float(np.linalg.norm(a)),
                      lipschitz=0.0)


def sine_drift(grid: TorusGrid, amplitude: float = 1.0, axis: int = 0) -> DriftField:
    """Drift ``amplitude * sin(2 pi x_axis)`` along the given axis."""
    x = grid.centers()
    X = np.zeros((grid.n_cells, grid.p))
    X[:, axis] = amplitude * np.sin(2.0 * math.pi * x[:, axis])
    return DriftField(grid, lambda t: X, bound=abs(amplitude),
                      lipschitz=2.0 * math.pi * abs(amplitude))


def table_drift(grid: TorusGrid, times: np.ndarray, values: np.ndarray) -> DriftField:
    """Drift interpolated from per-stamp tables by nearest stamp."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape != (len(times), grid.n_cells, grid.p):
        raise ValueError("table shape must be (T, n_cells, p)")

    def ev(t):
        i = int(np.clip(np.searchsorted(times, t + 1e-12) - 1, 0, len(times) - 1))
        if i + 1 < len(times) and abs(times[i + 1] - t) < abs(times[i] - t):
            i += 1
        return values[i]

    bound = float(np.abs(values).max(initial=0.0))
    dx = grid.cell_width
    if values.shape[1] > 1:
        n = grid.n
        if grid.p == 1:
            diffs = np.abs(np.diff(values[:, :, 0], axis=1, append=values[:, :1, 0]))
            lip = float(diffs.max(initial=0.0)) / dx
        else:
            v = values.reshape(len(times), n, n, 2)
            lx = np.abs(np.roll(v, -1, axis=1) - v).max(initial=0.0)
            ly = np.abs(np.roll(v, -1, axis=2) - v).max(initial=0.0)
            lip = float(max(lx, ly)) / dx
    else:
        lip = 0.0
    return DriftField(grid, ev, bound=bound, lipschitz=lip)


# ---------------------------------------------------------------------------
# splitting solver


def _diffusion_multiplier(grid: TorusGrid, tau: float) -> np.ndarray:
    n = grid.n
    k = np.fft.fftfreq(n, d=1.0 / n)
    decay = np.exp(-0.5 * (2.0 * math.pi * k) ** 2 * tau)
    if grid.p == 1:
        return decay
    return decay[:, None] * decay[None, :]


def _diffuse(state: np.ndarray, grid: TorusGrid, mult: np.ndarray) -> np.ndarray:
    n = grid.n
    if grid.p == 1:
        out = np.fft.ifft(np.fft.fft(state, axis=-1) * mult, axis=-1).real
    else:
        s = state.reshape(state.shape[:-1] + (n, n))
        out = np.fft.ifft2(np.fft.fft2(s) * mult).real
        out = out.reshape(state.shape)
    return out


def _minmod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.where(a * b > 0, np.where(np.abs(a) < np.abs(b), a, b), 0.0)


def _advect_axis(m: np.ndarray, u: np.ndarray, dt: float, dx: float,
                 axis: int) -> np.ndarray:
    """Second-order MUSCL (minmod-limited) conservative step along one axis.

    ``u`` holds face velocities at ``i + 1/2``; the limiter keeps the
    update positivity-preserving under the ``dt <= dx / (2 |u|)`` bound.
    """
    fwd = np.roll(m, -1, axis=axis)
    bwd = np.roll(m, 1, axis=axis)
    slope = _minmod(fwd - m, m - bwd)
    left = m + 0.5 * slope                       # value at face i+1/2 from cell i
    right = np.roll(m - 0.5 * slope, -1, axis=axis)  # from cell i+1
    flux = np.where(u > 0, u * left, u * right)
    return m - (dt / dx) * (flux - np.roll(flux, 1, axis=axis))


def _advect(state: np.ndarray, grid: TorusGrid, X: np.ndarray, dt: float) -> np.ndarray:
    """Conservative limited step for ``d/dt m + div(X m) = 0`` in mass units."""
    n = grid.n
    dx = grid.cell_width
    if grid.p == 1:
        u = 0.5 * (X[:, 0] + np.roll(X[:, 0], -1))  # face i+1/2
        return _advect_axis(state, u, dt, dx, axis=-1)
    s = state.reshape(state.shape[:-1] + (n, n))
    Xg = X.reshape(n, n, 2)
    out = s
    for axis, comp in ((-2, 0), (-1, 1)):
        u = np.broadcast_to(
            0.5 * (Xg[..., comp] + np.roll(Xg[..., comp], -1, axis=axis)),
            out.shape)
        out = _advect_axis(out, u, dt, dx, axis=axis)
    return out.reshape(state.shape)


def _check_dt(grid: TorusGrid, drift: DriftField, dt: float):
    if dt <= 0:
        raise ValueError("dt must be positive")
    if drift.bound > 0 and dt > grid.cell_width / (2.0 * drift.bound):
        raise ValueError(
            f"dt={dt} violates the advection stability bound "
            f"{grid.cell_width / (2.0 * drift.bound):.3e}")


def _step_batch(state: np.ndarray, grid: TorusGrid, drift: DriftField,
                t: float, dt: float, mult_half: np.ndarray) -> np.ndarray:
    out = _diffuse(state, grid, mult_half)
    out = _advect(out, grid, drift(t + dt / 2.0), dt)
    out = _diffuse(out, grid, mult_half)
    if np.any(~np.isfinite(out)):
        raise FloatingPointError("Fokker-Planck step produced non-finite values")
    out = np.maximum(out, 0.0)
    sums = out.sum(axis=-1, keepdims=True)
    return out / np.maximum(sums, 1e-300)


def fp_solve(mu0: GridMeasure, drift: DriftField, t_span, dt: float,
             frame_stride: int = 1) -> MeasurePath:
    """Evolve ``mu0`` under the Fokker-Planck equation over ``t_span``.

    Frames are recorded every ``frame_stride`` internal steps; mass is
    conserved to roundoff (enforced after each step) and negativity from
    the spectral half-steps is clipped at roundoff level.
    """
    grid = mu0.grid
    _check_dt(grid, drift, dt)
    t0, t1 = float(t_span[0]), float(t_span[1])
    steps = round((t1 - t0) / dt)
    if abs(steps * dt - (t1 - t0)) > 1e-9 * max(1.0, abs(t1 - t0)):
        raise ValueError("t_span must be an integer number of dt steps")
    if steps % frame_stride != 0:
        raise ValueError("frame_stride must divide the step count")
    mult = _diffusion_multiplier(grid, dt / 2.0)
    state = mu0.weights.copy()
    frames = [state.copy()]
    for k in range(steps):
        state = _step_batch(state, grid, drift, t0 + k * dt, dt, mult)
        if (k + 1) % frame_stride == 0:
            frames.append(state.copy())
    return MeasurePath(grid=grid, t0=t0, dt=dt * frame_stride,
                       frames=np.asarray(frames))


# ---------------------------------------------------------------------------
# transition kernels


@dataclass(frozen=True)
class StochasticKernel:
    """Transition matrix of the evolution between two times."""

    grid: TorusGrid
    t_from: float
    t_to: float
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        N = self.grid.n_cells
        if m.shape != (N, N):
            raise ValueError(f"matrix shape {m.shape} != ({N}, {N})")
        if np.any(m < -1e-12):
            raise ValueError("negative transition mass")
        if np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-8):
            raise ValueError("transition rows must sum to one")
        object.__setattr__(self, "matrix", np.maximum(m, 0.0))

    def apply(self, mu: GridMeasure) -> GridMeasure:
        return GridMeasure(self.grid, mu.weights @ self.matrix)


def transition_kernels(drift: DriftField, t_from: float, t_to: float,
                       dt: float) -> StochasticKernel:
    """Kernel of the splitting solver between two times (all sources at once)."""
    grid = drift.grid
    _check_dt(grid, drift, dt)
    steps = round((t_to - t_from) / dt)
    if steps < 0 or abs(steps * dt - (t_to - t_from)) > 1e-9:
        raise ValueError("t_to - t_from must be a nonnegative multiple of dt")
    mult = _diffusion_multiplier(grid, dt / 2.0)
    state = np.eye(grid.n_cells)
    for k in range(steps):
        state = _step_batch(state, grid, drift, t_from + k * dt, dt, mult)
    return StochasticKernel(grid=grid, t_from=t_from, t_to=t_to, matrix=state)


def compose_kernels(first: StochasticKernel, second: StochasticKernel) -> StochasticKernel:
    """Chapman-Kolmogorov composition; endpoint times must chain."""
    if first.grid != second.grid:
        raise ValueError("kernels live on different grids")
    if abs(first.t_to - second.t_from) > 1e-12:
        raise ValueError(
            f"kernels do not chain: {first.t_to} != {second.t_from}")
    return StochasticKernel(grid=first.grid, t_from=first.t_from,
                            t_to=second.t_to,
                            matrix=first.matrix @ second.matrix)


def _shifted_gaussian_rows(grid: TorusGrid, means: np.ndarray, var: float) -> np.ndarray:
    """Row-stochastic matrix of wrapped Gaussians ``N(x_i + means_i, var Id)``."""
    n = grid.n
    L = max(grid.lift_radius,
            int(math.ceil(math.sqrt(2.0 * var * math.log(1e12)) + np.abs(means).max())) + 1)
    ks = np.arange(-L, L + 1, dtype=float)
    s = math.sqrt(var)
    d = np.arange(n) / n

    def axis_rows(mean_axis):
        # displacement cell (j - i)/n with lifts, minus the row mean
        lo = d[None, :, None] + ks[None, None, :] - 0.5 / n - mean_axis[:, None, None]
        m = ndtr((lo + 1.0 / n) / s) - ndtr(lo / s)
        return m.sum(axis=2)  # (rows, rel displacement)

    if grid.p == 1:
        rel = axis_rows(means[:, 0])
        idx = (np.arange(n)[None, :] - np.arange(n)[:, None]) % n
        rows = np.take_along_axis(rel, idx, axis=1)
        return rows / rows.sum(axis=1, keepdims=True)
    relx = axis_rows(means[:, 0])   # (N, n): relative x-mass per source
    rely = axis_rows(means[:, 1])
    N = grid.n_cells
    ix = np.arange(N) // n
    iy = np.arange(N) % n
    jx = (np.arange(n)[None, :] - ix[:, None]) % n
    jy = (np.arange(n)[None, :] - iy[:, None]) % n
    rx = np.take_along_axis(relx, jx, axis=1)   # (N, n) mass to target x-index
    ry = np.take_along_axis(rely, jy, axis=1)
    rows = (rx[:, :, None] * ry[:, None, :]).reshape(N, N)
    return rows / rows.sum(axis=1, keepdims=True)


def frozen_step_cost(mu: GridMeasure, means: np.ndarray, h: float) -> float:
    """Step functional of the frozen kernel ``N(h X(x), h Id)`` per source.

    Evaluates the relative entropy against the reference ``N(0, h Id)`` at
    the per-lift cell level (not on the quotient), which is the quantity
    the step cost minimises; separable over axes in two dimensions.
    """
    from .torus import _axis_tables

    grid = mu.grid
    n = grid.n
    L = grid.lift_radius
    s = math.sqrt(h)
    ax = _axis_tables(n, L, h)
    qa = np.maximum(ax["m0"], 1e-300)          # (n, 2L+1) reference per axis
    lo = ax["lo"]
    total = 0.0
    for comp in range(grid.p):
        m = means[:, comp][:, None, None]      # (N, 1, 1)
        a = ndtr((lo[None] + 1.0 / n - m) / s) - ndtr((lo[None] - m) / s)
        a = a / np.maximum(a.sum(axis=(1, 2), keepdims=True), 1e-300)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(a > 0, a * (np.log(np.maximum(a, 1e-300))
                                         - np.log(qa)[None]), 0.0)
        total += float(mu.weights @ terms.sum(axis=(1, 2)))
    return total


def frozen_drift_semigroup(drift: DriftField, mu0: GridMeasure, t_span,
                           eps: float, dt: float):
    """Piecewise-frozen Gaussian semigroup over windows of length ``eps``.

    On each window the drift is frozen at its left endpoint per source
    cell, so a Dirac evolves into the wrapped Gaussian ``N(x + eps X,
    eps Id)``.  Returns the per-window kernels and the orbit of ``mu0``
    sampled at window boundaries.
    """
    grid = mu0.grid
    t0, t1 = float(t_span[0]), float(t_span[1])
    if eps <= 0 or dt <= 0:
        raise ValueError("eps and dt must be positive")
    if abs(round(eps / dt) * dt - eps) > 1e-9:
        raise ValueError("eps must be a multiple of dt")
    wins = round((t1 - t0) / eps)
    if abs(wins * eps - (t1 - t0)) > 1e-9:
        raise ValueError("t_span must cover an integer number of windows")
    kernels = []
    frames = [mu0.weights.copy()]
    state = mu0.weights.copy()
    for k in range(wins):
        t = t0 + k * eps
        means = eps * drift(t)
        rows = _shifted_gaussian_rows(grid, means, eps)
        kernels.append(StochasticKernel(grid=grid, t_from=t, t_to=t + eps,
                                        matrix=rows))
        state = state @ rows
        frames.append(state.copy())
    path = MeasurePath(grid=grid, t0=t0, dt=eps, frames=np.asarray(frames))
    return kernels, path


# ---------------------------------------------------------------------------
# particle sampler


def sde_sample(drift: DriftField, mu0: GridMeasure, t_span, dt: float,
               n_paths: int, seed: int, frame_stride: int = 1) -> MeasurePath:
    """Euler-Maruyama particle approximation of the same evolution.

    Initial positions sit at cell centres drawn from ``mu0``; every path
    uses noise from a deterministically seeded generator, so results are
    reproducible for a fixed ``(seed, n_paths)``.
    """
    grid = mu0.grid
    _check_dt(grid, drift, dt)
    t0, t1 = float(t_span[0]), float(t_span[1])
    steps = round((t1 - t0) / dt)
    if abs(steps * dt - (t1 - t0)) > 1e-9:
        raise ValueError("t_span must be an integer number of dt steps")
    if steps % frame_stride != 0:
        raise ValueError("frame_stride must divide the step count")
    rng = np.random.default_rng(seed)
    cells = rng.choice(grid.n_cells, size=n_paths, p=mu0.weights)
    x = grid.centers()[cells]  # (n_paths, p)
    sq = math.sqrt(dt)

    def bin_frame(pos):
        idx = np.round(pos * grid.n).astype(int) % grid.n
        if grid.p == 1:
            flat = idx[:, 0]
        else:
            flat = idx[:, 0] * grid.n + idx[:, 1]
        w = np.bincount(flat, minlength=grid.n_cells).astype(float)
        return w / n_paths

    frames = [bin_frame(x)]
    for k in range(steps):
        t = t0 + k * dt
        X = drift(t)
        idx = np.round(x * grid.n).astype(int) % grid.n
        flat = idx[:, 0] if grid.p == 1 else idx[:, 0] * grid.n + idx[:, 1]
        x = x + X[flat] * dt + sq * rng.standard_normal(x.shape)
        x -= np.floor(x)
        if (k + 1) % frame_stride == 0:
            frames.append(bin_frame(x))
    return MeasurePath(grid=grid, t0=t0, dt=dt * frame_stride,
                       frames=np.asarray(frames))


# ---------------------------------------------------------------------------
# weak-form residuals


def _time_bump(path: MeasurePath):
    t = path.times()
    u = 2.0 * (t - path.t0) / (path.t1 - path.t0) - 1.0
    inside = np.abs(u) < 1.0 - 1e-12
    b = np.zeros_like(u)
    db = np.zeros_like(u)
    ui = u[inside]
    b[inside] = np.exp(1.0 - 1.0 / (1.0 - ui ** 2))
    db[inside] = b[inside] * (-2.0 * ui / (1.0 - ui ** 2) ** 2) \
        * (2.0 / (path.t1 - path.t0))
    return b, db


def weak_residual(path: MeasurePath, drift: DriftField,
                  basis_size: int = 4) -> np.ndarray:
    """Weak Fokker-Planck residuals against a bump-times-harmonics basis.

    For each test function ``phi = b(t) * w(x)`` (``b`` a smooth compactly
    supported bump, ``w`` a torus harmonic with wave numbers up to
    ``basis_size``) returns the midpoint-quadrature value of

        integral of [ dphi/dt + (1/2) Lap phi + <grad phi, X> ] d mu_t dt,

    which vanishes for exact weak solutions.
    """
    grid = path.grid
    if basis_size < 1 or basis_size > grid.n // 4:
        raise ValueError(f"basis_size must lie in [1, n/4], got {basis_size}")
    b, db = _time_bump(path)
    x = grid.centers()
    T = len(path.frames)
    Xs = np.stack([drift(t) for t in path.times()])  # (T, N, p)
    residuals = []
    if grid.p == 1:
        waves = [(k,) for k in range(1, basis_size + 1)]
    else:
        waves = [(kx, ky) for kx in range(0, basis_size + 1)
                 for ky in range(0, basis_size + 1) if (kx, ky) != (0, 0)
                 and max(kx, ky) <= basis_size]
    for kvec in waves:
        kv = 2.0 * math.pi * np.asarray(kvec, dtype=float)
        phase = x @ kv
        for w, dw_sign in ((np.sin(phase), np.cos(phase)),
                           (np.cos(phase), -np.sin(phase))):
            grad = dw_sign[:, None] * kv[None, :]
            lap = -(kv ** 2).sum() * w
            space_w = path.frames @ w                       # (T,)
            space_lap = path.frames @ lap
            space_adv = np.einsum("tn,tn->t",
                                  path.frames, (Xs * grad[None]).sum(axis=2))
            integrand = db * space_w + b * (0.5 * space_lap + space_adv)
            residuals.append(path.dt * integrand.sum())
    return np.asarray(residuals)


# ---------------------------------------------------------------------------
# drift recovery from path energies


class LadderDivergence(RuntimeError):
    """Raised when the step-cost ladder indicates an infinite-cost path."""


def drift_recovery(path: MeasurePath, h_list: Sequence[float],
                   opts=None, time_stride: int = 1):
    """Recover the driving velocity field from step-cost minimisers.

    Runs the energy ladder and returns ``(DriftField, LadderReport)`` built
    from the two smallest converged rungs.  The per-step minimiser's mean
    displacement under-reports the drift by an ``O(h)`` smoothing factor,
    so the returned field is the Richardson extrapolation of the two
    finest rungs' velocity tables (the coarser rung linearly interpolated
    in time onto the finer stamps); the report carries the mass-weighted
    Cauchy gap between those rungs.  Raises :class:`LadderDivergence`
    when rung energies grow monotonically by more than a factor two from
    the coarsest to the finest scale, the discrete signature of a path
    with no square-integrable drift.
    """
    from .pathcost import energy_ladder

    report = energy_ladder(path, h_list, opts=opts, keep_velocities=True,
                           time_stride=time_stride)
    e = report.energies
    if (len(e) >= 2 and all(b > a for a, b in zip(e, e[1:]))
            and e[-1] > 2.0 * e[0] and e[-1] > 1e-3):
        raise LadderDivergence(
            f"rung energies grow monotonically ({e[0]:.4g} -> {e[-1]:.4g}); "
            "path cost appears infinite")
    grid = path.grid
    order = np.argsort(report.h_values)  # ascending h
    i = int(order[0])
    stamps = report.stamp_times[i]
    vel = report.velocities[i]  # (T_i, N, p)
    if len(order) >= 2:
        j = int(order[1])
        h_f, h_c = report.h_values[i], report.h_values[j]
        coarse = interpolate.interp1d(
            report.stamp_times[j], report.velocities[j], axis=0,
            bounds_error=False, fill_value="extrapolate")(stamps)
        diff = vel - coarse
        # mass-weighted L2 Cauchy gap, averaged over the fine stamps
        idx = np.rint((stamps - path.t0) / path.dt).astype(int)
        w = path.frames[idx]
        gap = math.sqrt(float(
            (w * (diff ** 2).sum(axis=-1)).sum(axis=-1).mean()))
        vel = vel + diff * (h_f / (h_c - h_f))
        report = replace(report, cauchy_gap=gap)
    field = table_drift(grid, stamps, vel)
    return field, report
