"""Closed forms for constrained Gaussian relative-entropy minimisation.

All quantities refer to the step functional

    A_h(g, v) = (1/(2h)) |v|^2 g(v) + g(v) log g(v)

integrated over displacement densities ``g`` on ``R^p``.  The functions
below give the minimal value of that integral under moment constraints
(mean, trace of covariance, single diagonal or off-diagonal covariance
entry, second moment outside a ball), together with the auxiliary maps
used by the lower-bound arguments: the gap functions measuring the excess
over the unconstrained minimum, and the tail multiplier solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfcx, log_ndtr, ndtr

from .torus import JumpKernel, TorusGrid, displacement_tables

__all__ = [
    "GaussianSpec",
    "TailSolveResult",
    "gaussian_density",
    "wrapped_heat_kernel",
    "trace_bound",
    "diag_bound",
    "offdiag_bound",
    "eta_alpha",
    "gap_trace",
    "gap_diag",
    "gap_offdiag",
    "bar_delta",
    "out_cost",
    "delta0",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianSpec:
    """Mean vector and covariance matrix of a Gaussian on ``R^p``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        c = np.atleast_2d(np.asarray(self.cov, dtype=float))
        p = m.shape[0]
        if c.shape != (p, p):
            raise ValueError(f"cov shape {c.shape} incompatible with mean of size {p}")
        if np.max(np.abs(c - c.T)) > 1e-14:
            raise ValueError("covariance must be symmetric")
        if np.any(np.linalg.eigvalsh(c) <= 0):
            raise ValueError("covariance must be positive definite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", c)

    @property
    def p(self) -> int:
        return self.mean.shape[0]


def gaussian_density(spec: GaussianSpec, v) -> np.ndarray:
    """Density of ``N(mean, cov)`` at points ``v`` of shape ``(..., p)``."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != spec.p:
        raise ValueError(f"points have dimension {v.shape[-1]}, expected {spec.p}")
    diff = v - spec.mean
    sol = diff @ np.linalg.inv(spec.cov)
    quad = (sol * diff).sum(axis=-1)
    norm = (2.0 * math.pi) ** (spec.p / 2.0) * math.sqrt(np.linalg.det(spec.cov))
    return np.exp(-0.5 * quad) / norm


def wrapped_heat_kernel(grid: TorusGrid, h: float) -> JumpKernel:
    """Heat kernel ``N(0, h Id)`` wrapped to the torus and binned to cells.

    Raises if the mass escaping the configured lift window exceeds 1e-9
    (``h`` too large for ``grid.lift_radius``).
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    tab = displacement_tables(grid, h)
    total = tab["mass"].sum()
    if 1.0 - total > 1e-9:
        raise ValueError(
            f"h={h} too large for lift_radius={grid.lift_radius}: "
            f"tail mass {1.0 - total:.3e} above 1e-9")
    row = tab["mass"] / total
    n = grid.n_cells
    if grid.p == 1:
        idx = (np.arange(n)[None, :] - np.arange(n)[:, None]) % n
        cells = row[idx]
    else:
        from .torus import displacement_index
        cells = row[displacement_index(grid)]
    return JumpKernel(grid=grid, h=h, cells=cells, model="gaussian")


# ---------------------------------------------------------------------------
# constrained minima and gap functions


def _check_spread(delta: float, allow_zero: bool = False):
    if delta < 0 or (delta == 0 and not allow_zero):
        raise ValueError(f"spread delta must be positive, got {delta}")


def _check_h(h: float):
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")


def trace_bound(a, delta: float, h: float, p: int) -> float:
    """Minimum of the step functional over mean ``a`` and covariance-trace
    ``p h delta`` densities; attained by ``N(a h, h delta Id)``."""
    _check_h(h)
    _check_spread(delta)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if a.shape != (p,):
        raise ValueError(f"mean must have shape ({p},)")
    sq = float((a ** 2).sum())
    return (p * (delta - 1.0) / 2.0 + 0.5 * h * sq
            - (p / 2.0) * math.log(2.0 * math.pi * h * delta))


def diag_bound(a, delta: float, h: float, p: int) -> float:
    """Minimum when a single diagonal covariance entry equals ``h delta``."""
    _check_h(h)
    _check_spread(delta)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if a.shape != (p,):
        raise ValueError(f"mean must have shape ({p},)")
    sq = float((a ** 2).sum())
    return ((delta - 1.0) / 2.0 + 0.5 * h * sq
            - 0.5 * math.log(2.0 * math.pi * h * delta)
            - ((p - 1) / 2.0) * math.log(2.0 * math.pi * h))


def offdiag_bound(a, delta: float, h: float, p: int) -> float:
    """Minimum when one off-diagonal covariance entry equals ``h delta``
    in absolute value (``delta = 0`` gives the unconstrained value)."""
    _check_h(h)
    _check_spread(delta, allow_zero=True)
    if p < 2:
        raise ValueError("off-diagonal constraint needs p >= 2")
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if a.shape != (p,):
        raise ValueError(f"mean must have shape ({p},)")
    sq = float((a ** 2).sum())
    root = math.sqrt(1.0 + 4.0 * delta * delta)
    # alpha = (root - 1) / (2 delta^2) -> 1 as delta -> 0
    alpha = (root - 1.0) / (2.0 * delta * delta) if delta > 0 else 1.0
    return ((root - 1.0) / 2.0 + 0.5 * h * sq
            + 0.5 * math.log(alpha)
            - (p / 2.0) * math.log(2.0 * math.pi * h))


def eta_alpha(delta: float):
    """Correlation ``eta`` and precision factor ``alpha = 1 - eta^2`` of the
    off-diagonal minimiser; satisfies ``eta / (1 - eta^2) = delta``."""
    _check_spread(delta, allow_zero=True)
    if delta == 0:
        return 0.0, 1.0
    root = math.sqrt(1.0 + 4.0 * delta * delta)
    eta = (root - 1.0) / (2.0 * delta)
    return eta, 1.0 - eta * eta


def gap_trace(delta: float, p: int) -> float:
    """Excess of the trace-constrained minimum over the unconstrained one."""
    _check_spread(delta)
    return p * (delta - 1.0) / 2.0 - (p / 2.0) * math.log(delta)


def gap_diag(delta: float) -> float:
    """Excess of the single-diagonal-entry minimum over the unconstrained one."""
    _check_spread(delta)
    return (delta - 1.0) / 2.0 - 0.5 * math.log(delta)


def gap_offdiag(delta: float) -> float:
    """Excess of the off-diagonal-entry minimum over the unconstrained one."""
    _check_spread(delta, allow_zero=True)
    if delta == 0:
        return 0.0
    s = math.sqrt(1.0 + 4.0 * delta * delta)
    return (s - 1.0) / 2.0 - 0.5 * math.log(s + 1.0) + 0.5 * math.log(2.0)


# ---------------------------------------------------------------------------
# tail machinery


def _log_erfc(x: float) -> float:
    # log erfc(x) = log erfcx(x) - x^2, stable for large x
    if x < -5.0:
        return math.log(2.0)
    return math.log(erfcx(x)) - x * x


def _tail_integrals(eta: float, r: float, h: float, p: int):
    """Log of the partition function Z(eta) and of the tilted tail second
    moment, in closed form.

    The tilted density is ``exp(-|v|^2/(2h)) * exp(-eta |v|^2/(2h))`` outside
    the ball of radius ``r`` and untilted inside.
    """
    beta = (1.0 + eta) / (2.0 * h)
    if p == 1:
        # inside: sqrt(2 pi h) (2 Phi(r/sqrt(h)) - 1)
        z = r / math.sqrt(h)
        log_in = 0.5 * math.log(2.0 * math.pi * h) + math.log(2.0 * ndtr(z) - 1.0)
        x = r * math.sqrt(beta)
        log_t0 = 0.5 * math.log(math.pi / beta) + _log_erfc(x)
        # 2 * int_r^inf v^2 e^{-beta v^2} dv
        #   = (r / beta) e^{-beta r^2} + (sqrt(pi) / (2 beta^{3/2})) erfc(r sqrt(beta))
        a1 = math.log(r / beta) - beta * r * r
        a2 = 0.5 * math.log(math.pi) - 1.5 * math.log(beta) - math.log(2.0) + _log_erfc(x)
        log_t2 = np.logaddexp(a1, a2)
    else:
        log_in = math.log(2.0 * math.pi * h) + math.log1p(-math.exp(-r * r / (2.0 * h)))
        log_t0 = math.log(math.pi / beta) - beta * r * r
        log_t2 = (math.log(math.pi) - beta * r * r
                  + math.log(r * r / beta + 1.0 / (beta * beta)))
    log_z = np.logaddexp(log_in, log_t0)
    return float(log_z), float(log_t2)


def bar_delta(eta: float, r: float, h: float, p: int) -> float:
    """Normalised tail second moment ``(1/(2h)) E[|v|^2 ; |v| > r]`` of the
    tilted minimiser with tail multiplier ``eta``.

    Strictly decreasing in ``eta``; diverges as ``eta -> -1`` and vanishes
    as ``eta -> +inf``.
    """
    _check_h(h)
    if r <= 0:
        raise ValueError(f"r must be positive, got {r}")
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    if eta <= -1.0:
        raise ValueError(f"eta must exceed -1, got {eta}")
    log_z, log_t2 = _tail_integrals(eta, r, h, p)
    return math.exp(log_t2 - log_z - math.log(2.0 * h))


@dataclass(frozen=True)
class TailSolveResult:
    """Solution of the tail-constrained minimisation."""

    eta: float
    lambda_mult: float
    achieved_delta: float
    value: float


_ETA_LO = -1.0 + 1e-12
_ETA_HI = 1e6


def out_cost(r: float, delta: float, h: float, p: int) -> TailSolveResult:
    """Minimal step-functional excess subject to tail second moment
    ``(1/(2h)) E[|v|^2 ; |v| > r] = delta``.

    Solved by bisecting the strictly monotone map ``eta -> bar_delta(eta)``
    for the tail multiplier; the returned ``value`` excludes the reference
    normalisation ``(p/2) log(1/(2 pi h))``.
    """
    _check_h(h)
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    lo, hi = bar_delta(_ETA_HI, r, h, p), bar_delta(_ETA_LO, r, h, p)
    if not (lo < delta < hi):
        raise ValueError(
            f"delta={delta} outside attainable range ({lo:.3e}, {hi:.3e})")

    def f(u):
        d = bar_delta(math.expm1(u), r, h, p)
        return math.log(d) - math.log(delta) if d > 0 else -np.inf

    u = brentq(f, math.log1p(_ETA_LO), math.log1p(_ETA_HI),
               xtol=1e-14, rtol=1e-15, maxiter=300)
    eta = math.expm1(u)
    achieved = bar_delta(eta, r, h, p)
    if abs(achieved - delta) > 1e-8 * max(delta, 1.0):
        raise RuntimeError(
            f"tail bisection failed to converge: achieved {achieved}, target {delta}")
    log_z, _ = _tail_integrals(eta, r, h, p)
    lambda_mult = 1.0 - log_z
    value = -log_z - eta * delta + (p / 2.0) * math.log(2.0 * math.pi * h)
    return TailSolveResult(eta=eta, lambda_mult=lambda_mult,
                           achieved_delta=achieved, value=value)


def delta0(r: float, h: float, p: int = 1) -> float:
    """Smallest sampled threshold above which the tail cost dominates
    ``delta / 2``.

    Scans a geometric grid (64 points per decade on [1e-6, 1e2]) and
    returns the smallest grid value from which ``out_cost(...).value >=
    delta / 2`` holds for every larger sampled ``delta``.
    """
    _check_h(h)
    grid = np.geomspace(1e-6, 1e2, 64 * 8 + 1)
    hi = bar_delta(_ETA_LO, r, h, p)
    ok = np.zeros(len(grid), dtype=bool)
    for i, d in enumerate(grid):
        if d >= hi:
            # unattainably large tails cost +inf; trivially above d/2
            ok[i] = True
            continue
        ok[i] = out_cost(r, float(d), h, p).value >= d / 2.0
    # largest suffix of all-good values
    idx = len(grid)
    for i in range(len(grid) - 1, -1, -1):
        if not ok[i]:
            break
        idx = i
    if idx == len(grid):
        raise RuntimeError(f"tail cost below delta/2 even at delta={grid[-1]}")
    return float(grid[idx])
