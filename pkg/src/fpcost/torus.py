"""Periodic grids, grid measures, transport plans, and jump kernels.

Everything lives on the flat torus ``T^p = R^p / Z^p`` with ``p`` in
``{1, 2}``.  A grid splits each axis into ``n`` equal cells; the cell with
multi-index ``i`` is centred at ``i / n`` and measures are stored as one
weight per cell (total mass one).  Jump kernels describe, for every source
cell, a probability distribution of displacements ``v`` on the covering
space ``R^p``; displacements are tracked per integer lift so that moments
such as the forward velocity are computed on the line, not on the quotient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import ndtr
from scipy.optimize import linprog
from scipy import sparse

__all__ = [
    "TorusGrid",
    "GridMeasure",
    "TransportPlan",
    "JumpKernel",
    "MeasurePath",
    "make_grid",
    "wrap_distance",
    "push_forward",
    "wasserstein",
    "path_sup_distance",
    "displacement_tables",
    "uniform_measure",
    "dirac_measure",
    "wrapped_gaussian_measure",
]

_MASS_TOL = 1e-12


@dataclass(frozen=True)
class TorusGrid:
    """Uniform cell decomposition of the torus.

    Parameters
    ----------
    p : int
        Dimension, 1 or 2.
    n : int
        Cells per axis (even, >= 8 for production use; small grids are
        allowed for exhaustive tests).
    lift_radius : int
        Number of integer copies of the fundamental domain kept per axis
        when integrating over displacements.
    """

    p: int
    n: int
    lift_radius: int = 1

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError(f"p must be 1 or 2, got {self.p}")
        if self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")
        if self.lift_radius < 1:
            raise ValueError(f"lift_radius must be >= 1, got {self.lift_radius}")

    @property
    def n_cells(self) -> int:
        return self.n ** self.p

    @property
    def cell_width(self) -> float:
        return 1.0 / self.n

    @property
    def cell_volume(self) -> float:
        return self.cell_width ** self.p

    def centers(self) -> np.ndarray:
        """Cell centres, shape ``(n_cells, p)``."""
        axis = np.arange(self.n) / self.n
        if self.p == 1:
            return axis[:, None]
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def multi_index(self, flat) -> np.ndarray:
        flat = np.asarray(flat)
        if self.p == 1:
            return flat[..., None]
        return np.stack([flat // self.n, flat % self.n], axis=-1)

    def flat_index(self, multi) -> np.ndarray:
        multi = np.asarray(multi)
        if self.p == 1:
            return multi[..., 0]
        return multi[..., 0] * self.n + multi[..., 1]


def make_grid(p: int, n: int, h_max: float) -> TorusGrid:
    """Build a grid whose lift window covers the heat kernel at scale ``h_max``.

    The lift radius keeps the Gaussian tail mass outside the retained
    copies below 1e-12 for every time step ``h <= h_max``, capped at three
    copies per axis.
    """
    if not (0 < h_max):
        raise ValueError(f"h_max must be positive, got {h_max}")
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    # displacement reach in cells: sqrt(2 h ln 1e12) * n + 1, then in copies
    reach_cells = math.ceil(math.sqrt(2.0 * h_max * math.log(1e12)) * n) + 1
    copies = max(1, min(3, math.ceil(reach_cells / n)))
    return TorusGrid(p=p, n=n, lift_radius=copies)


@dataclass(frozen=True)
class GridMeasure:
    """Probability measure with one weight per grid cell."""

    grid: TorusGrid
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.grid.n_cells,):
            raise ValueError(
                f"weights shape {w.shape} != ({self.grid.n_cells},)"
            )
        if np.any(w < -_MASS_TOL):
            raise ValueError("negative weight in measure")
        total = w.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {total}, expected 1")
        w = np.maximum(w, 0.0)
        w = w / w.sum()
        object.__setattr__(self, "weights", w)

    def densities(self) -> np.ndarray:
        return self.weights / self.grid.cell_volume


def uniform_measure(grid: TorusGrid) -> GridMeasure:
    return GridMeasure(grid, np.full(grid.n_cells, 1.0 / grid.n_cells))


def dirac_measure(grid: TorusGrid, cell: int) -> GridMeasure:
    w = np.zeros(grid.n_cells)
    w[cell] = 1.0
    return GridMeasure(grid, w)


def wrapped_gaussian_measure(grid: TorusGrid, center, var: float) -> GridMeasure:
    """Wrapped Gaussian blob binned to cells (periodised over 8 copies)."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    x = grid.centers()
    w = np.ones(grid.n_cells)
    for d in range(grid.p):
        wd = np.zeros(grid.n_cells)
        for k in range(-8, 9):
            wd += np.exp(-((x[:, d] - center[d] + k) ** 2) / (2.0 * var))
        w = w * wd
    return GridMeasure(grid, w / w.sum())


def wrap_distance(grid: TorusGrid, i, j) -> np.ndarray:
    """Geodesic distance between the centres of cells ``i`` and ``j``."""
    mi = grid.multi_index(i).astype(float) / grid.n
    mj = grid.multi_index(j).astype(float) / grid.n
    d = mi - mj
    d -= np.round(d)
    return np.sqrt((d ** 2).sum(axis=-1))


def _distance_matrix(grid: TorusGrid, order: int) -> np.ndarray:
    idx = np.arange(grid.n_cells)
    d = wrap_distance(grid, idx[:, None], idx[None, :])
    return d ** order


# ---------------------------------------------------------------------------
# transport plans and Wasserstein distances


@dataclass(frozen=True)
class TransportPlan:
    """Coupling between two grid measures (mass from cell i to cell j)."""

    grid: TorusGrid
    matrix: np.ndarray
    cost: float
    order: int

    def marginals(self):
        return self.matrix.sum(axis=1), self.matrix.sum(axis=0)


def _circular_cost_at_shifts(pos, cw1, cw2, shifts, order):
    """Cost of the cyclically shifted quantile coupling for a batch of shifts.

    Both quantile functions are piecewise constant; between consecutive
    breakpoints the matched pair of atoms is fixed, so each segment costs
    its length times the wrapped distance to the power ``order``.
    """
    m = len(shifts)
    nb = len(cw1) + len(cw2) + 1
    # breakpoints of F1^{-1} are fixed, those of the shifted F2^{-1} move
    b1 = np.broadcast_to(cw1, (m, len(cw1)))
    b2 = (cw2[None, :] + shifts[:, None]) % 1.0
    zero = np.zeros((m, 1))
    ts = np.sort(np.concatenate([b1, b2, zero], axis=1), axis=1)
    lens = np.diff(ts, axis=1, append=ts[:, :1] + 1.0)
    mids = ts + lens / 2.0
    i1 = np.clip(np.searchsorted(cw1, mids.ravel(), side="right"), 0, len(cw1) - 1)
    q2 = (mids - shifts[:, None]) % 1.0
    i2 = np.clip(np.searchsorted(cw2, q2.ravel(), side="right"), 0, len(cw2) - 1)
    d = pos[0][i1] - pos[1][i2]
    d -= np.round(d)
    seg = (np.abs(d) ** order).reshape(m, nb)
    return (seg * lens).sum(axis=1), (ts, lens, mids)


def _circular_wasserstein(mu: GridMeasure, nu: GridMeasure, order: int,
                          return_plan: bool):
    """Exact optimal transport on the circle for grid measures.

    For convex powers of the geodesic distance an optimal coupling is a
    cyclic shift of the quantile coupling; the cost is piecewise linear in
    the shift, so scanning the breakpoints (differences of cumulative
    weights) is exact.
    """
    grid = mu.grid
    w1, w2 = mu.weights, nu.weights
    s1 = np.flatnonzero(w1 > 0)
    s2 = np.flatnonzero(w2 > 0)
    pos = (s1 / grid.n, s2 / grid.n)
    cw1 = np.cumsum(w1[s1])
    cw2 = np.cumsum(w2[s2])
    cw1[-1] = cw2[-1] = 1.0

    shifts = np.unique((cw1[:, None] - cw2[None, :]).ravel() % 1.0)
    best_cost = np.inf
    best_shift = 0.0
    chunk = max(1, int(2e6 / (len(cw1) + len(cw2) + 1)))
    for lo in range(0, len(shifts), chunk):
        batch = shifts[lo:lo + chunk]
        costs, _ = _circular_cost_at_shifts(pos, cw1, cw2, batch, order)
        k = int(np.argmin(costs))
        if costs[k] < best_cost:
            best_cost = float(costs[k])
            best_shift = float(batch[k])

    value = best_cost if order == 1 else best_cost ** (1.0 / order)
    if not return_plan:
        return value, None

    _, (ts, lens, mids) = _circular_cost_at_shifts(
        pos, cw1, cw2, np.array([best_shift]), order)
    i1 = np.clip(np.searchsorted(cw1, mids[0], side="right"), 0, len(cw1) - 1)
    i2 = np.clip(np.searchsorted(cw2, (mids[0] - best_shift) % 1.0, side="right"),
                 0, len(cw2) - 1)
    plan = np.zeros((grid.n_cells, grid.n_cells))
    np.add.at(plan, (s1[i1], s2[i2]), lens[0])
    # clean up roundoff so marginal identities hold exactly
    plan *= (w1 / np.maximum(plan.sum(axis=1), 1e-300))[:, None]
    return value, TransportPlan(grid, plan, value, order)


def _lp_wasserstein(mu: GridMeasure, nu: GridMeasure, order: int,
                    return_plan: bool):
    """Exact linear-programming transport (two-dimensional grids)."""
    grid = mu.grid
    if grid.n > 32:
        raise ValueError("exact two-dimensional transport limited to n <= 32")
    N = grid.n_cells
    cost = _distance_matrix(grid, order).ravel()
    rows, cols, vals = [], [], []
    for i in range(N):
        rows.extend([i] * N)
        cols.extend(range(i * N, (i + 1) * N))
        vals.extend([1.0] * N)
    for j in range(N):
        rows.extend([N + j] * N)
        cols.extend(range(j, N * N, N))
        vals.extend([1.0] * N)
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(2 * N, N * N))
    b = np.concatenate([mu.weights, nu.weights])
    res = linprog(cost, A_eq=A[:-1], b_eq=b[:-1], bounds=(0, None),
                  method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    raw = float(res.fun)
    value = raw if order == 1 else raw ** (1.0 / order)
    if not return_plan:
        return value, None
    plan = res.x.reshape(N, N)
    return value, TransportPlan(grid, plan, value, order)


def wasserstein(mu: GridMeasure, nu: GridMeasure, order: int = 1,
                return_plan: bool = False):
    """Wasserstein distance of the given order between two grid measures.

    Returns the distance, or ``(distance, TransportPlan)`` when
    ``return_plan`` is set.  Exact: circular reduction in one dimension,
    linear programming in two.
    """
    if mu.grid != nu.grid:
        raise ValueError("measures live on different grids")
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    if mu.grid.p == 1:
        value, plan = _circular_wasserstein(mu, nu, order, return_plan)
    else:
        value, plan = _lp_wasserstein(mu, nu, order, return_plan)
    return (value, plan) if return_plan else value


# ---------------------------------------------------------------------------
# displacement tables for Gaussian-profile jump kernels

_SQRT2PI = math.sqrt(2.0 * math.pi)


def _gauss_interval_moments(a, b, h):
    """Zeroth/first/second moments of N(0, h) over [a, b] (closed form)."""
    s = math.sqrt(h)
    za, zb = a / s, b / s
    pa = np.exp(-0.5 * za ** 2) / (_SQRT2PI * s)
    pb = np.exp(-0.5 * zb ** 2) / (_SQRT2PI * s)
    m0 = ndtr(zb) - ndtr(za)
    m1 = h * (pa - pb)
    m2 = h * m0 + h * (a * pa - b * pb)
    return m0, m1, m2


def _gauss_interval_abs3(a, b, h):
    """Third absolute moment of N(0, h) over [a, b] with a <= b."""
    def anti(v):
        # antiderivative of v^3 phi(v): -h phi(v) (v^2 + 2h)
        s = math.sqrt(h)
        return -h * (np.exp(-0.5 * (v / s) ** 2) / (_SQRT2PI * s)) * (v ** 2 + 2 * h)

    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    # split at zero where the interval straddles it
    neg_hi = np.minimum(hi, 0.0)
    pos_lo = np.maximum(lo, 0.0)
    neg = np.where(lo < 0, -(anti(neg_hi) - anti(lo)), 0.0)
    pos = np.where(hi > 0, anti(hi) - anti(pos_lo), 0.0)
    return neg + pos


@lru_cache(maxsize=64)
def _axis_tables(n: int, lift_radius: int, h: float):
    """Per-axis Gaussian moments over lifted displacement cells.

    Displacement cells for relative index d are ``d/n + k +/- 1/(2n)`` over
    integer lifts ``k``.  Shapes are ``(n, n_lifts)``.
    """
    d = np.arange(n) / n
    ks = np.arange(-lift_radius, lift_radius + 1, dtype=float)
    lo = d[:, None] + ks[None, :] - 0.5 / n
    hi = lo + 1.0 / n
    m0, m1, m2 = _gauss_interval_moments(lo, hi, h)
    a3 = _gauss_interval_abs3(lo, hi, h)
    return {"m0": m0, "m1": m1, "m2": m2, "a3": a3,
            "lo": lo, "hi": hi, "mid": (lo + hi) / 2.0}


@lru_cache(maxsize=64)
def displacement_tables(grid: TorusGrid, h: float):
    """Moment tables of the heat kernel ``N(0, h Id)`` over displacement cells.

    Keys (all indexed by flat displacement, i.e. target minus source cell
    index mod n per axis):

    - ``mass``: total Gaussian mass over all lifts of the displacement cell
    - ``mean``: first-moment vector, shape ``(n_cells, p)``
    - ``second``: second-moment matrix, shape ``(n_cells, p, p)``
    - ``tail_mass(r)`` / ``tail_second(r)`` / ``l_int``: see functions below
    """
    ax = _axis_tables(grid.n, grid.lift_radius, h)
    n = grid.n
    if grid.p == 1:
        mass = ax["m0"].sum(axis=1)
        mean = ax["m1"].sum(axis=1)[:, None]
        second = ax["m2"].sum(axis=1)[:, None, None]
        return {"axis": ax, "mass": mass, "mean": mean, "second": second}
    m0x = ax["m0"]
    # tensor over the two axes; flat displacement index = dx * n + dy
    mass = (m0x.sum(axis=1)[:, None] * m0x.sum(axis=1)[None, :]).ravel()
    m0s, m1s, m2s = ax["m0"].sum(axis=1), ax["m1"].sum(axis=1), ax["m2"].sum(axis=1)
    mean = np.stack([
        (m1s[:, None] * m0s[None, :]).ravel(),
        (m0s[:, None] * m1s[None, :]).ravel(),
    ], axis=1)
    second = np.zeros((n * n, 2, 2))
    second[:, 0, 0] = (m2s[:, None] * m0s[None, :]).ravel()
    second[:, 1, 1] = (m0s[:, None] * m2s[None, :]).ravel()
    second[:, 0, 1] = second[:, 1, 0] = (m1s[:, None] * m1s[None, :]).ravel()
    return {"axis": ax, "mass": mass, "mean": mean, "second": second}


@lru_cache(maxsize=64)
def displacement_index(grid: TorusGrid) -> np.ndarray:
    """Matrix of flat displacement indices, ``D[i, j] = (j - i) mod n`` per axis."""
    n = grid.n
    if grid.p == 1:
        i = np.arange(n)
        return (i[None, :] - i[:, None]) % n
    ix = np.arange(n * n) // n
    iy = np.arange(n * n) % n
    dx = (ix[None, :] - ix[:, None]) % n
    dy = (iy[None, :] - iy[:, None]) % n
    return dx * n + dy


def tail_tables(grid: TorusGrid, h: float, r: float):
    """Per-displacement mass / half-second-moment beyond radius ``r``, and
    the integral of ``min(|v|^3, 1)``.

    One-dimensional cells straddling ``|v| = r`` or ``|v| = 1`` are split
    exactly; in two dimensions cells are classified by their centre.
    """
    tab = displacement_tables(grid, h)
    ax = tab["axis"]
    if grid.p == 1:
        lo, hi = ax["lo"], ax["hi"]
        out_lo = np.maximum(lo, r)
        out_hi = np.maximum(hi, r)
        m0p, _, m2p = _gauss_interval_moments(out_lo, out_hi, h)
        nlo = np.minimum(lo, -r)
        nhi = np.minimum(hi, -r)
        m0n, _, m2n = _gauss_interval_moments(nlo, nhi, h)
        tail_mass = (m0p + m0n).sum(axis=1)
        tail_second = (m2p + m2n).sum(axis=1)
        # l(v) = min(|v|^3, 1): exact inside/outside the unit ball
        in_lo = np.clip(lo, -1.0, 1.0)
        in_hi = np.clip(hi, -1.0, 1.0)
        inner = _gauss_interval_abs3(in_lo, in_hi, h)
        o_m0p, _, _ = _gauss_interval_moments(np.maximum(lo, 1.0),
                                              np.maximum(hi, 1.0), h)
        o_m0n, _, _ = _gauss_interval_moments(np.minimum(lo, -1.0),
                                              np.minimum(hi, -1.0), h)
        l_int = (inner + o_m0p + o_m0n).sum(axis=1)
        return tail_mass, tail_second, l_int
    # two dimensions: centre classification per lifted product cell
    mid = ax["mid"]
    m0 = ax["m0"]
    n = grid.n
    nl = mid.shape[1]
    cx = np.broadcast_to(mid[:, None, :, None], (n, n, nl, nl))
    cy = np.broadcast_to(mid[None, :, None, :], (n, n, nl, nl))
    mass = m0[:, None, :, None] * m0[None, :, None, :]
    r2 = cx ** 2 + cy ** 2
    sec = np.where(r2 > r * r, r2 * mass, 0.0)
    out = np.where(r2 > r * r, mass, 0.0)
    labs3 = np.minimum(r2 ** 1.5, 1.0) * mass
    return (out.sum(axis=(2, 3)).ravel(),
            sec.sum(axis=(2, 3)).ravel(),
            labs3.sum(axis=(2, 3)).ravel())


# ---------------------------------------------------------------------------
# jump kernels


@dataclass(frozen=True)
class JumpKernel:
    """Markov kernel of torus displacements with per-lift bookkeeping.

    ``cells[i, j]`` is the probability that a jump from cell ``i`` lands in
    torus cell ``j``.  How that torus mass splits across integer lifts (and
    distributes inside each cell) is fixed by ``model``:

    - ``"gaussian"``: proportional to the heat kernel ``N(0, h Id)`` over
      the lifted copies of the target cell, with the Gaussian profile used
      for within-cell moments;
    - ``"point"``: all mass at the minimal-lift centre displacement.
    """

    grid: TorusGrid
    h: float
    cells: np.ndarray
    model: str = "gaussian"

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if self.model not in ("gaussian", "point"):
            raise ValueError(f"unknown kernel model {self.model!r}")
        c = np.asarray(self.cells, dtype=float)
        N = self.grid.n_cells
        if c.shape != (N, N):
            raise ValueError(f"cells shape {c.shape} != ({N}, {N})")
        if np.any(c < -_MASS_TOL):
            raise ValueError("negative kernel mass")
        object.__setattr__(self, "cells", np.maximum(c, 0.0))

    def row_sums(self) -> np.ndarray:
        return self.cells.sum(axis=1)

    def lift_masses(self, i: int):
        """Masses per (target cell, lift) for source cell ``i``.

        Returns ``(targets, lifts, masses)`` covering the supported
        entries; lifts are per-axis integer offsets.
        """
        row = self.cells[i]
        D = displacement_index(self.grid)[i]
        if self.model == "point":
            tgt = np.flatnonzero(row > 0)
            lifts = np.zeros((len(tgt), self.grid.p), dtype=int)
            return tgt, lifts, row[tgt]
        tab = displacement_tables(self.grid, self.h)
        ax = tab["axis"]
        L = self.grid.lift_radius
        ks = np.arange(-L, L + 1)
        tgt_list, lift_list, mass_list = [], [], []
        if self.grid.p == 1:
            frac = ax["m0"] / np.maximum(tab["mass"][:, None], 1e-300)
            for j in np.flatnonzero(row > 0):
                f = frac[D[j]]
                keep = f > 0
                tgt_list.append(np.full(keep.sum(), j))
                lift_list.append(ks[keep][:, None])
                mass_list.append(row[j] * f[keep])
        else:
            n = self.grid.n
            fx = ax["m0"] / np.maximum(ax["m0"].sum(axis=1, keepdims=True), 1e-300)
            for j in np.flatnonzero(row > 0):
                dx, dy = divmod(D[j], n)
                f = (fx[dx][:, None] * fx[dy][None, :])
                keep = f > 0
                kx, ky = np.meshgrid(ks, ks, indexing="ij")
                tgt_list.append(np.full(keep.sum(), j))
                lift_list.append(np.stack([kx[keep], ky[keep]], axis=1))
                mass_list.append(row[j] * f[keep])
        return (np.concatenate(tgt_list),
                np.concatenate(lift_list),
                np.concatenate(mass_list))


def push_forward(mu: GridMeasure, kernel: JumpKernel) -> GridMeasure:
    """Target marginal ``mu * kernel`` of a measure under a jump kernel."""
    if mu.grid != kernel.grid:
        raise ValueError("measure and kernel live on different grids")
    rows = kernel.row_sums()
    supported = mu.weights > 0
    if np.any(np.abs(rows[supported] - 1.0) > 1e-9):
        raise ValueError("kernel rows on the support of mu are not normalized")
    return GridMeasure(mu.grid, mu.weights @ kernel.cells)


# ---------------------------------------------------------------------------
# measure paths


@dataclass(frozen=True)
class MeasurePath:
    """Time-indexed family of grid measures with uniform stamp spacing."""

    grid: TorusGrid
    t0: float
    dt: float
    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=float)
        if f.ndim != 2 or f.shape[1] != self.grid.n_cells:
            raise ValueError("frames must have shape (T, n_cells)")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        sums = f.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError("every frame must have unit mass")
        object.__setattr__(self, "frames", f)

    @property
    def t1(self) -> float:
        return self.t0 + (len(self.frames) - 1) * self.dt

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.frames))

    def measure(self, it: int) -> GridMeasure:
        return GridMeasure(self.grid, self.frames[it])


def path_sup_distance(path_a: MeasurePath, path_b: MeasurePath) -> float:
    """Supremum over shared stamps of the order-2 Wasserstein distance."""
    if path_a.grid != path_b.grid:
        raise ValueError("paths live on different grids")
    if (abs(path_a.t0 - path_b.t0) > 1e-12
            or abs(path_a.dt - path_b.dt) > 1e-12
            or len(path_a.frames) != len(path_b.frames)):
        raise ValueError("paths have mismatched time stamps")
    worst = 0.0
    for a, b in zip(path_a.frames, path_b.frames):
        d = wasserstein(GridMeasure(path_a.grid, a),
                        GridMeasure(path_b.grid, b), order=2)
        worst = max(worst, d)
    return worst
