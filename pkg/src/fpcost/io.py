"""Serialization of measures, paths, step results, and ladder reports.

All floats are emitted with 17 significant digits so that reports are
byte-deterministic and round-trip exactly through IEEE-754 doubles.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from .torus import GridMeasure, MeasurePath, TorusGrid, make_grid
from .step import StepCostResult

__all__ = [
    "dumps",
    "format_float",
    "load_measure",
    "save_measure",
    "load_path",
    "save_path",
    "step_result_to_dict",
    "save_step_result",
    "dump_kernel",
    "load_kernel",
    "ladder_report_to_dict",
    "ladder_report_csv",
]

PathLike = Union[str, Path]


def format_float(x: float) -> str:
    """17-significant-digit decimal form, exact under double round-trip."""
    if x != x:
        return "NaN"
    if x in (float("inf"), float("-inf")):
        return "Infinity" if x > 0 else "-Infinity"
    return format(float(x), ".17g")


def dumps(obj, indent: int = 0) -> str:
    """JSON text with deterministic field order and 17-digit floats."""
    pad = " " * indent
    if isinstance(obj, dict):
        items = ", ".join(f"{json.dumps(str(k))}: {dumps(v)}"
                          for k, v in obj.items())
        return pad + "{" + items + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        return pad + "[" + ", ".join(dumps(v) for v in seq) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return pad + ("true" if obj else "false")
    if isinstance(obj, (int, np.integer)):
        return pad + str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return pad + format_float(float(obj))
    if obj is None:
        return pad + "null"
    return pad + json.dumps(obj)


# ---------------------------------------------------------------------------
# measures and paths


def save_measure(mu: GridMeasure, path: PathLike) -> None:
    doc = {"p": mu.grid.p, "n": mu.grid.n,
           "weights": np.asarray(mu.weights, dtype=float)}
    Path(path).write_text(dumps(doc) + "\n")


def load_measure(path: PathLike, h_max: float = 0.25) -> GridMeasure:
    doc = json.loads(Path(path).read_text())
    for field in ("p", "n", "weights"):
        if field not in doc:
            raise ValueError(f"measure file {path}: missing field {field!r}")
    grid = make_grid(int(doc["p"]), int(doc["n"]), h_max)
    w = np.asarray(doc["weights"], dtype=float)
    if w.shape != (grid.n_cells,):
        raise ValueError(
            f"measure file {path}: expected {grid.n_cells} weights, "
            f"got {w.shape}")
    return GridMeasure(grid, w)


def save_path(path_obj: MeasurePath, path: PathLike) -> None:
    doc = {"p": path_obj.grid.p, "n": path_obj.grid.n,
           "t0": path_obj.t0, "dt": path_obj.dt,
           "frames": np.asarray(path_obj.frames, dtype=float)}
    Path(path).write_text(dumps(doc) + "\n")


def load_path(path: PathLike, h_max: float = 0.25) -> MeasurePath:
    doc = json.loads(Path(path).read_text())
    for field in ("p", "n", "t0", "dt", "frames"):
        if field not in doc:
            raise ValueError(f"path file {path}: missing field {field!r}")
    grid = make_grid(int(doc["p"]), int(doc["n"]), h_max)
    frames = np.asarray(doc["frames"], dtype=float)
    if frames.ndim != 2 or frames.shape[1] != grid.n_cells:
        raise ValueError(
            f"path file {path}: frames must be (T, {grid.n_cells})")
    return MeasurePath(grid, float(doc["t0"]), float(doc["dt"]), frames)


# ---------------------------------------------------------------------------
# step results and kernels


def step_result_to_dict(result: StepCostResult) -> dict:
    kernel = result.kernel
    mean, _ = _kernel_summary(kernel)
    return {
        "cost": result.cost,
        "converged": result.converged,
        "iterations": result.iterations,
        "velocity": np.asarray(result.velocity),
        "covariance": np.asarray(result.covariance),
        "kernel_summary": {
            "mean_displacement": mean,
            "covariance_trace": np.trace(result.covariance,
                                         axis1=1, axis2=2) * kernel.h,
        },
    }


def _kernel_summary(kernel):
    from .step import kernel_moments
    vel, cov = kernel_moments(kernel)
    return vel * kernel.h, cov


def save_step_result(result: StepCostResult, path: PathLike) -> None:
    Path(path).write_text(dumps(step_result_to_dict(result)) + "\n")


def dump_kernel(kernel, path: PathLike) -> None:
    """Raw kernel cells, row-major little-endian float64."""
    cells = np.ascontiguousarray(kernel.cells, dtype="<f8")
    Path(path).write_bytes(cells.tobytes())


def load_kernel(path: PathLike, n_cells: int) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    if raw.size != n_cells * n_cells:
        raise ValueError(
            f"kernel file {path}: expected {n_cells}x{n_cells} floats, "
            f"got {raw.size}")
    return raw.reshape(n_cells, n_cells).copy()


# ---------------------------------------------------------------------------
# ladder reports

LADDER_COLUMNS = ("h", "energy", "drift_energy", "covariance_gap",
                  "third_moment")


def ladder_report_to_dict(report) -> dict:
    doc = {
        "h_values": np.asarray(report.h_values),
        "energies": np.asarray(report.energies),
        "drift_energies": np.asarray(report.drift_energies),
        "covariance_gaps": np.asarray(report.covariance_gaps),
        "third_moments": np.asarray(report.third_moments),
        "liminf_estimate": report.liminf_estimate,
    }
    if report.cauchy_gap is not None:
        doc["cauchy_gap"] = report.cauchy_gap
    return doc


def ladder_report_csv(report) -> str:
    """Flat CSV, one row per rung, gnuplot-friendly comment header."""
    lines = ["# " + ",".join(LADDER_COLUMNS)]
    rows = zip(report.h_values, report.energies, report.drift_energies,
               report.covariance_gaps, report.third_moments)
    for row in rows:
        lines.append(",".join(format_float(v) for v in row))
    return "\n".join(lines) + "\n"
