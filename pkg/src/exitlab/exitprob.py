"""Attainable exit probabilities.

Three routes to the same quantity at different fidelities: a stationary
Dirichlet solve L v = 0 with boundary data g (exact for the discretized
operator), a Monte-Carlo estimate of the boundary functional at the
stopped state x(tau ^ T), and a vanishing-viscosity sweep that re-solves
the Dirichlet problem along a decreasing ladder of regularizations and
reports sup-norm Cauchy differences on a fixed interior sub-box.

Boundary data is either an arithmetic expression over the joint
coordinates x1..xD or a mollified face indicator: 1 on the target faces,
linearly decaying to 0 at boundary distance 1/k.  The stationary solve is
exact only in the vanishing-horizon-mismatch sense: finite-T answers come
from the Monte-Carlo route, and the two are compared, not conflated.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (EigenError, SimulationError, SolveError, SpecError)
from .eigen import _make_solver
from .expr import Expr, compile_program, parse
from .fdgrid import SparseOperator, TensorGrid, assemble_generator, build_grid
from .sde import _plan_steps, _run_all

__all__ = ["BoundaryData", "indicator_family", "solve_dirichlet",
           "field_at", "ExitProbability", "mc_exit_probability",
           "ViscositySweep", "viscosity_sweep"]


def _parse_face(face):
    """Canonicalize a face spec like "x2-" or (2, "-") to (axis0, side)."""
    if isinstance(face, str):
        token = face.strip()
        if len(token) >= 3 and token[0] == "x" and token[-1] in "+-":
            axis, side = token[1:-1], token[-1]
        else:
            raise SpecError(f"face '{face}' is not of the form 'x<i>+' "
                            "or 'x<i>-'")
        try:
            axis = int(axis)
        except ValueError:
            raise SpecError(f"face '{face}' has a non-integer axis") from None
    else:
        try:
            axis, side = face
        except (TypeError, ValueError):
            raise SpecError(f"face {face!r} is not (axis, side)") from None
        axis = int(axis)
        if side not in ("+", "-"):
            raise SpecError(f"face side {side!r} must be '+' or '-'")
    if axis < 1:
        raise SpecError(f"face axis {axis} must be >= 1")
    return axis - 1, side


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Dirichlet data: an expression over x1..xD, or a face-indicator ramp
    of sharpness k (values in [0, 1] by construction)."""

    kind: str                    # "expression" | "indicator"
    ast: Optional[Expr] = None
    faces: tuple = ()            # ((axis0, '+'|'-'), ...)
    k: float = 0.0

    @staticmethod
    def expression(src) -> "BoundaryData":
        ast = parse(src) if isinstance(src, str) else src
        if not isinstance(ast, Expr):
            raise SpecError("expression data needs a source string or AST")
        return BoundaryData(kind="expression", ast=ast)

    def values(self, points: np.ndarray, lows, highs) -> np.ndarray:
        """Evaluate at rows of ``points`` inside/on the box [lows, highs]."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "expression":
            slots = tuple(f"x{i}" for i in range(1, points.shape[1] + 1))
            prog = compile_program(self.ast, slots)
            vals = prog.run([points[:, a] for a in range(points.shape[1])])
            vals = np.asarray(vals, dtype=float)
            if vals.ndim == 0:      # constant program
                vals = np.full(points.shape[0], float(vals))
            if not np.all(np.isfinite(vals)):
                raise SpecError("boundary data evaluated to a non-finite "
                                "value")
            return vals
        planes = []
        for axis, side in self.faces:
            if axis >= points.shape[1]:
                raise SpecError(f"face x{axis + 1}{side} is outside the "
                                f"{points.shape[1]}-dimensional domain")
            planes.append((axis, highs[axis] if side == "+" else lows[axis]))
        dist = np.min(
            np.stack([np.abs(points[:, a] - p) for a, p in planes]), axis=0)
        return np.clip(1.0 - self.k * dist, 0.0, 1.0)


def indicator_family(k: float, faces) -> BoundaryData:
    """Mollified indicator of a target face set: 1 on the faces, linear
    decay to 0 over boundary distance 1/k."""
    if k <= 0:
        raise SpecError(f"sharpness k must be positive, got {k}")
    faces = tuple(_parse_face(f) for f in faces)
    if not faces:
        raise SpecError("target face set is empty")
    return BoundaryData(kind="indicator", faces=faces, k=float(k))


# --------------------------------------------------------------- stationary


def solve_dirichlet(op: SparseOperator, data: BoundaryData) -> np.ndarray:
    """Interior field v with L v = 0 and v = data on the boundary nodes.

    The eliminated boundary couplings supply the right-hand side:
    (-L) v = B g."""
    grid = op.grid
    g = data.values(grid.boundary_points(), grid.lows, grid.highs)
    rhs = op.boundary @ g
    try:
        solve = _make_solver((-op.matrix).tocsr(), grid.dim)
        v = solve(rhs)
    except EigenError as exc:
        raise SolveError(f"Dirichlet solve failed: {exc}") from exc
    return v


def field_at(grid: TensorGrid, field: np.ndarray, point) -> float:
    """Value of an interior field at the interior node nearest ``point``."""
    point = np.asarray(point, dtype=float)
    idx = np.rint((point - grid.lows) / grid.h).astype(int)
    idx = np.clip(idx, 1, np.array(grid.shape) - 2)
    flat = np.ravel_multi_index(tuple(idx - 1), grid.interior_shape)
    return float(field[flat])


# -------------------------------------------------------------- Monte Carlo


@dataclass(frozen=True, eq=False)
class ExitProbability:
    """MC mean of a boundary functional at the stopped state x(tau ^ T)."""

    estimate: float
    ci_halfwidth: float     # 1.96 * sample sd / sqrt(n)
    n_paths: int            # valid paths scored
    n_invalid: int
    n_censored: int         # paths stopped by the horizon, not the exit
    horizon: float
    dt: float
    level: int
    absorb: str


def _sharp_face_scores(states, lows, highs, faces) -> np.ndarray:
    """1.0 where the nearest boundary face of each state is in the target
    set.  Exit states sit on their crossing face up to interpolation
    rounding, so nearest-face lookup recovers the crossing face."""
    dim = states.shape[1]
    dist = np.empty((2 * dim, states.shape[0]))
    for a in range(dim):
        dist[2 * a] = np.abs(states[:, a] - lows[a])
        dist[2 * a + 1] = np.abs(highs[a] - states[:, a])
    nearest = np.argmin(dist, axis=0)
    wanted = np.zeros(2 * dim, dtype=bool)
    for axis, side in faces:
        if axis >= dim:
            raise SpecError(f"face x{axis + 1}{side} is outside the "
                            f"{dim}-dimensional domain")
        wanted[2 * axis + (1 if side == "+" else 0)] = True
    return wanted[nearest].astype(float)


def mc_exit_probability(spec, policy, level: int, target, eps=None,
                        horizon: Optional[float] = None, dt: float = 1e-3,
                        n_paths: int = 10000, master_seed: int = 0,
                        absorb: str = "joint",
                        n_workers: int = 1) -> ExitProbability:
    """Estimate E[f(x(tau ^ T))] where f is the target functional.

    ``target`` is a BoundaryData or a list of faces ("x1+", ...): faces
    score 1 when the path's exit crossing lies on a target face; censored
    paths score the expression at the horizon state for expression data
    and 0 for indicators and faces."""
    if not 1 <= level <= spec.n:
        raise SpecError(f"level {level} out of range 1..{spec.n}")
    if absorb not in ("joint", "level"):
        raise SpecError(f"unknown absorption rule '{absorb}'")
    if n_paths < 2:
        raise SpecError("need at least two paths for a CI")
    if isinstance(target, BoundaryData):
        data = target
    else:
        faces = tuple(_parse_face(f) for f in target)
        if not faces:
            raise SpecError("target face set is empty")
        data = faces
    eps_vec = spec.eps_vector(level, eps)
    t_end_req = spec.horizon if horizon is None else float(horizon)
    n_steps, t_end = _plan_steps(t_end_req, dt)
    raw = _run_all(spec, policy, level, eps_vec, dt, n_steps, master_seed,
                   n_paths, stop_mode=absorb, record_locations=True,
                   n_workers=n_workers)
    valid = ~raw["invalid"]
    n_invalid = int(np.sum(~valid))
    if int(valid.sum()) < 2:
        raise SimulationError(
            f"{n_invalid} of {n_paths} paths diverged; nothing to score")
    times = raw["exit_time"][valid]
    locs = raw["exit_loc"][valid]
    terminal = raw["terminal"][valid]

    if absorb == "level":
        tau = times[:, level - 1]
        which = np.full(tau.shape, level - 1)
    else:
        tau = times.min(axis=1)
        which = np.argmin(times, axis=1)
    exited = tau <= t_end
    states = terminal.copy()
    rows = np.nonzero(exited)[0]
    states[rows] = locs[rows, which[rows], :]

    lo, hi = spec.omega_bounds(level)
    scores = np.zeros(states.shape[0])
    if isinstance(data, BoundaryData):
        if data.kind == "expression":
            scores = data.values(states, lo, hi)   # censored: f(x(T))
        else:
            scores[exited] = data.values(states[exited], lo, hi)
    else:
        scores[exited] = _sharp_face_scores(states[exited], lo, hi, data)

    n = scores.size
    q = float(scores.mean())
    sd = float(scores.std(ddof=1))
    return ExitProbability(
        estimate=q, ci_halfwidth=float(1.96 * sd / np.sqrt(n)), n_paths=n,
        n_invalid=n_invalid, n_censored=int(np.sum(~exited)),
        horizon=t_end, dt=dt, level=level, absorb=absorb)


# ---------------------------------------------------------------- viscosity


@dataclass(frozen=True, eq=False)
class ViscositySweep:
    """Dirichlet fields along a decreasing regularization ladder with
    Cauchy diagnostics on the middle-half interior sub-box."""

    eps: tuple
    fields: np.ndarray       # (n_eps, n_interior)
    sup_diffs: tuple         # sup |v_{j+1} - v_j| over the sub-box
    ill: tuple               # eps below the resolvable scale max(h)^2
    eps_floor: float
    core_mask: np.ndarray
    grid: TensorGrid
    converging: bool         # sup_diffs nonincreasing


def viscosity_sweep(spec, policy, level: int, data: BoundaryData, eps_list,
                    nodes_per_axis, warn: bool = True) -> ViscositySweep:
    eps_arr = np.asarray(eps_list, dtype=float)
    if eps_arr.ndim != 1 or eps_arr.size < 2:
        raise SpecError("eps_list needs at least two entries")
    if np.any(np.diff(eps_arr) >= 0):
        raise SpecError("eps_list must be strictly decreasing")
    if np.any(eps_arr < 0):
        raise SpecError("eps_list entries must be nonnegative")
    grid = build_grid(spec, level, nodes_per_axis)
    floor = float(np.max(grid.h) ** 2)
    fields = np.empty((eps_arr.size, grid.n_interior))
    for j, e in enumerate(eps_arr):
        op = assemble_generator(spec, policy, grid, eps=e, warn=warn)
        fields[j] = solve_dirichlet(op, data)
    mid = (grid.lows + grid.highs) / 2.0
    quarter = (grid.highs - grid.lows) / 4.0
    pts = grid.interior_points()
    core = np.all(np.abs(pts - mid) <= quarter + 1e-12, axis=1)
    diffs = tuple(
        float(np.max(np.abs(fields[j + 1, core] - fields[j, core])))
        for j in range(eps_arr.size - 1))
    steps = np.diff(diffs)
    return ViscositySweep(
        eps=tuple(float(e) for e in eps_arr), fields=fields,
        sup_diffs=diffs, ill=tuple(bool(e < floor) for e in eps_arr),
        eps_floor=floor, core_mask=core, grid=grid,
        converging=bool(np.all(steps <= 1e-12)) if steps.size else True)
