"""Policy iteration for the minimum exit rate.

The improvement step maximizes the discrete Hamiltonian
u -> <grad_h psi, m_l(x, u)> over the finite control set at every node,
using the assembler's upwind differences with the candidate control's own
drift signs (re-upwinding keeps improvement consistent with evaluation).
Maximizing the Hamiltonian can only decrease the principal eigenvalue of
-L, so the recorded lambda sequence is nonincreasing up to the stopping
tolerance.  Chains are optimized level by level: lower-level policies are
frozen at their optima before the next level's problem is assembled.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import DriftEvaluator
from .eigen import EigenPair, principal_eigenpair
from .errors import SpecError
from .fdgrid import TensorGrid, assemble_generator, build_grid
from .policy import PolicyTable, SubsystemPolicy

__all__ = ["policy_improve", "policy_iteration", "optimize_chain",
           "PolicyIterationResult"]


def _upwind_gradients(grid: TensorGrid, psi: np.ndarray):
    """Forward/backward differences of the interior field against the
    homogeneous Dirichlet extension, flattened in interior C order."""
    full = np.zeros(grid.shape)
    core = tuple(slice(1, s - 1) for s in grid.shape)
    interior = psi.reshape(grid.interior_shape)
    full[core] = interior
    plus, minus = [], []
    for a in range(grid.dim):
        up = tuple(slice(2, s) if j == a else slice(1, s - 1)
                   for j, s in enumerate(grid.shape))
        dn = tuple(slice(0, s - 2) if j == a else slice(1, s - 1)
                   for j, s in enumerate(grid.shape))
        plus.append(((full[up] - interior) / grid.h[a]).reshape(-1))
        minus.append(((interior - full[dn]) / grid.h[a]).reshape(-1))
    return plus, minus


def policy_improve(spec, grid: TensorGrid, psi, eps=None,
                   base: Optional[PolicyTable] = None,
                   mode: str = "joint") -> PolicyTable:
    """Pointwise Hamiltonian maximizer for the grid's level.

    Ties go to the smallest control-set index.  ``eps`` is accepted for
    signature symmetry with the assembler; the regularization terms do not
    depend on the control and cannot move the argmax.  In "own" mode the
    selector may read only the level's own block, so the Hamiltonian is
    averaged against the psi-weighted marginal over the leading
    coordinates (experimental).
    """
    del eps
    level, d = grid.level, grid.d
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (grid.n_interior,):
        raise SpecError(f"psi has shape {psi.shape}, grid needs "
                        f"({grid.n_interior},)")
    if psi.min() <= 0.0:
        raise SpecError("psi must be strictly positive on the interior")
    if mode not in ("joint", "own"):
        raise SpecError(f"unknown feedback mode '{mode}'")
    if base is None:
        base = PolicyTable.constant(spec)

    points = grid.interior_points()
    ev = DriftEvaluator(spec, base, level)
    plus, minus = _upwind_gradients(grid, psi)
    block = range((level - 1) * d, level * d)

    controls = spec.control_sets[level - 1]
    ham = np.empty((len(controls), grid.n_interior))
    for j, u in enumerate(controls):
        uu = np.tile(np.asarray(u, dtype=float), (grid.n_interior, 1))
        b = ev.subsystem_drift_with_controls(level, points, uu)
        h = np.zeros(grid.n_interior)
        for c, axis in enumerate(block):
            bc = b[:, c]
            h += np.where(bc >= 0.0, bc * plus[axis], bc * minus[axis])
        ham[j] = h

    if mode == "joint":
        idx = np.argmax(ham, axis=0)          # first max = smallest index
        interior_table = idx.reshape(grid.interior_shape)
        axes = tuple((float(grid.lows[a]), float(grid.highs[a]),
                      grid.shape[a]) for a in range(grid.dim))
    else:
        w = psi.reshape(grid.interior_shape)
        lead = tuple(range((level - 1) * d))
        marg = np.stack([
            (h.reshape(grid.interior_shape) * w).sum(axis=lead)
            for h in ham
        ])
        idx = np.argmax(marg, axis=0)
        interior_table = idx.reshape(grid.interior_shape[(level - 1) * d:])
        axes = tuple((float(grid.lows[a]), float(grid.highs[a]),
                      grid.shape[a])
                     for a in range((level - 1) * d, level * d))

    table = np.pad(interior_table, 1, mode="edge")  # clamp at the boundary
    sub = SubsystemPolicy(controls=controls, mode=mode, axes=axes,
                          table=table)
    return base.replaced(level, sub)


@dataclass(frozen=True, eq=False)
class PolicyIterationResult:
    level: int
    value: float                 # lambda*
    pair: EigenPair
    policy: PolicyTable
    lambda_history: tuple
    sweeps: int
    converged: bool
    reason: str                  # fixed-point | lambda-tol | max-sweeps


def policy_iteration(spec, nodes_per_axis, eps=None, level: int = 1,
                     tol: float = 1e-9, max_sweeps: int = 50,
                     initial: Optional[PolicyTable] = None,
                     mode: str = "joint", eig_tol: float = 1e-8,
                     eig_max_iter: int = 500) -> PolicyIterationResult:
    """Alternate generator assembly, eigensolve, and improvement.

    Stops at a policy fixed point or when the eigenvalue moves less than
    ``tol``; past ``max_sweeps`` the best (smallest-lambda) sweep is
    returned with ``converged=False``.
    """
    if tol <= 0.0:
        raise SpecError(f"tol must be positive, got {tol}")
    if max_sweeps < 1:
        raise SpecError(f"max_sweeps must be >= 1, got {max_sweeps}")
    grid = build_grid(spec, level, nodes_per_axis)
    policy = initial if initial is not None else PolicyTable.constant(spec)
    points = grid.interior_points()
    history = []
    best = None
    lam_prev = np.inf
    for sweep in range(1, max_sweeps + 1):
        op = assemble_generator(spec, policy, grid, eps=eps)
        pair = principal_eigenpair(op, tol=eig_tol, max_iter=eig_max_iter)
        history.append(pair.value)
        if best is None or pair.value < best[0]:
            best = (pair.value, pair, policy)
        improved = policy_improve(spec, grid, pair.psi, eps=eps,
                                  base=policy, mode=mode)
        # fixed point = same control selection at every interior node;
        # comparing representations would miss constant-vs-table aliases
        if np.array_equal(improved.control_index(level, points),
                          policy.control_index(level, points)):
            return PolicyIterationResult(
                level=level, value=pair.value, pair=pair, policy=policy,
                lambda_history=tuple(history), sweeps=sweep, converged=True,
                reason="fixed-point")
        if abs(pair.value - lam_prev) < tol:
            return PolicyIterationResult(
                level=level, value=pair.value, pair=pair, policy=policy,
                lambda_history=tuple(history), sweeps=sweep, converged=True,
                reason="lambda-tol")
        lam_prev = pair.value
        policy = improved
    value, pair, policy = best
    return PolicyIterationResult(
        level=level, value=value, pair=pair, policy=policy,
        lambda_history=tuple(history), sweeps=max_sweeps, converged=False,
        reason="max-sweeps")


def optimize_chain(spec, nodes_per_axis, eps=None, tol: float = 1e-9,
                   max_sweeps: int = 50, mode: str = "joint",
                   eig_tol: float = 1e-8, eig_max_iter: int = 500):
    """Sequential ladder: optimize level 1, freeze its policy, optimize
    level 2 on the joint domain, and so on.  Returns one
    PolicyIterationResult per level; the last one carries the fully
    optimized chain policy."""
    results = []
    policy = PolicyTable.constant(spec)
    for level in range(1, spec.n + 1):
        if eps is None or np.ndim(eps) == 0:
            eps_l = eps
        else:
            eps_l = np.asarray(eps, dtype=float)[: level - 1]
        if np.ndim(nodes_per_axis) == 0:
            nodes_l = nodes_per_axis
        else:
            nodes_l = list(nodes_per_axis)[: level * spec.d]
        res = policy_iteration(spec, nodes_l, eps=eps_l, level=level,
                               tol=tol, max_sweeps=max_sweeps,
                               initial=policy, mode=mode, eig_tol=eig_tol,
                               eig_max_iter=eig_max_iter)
        results.append(res)
        policy = res.policy
    return results
