"""Batched evaluation of chain drifts and the first-block diffusion.

One evaluator instance compiles every drift component of levels 1..level
(and the sigma matrix) to postfix programs once, then serves vectorized
queries from the simulator, the finite-difference assembler, and the
policy-improvement step.
"""

from __future__ import annotations

import numpy as np

from .expr import Num, compile_program

__all__ = ["DriftEvaluator"]


class DriftEvaluator:
    def __init__(self, spec, policy, level):
        self.spec = spec
        self.policy = policy
        self.level = level
        d = spec.d
        self._progs = []  # per subsystem: list of d component programs
        for i in range(1, level + 1):
            slots = tuple(f"x{k}" for k in range(1, i * d + 1))
            slots += tuple(f"u{j}" for j in range(1, spec.r(i) + 1))
            self._progs.append(
                [compile_program(ast, slots) for ast in spec.drifts[i - 1]]
            )
        sig_slots = tuple(f"x{k}" for k in range(1, d + 1))
        self._sigma_progs = [
            [compile_program(ast, sig_slots) for ast in row] for row in spec.sigma
        ]
        if all(isinstance(a, Num) for row in spec.sigma for a in row):
            self.sigma_const = np.array(
                [[a.value for a in row] for row in spec.sigma], dtype=float
            )
        else:
            self.sigma_const = None

    # ---------------------------------------------------------- drifts

    def subsystem_drift_with_controls(self, i, states, controls):
        """m_i at joint states (rows, >= i*d) with explicit controls (rows, r_i)."""
        d = self.spec.d
        rows = states.shape[0]
        cols = [states[:, k] for k in range(i * d)]
        cols += [controls[:, j] for j in range(controls.shape[1])]
        out = np.empty((rows, d))
        for c, prog in enumerate(self._progs[i - 1]):
            out[:, c] = prog.run(cols)
        return out

    def subsystem_drift(self, i, states):
        """m_i with controls drawn from the policy."""
        u = self.policy.control(i, states)
        return self.subsystem_drift_with_controls(i, states, u)

    def drift(self, states):
        """Full stacked drift (m_1, .., m_level) at joint states."""
        d = self.spec.d
        out = np.empty((states.shape[0], self.level * d))
        for i in range(1, self.level + 1):
            out[:, (i - 1) * d : i * d] = self.subsystem_drift(i, states)
        return out

    # -------------------------------------------------------- diffusion

    def sigma(self, x1):
        """sigma(x^1), shape (rows, d, m)."""
        if self.sigma_const is not None:
            return np.broadcast_to(
                self.sigma_const, (x1.shape[0],) + self.sigma_const.shape
            )
        d, m = self.spec.d, self.spec.m
        cols = [x1[:, k] for k in range(d)]
        out = np.empty((x1.shape[0], d, m))
        for p in range(d):
            for q in range(m):
                out[:, p, q] = self._sigma_progs[p][q].run(cols)
        return out

    def sigma_apply(self, x1, dw):
        """sigma(x^1) @ dw for each row; shapes (rows, d), (rows, m)."""
        if self.sigma_const is not None:
            return dw @ self.sigma_const.T
        return np.einsum("rpm,rm->rp", self.sigma(x1), dw)

    def diffusion_matrix(self, x1):
        """a = sigma sigma^T at x^1, shape (rows, d, d)."""
        sig = self.sigma(x1)
        return np.einsum("rpm,rqm->rpq", sig, sig)
