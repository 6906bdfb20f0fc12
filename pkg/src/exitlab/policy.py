"""Stationary Markov control tables.

A policy assigns, per subsystem, one member of the finite control set to
every state. Grid-backed tables use nearest-node lookup and are total on
the closed feedback domain (queries outside are clamped), so simulation
and assembly can evaluate them anywhere without special cases.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import SpecError

__all__ = ["SubsystemPolicy", "PolicyTable"]


@dataclass(frozen=True, eq=False)
class SubsystemPolicy:
    """Control law for one subsystem.

    mode "constant": a single control-set index everywhere.
    mode "own":      table over a grid on the subsystem's own block x^i.
    mode "joint":    table over a grid on the joint block (x^1, .., x^i).
    """

    controls: tuple          # the finite set U_i, tuples of length r_i
    mode: str = "constant"
    index: int = 0
    axes: tuple = ()         # per feedback axis: (lo, hi, node count)
    table: Optional[np.ndarray] = None  # control-set indices, C-order

    def __post_init__(self):
        if not self.controls:
            raise SpecError("control set is empty")
        widths = {len(u) for u in self.controls}
        if len(widths) != 1:
            raise SpecError("control vectors have inconsistent lengths")
        if self.mode == "constant":
            if not 0 <= self.index < len(self.controls):
                raise SpecError(f"control index {self.index} out of range")
        elif self.mode in ("own", "joint"):
            if self.table is None or not self.axes:
                raise SpecError(f"mode '{self.mode}' needs axes and a table")
            shape = tuple(count for (_, _, count) in self.axes)
            if self.table.shape != shape:
                raise SpecError(
                    f"table shape {self.table.shape} does not match axes {shape}"
                )
            if self.table.min() < 0 or self.table.max() >= len(self.controls):
                raise SpecError("table refers to control indices out of range")
            self.table.setflags(write=False)
        else:
            raise SpecError(f"unknown policy mode '{self.mode}'")

    @property
    def r(self):
        return len(self.controls[0])

    def lookup_index(self, states: np.ndarray) -> np.ndarray:
        """Nearest-node control-set index for each row of ``states``.

        ``states`` has one column per feedback axis; rows outside the grid
        are clamped to the boundary node.
        """
        if self.mode == "constant":
            return np.full(states.shape[0], self.index, dtype=np.intp)
        flat = np.zeros(states.shape[0], dtype=np.intp)
        stride = 1
        for a in range(len(self.axes) - 1, -1, -1):
            lo, hi, count = self.axes[a]
            h = (hi - lo) / (count - 1)
            idx = np.rint((states[:, a] - lo) / h).astype(np.intp)
            np.clip(idx, 0, count - 1, out=idx)
            flat += idx * stride
            stride *= count
        return self.table.reshape(-1)[flat]

    def lookup(self, states: np.ndarray) -> np.ndarray:
        """Control vectors, shape (rows, r)."""
        ctrl = np.asarray(self.controls, dtype=float)
        return ctrl[self.lookup_index(states)]

    def equals(self, other: "SubsystemPolicy") -> bool:
        if self.mode != other.mode or self.controls != other.controls:
            return False
        if self.mode == "constant":
            return self.index == other.index
        return self.axes == other.axes and np.array_equal(self.table, other.table)


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """One SubsystemPolicy per subsystem, plus the block width d needed to
    slice joint states into feedback inputs."""

    d: int
    subsystems: tuple

    def policy_for(self, i: int) -> SubsystemPolicy:
        return self.subsystems[i - 1]

    def feedback_slice(self, i: int, joint: np.ndarray) -> np.ndarray:
        sub = self.subsystems[i - 1]
        if sub.mode == "own":
            return joint[:, (i - 1) * self.d : i * self.d]
        return joint[:, : i * self.d]

    def control_index(self, i: int, joint: np.ndarray) -> np.ndarray:
        sub = self.subsystems[i - 1]
        if sub.mode == "constant":
            return np.full(joint.shape[0], sub.index, dtype=np.intp)
        return sub.lookup_index(self.feedback_slice(i, joint))

    def control(self, i: int, joint: np.ndarray) -> np.ndarray:
        """Controls for subsystem ``i`` (1-based) at joint states
        (x^1, .., x^j), j >= i; shape (rows, r_i)."""
        sub = self.subsystems[i - 1]
        ctrl = np.asarray(sub.controls, dtype=float)
        return ctrl[self.control_index(i, joint)]

    def replaced(self, i: int, sub: SubsystemPolicy) -> "PolicyTable":
        parts = list(self.subsystems)
        parts[i - 1] = sub
        return PolicyTable(self.d, tuple(parts))

    def equals(self, other: "PolicyTable") -> bool:
        return self.d == other.d and len(self.subsystems) == len(other.subsystems) \
            and all(a.equals(b) for a, b in zip(self.subsystems, other.subsystems))

    @staticmethod
    def constant(spec, indices=None) -> "PolicyTable":
        """Constant policy from per-subsystem control-set indices."""
        if indices is None:
            indices = [0] * spec.n
        if len(indices) != spec.n:
            raise SpecError(f"expected {spec.n} control indices, got {len(indices)}")
        subs = tuple(
            SubsystemPolicy(controls=spec.control_sets[i], index=int(indices[i]))
            for i in range(spec.n)
        )
        return PolicyTable(spec.d, subs)
