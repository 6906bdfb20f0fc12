"""Chain-of-subsystems problem instances and structural diagnostics.

A ChainSpec fixes n subsystems of dimension d each: drift expressions
m_1..m_n (m_i may read x^1..x^i and its own control u_i), a d-by-m
diffusion matrix on the first block only, an axis-aligned box domain per
subsystem, finite control sets, regularization intensities for blocks
2..n, a horizon, and a start point.

Shape-level problems (wrong counts, ragged matrices) raise SpecError at
construction. Semantic assumptions (triangularity, ellipticity, outward
drift on faces, coupling rank) are *sampled* and reported as diagnostics
with witnesses, never silently enforced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import expr as ex
from .dynamics import DriftEvaluator
from .errors import SpecError
from .policy import PolicyTable

__all__ = [
    "Box", "ChainSpec", "CheckResult", "DiagnosticsReport", "SkeletonTrajectory",
    "make_chain_spec", "validate_spec", "check_outward_drift",
    "check_rank_condition", "simulate_deterministic",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; degenerate bounds are representable (diagnostics
    flag them) but most operations assume lower < upper."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise SpecError("box lower/upper lengths differ")

    @property
    def dim(self):
        return len(self.lower)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Strict-interior test per row."""
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return np.all((points > lo) & (points < hi), axis=-1)

    def sample(self, rng, size: int) -> np.ndarray:
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return rng.uniform(lo, hi, size=(size, self.dim))

    def center(self):
        return tuple((a + b) / 2.0 for a, b in zip(self.lower, self.upper))


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: Optional[float] = None
    witness: Optional[tuple] = None
    detail: str = ""


@dataclass(frozen=True)
class DiagnosticsReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def check(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


@dataclass(frozen=True)
class ChainSpec:
    n: int
    d: int
    drifts: tuple        # n tuples of d expression ASTs
    sigma: tuple         # d tuples of m expression ASTs
    domains: tuple       # n Boxes of dimension d
    control_sets: tuple  # n tuples of control vectors (tuples of length r_i)
    epsilons: tuple      # n-1 intensities for blocks 2..n
    horizon: float
    x0: tuple            # n tuples of d floats

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise SpecError("need n >= 1 subsystems of dimension d >= 1")
        if len(self.drifts) != self.n:
            raise SpecError(f"expected {self.n} drift vectors, got {len(self.drifts)}")
        for i, vec in enumerate(self.drifts, start=1):
            if len(vec) != self.d:
                raise SpecError(f"drift m_{i} must have {self.d} components")
        if len(self.sigma) != self.d:
            raise SpecError(f"sigma must have {self.d} rows")
        widths = {len(row) for row in self.sigma}
        if len(widths) != 1:
            raise SpecError("sigma rows have inconsistent lengths")
        if self.m < 1:
            raise SpecError("sigma needs at least one column")
        if len(self.domains) != self.n:
            raise SpecError(f"expected {self.n} domains, got {len(self.domains)}")
        for i, box in enumerate(self.domains, start=1):
            if box.dim != self.d:
                raise SpecError(f"domain D_{i} must have dimension {self.d}")
        if len(self.control_sets) != self.n:
            raise SpecError(f"expected {self.n} control sets")
        for i, us in enumerate(self.control_sets, start=1):
            if len({len(u) for u in us}) > 1:
                raise SpecError(f"control set U_{i} has ragged vectors")
        if len(self.epsilons) != self.n - 1:
            raise SpecError(f"expected {self.n - 1} epsilon entries, got {len(self.epsilons)}")
        if len(self.x0) != self.n or any(len(p) != self.d for p in self.x0):
            raise SpecError("x0 must give one d-vector per subsystem")

    @property
    def m(self):
        return len(self.sigma[0])

    def r(self, i: int) -> int:
        us = self.control_sets[i - 1]
        return len(us[0]) if us else 0

    def x0_flat(self, level: Optional[int] = None) -> np.ndarray:
        level = self.n if level is None else level
        return np.array([v for p in self.x0[:level] for v in p], dtype=float)

    def omega_bounds(self, level: int):
        """Flattened lower/upper bounds of Omega_level = D_1 x .. x D_level."""
        lo = np.array([v for b in self.domains[:level] for v in b.lower], dtype=float)
        hi = np.array([v for b in self.domains[:level] for v in b.upper], dtype=float)
        return lo, hi

    def eps_vector(self, level: int, eps=None) -> np.ndarray:
        """Intensities for blocks 2..level; ``eps`` overrides the stored
        values (scalar = uniform, or one value per degenerate block)."""
        if eps is None:
            out = np.asarray(self.epsilons[: level - 1], dtype=float)
        elif np.ndim(eps) == 0:
            out = np.full(level - 1, float(eps))
        else:
            out = np.asarray(eps, dtype=float)
            if out.shape != (level - 1,):
                raise SpecError(
                    f"need {level - 1} epsilon entries for level {level}, got {out.shape}"
                )
        if np.any(out < 0):
            raise SpecError("epsilon intensities must be nonnegative")
        return out


def _parse_entry(raw):
    return raw if isinstance(raw, ex.Expr) else ex.parse(str(raw))


def make_chain_spec(
    n: int,
    d: int,
    drifts: Sequence,
    sigma: Sequence,
    domains: Sequence,
    control_sets: Optional[Sequence] = None,
    epsilons: Optional[Sequence] = None,
    horizon: float = 1.0,
    x0: Optional[Sequence] = None,
) -> ChainSpec:
    """Build a ChainSpec from plain Python data.

    Expressions may be strings or parsed ASTs; domains are sequences of
    (lo, hi) pairs per subsystem; control vectors may be bare scalars.
    Defaults: singleton zero controls, zero epsilons, box-center start.
    """
    drifts_t = tuple(tuple(_parse_entry(c) for c in vec) for vec in drifts)
    sigma_t = tuple(tuple(_parse_entry(c) for c in row) for row in sigma)
    boxes = []
    for dom in domains:
        pairs = [(float(lo), float(hi)) for (lo, hi) in dom]
        boxes.append(Box(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs)))
    if control_sets is None:
        control_sets = [[(0.0,)]] * n
    sets = []
    for us in control_sets:
        vecs = []
        for u in us:
            if np.ndim(u) == 0:
                vecs.append((float(u),))
            else:
                vecs.append(tuple(float(v) for v in u))
        sets.append(tuple(vecs))
    eps_t = tuple(float(e) for e in (epsilons if epsilons is not None else [0.0] * (n - 1)))
    if x0 is None:
        x0_t = tuple(box.center() for box in boxes)
    else:
        x0_t = tuple(tuple(float(v) for v in p) for p in x0)
    return ChainSpec(
        n=n, d=d, drifts=drifts_t, sigma=sigma_t, domains=tuple(boxes),
        control_sets=tuple(sets), epsilons=eps_t, horizon=float(horizon), x0=x0_t,
    )


# ---------------------------------------------------------------------------
# structural validation


def _allowed_vars(spec, i):
    names = {f"x{k}" for k in range(1, i * spec.d + 1)}
    names |= {f"u{j}" for j in range(1, spec.r(i) + 1)}
    return names


def validate_spec(spec: ChainSpec, n_samples: int = 256, seed: int = 0,
                  ellipticity_tol: float = 1e-10) -> DiagnosticsReport:
    """Structural checks: triangularity, domain sanity, start point,
    sampled uniform ellipticity of the first block, control sets, epsilons.

    Pure: equal specs and parameters give equal reports.
    """
    checks = []

    bad = []
    for i in range(1, spec.n + 1):
        allowed = _allowed_vars(spec, i)
        for c, ast in enumerate(spec.drifts[i - 1]):
            extra = sorted(ex.variables(ast) - allowed)
            if extra:
                bad.append(f"m_{i}[{c}] references {', '.join(extra)}")
    checks.append(CheckResult(
        name="triangular_drifts",
        passed=not bad,
        detail="; ".join(bad) if bad else
        "each m_i reads only x^1..x^i and u_i",
    ))

    sig_allowed = {f"x{k}" for k in range(1, spec.d + 1)}
    bad = []
    for p, row in enumerate(spec.sigma):
        for q, ast in enumerate(row):
            extra = sorted(ex.variables(ast) - sig_allowed)
            if extra:
                bad.append(f"sigma[{p}][{q}] references {', '.join(extra)}")
    checks.append(CheckResult(
        name="sigma_variables",
        passed=not bad,
        detail="; ".join(bad) if bad else "sigma depends on x^1 only",
    ))

    bad = []
    worst = None
    for i, box in enumerate(spec.domains, start=1):
        for a in range(spec.d):
            vol = box.upper[a] - box.lower[a]
            if not (vol > 0) or not math.isfinite(vol):
                bad.append(f"D_{i} axis {a}")
                worst = tuple(box.lower)
    checks.append(CheckResult(
        name="domain_volume",
        passed=not bad,
        witness=worst,
        detail="; ".join(bad) if bad else "all boxes have positive volume",
    ))

    inside = all(
        bool(box.contains(np.asarray(spec.x0[i])[None, :])[0])
        for i, box in enumerate(spec.domains)
    )
    checks.append(CheckResult(
        name="x0_interior",
        passed=inside,
        witness=None if inside else tuple(spec.x0_flat()),
        detail="x0 interior to every domain" if inside else "x0 on or outside a domain boundary",
    ))

    empty = [f"U_{i}" for i, us in enumerate(spec.control_sets, start=1) if not us]
    checks.append(CheckResult(
        name="control_sets_nonempty",
        passed=not empty,
        detail="; ".join(empty) if empty else "all control sets nonempty",
    ))

    eps_ok = all(e >= 0 and math.isfinite(e) for e in spec.epsilons)
    checks.append(CheckResult(
        name="epsilons_nonnegative",
        passed=eps_ok,
        value=min(spec.epsilons) if spec.epsilons else None,
        detail="" if eps_ok else "negative or non-finite epsilon",
    ))

    checks.append(CheckResult(
        name="horizon_positive",
        passed=spec.horizon > 0,
        value=spec.horizon,
    ))

    # sampled uniform ellipticity of sigma sigma^T over D_1
    structural_ok = checks[1].passed and checks[2].passed
    if structural_ok:
        rng = np.random.default_rng(seed)
        pts = spec.domains[0].sample(rng, n_samples)
        cols = [pts[:, k] for k in range(spec.d)]
        sig_slots = tuple(f"x{k}" for k in range(1, spec.d + 1))
        sig = np.empty((n_samples, spec.d, spec.m))
        for p in range(spec.d):
            for q in range(spec.m):
                prog = ex.compile_program(spec.sigma[p][q], sig_slots)
                sig[:, p, q] = np.broadcast_to(prog.run(cols), (n_samples,))
        a = np.einsum("rpm,rqm->rpq", sig, sig)
        if np.all(np.isfinite(a)):
            eigs = np.linalg.eigvalsh(a)[:, 0]
            k = int(np.argmin(eigs))
            least = float(eigs[k])
            checks.append(CheckResult(
                name="uniform_ellipticity",
                passed=bool(least >= ellipticity_tol),
                value=least,
                witness=tuple(float(v) for v in pts[k]),
                detail=f"min over {n_samples} samples of least eig of sigma sigma^T",
            ))
        else:
            k = int(np.argmin(np.all(np.isfinite(a.reshape(n_samples, -1)), axis=1)))
            checks.append(CheckResult(
                name="uniform_ellipticity",
                passed=False,
                witness=tuple(float(v) for v in pts[k]),
                detail="sigma evaluation produced non-finite entries",
            ))
    else:
        checks.append(CheckResult(
            name="uniform_ellipticity",
            passed=False,
            detail="skipped: structural checks failed",
        ))

    return DiagnosticsReport(tuple(checks))


def check_outward_drift(spec: ChainSpec, policy: PolicyTable, level: int,
                        n_samples: int = 10000, seed: int = 0) -> DiagnosticsReport:
    """Sampled outward-drift condition on the faces of D_level.

    Draws boundary points y on the faces jointly with interior points of
    the lower blocks, evaluates <m_level(x^1..x^{level-1}, y, u), alpha(y)>
    with alpha the outward unit face normal and u from the policy, and
    reports the worst (minimal) inner product.
    """
    if not 2 <= level <= spec.n:
        raise SpecError(f"outward-drift check needs 2 <= level <= n, got {level}")
    rng = np.random.default_rng(seed)
    d = spec.d
    box = spec.domains[level - 1]

    lower = np.empty((n_samples, (level - 1) * d))
    for i in range(level - 1):
        lower[:, i * d : (i + 1) * d] = spec.domains[i].sample(rng, n_samples)
    y = box.sample(rng, n_samples)
    face_axis = rng.integers(0, d, size=n_samples)
    face_side = np.where(rng.random(n_samples) < 0.5, -1.0, 1.0)
    lo = np.asarray(box.lower)
    hi = np.asarray(box.upper)
    rows = np.arange(n_samples)
    y[rows, face_axis] = np.where(face_side > 0, hi[face_axis], lo[face_axis])

    states = np.concatenate([lower, y], axis=1)
    evaluator = DriftEvaluator(spec, policy, level)
    m = evaluator.subsystem_drift(level, states)
    ip = m[rows, face_axis] * face_side

    k = int(np.argmin(ip))
    worst = float(ip[k])
    check = CheckResult(
        name=f"outward_drift_level{level}",
        passed=bool(worst > 0),
        value=worst,
        witness=tuple(float(v) for v in states[k]),
        detail=f"min of <m_{level}, alpha(y)> over {n_samples} face samples",
    )
    return DiagnosticsReport((check,))


def check_rank_condition(spec: ChainSpec, policy: PolicyTable,
                         n_samples: int = 1000, seed: int = 0,
                         rank_tol: float = 1e-8) -> DiagnosticsReport:
    """Sampled Hoermander-style coupling check: the d-by-d Jacobian block
    dm_level/dx^1 must have full rank (smallest singular value >= rank_tol)
    at sampled interior points, for every level >= 2."""
    rng = np.random.default_rng(seed)
    d = spec.d
    checks = []
    if spec.n == 1:
        checks.append(CheckResult(
            name="rank_coupling",
            passed=True,
            detail="no degenerate levels (n = 1)",
        ))
    for level in range(2, spec.n + 1):
        jac_asts = [
            [ex.differentiate(spec.drifts[level - 1][c], f"x{k + 1}") for k in range(d)]
            for c in range(d)
        ]
        states = np.empty((n_samples, level * d))
        for i in range(level):
            states[:, i * d : (i + 1) * d] = spec.domains[i].sample(rng, n_samples)
        controls = policy.control(level, states)
        slots = tuple(f"x{k}" for k in range(1, level * d + 1))
        slots += tuple(f"u{j}" for j in range(1, spec.r(level) + 1))
        cols = [states[:, k] for k in range(level * d)]
        cols += [controls[:, j] for j in range(controls.shape[1])]
        jac = np.empty((n_samples, d, d))
        for c in range(d):
            for k in range(d):
                prog = ex.compile_program(jac_asts[c][k], slots)
                jac[:, c, k] = np.broadcast_to(prog.run(cols), (n_samples,))
        smin = np.linalg.svd(jac, compute_uv=False)[:, -1]
        idx = int(np.argmin(smin))
        worst = float(smin[idx])
        checks.append(CheckResult(
            name=f"rank_coupling_level{level}",
            passed=bool(worst >= rank_tol),
            value=worst,
            witness=tuple(float(v) for v in states[idx]),
            detail=f"min smallest singular value of dm_{level}/dx^1 over {n_samples} samples",
        ))
    return DiagnosticsReport(tuple(checks))


# ---------------------------------------------------------------------------
# deterministic skeleton


@dataclass(frozen=True, eq=False)
class SkeletonTrajectory:
    times: np.ndarray
    states: np.ndarray   # (len(times), n*d)
    escaped: bool
    escape_time: Optional[float]

    @property
    def terminal_norm(self) -> float:
        return float(np.linalg.norm(self.states[-1]))


def simulate_deterministic(spec: ChainSpec, policy: PolicyTable,
                           x0=None, dt: float = 1e-2,
                           horizon: Optional[float] = None,
                           blowup_radius: float = 1e6) -> SkeletonTrajectory:
    """Classical RK4 integration of the noise-free skeleton of the chain.

    Aborts (with the escape time) once the state leaves a blow-up ball or
    turns non-finite mid-step; controls are re-evaluated at every stage.
    """
    if dt <= 0:
        raise SpecError("dt must be positive")
    T = spec.horizon if horizon is None else float(horizon)
    if T <= 0:
        raise SpecError("horizon must be positive")
    if x0 is None:
        x = spec.x0_flat()
    else:
        x = np.asarray(x0, dtype=float).reshape(-1)
        if x.size != spec.n * spec.d:
            raise SpecError(f"x0 must have {spec.n * spec.d} coordinates")
    evaluator = DriftEvaluator(spec, policy, spec.n)

    def f(state):
        return evaluator.drift(state[None, :])[0]

    n_steps = max(1, int(math.ceil(T / dt - 1e-12)))
    times = [0.0]
    states = [x.copy()]
    t = 0.0
    escaped = False
    escape_time = None
    for k in range(n_steps):
        h = min(dt, T - t)
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += h
        times.append(t)
        states.append(x.copy())
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > blowup_radius:
            escaped = True
            escape_time = t
            break
    return SkeletonTrajectory(
        times=np.asarray(times),
        states=np.asarray(states),
        escaped=escaped,
        escape_time=escape_time,
    )
