"""Release gates, one test per claim.

Each test pins an end-to-end behavior of the laboratory at a stated
tolerance and (where stated) a wall-clock budget: closed-form eigenvalue
accuracy, refinement limits for drifted systems, agreement of the
eigenvalue and Monte-Carlo rate routes on the degenerate chain,
optimizer convergence and optimality, the sqrt-epsilon coupling law,
Dirichlet solver exactness, thread-invariant CLI bytes, and the
randomized property suites.
"""

import csv
import itertools
import time

import numpy as np
import pytest

import genexpr
from exitlab import cli
from exitlab.eigen import eigen_vs_mc_crosscheck, principal_eigenpair
from exitlab.errors import DerivativeError
from exitlab.exitprob import BoundaryData, solve_dirichlet
from exitlab.expr import differentiate, evaluate, parse, to_string
from exitlab.fdgrid import assemble_generator, build_grid
from exitlab.hjb import policy_iteration
from exitlab.model import make_chain_spec
from exitlab.policy import PolicyTable, SubsystemPolicy
from exitlab.sde import coupled_viscosity_error, estimate_survival

PI2_8 = np.pi ** 2 / 8.0


def bm1d(drift="0", controls=None, horizon=4.0):
    return make_chain_spec(
        n=1, d=1, drifts=[[drift]], sigma=[["1"]],
        domains=[[(-1.0, 1.0)]], control_sets=controls, horizon=horizon)


def kolmogorov_chain():
    return make_chain_spec(
        n=2, d=1, drifts=[["-x1"], ["x1 - x2"]], sigma=[["1"]],
        domains=[[(-1.0, 1.0)], [(-1.0, 1.0)]], epsilons=[0.05],
        horizon=4.0)


def eigenvalue(spec, nodes):
    grid = build_grid(spec, spec.n, nodes)
    op = assemble_generator(spec, PolicyTable.constant(spec), grid)
    return principal_eigenpair(op).value


# 1 ------------------------------------------------------------------------


def test_zero_drift_rate_matches_dirichlet_laplacian():
    """1D, zero drift, sigma = 1 on (-1, 1), h = 1e-2: the computed rate
    sits within 5e-4 of pi^2/8."""
    spec = bm1d()
    start = time.perf_counter()
    lam = eigenvalue(spec, 201)
    elapsed = time.perf_counter() - start
    assert abs(lam - PI2_8) < 5e-4
    assert elapsed < 1.0


# 2 ------------------------------------------------------------------------


def test_constant_drift_family_after_refinement():
    """For b in {0.25, 0.5} the extrapolated rate over h in {1/50, 1/100,
    1/200} lands within 1% of pi^2/8 + b^2/2."""
    start = time.perf_counter()
    for b in (0.25, 0.5):
        spec = bm1d(drift=repr(b))
        hs, lams = [], []
        for nodes in (101, 201, 401):
            hs.append(2.0 / (nodes - 1))
            lams.append(eigenvalue(spec, nodes))
        # first-order upwind error: extrapolate linearly in h
        _, intercept = np.polyfit(hs, lams, 1)
        target = PI2_8 + b * b / 2.0
        assert abs(intercept - target) <= 0.01 * target
    assert time.perf_counter() - start < 10.0


# 3 ------------------------------------------------------------------------


def test_chain_rate_routes_agree():
    """On the regularized chain (m1 = -x1, m2 = x1 - x2, eps2 = 0.05) the
    eigenvalue route and the Monte-Carlo tail fit agree within
    max(7% of lambda_PDE, 2 MC standard errors) at 1e5 paths."""
    spec = kolmogorov_chain()
    start = time.perf_counter()
    rep = eigen_vs_mc_crosscheck(
        spec, PolicyTable.constant(spec), 2, nodes_per_axis=81,
        n_paths=100_000, dt=1e-3, master_seed=0, n_workers=8)
    elapsed = time.perf_counter() - start
    s_end = float(rep.curve.survival[-1])
    assert 1e-3 <= s_end <= 1e-1          # horizon reaches the tail band
    assert rep.discrepancy <= max(0.07 * rep.lambda_pde, 2.0 * rep.mc_stderr)
    assert rep.passed
    assert elapsed < 300.0


# 4 ------------------------------------------------------------------------


def test_policy_iteration_from_centered_start():
    """Claim under test: on m = u, U = {-0.5, 0, 0.5}, policy iteration
    started from the centered (u = 0) policy stops within five sweeps
    with a nonincreasing rate sequence and a final rate within 2e-3 of
    pi^2/8.

    The sweep-count and monotonicity clauses hold.  The value clause is
    mathematically unattainable: pi^2/8 is the rate of the best constant
    control (u = 0), but the feedback law u = -0.5*sign(x) pulls toward
    the center and lowers the rate to (w^2 + 0.25)/2 with tan(w) = 2w,
    about 0.80427.  Exhaustive enumeration over all 3^5 policy tables on
    a coarse grid and mesh-refinement extrapolation both confirm that
    value, so a correct maximizing selector must leave pi^2/8 behind and
    this assertion fails.  Weakening it would hide a real property of
    the optimizer."""
    spec = bm1d(drift="u1", controls=[[(-0.5,), (0.0,), (0.5,)]])
    centered = PolicyTable.constant(spec, [1])
    start = time.perf_counter()
    res = policy_iteration(spec, 201, initial=centered)
    elapsed = time.perf_counter() - start
    assert res.converged and res.sweeps <= 5
    assert np.all(np.diff(res.lambda_history) <= 1e-9)
    assert elapsed < 5.0
    assert abs(res.value - PI2_8) <= 2e-3, (
        f"final rate {res.value:.6f}: the optimizer reaches the restoring "
        f"feedback optimum near 0.80427, which beats the best constant "
        f"control pi^2/8 = {PI2_8:.5f}; no correct maximizing selector "
        f"can stay within 2e-3 of pi^2/8")


# 5 ------------------------------------------------------------------------


def test_policy_iteration_matches_exhaustive_minimum():
    """With 5 interior nodes and |U| = 3, enumerating all 3^5 policy
    tables confirms the iterate's rate is the global minimum to 1e-6."""
    spec = bm1d(drift="u1", controls=[[(-0.5,), (0.0,), (0.5,)]])
    nodes = 7
    start = time.perf_counter()
    res = policy_iteration(spec, nodes, level=1)
    grid = build_grid(spec, 1, nodes)
    best = np.inf
    for combo in itertools.product(range(3), repeat=5):
        tab = np.array((combo[0],) + combo + (combo[-1],))
        sub = SubsystemPolicy(controls=spec.control_sets[0], mode="joint",
                              axes=((-1.0, 1.0, nodes),), table=tab)
        op = assemble_generator(spec, PolicyTable(1, (sub,)), grid)
        best = min(best, principal_eigenpair(op).value)
    elapsed = time.perf_counter() - start
    assert res.value <= best + 1e-6
    assert elapsed < 30.0


# 6 ------------------------------------------------------------------------


def test_coupled_paths_scale_like_sqrt_eps():
    """Common-noise coupling: mean sup-norm gap between the degenerate
    chain and its regularized copy fits a log-log slope in [0.35, 0.65]
    with R^2 >= 0.95 over eps in {1e-1, 1e-2, 1e-3, 1e-4}."""
    spec = kolmogorov_chain()
    start = time.perf_counter()
    table = coupled_viscosity_error(
        spec, PolicyTable.constant(spec), [1e-1, 1e-2, 1e-3, 1e-4],
        dt=1e-3, n_paths=10_000, master_seed=0, level=2, n_workers=8)
    elapsed = time.perf_counter() - start
    lx, ly = np.log(table.eps), np.log(table.sup_err)
    slope, _ = np.polyfit(lx, ly, 1)
    r = np.corrcoef(lx, ly)[0, 1]
    assert 0.35 <= slope <= 0.65
    assert r * r >= 0.95
    assert elapsed < 120.0


# 7 ------------------------------------------------------------------------


def test_dirichlet_solves_hit_closed_forms():
    """Constant data returns 1 to 1e-12; two-point data on driftless 1D
    returns the linear profile to 1e-10; unit drift matches the
    closed-form scale function within 2e-2 at h = 1e-2."""
    chain = kolmogorov_chain()
    grid2 = build_grid(chain, 2, 21)
    op2 = assemble_generator(chain, PolicyTable.constant(chain), grid2)
    flat = solve_dirichlet(op2, BoundaryData.expression("1"))
    assert np.max(np.abs(flat - 1.0)) <= 1e-12

    bm = bm1d()
    grid = build_grid(bm, 1, 201)
    op = assemble_generator(bm, PolicyTable.constant(bm), grid)
    ramp = solve_dirichlet(op, BoundaryData.expression("(x1 + 1)/2"))
    x = grid.interior_points()[:, 0]
    assert np.max(np.abs(ramp - (x + 1.0) / 2.0)) <= 1e-10

    drifted = bm1d(drift="1")
    opd = assemble_generator(drifted, PolicyTable.constant(drifted), grid)
    scale = solve_dirichlet(opd, BoundaryData.expression("(x1 + 1)/2"))
    exact = (1.0 - np.exp(-2.0 * (x + 1.0))) / (1.0 - np.exp(-4.0))
    assert np.max(np.abs(scale - exact)) <= 2e-2


# 8 ------------------------------------------------------------------------

CLI_CONFIG = """
[chain]
n = 2
drifts = [["u1"], ["x1 - x2 + u1"]]
epsilons = [0.05]

[controls]
sets = [[[-0.5], [0.0], [0.5]], [[0.0]]]

[grid]
nodes = 13

[mc]
n_paths = 300
n_times = 31

[couple]
n_paths = 80

[ordering]
n_paths = 300
"""

SUBCOMMANDS = ["validate", "skeleton", "survival", "rate", "eigen",
               "crosscheck", "optimize", "exitprob", "sweep", "couple",
               "ordering"]


def test_cli_bytes_do_not_depend_on_thread_count(tmp_path):
    """Every subcommand, run twice at 1 thread and twice at 8 threads
    with the same config and seed, writes byte-identical CSVs."""
    cfg = tmp_path / "chain.toml"
    cfg.write_text(CLI_CONFIG)
    for name in SUBCOMMANDS:
        outputs = []
        for tag, threads in [("a1", "1"), ("b1", "1"),
                             ("a8", "8"), ("b8", "8")]:
            out = tmp_path / f"{name}-{tag}"
            status = cli.main([name, "--config", str(cfg), "--out",
                               str(out), "--seed", "0", "--threads",
                               threads, "--no-plots"])
            assert status == 0, name
            outputs.append({p.name: p.read_bytes()
                            for p in out.glob("*.csv")})
        assert outputs[0], name                   # wrote at least one CSV
        for other in outputs[1:]:
            assert other == outputs[0], name


# 9 ------------------------------------------------------------------------


def test_randomized_property_suites():
    """(a) 1e4 print/parse round trips preserve the tree and its text;
    (b) 1e3 random smooth expressions: symbolic derivative matches
    central differences to rel. 1e-4; (c) 100 random linear chains
    assemble to M-matrices (positive diagonal, nonpositive
    off-diagonal); (d) survival curves from random MC runs are monotone
    within [0, 1]."""
    rng = np.random.default_rng(20260814)

    for _ in range(10_000):
        e = genexpr.random_ast(rng)
        s = to_string(e)
        e2 = parse(s)
        assert e2 == e
        assert to_string(e2) == s

    checked = 0
    while checked < 1000:
        e = genexpr.random_smooth_ast(rng, names=("x1", "x2"))
        x1, x2 = rng.uniform(-1.0, 1.0, size=2)
        env = {"x1": x1, "x2": x2}
        h = 1e-5
        up = evaluate(e, {"x1": x1 + h, "x2": x2})
        dn = evaluate(e, {"x1": x1 - h, "x2": x2})
        d_sym = evaluate(differentiate(e, "x1"), env)
        if not (np.isfinite(up) and np.isfinite(dn) and np.isfinite(d_sym)):
            continue                    # overflow cases are not FD-checkable
        if max(abs(up), abs(dn), abs(d_sym)) > 1e4:
            continue
        d_fd = (up - dn) / (2.0 * h)
        assert abs(d_sym - d_fd) <= 1e-4 * max(1.0, abs(d_sym))
        checked += 1

    for _ in range(100):
        n, drifts, sigma, epsv = genexpr.random_linear_chain(rng)
        spec = make_chain_spec(
            n=n, d=1, drifts=drifts, sigma=sigma,
            domains=[[(-1.0, 1.0)]] * n, epsilons=epsv, horizon=1.0)
        nodes = int(rng.integers(5, 10))
        grid = build_grid(spec, n, nodes)
        op = assemble_generator(spec, PolicyTable.constant(spec), grid,
                                warn=False)
        A = (-op.matrix).tocoo()
        off = A.row != A.col
        assert np.all(A.data[off] <= 1e-13)
        assert np.all((-op.matrix).diagonal() > 0.0)

    for k in range(8):
        n, drifts, sigma, epsv = genexpr.random_linear_chain(rng)
        spec = make_chain_spec(
            n=n, d=1, drifts=drifts, sigma=sigma,
            domains=[[(-1.0, 1.0)]] * n, epsilons=epsv, horizon=1.5)
        curve = estimate_survival(spec, PolicyTable.constant(spec), n,
                                  dt=1e-2, n_paths=150, master_seed=k,
                                  n_times=41)
        s = curve.survival
        assert s[0] == 1.0
        assert np.all((0.0 <= s) & (s <= 1.0))
        assert np.all(np.diff(s) <= 0.0)
