"""Exit-probability tests.

Closed-form anchors: constants are harmonic (exactly reproduced by the
M-matrix solve), 1D Brownian two-point data gives the linear profile, the
drift-1 case has the scale-function solution, and the short-horizon BM
exit probability has an eigenexpansion series oracle.  The viscosity-sweep
diffs on the Kolmogorov chain are regression-pinned after a verified run.
"""

import numpy as np
import pytest

from exitlab.errors import SimulationError, SpecError
from exitlab.exitprob import (BoundaryData, field_at, indicator_family,
                              mc_exit_probability, solve_dirichlet,
                              viscosity_sweep)
from exitlab.fdgrid import assemble_generator, build_grid
from exitlab.model import make_chain_spec
from exitlab.policy import PolicyTable

LO2 = np.array([-1.0, -1.0])
HI2 = np.array([1.0, 1.0])


def bm_spec(horizon=8.0, drift="0"):
    return make_chain_spec(n=1, d=1, drifts=[[drift]], sigma=[["1"]],
                           domains=[[(-1.0, 1.0)]], x0=[[0.0]],
                           horizon=horizon)


def chain_spec(horizon=8.0, eps=0.05):
    return make_chain_spec(n=2, d=1, drifts=[["-x1"], ["x1 - x2"]],
                           sigma=[["1"]],
                           domains=[[(-1.0, 1.0)], [(-1.0, 1.0)]],
                           x0=[[0.0], [0.0]], epsilons=[eps],
                           horizon=horizon)


def assembled(spec, level, nodes, eps=None):
    grid = build_grid(spec, level, nodes)
    op = assemble_generator(spec, PolicyTable.constant(spec), grid, eps=eps)
    return grid, op


def survival_series(t, terms=80):
    m = np.arange(terms)
    coef = 4 / np.pi * (-1.0) ** m / (2 * m + 1)
    rates = (2 * m + 1) ** 2 * np.pi**2 / 8
    return float(np.sum(coef * np.exp(-rates * t)))


# -------------------------------------------------------------- BoundaryData


def test_face_parsing_accepts_strings_and_pairs():
    bd = indicator_family(10.0, ["x2-", (1, "+")])
    assert bd.faces == ((1, "-"), (0, "+"))
    assert bd.k == 10.0


@pytest.mark.parametrize("bad", ["y1+", "x0+", "x1", "x1*", "xx+"])
def test_face_parsing_rejects_malformed_strings(bad):
    with pytest.raises(SpecError):
        indicator_family(10.0, [bad])


def test_indicator_family_validates_k_and_faces():
    with pytest.raises(SpecError, match="positive"):
        indicator_family(0.0, ["x1+"])
    with pytest.raises(SpecError, match="empty"):
        indicator_family(10.0, [])


def test_indicator_ramp_profile():
    bd = indicator_family(10.0, ["x1+"])
    pts = np.array([[1.0, 0.0], [0.95, 0.3], [0.9, -0.2], [0.5, 0.0],
                    [-1.0, 0.0]])
    vals = bd.values(pts, LO2, HI2)
    assert vals[0] == 1.0                       # on the face
    assert vals[1] == pytest.approx(0.5)        # distance 1/(2k)
    assert abs(vals[2]) < 1e-12                 # distance 1/k
    assert vals[3] == 0.0 and vals[4] == 0.0    # far side
    assert np.all((0.0 <= vals) & (vals <= 1.0))


def test_indicator_uses_nearest_target_face():
    bd = indicator_family(10.0, ["x1+", "x1-"])
    vals = bd.values(np.array([[0.97, 0.0], [-0.97, 0.0]]), LO2, HI2)
    assert vals == pytest.approx([0.7, 0.7])


def test_indicator_family_is_uniformly_cauchy_in_k():
    # along a boundary band at distance s from the target face,
    # sup |psi_k - psi_l| = 1 - k/l for k < l, attained at s = 1/l
    k, l = 5.0, 10.0
    bk, bl = indicator_family(k, ["x1+"]), indicator_family(l, ["x1+"])
    band = np.column_stack([np.linspace(0.8, 1.0, 201), np.full(201, -1.0)])
    gap = np.abs(bl.values(band, LO2, HI2) - bk.values(band, LO2, HI2))
    assert np.max(gap) == pytest.approx(1.0 - k / l, abs=1e-12)


def test_expression_data_rejects_non_finite_values():
    _, op = assembled(bm_spec(), 1, 41)
    with pytest.raises(SpecError, match="non-finite"):
        solve_dirichlet(op, BoundaryData.expression("log(x1 - 10)"))
    with pytest.raises(SpecError, match="source string or AST"):
        BoundaryData.expression(3.14)


# ----------------------------------------------------------- Dirichlet solve


def test_constant_data_is_reproduced_exactly():
    _, op = assembled(bm_spec(), 1, 201)
    v = solve_dirichlet(op, BoundaryData.expression("1"))
    assert np.max(np.abs(v - 1.0)) < 1e-12


def test_two_point_data_gives_linear_profile():
    grid, op = assembled(bm_spec(), 1, 201)
    v = solve_dirichlet(op, BoundaryData.expression("(x1 + 1)/2"))
    x = grid.interior_points()[:, 0]
    assert np.max(np.abs(v - (x + 1) / 2)) < 1e-10
    assert field_at(grid, v, [0.0]) == pytest.approx(0.5, abs=1e-12)


def test_unit_drift_matches_scale_function_within_upwind_error():
    grid, op = assembled(bm_spec(drift="1"), 1, 201)   # h = 1e-2
    v = solve_dirichlet(op, BoundaryData.expression("(x1 + 1)/2"))
    x = grid.interior_points()[:, 0]
    exact = (1 - np.exp(-2 * (x + 1))) / (1 - np.exp(-4.0))
    assert np.max(np.abs(v - exact)) <= 2e-2


def test_discrete_maximum_principle():
    _, op = assembled(chain_spec(), 2, 31, eps=0.05)
    data = BoundaryData.expression("sin(3*x1) + 0.2*x2")
    g = data.values(op.grid.boundary_points(), LO2, HI2)
    v = solve_dirichlet(op, data)
    assert np.all(v >= g.min() - 1e-10)
    assert np.all(v <= g.max() + 1e-10)


def test_solution_is_linear_in_the_data():
    _, op = assembled(chain_spec(), 2, 21, eps=0.05)
    vf = solve_dirichlet(op, BoundaryData.expression("(x1 + 1)/2"))
    vg = solve_dirichlet(op, BoundaryData.expression("x2^2"))
    vc = solve_dirichlet(
        op, BoundaryData.expression("0.7*((x1 + 1)/2) - 0.3*(x2^2)"))
    assert np.max(np.abs(vc - (0.7 * vf - 0.3 * vg))) < 1e-9


def test_solution_is_monotone_in_the_data():
    # psi_5 >= psi_10 pointwise, so the solves must order the same way
    _, op = assembled(chain_spec(), 2, 31, eps=0.05)
    v5 = solve_dirichlet(op, indicator_family(5.0, ["x1+"]))
    v10 = solve_dirichlet(op, indicator_family(10.0, ["x1+"]))
    assert np.all(v10 <= v5 + 1e-12)


def test_field_at_picks_nearest_interior_node():
    grid, op = assembled(bm_spec(), 1, 11)   # h = 0.2, interior -0.8..0.8
    v = grid.interior_points()[:, 0].copy()
    assert field_at(grid, v, [0.29]) == pytest.approx(0.2)
    assert field_at(grid, v, [5.0]) == pytest.approx(0.8)   # clamped


# -------------------------------------------------------------- Monte Carlo


def test_mc_whole_boundary_probability_approaches_one():
    spec = bm_spec()
    r = mc_exit_probability(spec, PolicyTable.constant(spec), 1,
                            ["x1+", "x1-"], dt=1e-3, n_paths=4000,
                            master_seed=3, horizon=8.0)
    assert r.estimate > 0.99
    assert r.n_censored == 4000 - round(r.estimate * 4000)
    assert r.n_paths == 4000 and r.n_invalid == 0


def test_mc_right_face_hits_half_by_symmetry():
    spec = bm_spec()
    r = mc_exit_probability(spec, PolicyTable.constant(spec), 1, ["x1+"],
                            dt=1e-3, n_paths=4000, master_seed=3,
                            horizon=8.0)
    assert abs(r.estimate - 0.5) <= 2 * r.ci_halfwidth


def test_mc_short_horizon_matches_series_oracle():
    spec = bm_spec()
    pol = PolicyTable.constant(spec)
    oracle = 1.0 - survival_series(0.1)
    r = mc_exit_probability(spec, pol, 1, ["x1+", "x1-"], dt=1e-4,
                            n_paths=20000, master_seed=0, horizon=0.1)
    assert abs(r.estimate - oracle) <= 2 * r.ci_halfwidth
    r1 = mc_exit_probability(spec, pol, 1, ["x1+"], dt=1e-4, n_paths=20000,
                             master_seed=0, horizon=0.1)
    assert abs(r1.estimate - oracle / 2) <= 2 * r1.ci_halfwidth


def test_mc_expression_target_scores_censored_paths_too():
    spec = bm_spec()
    r = mc_exit_probability(spec, PolicyTable.constant(spec), 1,
                            BoundaryData.expression("1"), dt=1e-3,
                            n_paths=200, master_seed=1, horizon=0.05)
    assert r.estimate == 1.0 and r.ci_halfwidth == 0.0
    assert r.n_censored > 0


def test_mc_validates_arguments():
    spec = bm_spec()
    pol = PolicyTable.constant(spec)
    with pytest.raises(SpecError, match="level"):
        mc_exit_probability(spec, pol, 2, ["x1+"])
    with pytest.raises(SpecError, match="absorption"):
        mc_exit_probability(spec, pol, 1, ["x1+"], absorb="both")
    with pytest.raises(SpecError, match="two paths"):
        mc_exit_probability(spec, pol, 1, ["x1+"], n_paths=1)
    with pytest.raises(SpecError, match="empty"):
        mc_exit_probability(spec, pol, 1, [])


# ---------------------------------------------------------- viscosity sweep


def test_sweep_constant_data_stays_flat():
    spec = chain_spec()
    sw = viscosity_sweep(spec, PolicyTable.constant(spec), 2,
                         BoundaryData.expression("1"),
                         [0.2, 0.1, 0.05], 21)
    assert np.allclose(sw.fields, 1.0, atol=1e-12)
    assert all(d < 1e-12 for d in sw.sup_diffs)
    assert sw.converging


def test_sweep_chain_ramp_diffs_shrink_monotonically():
    spec = chain_spec()
    sw = viscosity_sweep(spec, PolicyTable.constant(spec), 2,
                         indicator_family(10.0, ["x2+"]),
                         [0.2, 0.1, 0.05, 0.025], 41)
    assert sw.converging
    assert np.all(np.diff(sw.sup_diffs) < 0)
    assert not any(sw.ill)
    assert sw.eps_floor == pytest.approx(0.0025)
    # regression pins from the first verified run
    assert sw.sup_diffs[0] == pytest.approx(0.0664058, rel=1e-4)
    assert sw.sup_diffs[1] == pytest.approx(0.0137961, rel=1e-4)
    assert sw.sup_diffs[2] == pytest.approx(0.0013112, rel=1e-4)


def test_sweep_flags_eps_below_grid_scale():
    spec = chain_spec()
    sw = viscosity_sweep(spec, PolicyTable.constant(spec), 2,
                         indicator_family(10.0, ["x2+"]),
                         [0.2, 0.05, 0.002], 21)   # h = 0.1, floor 0.01
    assert sw.eps_floor == pytest.approx(0.01)
    assert sw.ill == (False, False, True)


def test_sweep_validates_the_ladder():
    spec = chain_spec()
    pol = PolicyTable.constant(spec)
    bd = indicator_family(10.0, ["x2+"])
    with pytest.raises(SpecError, match="two entries"):
        viscosity_sweep(spec, pol, 2, bd, [0.1], 21)
    with pytest.raises(SpecError, match="strictly decreasing"):
        viscosity_sweep(spec, pol, 2, bd, [0.1, 0.1], 21)
    with pytest.raises(SpecError, match="nonnegative"):
        viscosity_sweep(spec, pol, 2, bd, [0.1, -0.1], 21)


# ------------------------------------------------------------- consistency


def test_stationary_solve_agrees_with_mc_for_brownian_motion():
    spec = bm_spec()
    grid, op = assembled(spec, 1, 201)
    v = solve_dirichlet(op, BoundaryData.expression("(x1 + 1)/2"))
    v0 = field_at(grid, v, [0.0])
    r = mc_exit_probability(spec, PolicyTable.constant(spec), 1, ["x1+"],
                            dt=1e-3, n_paths=4000, master_seed=3,
                            horizon=8.0)
    assert abs(v0 - r.estimate) <= max(2 * r.ci_halfwidth, 0.01)


def test_stationary_solve_agrees_with_mc_on_the_chain():
    spec = chain_spec()
    pol = PolicyTable.constant(spec)
    bd = indicator_family(10.0, ["x1+"])
    grid, op = assembled(spec, 2, 41, eps=0.05)
    v0 = field_at(grid, solve_dirichlet(op, bd), spec.x0_flat(2))
    r = mc_exit_probability(spec, pol, 2, bd, eps=0.05, dt=1e-3,
                            n_paths=10000, master_seed=5, horizon=8.0)
    assert abs(v0 - r.estimate) <= max(2 * r.ci_halfwidth, 0.02)
