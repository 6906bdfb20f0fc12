"""Monte-Carlo engine tests.

Closed-form oracles: for Brownian motion on (-1, 1) started at 0 the exit
rate is pi^2/8 and S(t) = (4/pi) e^{-pi^2 t/8} + higher modes; a constant
drift b shifts the rate to pi^2/8 + b^2/2 (ground-state transform).  Chord
exit detection carries an O(sqrt(dt)) barrier bias (about -3.7% on the rate
at dt=1e-3), so rate assertions pair dt with enough paths to keep
bias + noise inside the stated tolerances; all seeds are fixed.
"""

import numpy as np
import pytest

from exitlab import sde
from exitlab.errors import FitError, SimulationError, SpecError
from exitlab.model import make_chain_spec
from exitlab.policy import PolicyTable

PI2_8 = np.pi**2 / 8


def bm_spec(horizon=4.0, drift="0", box=(-1.0, 1.0)):
    return make_chain_spec(n=1, d=1, drifts=[[drift]], sigma=[["1"]],
                           domains=[[box]], x0=[[0.0]], horizon=horizon)


def chain_spec(horizon=4.0, d2=(-2.0, 2.0), eps=0.0):
    return make_chain_spec(n=2, d=1, drifts=[["-x1"], ["x1 - x2"]],
                           sigma=[["1"]], domains=[[(-1.0, 1.0)], [d2]],
                           x0=[[0.0], [0.0]], epsilons=[eps], horizon=horizon)


def synthetic_curve(times, survival, n_paths=1000):
    times = np.asarray(times, dtype=float)
    return sde.SurvivalCurve(
        times=times, survival=np.asarray(survival, dtype=float),
        ci_halfwidth=np.zeros(times.size), n_paths=n_paths, n_invalid=0,
        eps=(), level=1, absorb="joint", horizon=float(times[-1]), dt=1e-3,
    )


# ---------------------------------------------------------------------------
# single paths


def test_exit_location_lands_on_boundary():
    spec = bm_spec(horizon=2.0)
    pol = PolicyTable.constant(spec)
    res = sde.simulate_path(spec, pol, 1, dt=1e-3, path_id=0, master_seed=2)
    assert res.valid
    assert res.exit_flags[0]
    assert 0.0 < res.exit_times[0] <= 2.0
    assert abs(abs(res.exit_locations[0][0]) - 1.0) < 1e-12


def test_path_record_is_reproducible():
    spec = bm_spec(horizon=2.0)
    pol = PolicyTable.constant(spec)
    a = sde.simulate_path(spec, pol, 1, dt=1e-3, path_id=7, master_seed=2)
    b = sde.simulate_path(spec, pol, 1, dt=1e-3, path_id=7, master_seed=2)
    assert a.exit_flags == b.exit_flags
    assert a.exit_times == b.exit_times
    assert a.exit_locations == b.exit_locations
    assert a.terminal_state == b.terminal_state


def test_degenerate_block_has_vanishing_quadratic_variation():
    # eps = 0: block 2 moves only through its drift, so its quadratic
    # variation is O(dt) while block 1 accumulates sigma^2 * T.
    spec = chain_spec()
    pol = PolicyTable.constant(spec)
    _, states = sde.simulate_trajectory(spec, pol, 2, dt=1e-3,
                                        path_id=3, master_seed=7)
    qv = np.sum(np.diff(states, axis=0) ** 2, axis=0)
    assert qv[0] > 1.0
    assert qv[1] / qv[0] < 1e-3


def test_regularized_block_recovers_noise_quadratic_variation():
    # eps = 0.25 over T = 4 gives QV ~= eps * T = 1.
    spec = chain_spec()
    pol = PolicyTable.constant(spec)
    _, states = sde.simulate_trajectory(spec, pol, 2, eps=0.25, dt=1e-3,
                                        path_id=3, master_seed=7)
    qv2 = float(np.sum(np.diff(states[:, 1]) ** 2))
    assert 0.8 <= qv2 <= 1.2


# ---------------------------------------------------------------------------
# survival curves


def test_survival_starts_at_one_and_is_monotone():
    spec = bm_spec(horizon=1.0)
    pol = PolicyTable.constant(spec)
    cur = sde.estimate_survival(spec, pol, 1, dt=1e-3, n_paths=500,
                                master_seed=0)
    assert cur.survival[0] == 1.0
    assert np.all(np.diff(cur.survival) <= 0)
    assert np.all((cur.survival >= 0) & (cur.survival <= 1))


def test_survival_curve_rejects_nonmonotone_input():
    with pytest.raises(SimulationError):
        synthetic_curve([0.0, 1.0, 2.0], [1.0, 0.4, 0.5])
    with pytest.raises(SimulationError):
        synthetic_curve([0.0, 1.0], [0.9, 0.8])


def test_survival_matches_eigenexpansion_and_mean_exit_time():
    # S(2) = (4/pi) e^{-pi^2/4} - (4/3pi) e^{-9 pi^2/4} + ... = 0.1079355
    # and E[tau] = 1 for BM on (-1,1) from 0; dt = 1e-4 keeps the barrier
    # bias (~ +0.6% on tau, -1.2% on S) inside the bands below.
    spec = bm_spec(horizon=8.0)
    pol = PolicyTable.constant(spec)
    cur = sde.estimate_survival(spec, pol, 1, dt=1e-4, n_paths=10000,
                                master_seed=5, n_times=401, n_workers=4)
    k = np.arange(0, 8)
    series = (4 / np.pi) * np.sum(
        (-1) ** k / (2 * k + 1) * np.exp(-(2 * k + 1) ** 2 * PI2_8 * 2.0))
    i2 = int(np.argmin(np.abs(cur.times - 2.0)))
    assert cur.times[i2] == 2.0
    assert abs(cur.survival[i2] - series) <= cur.ci_halfwidth[i2]
    mean_tau = float(np.trapezoid(cur.survival, cur.times))
    assert abs(mean_tau - 1.0) <= 0.02


def test_worker_count_never_changes_output():
    spec = bm_spec(horizon=2.0)
    pol = PolicyTable.constant(spec)
    one = sde.estimate_survival(spec, pol, 1, dt=1e-3, n_paths=10000,
                                master_seed=2, n_workers=1)
    eight = sde.estimate_survival(spec, pol, 1, dt=1e-3, n_paths=10000,
                                  master_seed=2, n_workers=8)
    again = sde.estimate_survival(spec, pol, 1, dt=1e-3, n_paths=10000,
                                  master_seed=2, n_workers=8)
    for a, b in [(one, eight), (eight, again)]:
        assert np.array_equal(a.times, b.times)
        assert np.array_equal(a.survival, b.survival)
        assert np.array_equal(a.ci_halfwidth, b.ci_halfwidth)


def test_joint_absorption_dominates_level_absorption():
    # Stopping at the first block exit can only shorten lifetimes.
    spec = chain_spec(horizon=3.0, d2=(-1.0, 1.0), eps=0.05)
    pol = PolicyTable.constant(spec)
    joint = sde.estimate_survival(spec, pol, 2, dt=1e-3, n_paths=2000,
                                  master_seed=9, n_workers=4, absorb="joint")
    level = sde.estimate_survival(spec, pol, 2, dt=1e-3, n_paths=2000,
                                  master_seed=9, n_workers=4, absorb="level")
    assert np.all(joint.survival <= level.survival + 1e-12)
    assert level.survival[-1] > joint.survival[-1] + 0.1


def test_invalid_paths_are_counted_and_excluded():
    # log(x1) turns NaN once a path wanders negative.
    spec = make_chain_spec(n=1, d=1, drifts=[["log(x1)"]], sigma=[["1"]],
                           domains=[[(-5.0, 5.0)]], x0=[[0.05]], horizon=1.0)
    pol = PolicyTable.constant(spec)
    cur = sde.estimate_survival(spec, pol, 1, dt=1e-3, n_paths=200,
                                master_seed=1)
    assert cur.n_invalid > 0
    assert cur.n_paths + cur.n_invalid == 200


def test_all_paths_invalid_raises():
    spec = make_chain_spec(n=1, d=1, drifts=[["log(x1 - 10)"]],
                           sigma=[["1"]], domains=[[(-5.0, 5.0)]],
                           x0=[[0.0]], horizon=0.05)
    pol = PolicyTable.constant(spec)
    with pytest.raises(SimulationError):
        sde.estimate_survival(spec, pol, 1, dt=1e-3, n_paths=40,
                              master_seed=1)


def test_survival_argument_validation():
    spec = bm_spec()
    pol = PolicyTable.constant(spec)
    with pytest.raises(SpecError):
        sde.estimate_survival(spec, pol, 2, n_paths=10)
    with pytest.raises(SpecError):
        sde.estimate_survival(spec, pol, 1, n_paths=10, absorb="none")
    with pytest.raises(SpecError):
        sde.estimate_survival(spec, pol, 1, n_paths=0)


# ---------------------------------------------------------------------------
# rate fits


def test_rate_recovers_exact_exponential():
    t = np.linspace(0.0, 6.0, 61)
    r = sde.estimate_exit_rate(synthetic_curve(t, np.exp(-2.0 * t)))
    assert abs(r.rate - 2.0) < 1e-9
    assert abs(r.intercept) < 1e-9
    assert r.n_points >= 3


def test_rate_bm_reference_within_5pct():
    spec = bm_spec(horizon=4.0)
    pol = PolicyTable.constant(spec)
    cur = sde.estimate_survival(spec, pol, 1, dt=5e-4, n_paths=30000,
                                master_seed=21, n_workers=4)
    r = sde.estimate_exit_rate(cur, fit_window=(1.0, 4.0))
    assert abs(r.rate - PI2_8) / PI2_8 < 0.05


def test_rate_constant_drift_within_5pct():
    lam = PI2_8 + 0.5**2 / 2
    spec = bm_spec(horizon=4.0, drift="0.5")
    pol = PolicyTable.constant(spec)
    cur = sde.estimate_survival(spec, pol, 1, dt=5e-4, n_paths=30000,
                                master_seed=21, n_workers=4)
    r = sde.estimate_exit_rate(cur, fit_window=(1.0, 4.0))
    assert abs(r.rate - lam) / lam < 0.05


def test_rate_stable_under_doubling_paths():
    spec = bm_spec(horizon=4.0)
    pol = PolicyTable.constant(spec)

    def fit(n):
        cur = sde.estimate_survival(spec, pol, 1, dt=1e-3, n_paths=n,
                                    master_seed=40, n_workers=4)
        return sde.estimate_exit_rate(cur, fit_window=(1.0, 3.0))

    small, big = fit(3000), fit(6000)
    assert abs(small.rate - big.rate) <= 2 * small.stderr


def test_rate_stable_under_halving_dt():
    spec = bm_spec(horizon=4.0)
    pol = PolicyTable.constant(spec)

    def fit(dt, seed):
        cur = sde.estimate_survival(spec, pol, 1, dt=dt, n_paths=4000,
                                    master_seed=seed, n_workers=4)
        return sde.estimate_exit_rate(cur, fit_window=(1.0, 3.0))

    coarse, fine = fit(2e-3, 50), fit(1e-3, 51)
    ci = 2 * np.hypot(coarse.stderr, fine.stderr)
    assert abs(coarse.rate - fine.rate) <= ci


def test_rate_fit_error_paths():
    t = np.linspace(0.0, 6.0, 61)
    s = np.exp(-2.0 * t)
    s[t > 5.0] = 0.0
    with pytest.raises(FitError):
        sde.estimate_exit_rate(synthetic_curve(t, s))
    with pytest.raises(FitError):  # fewer than 3 usable points
        sde.estimate_exit_rate(synthetic_curve(t, np.exp(-2.0 * t)),
                               fit_window=(5.85, 6.0))
    with pytest.raises(FitError):  # inverted window
        sde.estimate_exit_rate(synthetic_curve(t, np.exp(-2.0 * t)),
                               fit_window=(4.0, 2.0))
    flat = synthetic_curve(t, np.ones_like(t))  # all censored
    with pytest.raises(FitError):
        sde.estimate_exit_rate(flat)


# ---------------------------------------------------------------------------
# coupled regularization runs


def test_coupling_scales_like_sqrt_eps_exactly_for_linear_chain():
    # For m_2 = x1 - x2 the coupled gap solves a linear recursion driven
    # only by the shared block-2 noise, so sup-err is proportional to
    # sqrt(eps) pathwise and the log-log slope is 0.5 to round-off.
    spec = chain_spec()
    pol = PolicyTable.constant(spec)
    tab = sde.coupled_viscosity_error(spec, pol, [0.2, 0.1, 0.05, 0.025, 0.0],
                                      dt=1e-3, n_paths=2000, master_seed=3,
                                      n_workers=4)
    assert tab.sup_err[-1] == 0.0
    assert tab.dtheta[-1] == 0.0
    pos = tab.eps > 0
    assert np.all(np.diff(tab.sup_err[pos]) < 0)  # decreasing with eps
    slope, _ = np.polyfit(np.log(tab.eps[pos]), np.log(tab.sup_err[pos]), 1)
    assert abs(slope - 0.5) < 1e-6
    # monotonicity within CI, as a property over the table itself
    for i in range(1, tab.eps.size):
        assert tab.sup_err[i] <= tab.sup_err[i - 1] + 2 * tab.sup_err_ci[i - 1]


def test_coupling_nonlinear_chain_slope_near_half():
    spec = make_chain_spec(n=2, d=1, drifts=[["-x1"], ["tanh(x1) - x2"]],
                           sigma=[["1"]], domains=[[(-1.0, 1.0)], [(-2.0, 2.0)]],
                           x0=[[0.0], [0.0]], horizon=4.0)
    pol = PolicyTable.constant(spec)
    tab = sde.coupled_viscosity_error(spec, pol, [0.2, 0.05, 0.0125],
                                      dt=1e-3, n_paths=1000, master_seed=3,
                                      n_workers=4)
    slope, _ = np.polyfit(np.log(tab.eps), np.log(tab.sup_err), 1)
    assert 0.35 <= slope <= 0.65


def test_coupling_argument_validation():
    spec = chain_spec()
    pol = PolicyTable.constant(spec)
    with pytest.raises(SpecError):
        sde.coupled_viscosity_error(spec, pol, [], n_paths=10)
    with pytest.raises(SpecError):
        sde.coupled_viscosity_error(spec, pol, [0.1, 0.2], n_paths=10)
    with pytest.raises(SpecError):
        sde.coupled_viscosity_error(spec, pol, [0.1, -0.2], n_paths=10)
    one = bm_spec()
    with pytest.raises(SpecError):
        sde.coupled_viscosity_error(one, PolicyTable.constant(one), [0.1],
                                    n_paths=10)


# ---------------------------------------------------------------------------
# exit-time ordering


def test_ordering_probability_hits_limits():
    # Block 1 on a huge box never exits by T, so theta^1 = T >= theta^2.
    wide = make_chain_spec(n=2, d=1, drifts=[["0"], ["x1 - x2"]],
                           sigma=[["1"]],
                           domains=[[(-50.0, 50.0)], [(-0.5, 0.5)]],
                           x0=[[0.0], [0.0]], horizon=2.0)
    pol = PolicyTable.constant(wide)
    rep = sde.estimate_exit_time_ordering(wide, pol, dt=1e-3, n_paths=300,
                                          master_seed=17)
    assert rep.ordering_prob == 1.0
    # Flip the geometry: block 1 exits fast, block 2 never does.
    tight = make_chain_spec(n=2, d=1, drifts=[["0"], ["x1 - x2"]],
                            sigma=[["1"]],
                            domains=[[(-0.3, 0.3)], [(-50.0, 50.0)]],
                            x0=[[0.0], [0.0]], horizon=2.0)
    rep2 = sde.estimate_exit_time_ordering(tight, PolicyTable.constant(tight),
                                           dt=1e-3, n_paths=300,
                                           master_seed=17)
    assert rep2.ordering_prob == 0.0
    assert rep2.pair_violations[0] == 1.0


def test_ordering_reference_chain_pinned():
    spec = chain_spec(horizon=3.0)
    pol = PolicyTable.constant(spec)
    rep = sde.estimate_exit_time_ordering(spec, pol, dt=1e-3, n_paths=500,
                                          master_seed=17)
    assert rep.n_paths == 500
    assert abs(rep.ordering_prob - 0.16) < 1e-12
    assert abs(rep.pair_violations[0] - 0.84) < 1e-12


def test_ordering_needs_two_subsystems():
    spec = bm_spec()
    with pytest.raises(SpecError):
        sde.estimate_exit_time_ordering(spec, PolicyTable.constant(spec),
                                        n_paths=10)
