"""Command-line front end.

One subcommand per experiment; each writes RFC-4180 CSVs (full float
precision) plus figures into --out and seals the directory with a
manifest naming every file and its digest.  Output bytes are a function
of (resolved config, seed) only -- never of --threads.

Exit status: 0 ok, 1 usage, 2 configuration problem, 3 numerical
failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .config import (apply_overrides, build_spec, config_digest,
                     default_config, example_text, load_config)
from .eigen import eigen_vs_mc_crosscheck, principal_eigenpair
from .errors import ConfigError, ExpressionError, NumericError, SpecError
from .exitprob import (BoundaryData, field_at, indicator_family,
                       mc_exit_probability, solve_dirichlet, viscosity_sweep)
from .fdgrid import assemble_generator, build_grid
from .hjb import optimize_chain
from .model import simulate_deterministic, validate_spec
from .policy import PolicyTable
from .reporting import RunWriter
from .sde import (coupled_viscosity_error, estimate_exit_rate,
                  estimate_exit_time_ordering, estimate_survival)


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors on status 1 (2 is reserved for config
    problems)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------- plumbing


def _figures():
    # matplotlib import is slow; only load it when a figure is rendered
    from . import figures
    return figures


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else default_config()
    apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg["mc"]["master_seed"] = int(args.seed)
    if getattr(args, "no_plots", False):
        cfg["output"]["plots"] = False
    return cfg


def _prepare(args, subcommand):
    cfg = _resolve_config(args)
    spec = build_spec(cfg)
    writer = RunWriter(args.out, subcommand, config_digest(cfg),
                       cfg["mc"]["master_seed"], overrides=args.overrides,
                       version=__version__)
    return cfg, spec, writer


def _level(cfg, spec) -> int:
    lvl = cfg["grid"]["level"]
    if lvl == 0:
        return spec.n
    if not 1 <= lvl <= spec.n:
        raise ConfigError(f"grid.level must be in 1..{spec.n}, got {lvl}")
    return lvl


def _nodes_for(nodes, level, d):
    if isinstance(nodes, (list, tuple)):
        return list(nodes)[: level * d]
    return nodes


def _mc_horizon(cfg):
    h = cfg["mc"]["horizon"]
    return None if h == 0.0 else float(h)


def _fit_window(cfg):
    w = cfg["mc"]["window"]
    if not w:
        return None
    if len(w) != 2:
        raise ConfigError("mc.window needs exactly two entries [lo, hi]")
    return (float(w[0]), float(w[1]))


def _boundary_data(cfg, section) -> BoundaryData:
    body = cfg[section]
    if body["expression"]:
        return BoundaryData.expression(body["expression"])
    return indicator_family(body["k"], body["target"])


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (tuple, list, np.ndarray)):
        from .reporting import format_cell
        return " ".join(format_cell(v) for v in np.ravel(value))
    return value


def _coord_header(dim):
    return [f"x{a + 1}" for a in range(dim)]


def _triplet_text(matrix) -> str:
    coo = matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines = [f"{matrix.shape[0]} {matrix.shape[1]} {coo.nnz}"]
    for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
        lines.append(f"{int(i)} {int(j)} {float(v)!r}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ subcommands


def cmd_validate(args) -> int:
    cfg, spec, writer = _prepare(args, "validate")
    report = validate_spec(spec)
    writer.csv("diagnostics.csv",
               ["check", "passed", "value", "witness", "detail"],
               [[c.name, c.passed, _cell(c.value), _cell(c.witness),
                 c.detail] for c in report.checks])
    writer.finish()
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    if not report.passed:
        for c in report.failures():
            print(f"error: check '{c.name}' failed: {c.detail}",
                  file=sys.stderr)
        return 2
    return 0


def cmd_skeleton(args) -> int:
    cfg, spec, writer = _prepare(args, "skeleton")
    policy = PolicyTable.constant(spec)
    traj = simulate_deterministic(
        spec, policy, dt=cfg["skeleton"]["dt"], horizon=_mc_horizon(cfg),
        blowup_radius=cfg["skeleton"]["blowup_radius"])
    dim = spec.n * spec.d
    writer.csv("skeleton.csv", ["t"] + _coord_header(dim),
               [[t] + list(x) for t, x in zip(traj.times, traj.states)])
    writer.csv("skeleton_summary.csv",
               ["escaped", "escape_time", "terminal_norm"],
               [[traj.escaped, _cell(traj.escape_time),
                 traj.terminal_norm]])
    if cfg["output"]["plots"]:
        fg = _figures()
        fig = fg.trajectory_figure(traj.times, traj.states, spec.d)
        writer.figure(fig, "skeleton.png")
        fg.close(fig)
    writer.finish()
    where = (f"left the domain at t = {float(traj.escape_time)!r}"
             if traj.escaped else "stayed inside the domain")
    print(f"noise-free skeleton {where}; terminal |x| = "
          f"{float(traj.terminal_norm)!r}")
    return 0


def _survival_curve(cfg, spec, level, args):
    mc = cfg["mc"]
    return estimate_survival(
        spec, PolicyTable.constant(spec), level, dt=mc["dt"],
        horizon=_mc_horizon(cfg), n_paths=mc["n_paths"],
        master_seed=mc["master_seed"], n_times=mc["n_times"],
        absorb=mc["absorb"], n_workers=args.threads)


def _write_curve(writer, curve, name="survival.csv"):
    writer.csv(name, ["t", "survival", "ci_halfwidth"],
               np.column_stack([curve.times, curve.survival,
                                curve.ci_halfwidth]))
    writer.csv("survival_meta.csv",
               ["n_paths", "n_invalid", "level", "absorb", "horizon", "dt"],
               [[curve.n_paths, curve.n_invalid, curve.level, curve.absorb,
                 curve.horizon, curve.dt]])


def cmd_survival(args) -> int:
    cfg, spec, writer = _prepare(args, "survival")
    curve = _survival_curve(cfg, spec, _level(cfg, spec), args)
    _write_curve(writer, curve)
    if cfg["output"]["plots"]:
        fg = _figures()
        fig = fg.survival_figure(curve)
        writer.figure(fig, "survival.png")
        fg.close(fig)
    writer.finish()
    print(f"survival at T = {curve.horizon!r}: {float(curve.survival[-1])!r} "
          f"({curve.n_paths} paths, {curve.n_invalid} invalid)")
    return 0


def cmd_rate(args) -> int:
    cfg, spec, writer = _prepare(args, "rate")
    curve = _survival_curve(cfg, spec, _level(cfg, spec), args)
    est = estimate_exit_rate(curve, fit_window=_fit_window(cfg))
    _write_curve(writer, curve)
    writer.csv("rate.csv",
               ["rate", "stderr", "intercept", "window_lo", "window_hi",
                "n_points"],
               [[est.rate, est.stderr, est.intercept, est.window[0],
                 est.window[1], est.n_points]])
    if cfg["output"]["plots"]:
        fg = _figures()
        fig = fg.survival_figure(curve, rate=est)
        writer.figure(fig, "rate.png")
        fg.close(fig)
    writer.finish()
    print(f"exit rate = {est.rate!r} +/- {est.stderr!r} "
          f"(fit on [{est.window[0]!r}, {est.window[1]!r}], "
          f"{est.n_points} points)")
    return 0


def cmd_eigen(args) -> int:
    cfg, spec, writer = _prepare(args, "eigen")
    level = _level(cfg, spec)
    policy = PolicyTable.constant(spec)
    grid = build_grid(spec, level,
                      _nodes_for(cfg["grid"]["nodes"], level, spec.d))
    op = assemble_generator(spec, policy, grid)
    pair = principal_eigenpair(op, tol=cfg["eigen"]["tol"],
                               max_iter=cfg["eigen"]["max_iter"])
    writer.csv("eigen.csv",
               ["lambda", "residual", "iterations", "gap_estimate",
                "level", "n_interior"],
               [[pair.value, pair.residual, pair.iterations,
                 pair.gap_estimate, level, grid.n_interior]])
    pts = grid.interior_points()
    writer.csv("psi.csv", _coord_header(grid.dim) + ["psi"],
               np.column_stack([pts, pair.psi]))
    ladder = cfg["eigen"]["eps_values"]
    if ladder:
        rows = []
        for e in ladder:
            op_e = assemble_generator(spec, policy, grid, eps=float(e))
            pe = principal_eigenpair(op_e, tol=cfg["eigen"]["tol"],
                                     max_iter=cfg["eigen"]["max_iter"])
            rows.append([float(e), pe.value, pe.residual, pe.iterations])
        writer.csv("eigen_sweep.csv",
                   ["eps", "lambda", "residual", "iterations"], rows)
    if cfg["output"]["triplets"]:
        writer.text("operator.txt", _triplet_text(op.matrix))
    if cfg["output"]["plots"]:
        fg = _figures()
        fig = fg.field_figure(grid, pair.psi,
                              f"principal eigenfield, rate {pair.value:.6g}")
        writer.figure(fig, "psi.png")
        fg.close(fig)
    writer.finish()
    print(f"lambda = {pair.value!r} (residual {pair.residual:.3e}, "
          f"{pair.iterations} iterations, {grid.n_interior} nodes)")
    return 0


def cmd_crosscheck(args) -> int:
    cfg, spec, writer = _prepare(args, "crosscheck")
    level = _level(cfg, spec)
    mc = cfg["mc"]
    rep = eigen_vs_mc_crosscheck(
        spec, PolicyTable.constant(spec), level,
        nodes_per_axis=_nodes_for(cfg["grid"]["nodes"], level, spec.d),
        tol=cfg["eigen"]["tol"], max_iter=cfg["eigen"]["max_iter"],
        dt=mc["dt"], horizon=_mc_horizon(cfg), n_paths=mc["n_paths"],
        master_seed=mc["master_seed"], n_times=mc["n_times"],
        fit_window=_fit_window(cfg), absorb=mc["absorb"],
        agreement_tol=cfg["crosscheck"]["agreement_tol"],
        n_workers=args.threads)
    writer.csv("crosscheck.csv",
               ["lambda_pde", "lambda_mc", "mc_stderr", "discrepancy",
                "agreement_tol", "passed", "level", "horizon", "n_paths"],
               [[rep.lambda_pde, rep.lambda_mc, rep.mc_stderr,
                 rep.discrepancy, rep.agreement_tol, rep.passed, rep.level,
                 rep.horizon, rep.curve.n_paths]])
    _write_curve(writer, rep.curve)
    if cfg["output"]["plots"]:
        fg = _figures()
        fig = fg.survival_figure(rep.curve, rate=rep.rate,
                                 lam_pde=rep.lambda_pde)
        writer.figure(fig, "crosscheck.png")
        fg.close(fig)
    writer.finish()
    verdict = "agree" if rep.passed else "DISAGREE"
    print(f"eigenvalue {rep.lambda_pde!r} vs MC {rep.lambda_mc!r} "
          f"+/- {rep.mc_stderr!r}: routes {verdict} "
          f"(|diff| = {rep.discrepancy!r})")
    return 0


def cmd_optimize(args) -> int:
    cfg, spec, writer = _prepare(args, "optimize")
    hjb = cfg["hjb"]
    results = optimize_chain(
        spec, cfg["grid"]["nodes"], tol=hjb["tol"],
        max_sweeps=hjb["max_sweeps"], mode=hjb["mode"],
        eig_tol=cfg["eigen"]["tol"], eig_max_iter=cfg["eigen"]["max_iter"])
    writer.csv("optimize.csv",
               ["level", "lambda", "sweeps", "converged", "reason"],
               [[r.level, r.value, r.sweeps, r.converged, r.reason]
                for r in results])
    writer.csv("history.csv", ["level", "sweep", "lambda"],
               [[r.level, k, lam] for r in results
                for k, lam in enumerate(r.lambda_history)])
    final = results[-1].policy
    for r in results:
        grid = build_grid(spec, r.level,
                          _nodes_for(cfg["grid"]["nodes"], r.level, spec.d))
        pts = grid.interior_points()
        idx = final.control_index(r.level, pts)
        ctl = final.control(r.level, pts)
        header = (_coord_header(grid.dim) + ["control_index"]
                  + [f"u{j + 1}" for j in range(ctl.shape[1])])
        writer.csv(f"policy_level{r.level}.csv", header,
                   np.column_stack([pts, idx[:, None], ctl]))
    if cfg["output"]["plots"]:
        fg = _figures()
        fig = fg.history_figure([(r.level, r.lambda_history)
                                 for r in results])
        writer.figure(fig, "optimize.png")
        fg.close(fig)
    writer.finish()
    for r in results:
        print(f"level {r.level}: lambda = {r.value!r} after {r.sweeps} "
              f"sweep(s), {r.reason}")
    return 0


def cmd_exitprob(args) -> int:
    cfg, spec, writer = _prepare(args, "exitprob")
    level = _level(cfg, spec)
    policy = PolicyTable.constant(spec)
    data = _boundary_data(cfg, "exitprob")
    grid = build_grid(spec, level,
                      _nodes_for(cfg["grid"]["nodes"], level, spec.d))
    op = assemble_generator(spec, policy, grid)
    field = solve_dirichlet(op, data)
    x0 = spec.x0_flat(level)
    at_start = field_at(grid, field, x0)
    mc = cfg["mc"]
    est = mc_exit_probability(
        spec, policy, level, data, horizon=_mc_horizon(cfg), dt=mc["dt"],
        n_paths=mc["n_paths"], master_seed=mc["master_seed"],
        absorb=mc["absorb"], n_workers=args.threads)
    writer.csv("field.csv", _coord_header(grid.dim) + ["value"],
               np.column_stack([grid.interior_points(), field]))
    writer.csv("exitprob.csv",
               ["pde_at_x0", "mc_estimate", "mc_ci_halfwidth", "n_paths",
                "n_invalid", "n_censored", "horizon", "level"],
               [[at_start, est.estimate, est.ci_halfwidth, est.n_paths,
                 est.n_invalid, est.n_censored, est.horizon, est.level]])
    if cfg["output"]["plots"]:
        fg = _figures()
        fig = fg.field_figure(grid, field, "attainment probability",
                              marker=x0)
        writer.figure(fig, "exitprob.png")
        fg.close(fig)
    writer.finish()
    print(f"stationary solve at x0 = {at_start!r}; MC at horizon "
          f"{est.horizon!r} = {est.estimate!r} +/- {est.ci_halfwidth!r} "
          f"({est.n_censored} censored)")
    return 0


def cmd_sweep(args) -> int:
    cfg, spec, writer = _prepare(args, "sweep")
    level = _level(cfg, spec)
    data = _boundary_data(cfg, "sweep")
    res = viscosity_sweep(
        spec, PolicyTable.constant(spec), level, data,
        cfg["sweep"]["eps_values"],
        _nodes_for(cfg["grid"]["nodes"], level, spec.d), warn=False)
    rows = []
    for j, e in enumerate(res.eps):
        diff = "" if j == 0 else res.sup_diffs[j - 1]
        rows.append([e, res.ill[j], diff])
    writer.csv("sweep.csv", ["eps", "below_floor", "sup_diff_from_prev"],
               rows)
    writer.csv("sweep_meta.csv", ["eps_floor", "converging"],
               [[res.eps_floor, res.converging]])
    pts = res.grid.interior_points()
    from .reporting import format_cell
    header = (_coord_header(res.grid.dim)
              + [f"field_eps={format_cell(e)}" for e in res.eps])
    writer.csv("fields.csv", header, np.column_stack([pts, res.fields.T]))
    if cfg["output"]["plots"]:
        fg = _figures()
        fig = fg.loglog_figure(res.eps[1:], res.sup_diffs, "epsilon",
                               "sup gap to previous field")
        writer.figure(fig, "sweep.png")
        fg.close(fig)
    writer.finish()
    trend = "nonincreasing" if res.converging else "NOT monotone"
    print(f"viscosity ladder {list(res.eps)}: consecutive sup gaps "
          f"{[float(v) for v in res.sup_diffs]} ({trend}; resolvable "
          f"down to eps ~ {res.eps_floor!r})")
    return 0


def cmd_couple(args) -> int:
    cfg, spec, writer = _prepare(args, "couple")
    mc = cfg["mc"]
    table = coupled_viscosity_error(
        spec, PolicyTable.constant(spec), cfg["couple"]["eps_values"],
        dt=mc["dt"], horizon=_mc_horizon(cfg),
        n_paths=cfg["couple"]["n_paths"], master_seed=mc["master_seed"],
        level=_level(cfg, spec), n_workers=args.threads)
    writer.csv("couple.csv",
               ["eps", "sup_err", "sup_err_ci", "dtheta", "dtheta_ci",
                "theta_mean"],
               np.column_stack([table.eps, table.sup_err, table.sup_err_ci,
                                table.dtheta, table.dtheta_ci,
                                table.theta_mean]))
    mask = table.sup_err > 0
    if int(mask.sum()) >= 2:
        lx, ly = np.log(table.eps[mask]), np.log(table.sup_err[mask])
        slope, intercept = np.polyfit(lx, ly, 1)
        r = np.corrcoef(lx, ly)[0, 1]
        r2 = float(r * r)
    else:
        slope, intercept, r2 = float("nan"), float("nan"), float("nan")
    writer.csv("couple_fit.csv",
               ["slope", "r_squared", "intercept", "theta_ref", "n_paths",
                "level"],
               [[float(slope), r2, float(intercept), table.theta_ref,
                 table.n_paths, table.level]])
    if cfg["output"]["plots"]:
        fg = _figures()
        fig = fg.loglog_figure(table.eps, table.sup_err, "epsilon",
                               "mean sup-norm path gap",
                               slope=None if np.isnan(slope) else slope,
                               y_err=table.sup_err_ci)
        writer.figure(fig, "couple.png")
        fg.close(fig)
    writer.finish()
    print(f"coupled path gap ~ eps^{float(slope)!r} (R^2 = {r2!r}, "
          f"{table.n_paths} paths per epsilon)")
    return 0


def cmd_ordering(args) -> int:
    cfg, spec, writer = _prepare(args, "ordering")
    mc = cfg["mc"]
    rep = estimate_exit_time_ordering(
        spec, PolicyTable.constant(spec), dt=mc["dt"],
        horizon=_mc_horizon(cfg), n_paths=cfg["ordering"]["n_paths"],
        master_seed=mc["master_seed"], n_workers=args.threads)
    pair_names = [f"p_exit{i + 1}_before_exit{i + 2}"
                  for i in range(len(rep.pair_violations))]
    writer.csv("ordering.csv",
               ["ordering_prob", "n_paths", "n_invalid"] + pair_names,
               [[rep.ordering_prob, rep.n_paths, rep.n_invalid]
                + list(rep.pair_violations)])
    if cfg["output"]["plots"]:
        fg = _figures()
        fig = fg.bars_figure(["fully ordered"] + pair_names,
                             [rep.ordering_prob]
                             + list(rep.pair_violations),
                             "probability")
        writer.figure(fig, "ordering.png")
        fg.close(fig)
    writer.finish()
    print(f"P(exits occur outermost-last in order) = "
          f"{rep.ordering_prob!r} over {rep.n_paths} paths")
    return 0


def cmd_config(args) -> int:
    if args.example:
        sys.stdout.write(example_text())
        return 0
    cfg = _resolve_config(args)
    print(json.dumps(cfg, indent=2, sort_keys=True))
    return 0


# ------------------------------------------------------------------ wiring


_SUBCOMMANDS = [
    ("validate", cmd_validate, "run the model well-posedness checks"),
    ("skeleton", cmd_skeleton, "integrate the noise-free skeleton"),
    ("survival", cmd_survival, "Monte-Carlo survival curve"),
    ("rate", cmd_rate, "exit rate from the survival tail"),
    ("eigen", cmd_eigen, "principal eigenvalue and eigenfield"),
    ("crosscheck", cmd_crosscheck, "eigenvalue route vs Monte-Carlo route"),
    ("optimize", cmd_optimize, "policy iteration for the minimum rate"),
    ("exitprob", cmd_exitprob, "attainment probability, PDE and MC"),
    ("sweep", cmd_sweep, "Dirichlet fields along a viscosity ladder"),
    ("couple", cmd_couple, "pathwise regularization error (common noise)"),
    ("ordering", cmd_ordering, "exit-time ordering statistics"),
]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="experiment description (TOML)")
    common.add_argument("--out", metavar="DIR", default="out",
                        help="report directory (default: ./out)")
    common.add_argument("--seed", type=int, default=None, metavar="N",
                        help="override mc.master_seed")
    common.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--threads", type=int,
                        default=os.cpu_count() or 1, metavar="N",
                        help="worker processes for path simulation "
                             "(results never depend on this)")
    common.add_argument("--no-plots", action="store_true",
                        help="skip figure rendering")

    parser = _Parser(
        prog="exitlab",
        description="Exit-rate laboratory for degenerate controlled "
                    "diffusion chains.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                                required=True)
    for name, fn, blurb in _SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=blurb)
        p.set_defaults(func=fn)
    pc = sub.add_parser("config", parents=[common],
                        help="print the resolved configuration")
    pc.add_argument("--example", action="store_true",
                    help="print a fully commented example file instead")
    pc.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ExpressionError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
