"""Report figures, rendered headless next to the CSVs they illustrate."""

import matplotlib
matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["survival_figure", "field_figure", "history_figure",
           "loglog_figure", "bars_figure", "trajectory_figure", "close"]


def close(fig):
    plt.close(fig)


def survival_figure(curve, rate=None, lam_pde=None):
    """Semilog survival curve with its CI band; optional tail fit line
    and eigenvalue slope for comparison."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    t, s = curve.times, curve.survival
    ax.semilogy(t, np.maximum(s, 1e-300), color="C0", label="MC survival")
    lo = np.maximum(s - curve.ci_halfwidth, 1e-300)
    hi = np.maximum(s + curve.ci_halfwidth, 1e-300)
    ax.fill_between(t, lo, hi, color="C0", alpha=0.25, linewidth=0)
    if rate is not None:
        wlo, whi = rate.window
        tw = np.linspace(wlo, whi, 50)
        ax.semilogy(tw, np.exp(rate.intercept - rate.rate * tw), "C1--",
                    label=f"fit: rate {rate.rate:.4g}")
    if lam_pde is not None:
        ax.semilogy(t, np.exp(-lam_pde * t), "C2:",
                    label=f"eigenvalue {lam_pde:.4g}")
    ax.set_xlabel("t")
    ax.set_ylabel("S(t)")
    ax.legend(loc="lower left")
    fig.tight_layout()
    return fig


def field_figure(grid, field, title, marker=None):
    """Interior field: line in 1D, heat map in 2D, flat profile above."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    pts = grid.interior_points()
    if grid.dim == 1:
        ax.plot(pts[:, 0], field, color="C0")
        if marker is not None:
            ax.axvline(float(marker[0]), color="C3", linewidth=0.8)
        ax.set_xlabel("x1")
    elif grid.dim == 2:
        nx, ny = grid.interior_shape
        xs = pts[:, 0].reshape(nx, ny)[:, 0]
        ys = pts[:, 1].reshape(nx, ny)[0, :]
        mesh = ax.pcolormesh(xs, ys, field.reshape(nx, ny).T,
                             shading="nearest")
        fig.colorbar(mesh, ax=ax)
        if marker is not None:
            ax.plot([float(marker[0])], [float(marker[1])], "r+",
                    markersize=10)
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
    else:
        ax.plot(field, color="C0")
        ax.set_xlabel("interior node (row-major)")
    ax.set_title(title)
    fig.tight_layout()
    return fig


def history_figure(histories):
    """Eigenvalue per policy sweep, one line per chain level."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for level, hist in histories:
        ax.plot(range(len(hist)), hist, marker="o",
                label=f"level {level}")
    ax.set_xlabel("sweep")
    ax.set_ylabel("exit rate")
    ax.legend()
    fig.tight_layout()
    return fig


def loglog_figure(x, y, xlabel, ylabel, slope=None, y_err=None):
    """Log-log decay plot; optional fitted power-law reference line."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    pos = (x > 0) & (y > 0)
    if y_err is not None:
        ax.errorbar(x[pos], y[pos], yerr=np.asarray(y_err)[pos],
                    fmt="o", color="C0")
        ax.set_xscale("log")
        ax.set_yscale("log")
    else:
        ax.loglog(x[pos], y[pos], "o-", color="C0")
    if slope is not None and pos.sum() >= 2:
        anchor_x, anchor_y = x[pos][0], y[pos][0]
        ref = anchor_y * (x[pos] / anchor_x) ** slope
        ax.loglog(x[pos], ref, "C1--", label=f"slope {slope:.3f}")
        ax.legend()
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    return fig


def bars_figure(labels, values, ylabel):
    """Labeled probability bars on a [0, 1] axis."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.bar(range(len(values)), values, color="C0")
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    return fig


def trajectory_figure(times, states, d):
    """Noise-free skeleton components against time, one line per
    coordinate, grouped by subsystem via the color cycle."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    n_coords = states.shape[1]
    for j in range(n_coords):
        block = j // d
        ax.plot(times, states[:, j], color=f"C{block % 10}",
                alpha=0.9, label=f"x{j + 1}")
    ax.set_xlabel("t")
    ax.set_ylabel("state")
    if n_coords <= 8:
        ax.legend(fontsize="small")
    fig.tight_layout()
    return fig
