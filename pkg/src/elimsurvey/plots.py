"""File-based figure rendering for the command reports.

Every figure is written straight to disk with pinned PNG metadata so repeat
runs produce byte-identical files; nothing here opens a window.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

PNG_METADATA = {"Software": "elimsurvey"}
DPI = 150


def _save(fig, path) -> None:
    fig.savefig(path, dpi=DPI, metadata=PNG_METADATA)
    plt.close(fig)


def plot_profiles(profiles: dict, path) -> None:
    """Profile deviance curves, one panel per transformed parameter.

    profiles maps a parameter name to a list of (value, relative log
    likelihood) pairs as produced by the profiling routine.
    """
    names = list(profiles)
    fig, axes = plt.subplots(1, max(len(names), 1), figsize=(4 * max(len(names), 1), 3.2),
                             squeeze=False, constrained_layout=True)
    for ax, name in zip(axes[0], names):
        pairs = profiles[name]
        xs = [v for v, _ in pairs]
        ys = [d for _, d in pairs]
        ax.plot(xs, ys, marker="o", ms=3, lw=1.2)
        ax.axhline(-1.92, color="grey", lw=0.8, ls="--")
        ax.set_xlabel(name)
        ax.set_ylabel("relative log likelihood")
    _save(fig, path)


def _grid_extent(grid):
    return (grid.x0, grid.x0 + grid.nx * grid.spacing,
            grid.y0, grid.y0 + grid.ny * grid.spacing)


def plot_surface_maps(grid, mean, sd, path) -> None:
    """Side-by-side maps of predicted prevalence mean and its sd."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), constrained_layout=True)
    extent = _grid_extent(grid)
    for ax, values, label in ((axes[0], mean, "mean prevalence"),
                              (axes[1], sd, "prevalence sd")):
        img = ax.imshow(grid.values_to_array2d(values), extent=extent,
                        aspect="equal", cmap="viridis")
        ax.set_title(label)
        ax.set_xlabel("x (km)")
        ax.set_ylabel("y (km)")
        fig.colorbar(img, ax=ax, shrink=0.85)
    _save(fig, path)


def plot_design_map(design, sites, path) -> None:
    """Candidate sites in grey, sampled primaries filled, reserves open."""
    fig, ax = plt.subplots(figsize=(6, 6), constrained_layout=True)
    xs = [s.x for s in sites]
    ys = [s.y for s in sites]
    ax.scatter(xs, ys, s=12, c="0.75", label="candidates", zorder=1)
    prim = [r.site for r in design.rows() if not r.reserve]
    resv = [r.site for r in design.rows() if r.reserve]
    ax.scatter([s.x for s in prim], [s.y for s in prim], s=40, c="tab:blue",
               label="primary", zorder=3)
    if resv:
        ax.scatter([s.x for s in resv], [s.y for s in resv], s=40,
                   facecolors="none", edgecolors="tab:orange", label="reserve",
                   zorder=2)
    ax.set_xlabel("x (km)")
    ax.set_ylabel("y (km)")
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    _save(fig, path)


def plot_npv_curves(table, path) -> None:
    """NPV against k, one line per m, with Monte Carlo error bars."""
    fig, ax = plt.subplots(figsize=(5.5, 4), constrained_layout=True)
    for m in table.ms:
        ks, vals, errs = [], [], []
        for k in table.ks:
            res = table.cells[(k, m)]
            if res.npv is None:
                continue
            ks.append(k)
            vals.append(res.npv)
            errs.append(res.npv_stderr if res.npv_stderr is not None else np.nan)
        ax.errorbar(ks, vals, yerr=errs, marker="o", ms=4, capsize=3, label=f"m={m}")
    ax.set_xlabel("number of sampled sites k")
    ax.set_ylabel("NPV")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="best", fontsize=8)
    _save(fig, path)


def plot_field_panels(panels, path) -> None:
    """Field realisations on top, correlation-distance curves below."""
    n_panels = len(panels)
    fig, axes = plt.subplots(2, n_panels, figsize=(3.6 * n_panels, 6.4),
                             constrained_layout=True)
    if n_panels == 1:
        axes = axes.reshape(2, 1)
    for j, panel in enumerate(panels):
        real = panel.realisation
        n = int(round(np.sqrt(len(real.s_values))))
        img = axes[0, j].imshow(real.s_values.reshape(n, n), origin="lower",
                                extent=(0, 1, 0, 1), cmap="viridis")
        axes[0, j].set_title(panel.label, fontsize=9)
        fig.colorbar(img, ax=axes[0, j], shrink=0.8)
        axes[1, j].plot(panel.curve_u, panel.curve_rho, lw=1.2)
        axes[1, j].axhline(0.05, color="grey", lw=0.8, ls="--")
        axes[1, j].axvline(panel.target_range, color="grey", lw=0.8, ls=":")
        axes[1, j].set_xlabel("distance u")
        axes[1, j].set_ylabel("correlation")
    _save(fig, path)
