"""Figure rendering for the report paths.

Every CLI command that writes delimited output also renders the matching
matplotlib figures next to it (PNG, Agg backend, fixed dpi, no embedded
metadata) so reruns stay byte-identical.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geometry import PointPattern, Window
from .smoothing import GridField

DPI = 130


def save_figure(fig, path) -> None:
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)


def _draw_window(ax, window: Window) -> None:
    ring = np.vstack([window.exterior, window.exterior[:1]])
    ax.plot(ring[:, 0], ring[:, 1], color="black", lw=1.0)
    for hole in window.holes:
        ring = np.vstack([hole, hole[:1]])
        ax.plot(ring[:, 0], ring[:, 1], color="black", lw=0.8)


def plot_field(field: GridField, title: str, window: Window = None,
               symmetric: bool = False, cmap: str = "viridis"):
    g = field.grid
    vals = np.where(field.mask, field.values, np.nan)
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    kwargs = {}
    if symmetric:
        vmax = np.nanmax(np.abs(vals)) if np.isfinite(vals).any() else 1.0
        kwargs = {"vmin": -vmax, "vmax": vmax, "cmap": "RdBu_r"}
    else:
        kwargs = {"cmap": cmap}
    im = ax.imshow(vals, origin="lower",
                   extent=[g.x0, g.x0 + g.nx * g.cell, g.y0, g.y0 + g.ny * g.cell],
                   interpolation="nearest", **kwargs)
    if window is not None:
        _draw_window(ax, window)
    ax.set_aspect("equal")
    ax.set_xlabel("x (km)")
    ax.set_ylabel("y (km)")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    return fig


def plot_points(pattern: PointPattern, window: Window, sources=None,
                title: str = "point pattern"):
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    _draw_window(ax, window)
    colors = ["0.6", "crimson", "royalblue", "seagreen", "darkorange"]
    for mark in range(pattern.n_types):
        pts = pattern.points[pattern.marks == mark]
        label = "controls" if mark == 0 else f"disease {mark}"
        size = 3 if mark == 0 else 8
        ax.scatter(pts[:, 0], pts[:, 1], s=size, c=colors[mark % len(colors)],
                   label=label, linewidths=0)
    if sources is not None and len(sources):
        src = np.atleast_2d(np.asarray(sources, dtype=float))
        ax.scatter(src[:, 0], src[:, 1], marker="^", s=70, c="red",
                   edgecolors="black", label="source", zorder=5)
    ax.set_aspect("equal")
    ax.set_xlabel("x (km)")
    ax.set_ylabel("y (km)")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return fig


def plot_exposure_curve(summary: dict, title: str = None):
    """Posterior mean and 95% band of a distance-effect curve."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    knots = summary["knots"]
    if knots is None:
        knots = np.linspace(0.0, 1.0, summary["mean"].size)
    ax.fill_between(knots, summary["ci_low"], summary["ci_high"],
                    alpha=0.25, color="steelblue", label="95% CI")
    ax.plot(knots, summary["mean"], color="steelblue", lw=1.6, label="posterior mean")
    ax.axhline(0.0, color="0.4", lw=0.8, ls="--")
    ax.set_xlabel("distance to source (km)")
    ax.set_ylabel("effect on log-intensity")
    ax.set_title(title or summary["name"])
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def plot_comparison(labels, ddic, title: str = "model comparison"):
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    xs = np.arange(len(labels))
    vals = [0.0 if v is None else v for v in ddic]
    ax.bar(xs, vals, color="steelblue")
    ax.axhline(0.0, color="0.3", lw=0.9)
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("DIC difference vs first model")
    ax.set_title(title)
    fig.tight_layout()
    return fig
