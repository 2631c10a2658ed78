"""Campaign figures, rendered straight to files.

Headless by construction: the Agg backend is forced before pyplot is
imported, so campaigns run the same with or without a display.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_SEV_COLORS = {"critical": "#c0392b", "major": "#e67e22", "medium": "#2980b9"}


def render_figures(fig_dir, coverage_series, findings_series,
                   total_arms: int, iterations: int):
    """Write coverage.png and findings.png under fig_dir.

    coverage_series: [(iteration, arms covered)], findings_series:
    [(iteration, severity)].  Both may be empty.
    """
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    _coverage_png(fig_dir / "coverage.png", coverage_series, total_arms, iterations)
    _findings_png(fig_dir / "findings.png", findings_series, iterations)


def _coverage_png(path, series, total_arms, iterations):
    fig, ax = plt.subplots(figsize=(7, 4))
    if series:
        xs = [it for it, _ in series] + [iterations]
        ys = [c for _, c in series] + [series[-1][1]]
        ax.step(xs, ys, where="post", color="#2c3e50")
    if total_arms:
        ax.axhline(total_arms, linestyle="--", color="#95a5a6",
                   label=f"{total_arms} branch arms")
        ax.legend(loc="lower right")
    ax.set_xlabel("iteration")
    ax.set_ylabel("branch arms covered")
    ax.set_title("coverage")
    ax.set_ylim(bottom=0)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _findings_png(path, series, iterations):
    fig, ax = plt.subplots(figsize=(7, 4))
    if series:
        xs = [it for it, _ in series]
        ys = list(range(1, len(series) + 1))
        ax.step([0] + xs + [iterations], [0] + ys + [ys[-1]],
                where="post", color="#2c3e50")
        for (it, sev), y in zip(series, ys):
            ax.plot([it], [y], "o", color=_SEV_COLORS.get(sev, "#7f8c8d"))
        handles = [plt.Line2D([], [], marker="o", linestyle="", color=c, label=s)
                   for s, c in _SEV_COLORS.items()]
        ax.legend(handles=handles, loc="lower right")
    ax.set_xlabel("iteration")
    ax.set_ylabel("distinct findings")
    ax.set_title("findings")
    ax.set_ylim(bottom=0)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
