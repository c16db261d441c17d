"""Figure rendering for CLI runs. Headless backend, PNG output only."""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["line_figure", "histogram_figure"]


def line_figure(path: str, series: Sequence[tuple], xlabel: str, ylabel: str,
                title: str, logx: bool = False, logy: bool = False,
                hline: Optional[float] = None,
                hline_label: str = "bound") -> None:
    """Render labelled (x, y[, style]) series to a PNG file."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=120)
    for entry in series:
        if len(entry) == 4:
            xs, ys, label, style = entry
        else:
            xs, ys, label = entry
            style = "-"
        ax.plot(xs, ys, style, label=label)
    if hline is not None:
        ax.axhline(hline, color="crimson", linestyle="--", label=hline_label)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if any(len(e) >= 3 and e[2] for e in series) or hline is not None:
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def histogram_figure(path: str, values, bins: int, xlabel: str, title: str) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=120)
    ax.hist(values, bins=bins, color="steelblue", alpha=0.85)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
