"""Report figures. Matplotlib with the Agg backend, files only, no display."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import DetCurve, probit  # noqa: E402

__all__ = ["plot_det", "plot_group_eer"]

_PERCENT_TICKS = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4)


def _probit_axis(ax, n: int) -> None:
    ticks = [probit(p, n) for p in _PERCENT_TICKS]
    labels = [f"{p * 100:g}" for p in _PERCENT_TICKS]
    ax.set_xticks(ticks, labels)
    ax.set_yticks(ticks, labels)


def plot_det(curves: dict[str, DetCurve], out_path) -> Path:
    """Detection error tradeoff curves on probit-warped axes.

    ``curves`` maps a legend label to a curve. Rates are warped through the
    inverse normal CDF so a Gaussian-score system traces a straight line.
    """
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    n_ref = 1
    for label, curve in curves.items():
        n = max(curve.n_pos, curve.n_neg, 1)
        n_ref = max(n_ref, n)
        x = [probit(p, n) for p in curve.far]
        y = [probit(p, n) for p in curve.frr]
        ax.plot(x, y, label=label, linewidth=1.4)
    lo = probit(_PERCENT_TICKS[0], n_ref)
    hi = probit(_PERCENT_TICKS[-1], n_ref)
    ax.plot([lo, hi], [lo, hi], color="0.7", linewidth=0.8, linestyle="--")
    _probit_axis(ax, n_ref)
    ax.set_xlim(lo, hi)
    ax.set_ylim(lo, hi)
    ax.set_xlabel("false accepts (%)")
    ax.set_ylabel("false rejects (%)")
    ax.grid(True, linewidth=0.3, alpha=0.6)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_group_eer(report: dict, out_path, title: str = "") -> Path:
    """Grouped bars of per-cell equal error rates from a stratified report.

    Cells with too few trials for a stable estimate are drawn as hatched
    zero-height stubs so their absence is visible rather than silent.
    """
    out_path = Path(out_path)
    cells = report.get("cells", {})
    names = sorted(cells)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(names) + 1.5), 3.6))
    xs = range(len(names))
    for x, name in zip(xs, names):
        entry = cells[name]
        if entry.get("insufficient"):
            ax.bar(x, 0.0, color="none", edgecolor="0.5", hatch="//")
            continue
        ax.bar(x, entry["eer"] * 100.0, color="#4878a8")
    overall = report.get("overall", {})
    if overall and not overall.get("insufficient"):
        ax.axhline(
            overall["eer"] * 100.0, color="#a84848", linewidth=1.0,
            linestyle=":", label="overall",
        )
        ax.legend(fontsize=8)
    ax.set_xticks(list(xs), names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("EER (%)")
    if title:
        ax.set_title(title, fontsize=10)
    ax.grid(True, axis="y", linewidth=0.3, alpha=0.6)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
