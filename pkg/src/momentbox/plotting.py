"""Figure rendering for the report paths.

Every report command writes its delimited output first; these helpers
render companion PNG figures from the same data structures.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["histogram_figure", "coverage_figure", "excess_figure",
           "power_figure"]


def histogram_figure(hist: dict, path) -> None:
    """Per-sample-size histograms of the scaled statistic on shared bins."""
    ns = sorted(hist["values"])
    fig, axes = plt.subplots(1, len(ns), figsize=(3.2 * len(ns), 2.8),
                             sharex=True, sharey=True, squeeze=False)
    edges = hist["bin_edges"]
    for ax, n in zip(axes[0], ns):
        ax.hist(hist["values"][n], bins=edges, density=True,
                color="steelblue", edgecolor="white", linewidth=0.3)
        ax.set_title(f"n = {n}", fontsize=10)
        ax.set_xlabel(f"n^{hist['beta']:g} S(T)")
    axes[0][0].set_ylabel("density")
    fig.suptitle(f"design {hist['design']}: scaled statistic across sample sizes",
                 fontsize=11)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _rows_by_method(report, value_key):
    out = {}
    for row in report.rows:
        out.setdefault((row["method"], row["alpha"]), []).append(
            (row["n"], row[value_key]))
    for key in out:
        out[key].sort()
    return out


def coverage_figure(report, path) -> None:
    """Coverage against sample size, one line per (method, alpha)."""
    series = _rows_by_method(report, "coverage")
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for (method, alpha), pts in sorted(series.items()):
        ns, cov = zip(*pts)
        ax.plot(ns, cov, marker="o", label=f"{method}, nominal {1 - alpha:.2f}")
        ax.axhline(1 - alpha, color="gray", linewidth=0.6, linestyle=":")
    ax.set_xscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("coverage")
    ax.set_title(f"design {report.design}: boundary coverage")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def excess_figure(report, path) -> None:
    """Mean excess length against sample size on log-log axes."""
    series = _rows_by_method(report, "mean_excess")
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for (method, alpha), pts in sorted(series.items()):
        ns, exc = zip(*pts)
        ax.loglog(ns, exc, marker="o", label=f"{method}, alpha {alpha:g}")
    ax.set_xlabel("n")
    ax.set_ylabel("mean upper-endpoint excess")
    ax.set_title(f"design {report.design}: confidence interval excess length")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def power_figure(curves: dict, path, design: int, n: int) -> None:
    """Rejection rate against offset, one line per method."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for method, pts in sorted(curves.items()):
        offs = sorted(pts)
        ax.plot(offs, [pts[o] for o in offs], marker="o", label=method)
    ax.set_xlabel("intercept offset above the boundary")
    ax.set_ylabel("rejection rate")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(f"design {design}, n = {n}: local power")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
