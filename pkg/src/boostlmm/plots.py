"""Figure rendering for the report path.

The CLI writes these PNGs next to the delimited output: the coefficient
paths over the boosting iterations, the cross-validation curve with the
chosen stopping iteration, and the fitted random intercepts per cluster.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_MAX_LEGEND = 12


def coefficient_paths(trace, curve=None, out_path="coefficient_paths.png"):
    fig, ax = plt.subplots(figsize=(7.5, 4.5))
    iters = np.arange(trace.m_stop + 1)
    paths = trace.beta_path[:, 1:]
    with_labels = len(trace.colnames) <= _MAX_LEGEND
    for j in np.argsort(-np.abs(paths[-1])):
        ax.plot(iters, paths[:, j], lw=1.2,
                label=trace.colnames[j] if with_labels else None)
    if curve is not None:
        ax.axvline(curve.m_star, color="grey", ls="--", lw=1.0)
        ax.text(curve.m_star, ax.get_ylim()[1], f" m*={curve.m_star}",
                va="top", fontsize=8, color="grey")
    ax.set_xlabel("iteration")
    ax.set_ylabel("coefficient")
    ax.axhline(0.0, color="black", lw=0.5)
    if len(trace.colnames) <= _MAX_LEGEND:
        ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def cv_curve_plot(curve, out_path="cv_curve.png"):
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    m = np.arange(1, len(curve.values) + 1)
    ax.plot(m, curve.values, lw=1.2)
    ax.plot([curve.m_star], [curve.values[curve.m_star - 1]], "o", color="crimson",
            label=f"m* = {curve.m_star}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("cross-validation criterion")
    ax.legend(fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def random_intercepts_plot(trace, m=None, out_path="random_intercepts.png"):
    m = trace.m_stop if m is None else m
    values = trace.gamma_path[m][:, 0]
    labels = [str(c) for c in trace.cluster_labels]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.25 * len(values)), 4.0))
    ax.bar(np.arange(len(values)), values, color="steelblue")
    ax.set_xticks(np.arange(len(values)))
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_ylabel("random intercept")
    ax.axhline(0.0, color="black", lw=0.5)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def simulation_summary_plot(table, out_path="results.png"):
    """Bar chart of mean squared errors per method and design cell."""
    fig, ax = plt.subplots(figsize=(7.5, 4.5))
    cells = table.assign(cell=table["design"] + " tau=" + table["tau"].astype(str)
                         + " p=" + table["p"].astype(str))
    methods = list(dict.fromkeys(cells["method"]))
    labels = list(dict.fromkeys(cells["cell"]))
    width = 0.8 / max(len(methods), 1)
    for i, method in enumerate(methods):
        sub = cells[cells["method"] == method].set_index("cell").reindex(labels)
        ax.bar(np.arange(len(labels)) + i * width, sub["mse_beta"], width, label=method)
    ax.set_xticks(np.arange(len(labels)) + 0.4 - width / 2)
    ax.set_xticklabels(labels, rotation=20, fontsize=8)
    ax.set_ylabel("mean squared error of the coefficients")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return Path(out_path)


def save_report_figures(trace, curve, out_dir):
    """Render all fit figures into ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [coefficient_paths(trace, curve, out / "coefficient_paths.png")]
    if curve is not None:
        written.append(cv_curve_plot(curve, out / "cv_curve.png"))
    m = curve.m_star if curve is not None else trace.m_stop
    written.append(random_intercepts_plot(trace, m, out / "random_intercepts.png"))
    return written
