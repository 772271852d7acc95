"""PNG figures for run and evaluation reports, rendered off-screen."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MOMENT_NAMES, EvalReport  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_loss_trace(trace, tau, path) -> Path:
    """Loss terms per iteration on a log axis with the curriculum radius alongside.

    ``trace`` is a sequence of loss breakdowns, ``tau`` the matching radii.
    """
    it = np.arange(len(trace))
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in ("main", "div", "match", "graph", "total"):
        vals = np.array([getattr(lb, name) for lb in trace])
        if np.any(vals > 0):
            ax.plot(it, np.abs(vals), label=name, lw=1.2 if name == "total" else 0.9)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("|loss term|")
    if len(tau):
        twin = ax.twinx()
        twin.plot(it, tau, color="grey", ls="--", lw=0.8, label="tau")
        twin.set_ylabel("curriculum radius")
    ax.legend(loc="upper right", fontsize=8)
    return _save(fig, path)


def plot_convergence(report: EvalReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, trace in report.traces.items():
        ax.plot(np.arange(len(trace)), trace, label=f"{name} ({report.iterations_to_threshold.get(name)})")
    if report.threshold is not None:
        ax.axhline(report.threshold, color="black", ls=":", lw=0.8, label="threshold")
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("held-out ECFD")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_moments(report: EvalReport, path) -> Path:
    x = np.arange(len(MOMENT_NAMES))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(x - 0.2, report.moment_errors_fast, 0.4, label="selection")
    ax.bar(x + 0.2, report.moment_errors_random, 0.4, label="random (median)")
    ax.set_xticks(x, MOMENT_NAMES)
    ax.set_ylabel("relative error")
    ax.legend(fontsize=8)
    return _save(fig, path)
