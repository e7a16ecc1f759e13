"""Figure rendering for the CLI report paths (written next to the CSV files)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_trace_figure(traces: dict, path):
    """Loss and smooth margin against flow step, one curve per named trace."""
    fig, (ax_loss, ax_margin) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name, trace in traces.items():
        steps = [r.step for r in trace.records]
        ax_loss.semilogy(steps, [max(r.loss, 1e-320) for r in trace.records], label=name)
        pts = [(r.step, r.gamma_tilde) for r in trace.records if r.gamma_tilde is not None]
        if pts:
            ax_margin.plot(*zip(*pts), label=name)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_margin.set_xlabel("step")
    ax_margin.set_ylabel("smooth margin")
    ax_margin.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_figure(rows, path):
    """Robustness against radius (flow vs closed forms) and the coordinate
    magnitudes of the quasi-homogeneous endpoints."""
    fig, (ax_rob, ax_w) = plt.subplots(1, 2, figsize=(9, 3.5))
    by_model = {}
    for row in rows:
        by_model.setdefault(row.model, []).append(row)
    for model, group in sorted(by_model.items()):
        r = [g.r for g in group]
        ax_rob.plot(r, [g.robustness for g in group], "o", ms=3, label=f"{model} flow")
        analytic = [
            g.robustness_analytic_hom if model == "hom" else g.robustness_analytic_qh
            for g in group
        ]
        pairs = [(ri, a) for ri, a in zip(r, analytic) if a is not None]
        if pairs:
            ax_rob.plot(*zip(*pairs), "-", lw=1, label=f"{model} analytic")
    ax_rob.set_xlabel("r")
    ax_rob.set_ylabel("robustness")
    ax_rob.legend(fontsize=8)
    quasi = by_model.get("quasi_hom", [])
    if quasi:
        r = [g.r for g in quasi]
        W = np.array([g.w for g in quasi])
        for i in range(W.shape[1]):
            ax_w.plot(r, W[:, i], label=f"|w{i + 1}|")
        ax_w.set_xlabel("r")
        ax_w.set_ylabel("coordinate magnitude")
        ax_w.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_nc_figure(steps, metrics, path):
    """Collapse metrics against flow step on a log scale."""
    fig, ax = plt.subplots(figsize=(6, 4))
    series = {
        "scatter": [m.within_class_scatter for m in metrics],
        "norm_dev": [m.norm_deviation for m in metrics],
        "dist_spread": [m.pairwise_distance_spread for m in metrics],
        "duality_gap": [m.duality_gap for m in metrics],
    }
    for name, values in series.items():
        ax.semilogy(steps, [max(v, 1e-320) for v in values], label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("metric")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
