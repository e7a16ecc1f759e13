"""Last-layer collapse experiment: simplex optimum, collapse metrics, flow.

Cross-entropy gradient flow on a C-way affine head over per-sample free
features that are layer-normalized (centered, unit norm). At the optimum the
class weights form a regular (C-1)-simplex with equal norms (C-1)/C and zero
sum, biases vanish, and every feature sits on its class vertex scaled to the
constraint set: h_i = C/(C-1) w_{y_i}.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np

from .flow import FlowConfig, FlowTrace, _fmt, run_flow
from .models import ClassificationDataset, NormalizedLastLayer

NC_CSV_HEADER = "step,scatter,norm_dev,dist_spread,center,bias,duality_gap,agreement"

_CONSTRUCTION_TOL = 1e-10


@dataclasses.dataclass(frozen=True)
class NCMetrics:
    within_class_scatter: float
    norm_deviation: float
    pairwise_distance_spread: float
    center_norm: float
    bias_norm: float
    duality_gap: float
    nearest_class_agreement: float


def nc_closed_form(C: int, d: int):
    """Explicit optimum of the normalized-feature problem: (W, b, H_class).

    W rows are the scaled simplex vertices sqrt((C-1)/C) (e_c - 1/C) padded
    with zero columns to width d, b is zero, and H_class row c is the class-c
    feature C/(C-1) w_c. Requires d >= C so the simplex plus the zero-row-sum
    constraint fit.
    """
    if C < 2:
        raise ValueError("need at least two classes")
    if d < C:
        raise ValueError(f"need d >= C to embed the simplex (got d={d}, C={C})")
    scale = math.sqrt((C - 1) / C)
    W = np.zeros((C, d))
    W[:, :C] = scale * (np.eye(C) - 1.0 / C)
    b = np.zeros(C)
    H = (C / (C - 1)) * W
    res = closed_form_residuals(W, b, H)
    worst = max(res.values())
    if worst > _CONSTRUCTION_TOL:
        bad = max(res, key=res.get)
        raise RuntimeError(f"constructed optimum violates {bad} by {worst:.3e}")
    return W, b, H


def closed_form_residuals(W, b, H_class) -> dict[str, float]:
    """Deviations of (W, b, H_class) from every defining optimum condition."""
    W = np.asarray(W, dtype=float)
    b = np.asarray(b, dtype=float)
    H = np.asarray(H_class, dtype=float)
    C = W.shape[0]
    kappa = (C - 1) / C
    scores = H @ W.T + b
    gaps = scores[np.arange(C), np.arange(C)][:, None] - scores
    off = ~np.eye(C, dtype=bool)
    pair_sq = [
        float(np.sum((W[c] - W[cc]) ** 2)) for c in range(C) for cc in range(c + 1, C)
    ]
    return {
        "weight_norm": float(np.max(np.abs(np.linalg.norm(W, axis=1) - kappa))),
        "weight_sum": float(np.linalg.norm(W.sum(axis=0))),
        "row_sum": float(np.max(np.abs(W.sum(axis=1)))),
        "bias": float(np.max(np.abs(b), initial=0.0)),
        "feature_match": float(np.max(np.abs(H - (C / (C - 1)) * W))),
        "feature_center": float(np.max(np.abs(H.sum(axis=1)))),
        "feature_norm": float(np.max(np.abs(np.linalg.norm(H, axis=1) - 1.0))),
        "pairwise_distance": float(np.max(np.abs(np.array(pair_sq) - 2.0 * kappa))),
        "margin": float(np.max(np.abs(gaps[off] - 1.0))),
        "objective": abs(nc_objective(W, b) - (C - 1) ** 2 / C),
    }


def nc_objective(W, b) -> float:
    """Squared head size ||W||_F^2 + ||b||^2 (the features carry no weight)."""
    W = np.asarray(W, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.sum(W * W) + np.sum(b * b))


def _score_gaps(W, b, features, labels) -> np.ndarray:
    scores = features @ W.T + b
    own = scores[np.arange(len(labels)), labels]
    rival = np.where(
        np.arange(W.shape[0])[None, :] == labels[:, None], -np.inf, scores
    ).max(axis=1)
    return own - rival


def rescale_to_unit_margin(W, b, features, labels):
    """Divide (W, b) by the smallest score gap so the rescaled point has
    minimum margin exactly 1. Features are scale-free and stay put."""
    W = np.asarray(W, dtype=float)
    b = np.asarray(b, dtype=float)
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    qmin = float(_score_gaps(W, b, features, labels).min())
    if qmin <= 0.0:
        raise ValueError(f"not separating: the minimum score gap is {qmin:.3e}")
    return W / qmin, b / qmin


def nc_metrics(w, b, features, labels, C: int) -> NCMetrics:
    """Collapse diagnostics for a head (w, b) and per-sample features.

    Scatter, spread and the duality gap measure how far the point is from a
    tight simplex geometry; nearest_class_agreement is the fraction of the
    given features whose argmax score class equals their nearest-mean class.
    """
    W = np.asarray(w, dtype=float)
    b = np.asarray(b, dtype=float)
    H = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if W.ndim != 2 or W.shape[0] != C:
        raise ValueError(f"expected a {C}-row weight matrix, got shape {W.shape}")
    if b.shape != (C,):
        raise ValueError(f"expected {C} biases, got shape {b.shape}")
    if H.ndim != 2 or H.shape[1] != W.shape[1] or H.shape[0] != labels.size:
        raise ValueError("features must be one row per label, matching the head width")
    counts = np.bincount(labels, minlength=C)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise ValueError("labels must lie in [0, C)")
    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        raise ValueError(f"class {int(empty[0])} has no samples")

    scatter = 0.0
    means = np.zeros((C, W.shape[1]))
    for c in range(C):
        rows = H[labels == c]
        means[c] = rows.mean(axis=0)
        if len(rows) > 1:
            gaps = np.linalg.norm(rows[:, None, :] - rows[None, :, :], axis=2)
            scatter = max(scatter, float(gaps.max()))

    kappa = (C - 1) / C
    norms = np.linalg.norm(W, axis=1)
    nmax, nmin = float(norms.max()), float(norms.min())
    # best common scale s for max_c |n_c - kappa s| / s sits where the
    # extremes balance: s = (nmax + nmin) / (2 kappa)
    norm_dev = kappa if nmax + nmin == 0.0 else kappa * (nmax - nmin) / (nmax + nmin)

    dists = np.array(
        [np.linalg.norm(W[c] - W[cc]) for c in range(C) for cc in range(c + 1, C)]
    )
    mean_dist = float(dists.mean())
    spread = 0.0 if mean_dist == 0.0 else float((dists.max() - dists.min()) / mean_dist)

    mean_norms = np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1e-300)
    w_norms = np.maximum(norms[:, None], 1e-300)
    gap = float(np.linalg.norm(means / mean_norms - W / w_norms, axis=1).max())

    scores = H @ W.T + b
    to_means = np.linalg.norm(H[:, None, :] - means[None, :, :], axis=2)
    agree = float(np.mean(scores.argmax(axis=1) == to_means.argmin(axis=1)))

    return NCMetrics(
        within_class_scatter=scatter,
        norm_deviation=float(norm_dev),
        pairwise_distance_spread=spread,
        center_norm=float(np.linalg.norm(W.sum(axis=0))),
        bias_norm=float(np.linalg.norm(b)),
        duality_gap=gap,
        nearest_class_agreement=agree,
    )


def nc_suboptimal(w, b, features, labels, C, threshold: float = 1e-2) -> bool:
    """Whether the point misses the collapse geometry at the given tolerance
    (relative for center and bias, which grow with the head scale)."""
    m = nc_metrics(w, b, features, labels, C)
    scale = float(np.linalg.norm(np.asarray(w, dtype=float), axis=1).mean())
    if scale == 0.0:
        return True
    return not (
        m.within_class_scatter <= threshold
        and m.norm_deviation <= threshold
        and m.pairwise_distance_spread <= threshold
        and m.center_norm / scale <= threshold
        and m.bias_norm / scale <= threshold
        and m.nearest_class_agreement == 1.0
    )


def run_nc_flow(labels, C: int, d: int, config: FlowConfig):
    """Cross-entropy flow over (W, b, features) with features snapped back to
    the centered unit sphere after every step. Returns the trace plus the
    collapse metrics at each recorded point."""
    labels = np.asarray(labels, dtype=int)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a non-empty vector")
    if d < C:
        raise ValueError(f"need d >= C for the simplex optimum to fit (got d={d})")
    if config.loss_kind != "cross_entropy":
        raise ValueError("this experiment runs on cross_entropy loss only")
    missing = sorted(set(range(C)) - set(int(v) for v in labels))
    if missing:
        raise ValueError(f"class {missing[0]} has no samples")
    n = labels.size
    model = NormalizedLastLayer(n_classes=C, feature_dim=d, n_samples=n)
    dataset = ClassificationDataset(
        inputs=np.arange(n)[:, None], labels=labels, n_classes=C
    )

    def project(theta):
        out = theta.copy()
        out[model.layout["features"]] = model.projected_features(theta).ravel()
        return out

    trace = run_flow(model, dataset, config, project=project)
    metrics = []
    for rec in trace.records:
        W = rec.theta[model.layout["class_weights"]].reshape(C, d)
        b = rec.theta[model.layout["class_biases"]]
        H = rec.theta[model.layout["features"]].reshape(n, d)
        metrics.append(nc_metrics(W, b, H, labels, C))
    return trace, metrics


def nc_to_csv(trace: FlowTrace, metrics, path):
    lines = [NC_CSV_HEADER]
    for rec, m in zip(trace.records, metrics, strict=True):
        lines.append(
            ",".join(
                [
                    str(rec.step),
                    _fmt(m.within_class_scatter),
                    _fmt(m.norm_deviation),
                    _fmt(m.pairwise_distance_spread),
                    _fmt(m.center_norm),
                    _fmt(m.bias_norm),
                    _fmt(m.duality_gap),
                    _fmt(m.nearest_class_agreement),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")
