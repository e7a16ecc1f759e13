"""Two-ball linear classification: closed-form optima, sampling, radius sweeps.

Data lives in two balls B(mu, r) and B(-mu, r) with ||mu|| = 1. A homogeneous
linear model converges toward the max-margin direction mu; a quasi-homogeneous
diagonal model minimizes only the top-rate head coordinates and tilts toward
the tail projection of mu, trading robustness for cheap coordinates. Both
optima and their robustness l(w) = <w, mu>/||w|| - r have closed forms, valid
for the quasi branch when r exceeds rho_mu = ||tail of mu||.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import math
from pathlib import Path

import numpy as np

from .flow import FlowConfig, _fmt, run_flow
from .models import ClassificationDataset, LinearHomogeneous, UnbalancedDiagonal

SWEEP_CSV_HEADER = (
    "r,model,w1,w2,w3,robustness,robustness_analytic_hom,"
    "robustness_analytic_qh,conjecture,flow_ok"
)

_DEFAULT_MU = np.array([0.8660254, 0.4330127, 0.25])


@dataclasses.dataclass(frozen=True)
class BallProblem:
    mu: np.ndarray
    r: float
    m: int
    samples_per_ball: int = 512
    surface_only: bool = True
    rho_mu: float | None = None

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        if mu.ndim != 1 or mu.size < 2:
            raise ValueError("mu must be a vector with at least two coordinates")
        if abs(np.linalg.norm(mu) - 1.0) > 1e-12:
            raise ValueError("mu must be a unit vector")
        if not 0.0 < self.r < 1.0:
            raise ValueError("radius must lie strictly between 0 and 1")
        if not 1 <= self.m <= mu.size:
            raise ValueError("m must select between 1 and d head coordinates")
        if self.samples_per_ball < 1:
            raise ValueError("samples_per_ball must be positive")
        rho = float(np.linalg.norm(mu[self.m :]))
        if self.rho_mu is not None and abs(self.rho_mu - rho) > 1e-12:
            raise ValueError(f"stored rho_mu {self.rho_mu} disagrees with computed {rho}")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "rho_mu", rho)

    @property
    def d(self) -> int:
        return self.mu.size


def default_problem(r, samples_per_ball=512, surface_only=True, m=1) -> BallProblem:
    mu = _DEFAULT_MU / np.linalg.norm(_DEFAULT_MU)
    return BallProblem(
        mu=mu, r=r, m=m, samples_per_ball=samples_per_ball, surface_only=surface_only
    )


def analytic_solution(problem: BallProblem):
    """Closed-form optima: (w_hom, w_quasi_hom, l_hom, l_quasi_hom).

    The quasi entries are None when r <= rho_mu (conditional separability is
    violated and the quasi problem has no bounded-margin solution of this form).
    """
    mu, r, m, rho = problem.mu, problem.r, problem.m, problem.rho_mu
    w_hom = mu.copy()
    l_hom = 1.0 - r
    if r <= rho:
        return w_hom, None, l_hom, None
    head_scale = math.sqrt((1.0 - (rho / r) ** 2) / (1.0 - rho**2))
    w_qh = np.concatenate([head_scale * mu[:m], mu[m:] / r])
    w_qh = w_qh / np.linalg.norm(w_qh)
    l_qh = math.sqrt(1.0 - (rho / r) ** 2) * (
        math.sqrt(1.0 - rho**2) - math.sqrt(r**2 - rho**2)
    )
    return w_hom, w_qh, l_hom, l_qh


def sample_balls(problem: BallProblem, seed) -> ClassificationDataset:
    """Draw samples_per_ball points from each ball: label +1 around +mu,
    -1 around -mu. Surface mode puts every point at distance exactly r."""
    rng = np.random.default_rng(seed)
    k, d, r = problem.samples_per_ball, problem.d, problem.r

    def draw():
        u = rng.normal(size=(k, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        if problem.surface_only:
            return r * u
        radii = r * rng.random(size=(k, 1)) ** (1.0 / d)
        return radii * u

    inputs = np.vstack([problem.mu + draw(), -problem.mu + draw()])
    labels = np.concatenate([np.ones(k, dtype=int), -np.ones(k, dtype=int)])
    return ClassificationDataset(inputs=inputs, labels=labels)


def robustness(w, problem: BallProblem) -> float:
    """Signed distance from the decision boundary of w to the ball surfaces:
    <w, mu>/||w|| - r. Negative when the boundary cuts into a ball."""
    w = np.asarray(w, dtype=float)
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise ValueError("zero vector has no decision boundary")
    return float(w @ problem.mu) / norm - problem.r


@dataclasses.dataclass
class SweepRow:
    r: float
    model: str
    w: np.ndarray
    robustness: float
    robustness_analytic_hom: float
    robustness_analytic_qh: float | None
    conjecture: bool
    flow_ok: bool


def _sweep_point(args) -> SweepRow:
    problem, r, index, model_kind, config, depths = args
    prob_r = dataclasses.replace(problem, r=float(r))
    seed = config.seed + index
    data = sample_balls(prob_r, seed)
    cfg = dataclasses.replace(config, seed=seed)
    if model_kind == "hom":
        model = LinearHomogeneous(prob_r.d)
    else:
        model = UnbalancedDiagonal(depths)
    trace = run_flow(model, data, cfg)
    ok = trace.error is None
    if ok:
        vals = trace.final_theta.values
        w_signed = vals if model_kind == "hom" else model.coefficients(vals)
        if np.linalg.norm(w_signed) > 0:
            rob = robustness(w_signed, prob_r)
        else:
            rob, ok = math.nan, False
    if not ok:
        w_signed = np.full(prob_r.d, math.nan)
        rob = math.nan
    _, _, l_hom, l_qh = analytic_solution(prob_r)
    return SweepRow(
        r=float(r),
        model=model_kind,
        w=np.abs(w_signed),
        robustness=rob,
        robustness_analytic_hom=l_hom,
        robustness_analytic_qh=l_qh,
        conjecture=model_kind == "quasi_hom" and float(r) <= prob_r.rho_mu,
        flow_ok=ok,
    )


def radius_sweep(
    problem: BallProblem,
    radii,
    model_kind: str,
    config: FlowConfig,
    depths=None,
    jobs: int = 1,
) -> list[SweepRow]:
    """Run the flow once per radius and compare against the closed forms.

    Each point samples and integrates with seed = config.seed + index, so the
    sweep is deterministic and points are independent; jobs > 1 runs them in
    parallel, preserving radius order. Flow failures flag the row and the
    sweep continues.
    """
    if model_kind not in ("hom", "quasi_hom"):
        raise ValueError("model_kind must be 'hom' or 'quasi_hom'")
    if model_kind == "quasi_hom":
        if depths is None or len(depths) != problem.d:
            raise ValueError("quasi_hom needs one factor depth per coordinate")
        depths = tuple(int(v) for v in depths)
    args = [
        (problem, float(r), i, model_kind, config, depths) for i, r in enumerate(radii)
    ]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_point, args))
    return [_sweep_point(a) for a in args]


def sweep_to_csv(rows, path):
    lines = [SWEEP_CSV_HEADER]
    for row in rows:
        if row.w.size != 3:
            raise ValueError("the sweep CSV layout is fixed to three coordinates")
        lines.append(
            ",".join(
                [
                    _fmt(row.r),
                    row.model,
                    _fmt(row.w[0]),
                    _fmt(row.w[1]),
                    _fmt(row.w[2]),
                    _fmt(row.robustness),
                    _fmt(row.robustness_analytic_hom),
                    "" if row.robustness_analytic_qh is None else _fmt(row.robustness_analytic_qh),
                    "true" if row.conjecture else "false",
                    "true" if row.flow_ok else "false",
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")
