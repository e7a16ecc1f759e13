"""Approximate-KKT certificates for the asymmetric max-margin problem, plus an
independent first-order reference solver for linear models.

The reference problem (P) is: minimize 0.5 * ||theta||^2 over the top-rate
coordinates subject to y_i f(x_i; theta) >= 1. A flow point theta with
positive minimum margin q_min is rescaled to psi_alpha(theta) with
alpha = -log(q_min), which is primal feasible by construction; the certificate
then reports the bound pair (epsilon, delta) together with directly measured
stationarity and complementarity residuals, which the bounds must dominate.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .flow import _smooth_margin_from_log
from .geometry import alignment, psi, seminorm_sq
from .models import ParamVec

_FEASIBILITY_TOL = 1e-9
_SOLVER_KKT_TOL = 1e-6


@dataclasses.dataclass
class KKTReport:
    rescaled_point: ParamVec
    epsilon: float
    delta: float
    multipliers: np.ndarray
    stationarity_residual: float
    complementarity_value: float
    primal_feasible: bool

    def to_dict(self) -> dict:
        return {
            "rescaled_point": [float(v) for v in self.rescaled_point.values],
            "epsilon": self.epsilon,
            "delta": self.delta,
            "multipliers": [float(m) for m in self.multipliers],
            "stationarity_residual": self.stationarity_residual,
            "complementarity_value": self.complementarity_value,
            "primal_feasible": self.primal_feasible,
        }

    def summary_line(self) -> str:
        return (
            f"eps={self.epsilon:.6e} delta={self.delta:.6e} "
            f"stat={self.stationarity_residual:.6e} "
            f"comp={self.complementarity_value:.6e} "
            f"feasible={'yes' if self.primal_feasible else 'no'}"
        )


def _as_values(x) -> np.ndarray:
    return x.values if isinstance(x, ParamVec) else np.asarray(x, dtype=float)


def kkt_certificate(model, theta, velocity, dataset, lspec) -> KKTReport:
    """Certificate at psi_alpha(theta), alpha = -log q_min, for a binary model
    under the exponential loss. velocity is the negated loss gradient at theta."""
    if dataset.n_classes is not None or model.output_dim != 1:
        raise ValueError("the certificate is defined for binary models under exp loss")
    vals = _as_values(theta)
    vel = _as_values(velocity)
    n = dataset.n
    q = dataset.labels * model.batch_forward(vals, dataset.inputs)
    qmin = float(np.min(q))
    if qmin <= 0.0:
        raise ValueError("not yet separating: the minimum margin is not positive")
    neg_max = float(np.max(-q))
    log_loss = neg_max + math.log(float(np.sum(np.exp(-q - neg_max)))) - math.log(n)
    if log_loss >= -math.log(n):
        raise ValueError("not yet separating: loss is still above 1/n")
    vel_norm = float(np.linalg.norm(vel))
    if vel_norm == 0.0:
        raise ValueError("stationary point: zero velocity gives no multipliers")

    lam = lspec.lambdas
    lam_max = lspec.lambda_max
    beta, _ = alignment(lspec, vals, vel)
    s_sq = seminorm_sq(lspec, vals)
    denom = math.exp(0.5 * math.log(s_sq) / lam_max)
    gamma_tilde = _smooth_margin_from_log(lspec, denom, log_loss, n, "exponential")
    log_qmin = math.log(qmin)

    in_max = np.zeros(lam.size, dtype=bool)
    in_max[lspec.max_index_set] = True
    if np.all(in_max):
        mixed_term = 0.0
    else:
        mixed_term = lam.size * float(
            np.max(np.exp(2.0 * (lam[~in_max] - lam_max) * log_qmin))
        )
    gap = max(2.0 * (1.0 - beta), 0.0)
    epsilon = (
        math.sqrt(lam_max)
        * math.exp(-lam_max * math.log(gamma_tilde))
        * math.sqrt(gap + mixed_term)
    )
    log_inv_nl = -(log_loss + math.log(n))
    delta = n * lam_max * math.exp(-2.0 * lam_max * math.log(gamma_tilde)) / (
        math.e * log_inv_nl
    )

    # mu_i = c^{-1} q_min^{1-2*lam_max} e^{-q_i} / n with c = ||velocity|| / ||Lambda theta||
    tangent_norm = float(np.linalg.norm(lam * vals))
    log_mu = (
        math.log(tangent_norm)
        - math.log(vel_norm)
        + (1.0 - 2.0 * lam_max) * log_qmin
        - q
        - math.log(n)
    )
    mu = np.exp(log_mu)

    phi = psi(lspec, vals, -log_qmin)
    margins_phi = dataset.labels * model.batch_forward(phi.values, dataset.inputs)
    primal_feasible = bool(np.min(margins_phi) >= 1.0 - _FEASIBILITY_TOL)
    combo = model.weighted_gradient_sum(phi.values, dataset.inputs, mu * dataset.labels)
    objective_grad = np.where(in_max, lam_max * phi.values, 0.0)
    stationarity = float(np.linalg.norm(objective_grad - combo))
    complementarity = float(mu @ (margins_phi - 1.0))
    return KKTReport(
        rescaled_point=phi,
        epsilon=float(epsilon),
        delta=float(delta),
        multipliers=mu,
        stationarity_residual=stationarity,
        complementarity_value=complementarity,
        primal_feasible=primal_feasible,
    )


@dataclasses.dataclass
class SupportInfo:
    indices: np.ndarray
    multipliers: np.ndarray
    margins: np.ndarray
    iterations: int


def _active_set_polish(X, y, p, active, max_iters=100):
    n, d = X.shape
    A = sorted(active)
    best = None
    for iteration in range(max_iters):
        k = len(A)
        rows = y[A, None] * X[A]
        system = np.zeros((d + k, d + k))
        system[:d, :d] = np.diag(p)
        system[:d, d:] = -rows.T
        system[d:, :d] = rows
        rhs = np.zeros(d + k)
        rhs[d:] = 1.0
        solution = np.linalg.lstsq(system, rhs, rcond=None)[0]
        w, mu_active = solution[:d], solution[d:]
        margins = y * (X @ w)
        best = (w, A, mu_active, margins, iteration + 1)
        worst = int(np.argmin(margins))
        if margins[worst] < 1.0 - 1e-10 and worst not in A:
            A = sorted(A + [worst])
            continue
        if k and np.min(mu_active) < -1e-10:
            A = [a for i, a in enumerate(A) if i != int(np.argmin(mu_active))]
            continue
        break
    return best


def solve_max_margin_linear(dataset, P_weights):
    """Minimize 0.5 * sum_i p_i w_i^2 subject to y_i <w, x_i> >= 1.

    Two phases: a squared-hinge relaxation driven to feasibility, then an
    active-set polish solving the equality-constrained KKT system exactly.
    The result is verified against first-order optimality before returning.
    """
    X = dataset.inputs
    y = dataset.labels.astype(float)
    n, d = X.shape
    p = np.asarray(P_weights, dtype=float)
    if p.shape != (d,) or np.any(p < 0):
        raise ValueError("P_weights must be a non-negative vector of length d")

    spectral_sq = float(np.linalg.norm(X, 2)) ** 2
    w = np.zeros(d)
    best_margin = -math.inf
    for penalty in (10.0, 1e3, 1e5):
        lr = 1.0 / (max(float(np.max(p)), 1e-12) + 2.0 * penalty * spectral_sq)
        for _ in range(4000):
            margins = y * (X @ w)
            violation = np.maximum(1.0 - margins, 0.0)
            grad = p * w - 2.0 * penalty * (violation * y) @ X
            w = w - lr * grad
        best_margin = max(best_margin, float(np.min(y * (X @ w))))
    min_margin = float(np.min(y * (X @ w)))
    if min_margin <= 1e-12:
        raise RuntimeError(
            f"no separating hyperplane found (best margin achieved: {best_margin:g})"
        )
    w = w / min_margin
    margins = y * (X @ w)
    active = [int(i) for i in np.flatnonzero(margins <= 1.0 + 1e-4)]
    if not active:
        active = [int(np.argmin(margins))]
    w, A, mu_active, margins, iterations = _active_set_polish(X, y, p, active)

    mu = np.zeros(n)
    mu[A] = np.maximum(mu_active, 0.0)
    stationarity = float(np.linalg.norm(p * w - (mu * y) @ X))
    slack = float(np.max(np.abs(mu * (margins - 1.0)))) if n else 0.0
    feasible = float(np.min(margins)) >= 1.0 - _FEASIBILITY_TOL
    if not feasible:
        raise RuntimeError(
            f"no separating hyperplane found (best margin achieved: {float(np.min(margins)):g})"
        )
    if stationarity > _SOLVER_KKT_TOL or slack > _SOLVER_KKT_TOL:
        raise RuntimeError(
            "solver could not certify optimality: "
            f"stationarity={stationarity:g}, slack={slack:g}"
        )
    info = SupportInfo(
        indices=np.array(sorted(A), dtype=int),
        multipliers=mu,
        margins=margins,
        iterations=iterations,
    )
    return w, None, info
