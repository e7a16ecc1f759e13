"""Geometry of the diagonal scaling map psi_alpha(theta) = e^{alpha*Lambda} theta.

Provides the weighted seminorms it preserves up to scale, the normalization
onto the unit seminorm ellipsoid (a monotone one-dimensional root-find), and
the alignment quantities beta (cosine to the radial tangent Lambda*theta) and
nu (the seminorm growth rate <velocity, Lambda*theta>).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .models import LambdaSpec, ParamVec

_BISECT_REL_WIDTH = 1e-15
_MAX_BISECT_ITERS = 400


@dataclasses.dataclass(frozen=True)
class NormalizedPoint:
    """theta_hat on the unit seminorm ellipsoid plus the log-scale tau that
    maps it back: psi_tau(theta_hat) = theta."""

    theta_hat: ParamVec
    tau: float


def _vals(lspec: LambdaSpec, theta) -> np.ndarray:
    vals = theta.values if isinstance(theta, ParamVec) else np.asarray(theta, dtype=float)
    if vals.shape != (lspec.size,):
        raise ValueError(
            f"theta has {vals.size} coordinates but the rate vector has {lspec.size}"
        )
    return vals


def psi(lspec: LambdaSpec, theta, alpha: float) -> ParamVec:
    """Elementwise e^{alpha*lambda_i} theta_i."""
    vals = _vals(lspec, theta)
    layout = theta.layout if isinstance(theta, ParamVec) else None
    if alpha == 0.0:
        return ParamVec(vals, layout=layout)
    return ParamVec(np.exp(alpha * lspec.lambdas) * vals, layout=layout)


def seminorm_sq(lspec: LambdaSpec, theta) -> float:
    """Sum of lambda_i * theta_i^2."""
    vals = _vals(lspec, theta)
    return float(np.sum(lspec.lambdas * vals * vals))


def seminorm_max_sq(lspec: LambdaSpec, theta) -> float:
    """Seminorm mass restricted to the top-rate coordinates."""
    vals = _vals(lspec, theta)[lspec.max_index_set]
    return float(lspec.lambda_max * np.sum(vals * vals))


def _logsumexp(a: np.ndarray) -> float:
    m = float(np.max(a))
    if not math.isfinite(m):
        return m
    return m + math.log(float(np.sum(np.exp(a - m))))


def normalize(lspec: LambdaSpec, theta) -> NormalizedPoint:
    """Solve sum_i lambda_i theta_i^2 z^{lambda_i} = 1 for the unique z > 0 and
    return theta_hat = psi_{-tau}(theta) with tau = -log(z)/2.

    The residual is strictly increasing in z, so a bracket plus bisection is
    guaranteed. Work happens in u = log z so coordinates as large as 1e200
    neither overflow nor lose the root.
    """
    vals = _vals(lspec, theta)
    layout = theta.layout if isinstance(theta, ParamVec) else None
    lam = lspec.lambdas
    active = (lam > 0) & (vals != 0.0)
    if not np.any(active):
        raise ValueError("degenerate point: no positive-rate coordinate is nonzero")
    lam_a = lam[active]
    # log(lambda_i * theta_i^2) stays finite where lambda_i theta_i^2 would not
    log_terms = np.log(lam_a) + 2.0 * np.log(np.abs(vals[active]))

    def g(u: float) -> float:
        return _logsumexp(log_terms + lam_a * u)

    lo = hi = 0.0
    g0 = g(0.0)
    if g0 > 0.0:
        step = 1.0
        while g(lo - step) > 0.0:
            lo -= step
            step *= 2.0
            if step > 1e9:
                raise ArithmeticError("failed to bracket the normalization root")
        hi, lo = lo, lo - step
    elif g0 < 0.0:
        step = 1.0
        while g(hi + step) < 0.0:
            hi += step
            step *= 2.0
            if step > 1e9:
                raise ArithmeticError("failed to bracket the normalization root")
        lo, hi = hi, hi + step
    for _ in range(_MAX_BISECT_ITERS):
        if hi - lo <= _BISECT_REL_WIDTH * max(1.0, abs(lo), abs(hi)):
            break
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if g(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    u = 0.5 * (lo + hi)
    tau = -0.5 * u
    # scale in log space: e^{u*lam/2} alone may overflow even though the
    # product with theta is bounded on the unit ellipsoid
    theta_hat = np.where(lam > 0, 0.0, vals)
    nz = active
    theta_hat[nz] = np.sign(vals[nz]) * np.exp(
        0.5 * u * lam_a + np.log(np.abs(vals[nz]))
    )
    return NormalizedPoint(ParamVec(theta_hat, layout=layout), tau)


def alignment(lspec: LambdaSpec, theta, velocity) -> tuple[float, float]:
    """(beta, nu): cosine of velocity against Lambda*theta, and their inner
    product. beta is NaN when either vector vanishes; nu is always defined."""
    vals = _vals(lspec, theta)
    vel = _vals(lspec, velocity)
    tangent = lspec.lambdas * vals
    nu = float(tangent @ vel)
    tangent_norm = float(np.linalg.norm(tangent))
    vel_norm = float(np.linalg.norm(vel))
    if tangent_norm == 0.0 or vel_norm == 0.0:
        return math.nan, nu
    beta = nu / (tangent_norm * vel_norm)
    return max(-1.0, min(1.0, beta)), nu
