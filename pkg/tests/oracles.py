"""Independent oracles and frozen expected values used across the test suite.

Everything here is deliberately implemented without importing the package
under test, so that library results are checked against a second route:
finite differences for gradients, plain bisection in z for the normalizing
root, direct formula evaluation for closed forms.
"""

import numpy as np

# ---------------------------------------------------------------------------
# Frozen constants (derived by hand / high-precision evaluation, 30 digits).

# Root of 4z + 2*sqrt(z) = 1 for lambdas=(1, 0.5), theta=(2, 2).
NORMALIZE_EXAMPLE = {
    "sqrt_z": 0.30901699437494742,
    "tau": 1.1743590056195488,
    "theta_hat": (0.6180339887498949, 1.1117859405028423),
}

# Exponential loss of theta=(1,0) on {((2,0),+1), ((-1,0),-1)}: (e^-2 + e^-1)/2.
EXP_LOSS_EXAMPLE = 0.25160736220402751
# Smoothed normalized margin at that point (n=2, seminorm 1): -log(2L).
SMOOTH_MARGIN_EXAMPLE = 0.68673831248177717

# Multiclass margin for logits (3,1,1), label 0: -log(2 e^-2) = 2 - log 2.
MULTICLASS_MARGIN_EXAMPLE = 1.3068528194400547

# Two-ball closed forms for the default direction mu ~ [0.8660254, 0.4330127, 0.25]
# (normalized), m=1 so rho_mu = 0.5000000004096775 (checked against exact
# rational arithmetic on the float literals: 0.50000000040967750911...).
TWOBALL_RHO = 0.5000000004096775
TWOBALL_L_QH_AT_075 = 0.22883055764806262
TWOBALL_W_QH_AT_075 = (0.7453559920113609, 0.5773502690319409, 0.33333333469892507)
# |w1-unit| / l_qh at r=0.9 over the same quantity at r=0.52 (the asymptotic
# magnitude ratio a flow endpoint inherits when both runs stop at one loss level).
TWOBALL_CRIT3_RATIO = 6.144725204787082


# ---------------------------------------------------------------------------
# Gradient oracle: central finite differences on a black-box forward map.

def finite_diff_gradient(f, theta, eps=1e-6):
    """Central-difference gradient of scalar f at theta (1-D array)."""
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        step = eps * max(1.0, abs(theta[i]))
        up = theta.copy()
        dn = theta.copy()
        up[i] += step
        dn[i] -= step
        g[i] = (f(up) - f(dn)) / (2 * step)
    return g


# ---------------------------------------------------------------------------
# Normalization oracle: bisection directly in z on g(z) = sum l_i t_i^2 z^l_i - 1.
# The library is required to root-find in log z; this one works in z so the two
# implementations share no code path.

def bisect_normalizer_z(lambdas, theta, tol=1e-15, max_iter=500):
    lambdas = np.asarray(lambdas, dtype=float)
    theta = np.asarray(theta, dtype=float)
    coef = lambdas * theta**2
    if not np.any(coef > 0):
        raise ValueError("degenerate point")

    def g(z):
        return float(np.sum(coef * z**lambdas) - 1.0)

    lo, hi = 1.0, 1.0
    while g(lo) > 0:
        lo /= 2.0
        if lo < 1e-300:
            break
    while g(hi) < 0:
        hi *= 2.0
        if hi > 1e300:
            break
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= tol * max(abs(mid), 1e-300):
            break
    z = 0.5 * (lo + hi)
    tau = -0.5 * np.log(z)
    return z, tau


# ---------------------------------------------------------------------------
# Two-ball closed forms, straight from the formulas (independent evaluation).

def twoball_analytic(mu, m, r):
    """Return (w_hom, l_hom, w_qh, l_qh); the qh pair is None when r <= rho."""
    mu = np.asarray(mu, dtype=float)
    rho = float(np.linalg.norm(mu[m:]))
    w_hom = mu / np.linalg.norm(mu)
    l_hom = 1.0 - r
    if r <= rho:
        return w_hom, l_hom, None, None
    a = np.sqrt((1 - rho**2 / r**2) / (1 - rho**2))
    w = np.concatenate([a * mu[:m], mu[m:] / r])
    w = w / np.linalg.norm(w)
    l_qh = np.sqrt(1 - rho**2 / r**2) * (np.sqrt(1 - rho**2) - np.sqrt(r**2 - rho**2))
    return w_hom, l_hom, w, float(l_qh)


# ---------------------------------------------------------------------------
# Stable reference helpers.

def ref_logsumexp(v):
    v = np.asarray(v, dtype=float)
    m = np.max(v)
    return float(m + np.log(np.sum(np.exp(v - m))))


def exp_loss_reference(margins, n=None):
    """(1/n) sum e^{-q_i} evaluated in log space; returns (loss, log_loss)."""
    q = np.asarray(margins, dtype=float)
    n = q.size if n is None else n
    log_loss = ref_logsumexp(-q) - np.log(n)
    return float(np.exp(log_loss)), float(log_loss)


def simplex_weights(C, d):
    """Reference construction w_c = sqrt((C-1)/C) (e_c - 1/C) padded to width d."""
    s = np.sqrt((C - 1) / C)
    W = s * (np.eye(C) - np.ones((C, C)) / C)
    out = np.zeros((C, d))
    out[:, :C] = W
    return out
