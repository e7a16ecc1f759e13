"""Quasi-homogeneous classifier family.

A model here is a classifier f(x; theta) whose output rescales as
f(x; e^{alpha*Lambda} theta) = e^alpha f(x; theta) for a diagonal matrix of
non-negative per-parameter rates Lambda. Each built-in model ships its rate
assignment (a LambdaSpec), a forward map, a hand-written (sub)gradient, and
vectorized batch variants used by the flow engine. A numeric verifier checks
the scaling law and the Euler identity <grad f, Lambda theta> = f on samples.
"""

from __future__ import annotations

import dataclasses
import importlib.resources
import json

import numpy as np

_RATE_TIE_RTOL = 1e-12
_KINK_GAP = 1e-9
_FEATURE_NORM_FLOOR = 1e-300


class DimensionError(ValueError):
    """A parameter segment or input vector has the wrong length."""


@dataclasses.dataclass(frozen=True, eq=False)
class LambdaSpec:
    """Diagonal scaling rates: one non-negative lambda_i per parameter."""

    lambdas: np.ndarray
    lambda_max: float
    max_index_set: np.ndarray
    positive_index_set: np.ndarray

    @classmethod
    def from_lambdas(cls, lambdas) -> "LambdaSpec":
        lam = np.asarray(lambdas, dtype=float).copy()
        if lam.ndim != 1 or lam.size == 0:
            raise ValueError("lambdas must be a non-empty 1-D vector")
        if np.any(lam < 0):
            raise ValueError("all rates must be non-negative")
        lam_max = float(np.max(lam))
        if lam_max <= 0:
            raise ValueError("at least one rate must be positive")
        max_set = np.flatnonzero(np.isclose(lam, lam_max, rtol=_RATE_TIE_RTOL, atol=0.0))
        pos_set = np.flatnonzero(lam > 0)
        lam.setflags(write=False)
        max_set.setflags(write=False)
        pos_set.setflags(write=False)
        return cls(lam, lam_max, max_set, pos_set)

    @property
    def size(self) -> int:
        return self.lambdas.size


@dataclasses.dataclass(frozen=True, eq=False)
class ParamVec:
    """A flat, immutable parameter vector with an optional named layout."""

    values: np.ndarray
    layout: dict | None = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 1:
            raise ValueError("parameter values must be 1-D")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def segment(self, name: str) -> np.ndarray:
        if not self.layout or name not in self.layout:
            raise KeyError(f"no segment named {name!r}")
        return self.values[self.layout[name]]

    def __len__(self) -> int:
        return self.values.size


@dataclasses.dataclass(frozen=True, eq=False)
class ClassificationDataset:
    """Inputs with binary (+1/-1) or multiclass (0..C-1) labels."""

    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int | None = None

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=float)
        labels = np.array(self.labels)
        if inputs.ndim != 2:
            raise ValueError("inputs must be an n x d matrix")
        if labels.shape != (inputs.shape[0],):
            raise ValueError("labels must be a length-n vector")
        if self.n_classes is None:
            if not np.all(np.isin(labels, (-1, 1))):
                raise ValueError("binary labels must be -1 or +1")
            labels = labels.astype(int)
        else:
            if self.n_classes < 2:
                raise ValueError("n_classes must be at least 2")
            labels = labels.astype(int)
            if labels.min() < 0 or labels.max() >= self.n_classes:
                raise ValueError("multiclass labels must lie in [0, n_classes)")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]


def _theta_values(model, theta) -> np.ndarray:
    vals = theta.values if isinstance(theta, ParamVec) else np.asarray(theta, dtype=float)
    if vals.shape != (model.param_count,):
        raise DimensionError(
            f"parameter vector for {model.kind}: expected {model.param_count} values "
            f"covering segments {list(model.layout)}, got {vals.size}"
        )
    return vals


def _input_values(model, x) -> np.ndarray:
    vals = np.asarray(x, dtype=float)
    if vals.shape != (model.input_dim,):
        raise DimensionError(
            f"input vector for {model.kind}: expected input_dim={model.input_dim}, "
            f"got shape {vals.shape}"
        )
    return vals


class Model:
    """Shared behavior for the built-in classifiers."""

    kind: str = "abstract"

    # Populated by subclasses: input_dim, output_dim, param_count, layout, lambda_spec.

    def forward(self, theta, x):
        raise NotImplementedError

    def gradient(self, theta, x, output_index=None) -> ParamVec:
        raise NotImplementedError

    def batch_forward(self, theta, X) -> np.ndarray:
        raise NotImplementedError

    def weighted_gradient_sum(self, theta, X, coeff) -> np.ndarray:
        raise NotImplementedError

    def is_differentiable_at(self, theta, x) -> bool:
        return True

    def param_vec(self, values) -> ParamVec:
        return ParamVec(_theta_values(self, values), layout=self.layout)

    def init_params(self, rng, kind="gaussian", scale=1.0, values=None) -> np.ndarray:
        if kind == "explicit":
            return _theta_values(self, values)
        if kind == "ones":
            return np.ones(self.param_count)
        if kind == "gaussian":
            return scale * rng.normal(size=self.param_count)
        raise ValueError(f"unknown init kind {kind!r}")


class LinearHomogeneous(Model):
    """f(x; w) = <w, x> with every parameter at rate 1."""

    kind = "linear_homogeneous"

    def __init__(self, input_dim: int):
        if input_dim < 1:
            raise ValueError("input_dim must be positive")
        self.input_dim = int(input_dim)
        self.output_dim = 1
        self.param_count = self.input_dim
        self.layout = {"weights": slice(0, self.param_count)}
        self.lambda_spec = LambdaSpec.from_lambdas(np.ones(self.param_count))

    def forward(self, theta, x):
        w = _theta_values(self, theta)
        return float(w @ _input_values(self, x))

    def gradient(self, theta, x, output_index=None):
        _theta_values(self, theta)
        return ParamVec(_input_values(self, x), layout=self.layout)

    def batch_forward(self, theta, X):
        w = _theta_values(self, theta)
        return np.asarray(X, dtype=float) @ w

    def weighted_gradient_sum(self, theta, X, coeff):
        _theta_values(self, theta)
        return np.asarray(X, dtype=float).T @ np.asarray(coeff, dtype=float)


class UnbalancedDiagonal(Model):
    """f(x; theta) = sum_i (prod_j theta_ij) x_i with depths[i] factors per
    coordinate, each at rate 1/depths[i]."""

    kind = "unbalanced_diagonal"

    def __init__(self, depths):
        depths = tuple(int(d) for d in depths)
        if not depths or any(d < 1 for d in depths):
            raise ValueError("depths must be positive integers")
        self.depths = depths
        self.input_dim = len(depths)
        self.output_dim = 1
        self.param_count = sum(depths)
        starts = np.concatenate([[0], np.cumsum(depths)[:-1]]).astype(int)
        self._starts = starts
        self.layout = {
            f"x{i}_factors": slice(int(s), int(s + d))
            for i, (s, d) in enumerate(zip(starts, depths))
        }
        lam = np.concatenate([np.full(d, 1.0 / d) for d in depths])
        self.lambda_spec = LambdaSpec.from_lambdas(lam)

    def coefficients(self, theta) -> np.ndarray:
        """The collapsed per-coordinate products prod_j theta_ij."""
        vals = _theta_values(self, theta)
        return np.multiply.reduceat(vals, self._starts)

    def _prod_except(self, vals) -> np.ndarray:
        # per-segment leave-one-out products, exact under zeros
        out = np.empty_like(vals)
        for i, d in enumerate(self.depths):
            seg = vals[self._starts[i] : self._starts[i] + d]
            left = np.concatenate([[1.0], np.cumprod(seg[:-1])])
            right = np.concatenate([np.cumprod(seg[::-1][:-1])[::-1], [1.0]])
            out[self._starts[i] : self._starts[i] + d] = left * right
        return out

    def forward(self, theta, x):
        return float(self.coefficients(theta) @ _input_values(self, x))

    def gradient(self, theta, x, output_index=None):
        vals = _theta_values(self, theta)
        x = _input_values(self, x)
        partials = self._prod_except(vals)
        g = partials * np.repeat(x, self.depths)
        return ParamVec(g, layout=self.layout)

    def batch_forward(self, theta, X):
        return np.asarray(X, dtype=float) @ self.coefficients(theta)

    def weighted_gradient_sum(self, theta, X, coeff):
        vals = _theta_values(self, theta)
        weighted_x = np.asarray(X, dtype=float).T @ np.asarray(coeff, dtype=float)
        return self._prod_except(vals) * np.repeat(weighted_x, self.depths)


class TwoLayerReluBias(Model):
    """One hidden ReLU layer with biases and a scalar output bias; the output
    bias sits at rate 1, every other parameter at rate 1/2. The ReLU
    subgradient at 0 is taken to be 0."""

    kind = "two_layer_relu_bias"

    def __init__(self, width: int, input_dim: int):
        if width < 1 or input_dim < 1:
            raise ValueError("width and input_dim must be positive")
        self.width = int(width)
        self.input_dim = int(input_dim)
        self.output_dim = 1
        w, d = self.width, self.input_dim
        self.param_count = w * d + w + w + 1
        self.layout = {
            "hidden_weights": slice(0, w * d),
            "hidden_biases": slice(w * d, w * d + w),
            "output_weights": slice(w * d + w, w * d + 2 * w),
            "output_bias": slice(w * d + 2 * w, w * d + 2 * w + 1),
        }
        lam = np.full(self.param_count, 0.5)
        lam[-1] = 1.0
        self.lambda_spec = LambdaSpec.from_lambdas(lam)

    def _unpack(self, vals):
        w, d = self.width, self.input_dim
        W1 = vals[self.layout["hidden_weights"]].reshape(w, d)
        b1 = vals[self.layout["hidden_biases"]]
        w2 = vals[self.layout["output_weights"]]
        b2 = vals[self.layout["output_bias"]][0]
        return W1, b1, w2, b2

    def forward(self, theta, x):
        W1, b1, w2, b2 = self._unpack(_theta_values(self, theta))
        pre = W1 @ _input_values(self, x) + b1
        return float(w2 @ np.maximum(pre, 0.0) + b2)

    def gradient(self, theta, x, output_index=None):
        vals = _theta_values(self, theta)
        x = _input_values(self, x)
        W1, b1, w2, _ = self._unpack(vals)
        pre = W1 @ x + b1
        active = (pre > 0.0).astype(float)
        g = np.zeros(self.param_count)
        g[self.layout["hidden_weights"]] = np.outer(w2 * active, x).ravel()
        g[self.layout["hidden_biases"]] = w2 * active
        g[self.layout["output_weights"]] = np.maximum(pre, 0.0)
        g[self.layout["output_bias"]] = 1.0
        return ParamVec(g, layout=self.layout)

    def batch_forward(self, theta, X):
        W1, b1, w2, b2 = self._unpack(_theta_values(self, theta))
        act = np.maximum(np.asarray(X, dtype=float) @ W1.T + b1, 0.0)
        return act @ w2 + b2

    def weighted_gradient_sum(self, theta, X, coeff):
        X = np.asarray(X, dtype=float)
        coeff = np.asarray(coeff, dtype=float)
        W1, b1, w2, _ = self._unpack(_theta_values(self, theta))
        pre = X @ W1.T + b1
        act = np.maximum(pre, 0.0)
        mask = (pre > 0.0).astype(float)
        weighted_mask = mask * coeff[:, None]
        g = np.zeros(self.param_count)
        g[self.layout["hidden_weights"]] = (w2[:, None] * (weighted_mask.T @ X)).ravel()
        g[self.layout["hidden_biases"]] = w2 * weighted_mask.sum(axis=0)
        g[self.layout["output_weights"]] = act.T @ coeff
        g[self.layout["output_bias"]] = coeff.sum()
        return g

    def is_differentiable_at(self, theta, x):
        W1, b1, _, _ = self._unpack(_theta_values(self, theta))
        pre = W1 @ _input_values(self, x) + b1
        return bool(np.min(np.abs(pre)) > _KINK_GAP)


class NormalizedLastLayer(Model):
    """C-way affine head over per-sample free feature vectors that are
    centered and normalized before the head. Head weights and biases sit at
    rate 1, the feature parameters at rate 0. Inputs are sample indices."""

    kind = "normalized_last_layer"

    def __init__(self, n_classes: int, feature_dim: int, n_samples: int):
        if n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if feature_dim < 2:
            raise ValueError("feature_dim must be at least 2 to center and normalize")
        if n_samples < 1:
            raise ValueError("n_samples must be positive")
        self.n_classes = int(n_classes)
        self.feature_dim = int(feature_dim)
        self.n_samples = int(n_samples)
        self.input_dim = 1
        self.output_dim = self.n_classes
        C, d, n = self.n_classes, self.feature_dim, self.n_samples
        self.param_count = C * d + C + n * d
        self.layout = {
            "class_weights": slice(0, C * d),
            "class_biases": slice(C * d, C * d + C),
            "features": slice(C * d + C, C * d + C + n * d),
        }
        lam = np.zeros(self.param_count)
        lam[: C * d + C] = 1.0
        self.lambda_spec = LambdaSpec.from_lambdas(lam)

    def _unpack(self, vals):
        C, d, n = self.n_classes, self.feature_dim, self.n_samples
        W = vals[self.layout["class_weights"]].reshape(C, d)
        b = vals[self.layout["class_biases"]]
        H = vals[self.layout["features"]].reshape(n, d)
        return W, b, H

    def _indices(self, x) -> np.ndarray:
        idx = np.asarray(x)
        if idx.ndim == 0:
            idx = idx[None]
        if idx.shape != (1,) and idx.ndim != 1:
            raise DimensionError(f"input for {self.kind}: expected a sample index")
        idx = idx.astype(int)
        if np.any(idx < 0) or np.any(idx >= self.n_samples):
            raise DimensionError(
                f"input for {self.kind}: sample index out of range [0, {self.n_samples})"
            )
        return idx

    def _centered(self, H):
        G = H - H.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(G, axis=1)
        if np.any(norms <= _FEATURE_NORM_FLOOR):
            bad = int(np.argmin(norms))
            raise ValueError(
                f"feature vector {bad} is constant; the centered norm vanishes "
                "and the normalization is undefined"
            )
        return G, norms

    def projected_features(self, theta) -> np.ndarray:
        """Features after centering and unit normalization (rows sum to 0)."""
        _, _, H = self._unpack(_theta_values(self, theta))
        G, norms = self._centered(H)
        return G / norms[:, None]

    def forward(self, theta, x):
        vals = _theta_values(self, theta)
        W, b, H = self._unpack(vals)
        i = int(self._indices(x)[0])
        G, norms = self._centered(H[i : i + 1])
        return W @ (G[0] / norms[0]) + b

    def gradient(self, theta, x, output_index=None):
        if output_index is None:
            raise ValueError("multiclass gradient needs output_index (the class)")
        c = int(output_index)
        if not 0 <= c < self.n_classes:
            raise ValueError(f"output_index must lie in [0, {self.n_classes})")
        vals = _theta_values(self, theta)
        W, b, H = self._unpack(vals)
        i = int(self._indices(x)[0])
        G, norms = self._centered(H[i : i + 1])
        u = G[0] / norms[0]
        g = np.zeros(self.param_count)
        d = self.feature_dim
        w_block = g[self.layout["class_weights"]].reshape(self.n_classes, d)
        w_block[c] = u
        g[self.layout["class_weights"]] = w_block.ravel()
        g[self.layout["class_biases"].start + c] = 1.0
        # chain rule through centering then normalization of h_i
        v = W[c] - u * (u @ W[c])
        v = (v - v.mean()) / norms[0]
        h_block = g[self.layout["features"]].reshape(self.n_samples, d)
        h_block[i] = v
        g[self.layout["features"]] = h_block.ravel()
        return ParamVec(g, layout=self.layout)

    def batch_forward(self, theta, X):
        vals = _theta_values(self, theta)
        W, b, H = self._unpack(vals)
        idx = np.asarray(X).reshape(-1).astype(int)
        G, norms = self._centered(H[idx])
        return (G / norms[:, None]) @ W.T + b

    def weighted_gradient_sum(self, theta, X, coeff):
        vals = _theta_values(self, theta)
        W, b, H = self._unpack(vals)
        idx = np.asarray(X).reshape(-1).astype(int)
        coeff = np.asarray(coeff, dtype=float)
        G, norms = self._centered(H[idx])
        U = G / norms[:, None]
        g = np.zeros(self.param_count)
        g[self.layout["class_weights"]] = (coeff.T @ U).ravel()
        g[self.layout["class_biases"]] = coeff.sum(axis=0)
        V = coeff @ W
        T = (V - U * np.sum(U * V, axis=1, keepdims=True)) / norms[:, None]
        T = T - T.mean(axis=1, keepdims=True)
        h_grad = np.zeros((self.n_samples, self.feature_dim))
        np.add.at(h_grad, idx, T)
        g[self.layout["features"]] = h_grad.ravel()
        return g

    def init_params(self, rng, kind="gaussian", scale=1.0, values=None):
        if kind == "ones":
            raise ValueError(
                "all-ones init gives constant feature vectors, which this model rejects"
            )
        if kind == "explicit":
            return _theta_values(self, values)
        vals = scale * rng.normal(size=self.param_count)
        # start the features on the constraint set (centered, unit norm)
        H = vals[self.layout["features"]].reshape(self.n_samples, self.feature_dim)
        G = H - H.mean(axis=1, keepdims=True)
        vals[self.layout["features"]] = (G / np.linalg.norm(G, axis=1, keepdims=True)).ravel()
        return vals


def forward(model, theta, x):
    """Evaluate f(x; theta): a scalar for binary models, a class vector otherwise."""
    return model.forward(theta, x)


def gradient(model, theta, x, output_index=None) -> ParamVec:
    """One element of the (sub)gradient of f(x; .) at theta."""
    return model.gradient(theta, x, output_index=output_index)


@dataclasses.dataclass
class VerificationReport:
    passed: bool
    checks: int
    failures: list


def verify_quasi_homogeneity(model, theta, alphas, x_samples, tol, lambda_spec=None):
    """Numerically verify the scaling law f(x; e^{a*Lambda} theta) = e^a f(x; theta)
    and the Euler identity <grad f, Lambda theta> = f on the given samples."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    lspec = lambda_spec if lambda_spec is not None else model.lambda_spec
    theta_vals = theta.values if isinstance(theta, ParamVec) else np.asarray(theta, dtype=float)
    failures = []
    checks = 0
    out_indices = range(model.output_dim) if model.output_dim > 1 else [None]

    for sample_idx, x in enumerate(x_samples):
        f0 = np.atleast_1d(model.forward(theta, x))
        for alpha in np.atleast_1d(alphas):
            scaled = ParamVec(theta_vals * np.exp(float(alpha) * lspec.lambdas))
            f1 = np.atleast_1d(model.forward(scaled, x))
            target = np.exp(float(alpha)) * f0
            checks += 1
            resid = float(np.max(np.abs(f1 - target) / (1.0 + np.abs(target))))
            if resid > tol:
                failures.append(
                    {"check": "scaling", "alpha": float(alpha), "sample": sample_idx,
                     "residual": resid}
                )
        if model.is_differentiable_at(theta, x):
            tangent = lspec.lambdas * theta_vals
            for c in out_indices:
                g = model.gradient(theta, x, output_index=c).values
                value = f0[0] if c is None else f0[c]
                checks += 1
                resid = float(abs(g @ tangent - value) / (1.0 + abs(value)))
                if resid > tol:
                    failures.append(
                        {"check": "euler", "sample": sample_idx, "output": c,
                         "residual": resid}
                    )
    return VerificationReport(passed=not failures, checks=checks, failures=failures)


_KIND_MAP = {
    "linear_homogeneous": LinearHomogeneous,
    "unbalanced_diagonal": UnbalancedDiagonal,
    "two_layer_relu_bias": TwoLayerReluBias,
    "normalized_last_layer": NormalizedLastLayer,
}


def model_to_dict(model) -> dict:
    """Serializable {kind, params...} description of a built-in model."""
    if isinstance(model, LinearHomogeneous):
        return {"kind": model.kind, "input_dim": model.input_dim}
    if isinstance(model, UnbalancedDiagonal):
        return {"kind": model.kind, "depths": list(model.depths)}
    if isinstance(model, TwoLayerReluBias):
        return {"kind": model.kind, "width": model.width, "input_dim": model.input_dim}
    if isinstance(model, NormalizedLastLayer):
        return {
            "kind": model.kind,
            "n_classes": model.n_classes,
            "feature_dim": model.feature_dim,
            "n_samples": model.n_samples,
        }
    raise ValueError(f"cannot serialize model of type {type(model).__name__}")


def model_from_dict(spec: dict):
    """Inverse of model_to_dict; unknown kinds or fields raise ValueError."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in _KIND_MAP:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(_KIND_MAP)}")
    try:
        return _KIND_MAP[kind](**spec)
    except TypeError as err:
        raise ValueError(f"bad parameters for model kind {kind!r}: {err}") from err


def load_model_schema() -> dict:
    """The bundled JSON schema documenting the model serialization fields."""
    text = importlib.resources.files("qhflow").joinpath("model_schema.json").read_text()
    return json.loads(text)
