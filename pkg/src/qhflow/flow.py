"""Gradient flow dtheta/dt = -grad L with margin and alignment diagnostics.

Losses: dataset-averaged exponential loss for binary models and cross-entropy
for multiclass ones. The interesting dynamics happen while L shrinks over
hundreds of orders of magnitude, so the default integration runs in a
reparameterized time s with dtheta/ds = -grad L / max(L, floor): for the
exponential loss that field is exactly the softmax(-q)-weighted gradient
combination and never under- or overflows. Raw time is reconstructed as
dt = ds / max(L, floor).

Every recorded step carries the quantities the margin-dynamics inequalities
talk about: q_min, the Lambda-seminorm, the normalized margins gamma and
gamma_tilde, the alignment cosine beta, and the seminorm growth rate nu.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .geometry import alignment, normalize, seminorm_max_sq, seminorm_sq
from .models import ParamVec

CSV_HEADER = "step,t,loss,qmin,seminorm,seminorm_max,gamma,gamma_tilde,beta,nu,separable"

_LOSS_FLOOR = 1e-300
_MAX_TIME_SCALE_LOG = math.log(1e300)
_LOG_LOSS_BLOWUP = 700.0
_CE_ASYMPTOTIC_MARGIN = 30.0

_LOSS_KINDS = ("exponential", "cross_entropy")
_INTEGRATORS = ("euler", "rk4")
_TIME_MODES = ("raw", "loss_normalized")
_INIT_KINDS = ("gaussian", "ones", "explicit")


class NotSeparableError(RuntimeError):
    """The loss is still above the threshold where smoothed margins exist."""


@dataclasses.dataclass(frozen=True)
class InitSpec:
    kind: str = "gaussian"
    scale: float = 1.0
    values: tuple | None = None

    def __post_init__(self):
        if self.kind not in _INIT_KINDS:
            raise ValueError(f"init kind must be one of {_INIT_KINDS}, got {self.kind!r}")
        if self.kind == "explicit":
            if self.values is None:
                raise ValueError("explicit init needs values")
            object.__setattr__(
                self, "values", tuple(float(v) for v in np.asarray(self.values).ravel())
            )


@dataclasses.dataclass(frozen=True)
class FlowConfig:
    loss_kind: str = "exponential"
    integrator: str = "rk4"
    time_mode: str = "loss_normalized"
    step_size: float = 1e-2
    max_steps: int = 200_000
    stop_loss: float = 1e-30
    record_every: int = 100
    seed: int = 0
    init: InitSpec = dataclasses.field(default_factory=InitSpec)

    def __post_init__(self):
        if self.loss_kind not in _LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {_LOSS_KINDS}, got {self.loss_kind!r}")
        if self.integrator not in _INTEGRATORS:
            raise ValueError(f"integrator must be one of {_INTEGRATORS}")
        if self.time_mode not in _TIME_MODES:
            raise ValueError(f"time_mode must be one of {_TIME_MODES}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not self.stop_loss > 0:
            raise ValueError("stop_loss must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")


@dataclasses.dataclass
class DiagnosticsRecord:
    step: int
    t: float
    loss: float
    qmin: float
    seminorm: float
    seminorm_max: float
    gamma: float
    gamma_tilde: float | None
    beta: float
    nu: float
    separable: bool
    log_loss: float
    theta: np.ndarray


@dataclasses.dataclass
class FlowTrace:
    config: FlowConfig
    records: list
    final_theta: ParamVec
    final_normalized: object | None
    error: str | None = None

    def to_csv(self, path):
        rows = [CSV_HEADER]
        for r in self.records:
            rows.append(
                ",".join(
                    [
                        str(r.step),
                        _fmt(r.t),
                        _fmt(r.loss),
                        _fmt(r.qmin),
                        _fmt(r.seminorm),
                        _fmt(r.seminorm_max),
                        _fmt(r.gamma),
                        "" if r.gamma_tilde is None else _fmt(r.gamma_tilde),
                        _fmt(r.beta),
                        _fmt(r.nu),
                        "1" if r.separable else "0",
                    ]
                )
            )
        Path(path).write_text("\n".join(rows) + "\n")

    def to_json(self, path):
        records = []
        for r in self.records:
            records.append(
                {
                    "step": r.step,
                    "t": _json_num(r.t),
                    "loss": _json_num(r.loss),
                    "qmin": _json_num(r.qmin),
                    "seminorm": _json_num(r.seminorm),
                    "seminorm_max": _json_num(r.seminorm_max),
                    "gamma": _json_num(r.gamma),
                    "gamma_tilde": _json_num(r.gamma_tilde),
                    "beta": _json_num(r.beta),
                    "nu": _json_num(r.nu),
                    "separable": bool(r.separable),
                }
            )
        payload = {"config": dataclasses.asdict(self.config), "records": records}
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _fmt(x: float) -> str:
    return repr(float(x))


def _json_num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _validate_arity(model, dataset, loss_kind):
    if loss_kind == "exponential":
        if dataset.n_classes is not None or model.output_dim != 1:
            raise ValueError("exponential loss needs a binary model and +1/-1 labels")
    elif loss_kind == "cross_entropy":
        if dataset.n_classes is None or model.output_dim != dataset.n_classes:
            raise ValueError(
                "cross-entropy needs a multiclass dataset whose class count "
                "matches the model output"
            )
    else:
        raise ValueError(f"loss_kind must be one of {_LOSS_KINDS}, got {loss_kind!r}")


def _sigmoid_neg(x: np.ndarray) -> np.ndarray:
    """1 / (1 + e^x) without overflow."""
    out = np.empty_like(x)
    pos = x >= 0
    e = np.exp(-x[pos])
    out[pos] = e / (1.0 + e)
    out[~pos] = 1.0 / (1.0 + np.exp(x[~pos]))
    return out


def _softplus_neg(x: np.ndarray) -> np.ndarray:
    """log(1 + e^-x) without overflow."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = np.log1p(np.exp(-x[pos]))
    out[~pos] = -x[~pos] + np.log1p(np.exp(x[~pos]))
    return out


class _FlowState(NamedTuple):
    w: np.ndarray  # -grad L / max(L, floor)
    log_loss: float
    qmin: float
    q: np.ndarray


def _binary_margins(model, theta, dataset) -> np.ndarray:
    return dataset.labels * model.batch_forward(theta, dataset.inputs)


def _multiclass_margins(model, theta, dataset):
    """Per-sample smoothed gaps q_j = -log sum_{c != y_j} e^{-(f_{y_j} - f_c)}
    plus the softmax weights over the wrong classes."""
    F = np.atleast_2d(model.batch_forward(theta, dataset.inputs))
    n = F.shape[0]
    rows = np.arange(n)
    y = dataset.labels
    A = F - F[rows, y][:, None]  # -s_jc
    A[rows, y] = -np.inf
    m = A.max(axis=1)
    E = np.exp(A - m[:, None])
    Z = E.sum(axis=1)
    q = -(m + np.log(Z))
    r = E / Z[:, None]
    return q, r


def _eval_exponential(model, theta, dataset) -> _FlowState:
    q = _binary_margins(model, theta, dataset)
    neg = -q
    m = float(np.max(neg))
    p = np.exp(neg - m)
    total = float(np.sum(p))
    p /= total
    log_loss = m + math.log(total) - math.log(dataset.n)
    w = model.weighted_gradient_sum(theta, dataset.inputs, p * dataset.labels)
    return _FlowState(w, log_loss, float(np.min(q)), q)


def _ce_weights(q: np.ndarray):
    """Per-sample weights of -grad L / L plus log L, from margins q.

    The per-sample loss is log(1 + e^-q); its log is taken directly while any
    margin is moderate and as -q once all margins are deep in the tail."""
    n = q.size
    qmin = float(np.min(q))
    small = q < _CE_ASYMPTOTIC_MARGIN
    log_terms = np.where(small, np.log(np.maximum(_softplus_neg(q), 1e-320)), -q)
    mt = float(np.max(log_terms))
    log_loss = mt + math.log(float(np.sum(np.exp(log_terms - mt)))) - math.log(n)
    if qmin <= _CE_ASYMPTOTIC_MARGIN:
        weights = _sigmoid_neg(q) / float(np.sum(_softplus_neg(q)))
    else:
        shifted = np.exp(-(q - qmin))
        weights = shifted / float(np.sum(shifted))
    return weights, log_loss, qmin


def _eval_cross_entropy(model, theta, dataset) -> _FlowState:
    q, r = _multiclass_margins(model, theta, dataset)
    weights, log_loss, qmin = _ce_weights(q)
    coeff = -weights[:, None] * r
    coeff[np.arange(q.size), dataset.labels] = weights
    w = model.weighted_gradient_sum(theta, dataset.inputs, coeff)
    return _FlowState(w, log_loss, qmin, q)


def _eval(model, theta, dataset, loss_kind) -> _FlowState:
    if loss_kind == "exponential":
        return _eval_exponential(model, theta, dataset)
    return _eval_cross_entropy(model, theta, dataset)


def loss(model, theta, dataset, loss_kind) -> float:
    """Average exponential or cross-entropy loss."""
    _validate_arity(model, dataset, loss_kind)
    vals = theta.values if isinstance(theta, ParamVec) else np.asarray(theta, dtype=float)
    return math.exp(_eval(model, vals, dataset, loss_kind).log_loss)


def loss_gradient(model, theta, dataset, loss_kind) -> ParamVec:
    """grad L, averaged over the dataset."""
    _validate_arity(model, dataset, loss_kind)
    vals = theta.values if isinstance(theta, ParamVec) else np.asarray(theta, dtype=float)
    n = dataset.n
    if loss_kind == "exponential":
        q = _binary_margins(model, vals, dataset)
        coeff = -np.exp(-q) * dataset.labels / n
        return ParamVec(model.weighted_gradient_sum(vals, dataset.inputs, coeff))
    q, r = _multiclass_margins(model, vals, dataset)
    sig = _sigmoid_neg(q)
    coeff = sig[:, None] * r / n
    coeff[np.arange(n), dataset.labels] = -sig / n
    return ParamVec(model.weighted_gradient_sum(vals, dataset.inputs, coeff))


def margins(model, theta, dataset, loss_kind):
    """(minimum margin, per-sample margins): y_i f_i for binary models, the
    softened score gaps for multiclass ones."""
    vals = theta.values if isinstance(theta, ParamVec) else np.asarray(theta, dtype=float)
    if loss_kind == "exponential":
        q = _binary_margins(model, vals, dataset)
    elif loss_kind == "cross_entropy":
        q, _ = _multiclass_margins(model, vals, dataset)
    else:
        raise ValueError(f"loss_kind must be one of {_LOSS_KINDS}, got {loss_kind!r}")
    return float(np.min(q)), q


def _margin_denominator(lspec, theta) -> float:
    s_sq = seminorm_sq(lspec, theta)
    if s_sq <= 0.0:
        raise ValueError("zero seminorm: normalized margins are undefined")
    return math.exp(0.5 * math.log(s_sq) / lspec.lambda_max)


def _smooth_margin_from_log(lspec, denom, log_loss, n, loss_kind) -> float:
    if loss_kind == "exponential":
        return -(log_loss + math.log(n)) / denom
    log_nl = log_loss + math.log(n)
    if log_nl < -_CE_ASYMPTOTIC_MARGIN:
        return -(log_nl + math.exp(log_nl) / 2.0) / denom
    return -math.log(math.expm1(math.exp(log_nl))) / denom


def smooth_margin(lspec, theta, loss_value, n, loss_kind) -> float:
    """Loss-smoothed normalized margin; defined once the loss is below 1/n
    (exponential) or log(2)/n (cross-entropy)."""
    if loss_kind not in _LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {_LOSS_KINDS}, got {loss_kind!r}")
    if loss_value <= 0.0:
        raise ValueError("loss must be positive")
    threshold = 1.0 / n if loss_kind == "exponential" else math.log(2.0) / n
    if loss_value > threshold:
        raise NotSeparableError(
            f"loss {loss_value:g} is above the threshold {threshold:g}: "
            "not separable yet, the smoothed margin is undefined"
        )
    denom = _margin_denominator(lspec, theta)
    return _smooth_margin_from_log(lspec, denom, math.log(loss_value), n, loss_kind)


def _log_separability_threshold(n, loss_kind) -> float:
    if loss_kind == "exponential":
        return -math.log(n)
    return math.log(math.log(2.0)) - math.log(n)


def _make_record(lspec, dataset, loss_kind, step, t, theta, state) -> DiagnosticsRecord:
    s_sq = seminorm_sq(lspec, theta)
    seminorm = math.sqrt(s_sq)
    seminorm_max = math.sqrt(seminorm_max_sq(lspec, theta))
    loss_value = math.exp(state.log_loss) if state.log_loss < 709.0 else math.inf
    beta, inner = alignment(lspec, theta, state.w)
    nu = loss_value * inner
    separable = state.log_loss < _log_separability_threshold(dataset.n, loss_kind)
    if s_sq > 0.0:
        denom = math.exp(0.5 * math.log(s_sq) / lspec.lambda_max)
        gamma = state.qmin / denom
        gamma_tilde = (
            _smooth_margin_from_log(lspec, denom, state.log_loss, dataset.n, loss_kind)
            if separable
            else None
        )
    else:
        gamma = math.nan
        gamma_tilde = None
    return DiagnosticsRecord(
        step=step,
        t=t,
        loss=loss_value,
        qmin=state.qmin,
        seminorm=seminorm,
        seminorm_max=seminorm_max,
        gamma=gamma,
        gamma_tilde=gamma_tilde,
        beta=beta,
        nu=nu,
        separable=separable,
        log_loss=state.log_loss,
        theta=theta.copy(),
    )


def run_flow(model, dataset, config: FlowConfig, project=None) -> FlowTrace:
    """Integrate the flow until the loss hits stop_loss or max_steps runs out,
    recording diagnostics every record_every steps plus the first and last.

    project, when given, maps theta back onto a constraint set right after
    init and after every accepted step, so every recorded point satisfies it.
    """
    _validate_arity(model, dataset, config.loss_kind)
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    lspec = model.lambda_spec
    rng = np.random.default_rng(config.seed)
    theta = np.asarray(
        model.init_params(rng, config.init.kind, config.init.scale, config.init.values),
        dtype=float,
    )
    if project is not None:
        theta = project(theta)
    h = config.step_size
    log_stop = math.log(config.stop_loss)
    raw_mode = config.time_mode == "raw"

    def field_at(th: np.ndarray) -> np.ndarray:
        st = _eval(model, th, dataset, config.loss_kind)
        if raw_mode:
            return math.exp(st.log_loss) * st.w
        return st.w

    def field_from_state(st: _FlowState) -> np.ndarray:
        if raw_mode:
            return math.exp(st.log_loss) * st.w
        return st.w

    records: list[DiagnosticsRecord] = []
    error = None
    t = 0.0
    step = 0
    state = _eval(model, theta, dataset, config.loss_kind)
    while True:
        bad = (
            not math.isfinite(state.log_loss)
            or state.log_loss > _LOG_LOSS_BLOWUP
            or not np.all(np.isfinite(state.w))
        )
        if bad:
            error = f"aborted at step {step}: non-finite loss or gradient"
            break
        stop = state.log_loss <= log_stop or step >= config.max_steps
        if step % config.record_every == 0 or stop:
            records.append(
                _make_record(lspec, dataset, config.loss_kind, step, t, theta, state)
            )
        if stop:
            break
        if raw_mode:
            dt = h
        else:
            dt = h * math.exp(min(-state.log_loss, _MAX_TIME_SCALE_LOG))
        k1 = field_from_state(state)
        if config.integrator == "euler":
            theta = theta + h * k1
        else:
            k2 = field_at(theta + 0.5 * h * k1)
            k3 = field_at(theta + 0.5 * h * k2)
            k4 = field_at(theta + h * k3)
            theta = theta + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if project is not None:
            theta = project(theta)
        t += dt
        step += 1
        state = _eval(model, theta, dataset, config.loss_kind)

    final_theta = ParamVec(theta, layout=model.layout)
    try:
        final_normalized = normalize(lspec, final_theta)
    except ValueError:
        final_normalized = None
    return FlowTrace(
        config=config,
        records=records,
        final_theta=final_theta,
        final_normalized=final_normalized,
        error=error,
    )
