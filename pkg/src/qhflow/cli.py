"""Command-line front end: configured experiment runs with CSV/JSON reports.

Each subcommand reads a JSON manifest (see experiments/), runs the experiment,
and writes delimited traces plus a summary next to them. Exit codes: 0 on
success, 2 for configuration problems, 3 for numerical failures, 4 when
--check finds a violated monitor.
"""

from __future__ import annotations

import dataclasses
import json
import math
import sys
from pathlib import Path

import click
import numpy as np

from .collapse import NormalizedLastLayer, nc_suboptimal, nc_to_csv, run_nc_flow
from .flow import FlowConfig, InitSpec, loss_gradient, run_flow
from .kkt import kkt_certificate, solve_max_margin_linear
from .models import (
    ClassificationDataset,
    LinearHomogeneous,
    UnbalancedDiagonal,
    model_from_dict,
    verify_quasi_homogeneity,
)
from .twoballs import BallProblem, radius_sweep, sweep_to_csv

_DEFAULT_CLOUD_MEAN = (0.7071067811865476, 0.7071067811865476)
_DEFAULT_BALL_MU = (0.8660254, 0.4330127, 0.25)


class ConfigError(ValueError):
    pass


def _fail(code: int, message: str):
    click.echo(message, err=True)
    sys.exit(code)


def load_config(path, experiment: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if raw.get("schema_version") != 1:
        raise ConfigError("config must declare schema_version 1")
    if raw.get("experiment") != experiment:
        raise ConfigError(
            f"config is for experiment {raw.get('experiment')!r}, expected {experiment!r}"
        )
    return raw


def _effective_seed(cfg: dict, seed_flag) -> int:
    if seed_flag is not None:
        return int(seed_flag)
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return seed


def _out_dir(cfg: dict, out_flag) -> Path:
    out = out_flag if out_flag is not None else cfg.get("out")
    if not out:
        raise ConfigError("no output path: set \"out\" in the config or pass --out")
    return Path(out)


def flow_config_from(cfg: dict, seed: int) -> FlowConfig:
    section = cfg.get("flow", {})
    if not isinstance(section, dict):
        raise ConfigError("\"flow\" must be an object")
    kwargs = dict(section)
    if "seed" in kwargs:
        raise ConfigError("set the seed at the top level, not inside \"flow\"")
    init_raw = kwargs.pop("init", None)
    try:
        if init_raw is not None:
            kwargs["init"] = InitSpec(**init_raw)
        return FlowConfig(seed=seed, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad flow section: {exc}") from exc


def _jsonify(value):
    if isinstance(value, dict):
        return {k: _jsonify(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonify(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonify(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def _write_json(path: Path, obj):
    path.write_text(json.dumps(_jsonify(obj), indent=2, sort_keys=True) + "\n")


def gaussian_clouds(mean, sigma, n_per_class, seed) -> ClassificationDataset:
    """Two Gaussian clouds at +-mean with isotropic noise, labels +-1."""
    mean = np.asarray(mean, dtype=float)
    rng = np.random.default_rng(seed)
    pos = mean + sigma * rng.normal(size=(n_per_class, mean.size))
    neg = -mean + sigma * rng.normal(size=(n_per_class, mean.size))
    labels = np.concatenate([np.ones(n_per_class, int), -np.ones(n_per_class, int)])
    return ClassificationDataset(inputs=np.vstack([pos, neg]), labels=labels)


def _angle_deg(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    denom = np.linalg.norm(u) * np.linalg.norm(v)
    if denom == 0.0:
        return math.nan
    return math.degrees(math.acos(np.clip(float(u @ v) / denom, -1.0, 1.0)))


@click.group()
def main():
    """Gradient-flow experiments on quasi-homogeneous classifiers."""


def _common_options(fn):
    fn = click.option("--config", "config_path", required=True, type=click.Path())(fn)
    fn = click.option("--out", "out_flag", default=None, type=click.Path())(fn)
    fn = click.option("--seed", "seed_flag", default=None, type=int)(fn)
    fn = click.option("--check", is_flag=True, help="fail (exit 4) on violated monitors")(fn)
    fn = click.option("--plot", is_flag=True, help="render figures next to the CSV output")(fn)
    return fn


@main.command("logistic")
@_common_options
def cmd_logistic(config_path, out_flag, seed_flag, check, plot):
    """Binary logistic flow on Gaussian clouds, both parameterizations,
    compared against the hard-margin solver's direction."""
    try:
        cfg = load_config(config_path, "logistic")
        seed = _effective_seed(cfg, seed_flag)
        out = _out_dir(cfg, out_flag)
        fc = flow_config_from(cfg, seed)
        data_cfg = cfg.get("dataset", {})
        mean = data_cfg.get("mean", list(_DEFAULT_CLOUD_MEAN))
        sigma = float(data_cfg.get("sigma", 0.25))
        n_per_class = int(data_cfg.get("n_per_class", 100))
        depths = tuple(int(v) for v in cfg.get("depths", (2, 1)))
        if len(depths) != len(mean):
            raise ConfigError("need one factor depth per input coordinate")
    except ConfigError as exc:
        _fail(2, f"config error: {exc}")

    data = gaussian_clouds(mean, sigma, n_per_class, seed)
    hom = LinearHomogeneous(len(mean))
    quasi = UnbalancedDiagonal(depths)
    try:
        trace_h = run_flow(hom, data, fc)
        trace_q = run_flow(quasi, data, fc)
        for trace in (trace_h, trace_q):
            if trace.error:
                _fail(3, f"numerical failure: {trace.error}")
        oracle_w, _, info = solve_max_margin_linear(data, np.ones(len(mean)))
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        _fail(3, f"numerical failure: {exc}")

    dir_h = trace_h.final_theta.values
    dir_q = quasi.coefficients(trace_q.final_theta.values)
    angle_h = _angle_deg(dir_h, oracle_w)
    angle_q = _angle_deg(dir_q, oracle_w)

    out.mkdir(parents=True, exist_ok=True)
    trace_h.to_csv(out / "hom_trace.csv")
    trace_q.to_csv(out / "quasi_trace.csv")
    _write_json(
        out / "summary.json",
        {
            "experiment": "logistic",
            "seed": seed,
            "oracle_direction": oracle_w / np.linalg.norm(oracle_w),
            "oracle_support_size": len(info.indices),
            "hom": {
                "direction": dir_h / np.linalg.norm(dir_h),
                "angle_to_oracle_deg": angle_h,
                "final_loss": trace_h.records[-1].loss,
                "steps": trace_h.records[-1].step,
            },
            "quasi_hom": {
                "direction": dir_q / np.linalg.norm(dir_q),
                "angle_to_oracle_deg": angle_q,
                "final_loss": trace_q.records[-1].loss,
                "steps": trace_q.records[-1].step,
            },
        },
    )
    if plot:
        from . import plots

        plots.save_trace_figure({"hom": trace_h, "quasi_hom": trace_q}, out / "logistic.png")
    click.echo(f"hom angle to oracle: {angle_h:.3f} deg; quasi_hom: {angle_q:.3f} deg")
    if check and not (angle_h <= 8.0 and angle_q > angle_h):
        _fail(4, "check failed: expected hom angle <= 8 deg and quasi angle above it")


def _radii_from(cfg: dict) -> list[float]:
    spec = cfg.get("radii")
    if isinstance(spec, dict):
        try:
            grid = np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["num"]))
        except KeyError as exc:
            raise ConfigError(f"radii grid needs start/stop/num: missing {exc}") from exc
        if spec.get("trim_ends", False):
            grid = grid[1:-1]
        radii = [float(r) for r in grid]
    elif isinstance(spec, list) and spec:
        radii = [float(r) for r in spec]
    else:
        raise ConfigError("\"radii\" must be a non-empty list or a grid object")
    if any(not 0.0 < r < 1.0 for r in radii):
        raise ConfigError("every radius must lie strictly between 0 and 1")
    return radii


@main.command("twoballs-sweep")
@_common_options
@click.option("--jobs", default=1, type=int, help="parallel worker count")
def cmd_twoballs_sweep(config_path, out_flag, seed_flag, check, plot, jobs):
    """Radius sweep of two-ball flows against the closed-form optima."""
    try:
        cfg = load_config(config_path, "twoballs_sweep")
        seed = _effective_seed(cfg, seed_flag)
        out = _out_dir(cfg, out_flag)
        fc = flow_config_from(cfg, seed)
        radii = _radii_from(cfg)
        model_kinds = cfg.get("models", ["hom", "quasi_hom"])
        if not model_kinds or any(m not in ("hom", "quasi_hom") for m in model_kinds):
            raise ConfigError("\"models\" must name hom and/or quasi_hom")
        prob_cfg = cfg.get("problem", {})
        mu = np.asarray(prob_cfg.get("mu", _DEFAULT_BALL_MU), dtype=float)
        mu = mu / np.linalg.norm(mu)
        depths = cfg.get("depths")
        if "quasi_hom" in model_kinds and depths is None:
            raise ConfigError("quasi_hom sweeps need \"depths\"")
        try:
            problem = BallProblem(
                mu=mu,
                r=radii[0],
                m=int(prob_cfg.get("m", 1)),
                samples_per_ball=int(prob_cfg.get("samples_per_ball", 512)),
                surface_only=bool(prob_cfg.get("surface_only", True)),
            )
        except ValueError as exc:
            raise ConfigError(f"bad problem section: {exc}") from exc
        if jobs < 1:
            raise ConfigError("--jobs must be positive")
    except ConfigError as exc:
        _fail(2, f"config error: {exc}")

    rows = []
    for kind in model_kinds:
        rows.extend(
            radius_sweep(
                problem, radii, kind, fc,
                depths=depths if kind == "quasi_hom" else None,
                jobs=jobs,
            )
        )
    if all(not row.flow_ok for row in rows):
        _fail(3, "numerical failure: every sweep point aborted")

    deviations = {}
    for kind in model_kinds:
        devs = [
            abs(row.robustness - (row.robustness_analytic_hom if kind == "hom"
                                  else row.robustness_analytic_qh))
            for row in rows
            if row.model == kind and row.flow_ok
            and (kind == "hom" or row.robustness_analytic_qh is not None)
        ]
        deviations[kind] = max(devs) if devs else None

    out.mkdir(parents=True, exist_ok=True)
    sweep_to_csv(rows, out / "sweep.csv")
    _write_json(
        out / "summary.json",
        {
            "experiment": "twoballs_sweep",
            "seed": seed,
            "radii": radii,
            "rho_mu": problem.rho_mu,
            "max_abs_deviation": deviations,
            "failed_points": sum(not row.flow_ok for row in rows),
        },
    )
    if plot:
        from . import plots

        plots.save_sweep_figure(rows, out / "sweep.png")
    for kind, dev in deviations.items():
        click.echo(f"{kind}: max |robustness - analytic| = {dev}")
    if check:
        bad = sum(not row.flow_ok for row in rows) > 0
        tol = {"hom": 0.03, "quasi_hom": 0.05}
        for kind, dev in deviations.items():
            if dev is None or dev > tol[kind]:
                bad = True
        if bad:
            _fail(4, "check failed: sweep deviations above tolerance or aborted points")


@main.command("nc")
@_common_options
def cmd_nc(config_path, out_flag, seed_flag, check, plot):
    """Cross-entropy flow on the normalized last layer with collapse metrics."""
    try:
        cfg = load_config(config_path, "nc")
        seed = _effective_seed(cfg, seed_flag)
        out = _out_dir(cfg, out_flag)
        fc = flow_config_from(cfg, seed)
        C = int(cfg.get("classes", 3))
        d = int(cfg.get("feature_dim", 5))
        per_class = int(cfg.get("samples_per_class", 10))
        if C < 2 or per_class < 1:
            raise ConfigError("need at least two classes and one sample per class")
    except ConfigError as exc:
        _fail(2, f"config error: {exc}")

    labels = np.repeat(np.arange(C), per_class)
    try:
        trace, metrics = run_nc_flow(labels, C, d, fc)
    except ValueError as exc:
        _fail(2, f"config error: {exc}")
    if trace.error:
        _fail(3, f"numerical failure: {trace.error}")

    model = NormalizedLastLayer(C, d, labels.size)
    vals = trace.final_theta.values
    W = vals[model.layout["class_weights"]].reshape(C, d)
    b = vals[model.layout["class_biases"]]
    H = vals[model.layout["features"]].reshape(labels.size, d)
    scale = float(np.linalg.norm(W, axis=1).mean())
    final = metrics[-1]
    suboptimal = nc_suboptimal(W, b, H, labels, C)

    out.mkdir(parents=True, exist_ok=True)
    nc_to_csv(trace, metrics, out / "nc_trace.csv")
    trace.to_csv(out / "flow_trace.csv")
    _write_json(
        out / "summary.json",
        {
            "experiment": "nc",
            "seed": seed,
            "classes": C,
            "feature_dim": d,
            "samples": int(labels.size),
            "final_metrics": dataclasses.asdict(final),
            "relative_center": final.center_norm / scale if scale else None,
            "relative_bias": final.bias_norm / scale if scale else None,
            "suboptimal": suboptimal,
            "steps": trace.records[-1].step,
            "final_loss": trace.records[-1].loss,
        },
    )
    if plot:
        from . import plots

        plots.save_nc_figure([r.step for r in trace.records], metrics, out / "nc.png")
    click.echo(
        f"scatter={final.within_class_scatter:.3e} agreement={final.nearest_class_agreement} "
        f"suboptimal={'yes' if suboptimal else 'no'}"
    )
    if check and suboptimal:
        _fail(4, "check failed: endpoint missed the collapse geometry at 1e-2")


@main.command("verify")
@_common_options
def cmd_verify(config_path, out_flag, seed_flag, check, plot):
    """Scaling-law and Euler-identity verification for configured models."""
    try:
        cfg = load_config(config_path, "verify")
        seed = _effective_seed(cfg, seed_flag)
        out = _out_dir(cfg, out_flag)
        model_specs = cfg.get("models")
        if not isinstance(model_specs, list) or not model_specs:
            raise ConfigError("\"models\" must be a non-empty list of model objects")
        try:
            models = [model_from_dict(spec) for spec in model_specs]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad model spec: {exc}") from exc
        n_alphas = int(cfg.get("n_alphas", 5))
        n_points = int(cfg.get("n_points", 10))
        tol = float(cfg.get("tol", 1e-9))
    except ConfigError as exc:
        _fail(2, f"config error: {exc}")

    rng = np.random.default_rng(seed)
    reports = []
    all_passed = True
    for model, spec in zip(models, model_specs):
        theta = model.init_params(rng, "gaussian", 1.0)
        alphas = rng.uniform(-2.0, 2.0, size=n_alphas)
        if model.kind == "normalized_last_layer":
            k = min(n_points, model.n_samples)
            xs = np.arange(k)[:, None]
        else:
            xs = rng.normal(size=(n_points, model.input_dim))
        report = verify_quasi_homogeneity(model, theta, alphas, xs, tol)
        all_passed = all_passed and report.passed
        reports.append(
            {
                "model": spec,
                "passed": report.passed,
                "checks": report.checks,
                "failures": report.failures,
            }
        )
        click.echo(f"{model.kind}: {'ok' if report.passed else 'FAILED'}")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", {"experiment": "verify", "seed": seed, "reports": reports})
    if check and not all_passed:
        _fail(4, "check failed: a model violated the scaling or identity checks")


def _probe_dataset(cfg: dict, seed: int) -> ClassificationDataset:
    spec = cfg.get("dataset")
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("\"dataset\" must be an object with a \"kind\"")
    kind = spec["kind"]
    if kind == "gaussian_clouds":
        return gaussian_clouds(
            spec.get("mean", list(_DEFAULT_CLOUD_MEAN)),
            float(spec.get("sigma", 0.25)),
            int(spec.get("n_per_class", 100)),
            seed,
        )
    if kind == "two_balls":
        from .twoballs import sample_balls

        mu = np.asarray(spec.get("mu", _DEFAULT_BALL_MU), dtype=float)
        try:
            problem = BallProblem(
                mu=mu / np.linalg.norm(mu),
                r=float(spec.get("r", 0.75)),
                m=int(spec.get("m", 1)),
                samples_per_ball=int(spec.get("samples_per_ball", 512)),
                surface_only=bool(spec.get("surface_only", True)),
            )
        except ValueError as exc:
            raise ConfigError(f"bad dataset section: {exc}") from exc
        return sample_balls(problem, seed)
    raise ConfigError(f"unknown dataset kind {kind!r}")


@main.command("kkt-probe")
@_common_options
def cmd_kkt_probe(config_path, out_flag, seed_flag, check, plot):
    """Run a binary exponential-loss flow and certify its endpoint."""
    try:
        cfg = load_config(config_path, "kkt_probe")
        seed = _effective_seed(cfg, seed_flag)
        out = _out_dir(cfg, out_flag)
        fc = flow_config_from(cfg, seed)
        if fc.loss_kind != "exponential":
            raise ConfigError("the certificate is defined for exponential loss")
        model_spec = cfg.get("model")
        if not isinstance(model_spec, dict):
            raise ConfigError("\"model\" must be a model object")
        try:
            model = model_from_dict(model_spec)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad model spec: {exc}") from exc
        data = _probe_dataset(cfg, seed)
    except ConfigError as exc:
        _fail(2, f"config error: {exc}")

    try:
        trace = run_flow(model, data, fc)
        if trace.error:
            _fail(3, f"numerical failure: {trace.error}")
        theta = trace.final_theta.values
        velocity = -loss_gradient(model, theta, data, "exponential").values
        report = kkt_certificate(model, theta, velocity, data, model.lambda_spec)
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        _fail(3, f"numerical failure: {exc}")

    out.mkdir(parents=True, exist_ok=True)
    trace.to_csv(out / "trace.csv")
    _write_json(out / "kkt.json", {"experiment": "kkt_probe", "seed": seed, **report.to_dict()})
    if plot:
        from . import plots

        plots.save_trace_figure({model.kind: trace}, out / "kkt.png")
    click.echo(report.summary_line())
    if check:
        sound = (
            report.primal_feasible
            and report.stationarity_residual <= report.epsilon
            and report.complementarity_value <= report.delta
            and np.all(report.multipliers >= 0.0)
        )
        if not sound:
            _fail(4, "check failed: certificate bounds violated")


if __name__ == "__main__":
    main()
