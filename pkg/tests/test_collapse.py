import math

import numpy as np
import pytest

from qhflow.collapse import (
    NC_CSV_HEADER,
    NCMetrics,
    closed_form_residuals,
    nc_closed_form,
    nc_metrics,
    nc_objective,
    nc_suboptimal,
    nc_to_csv,
    rescale_to_unit_margin,
    run_nc_flow,
)
from qhflow.flow import FlowConfig, InitSpec
from qhflow.models import NormalizedLastLayer

from oracles import simplex_weights


def expand(H_class, labels):
    return H_class[np.asarray(labels)]


class TestClosedForm:
    def test_rejects_small_d(self):
        with pytest.raises(ValueError):
            nc_closed_form(3, 2)
        with pytest.raises(ValueError):
            nc_closed_form(1, 5)

    @pytest.mark.parametrize("C", [2, 3, 5])
    def test_defining_conditions(self, C):
        d = C + 2
        W, b, H = nc_closed_form(C, d)
        kappa = (C - 1) / C
        assert W.shape == (C, d) and b.shape == (C,) and H.shape == (C, d)
        assert np.max(np.abs(np.linalg.norm(W, axis=1) - kappa)) < 1e-12
        assert np.linalg.norm(W.sum(axis=0)) < 1e-12
        assert np.max(np.abs(W.sum(axis=1))) < 1e-12
        assert np.all(b == 0.0)
        assert np.max(np.abs(H - (C / (C - 1)) * W)) < 1e-12

    @pytest.mark.parametrize("C", [2, 3, 5])
    def test_pairwise_distances(self, C):
        W, _, _ = nc_closed_form(C, C + 2)
        target = 2 * (C - 1) / C
        for c in range(C):
            for cc in range(c + 1, C):
                d_sq = float(np.sum((W[c] - W[cc]) ** 2))
                assert d_sq == pytest.approx(target, abs=1e-12)

    def test_two_class_geometry(self):
        W, b, H = nc_closed_form(2, 2)
        assert np.allclose(W[0], -W[1], atol=1e-15)
        assert np.linalg.norm(W[0]) == pytest.approx(0.5, abs=1e-15)
        assert np.linalg.norm(W[0] - W[1]) == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("C", [2, 3, 5])
    def test_features_on_constraint_set(self, C):
        _, _, H = nc_closed_form(C, C + 2)
        assert np.max(np.abs(H.sum(axis=1))) < 1e-12
        assert np.max(np.abs(np.linalg.norm(H, axis=1) - 1.0)) < 1e-12

    @pytest.mark.parametrize("C", [2, 3, 5])
    def test_every_score_gap_is_one(self, C):
        W, b, H = nc_closed_form(C, C + 2)
        S = H @ W.T + b
        for c in range(C):
            others = np.delete(S[c], c)
            gaps = S[c, c] - others
            assert np.max(np.abs(gaps - 1.0)) < 1e-12

    @pytest.mark.parametrize("C", [2, 3, 5])
    def test_objective_value(self, C):
        W, b, _ = nc_closed_form(C, C + 2)
        assert nc_objective(W, b) == pytest.approx((C - 1) ** 2 / C, abs=1e-12)

    def test_matches_reference_construction(self):
        for C, d in [(2, 2), (3, 5), (5, 7)]:
            W, _, _ = nc_closed_form(C, d)
            assert np.allclose(W, simplex_weights(C, d), atol=1e-15)

    def test_residuals_all_tiny(self):
        for C in (2, 3, 5):
            res = closed_form_residuals(*nc_closed_form(C, C + 2))
            assert res, "expected named residuals"
            assert max(res.values()) < 1e-12

    def test_argmax_matches_nearest_mean_on_probes(self):
        C, d = 3, 5
        W, b, H = nc_closed_form(C, d)
        rng = np.random.default_rng(7)
        probes = rng.normal(size=(200, d))
        probes -= probes.mean(axis=1, keepdims=True)
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
        scores = probes @ W.T + b
        dists = np.linalg.norm(probes[:, None, :] - H[None, :, :], axis=2)
        assert np.array_equal(scores.argmax(axis=1), dists.argmin(axis=1))

    def test_metrics_at_optimum(self):
        C = 3
        W, b, H = nc_closed_form(C, C + 2)
        labels = np.repeat(np.arange(C), 4)
        m = nc_metrics(W, b, expand(H, labels), labels, C)
        assert m.within_class_scatter < 1e-10
        assert m.norm_deviation < 1e-10
        assert m.pairwise_distance_spread < 1e-10
        assert m.center_norm < 1e-10
        assert m.bias_norm < 1e-10
        assert m.duality_gap < 1e-10
        assert m.nearest_class_agreement == 1.0


class TestMetrics:
    def random_point(self, C=3, d=5, n=12, seed=3):
        rng = np.random.default_rng(seed)
        W = rng.normal(size=(C, d))
        b = rng.normal(size=C)
        H = rng.normal(size=(n, d))
        labels = np.arange(n) % C
        return W, b, H, labels

    def test_empty_class_raises(self):
        W, b, H, _ = self.random_point()
        labels = np.zeros(12, dtype=int)
        with pytest.raises(ValueError, match="no samples"):
            nc_metrics(W, b, H, labels, 3)

    def test_shape_mismatch_raises(self):
        W, b, H, labels = self.random_point()
        with pytest.raises(ValueError):
            nc_metrics(W[:, :-1], b, H, labels, 3)
        with pytest.raises(ValueError):
            nc_metrics(W, b[:-1], H, labels, 3)

    def test_random_point_fields_finite_nonnegative(self):
        W, b, H, labels = self.random_point()
        m = nc_metrics(W, b, H, labels, 3)
        for field in (
            m.within_class_scatter,
            m.norm_deviation,
            m.pairwise_distance_spread,
            m.center_norm,
            m.bias_norm,
            m.duality_gap,
        ):
            assert math.isfinite(field) and field >= 0.0
        assert 0.0 <= m.nearest_class_agreement <= 1.0

    def test_class_relabeling_invariance(self):
        C = 4
        W, b, H, labels = self.random_point(C=C, seed=11)
        m1 = nc_metrics(W, b, H, labels, C)
        rng = np.random.default_rng(5)
        p = rng.permutation(C)
        inv = np.argsort(p)
        m2 = nc_metrics(W[p], b[p], H, inv[labels], C)
        for f1, f2 in zip(
            m1.__dict__.values(), m2.__dict__.values()
        ):
            assert f1 == pytest.approx(f2, abs=1e-12)

    def test_scatter_matches_direct_loop(self):
        W, b, H, labels = self.random_point(seed=9)
        m = nc_metrics(W, b, H, labels, 3)
        worst = 0.0
        for c in range(3):
            rows = H[labels == c]
            for i in range(len(rows)):
                for j in range(len(rows)):
                    worst = max(worst, float(np.linalg.norm(rows[i] - rows[j])))
        assert m.within_class_scatter == pytest.approx(worst, rel=1e-12)

    def test_norm_deviation_beats_scale_grid(self):
        # independent check of the best-common-scale value by brute force
        W, b, H, labels = self.random_point(seed=21)
        m = nc_metrics(W, b, H, labels, 3)
        norms = np.linalg.norm(W, axis=1)
        kappa = 2.0 / 3.0
        grid = np.linspace(norms.min() / kappa * 0.5, norms.max() / kappa * 2.0, 200001)
        vals = np.max(np.abs(norms[:, None] - kappa * grid[None, :]), axis=0) / grid
        assert m.norm_deviation <= vals.min() + 1e-12
        assert vals.min() - m.norm_deviation < 1e-4

    def test_spread_and_center_and_bias(self):
        W, b, H, labels = self.random_point(seed=13)
        m = nc_metrics(W, b, H, labels, 3)
        dists = [
            float(np.linalg.norm(W[c] - W[cc]))
            for c in range(3)
            for cc in range(c + 1, 3)
        ]
        spread = (max(dists) - min(dists)) / (sum(dists) / len(dists))
        assert m.pairwise_distance_spread == pytest.approx(spread, rel=1e-12)
        assert m.center_norm == pytest.approx(np.linalg.norm(W.sum(axis=0)), rel=1e-12)
        assert m.bias_norm == pytest.approx(np.linalg.norm(b), rel=1e-12)

    def test_agreement_counts_mismatches(self):
        # bias pushes every score toward class 0; nearest means stay put
        C, d = 3, 4
        W, _, H = nc_closed_form(C, d)
        b = np.array([10.0, 0.0, 0.0])
        labels = np.arange(6) % C
        feats = expand(H, labels)
        m = nc_metrics(W, b, feats, labels, C)
        scores = feats @ W.T + b
        means = np.vstack([feats[labels == c].mean(axis=0) for c in range(C)])
        dists = np.linalg.norm(feats[:, None, :] - means[None, :, :], axis=2)
        expected = float(
            np.mean(scores.argmax(axis=1) == dists.argmin(axis=1))
        )
        assert m.nearest_class_agreement == pytest.approx(expected, abs=1e-15)
        assert m.nearest_class_agreement == pytest.approx(1.0 / 3.0, abs=1e-15)


def nc_config(**overrides):
    base = dict(
        loss_kind="cross_entropy",
        integrator="rk4",
        time_mode="loss_normalized",
        step_size=1e-2,
        max_steps=40000,
        stop_loss=1e-8,
        record_every=500,
        seed=0,
        init=InitSpec(kind="gaussian", scale=1.0),
    )
    base.update(overrides)
    return FlowConfig(**base)


class TestFlow:
    def test_missing_class_raises(self):
        with pytest.raises(ValueError, match="class"):
            run_nc_flow([0, 0, 1, 1], 3, 5, nc_config(max_steps=5))

    def test_small_feature_dim_raises(self):
        with pytest.raises(ValueError):
            run_nc_flow([0, 1, 2], 3, 2, nc_config(max_steps=5))

    def test_requires_cross_entropy(self):
        with pytest.raises(ValueError, match="cross"):
            run_nc_flow([0, 1], 2, 3, nc_config(loss_kind="exponential"))

    def test_projection_idempotent_and_exact(self):
        model = NormalizedLastLayer(3, 5, 6)
        rng = np.random.default_rng(2)
        theta = model.init_params(rng, "gaussian", 1.0)
        once = model.projected_features(theta)
        again = theta.copy()
        again[model.layout["features"]] = once.ravel()
        twice = model.projected_features(again)
        assert np.allclose(once, twice, atol=1e-15)
        assert np.max(np.abs(once.sum(axis=1))) < 1e-12
        assert np.max(np.abs(np.linalg.norm(once, axis=1) - 1.0)) < 1e-12

    def test_recorded_points_stay_on_constraint_set(self):
        labels = np.arange(9) % 3
        trace, metrics = run_nc_flow(
            labels, 3, 5, nc_config(max_steps=60, record_every=20, stop_loss=1e-300)
        )
        assert trace.error is None
        assert len(metrics) == len(trace.records)
        model = NormalizedLastLayer(3, 5, 9)
        for rec in trace.records:
            H = rec.theta[model.layout["features"]].reshape(9, 5)
            assert np.max(np.abs(H.sum(axis=1))) < 1e-12
            assert np.max(np.abs(np.linalg.norm(H, axis=1) - 1.0)) < 1e-12

    def test_deterministic(self):
        labels = np.arange(6) % 2
        t1, _ = run_nc_flow(labels, 2, 3, nc_config(max_steps=40, stop_loss=1e-300))
        t2, _ = run_nc_flow(labels, 2, 3, nc_config(max_steps=40, stop_loss=1e-300))
        assert np.array_equal(t1.final_theta.values, t2.final_theta.values)

    def test_two_class_convergence(self):
        # in d=2 the constraint set is two isolated points, so the features
        # never move; start the samples on opposite points so they separate
        labels = np.array([0, 1])
        init = InitSpec(
            kind="explicit",
            values=(0.3, -0.1, -0.2, 0.15, 0.05, -0.02, 0.9, -0.4, -0.3, 0.8),
        )
        trace, metrics = run_nc_flow(
            labels, 2, 2, nc_config(stop_loss=1e-10, init=init)
        )
        assert trace.error is None
        assert trace.records[-1].loss <= 1e-10
        model = NormalizedLastLayer(2, 2, 2)
        vals = trace.final_theta.values
        W = vals[model.layout["class_weights"]].reshape(2, 2)
        b = vals[model.layout["class_biases"]]
        H = model.projected_features(vals)
        W2, b2 = rescale_to_unit_margin(W, b, H, labels)
        assert np.allclose(W2[0], -W2[1], atol=2e-2)
        assert np.allclose(H[0], 2.0 * W2[0], atol=5e-2)
        assert np.allclose(H[1], 2.0 * W2[1], atol=5e-2)
        assert metrics[-1].nearest_class_agreement == 1.0

    def test_rescale_requires_separation(self):
        C, d = 3, 5
        W, _, H = nc_closed_form(C, d)
        labels = np.arange(6) % C
        with pytest.raises(ValueError, match="gap"):
            rescale_to_unit_margin(-W, np.zeros(C), expand(H, labels), labels)

    def test_rescale_sets_unit_margin(self):
        C, d = 3, 5
        W, b, H = nc_closed_form(C, d)
        labels = np.arange(6) % C
        feats = expand(H, labels)
        W2, b2 = rescale_to_unit_margin(3.0 * W, np.zeros(C), feats, labels)
        scores = feats @ W2.T + b2
        gaps = [
            scores[i, labels[i]] - np.max(np.delete(scores[i], labels[i]))
            for i in range(len(labels))
        ]
        assert min(gaps) == pytest.approx(1.0, abs=1e-12)


@pytest.fixture(scope="module")
def collapse_run():
    labels = np.repeat(np.arange(3), 4)
    trace, metrics = run_nc_flow(labels, 3, 5, nc_config(seed=1, stop_loss=1e-30))
    return labels, trace, metrics


class TestConvergedRun:
    def test_run_collapses(self, collapse_run):
        labels, trace, metrics = collapse_run
        assert trace.error is None
        m = metrics[-1]
        assert m.within_class_scatter < 5e-2
        assert m.norm_deviation < 5e-2
        assert m.pairwise_distance_spread < 5e-2
        assert m.nearest_class_agreement == 1.0

    def test_objective_near_optimal_after_rescale(self, collapse_run):
        labels, trace, _ = collapse_run
        model = NormalizedLastLayer(3, 5, labels.size)
        vals = trace.final_theta.values
        W = vals[model.layout["class_weights"]].reshape(3, 5)
        b = vals[model.layout["class_biases"]]
        H = model.projected_features(vals)
        W2, b2 = rescale_to_unit_margin(W, b, H, labels)
        assert nc_objective(W2, b2) == pytest.approx(4.0 / 3.0, rel=0.02)

    def test_suboptimal_flag(self, collapse_run):
        labels, trace, _ = collapse_run
        model = NormalizedLastLayer(3, 5, labels.size)
        vals = trace.final_theta.values
        W = vals[model.layout["class_weights"]].reshape(3, 5)
        b = vals[model.layout["class_biases"]]
        H = model.projected_features(vals)
        assert not nc_suboptimal(W, b, H, labels, 3, threshold=5e-2)
        rng = np.random.default_rng(0)
        assert nc_suboptimal(
            rng.normal(size=W.shape), b, H, labels, 3, threshold=5e-2
        )

    def test_csv_contract(self, collapse_run, tmp_path):
        _, trace, metrics = collapse_run
        path = tmp_path / "nc.csv"
        nc_to_csv(trace, metrics, path)
        lines = path.read_text().splitlines()
        assert lines[0] == NC_CSV_HEADER
        assert lines[0] == "step,scatter,norm_dev,dist_spread,center,bias,duality_gap,agreement"
        assert len(lines) == len(trace.records) + 1
        for line, rec in zip(lines[1:], trace.records):
            cells = line.split(",")
            assert len(cells) == 8
            assert int(cells[0]) == rec.step
            for cell in cells[1:]:
                float(cell)

    def test_metrics_is_nc_metrics(self, collapse_run):
        _, _, metrics = collapse_run
        assert all(isinstance(m, NCMetrics) for m in metrics)
