import csv
import json

import numpy as np
import pytest
import torch

from georef.evalmetrics import (
    METRIC_NAMES,
    MONOTONE_PAIRS,
    LabelingError,
    MetricReport,
    ReportInvariantError,
    ResultItem,
    ablation_suite,
    align_about_axis,
    cct_feature_stats,
    chamfer,
    compute_metrics,
    config_fingerprint,
    curve_table,
    iteration_curve,
    plot_cct_box,
    plot_iteration_curve,
    write_curve_csv,
    write_json,
    write_table_csv,
)
from georef.geometry import (
    AXIAL_Y,
    NO_SYMMETRY,
    PoseState,
    axis_angle_matrix,
    iou3d,
    random_rotation,
    rot_x,
    rot_y,
)
from georef.model import ModelConfig, build_model, table2_config
from georef.netblocks import ConfigurationError
from georef.synthdata import DataConfig, generate_dataset
from georef.train import OracleRefiner, TrainConfig, ZeroRefiner

N = 32


def tiny_model(**kw):
    base = dict(n_points=N, feature_width=8, k_neighbors=4, matrix_widths=(8, 8, 16), matrix_dense=(16, 8),
                gfe_widths=(8, 8, 16), head_hidden=(16, 8), ts_width=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def splits():
    cfg = DataConfig(n_train_instances=2, n_test_instances=2, n_train_records=8, n_test_records=8, n_points=N)
    return generate_dataset(cfg, seed=4)


def pose(rng):
    return PoseState(random_rotation(rng), rng.uniform(-0.5, 0.5, 3), rng.uniform(0.05, 0.3, 3))


def offset(gt, deg, cm, axis=(1.0, 0.0, 0.0)):
    R = axis_angle_matrix(axis, np.radians(deg)) @ gt.R if deg else gt.R
    return PoseState(R, gt.t + np.array([cm / 100.0, 0, 0]), gt.s)


SPIN_GRID = np.stack([rot_y(a) for a in np.linspace(-180, 180, 7201)])


def brute_force(results):
    """Straight per-instance recount, one category at a time."""
    table = {}
    for cat in sorted({r.category for r in results}):
        items = [r for r in results if r.category == cat]
        counts = dict.fromkeys(METRIC_NAMES, 0)
        for r in items:
            if r.symmetry.is_axial:
                a, b = r.pred.R[:, 1], r.gt.R[:, 1]
                rot = np.degrees(np.arccos(np.clip(a @ b, -1, 1)))
                # spin to the orientation nearest the ground truth, by grid search
                traces = np.einsum("ij,kji->k", r.gt.R.T @ r.pred.R, SPIN_GRID)
                spun = r.pred.R @ SPIN_GRID[np.argmax(traces)]
                iou = iou3d(PoseState(spun, r.pred.t, r.pred.s), r.gt)
            else:
                rot = np.degrees(np.arccos(np.clip((np.trace(r.pred.R.T @ r.gt.R) - 1) / 2, -1, 1)))
                iou = iou3d(r.pred, r.gt)
            tr = np.linalg.norm(r.pred.t - r.gt.t) * 100
            counts["IoU50"] += iou >= 0.5
            counts["IoU75"] += iou >= 0.75
            counts["5deg2cm"] += rot <= 5 and tr <= 2
            counts["5deg5cm"] += rot <= 5 and tr <= 5
            counts["10deg2cm"] += rot <= 10 and tr <= 2
            counts["10deg5cm"] += rot <= 10 and tr <= 5
            counts["2cm"] += tr <= 2
            counts["5deg"] += rot <= 5
        table[cat] = {k: v / len(items) for k, v in counts.items()}
    return table


class TestComputeMetrics:
    def test_perfect(self):
        rng = np.random.default_rng(0)
        gts = [pose(rng) for _ in range(5)]
        rep = compute_metrics([ResultItem(g, g, "box") for g in gts])
        assert all(v == 1.0 for v in rep.mean.values())

    def test_hand_count(self):
        rng = np.random.default_rng(1)
        g1, g2 = pose(rng), pose(rng)
        rep = compute_metrics([ResultItem(offset(g1, 3, 1), g1, "box"), ResultItem(offset(g2, 8, 1), g2, "box")])
        assert rep.mean["5deg2cm"] == 0.5 and rep.mean["10deg2cm"] == 1.0

    def test_axial_spin_counts_as_correct(self):
        g = pose(np.random.default_rng(2))
        g = PoseState(g.R, g.t, np.array([0.1, 0.2, 0.1]))
        pred = PoseState(g.R @ rot_y(40), g.t, g.s)
        rep = compute_metrics([ResultItem(pred, g, "can", AXIAL_Y)])
        assert rep.mean["5deg2cm"] == 1.0 and rep.mean["IoU75"] == 1.0
        rep = compute_metrics([ResultItem(pred, g, "box", NO_SYMMETRY)])
        assert rep.mean["5deg2cm"] == 0.0

    def test_align_about_axis(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            gt = random_rotation(rng)
            pred = gt @ rot_y(rng.uniform(-180, 180)) @ rot_x(rng.uniform(-3, 3))
            aligned = align_about_axis(pred, gt, AXIAL_Y)
            np.testing.assert_allclose(aligned[:, 1], pred[:, 1], atol=1e-12)
            grid = max(np.trace(gt.T @ pred @ rot_y(th)) for th in np.linspace(-180, 180, 3601))
            assert np.trace(gt.T @ aligned) >= grid - 1e-6

    def test_uniform_category_mean(self):
        rng = np.random.default_rng(4)
        items = []
        for _ in range(3):
            g = pose(rng)
            items.append(ResultItem(g, g, "a"))
        g = pose(rng)
        items.append(ResultItem(offset(g, 30, 10), g, "b"))
        rep = compute_metrics(items)
        assert rep.mean["5deg2cm"] == 0.5
        assert rep.n_instances == {"a": 3, "b": 1, "total": 4}

    def test_unknown_category(self):
        g = pose(np.random.default_rng(5))
        with pytest.raises(LabelingError):
            compute_metrics([ResultItem(g, g, "mug")], categories=["box", "can"])
        with pytest.raises(LabelingError):
            compute_metrics([ResultItem(g, g, "")])

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_metrics([])

    def test_matches_brute_force_recount(self):
        rng = np.random.default_rng(6)
        for trial in range(100):
            items = []
            for _ in range(int(rng.integers(1, 8))):
                g = pose(rng)
                cat = rng.choice(["box", "can", "mug"])
                sym = AXIAL_Y if cat == "can" else NO_SYMMETRY
                pred = PoseState(axis_angle_matrix(rng.normal(size=3), np.radians(rng.uniform(0, 15))) @ g.R,
                                 g.t + rng.normal(size=3) * 0.02, g.s * rng.uniform(0.8, 1.2, 3))
                items.append(ResultItem(pred, g, str(cat), sym))
            rep = compute_metrics(items)
            ref = brute_force(items)
            for cat, row in ref.items():
                for m, v in row.items():
                    assert rep.per_category[cat][m] == pytest.approx(v, abs=1e-12), (trial, cat, m)

    def test_report_invariants_enforced(self):
        row = dict.fromkeys(METRIC_NAMES, 0.5)
        bad = dict(row, IoU75=0.9)
        with pytest.raises(ReportInvariantError):
            MetricReport({"x": bad}, row, {"x": 1}).validate()
        with pytest.raises(ReportInvariantError):
            MetricReport({}, dict(row, **{"2cm": 1.5}), {}).validate()

    def test_monotone_on_random_reports(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            items = []
            for _ in range(10):
                g = pose(rng)
                pred = PoseState(axis_angle_matrix(rng.normal(size=3), np.radians(rng.uniform(0, 20))) @ g.R,
                                 g.t + rng.normal(size=3) * 0.03, g.s)
                items.append(ResultItem(pred, g, "box"))
            rep = compute_metrics(items)
            for loose, strict in MONOTONE_PAIRS:
                assert rep.mean[loose] >= rep.mean[strict]


class TestCurves:
    def test_oracle(self, splits):
        recs = splits["test"]
        reps = iteration_curve(OracleRefiner([r.gt for r in recs]), recs, k_max=3)
        assert len(reps) == 4
        for rep in reps[1:]:
            assert all(v == 1.0 for v in rep.mean.values())

    def test_zero_refiner_flat(self, splits):
        reps = iteration_curve(ZeroRefiner(), splits["test"], k_max=2)
        assert reps[0].mean == reps[1].mean == reps[2].mean

    def test_bad_k(self, splits):
        with pytest.raises(ValueError):
            iteration_curve(ZeroRefiner(), splits["test"], k_max=0)

    def test_table_and_emitters(self, splits, tmp_path):
        reps = iteration_curve(ZeroRefiner(), splits["test"], k_max=2)
        rows = curve_table(reps)
        assert [r["iteration"] for r in rows] == [0, 1, 2]
        write_curve_csv(reps, tmp_path / "c.csv")
        with open(tmp_path / "c.csv") as f:
            assert len(list(csv.DictReader(f))) == 3
        plot_iteration_curve(reps, tmp_path / "c.png")
        assert (tmp_path / "c.png").read_bytes()[:4] == b"\x89PNG"


class TestCCTStats:
    def test_requires_cct(self, splits):
        with pytest.raises(ConfigurationError):
            cct_feature_stats(build_model(tiny_model(cct=False, fusion="none")), splits["test"])

    def test_identity_matrices_leave_distances(self, splits, tmp_path):
        # freshly built: every LAT is the identity
        stats = cct_feature_stats(build_model(tiny_model()), splits["test"])
        assert len(stats["before"]) == len(splits["test"])
        assert np.array_equal(stats["before"], stats["after"])
        plot_cct_box(stats, tmp_path / "b.png")
        assert (tmp_path / "b.png").exists()

    def test_identical_maps_zero(self):
        f = torch.randn(16, 40, generator=torch.Generator().manual_seed(0))
        assert float(chamfer(f, f)) == 0.0
        assert float(chamfer(f, f[:, torch.randperm(40)])) == 0.0
        assert float(chamfer(f, f + 1)) > 0

    def test_matching_clouds_near_zero(self, splits):
        # the literal focalization makes the clouds coincide only for isotropic sizes
        recs = [r.replace(gt=PoseState(r.gt.R, r.gt.t, np.full(3, 0.2)), observed=(r.prior @ r.gt.R.T) * 0.2 + r.gt.t)
                for r in splits["test"]]
        model = build_model(tiny_model())
        stats = cct_feature_stats(model, recs)
        other = cct_feature_stats(model, splits["test"])
        assert stats["before"].max() < 1e-2 * np.median(other["before"])


class TestAblation:
    def test_rows_and_determinism(self, splits, tmp_path):
        tc = TrainConfig(batch_size=4, epochs=1, base_lr=1e-3, seed=1, deterministic=True)
        a0 = table2_config("A0", tiny_model())
        table = ablation_suite(splits["train"], splits["test"], {"A0": a0, "A0-again": a0}, tc, iters=2)
        assert [r.name for r in table] == ["A0", "A0-again"]
        assert table[0].error is None and table[0].report.mean == table[1].report.mean
        assert table[0].fingerprint == table[1].fingerprint == table[0].report.fingerprint
        write_table_csv(table, tmp_path / "t.csv")
        write_json({"rows": table}, tmp_path / "t.json")
        assert json.loads((tmp_path / "t.json").read_text())["rows"][0]["name"] == "A0"

    def test_failing_row_does_not_stop_suite(self, splits):
        tc = TrainConfig(batch_size=4, epochs=1, seed=1)
        bad = tiny_model(n_points=N + 8)  # records carry N points
        table = ablation_suite(splits["train"], splits["test"], {"bad": bad, "ok": table2_config("A0", tiny_model())}, tc,
                               iters=1)
        assert table[0].error and "ShapeError" in table[0].error
        assert table[1].error is None


def test_fingerprint_stable_and_sensitive():
    a = config_fingerprint(ModelConfig(), TrainConfig(), {"seed": 1})
    assert a == config_fingerprint(ModelConfig(), TrainConfig(), {"seed": 1})
    assert a != config_fingerprint(ModelConfig(), TrainConfig(), {"seed": 2})
    assert a != config_fingerprint(ModelConfig(k_neighbors=9), TrainConfig(), {"seed": 1})
    assert len(a) == 64
