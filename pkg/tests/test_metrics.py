import numpy as np
import pytest

from trusskit import io as tio
from trusskit import metrics as tm
from trusskit import segment
from trusskit.errors import EmptyInputError, LengthMismatchError, SingleClassError
from trusskit.geom import LabeledCloud


class TestConfusion:
    def test_identity_all_positive(self):
        cm = tm.confusion([True] * 10, [True] * 10)
        assert (cm.tp, cm.fp, cm.tn, cm.fn) == (10, 0, 0, 0)

    def test_total_disagreement(self):
        truth = np.array([True, False, True, False])
        cm = tm.confusion(~truth, truth)
        assert cm.tp == 0 and cm.tn == 0
        assert cm.fp == 2 and cm.fn == 2

    def test_random_matches_tally_oracle(self):
        rng = np.random.default_rng(0)
        pred = rng.random(1000) < 0.4
        truth = rng.random(1000) < 0.6
        cm = tm.confusion(pred, truth)
        tp = fp = tn = fn = 0
        for p, t in zip(pred, truth):
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
            else:
                tn += 1
        assert (cm.tp, cm.fp, cm.tn, cm.fn) == (tp, fp, tn, fn)
        assert cm.total == 1000

    def test_errors(self):
        with pytest.raises(LengthMismatchError):
            tm.confusion([True], [True, False])
        with pytest.raises(EmptyInputError):
            tm.confusion([], [])


class TestMetrics:
    def test_hand_counts(self):
        m = tm.metrics(tm.ConfusionMatrix(tp=90, fp=5, tn=0, fn=5))
        assert m.precision == pytest.approx(90 / 95)
        assert m.recall == pytest.approx(90 / 95)
        assert m.f1 == pytest.approx(0.9474, abs=5e-5)
        assert m.iou == pytest.approx(0.90)

    def test_all_negative_undefined(self):
        m = tm.metrics(tm.ConfusionMatrix(tp=0, fp=0, tn=25, fn=0))
        assert m.precision is None and m.recall is None
        assert m.f1 is None and m.iou is None

    def test_perfect_prediction(self):
        m = tm.metrics(tm.ConfusionMatrix(tp=40, fp=0, tn=60, fn=0))
        assert m.precision == m.recall == m.f1 == m.iou == 1.0

    def test_iou_f1_identity_random(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            cm = tm.ConfusionMatrix(*(int(v) for v in rng.integers(0, 50, 4)))
            m = tm.metrics(cm)
            if m.f1 is None:
                assert m.iou is None
                continue
            assert abs(m.iou - m.f1 / (2 - m.f1)) <= 1e-12
            assert 0 <= m.iou <= m.f1 <= 1
            for v in (m.precision, m.recall):
                if v is not None:
                    assert 0 <= v <= 1


def brute_force_best(scores, truth, objective):
    """Independent candidate scan: same candidate rule, direct counting."""
    uniq = np.unique(scores)
    cands = [uniq[0] - 1.0] + [(a + b) / 2 for a, b in zip(uniq, uniq[1:])] \
        + [uniq[-1] + 1.0]
    best_val, best_thr = -1.0, None
    n_pos = truth.sum()
    n_neg = len(truth) - n_pos
    for thr in cands:
        pred = scores >= thr
        tp = int((pred & truth).sum())
        fp = int((pred & ~truth).sum())
        fn = int(n_pos - tp)
        if objective == "gmean":
            val = np.sqrt((tp / n_pos) * (1 - fp / n_neg))
        else:
            val = 2 * tp / (2 * tp + fp + fn)
        if val > best_val + 1e-15:
            best_val, best_thr = val, thr
    return best_thr, best_val


class TestThresholds:
    def test_separable_roc(self):
        scores = np.array([0.1, 0.2, 0.8, 0.9])
        truth = np.array([False, False, True, True])
        thr, curve = tm.select_threshold_roc(scores, truth)
        assert thr == pytest.approx(0.5)
        best = max(curve, key=lambda p: p.gmean)
        assert best.gmean == pytest.approx(1.0)

    def test_separable_pr_same_gap(self):
        scores = np.array([0.1, 0.2, 0.8, 0.9])
        truth = np.array([False, False, True, True])
        thr, curve = tm.select_threshold_pr(scores, truth)
        assert thr == pytest.approx(0.5)
        assert max(p.f1 for p in curve) == pytest.approx(1.0)

    @pytest.mark.parametrize("objective", ["gmean", "f1"])
    def test_matches_brute_force(self, objective):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n = int(rng.integers(5, 200))
            scores = np.round(rng.normal(size=n), 2)
            truth = rng.random(n) < rng.uniform(0.2, 0.8)
            if truth.all() or not truth.any():
                continue
            if objective == "gmean":
                thr, _ = tm.select_threshold_roc(scores, truth)
            else:
                thr, _ = tm.select_threshold_pr(scores, truth)
            want_thr, want_val = brute_force_best(scores, truth, objective)
            got_pred = scores >= thr
            want_pred = scores >= want_thr
            # equal objective value; identical prediction set at the argmax
            assert np.array_equal(got_pred, want_pred) or \
                abs(want_val - brute_force_best(
                    scores, truth, objective)[1]) <= 1e-12
            assert thr == pytest.approx(want_thr)

    def test_single_class_error(self):
        with pytest.raises(SingleClassError):
            tm.select_threshold_roc([0.1, 0.9], [True, True])

    def test_constant_scores_degenerate(self):
        scores = np.full(6, 0.7)
        truth = np.array([True, False, True, False, True, False])
        thr, curve = tm.select_threshold_pr(scores, truth)
        assert len(curve) == 2
        assert thr == pytest.approx(-0.3)       # all-positive sentinel wins
        all_pos_f1 = 2 * 3 / (2 * 3 + 3 + 0)
        assert max(p.f1 for p in curve) == pytest.approx(all_pos_f1)

    def test_roc_curve_monotone(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=120)
        truth = rng.random(120) < 0.5
        _, curve = tm.select_threshold_roc(scores, truth)
        thrs = [p.threshold for p in curve]
        assert thrs == sorted(thrs)
        tprs = [p.tpr for p in curve]
        fprs = [p.fpr for p in curve]
        assert all(a >= b - 1e-12 for a, b in zip(tprs, tprs[1:]))
        assert all(a >= b - 1e-12 for a, b in zip(fprs, fprs[1:]))

    def test_gmean_formula_pointwise(self):
        rng = np.random.default_rng(6)
        scores = rng.normal(size=50)
        truth = rng.random(50) < 0.5
        _, curve = tm.select_threshold_roc(scores, truth)
        for p in curve:
            assert p.gmean == pytest.approx(np.sqrt(p.tpr * (1 - p.fpr)))


def _write_pair(tmp_path, name, truth, pred):
    n = len(truth)
    rng = np.random.default_rng(hash(name) % (1 << 32))
    cloud = LabeledCloud(rng.normal(size=(n, 3)),
                         np.where(truth, 1, 0))
    (tmp_path / "truth").mkdir(exist_ok=True)
    (tmp_path / "pred").mkdir(exist_ok=True)
    tio.write_pcd(cloud, tmp_path / "truth" / name)
    tio.write_prediction_pcd(cloud, pred, tmp_path / "pred" / name)


class TestEvaluateDataset:
    def test_mean_of_two_clouds(self, tmp_path):
        truth = np.array([True] * 10 + [False] * 5)
        pred_a = truth.copy()
        pred_a[:2] = False                       # TP=8, FN=2 -> iou 0.8
        pred_b = truth.copy()
        pred_b[0] = False                        # TP=9, FN=1 -> iou 0.9
        _write_pair(tmp_path, "a.pcd", truth, pred_a)
        _write_pair(tmp_path, "b.pcd", truth, pred_b)
        files = sorted((tmp_path / "truth").glob("*.pcd"))
        report = tm.evaluate_dataset(files, pred_dir=tmp_path / "pred")
        assert report.mean_iou == pytest.approx(0.85)
        assert report.undefined_excluded == 0

    def test_identical_predictions_mean_one(self, tmp_path):
        truth = np.array([True, False] * 8)
        for name in ("x.pcd", "y.pcd", "z.pcd"):
            _write_pair(tmp_path, name, truth, truth)
        files = sorted((tmp_path / "truth").glob("*.pcd"))
        report = tm.evaluate_dataset(files, pred_dir=tmp_path / "pred")
        assert report.mean_f1 == pytest.approx(1.0)
        assert report.mean_iou == pytest.approx(1.0)

    def test_permutation_invariant(self, tmp_path):
        rng = np.random.default_rng(9)
        for i in range(4):
            truth = rng.random(30) < 0.5
            if not truth.any():
                truth[0] = True
            pred = truth ^ (rng.random(30) < 0.2)
            _write_pair(tmp_path, f"c{i}.pcd", truth, pred)
        files = sorted((tmp_path / "truth").glob("*.pcd"))
        r1 = tm.evaluate_dataset(files, pred_dir=tmp_path / "pred")
        r2 = tm.evaluate_dataset(list(reversed(files)),
                                 pred_dir=tmp_path / "pred")
        assert r1.mean_iou == r2.mean_iou
        assert [r.file for r in r1.rows] == [r.file for r in r2.rows]

    def test_missing_prediction_collected(self, tmp_path):
        truth = np.array([True, False, True])
        _write_pair(tmp_path, "ok.pcd", truth, truth)
        cloud = LabeledCloud(np.eye(3), [1, 0, 1])
        tio.write_pcd(cloud, tmp_path / "truth" / "orphan.pcd")
        files = sorted((tmp_path / "truth").glob("*.pcd"))
        report = tm.evaluate_dataset(files, pred_dir=tmp_path / "pred")
        assert len(report.errors) == 1
        assert "orphan.pcd" in report.errors[0]
        assert report.mean_f1 == pytest.approx(1.0)

    def test_pipeline_mode_and_undefined_exclusion(self, tmp_path):
        rng = np.random.default_rng(11)
        # pure noise blob: pipeline output vs empty truth -> iou undefined
        cloud = LabeledCloud(rng.uniform(-4, 4, size=(600, 3)))
        (tmp_path / "truth").mkdir()
        tio.write_pcd(cloud, tmp_path / "truth" / "blob.pcd")
        files = [tmp_path / "truth" / "blob.pcd"]
        cfg = segment.PipelineConfig(ransac_iterations=100)
        report = tm.evaluate_dataset(files, pipeline_cfg=cfg)
        row = report.rows[0]
        assert row.cm is not None
        assert row.latency_ms is not None and row.latency_ms > 0

    def test_requires_exactly_one_source(self, tmp_path):
        with pytest.raises(ValueError):
            tm.evaluate_dataset([], pred_dir=None, pipeline_cfg=None)


class TestTimePipeline:
    def test_sample_count(self, tmp_path):
        rng = np.random.default_rng(12)
        (tmp_path / "t").mkdir()
        for i in range(2):
            pts = np.column_stack([rng.uniform(-3, 3, (300, 2)),
                                   rng.normal(0, 0.01, 300)])
            tio.write_pcd(LabeledCloud(pts), tmp_path / "t" / f"s{i}.pcd")
        files = sorted((tmp_path / "t").glob("*.pcd"))
        cfg = segment.PipelineConfig(ransac_iterations=50)
        stats = tm.time_pipeline(files, cfg, repeats=3)
        assert len(stats["samples_ms"]) == 6
        assert stats["mean_ms"] > 0
        assert stats["p95_ms"] >= stats["median_ms"] >= 0
