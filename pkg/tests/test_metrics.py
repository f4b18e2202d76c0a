import numpy as np
import pytest

import oracles
from epiwave.data import Recording, SegmentationConfig, sample_eval_set, segment
from epiwave.errors import MappingError, SamplingInfeasibleError, UndefinedMetricError
from epiwave.metrics import (
    LevelMetrics,
    MetricsReport,
    auc,
    confusion,
    f_beta,
    make_eval_sets,
    metrics_for_eval_set,
)


class TestFBeta:
    def test_equal_precision_recall_fixed_point(self):
        for x in (0.1, 0.42, 0.9):
            for beta in (0.5, 1.0, 2.0):
                assert f_beta(x, x, beta) == pytest.approx(x)

    def test_frozen_values(self):
        # (1+4)*0.5*1.0 / (4*0.5 + 1.0) = 2.5/3 = 0.83333...
        assert f_beta(0.5, 1.0, 2.0) == pytest.approx(0.8333333333, rel=1e-9)
        # (1+1)*0.2*0.8 / (0.2 + 0.8) = 0.32
        assert f_beta(0.2, 0.8, 1.0) == pytest.approx(0.32, rel=1e-12)

    def test_both_zero_defined_as_zero(self):
        assert f_beta(0.0, 0.0, 2.0) == 0.0

    def test_matches_oracle(self, rng):
        for _ in range(100):
            p, r = rng.uniform(0.01, 1.0, 2)
            beta = rng.uniform(0.2, 3.0)
            assert f_beta(p, r, beta) == pytest.approx(
                oracles.f_beta(p, r, beta), rel=1e-12)


class TestAuc:
    def test_perfect_separation(self):
        assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_ties_half(self):
        assert auc([0.5] * 6, [1, 0, 1, 0, 0, 0]) == 0.5

    def test_random_scores_near_half(self, rng):
        n = 10_000
        scores = rng.random(n)
        labels = (rng.random(n) < 0.3).astype(int)
        assert abs(auc(scores, labels) - 0.5) < 0.02

    def test_single_class_rejected(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.9], [1, 1])

    def test_matches_pair_counting_oracle(self, rng):
        for _ in range(25):
            n = rng.integers(4, 30)
            scores = rng.choice([0.1, 0.3, 0.3, 0.7, 0.9], size=n)
            labels = (rng.random(n) < 0.5).astype(int)
            if labels.sum() in (0, n):
                continue
            assert auc(scores, labels) == pytest.approx(
                oracles.auc_pairs(list(scores), list(labels)), rel=1e-12)

    def test_monotone_transform_invariance(self, rng):
        scores = rng.normal(size=200)
        labels = (rng.random(200) < 0.2).astype(int)
        base = auc(scores, labels)
        assert auc(np.exp(scores), labels) == pytest.approx(base, rel=1e-12)
        assert auc(3 * scores + 7, labels) == pytest.approx(base, rel=1e-12)


class TestConfusion:
    def test_strict_threshold(self):
        # exactly 0.5 is NOT a positive prediction
        tp, fp, tn, fn = confusion([0.5, 0.6, 0.4], [1, 1, 0])
        assert (tp, fp, tn, fn) == (1, 0, 1, 1)

    def test_matches_scalar_loop(self, rng):
        scores = rng.random(50)
        labels = (rng.random(50) < 0.4).astype(int)
        tp = sum(1 for s, y in zip(scores, labels) if s > 0.5 and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s > 0.5 and y == 0)
        tn = sum(1 for s, y in zip(scores, labels) if s <= 0.5 and y == 0)
        fn = sum(1 for s, y in zip(scores, labels) if s <= 0.5 and y == 1)
        assert confusion(scores, labels) == (tp, fp, tn, fn)


class _OracleModel:
    """Stub detector that emits the true labels as probabilities."""

    def __init__(self, segments, noise=0.0, constant=None):
        self.segments = segments
        self.channel_map = segments.channel_map
        self.noise = noise
        self.constant = constant

    def score_segments(self, data, chunk=0):
        seg = self.segments
        if self.constant is not None:
            return {
                "channel": np.full(seg.channel_labels.shape, self.constant),
                "region": np.full(seg.region_labels.shape, self.constant),
                "patient": np.full(seg.patient_labels.shape, self.constant),
            }
        def soften(lab):
            return np.clip(lab.astype(float), 0.02, 0.98)
        return {
            "channel": soften(seg.channel_labels),
            "region": soften(seg.region_labels),
            "patient": soften(seg.patient_labels),
        }


def _segments(rng, n=400, n_channels=4, pos_rate=0.1):
    from epiwave.data import trivial_channel_map

    labels = (rng.random((n, n_channels)) < pos_rate).astype(np.uint8)
    rec = Recording(samples=rng.normal(size=(n, n_channels)), labels=labels,
                    sample_rate=8.0, channel_map=trivial_channel_map(n_channels, 2))
    return segment(rec, SegmentationConfig(window_k=1, stride_l=1))


class TestEvaluate:
    def test_oracle_model_is_perfect(self, rng):
        seg = _segments(rng)
        from epiwave.metrics import evaluate

        sets = make_eval_sets(seg, ratios=[(1, 5), (1, 20)], seed=1)
        report = evaluate(_OracleModel(seg), seg, sets)
        for ratio, levels in report.results.items():
            for level, m in levels.items():
                assert m.precision == 100.0
                assert m.recall == 100.0
                assert m.f1 == 100.0 and m.f2 == 100.0
                assert m.auc == 100.0

    def test_constant_half_model(self, rng):
        seg = _segments(rng)
        from epiwave.metrics import evaluate

        sets = make_eval_sets(seg, ratios=[(1, 5)], seed=1)
        report = evaluate(_OracleModel(seg, constant=0.5), seg, sets)
        m = report.results["1:5"]["channel"]
        assert m.recall == 0.0  # strict > 0.5 rule
        assert m.auc == pytest.approx(50.0)

    def test_confusion_counts_match_scalar_oracle(self, rng):
        seg = _segments(rng)
        es = sample_eval_set(seg, (1, 7), 12, seed=5)
        scores = {
            "channel": rng.random(seg.channel_labels.shape),
            "region": rng.random(seg.region_labels.shape),
            "patient": rng.random(seg.patient_labels.shape),
        }
        per_level = metrics_for_eval_set(scores, seg, es)
        s = scores["channel"][es.segment_indices][es.pair_mask]
        y = seg.channel_labels[es.segment_indices][es.pair_mask]
        tp = sum(1 for si, yi in zip(s, y) if si > 0.5 and yi == 1)
        fp = sum(1 for si, yi in zip(s, y) if si > 0.5 and yi == 0)
        m = per_level["channel"]
        assert (m.tp, m.fp) == (tp, fp)
        assert m.tp + m.fp + m.tn + m.fn == es.n_pairs

    def test_report_self_consistency(self, rng):
        seg = _segments(rng)
        from epiwave.metrics import evaluate

        sets = make_eval_sets(seg, ratios=[(1, 5)], seed=0)
        report = evaluate(_OracleModel(seg), seg, sets)
        for levels in report.results.values():
            for m in levels.values():
                p, r = m.precision / 100, m.recall / 100
                assert abs(m.f1 - 100 * f_beta(p, r, 1.0)) < 1e-9
                assert abs(m.f2 - 100 * f_beta(p, r, 2.0)) < 1e-9

    def test_channel_map_mismatch_rejected(self, rng):
        seg = _segments(rng)
        other = _segments(rng, n_channels=5)
        from epiwave.metrics import evaluate

        sets = make_eval_sets(seg, ratios=[(1, 5)], seed=0)
        with pytest.raises(MappingError):
            evaluate(_OracleModel(other), seg, sets)

    def test_report_json_round_trip(self, rng, tmp_path):
        seg = _segments(rng)
        from epiwave.metrics import evaluate

        sets = make_eval_sets(seg, ratios=[(1, 5)], seed=0)
        report = evaluate(_OracleModel(seg), seg, sets, metadata={"seed": 0})
        path = report.save(tmp_path / "report.json")
        loaded = MetricsReport.load(path)
        assert loaded.to_dict() == report.to_dict()

    def test_auto_count_uses_most_imbalanced_ratio(self, rng):
        seg = _segments(rng, n=300, pos_rate=0.05)
        n_pos = int((seg.channel_labels == 1).sum())
        n_neg = int((seg.channel_labels == 0).sum())
        sets = make_eval_sets(seg, ratios=[(1, 5), (1, 50)], seed=0)
        expected = min(n_pos, n_neg // 50)
        labels = seg.channel_labels
        for label, es in sets.items():
            pos = labels[es.segment_indices][es.pair_mask].sum()
            assert pos == expected

    def test_infeasible_auto_count(self, rng):
        seg = _segments(rng, n=20, pos_rate=0.0)
        with pytest.raises(SamplingInfeasibleError):
            make_eval_sets(seg, ratios=[(1, 5)], seed=0)
