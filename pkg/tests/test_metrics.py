import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unigrounder.metrics import (MetricConfig, MetricContractError, Report, Tube, average_precision, box_iou,
                                 mean_box_iou_in_hits, random_baselines, random_boxes, recall_at_k, recall_table,
                                 recovery, st_tube_iou, success, temporal_iou, vq2d_metrics)


def tube(s, e, box=(0.5, 0.5, 0.2, 0.2)):
    return Tube(s, e, np.tile(box, (e - s + 1, 1)))


segments = st.tuples(st.integers(0, 50), st.integers(0, 20)).map(lambda x: (x[0], x[0] + x[1]))


class TestTemporalIoU:
    def test_examples(self):
        assert temporal_iou((3, 9), (3, 9)) == 1.0
        assert temporal_iou((0, 10), (5, 15)) == pytest.approx(6 / 16)
        assert temporal_iou((0, 4), (5, 9)) == 0.0

    @given(segments, segments)
    def test_symmetric_bounded(self, a, b):
        v = temporal_iou(a, b)
        assert v == temporal_iou(b, a)
        assert 0.0 <= v <= 1.0
        assert (v == 1.0) == (a == b)


class TestTubeIoU:
    def test_identical(self):
        assert st_tube_iou(tube(2, 6), tube(2, 6)) == pytest.approx(1.0)

    def test_disjoint(self):
        assert st_tube_iou(tube(0, 3), tube(5, 8)) == 0.0

    def test_half_overlap(self):
        a = tube(0, 4, (0.5, 0.5, 0.2, 0.2))
        b = tube(0, 4, (0.6, 0.5, 0.2, 0.2))
        assert st_tube_iou(a, b) == pytest.approx(1 / 3)
        assert success(a, b)

    def test_non_shared_frames_in_denominator(self):
        a, b = tube(0, 3), tube(2, 5)
        assert st_tube_iou(a, b) == pytest.approx(2 / 6)

    @settings(max_examples=100, deadline=None)
    @given(segments, segments, st.integers(0, 1000))
    def test_symmetric_bounded(self, sa, sb, seed):
        rng = np.random.default_rng(seed)
        a = Tube(*sa, random_boxes(rng, sa[1] - sa[0] + 1, "random_boxes"))
        b = Tube(*sb, random_boxes(rng, sb[1] - sb[0] + 1, "random_boxes"))
        v = st_tube_iou(a, b)
        assert v == pytest.approx(st_tube_iou(b, a), abs=1e-12)
        assert 0.0 <= v <= 1.0
        assert st_tube_iou(a, a) == pytest.approx(1.0)

    def test_box_count_checked(self):
        with pytest.raises(MetricContractError):
            Tube(0, 3, np.zeros((2, 4)))


class TestRecoverySuccess:
    def test_identical(self):
        assert recovery(tube(0, 9), tube(0, 9)) == 100.0
        assert success(tube(0, 9), tube(0, 9))

    def test_shifted_boxes_below_threshold(self):
        # width 0.2 boxes offset by 0.0857: IoU = 0.1143/0.2857 = 0.4
        gt = tube(0, 9)
        pred = tube(0, 9, (0.5 + 0.2 * 3 / 7, 0.5, 0.2, 0.2))
        assert box_iou(pred.boxes[0], gt.boxes[0]) == pytest.approx(0.4)
        assert recovery(pred, gt) == 0.0

    def test_half_frames(self):
        gt = tube(0, 9)
        boxes = np.tile([0.5, 0.5, 0.2, 0.2], (10, 1))
        boxes[5:] = [0.1, 0.1, 0.05, 0.05]
        assert recovery(Tube(0, 9, boxes), gt) == 50.0

    def test_frames_outside_gt_fail(self):
        assert recovery(tube(0, 9), tube(0, 4)) == 50.0

    def test_disjoint_not_success(self):
        assert not success(tube(0, 3), tube(10, 12))


def brute_ap(samples, iou_fn, thr):
    """Sweep every score threshold; re-match from scratch at each; integrate the envelope."""
    scores = sorted({s for preds, _ in samples for _, s in preds}, reverse=True)
    n_gt = sum(len(g) for _, g in samples)
    points = []
    for tau in scores:
        kept = sorted(((s, si, ri, p) for si, (preds, _) in enumerate(samples)
                       for ri, (p, s) in enumerate(preds) if s >= tau), key=lambda x: (-x[0], x[1], x[2]))
        used = {si: set() for si in range(len(samples))}
        tp = 0
        for _, si, _, p in kept:
            cands = [(iou_fn(p, g), gi) for gi, g in enumerate(samples[si][1]) if gi not in used[si]]
            cands = [c for c in cands if c[0] >= thr]
            if cands:
                used[si].add(max(cands, key=lambda c: (c[0], -c[1]))[1])
                tp += 1
        points.append((tp / n_gt, tp / len(kept)))
    ap, prev = 0.0, 0.0
    for r in sorted({r for r, _ in points}):
        ap += (r - prev) * max(p for rr, p in points if rr >= r)
        prev = r
    return ap


def brute_recall(samples, k, m, mode):
    if mode == "nlq":
        hit = [max((temporal_iou(p, g) for p in preds[:k] for g in gts), default=0) >= m for preds, gts in samples]
    else:
        hit = [any(temporal_iou(p, g) >= m for p in preds[:k]) for preds, gts in samples for g in gts]
    return 100.0 * sum(hit) / len(hit)


def random_instance(rng):
    samples = []
    for _ in range(int(rng.integers(1, 5))):
        gts = []
        for _ in range(int(rng.integers(1, 4))):
            s = int(rng.integers(0, 30))
            gts.append((s, s + int(rng.integers(0, 10))))
        preds = []
        for _ in range(int(rng.integers(0, 7))):
            s = int(rng.integers(0, 30))
            preds.append(((s, s + int(rng.integers(0, 10))), float(rng.uniform())))
        samples.append((preds, gts))
    return samples


class TestAP:
    def test_single_hit(self):
        assert average_precision([([((0, 5), 0.9)], [(0, 5)])]) == 1.0

    def test_miss_then_hit(self):
        assert average_precision([([((20, 25), 0.9), ((0, 5), 0.5)], [(0, 5)])]) == pytest.approx(0.5)

    def test_unscored_rejected(self):
        with pytest.raises(MetricContractError):
            average_precision([([((0, 5), None)], [(0, 5)])])

    def test_no_predictions(self):
        assert average_precision([([], [(0, 5)])]) == 0.0

    @pytest.mark.parametrize("seed", range(100))
    def test_brute_force_oracle(self, seed):
        samples = random_instance(np.random.default_rng(seed))
        expect = brute_ap(samples, temporal_iou, 0.25) if any(p for p, _ in samples) else 0.0
        assert abs(average_precision(samples, temporal_iou, 0.25) - expect) < 1e-9

    @pytest.mark.parametrize("seed", range(30))
    def test_rank_only(self, seed):
        samples = random_instance(np.random.default_rng(seed))
        warped = [([(p, np.exp(3 * s) - 7.0) for p, s in preds], gts) for preds, gts in samples]
        assert average_precision(samples) == pytest.approx(average_precision(warped), abs=1e-12)


class TestRecall:
    def test_perfect(self):
        assert recall_at_k([([(0, 5)], [(0, 5)])] * 3, 1, 0.5) == 100.0

    def test_threshold_example(self):
        s = [([(0, 10)], [(5, 15)])]
        assert recall_at_k(s, 1, 0.5) == 0.0
        assert recall_at_k(s, 1, 0.3) == 100.0

    def test_mq_counts_instances(self):
        s = [([(0, 5), (50, 60)], [(0, 5), (20, 25), (50, 60)])]
        assert recall_at_k(s, 5, 0.5, "mq") == pytest.approx(200 / 3)
        assert recall_at_k(s, 5, 0.5, "nlq") == 100.0

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            recall_at_k([], 0, 0.3)

    @pytest.mark.parametrize("seed", range(100))
    @pytest.mark.parametrize("mode", ["nlq", "mq"])
    def test_brute_force_oracle(self, seed, mode):
        samples = [([p for p, _ in preds], gts) for preds, gts in random_instance(np.random.default_rng(seed))]
        for k in (1, 5):
            for m in (0.3, 0.5):
                assert abs(recall_at_k(samples, k, m, mode) - brute_recall(samples, k, m, mode)) < 1e-9

    def test_table_keys(self):
        keys = list(recall_table([([(0, 5)], [(0, 5)])], "nlq"))
        assert keys == ["r@1/tIoU0.3", "r@5/tIoU0.3", "r@1/tIoU0.5", "r@5/tIoU0.5"]


class TestBaselinesAndReports:
    def _gt_set(self, n=30, centered=True):
        rng = np.random.default_rng(0)
        items = []
        for _ in range(n):
            t = int(rng.integers(60, 120))
            s = int(rng.integers(0, t - 10))
            box = (0.5, 0.5, 0.4, 0.4) if centered else tuple(rng.uniform(0.2, 0.8, 2)) + (0.2, 0.2)
            items.append((t, [(s, s + 6)], tube(s, s + 6, box)))
        return {"vq2d": items, "nlq": [(t, segs, None) for t, segs, _ in items]}

    def test_centered_gt_nonzero_success(self):
        full = {"vq2d": [(40, [(0, 39)], tube(0, 39, (0.5, 0.5, 1.0, 1.0)))]}
        out = random_baselines(full, "random_centered", seed=0, repeats=5)
        assert out["mean"]["vq2d"]["Succ"] > 0

    def test_centered_beats_uniform_on_centered_gt(self):
        gts = self._gt_set()
        cen = random_baselines(gts, "random_centered", seed=0, repeats=5)["mean"]["vq2d"]["stAP25"]
        uni = random_baselines(gts, "random_boxes", seed=0, repeats=5)["mean"]["vq2d"]["stAP25"]
        assert uni <= cen

    def test_repeats_deterministic(self):
        gts = self._gt_set()
        one = random_baselines(gts, "random_centered", seed=3, repeats=1)["per_seed"]
        five = random_baselines(gts, "random_centered", seed=3, repeats=5)["per_seed"]
        assert one[0] == five[0]

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            random_boxes(np.random.default_rng(0), 3, "gaussian")

    def test_vq2d_report_keys_and_table(self):
        vals = vq2d_metrics([(tube(0, 5), 0.9, tube(0, 5)), (None, 0.0, tube(3, 4))])
        assert list(vals) == ["tAP25", "stAP25", "rec%", "Succ"]
        assert vals["tAP25"] == pytest.approx(0.5)
        assert vals["Succ"] == 50.0
        text = Report({"vq2d": vals}).table()
        assert text.splitlines()[1].split()[:2] == ["vq2d", "tAP25"]

    def test_box_iou_in_hits(self):
        assert mean_box_iou_in_hits([(tube(0, 5), tube(0, 5)), (tube(20, 25), tube(0, 5))]) == pytest.approx(1.0)
        assert mean_box_iou_in_hits([]) == 0.0

    def test_config_defaults(self):
        cfg = MetricConfig()
        assert (cfg.tap_tiou, cfg.recall_tious, cfg.recovery_box_iou, cfg.success_iou) == (0.25, (0.3, 0.5), 0.5, 0.05)
