import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from det3d.evalmetrics import (
    DetectionEvaluator,
    average_precision,
    evaluate,
    heading_accuracy,
    match_detections,
)
from det3d.geom import Box3D
from det3d.structures import Detection, GroundTruthObject

from oracles import brute_force_ap


def car(cx, yaw=0.0, cls=0):
    return Box3D(cx, 0, 0, 4, 2, 1.5, yaw)


def gt(cx, cls=0, yaw=0.0, frame="f"):
    return GroundTruthObject(car(cx, yaw), cls, frame)


def det(cx, score, cls=0, yaw=0.0, frame="f"):
    return Detection(car(cx, yaw), cls, score, frame_id=frame)


class TestMatching:
    def test_perfect(self):
        m = match_detections([det(0, 0.9)], [gt(0)])
        assert m.gt_index.tolist() == [0] and m.iou[0] == 1.0 and m.heading[0] == 1.0

    def test_heading_reversed(self):
        m = match_detections([det(0, 0.9, yaw=math.pi)], [gt(0)])
        assert m.gt_index[0] == 0 and m.heading[0] == 0.0

    def test_wrong_class(self):
        m = match_detections([det(0, 0.9, cls=1)], [gt(0)])
        assert m.gt_index[0] == -1

    def test_each_gt_once(self):
        m = match_detections([det(0, 0.9), det(0.05, 0.8)], [gt(0)])
        assert m.gt_index.tolist() == [0, -1]

    def test_best_iou_wins(self):
        m = match_detections([det(0.3, 0.9)], [gt(0), gt(0.35)])
        assert m.gt_index[0] == 1

    def test_thresholds(self):
        # 3D IoU of 4 m cars offset by 1 m is 0.6
        assert match_detections([det(1.0, 0.9)], [gt(0)]).gt_index[0] == -1
        assert match_detections([det(1.0, 0.9)], [gt(0)], {0: 0.5}).gt_index[0] == 0

    @pytest.mark.parametrize("delta, h", [(0.0, 1.0), (math.pi / 2, 0.5), (-math.pi / 2, 0.5), (math.pi, 0.0), (2 * math.pi, 1.0)])
    def test_heading_formula(self, delta, h):
        assert heading_accuracy(0.3 + delta, 0.3) == pytest.approx(h, abs=1e-12)


class TestAveragePrecision:
    def test_one_tp_one_fp(self):
        assert average_precision([0.9, 0.5], [1, 0], [1, 0], 2) == 0.5

    def test_aph_half_heading(self):
        assert average_precision([0.9, 0.5], [1, 0], [0.5, 0], 2, heading_weighted=True) == pytest.approx(0.25, abs=1e-12)

    def test_all_false(self):
        assert average_precision([0.9, 0.5], [0, 0], [0, 0], 3) == 0.0

    def test_no_gt_is_absent(self):
        assert average_precision([0.9], [0], [0], 0) is None

    def test_interpolation(self):
        # TP FP TP over 2 gts: PR points (0.5,1) (0.5,0.5) (1,2/3)
        assert average_precision([0.9, 0.8, 0.7], [1, 0, 1], [1, 0, 1], 2) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)

    @settings(max_examples=300)
    @given(
        st.integers(1, 5).flatmap(
            lambda n: st.tuples(
                st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n, unique=True),
                st.lists(st.booleans(), min_size=n, max_size=n),
                st.lists(st.floats(0, 1), min_size=n, max_size=n),
            )
        ),
        st.integers(1, 3),
    )
    def test_brute_force_equivalence(self, case, num_gt):
        scores, tp, heading = case
        tp = [float(t) for t in tp]
        if sum(tp) > num_gt:
            num_gt = int(sum(tp))
        for weighted in (False, True):
            got = average_precision(scores, tp, heading, num_gt, weighted)
            assert got == pytest.approx(brute_force_ap(scores, tp, heading, num_gt, weighted), abs=1e-12)
        assert average_precision(scores, tp, heading, num_gt, True) <= average_precision(scores, tp, heading, num_gt) + 1e-15


def random_dataset(rng, frames=5):
    dets, gts = {}, {}
    for f in range(frames):
        fid = f"frame{f}"
        g = [gt(10.0 * k + rng.normal(0, 0.2), int(rng.integers(0, 2)), rng.uniform(-3, 3), fid) for k in range(rng.integers(0, 4))]
        d = [
            Detection(
                Box3D(o.box.cx + rng.normal(0, 0.5), rng.normal(0, 0.3), 0, 4, 2, 1.5, o.box.yaw + rng.normal(0, 1)),
                o.class_id, float(rng.random()), frame_id=fid,
            )
            for o in g if rng.random() < 0.8
        ]
        d += [det(rng.uniform(-50, 50), float(rng.random()), int(rng.integers(0, 2)), frame=fid) for _ in range(rng.integers(0, 3))]
        dets[fid], gts[fid] = d, g
    return dets, gts


class TestEvaluate:
    def test_perfect(self):
        gts = {"a": [gt(0, 0, frame="a"), gt(10, 1, frame="a")], "b": [gt(0, 2, frame="b")]}
        dets = {k: [Detection(o.box, o.class_id, 0.9, frame_id=k) for o in v] for k, v in gts.items()}
        res = evaluate(dets, gts)
        assert res.mAP == 1.0 and res.mAPH == 1.0

    def test_empty_detections(self):
        res = evaluate({}, {"a": [gt(0, 0, frame="a"), gt(10, 1, frame="a")]})
        assert res.mAP == 0.0 and all(m.ap == 0.0 for m in res.per_class.values())

    def test_half(self):
        gts = {"a": [gt(0, 0, frame="a"), gt(10, 1, frame="a")]}
        res = evaluate({"a": [det(0, 0.9, 0, frame="a")]}, gts)
        assert res.mAPH == 0.5

    def test_class_without_gt_absent(self):
        res = evaluate({"a": [det(0, 0.9, 3, frame="a")]}, {"a": [gt(0, 0, frame="a")]})
        assert res.per_class[3].ap is None and res.mAP == 0.0

    def test_aph_le_ap_random(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            res = evaluate(*random_dataset(rng))
            for m in res.per_class.values():
                if m.ap is not None:
                    assert m.aph <= m.ap + 1e-15

    def test_monotone_score_transform(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            dets, gts = random_dataset(rng)
            warped = {k: [d.with_score(d.score ** 3) for d in v] for k, v in dets.items()}
            a, b = evaluate(dets, gts), evaluate(warped, gts)
            assert a.to_dict()["per_class"] == b.to_dict()["per_class"]

    def test_frame_duplication(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            dets, gts = random_dataset(rng)
            dets2 = dict(dets)
            gts2 = dict(gts)
            for k in list(dets):
                dets2[k + "_dup"] = [Detection(d.box, d.class_id, d.score, frame_id=k + "_dup") for d in dets[k]]
                gts2[k + "_dup"] = [GroundTruthObject(o.box, o.class_id, k + "_dup") for o in gts[k]]
            a, b = evaluate(dets, gts), evaluate(dets2, gts2)
            for c, m in a.per_class.items():
                if m.ap is None:
                    continue
                assert b.per_class[c].ap == pytest.approx(m.ap, abs=1e-12)
                assert b.per_class[c].aph == pytest.approx(m.aph, abs=1e-12)

    def test_pr_csv(self, tmp_path):
        gts = {"a": [gt(0, frame="a"), gt(10, frame="a")]}
        res = evaluate({"a": [det(0, 0.9, frame="a"), det(30, 0.5, frame="a")]}, gts)
        res.write_pr_csv(tmp_path / "pr.csv")
        rows = list(csv.DictReader(open(tmp_path / "pr.csv")))
        assert [float(r["precision"]) for r in rows] == [1.0, 0.5]
        assert [float(r["recall"]) for r in rows] == [0.5, 0.5]

    def test_evaluator_estimator(self):
        gts = {"a": [gt(0, frame="a")]}
        ev = DetectionEvaluator(iou_thresholds={0: 0.5}).fit(gts)
        assert ev.score({"a": [det(0, 0.9, frame="a")]}) == 1.0
