from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detfuse.evaluation import (
    DEFAULT_IOU_THRESHOLDS,
    GroundTruth,
    average_precision,
    evaluate,
    interpolated_ap,
    match,
    parse_iou_thresholds,
)
from detfuse.fusion import DetectionSet
from detfuse.geometry import BBox, iou

from conftest import boxes


# ---------------------------------------------------------------------------
# brute-force oracle with exact rational arithmetic


def oracle_ap(preds, gts, class_id, thr):
    npos = sum(1 for g in gts.values() for b in g.boxes if b.class_id == class_id)
    if npos == 0:
        return None
    ranked = []
    for img_idx, image_id in enumerate(gts):
        gt = gts[image_id].boxes
        ps = list(preds[image_id].boxes) if image_id in preds else []
        order = sorted(range(len(ps)), key=lambda i: (-ps[i].confidence, i))
        used = set()
        for rank, p in enumerate(order):
            best, best_iou = None, None
            for g, gb in enumerate(gt):
                if g in used or gb.class_id != ps[p].class_id:
                    continue
                v = iou(ps[p], gb)
                if v >= thr and (best is None or v > best_iou):
                    best, best_iou = g, v
            if best is not None:
                used.add(best)
            if ps[p].class_id == class_id:
                ranked.append((-ps[p].confidence, img_idx, rank, best is not None))
    ranked.sort()
    points, tp = [], 0
    for i, (_, _, _, hit) in enumerate(ranked, start=1):
        tp += hit
        points.append((Fraction(tp, npos), Fraction(tp, i)))
    total = Fraction(0)
    for k in range(101):
        r = Fraction(k, 100)
        reachable = [p for rec, p in points if rec >= r]
        total += max(reachable) if reachable else 0
    return total / 101


@st.composite
def small_datasets(draw, max_images=4, max_boxes=5):
    n = draw(st.integers(1, max_images))
    gts, preds = {}, {}
    for i in range(n):
        image_id = f"im{i}"
        gts[image_id] = GroundTruth(image_id, tuple(draw(st.lists(boxes(2, 20, 1.0), max_size=max_boxes))))
        pb = draw(st.lists(boxes(2, 20), max_size=max_boxes))
        # copies of GT boxes with small offsets produce realistic matches
        for g in gts[image_id].boxes:
            if draw(st.booleans()):
                dx = draw(st.sampled_from([0.0, 0.5, 1.0, 3.0]))
                conf = draw(st.integers(0, 20)) / 20
                pb.append(BBox(g.x_min + dx, g.y_min, g.x_max + dx, g.y_max, g.class_id, conf))
        if pb or draw(st.booleans()):
            preds[image_id] = DetectionSet(image_id, "m", None, tuple(pb[:max_boxes]))
    return preds, gts


class TestMatch:
    GT = GroundTruth("i", (BBox(0, 0, 10, 10, 0), BBox(20, 20, 30, 30, 1)))

    def test_self_match(self):
        res = match(DetectionSet("i", "m", None, self.GT.boxes), self.GT, 0.5)
        assert sorted((p, g) for p, g, _ in res.matches) == [(0, 0), (1, 1)]
        assert res.false_positives == () and res.false_negatives == ()

    def test_no_predictions(self):
        res = match(DetectionSet("i"), self.GT, 0.5)
        assert res.matches == () and res.false_negatives == (0, 1)

    def test_confidence_priority(self):
        gt = GroundTruth("i", (BBox(0, 0, 10, 10, 0),))
        low_iou = BBox(0, 0, 10, 7, 0, 0.9)
        high_iou = BBox(0, 0, 10, 9, 0, 0.8)
        assert iou(low_iou, gt.boxes[0]) == pytest.approx(0.7)
        assert iou(high_iou, gt.boxes[0]) == pytest.approx(0.9)
        res = match(DetectionSet("i", "m", None, (high_iou, low_iou)), gt, 0.5)
        assert [(p, g) for p, g, _ in res.matches] == [(1, 0)]
        assert res.false_positives == (0,)

    def test_highest_iou_then_lowest_index(self):
        gt = GroundTruth("i", (BBox(0, 0, 10, 10, 0), BBox(0, 0, 10, 10, 0), BBox(0, 0, 10, 12, 0)))
        res = match(DetectionSet("i", "m", None, (BBox(0, 0, 10, 10, 0, 0.5),)), gt, 0.5)
        assert res.matches[0][:2] == (0, 0)

    def test_class_aware(self):
        gt = GroundTruth("i", (BBox(0, 0, 10, 10, 0),))
        res = match(DetectionSet("i", "m", None, (BBox(0, 0, 10, 10, 1, 0.9),)), gt, 0.5)
        assert res.matches == () and res.false_positives == (0,)

    def test_image_mismatch(self):
        with pytest.raises(ValueError):
            match(DetectionSet("j"), self.GT, 0.5)


class TestInterpolatedAP:
    def test_perfect(self):
        assert interpolated_ap([True] * 4, 4) == 1.0

    def test_no_true_positive(self):
        assert interpolated_ap([False] * 3, 2) == 0.0
        assert interpolated_ap([], 2) == 0.0

    def test_no_positives(self):
        assert interpolated_ap([False], 0) is None

    def test_hand_staircase(self):
        # 5 GT, TP at ranks 1, 2, 4: precision 1 up to recall 0.4 (41 points),
        # 0.75 for recall 0.41 .. 0.60 (20 points), nothing beyond
        flags = [True, True, False, True, False, False, False]
        assert interpolated_ap(flags, 5) == pytest.approx(56 / 101, abs=1e-12)


class TestAveragePrecision:
    def hand_fixture(self):
        gts = GroundTruth("i", tuple(BBox(20 * k, 0, 20 * k + 10, 10, 0) for k in range(5)))
        confs = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3]
        targets = [0, 1, None, 2, None, None, None]
        preds = []
        for c, t in zip(confs, targets):
            if t is None:
                preds.append(BBox(0, 50, 10, 60, 0, c))
            else:
                preds.append(BBox(20 * t, 0, 20 * t + 10, 10, 0, c))
        return {"i": DetectionSet("i", "m", None, tuple(preds))}, {"i": gts}

    def test_hand_fixture(self):
        preds, gts = self.hand_fixture()
        assert average_precision(preds, gts, 0, 0.5) == pytest.approx(56 / 101, abs=1e-9)
        assert oracle_ap(preds, gts, 0, 0.5) == Fraction(56, 101)

    def test_absent_class(self):
        preds, gts = self.hand_fixture()
        assert average_precision(preds, gts, 3, 0.5) is None

    @settings(max_examples=300, deadline=None)
    @given(small_datasets(), st.sampled_from([0.3, 0.5, 0.75, 0.95]))
    def test_oracle_equivalence(self, data, thr):
        preds, gts = data
        for c in (0, 1):
            expected = oracle_ap(preds, gts, c, thr)
            got = average_precision(preds, gts, c, thr)
            if expected is None:
                assert got is None
            else:
                assert abs(got - float(expected)) <= 1e-9

    @settings(max_examples=200, deadline=None)
    @given(small_datasets(), st.sampled_from(["square", "sqrt", "affine"]))
    def test_rank_only_dependence(self, data, how):
        preds, gts = data
        f = {"square": lambda c: c * c, "sqrt": lambda c: c ** 0.5, "affine": lambda c: 0.1 + 0.5 * c}[how]
        moved = {k: v.with_boxes([b.with_confidence(f(b.confidence)) for b in v.boxes]) for k, v in preds.items()}
        for c in (0, 1):
            assert average_precision(moved, gts, c, 0.5) == average_precision(preds, gts, c, 0.5)

    @settings(max_examples=200, deadline=None)
    @given(small_datasets(), st.sampled_from([0.5, 0.75]), st.integers(0, 100))
    def test_removing_false_positive_never_lowers_ap(self, data, thr, pick):
        preds, gts = data
        fps = []
        for image_id, ds in preds.items():
            res = match(ds, gts[image_id], thr)
            fps.extend((image_id, p) for p in res.false_positives)
        if not fps:
            return
        image_id, p = fps[pick % len(fps)]
        ds = preds[image_id]
        cls = ds.boxes[p].class_id
        reduced = dict(preds)
        reduced[image_id] = ds.with_boxes(b for i, b in enumerate(ds.boxes) if i != p)
        before = average_precision(preds, gts, cls, thr)
        after = average_precision(reduced, gts, cls, thr)
        if before is not None:
            assert after >= before - 1e-12

    @settings(max_examples=200, deadline=None)
    @given(small_datasets(), st.integers(0, 100))
    def test_removing_true_positive_never_raises_recall(self, data, pick):
        preds, gts = data
        tps = []
        for image_id, ds in preds.items():
            res = match(ds, gts[image_id], 0.5)
            tps.extend((image_id, p) for p, _, _ in res.matches)
        if not tps:
            return
        image_id, p = tps[pick % len(tps)]
        ds = preds[image_id]
        cls = ds.boxes[p].class_id
        reduced = dict(preds)
        reduced[image_id] = ds.with_boxes(b for i, b in enumerate(ds.boxes) if i != p)
        r0 = evaluate(preds, gts, operating_threshold=0.0).recall_at[cls, 0.5]
        r1 = evaluate(reduced, gts, operating_threshold=0.0).recall_at[cls, 0.5]
        assert r1 <= r0


def shifted_fixture(n_images=3):
    gts, preds = {}, {}
    for i in range(n_images):
        gt_boxes, pred_boxes = [], []
        for k in range(3):
            x, y, w = 300 * k, 50 * i, 100 + 40 * k
            gt_boxes.append(BBox(x, y, x + w, y + 100, k % 2))
            pred_boxes.append(BBox(x + w / 4, y, x + w + w / 4, y + 100, k % 2, 0.9 - 0.1 * k))
        gts[f"im{i}"] = GroundTruth(f"im{i}", tuple(gt_boxes))
        preds[f"im{i}"] = DetectionSet(f"im{i}", "m", None, tuple(pred_boxes))
    return preds, gts


class TestEvaluate:
    def test_self_evaluation_identity(self):
        gts = {"a": GroundTruth("a", (BBox(0, 0, 10, 10, 0), BBox(5, 5, 30, 40, 2))), "b": GroundTruth("b", (BBox(1, 1, 2, 2, 1),))}
        preds = {k: DetectionSet(k, "gt", None, v.boxes) for k, v in gts.items()}
        r = evaluate(preds, gts)
        assert r.summary() == dict.fromkeys(r.COLUMNS, 1.0)

    def test_constructed_shift(self):
        preds, gts = shifted_fixture()
        for ds in preds.values():
            for p, g in zip(ds.boxes, gts[ds.image_id].boxes):
                assert iou(p, g) == pytest.approx(0.6, abs=1e-15)
        r = evaluate(preds, gts)
        assert r.map_50 == 1.0
        assert r.map_75 == 0.0
        assert abs(r.miou - 0.6) <= 1e-9
        assert r.map_50_95 == pytest.approx(0.3, abs=1e-12)

    def test_empty_predictions(self):
        _, gts = shifted_fixture()
        r = evaluate({}, gts)
        assert r.recall == 0.0 and r.map_50 == 0.0 and r.precision is None and r.miou is None

    def test_unknown_image(self):
        _, gts = shifted_fixture()
        with pytest.raises(ValueError, match="ghost"):
            evaluate({"ghost": DetectionSet("ghost")}, gts)

    def test_precision_recall_operating_point(self):
        gts = {"a": GroundTruth("a", (BBox(0, 0, 10, 10, 0), BBox(20, 0, 30, 10, 0)))}
        preds = {"a": DetectionSet("a", "m", None, (
            BBox(0, 0, 10, 10, 0, 0.9), BBox(50, 50, 60, 60, 0, 0.7), BBox(20, 0, 30, 10, 0, 0.3)))}
        r = evaluate(preds, gts)
        assert r.precision == 0.5 and r.recall == 0.5
        r = evaluate(preds, gts, operating_threshold={0: 0.2})
        assert r.precision == pytest.approx(2 / 3) and r.recall == 1.0

    def test_macro_and_micro(self):
        gts = {"a": GroundTruth("a", (BBox(0, 0, 10, 10, 0), BBox(20, 0, 30, 10, 1), BBox(40, 0, 50, 10, 1)))}
        preds = {"a": DetectionSet("a", "m", None, (BBox(0, 0, 10, 10, 0, 0.9), BBox(20, 0, 30, 10, 1, 0.9)))}
        assert evaluate(preds, gts).recall == pytest.approx(0.75)
        assert evaluate(preds, gts, average="micro").recall == pytest.approx(2 / 3)

    def test_miou_best_mode(self):
        gts = {"a": GroundTruth("a", (BBox(0, 0, 10, 10, 0), BBox(100, 100, 110, 110, 0)))}
        preds = {"a": DetectionSet("a", "m", None, (BBox(0, 0, 10, 4, 0, 0.9),))}
        assert evaluate(preds, gts).miou is None
        assert evaluate(preds, gts, miou_mode="best").miou == pytest.approx(0.2)

    def test_max_dets(self):
        gts = {"a": GroundTruth("a", (BBox(0, 0, 10, 10, 0), BBox(20, 0, 30, 10, 0)))}
        preds = {"a": DetectionSet("a", "m", None, (BBox(0, 0, 10, 10, 0, 0.9), BBox(20, 0, 30, 10, 0, 0.8)))}
        assert evaluate(preds, gts, max_dets=1).map_50 < 1.0

    @settings(max_examples=100, deadline=None)
    @given(small_datasets())
    def test_map_50_95_is_mean_of_thresholds(self, data):
        preds, gts = data
        r = evaluate(preds, gts)
        if r.map_50_95 is not None:
            assert len(r.map_per_threshold) == 10
            assert abs(r.map_50_95 - sum(r.map_per_threshold) / 10) <= 1e-12
            for v in (r.map_50, r.map_75, r.map_50_95, r.precision, r.recall, r.miou):
                assert v is None or 0.0 <= v <= 1.0

    def test_report_formats(self):
        preds, gts = shifted_fixture()
        r = evaluate(preds, gts)
        table = r.to_table()
        lines = table.splitlines()
        assert "mIoU" in lines[0]
        assert [c.strip() for c in lines[2].strip("|").split("|")] == list(r.COLUMNS)
        assert [c.strip() for c in lines[4].strip("|").split("|")] == ["1.000", "1.000", "1.000", "0.000", "0.300", "0.600"]
        assert '"mAP_50": 1.0' in r.to_json()
        assert r.to_csv().startswith("metric,value\n")


class TestThresholdParsing:
    def test_default_range(self):
        assert parse_iou_thresholds("0.5:0.95:0.05") == DEFAULT_IOU_THRESHOLDS
        assert DEFAULT_IOU_THRESHOLDS[0] == 0.5 and DEFAULT_IOU_THRESHOLDS[5] == 0.75 and len(DEFAULT_IOU_THRESHOLDS) == 10

    def test_list(self):
        assert parse_iou_thresholds("0.5,0.75") == (0.5, 0.75)

    @pytest.mark.parametrize("text", ["0.9:0.5:0.05", "0:1:0.1", "1.5"])
    def test_bad(self, text):
        with pytest.raises(ValueError):
            parse_iou_thresholds(text)
