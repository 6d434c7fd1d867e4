import math

import numpy as np
import pytest
import torch

from amieod.core import Annotation, BBox, Detection, LossBreakdown, ciou, ciou_xyxy, iou, iou_xyxy


def ciou_reference(a: BBox, b: BBox) -> float:
    """Independent scalar evaluation of the complete-IoU formula."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    i = inter / (a.area + b.area - inter)
    cw = max(a.x2, b.x2) - min(a.x1, b.x1)
    ch = max(a.y2, b.y2) - min(a.y1, b.y1)
    rho2 = ((a.x1 + a.x2) / 2 - (b.x1 + b.x2) / 2) ** 2 + ((a.y1 + a.y2) / 2 - (b.y1 + b.y2) / 2) ** 2
    v = 4 / math.pi**2 * (math.atan(a.width / a.height) - math.atan(b.width / b.height)) ** 2
    alpha = v / (1 - i + v + 1e-9)
    return i - rho2 / (cw * cw + ch * ch) - alpha * v


def random_box(rng) -> BBox:
    x1, y1 = rng.uniform(0, 80, size=2)
    w, h = rng.uniform(0.5, 60, size=2)
    return BBox(float(x1), float(y1), float(x1 + w), float(y1 + h))


class TestBBox:
    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            BBox(0, 0, 0, 2)
        with pytest.raises(ValueError):
            BBox(0, 5, 2, 5)
        with pytest.raises(ValueError):
            BBox(3, 0, 1, 2)

    def test_center_form_round_trip(self):
        b = BBox.from_cxcywh(50.0, 50.0, 25.0, 25.0)
        assert b.as_tuple() == (37.5, 37.5, 62.5, 62.5)

    def test_annotation_and_detection_validation(self):
        box = BBox(0, 0, 1, 1)
        with pytest.raises(ValueError):
            Annotation(box, -1)
        with pytest.raises(ValueError):
            Detection(box, 0, 1.5)


class TestIoU:
    def test_identical(self):
        b = BBox(0, 0, 2, 2)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0, 0, 1, 1), BBox(5, 5, 6, 6)) == 0.0

    def test_partial_overlap(self):
        # intersection 1x2 = 2, union 4 + 4 - 2 = 6
        assert iou(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            assert iou(a, b) == iou(b, a)


class TestCIoU:
    def test_identical_boxes(self):
        b = BBox(0, 0, 2, 2)
        assert ciou(b, b) == 1.0

    def test_same_center_same_aspect_equals_iou(self):
        a, b = BBox(0, 0, 4, 4), BBox(1, 1, 3, 3)
        assert iou(a, b) == pytest.approx(0.25, abs=1e-12)
        assert ciou(a, b) == pytest.approx(0.25, abs=1e-12)

    def test_corner_touching_regression(self):
        # disjoint squares touching at a corner: iou 0, center penalty 8/32
        a, b = BBox(0, 0, 2, 2), BBox(2, 2, 4, 4)
        got = ciou(a, b)
        assert got == pytest.approx(-0.25, abs=1e-9)
        assert got < iou(a, b)
        assert got == pytest.approx(ciou_reference(a, b), abs=1e-12)

    def test_matches_reference_on_random_pairs(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            a, b = random_box(rng), random_box(rng)
            assert ciou(a, b) == pytest.approx(ciou_reference(a, b), abs=1e-9)

    def test_bounds_hold_with_no_tolerance(self):
        rng = np.random.default_rng(3)
        for _ in range(10_000):
            a, b = random_box(rng), random_box(rng)
            i = iou(a, b)
            c = ciou(a, b)
            assert 0.0 <= i <= 1.0
            assert c <= i
            assert -2.0 < c <= 1.0

    def test_degenerate_rejected(self):
        good = BBox(0, 0, 2, 2)

        class Fake:
            x1, y1, x2, y2 = 0.0, 0.0, 0.0, 2.0

        with pytest.raises(ValueError):
            iou(good, Fake())
        with pytest.raises(ValueError):
            ciou(good, Fake())


class TestTensorForms:
    def test_matches_scalar(self):
        rng = np.random.default_rng(5)
        boxes_a, boxes_b, want_iou, want_ciou = [], [], [], []
        for _ in range(128):
            a, b = random_box(rng), random_box(rng)
            boxes_a.append(a.as_tuple())
            boxes_b.append(b.as_tuple())
            want_iou.append(iou(a, b))
            want_ciou.append(ciou(a, b))
        ta = torch.tensor(boxes_a, dtype=torch.float64)
        tb = torch.tensor(boxes_b, dtype=torch.float64)
        assert torch.allclose(iou_xyxy(ta, tb), torch.tensor(want_iou, dtype=torch.float64), atol=1e-9)
        assert torch.allclose(ciou_xyxy(ta, tb), torch.tensor(want_ciou, dtype=torch.float64), atol=1e-9)

    def test_differentiable(self):
        a = torch.tensor([1.0, 1.0, 5.0, 4.0], dtype=torch.float64, requires_grad=True)
        b = torch.tensor([2.0, 0.5, 6.0, 5.0], dtype=torch.float64)
        ciou_xyxy(a, b).backward()
        assert a.grad is not None and torch.isfinite(a.grad).all()


def test_loss_breakdown_floats():
    lb = LossBreakdown(torch.tensor(0.5), torch.tensor(1.0), torch.tensor(0.25), torch.tensor(1.75))
    f = lb.floats()
    assert (f.box_loss, f.obj_loss, f.cls_loss, f.total) == (0.5, 1.0, 0.25, 1.75)
