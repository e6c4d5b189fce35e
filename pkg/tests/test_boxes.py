"""Box geometry: conversions, IoU/GIoU hand cases, rasterized oracle, bounds."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deco.boxes import (BoxError, box_iou_giou, boxes_cxcywh_to_xyxy,
                        boxes_xyxy_to_cxcywh, cxcywh_to_xyxy, iou_giou_matrix,
                        xyxy_to_cxcywh)


def random_xyxy(rng, n, lo=0.0, hi=100.0):
    x1 = rng.uniform(lo, hi - 1.0, n)
    y1 = rng.uniform(lo, hi - 1.0, n)
    w = rng.uniform(0.5, hi - x1)
    h = rng.uniform(0.5, hi - y1)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def raster_iou_giou(a, b, scale=1):
    """Pixel-counting oracle for integer-coordinate boxes.

    Exact because integer boxes cover whole unit cells; ``scale`` refines the
    grid for boxes given in halves, etc.
    """
    ax1, ay1, ax2, ay2 = (int(round(v * scale)) for v in a)
    bx1, by1, bx2, by2 = (int(round(v * scale)) for v in b)
    x_lo, x_hi = min(ax1, bx1), max(ax2, bx2)
    y_lo, y_hi = min(ay1, by1), max(ay2, by2)
    ga = np.zeros((y_hi - y_lo, x_hi - x_lo), dtype=bool)
    gb = np.zeros_like(ga)
    ga[ay1 - y_lo:ay2 - y_lo, ax1 - x_lo:ax2 - x_lo] = True
    gb[by1 - y_lo:by2 - y_lo, bx1 - x_lo:bx2 - x_lo] = True
    inter = np.count_nonzero(ga & gb)
    union = np.count_nonzero(ga | gb)
    enclose = ga.size
    iou = inter / union
    return iou, iou - (enclose - union) / enclose


class TestConversions:
    def test_roundtrip_scalar(self):
        box = (3.0, 4.0, 10.0, 6.0)
        assert xyxy_to_cxcywh(cxcywh_to_xyxy(box)) == pytest.approx(box)

    def test_roundtrip_arrays(self, rng):
        boxes = random_xyxy(rng, 50)
        back = boxes_cxcywh_to_xyxy(boxes_xyxy_to_cxcywh(boxes))
        np.testing.assert_allclose(back, boxes, atol=1e-12)

    def test_degenerate_rejected(self):
        with pytest.raises(BoxError):
            cxcywh_to_xyxy((0.5, 0.5, 0.0, 0.1))
        with pytest.raises(BoxError):
            xyxy_to_cxcywh((3.0, 1.0, 2.0, 4.0))


class TestGIoUHandCases:
    def test_minus_five_over_sixty_three(self):
        # 2x2 squares overlapping by one cell: inter 1, union 7, enclosure 9
        # -> iou 1/7, giou = 1/7 - 2/9 = -5/63
        iou, giou = box_iou_giou((0, 0, 2, 2), (1, 1, 3, 3))
        assert iou == pytest.approx(1.0 / 7.0, abs=1e-9)
        assert giou == pytest.approx(-5.0 / 63.0, abs=1e-9)

    def test_minus_one_third(self):
        # unit squares one unit apart on a line: union 2, enclosure 3
        _, giou = box_iou_giou((0, 0, 1, 1), (2, 0, 3, 1))
        assert giou == pytest.approx(-1.0 / 3.0, abs=1e-9)

    def test_identical_boxes_giou_one(self):
        iou, giou = box_iou_giou((1, 2, 5, 7), (1, 2, 5, 7))
        assert iou == pytest.approx(1.0, abs=1e-9)
        assert giou == pytest.approx(1.0, abs=1e-9)

    def test_corner_touching_squares(self):
        # inter 0, union 2, enclosure 4 -> giou -1/2
        _, giou = box_iou_giou((0, 0, 1, 1), (1, 1, 2, 2))
        assert giou == pytest.approx(-0.5, abs=1e-9)

    def test_overlap_with_tight_enclosure(self):
        # half-width shift, enclosure equals union so giou == iou == 1/3
        iou, giou = box_iou_giou((0, 0, 2, 1), (1, 0, 3, 1))
        assert iou == pytest.approx(1.0 / 3.0, abs=1e-9)
        assert giou == pytest.approx(iou, abs=1e-12)


class TestRasterOracle:
    def test_integer_boxes_match_raster(self, rng):
        for _ in range(500):
            a = np.sort(rng.integers(0, 12, size=2))
            b = np.sort(rng.integers(0, 12, size=2))
            while a[0] == a[1]:
                a = np.sort(rng.integers(0, 12, size=2))
            while b[0] == b[1]:
                b = np.sort(rng.integers(0, 12, size=2))
            ya = np.sort(rng.integers(0, 12, size=2))
            yb = np.sort(rng.integers(0, 12, size=2))
            while ya[0] == ya[1]:
                ya = np.sort(rng.integers(0, 12, size=2))
            while yb[0] == yb[1]:
                yb = np.sort(rng.integers(0, 12, size=2))
            box_a = (a[0], ya[0], a[1], ya[1])
            box_b = (b[0], yb[0], b[1], yb[1])
            iou, giou = box_iou_giou(box_a, box_b)
            r_iou, r_giou = raster_iou_giou(box_a, box_b)
            assert abs(iou - r_iou) < 1e-12
            assert abs(giou - r_giou) < 1e-12


class TestBounds:
    def test_giou_range_and_iou_dominance(self, rng):
        a = random_xyxy(rng, 10000)
        b = random_xyxy(rng, 10000)
        iou = np.empty(10000)
        giou = np.empty(10000)
        for i in range(10000):
            iou[i], giou[i] = box_iou_giou(a[i], b[i])
        assert np.all(giou >= -1.0) and np.all(giou <= 1.0)
        assert np.all(giou <= iou + 1e-15)
        assert np.all((iou >= 0.0) & (iou <= 1.0))

    def test_matrix_matches_scalar(self, rng):
        a = random_xyxy(rng, 7)
        b = random_xyxy(rng, 5)
        iou_m, giou_m = iou_giou_matrix(a, b)
        for i in range(7):
            for j in range(5):
                iou, giou = box_iou_giou(a[i], b[j])
                assert iou_m[i, j] == pytest.approx(iou, abs=1e-12)
                assert giou_m[i, j] == pytest.approx(giou, abs=1e-12)

    def test_matrix_shape_validation(self):
        with pytest.raises(BoxError):
            iou_giou_matrix(np.zeros((3, 3)), np.zeros((2, 4)))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12),
       st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12))
def test_giou_raster_property(ax, ay, aw, ah, bx, by, bw, bh):
    a = (ax, ay, ax + aw, ay + ah)
    b = (bx, by, bx + bw, by + bh)
    iou, giou = box_iou_giou(a, b)
    r_iou, r_giou = raster_iou_giou(a, b)
    assert abs(iou - r_iou) < 1e-12
    assert abs(giou - r_giou) < 1e-12
