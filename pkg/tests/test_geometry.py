import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iqdet.geometry import (
    Box, DomainError, PyramidSpec, decode_box, denormalize_offset, iou, iou_matrix,
    normalize_offset, regression_target,
)
from oracles import raster_iou


def test_iou_identity_and_disjoint():
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box(20, 20, 30, 30)) == 0.0


def test_iou_half_overlap_matches_raster():
    a, b = Box(0, 0, 10, 10), Box(0, 0, 10, 20)
    assert iou(a, b) == pytest.approx(0.5, abs=1e-15)
    assert raster_iou(a.to_list(), b.to_list()) == pytest.approx(0.5, abs=1e-12)


def test_degenerate_box_rejected():
    with pytest.raises(DomainError):
        Box(0, 0, 0, 10)
    with pytest.raises(DomainError):
        Box(0, 0, float("nan"), 1)


int_box = st.tuples(st.integers(0, 63), st.integers(0, 63), st.integers(1, 64), st.integers(1, 64)).map(
    lambda t: (t[0], t[1], min(t[0] + t[2], 64), min(t[1] + t[3], 64))).filter(
    lambda b: b[2] > b[0] and b[3] > b[1])


@settings(max_examples=60, deadline=None)
@given(int_box, int_box)
def test_iou_against_rasterization(a, b):
    assert iou(Box(*a), Box(*b)) == pytest.approx(raster_iou(a, b), abs=1e-6)


real_box = st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 40), st.floats(0.01, 40)).map(
    lambda t: Box(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=200, deadline=None)
@given(real_box, real_box)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert iou(a, a) == pytest.approx(1.0)


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 50, (20, 2))
    wh = rng.uniform(1, 20, (20, 2))
    arr = np.concatenate([xy, xy + wh], axis=1)
    boxes = [Box(*r) for r in arr]
    m = iou_matrix(arr, arr)
    for i in range(20):
        for j in range(20):
            assert m[i, j] == pytest.approx(iou(boxes[i], boxes[j]), abs=1e-14)


@pytest.mark.parametrize("point,expected", [
    ((5, 5), (0.0, 0.0)),
    ((10, 5), (1.0, 0.0)),
    ((2.5, 7.5), (-0.5, 0.5)),
    ((0, 0), (-1.0, -1.0)),
    ((10, 10), (1.0, 1.0)),
])
def test_normalize_offset(point, expected):
    assert normalize_offset(point, Box(0, 0, 10, 10)) == pytest.approx(expected)


def test_offset_round_trip():
    gt = Box(3, 7, 19, 12)
    for d in [(0.3, -0.9), (-1, 1), (0, 0)]:
        assert normalize_offset(denormalize_offset(d, gt), gt) == pytest.approx(d)


@pytest.mark.parametrize("point,stride,expected", [
    ((5, 5), 1, (5, 5, 5, 5)),
    ((5, 5), 8, (0.625, 0.625, 0.625, 0.625)),
    ((2, 8), 2, (1, 4, 4, 1)),
])
def test_regression_target(point, stride, expected):
    assert regression_target(point, Box(0, 0, 10, 10), stride) == pytest.approx(expected)


def test_regression_target_outside_rejected():
    with pytest.raises(DomainError):
        regression_target((10, 5), Box(0, 0, 10, 10), 1)


@pytest.mark.parametrize("point,dists,stride,expected", [
    ((5, 5), (5, 5, 5, 5), 1, (0, 0, 10, 10)),
    ((4, 4), (1, 1, 1, 1), 2, (2, 2, 6, 6)),
])
def test_decode_box(point, dists, stride, expected):
    assert decode_box(point, dists, stride).to_list() == pytest.approx(list(expected))


def test_decode_rejects_nonpositive():
    with pytest.raises(DomainError):
        decode_box((0, 0), (1, 0, 1, 1), 1)


def test_decode_inverts_regression_target():
    rng = np.random.default_rng(3)
    for _ in range(200):
        x1, y1 = rng.uniform(-20, 20, 2)
        gt = Box(x1, y1, x1 + rng.uniform(1, 40), y1 + rng.uniform(1, 40))
        p = (rng.uniform(gt.x1, gt.x2), rng.uniform(gt.y1, gt.y2))
        s = float(2 ** rng.integers(0, 7))
        back = decode_box(p, regression_target(p, gt, s), s)
        np.testing.assert_allclose(back.to_list(), gt.to_list(), atol=1e-9)


def test_pyramid_spec_validation():
    p = PyramidSpec.parse("P3:8,P4:16")
    assert p.strides == [8, 16] and p.names == ["P3", "P4"]
    assert PyramidSpec.parse(p.format()) == p
    for bad in ["", "P3:8,P4:8", "P3:12", "P4:16,P3:8"]:
        with pytest.raises(DomainError):
            PyramidSpec.parse(bad)
