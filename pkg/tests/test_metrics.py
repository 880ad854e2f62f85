import numpy as np
import pytest
from ap_oracle import box_iou, brute_force_ap
from hypothesis import given
from hypothesis import strategies as st

from decdistill.metrics import (
    IOU_THRESHOLDS,
    ImageDetections,
    class_ap,
    evaluate_detections,
    iou_matrix,
    mean_ap,
    size_edges,
)

# boxes on a coarse lattice so that exact overlaps and score ties actually occur
lattice = st.integers(1, 7).map(lambda v: v / 8)
side = st.integers(1, 4).map(lambda v: v / 8)
box = st.tuples(lattice, lattice, side, side).map(np.array)
score = st.integers(0, 4).map(lambda v: v / 4)


def _dets(pairs, cls=0):
    if not pairs:
        return ImageDetections(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 4)))
    return ImageDetections(
        np.array([s for s, _ in pairs]), np.full(len(pairs), cls), np.stack([b for _, b in pairs])
    )


def _gts(boxes, cls=0):
    return (np.full(len(boxes), cls, dtype=np.int64), np.array(boxes, dtype=np.float64).reshape(-1, 4))


def test_iou_matrix_matches_pairwise():
    a = np.array([[0.5, 0.5, 0.5, 0.5], [0.2, 0.2, 0.1, 0.1]])
    b = np.array([[0.5, 0.5, 0.5, 0.5], [0.6, 0.6, 0.4, 0.2], [0.5, 0.5, 0.0, 0.0]])
    m = iou_matrix(a, b)
    assert m.shape == (2, 3)
    for i in range(2):
        for j in range(3):
            assert m[i, j] == pytest.approx(box_iou(a[i], b[j]), abs=1e-15)


def test_perfect_predictions():
    gts = [_gts([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.2]], 0), _gts([[0.5, 0.5, 0.4, 0.4]], 1)]
    dets = [
        ImageDetections(np.ones(2), np.zeros(2, dtype=np.int64), gts[0][1]),
        ImageDetections(np.ones(1), np.ones(1, dtype=np.int64), gts[1][1]),
    ]
    assert mean_ap(dets, gts, 2) == 1.0
    r = evaluate_detections(dets, gts, 2)
    assert (r.ap50, r.ap75, r.map) == (1.0, 1.0, 1.0)


def test_no_overlapping_predictions_give_zero():
    gts = [_gts([[0.2, 0.2, 0.2, 0.2]])]
    dets = [_dets([(0.9, np.array([0.8, 0.8, 0.2, 0.2]))])]
    assert mean_ap(dets, gts, 1) == 0.0
    assert mean_ap([_dets([])], gts, 1) == 0.0


def test_one_of_two_found():
    # 101-point interpolation: recall levels 0.00 .. 0.50 have precision 1
    gts = [_gts([[0.2, 0.2, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])]
    dets = [_dets([(1.0, np.array([0.2, 0.2, 0.2, 0.2]))])]
    assert class_ap(dets, gts, 0, 0.5) == pytest.approx(51 / 101, abs=1e-15)


def test_class_without_ground_truth_is_skipped():
    gts = [_gts([[0.2, 0.2, 0.2, 0.2]], 0)]
    dets = [ImageDetections(np.array([1.0, 0.9]), np.array([0, 1]), np.array([[0.2, 0.2, 0.2, 0.2]] * 2))]
    assert class_ap(dets, gts, 1, 0.5) is None
    assert mean_ap(dets, gts, 2) == 1.0


def test_duplicate_detection_is_false_positive():
    gts = [_gts([[0.5, 0.5, 0.4, 0.4]])]
    b = np.array([0.5, 0.5, 0.4, 0.4])
    dets = [_dets([(0.5, b), (0.9, b)])]
    assert class_ap(dets, gts, 0, 0.5) == 1.0
    # a false positive ranked above the hit halves precision
    dets = [_dets([(0.9, np.array([0.1, 0.1, 0.1, 0.1])), (0.5, b)])]
    assert class_ap(dets, gts, 0, 0.5) == pytest.approx(0.5, abs=1e-15)


def test_from_query_probs_layout():
    probs = np.array([[0.1, 0.9], [0.4, 0.6]])
    boxes = np.array([[0.1, 0.1, 0.1, 0.1], [0.5, 0.5, 0.2, 0.2]])
    d = ImageDetections.from_query_probs(probs, boxes)
    np.testing.assert_array_equal(d.scores, [0.1, 0.9, 0.4, 0.6])
    np.testing.assert_array_equal(d.classes, [0, 1, 0, 1])
    np.testing.assert_array_equal(d.boxes[3], boxes[1])


def test_size_edges_are_terciles():
    gts = [_gts([[0.5, 0.5, s, s]]) for s in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)]
    lo, hi = size_edges(gts)
    areas = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]) ** 2
    assert (lo, hi) == pytest.approx(tuple(np.quantile(areas, [1 / 3, 2 / 3])), abs=1e-15)
    assert size_edges([_gts([])]) == (0.0, 0.0)


def test_size_buckets_see_only_their_objects():
    small, large = [0.2, 0.2, 0.1, 0.1], [0.6, 0.6, 0.6, 0.6]
    mid = [0.3, 0.7, 0.3, 0.3]
    gts = [_gts([small, mid, large])]
    # only the large object is found
    dets = [_dets([(1.0, np.array(large))])]
    r = evaluate_detections(dets, gts, 1)
    assert r.ap_large == 1.0 and r.ap_small == 0.0 and r.ap_medium == 0.0


@st.composite
def micro_instance(draw):
    n_img = draw(st.integers(1, 2))
    images = []
    for _ in range(n_img):
        gts = draw(st.lists(box, max_size=2))
        dets = draw(st.lists(st.tuples(score, box), max_size=3))
        images.append((dets, gts))
    return images


@given(micro_instance(), st.sampled_from([float(t) for t in IOU_THRESHOLDS]))
def test_matches_brute_force_oracle(images, thr):
    dets = [_dets(d) for d, _ in images]
    gts = [_gts(g) for _, g in images]
    expected = brute_force_ap(images, thr)
    got = class_ap(dets, gts, 0, thr)
    if expected is None:
        assert got is None
    else:
        assert got == pytest.approx(expected, abs=1e-12)
        assert 0.0 <= got <= 1.0


@given(micro_instance())
def test_mean_ap_is_mean_of_thresholds(images):
    dets = [_dets(d) for d, _ in images]
    gts = [_gts(g) for _, g in images]
    per_t = [brute_force_ap(images, float(t)) for t in IOU_THRESHOLDS]
    if per_t[0] is None:
        assert mean_ap(dets, gts, 1) == 0.0
    else:
        assert mean_ap(dets, gts, 1) == pytest.approx(np.mean(per_t), abs=1e-12)
