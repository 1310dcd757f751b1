import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perspective3d.box3d import Box3D, corners
from perspective3d.errors import NoGroundTruth
from perspective3d.evaluation import (
    Detection,
    GroundTruth,
    average_precision,
    clip_convex,
    evaluate,
    footprint,
    iou3d,
    match_detections,
    mean_ap,
    polygon_area,
)


def monte_carlo_iou(a, b, n, rng):
    """Sample the joint bounding box and test membership in each solid."""
    pts_all = np.vstack([corners(a), corners(b)])
    lo, hi = pts_all.min(axis=0), pts_all.max(axis=0)
    X = rng.uniform(lo, hi, (n, 3))

    def inside(box):
        local = X - box.center
        c, s = np.cos(box.yaw), np.sin(box.yaw)
        # inverse plan rotation
        x = c * local[:, 0] + s * local[:, 2]
        z = -s * local[:, 0] + c * local[:, 2]
        w, l, h = box.size
        return (np.abs(x) <= w / 2) & (np.abs(z) <= l / 2) & (np.abs(local[:, 1]) <= h / 2)

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def random_pair(rng):
    a = Box3D(rng.uniform(-0.5, 0.5, 3), rng.uniform(0.3, 2.0, 3), rng.uniform(-np.pi, np.pi))
    b = Box3D(a.center + rng.uniform(-0.8, 0.8, 3), rng.uniform(0.3, 2.0, 3), rng.uniform(-np.pi, np.pi))
    return a, b


def test_self_iou():
    b = Box3D([1, 2, 3], [1, 2, 0.5], 0.7)
    assert iou3d(b, b) == pytest.approx(1.0, abs=1e-12)


def test_disjoint():
    assert iou3d(Box3D([0, 0, 0], [1, 1, 1], 0), Box3D([5, 0, 0], [1, 1, 1], 0.3)) == 0.0
    # overlapping footprints, separated vertically
    assert iou3d(Box3D([0, 0, 0], [1, 1, 1], 0), Box3D([0, 3, 0], [1, 1, 1], 0)) == 0.0


@pytest.mark.parametrize("axis", [0, 2])
def test_half_offset_unit_cubes(axis):
    offset = np.zeros(3)
    offset[axis] = 0.5
    assert iou3d(Box3D([0, 0, 0], [1, 1, 1], 0), Box3D(offset, [1, 1, 1], 0)) == 1 / 3


def test_rotated_cube_matches_monte_carlo():
    a, b = Box3D([0, 0, 0], [1, 1, 1], 0.0), Box3D([0, 0, 0], [1, 1, 1], np.pi / 4)
    # exact: octagon area 2(sqrt2 - 1) over union 2 - that
    exact = 2 * (np.sqrt(2) - 1) / (2 - 2 * (np.sqrt(2) - 1))
    assert iou3d(a, b) == pytest.approx(exact, abs=1e-12)
    assert abs(iou3d(a, b) - monte_carlo_iou(a, b, 10**6, np.random.default_rng(0))) < 0.005


def test_random_pairs_match_monte_carlo():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = random_pair(rng)
        assert abs(iou3d(a, b) - monte_carlo_iou(a, b, 200_000, rng)) < 0.01


boxes = st.builds(
    lambda c, s, y: Box3D(c, s, y),
    st.lists(st.floats(-1, 1), min_size=3, max_size=3),
    st.lists(st.floats(0.1, 2), min_size=3, max_size=3),
    st.floats(-np.pi, np.pi),
)


@settings(max_examples=200)
@given(boxes, boxes)
def test_iou_properties(a, b):
    v = iou3d(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou3d(b, a), abs=1e-9)
    shift = np.array([3.0, -1.0, 2.0])
    moved = iou3d(Box3D(a.center + shift, a.size, a.yaw), Box3D(b.center + shift, b.size, b.yaw))
    assert moved == pytest.approx(v, abs=1e-9)


@given(boxes)
def test_quarter_turn_same_solid(a):
    turned = Box3D(a.center, [a.size[1], a.size[0], a.size[2]], a.yaw + np.pi / 2)
    assert iou3d(a, turned) == pytest.approx(1.0, abs=1e-9)


def test_polygon_clipping_squares():
    sq = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], dtype=float)
    assert polygon_area(sq) == 4.0 and polygon_area(sq[::-1]) == -4.0
    inter = clip_convex(sq, sq + [1, 1])
    assert polygon_area(inter) == pytest.approx(1.0)
    assert len(clip_convex(sq, sq + [5, 0])) == 0
    # touching edge only
    touch = clip_convex(sq, sq + [2, 0])
    assert abs(polygon_area(touch)) < 1e-12


def test_footprint_counterclockwise():
    for yaw in np.linspace(-3, 3, 7):
        assert polygon_area(footprint(Box3D([0, 0, 0], [1, 2, 1], yaw))) == pytest.approx(2.0)


# --- matching -----------------------------------------------------------------

UNIT = Box3D([0, 0, 0], [1, 1, 1], 0.0)


def det(score, box=UNIT, cls=0, image="img"):
    return Detection(image, cls, score, box)


def test_exact_detection_is_tp():
    assert match_detections([det(0.9)], [GroundTruth("img", 0, UNIT)]).tolist() == [True]


def test_two_detections_one_gt():
    flags = match_detections([det(0.5), det(0.9)], [GroundTruth("img", 0, UNIT)])
    assert flags.tolist() == [False, True]


def test_match_respects_class_and_image():
    gts = [GroundTruth("img", 0, UNIT)]
    assert match_detections([det(0.9, cls=1)], gts).tolist() == [False]
    assert match_detections([det(0.9, image="other")], gts).tolist() == [False]


def test_threshold_is_inclusive():
    shifted = Box3D([0.5, 0, 0], [1, 1, 1], 0)
    gts = [GroundTruth("img", 0, UNIT)]
    assert match_detections([det(0.9, shifted)], gts, iou_threshold=1 / 3).tolist() == [True]
    assert match_detections([det(0.9, shifted)], gts, iou_threshold=0.34).tolist() == [False]


def brute_force_flags(dets, gts, thr):
    """Greedy matching is the lexicographic maximum, in score order, of the
    matched IoUs over all injective assignments of detections to gts."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    best_key, best = None, None
    options = [None] + list(range(len(gts)))
    for assign in itertools.product(options, repeat=len(dets)):
        used = [g for g in assign if g is not None]
        if len(used) != len(set(used)):
            continue
        key = []
        ok = True
        for i in order:
            g = assign[i]
            if g is None:
                key.append(-1.0)
                continue
            v = iou3d(dets[i].box, gts[g].box)
            if v < thr:
                ok = False
                break
            key.append(v)
        if ok and (best_key is None or key > best_key):
            best_key, best = key, assign
    return [g is not None for g in best]


def test_matching_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(40):
        gts = [GroundTruth("img", 0, Box3D(rng.uniform(-0.6, 0.6, 3), rng.uniform(0.5, 1.5, 3), rng.uniform(-3, 3))) for _ in range(2)]
        dets = [
            Detection("img", 0, float(rng.choice([0.3, 0.6, 0.9])), Box3D(rng.uniform(-0.6, 0.6, 3), rng.uniform(0.5, 1.5, 3), rng.uniform(-3, 3)))
            for _ in range(3)
        ]
        assert match_detections(dets, gts, 0.15).tolist() == brute_force_flags(dets, gts, 0.15)


# --- AP -------------------------------------------------------------------------


def test_perfect_detector():
    assert average_precision([True, True, True], 3).ap == 1.0


def test_one_gt_trailing_fp():
    assert average_precision([True, False], 1).ap == 1.0


def test_two_gt_envelope():
    s = average_precision([True, False, True], 2)
    assert s.ap == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)
    assert s.recall.tolist() == [0.5, 0.5, 1.0]
    assert s.precision.tolist() == pytest.approx([1.0, 0.5, 2 / 3])


def test_missed_gt_and_empty():
    assert average_precision([True], 2).ap == 0.5
    assert average_precision([], 2).ap == 0.0
    with pytest.raises(NoGroundTruth):
        average_precision([True], 0)


def test_pr_csv():
    text = average_precision([True, False], 1).to_csv()
    assert text.splitlines() == ["recall,precision", "1.0,1.0", "1.0,0.5"]


def test_mean_ap():
    assert mean_ap({0: 0.5}) == 0.5
    assert mean_ap({0: 1.0, 3: 0.0}) == 0.5
    with pytest.raises(NoGroundTruth):
        mean_ap({})


def test_evaluate_excludes_classes_without_gt():
    gts = [GroundTruth("a", 0, UNIT), GroundTruth("a", 1, UNIT)]
    dets = [det(0.9, image="a"), det(0.8, cls=1, image="a"), det(0.7, cls=2, image="a")]
    res = evaluate(dets, gts)
    assert set(res.ap) == {0, 1} and res.map == 1.0
    d = res.to_dict(["x", "y", "z"])
    assert d["per_class"]["1"]["name"] == "y" and d["iou_threshold"] == 0.15


@settings(max_examples=50)
@given(st.floats(0.01, 100), st.floats(-5, 5))
def test_rank_invariance(scale, offset):
    rng = np.random.default_rng(3)
    gts = [GroundTruth(f"i{k}", int(k % 2), Box3D([0, 0, 0], [1, 1, 1], 0)) for k in range(6)]
    dets = []
    for k in range(10):
        box = Box3D(rng.uniform(-0.7, 0.7, 3), [1, 1, 1], rng.uniform(-1, 1))
        dets.append(Detection(f"i{k % 6}", int(k % 2), float(rng.uniform()), box))
    base = evaluate(dets, gts)
    moved = evaluate([Detection(d.image_id, d.cls, d.score * scale + offset, d.box) for d in dets], gts)
    assert moved.ap == base.ap


def test_detection_serialization():
    d = Detection("s", 2, 0.25, Box3D([1, 2, 3], [1, 1, 1], 0.5))
    again = Detection.from_dict(d.to_dict())
    assert again.image_id == "s" and again.cls == 2 and again.score == 0.25
    assert set(d.to_dict()) == {"image_id", "class", "score", "box"}
