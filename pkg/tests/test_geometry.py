import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypotrack.geometry import (BoundingBox, Detection, MergeConflictError, Tracklet, can_merge, iou, merge,
                                overlap_fraction, shift_box, support_union_size)


def lattice_iou(a, b):
    """Pixel-counting IoU for integer boxes."""
    def cells(box):
        l, t, w, h = box
        return {(x, y) for x in range(l, l + w) for y in range(t, t + h)}
    ca, cb = cells(a), cells(b)
    return len(ca & cb) / len(ca | cb)


def make(ids, n=6, seed=0):
    """Tracklet whose box in frame f depends only on the detection id."""
    boxes = np.zeros((n, 4))
    out = [None] * n
    for f, d in ids.items():
        boxes[f] = [10 * d + 1, 5 * d + 1, 8, 12]
        out[f] = d
    return Tracklet(boxes, tuple(out))


def test_iou_examples():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert iou((0, 0, 10, 10), (20, 20, 10, 10)) == 0.0
    assert iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(1 / 3)
    assert iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(lattice_iou((0, 0, 10, 10), (5, 0, 10, 10)))


def test_iou_absent_and_degenerate():
    assert iou(BoundingBox.absent(), (0, 0, 10, 10)) == 0.0
    assert iou((3, 3, 0, 0), (3, 3, 0, 0)) == 0.0


int_box = st.tuples(st.integers(0, 12), st.integers(0, 12), st.integers(1, 8), st.integers(1, 8))


@given(int_box, int_box)
@settings(max_examples=150, deadline=None)
def test_iou_matches_pixel_counting(a, b):
    assert iou(a, b) == pytest.approx(lattice_iou(a, b), abs=1e-12)


real_box = st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 40), st.floats(0.1, 40))


@given(real_box, real_box)
@settings(max_examples=200, deadline=None)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == pytest.approx(iou(b, a))
    assert 0.0 <= v <= 1.0 + 1e-12
    assert iou(a, a) == pytest.approx(1.0)


def test_shift_box():
    assert shift_box((0, 0, 10, 10), (0, 0, 0, 0)) == BoundingBox(0, 0, 10, 10)
    assert shift_box((0, 0, 10, 10), (2, 3, 0, 0)) == BoundingBox(2, 3, 10, 10)
    clamped = shift_box((0, 0, 10, 10), (0, 0, -12, 0))
    assert clamped == BoundingBox(0, 0, 0, 10)
    assert iou(clamped, (0, 0, 10, 10)) == 0.0
    with pytest.raises(ValueError):
        shift_box(BoundingBox.absent(), (1, 1, 1, 1))


def test_box_and_detection_validation():
    with pytest.raises(ValueError):
        BoundingBox(0, 0, -1, 2)
    with pytest.raises(ValueError):
        Detection(0, BoundingBox(0, 0, 1, 1), float("nan"), 0)


def test_tracklet_requires_ids_on_boxes():
    with pytest.raises(ValueError):
        Tracklet(np.array([[1, 1, 2, 2], [0, 0, 0, 0]]), (None, None))
    with pytest.raises(ValueError):
        Tracklet(np.array([[1, 1, 2, 2], [0, 0, 0, 0]]), (3, 4))


def test_tracklet_span():
    t = make({1: 0, 3: 2, 4: 5})
    assert (t.start, t.end, t.span) == (1, 4, 4)
    assert t.support == (1, 3, 4)
    assert t.id_sequence == (0, 2, 5)


def test_can_merge_examples():
    a = make({0: 1, 1: 2, 2: 3})
    assert can_merge(a, a)
    assert not can_merge(make({3: 1}), make({3: 2}))
    assert can_merge(make({0: 1, 1: 2}), make({4: 7, 5: 8}))


def test_merge_examples():
    a = make({0: 1, 1: 2, 2: 3})
    assert merge(a, a) == a
    u = merge(make({1: 1, 2: 2, 3: 3}), make({2: 2, 3: 3, 4: 4}))
    assert u.support == (1, 2, 3, 4)
    assert len(u.support) == max(3, 3) + 1
    with pytest.raises(MergeConflictError):
        merge(make({3: 1}), make({3: 2}))


def test_overlap_fraction_examples():
    a = make({0: 1, 1: 2, 2: 3})
    assert overlap_fraction(a, a) == pytest.approx(1.0)
    assert overlap_fraction(make({0: 1}), make({1: 1})) == 0.0
    one = Tracklet(np.array([[0, 0, 10, 10.0]]), (0,))
    two = Tracklet(np.array([[5, 0, 10, 10.0]]), (1,))
    assert overlap_fraction(one, two) == pytest.approx(0.5)
    assert overlap_fraction(one, Tracklet(np.zeros((1, 4)), (None,))) == 0.0


assignment = st.lists(st.integers(0, 4), min_size=6, max_size=6)
masks = st.lists(st.booleans(), min_size=6, max_size=6)


def from_mask(assign, mask):
    # subsets of one assignment are pairwise compatible
    return make({f: a for f, (a, m) in enumerate(zip(assign, mask)) if m})


@given(assignment, masks, masks, masks)
@settings(max_examples=150, deadline=None)
def test_merge_algebra(assign, m1, m2, m3):
    a, b, c = (from_mask(assign, m) for m in (m1, m2, m3))
    assert merge(a, b) == merge(b, a)
    assert merge(merge(a, b), c) == merge(a, merge(b, c))
    u = merge(a, b)
    assert len(u.support) == len(a.support) + len(b.support) - len(set(a.support) & set(b.support))
    assert len(u.support) == support_union_size(a, b)
    if a.support:
        assert overlap_fraction(a, a) == pytest.approx(1.0)


@given(st.lists(st.one_of(st.none(), st.integers(0, 3)), min_size=5, max_size=5),
       st.lists(st.one_of(st.none(), st.integers(0, 3)), min_size=5, max_size=5))
@settings(max_examples=150, deadline=None)
def test_can_merge_frame_rule(x, y):
    a = make({f: d for f, d in enumerate(x) if d is not None}, n=5)
    b = make({f: d for f, d in enumerate(y) if d is not None}, n=5)
    expected = all(p is None or q is None or p == q for p, q in zip(x, y))
    assert can_merge(a, b) == expected


def test_tracklet_identity_key():
    a = make({0: 1, 2: 3})
    shifted = Tracklet(a.boxes + np.where(a.present[:, None], 0.5, 0.0), a.detection_ids)
    # shifted boxes keep the identity key and hash but are a different value
    assert shifted.key == a.key and hash(shifted) == hash(a)
    assert shifted != a
    assert a == make({0: 1, 2: 3})
    assert a != make({0: 1, 2: 4})
