import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmdet import loss as ls
from tmdet.boxes import BoxXYWH, iou_single
from tmdet.errors import NonFiniteError
from tmdet.loss import MarginConfig, extended_center_set


def brute_force_center_set(gts, stride, h, w, delta):
    """Literal per-cell evaluation of the rhombus inequality."""
    presence = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            for gt in gts:
                dx = abs(gt.cx / stride - (x + 0.5)) / (gt.w / stride)
                dy = abs(gt.cy / stride - (y + 0.5)) / (gt.h / stride)
                if dx + dy <= delta:
                    presence[y, x] = 1.0
                    break
    return presence


# --------------------------------------------------------------------------- #
# extended center set                                                          #
# --------------------------------------------------------------------------- #

def test_gt_centered_on_cell_is_positive():
    gt = BoxXYWH(cx=(3 + 0.5) * 8.0, cy=(2 + 0.5) * 8.0, w=10.0, h=10.0)
    maps = extended_center_set([gt], 8.0, 8, 8, delta=0.05)
    assert maps.presence[2, 3] == 1.0
    assert maps.assignment[2, 3] == 0


def test_rhombus_is_center_plus_four_neighbourhood():
    # 6x6-cell GT, delta=0.33: |dx|+|dy| <= 1.98 cells at integer offsets
    stride = 8.0
    gt = BoxXYWH(cx=(8 + 0.5) * stride, cy=(8 + 0.5) * stride,
                 w=6 * stride, h=6 * stride)
    maps = extended_center_set([gt], stride, 17, 17, delta=0.33)
    expected = {(8, 8), (7, 8), (9, 8), (8, 7), (8, 9)}
    got = {tuple(idx) for idx in np.argwhere(maps.presence > 0)}
    assert got == expected


def test_boundary_cell_inclusive():
    # GT center placed so cell (3, 0) sits exactly on the rhombus boundary:
    # 0.33 * 4 = 1.32 exactly in binary, 0.5 + 1.32 = 1.82 exactly, and
    # (1.82 - 0.5) / 4 == 0.33 bit-exactly, so the sum equals delta.
    gt = BoxXYWH(cx=0.5 + 1.32, cy=3.5, w=4.0, h=4.0)
    maps = extended_center_set([gt], 1.0, 8, 12, delta=0.33)
    assert maps.presence[3, 0] == 1.0
    # one ulp past the margin is excluded
    gt2 = BoxXYWH(cx=np.nextafter(0.5 + 1.32, 10.0), cy=3.5, w=4.0, h=4.0)
    maps2 = extended_center_set([gt2], 1.0, 8, 12, delta=0.33)
    assert maps2.presence[3, 0] == 0.0


def test_empty_gt_all_negative():
    maps = extended_center_set([], 8.0, 6, 6)
    assert maps.positive_count == 0
    assert (maps.assignment == -1).all()


def test_overlapping_rhombi_assign_nearest():
    stride = 1.0
    a = BoxXYWH(cx=4.0 + 0.5, cy=2.5, w=8.0, h=8.0)
    b = BoxXYWH(cx=6.0 + 0.5, cy=2.5, w=8.0, h=8.0)
    maps = extended_center_set([a, b], stride, 6, 12, delta=0.4)
    # cell (2, 4) is a's center; (2, 6) is b's; (2, 5) is equidistant -> ties to a
    assert maps.assignment[2, 4] == 0
    assert maps.assignment[2, 6] == 1
    assert maps.assignment[2, 5] == 0
    np.testing.assert_array_equal(maps.box_target[2, 6], b.as_array())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_membership_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    stride = float(rng.choice([4.0, 8.0, 16.0]))
    h, w = int(rng.integers(6, 14)), int(rng.integers(6, 14))
    gts = []
    for _ in range(rng.integers(1, 5)):
        gts.append(BoxXYWH(cx=float(rng.uniform(0, w * stride)),
                           cy=float(rng.uniform(0, h * stride)),
                           w=float(rng.uniform(2, 6) * stride),
                           h=float(rng.uniform(2, 6) * stride)))
    maps = extended_center_set(gts, stride, h, w, delta=0.33)
    np.testing.assert_array_equal(
        maps.presence, brute_force_center_set(gts, stride, h, w, 0.33))


def test_margin_config_bounds():
    MarginConfig(0.33)
    with pytest.raises(ValueError):
        MarginConfig(0.0)
    with pytest.raises(ValueError):
        MarginConfig(0.6)


# --------------------------------------------------------------------------- #
# presence loss                                                                #
# --------------------------------------------------------------------------- #

def make_targets(h, w, positives):
    presence = np.zeros((h, w))
    for y, x in positives:
        presence[y, x] = 1.0
    return ls.TargetMaps(presence=presence,
                         box_target=np.zeros((h, w, 4)),
                         assignment=np.where(presence > 0, 0, -1))


def test_presence_loss_near_zero_on_confident_correct():
    t = make_targets(4, 4, [(1, 1), (2, 3)])
    pred = np.where(t.presence > 0, 1.0 - 1e-6, 1e-6)
    val, _ = ls.presence_loss(pred, t)
    assert val < 1e-5


def test_presence_loss_half_everywhere_is_ln2():
    t = make_targets(3, 3, [(0, 0)])
    val, _ = ls.presence_loss(np.full((3, 3), 0.5), t, reduction="mean")
    assert val == pytest.approx(np.log(2.0))


def test_presence_loss_sum_reduction_scales():
    t = make_targets(3, 3, [(0, 0)])
    mean_val, _ = ls.presence_loss(np.full((3, 3), 0.5), t, "mean")
    sum_val, _ = ls.presence_loss(np.full((3, 3), 0.5), t, "sum")
    assert sum_val == pytest.approx(9 * mean_val)


def test_presence_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    t = make_targets(4, 5, [(1, 1), (3, 2)])
    p = rng.uniform(0.1, 0.9, size=(4, 5))
    _, grad = ls.presence_loss(p, t)
    eps = 1e-7
    dp = rng.normal(size=p.shape)
    v1, _ = ls.presence_loss(p + eps * dp, t)
    v0, _ = ls.presence_loss(p - eps * dp, t)
    fd = (v1 - v0) / (2 * eps)
    assert fd == pytest.approx(float((grad * dp).sum()), rel=1e-5)


def test_presence_loss_clamps_exact_zero_one():
    t = make_targets(2, 2, [(0, 0)])
    pred = np.array([[1.0, 0.0], [0.5, 0.5]])
    val, grad = ls.presence_loss(pred, t)
    assert np.isfinite(val) and np.isfinite(grad).all()


# --------------------------------------------------------------------------- #
# gIoU                                                                         #
# --------------------------------------------------------------------------- #

def test_giou_identical_boxes():
    b = BoxXYWH(10.0, 12.0, 5.0, 3.0)
    assert ls.giou(b, b) == pytest.approx(1.0)


def test_giou_edge_adjacent_unit_boxes():
    a = BoxXYWH(0.5, 0.5, 1.0, 1.0)
    b = BoxXYWH(1.5, 0.5, 1.0, 1.0)
    assert ls.giou(a, b) == pytest.approx(0.0)


def test_giou_far_apart_approaches_minus_one():
    a = BoxXYWH(0.0, 0.0, 1.0, 1.0)
    b = BoxXYWH(1e6, 0.0, 1.0, 1.0)
    assert ls.giou(a, b) == pytest.approx(-1.0, abs=1e-5)


def test_giou_nested_equals_iou():
    outer = BoxXYWH(5.0, 5.0, 8.0, 8.0)
    inner = BoxXYWH(5.0, 6.0, 2.0, 2.0)
    assert ls.giou(outer, inner) == pytest.approx(iou_single(outer, inner))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_giou_symmetric_bounded_below_iou(seed):
    rng = np.random.default_rng(seed)
    a = BoxXYWH(*rng.uniform(1, 50, 2), *rng.uniform(0.5, 20, 2))
    b = BoxXYWH(*rng.uniform(1, 50, 2), *rng.uniform(0.5, 20, 2))
    gab, gba = ls.giou(a, b), ls.giou(b, a)
    assert gab == pytest.approx(gba, abs=1e-12)
    assert -1.0 < gab <= 1.0 + 1e-12
    assert gab <= iou_single(a, b) + 1e-12


def test_giou_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    pred = np.column_stack([rng.uniform(5, 20, 8), rng.uniform(5, 20, 8),
                            rng.uniform(2, 9, 8), rng.uniform(2, 9, 8)])
    gt = np.column_stack([rng.uniform(5, 20, 8), rng.uniform(5, 20, 8),
                          rng.uniform(2, 9, 8), rng.uniform(2, 9, 8)])
    _, grad = ls.giou_array(pred, gt)
    eps = 1e-6
    for k in range(8):
        for c in range(4):
            p2 = pred.copy()
            p2[k, c] += eps
            v2, _ = ls.giou_array(p2, gt)
            p2[k, c] -= 2 * eps
            v0, _ = ls.giou_array(p2, gt)
            fd = (v2[k] - v0[k]) / (2 * eps)
            assert grad[k, c] == pytest.approx(fd, rel=1e-4, abs=1e-7)


# --------------------------------------------------------------------------- #
# box loss                                                                     #
# --------------------------------------------------------------------------- #

def test_box_loss_zero_when_decoded_equals_gt():
    t = make_targets(4, 4, [(1, 1), (2, 2)])
    gt = BoxXYWH(10.0, 10.0, 4.0, 4.0).as_array()
    t.box_target[t.presence > 0] = gt
    decoded = np.zeros((4, 4, 4))
    decoded[t.presence > 0] = gt
    val, grad = ls.box_loss(decoded, t)
    assert val == pytest.approx(0.0, abs=1e-12)
    neg = t.presence < 0.5
    assert not grad[neg].any()


def test_box_loss_side_by_side_unit_box_is_one():
    t = make_targets(2, 2, [(0, 0)])
    t.box_target[0, 0] = [0.5, 0.5, 1.0, 1.0]
    decoded = np.zeros((2, 2, 4))
    decoded[0, 0] = [1.5, 0.5, 1.0, 1.0]
    val, _ = ls.box_loss(decoded, t)
    assert val == pytest.approx(1.0)


def test_box_loss_no_positives_warns_and_returns_zero():
    t = make_targets(3, 3, [])
    decoded = np.ones((3, 3, 4))
    val, grad = ls.box_loss(decoded, t)
    assert val == 0.0 and not grad.any()


def test_box_loss_mean_invariant_to_negative_padding():
    t = make_targets(3, 3, [(1, 1)])
    t.box_target[1, 1] = [5.0, 5.0, 2.0, 2.0]
    decoded = np.zeros((3, 3, 4))
    decoded[1, 1] = [5.5, 5.0, 2.0, 2.0]
    val_small, _ = ls.box_loss(decoded, t)
    t2 = make_targets(6, 3, [(1, 1)])
    t2.box_target[1, 1] = [5.0, 5.0, 2.0, 2.0]
    decoded2 = np.zeros((6, 3, 4))
    decoded2[1, 1] = [5.5, 5.0, 2.0, 2.0]
    val_big, _ = ls.box_loss(decoded2, t2)
    assert val_small == pytest.approx(val_big)


def test_total_loss_sums_and_rejects_nonfinite():
    assert ls.total_loss(0.0, 0.0) == 0.0
    assert ls.total_loss(0.3, 0.7) == pytest.approx(1.0)
    with pytest.raises(NonFiniteError):
        ls.total_loss(float("nan"), 1.0)
