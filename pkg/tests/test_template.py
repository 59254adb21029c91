import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmdet.backbone import FeatureMap
from tmdet.boxes import BoxXYWH
from tmdet.template import (grid_aligned_rect, roi_align_backward,
                            roi_align_extract, template_size)


def fm_from(grid, stride=16.0):
    return FeatureMap(grid=np.asarray(grid, dtype=np.float64), stride=stride)


def bilinear_point_oracle(grid, u, v):
    """Straight per-point bilinear sample, half-cell convention, clamped."""
    h, w, _ = grid.shape
    u = min(max(u, 0.5), w - 0.5)
    v = min(max(v, 0.5), h - 0.5)
    x0 = min(int(np.floor(u - 0.5)), w - 2) if w > 1 else 0
    y0 = min(int(np.floor(v - 0.5)), h - 2) if h > 1 else 0
    fx = u - 0.5 - x0 if w > 1 else 0.0
    fy = v - 0.5 - y0 if h > 1 else 0.0
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
    bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
    return top * (1 - fy) + bot * fy


# --------------------------------------------------------------------------- #
# template_size                                                                #
# --------------------------------------------------------------------------- #

def test_size_two_cell_span_on_boundary():
    # 32px box centered on a cell boundary at stride 16 covers exactly 2 cells
    assert template_size(BoxXYWH(cx=32.0, cy=48.0, w=32.0, h=32.0), 16.0) == (2, 2)


def test_size_fractional_span():
    # columns [1.2, 4.9] in feature units -> ceil(4.9) - floor(1.2) = 4 cells
    ex = BoxXYWH(cx=16 * (1.2 + 4.9) / 2, cy=40.0, w=16 * 3.7, h=16.0)
    t_h, t_w = template_size(ex, 16.0)
    assert t_w == 4


def test_size_tiny_box_clamps_to_one():
    # sub-cell boxes away from cell boundaries cover a single cell
    assert template_size(BoxXYWH(cx=40.0, cy=40.0, w=0.5, h=0.5), 16.0) == (1, 1)
    assert template_size(BoxXYWH(cx=36.0, cy=44.0, w=1e-6, h=1e-6), 16.0) == (1, 1)


@settings(max_examples=100, deadline=None)
@given(cx=st.floats(5, 250), cy=st.floats(5, 250),
       w=st.floats(1, 80), h=st.floats(1, 80),
       grow=st.floats(0, 40))
def test_size_monotone_in_exemplar(cx, cy, w, h, grow):
    small = template_size(BoxXYWH(cx, cy, w, h), 8.0)
    big = template_size(BoxXYWH(cx, cy, w + grow, h + grow), 8.0)
    assert big[0] >= small[0] and big[1] >= small[1]


def test_size_aspect_tracks_exemplar():
    ex = BoxXYWH(cx=100.0, cy=100.0, w=96.0, h=32.0)
    t_h, t_w = template_size(ex, 8.0)
    assert abs(t_w / t_h - ex.w / ex.h) <= 1.0  # within one cell of s_w/s_h


# --------------------------------------------------------------------------- #
# roi_align_extract                                                            #
# --------------------------------------------------------------------------- #

def test_aligned_crop_is_verbatim():
    rng = np.random.default_rng(0)
    fm = fm_from(rng.normal(size=(10, 10, 3)))
    # exactly covers cells x in [5, 6], y in [2, 3]
    ex = BoxXYWH(cx=16 * 6.0, cy=16 * 3.0, w=32.0, h=32.0)
    t = roi_align_extract(fm, ex)
    assert t.grid.shape == (2, 2, 3)
    np.testing.assert_array_equal(t.grid, fm.grid[2:4, 5:7, :])


def test_constant_map_constant_template():
    fm = fm_from(np.full((8, 8, 2), 3.5))
    t = roi_align_extract(fm, BoxXYWH(cx=50.0, cy=70.0, w=37.0, h=21.0))
    np.testing.assert_allclose(t.grid, 3.5)


def test_half_cell_offset_matches_point_oracle():
    rng = np.random.default_rng(1)
    fm = fm_from(rng.normal(size=(12, 12, 4)))
    ex = BoxXYWH(cx=16 * 5.5 + 8.0, cy=16 * 4.0 + 8.0, w=40.0, h=56.0)
    t = roi_align_extract(fm, ex)
    x0, y0, t_w, t_h = grid_aligned_rect(ex, fm.stride)
    for j in range(t_h):
        for i in range(t_w):
            expected = bilinear_point_oracle(fm.grid, x0 + i + 0.5, y0 + j + 0.5)
            np.testing.assert_allclose(t.grid[j, i], expected, atol=1e-6)


def test_outside_exemplar_rejected():
    fm = fm_from(np.zeros((8, 8, 1)))
    with pytest.raises(ValueError):
        roi_align_extract(fm, BoxXYWH(cx=-500.0, cy=-500.0, w=10.0, h=10.0))


def test_border_touching_exemplar_clamps():
    rng = np.random.default_rng(2)
    fm = fm_from(rng.normal(size=(8, 8, 2)))
    t = roi_align_extract(fm, BoxXYWH(cx=4.0, cy=4.0, w=8.0, h=8.0))
    assert t.grid.shape[2] == 2
    assert np.isfinite(t.grid).all()


def test_translation_consistency():
    rng = np.random.default_rng(3)
    grid = rng.normal(size=(12, 12, 3))
    fm = fm_from(grid)
    ex = BoxXYWH(cx=60.0, cy=60.0, w=30.0, h=30.0)
    t0 = roi_align_extract(fm, ex)
    shifted = fm_from(np.roll(grid, shift=(0, 2), axis=(0, 1)))
    ex2 = BoxXYWH(cx=60.0 + 2 * 16.0, cy=60.0, w=30.0, h=30.0)
    t1 = roi_align_extract(shifted, ex2)
    np.testing.assert_allclose(t0.grid, t1.grid)


def test_roi_align_backward_is_adjoint():
    rng = np.random.default_rng(4)
    fm = fm_from(rng.normal(size=(9, 9, 2)))
    ex = BoxXYWH(cx=52.0, cy=61.0, w=37.0, h=29.0)
    t = roi_align_extract(fm, ex)
    g = rng.normal(size=t.grid.shape)
    grad_fm = roi_align_backward(fm, ex, g)
    # adjoint identity <extract(F), g> == <F, scatter(g)>
    assert float((t.grid * g).sum()) == pytest.approx(float((fm.grid * grad_fm).sum()),
                                                      rel=1e-12)
