import numpy as np
import pytest

from tmdet import matching as mt
from tmdet.backbone import FeatureMap
from tmdet.boxes import BoxXYWH
from tmdet.errors import ConfigError
from tmdet.matching import MatchVariant
from tmdet.template import Template


def make_fm(grid):
    return FeatureMap(grid=np.asarray(grid, dtype=np.float64), stride=8.0)


def make_template(grid):
    grid = np.asarray(grid, dtype=np.float64)
    ex = BoxXYWH(cx=10.0, cy=10.0, w=8.0 * grid.shape[1], h=8.0 * grid.shape[0])
    return Template(grid=grid, exemplar=ex, feature_stride=8.0)


def naive_template_match(f, t, scale=1.0):
    """Direct triple-loop evaluation of the sliding correlation."""
    h, w, d = f.shape
    th, tw = t.shape[:2]
    out = np.zeros((h, w, d))
    for y in range(h):
        for x in range(w):
            for yy in range(th):
                for xx in range(tw):
                    sy = y + yy - th // 2
                    sx = x + xx - tw // 2
                    if 0 <= sy < h and 0 <= sx < w:
                        out[y, x, :] += f[sy, sx, :] * t[yy, xx, :]
    return out * scale / (tw * th)


# --------------------------------------------------------------------------- #
# template_match                                                               #
# --------------------------------------------------------------------------- #

def test_unit_template_is_elementwise_product():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(6, 6, 3))
    v = rng.normal(size=(1, 1, 3))
    out = mt.template_match(make_fm(f), make_template(v), tm_scale=1.0)
    np.testing.assert_allclose(out, f * v[0, 0, :])


def test_all_ones_interior_is_one():
    f = np.ones((7, 7, 2))
    t = np.ones((3, 3, 2))
    out = mt.template_match(make_fm(f), make_template(t))
    np.testing.assert_allclose(out[1:-1, 1:-1, :], 1.0)
    assert (out[0, :, :] < 1.0).all()  # zero padding shrinks the border sums


def test_shift_equivariance_interior():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(10, 10, 2))
    t = rng.normal(size=(3, 3, 2))
    base = mt.template_match(make_fm(f), make_template(t))
    rolled = mt.template_match(make_fm(np.roll(f, (2, 3), axis=(0, 1))),
                               make_template(t))
    np.testing.assert_allclose(rolled[3:-3, 4:-4, :],
                               np.roll(base, (2, 3), axis=(0, 1))[3:-3, 4:-4, :],
                               atol=1e-12)


@pytest.mark.parametrize("shape", [(2, 2), (3, 1), (2, 3), (4, 4)])
def test_matches_naive_oracle_even_and_odd(shape):
    rng = np.random.default_rng(hash(shape) % 2**31)
    f = rng.normal(size=(9, 8, 3))
    t = rng.normal(size=(*shape, 3))
    out = mt.template_match(make_fm(f), make_template(t), tm_scale=1.3)
    np.testing.assert_allclose(out, naive_template_match(f, t, 1.3), atol=1e-6)


def test_depth_mismatch_raises():
    with pytest.raises(ConfigError):
        mt.template_match(make_fm(np.zeros((4, 4, 3))),
                          make_template(np.zeros((2, 2, 2))))


def test_template_match_backward_adjoints():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(7, 6, 2))
    t = rng.normal(size=(2, 3, 2))
    fm, tpl = make_fm(f), make_template(t)
    scale = 0.7
    out = mt.template_match(fm, tpl, scale)
    g = rng.normal(size=out.shape)
    g_f, g_t, g_scale = mt.template_match_backward(fm, tpl, scale, g)
    eps = 1e-6
    # directional finite differences in f, t and scale
    df = rng.normal(size=f.shape)
    out2 = mt.template_match(make_fm(f + eps * df), tpl, scale)
    fd = float(((out2 - out) * g).sum()) / eps
    assert fd == pytest.approx(float((g_f * df).sum()), rel=1e-4)
    dt = rng.normal(size=t.shape)
    out3 = mt.template_match(fm, make_template(t + eps * dt), scale)
    fd_t = float(((out3 - out) * g).sum()) / eps
    assert fd_t == pytest.approx(float((g_t * dt).sum()), rel=1e-4)
    out4 = mt.template_match(fm, tpl, scale + eps)
    fd_s = float(((out4 - out) * g).sum()) / eps
    assert fd_s == pytest.approx(g_scale, rel=1e-4)


# --------------------------------------------------------------------------- #
# prototype_match                                                              #
# --------------------------------------------------------------------------- #

def test_prototype_unit_template_equals_tm():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(5, 5, 4))
    t = rng.normal(size=(1, 1, 4))
    pm = mt.prototype_match(make_fm(f), make_template(t))
    tm = mt.template_match(make_fm(f), make_template(t), tm_scale=1.0)
    np.testing.assert_allclose(pm, tm)


def test_prototype_collapses_opposing_halves():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(6, 6, 2))
    half = rng.normal(size=(2, 1, 2))
    t = np.concatenate([half, -half], axis=1)  # halves cancel under pooling
    pm = mt.prototype_match(make_fm(f), make_template(t))
    np.testing.assert_allclose(pm, 0.0, atol=1e-12)
    tm = mt.template_match(make_fm(f), make_template(t))
    assert np.abs(tm).max() > 1e-6


def test_prototype_equals_pooled_template_match():
    rng = np.random.default_rng(5)
    f = rng.normal(size=(6, 7, 3))
    t = rng.normal(size=(3, 2, 3))
    pm = mt.prototype_match(make_fm(f), make_template(t))
    pooled = t.mean(axis=(0, 1), keepdims=True)
    tm = mt.template_match(make_fm(f), make_template(pooled), tm_scale=1.0)
    np.testing.assert_allclose(pm, tm, atol=1e-12)


def test_prototype_matches_explicit_mean_oracle():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(4, 4, 5))
    t = rng.normal(size=(2, 3, 5))
    pm = mt.prototype_match(make_fm(f), make_template(t))
    proto = np.zeros(5)
    for yy in range(2):
        for xx in range(3):
            proto += t[yy, xx]
    proto /= 6.0
    np.testing.assert_array_equal(pm, f * proto)


def test_prototype_backward_adjoint():
    rng = np.random.default_rng(7)
    f = rng.normal(size=(5, 5, 3))
    t = rng.normal(size=(2, 2, 3))
    fm, tpl = make_fm(f), make_template(t)
    g = rng.normal(size=(5, 5, 3))
    g_f, g_t = mt.prototype_match_backward(fm, tpl, g)
    eps = 1e-6
    df = rng.normal(size=f.shape)
    dt = rng.normal(size=t.shape)
    base = (mt.prototype_match(fm, tpl) * g).sum()
    fd_f = ((mt.prototype_match(make_fm(f + eps * df), tpl) * g).sum() - base) / eps
    fd_t = ((mt.prototype_match(fm, make_template(t + eps * dt)) * g).sum() - base) / eps
    assert fd_f == pytest.approx(float((g_f * df).sum()), rel=1e-4)
    assert fd_t == pytest.approx(float((g_t * dt).sum()), rel=1e-4)


# --------------------------------------------------------------------------- #
# cosine_match                                                                 #
# --------------------------------------------------------------------------- #

def test_cosine_identical_window_is_one():
    rng = np.random.default_rng(8)
    t = rng.normal(size=(3, 3, 2))
    f = np.zeros((9, 9, 2))
    f[2:5, 3:6, :] = t  # plant the template so some window equals it
    out = mt.cosine_match(make_fm(f), make_template(t))
    assert out.shape == (9, 9, 1)
    assert out.max() == pytest.approx(1.0, abs=1e-9)
    planted = out[3, 4, 0]  # window centered at the planted position
    assert planted == pytest.approx(1.0, abs=1e-9)


def test_cosine_negated_window_is_minus_one():
    rng = np.random.default_rng(9)
    t = rng.normal(size=(3, 3, 2))
    f = np.zeros((9, 9, 2))
    f[2:5, 3:6, :] = -t
    out = mt.cosine_match(make_fm(f), make_template(t))
    assert out[3, 4, 0] == pytest.approx(-1.0, abs=1e-9)
    assert out.min() >= -1.0 - 1e-12 and out.max() <= 1.0 + 1e-12


def test_cosine_zero_window_maps_to_zero():
    t = np.ones((2, 2, 2))
    f = np.zeros((6, 6, 2))
    out = mt.cosine_match(make_fm(f), make_template(t))
    np.testing.assert_array_equal(out, 0.0)


def test_cosine_matches_dot_norm_oracle():
    rng = np.random.default_rng(10)
    f = rng.normal(size=(7, 7, 3))
    t = rng.normal(size=(2, 3, 3))
    out = mt.cosine_match(make_fm(f), make_template(t))
    th, tw = 2, 3
    fpad = np.pad(f, ((th // 2, th - 1 - th // 2), (tw // 2, tw - 1 - tw // 2), (0, 0)))
    tvec = t.reshape(-1)
    for y in range(7):
        for x in range(7):
            win = fpad[y:y + th, x:x + tw, :].reshape(-1)
            denom = np.linalg.norm(win) * np.linalg.norm(tvec)
            expected = win @ tvec / denom if denom > 0 else 0.0
            assert abs(out[y, x, 0] - expected) < 1e-6


def test_cosine_backward_adjoint():
    rng = np.random.default_rng(11)
    f = rng.normal(size=(6, 6, 3))
    t = rng.normal(size=(2, 2, 3))
    fm, tpl = make_fm(f), make_template(t)
    g = rng.normal(size=(6, 6, 1))
    g_f, g_t = mt.cosine_match_backward(fm, tpl, g)
    eps = 1e-7
    df = rng.normal(size=f.shape)
    dt = rng.normal(size=t.shape)
    base = (mt.cosine_match(fm, tpl) * g).sum()
    fd_f = ((mt.cosine_match(make_fm(f + eps * df), tpl) * g).sum() - base) / eps
    fd_t = ((mt.cosine_match(fm, make_template(t + eps * dt)) * g).sum() - base) / eps
    assert fd_f == pytest.approx(float((g_f * df).sum()), rel=1e-3)
    assert fd_t == pytest.approx(float((g_t * dt).sum()), rel=1e-3)


# --------------------------------------------------------------------------- #
# build_head_input                                                             #
# --------------------------------------------------------------------------- #

def test_head_input_depths_per_variant():
    rng = np.random.default_rng(12)
    d = 8
    fm = make_fm(rng.normal(size=(5, 5, d)))
    match = rng.normal(size=(5, 5, d))
    cos = rng.normal(size=(5, 5, 1))
    assert mt.build_head_input(fm, match, MatchVariant.CONCAT_TM).shape[2] == 2 * d
    assert mt.build_head_input(fm, None, MatchVariant.F_ONLY).shape[2] == d
    assert mt.build_head_input(fm, match, MatchVariant.TM_ONLY).shape[2] == d
    assert mt.build_head_input(fm, cos, MatchVariant.CONCAT_COS).shape[2] == d + 1
    assert mt.build_head_input(fm, match, MatchVariant.CONCAT_PM).shape[2] == 2 * d


def test_head_input_orders_match_first():
    rng = np.random.default_rng(13)
    fm = make_fm(rng.normal(size=(3, 3, 2)))
    match = rng.normal(size=(3, 3, 2))
    out = mt.build_head_input(fm, match, MatchVariant.CONCAT_TM)
    np.testing.assert_array_equal(out[..., :2], match)
    np.testing.assert_array_equal(out[..., 2:], fm.grid)


def test_head_input_spatial_mismatch():
    rng = np.random.default_rng(14)
    fm = make_fm(rng.normal(size=(4, 4, 2)))
    with pytest.raises(ConfigError):
        mt.build_head_input(fm, rng.normal(size=(3, 3, 2)), MatchVariant.CONCAT_TM)


def test_head_depth_helper():
    assert MatchVariant.CONCAT_TM.head_depth(512) == 1024
    assert MatchVariant.F_ONLY.head_depth(512) == 512
    assert MatchVariant.TM_ONLY.head_depth(512) == 512
    assert MatchVariant.CONCAT_COS.head_depth(512) == 513
