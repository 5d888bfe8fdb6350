import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monoref.geometry import DegenerateError, Sim3, random_rotation
from monoref.pointmap import (
    ConfidenceMap,
    ImageGrid,
    Pointmap,
    align_mono_to_pair,
    mask_invalid,
    mean_point_error,
    norm_factor,
    rms_error,
)
from monoref.synth import NoiseSpec, make_scene


def random_pm(rng, h=6, w=7, frac=0.8):
    pts = rng.normal(size=(h, w, 3)) + [0, 0, 3]
    return Pointmap(pts, rng.random((h, w)) < frac)


# --- types ---------------------------------------------------------------------


def test_pointmap_zeroes_invalid_and_is_read_only():
    pts = np.ones((2, 2, 3))
    valid = np.array([[True, False], [False, True]])
    pm = Pointmap(pts, valid)
    np.testing.assert_array_equal(pm.points[~valid], 0.0)
    assert pm.n_valid == 2
    with pytest.raises(ValueError):
        pm.points[0, 0, 0] = 5.0


def test_pointmap_rejects_bad_input():
    with pytest.raises(ValueError):
        Pointmap(np.zeros((2, 2)), np.ones((2, 2), bool))
    with pytest.raises(ValueError):
        Pointmap(np.full((2, 2, 3), np.nan), np.ones((2, 2), bool))
    # non-finite values at invalid pixels are simply dropped
    pts = np.ones((2, 2, 3))
    pts[0, 0] = np.nan
    assert Pointmap(pts, np.array([[False, True], [True, True]])).n_valid == 3


def test_confidence_and_image_ranges():
    with pytest.raises(ValueError):
        ConfidenceMap(np.array([[1.0, -0.1]]))
    with pytest.raises(ValueError):
        ImageGrid(np.full((2, 2, 3), 1.5))
    assert ConfidenceMap.uniform(3, 4).weights.shape == (3, 4)


def test_tensor_round_trip():
    pm = random_pm(np.random.default_rng(0))
    back = Pointmap.from_tensor(pm.to_tensor(), pm.valid)
    np.testing.assert_array_equal(back.points, pm.points)


# --- mask_invalid --------------------------------------------------------------


def test_mask_all_valid_unchanged():
    pm = random_pm(np.random.default_rng(1))
    out = mask_invalid(pm, np.ones(pm.shape, bool))
    np.testing.assert_array_equal(out.points, pm.points)
    np.testing.assert_array_equal(out.valid, pm.valid)


def test_mask_all_invalid():
    pm = random_pm(np.random.default_rng(2))
    out = mask_invalid(pm, np.zeros(pm.shape, bool))
    assert out.n_valid == 0
    np.testing.assert_array_equal(out.points, 0.0)


def test_mask_checkerboard_halves():
    pm = Pointmap(np.ones((6, 8, 3)) + 1.0, np.ones((6, 8), bool))
    board = (np.add.outer(np.arange(6), np.arange(8)) % 2) == 0
    out = mask_invalid(pm, board)
    zeroed = np.all(out.points == 0, axis=-1).sum()
    assert zeroed == 6 * 8 // 2
    assert out.n_valid == 24


def test_mask_shape_mismatch():
    with pytest.raises(ValueError):
        mask_invalid(random_pm(np.random.default_rng(3)), np.ones((2, 2), bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_mask_idempotent(seed):
    rng = np.random.default_rng(seed)
    pm = random_pm(rng)
    m = rng.random(pm.shape) < 0.5
    once = mask_invalid(pm, m)
    twice = mask_invalid(once, m)
    np.testing.assert_array_equal(once.points, twice.points)
    np.testing.assert_array_equal(once.valid, twice.valid)


# --- norm_factor ---------------------------------------------------------------


def test_norm_factor_examples():
    pts = np.zeros((2, 2, 3))
    pts[..., 2] = 1.0
    assert norm_factor(Pointmap.from_points(pts)) == 1.0
    pts = np.zeros((2, 2, 3))
    pts[0, :, 0] = 2.0
    pts[1, :, 1] = 4.0
    assert norm_factor(Pointmap.from_points(pts)) == 3.0
    pm = random_pm(np.random.default_rng(4))
    assert norm_factor(pm.scaled(5.0)) == pytest.approx(5.0 * norm_factor(pm), rel=1e-15)


def test_norm_factor_errors():
    with pytest.raises(ValueError):
        norm_factor(Pointmap(np.ones((2, 2, 3)), np.zeros((2, 2), bool)))
    with pytest.raises(ValueError):
        norm_factor(Pointmap.from_points(np.zeros((2, 2, 3))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_norm_factor_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(5, 5, 3))
    perm = rng.permutation(25)
    shuffled = pts.reshape(25, 3)[perm].reshape(5, 5, 3)
    a = norm_factor(Pointmap.from_points(pts))
    b = norm_factor(Pointmap.from_points(shuffled))
    assert a == pytest.approx(b, rel=1e-14)


# --- alignment -----------------------------------------------------------------


def test_align_identity():
    pm = random_pm(np.random.default_rng(5))
    M, T = align_mono_to_pair(pm, pm, ConfidenceMap.uniform(*pm.shape))
    np.testing.assert_allclose(M.points, pm.points, atol=1e-12)
    assert abs(T.s - 1) < 1e-12
    np.testing.assert_allclose(T.R, np.eye(3), atol=1e-12)


def test_align_recovers_known_sim3():
    rng = np.random.default_rng(6)
    pair = random_pm(rng)
    T = Sim3(0.4, random_rotation(rng), rng.normal(size=3))
    mono = pair.transformed(T)
    M, _ = align_mono_to_pair(mono, pair, ConfidenceMap(rng.uniform(0.5, 2.0, pair.shape)))
    assert np.abs(M.points - pair.points).max() <= 1e-9
    np.testing.assert_array_equal(M.valid, pair.valid)


def test_align_reduces_error_on_fixture():
    fx = make_scene(3)
    for v in range(2):
        M, _ = align_mono_to_pair(fx.mono[v], fx.pair[v], fx.conf[v])
        gt = fx.gt_world[v]
        assert mean_point_error(M, gt) < mean_point_error(fx.mono[v], gt)
        assert rms_error(M, gt) < rms_error(fx.mono[v], gt)


def test_align_invalid_pixels_stay_zero():
    rng = np.random.default_rng(7)
    pair = random_pm(rng, frac=0.6)
    mono = Pointmap(pair.points * 2.0, pair.valid)
    M, _ = align_mono_to_pair(mono, pair, ConfidenceMap.uniform(*pair.shape))
    np.testing.assert_array_equal(M.points[~M.valid], 0.0)


def test_align_jointly_valid_only():
    # garbage in pixels invalid in the pair map must not influence the fit
    rng = np.random.default_rng(8)
    pair = random_pm(rng, frac=0.7)
    T = Sim3(1.7, random_rotation(rng), rng.normal(size=3))
    pts = T(pair.points.reshape(-1, 3)).reshape(pair.points.shape)
    pts[~pair.valid] = rng.normal(scale=50.0, size=((~pair.valid).sum(), 3))
    mono = Pointmap(pts, np.ones(pair.shape, bool))
    M, _ = align_mono_to_pair(mono, pair, ConfidenceMap.uniform(*pair.shape))
    assert np.abs(M.points[pair.valid] - pair.points[pair.valid]).max() <= 1e-9


def test_align_errors():
    rng = np.random.default_rng(9)
    pm = random_pm(rng)
    with pytest.raises(ValueError):
        align_mono_to_pair(pm, random_pm(rng, 3, 3), ConfidenceMap.uniform(3, 3))
    flat = np.zeros((3, 3, 3))
    flat[..., 0] = np.arange(9).reshape(3, 3)
    line = Pointmap.from_points(flat)
    with pytest.raises(DegenerateError):
        align_mono_to_pair(line, line, ConfidenceMap.uniform(3, 3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_align_idempotent(seed):
    rng = np.random.default_rng(seed)
    pair = random_pm(rng)
    mono = random_pm(rng)
    conf = ConfidenceMap(rng.uniform(0.1, 3.0, pair.shape))
    M, _ = align_mono_to_pair(mono, pair, conf)
    _, T2 = align_mono_to_pair(M, pair, conf)
    assert abs(T2.s - 1) <= 1e-9
    np.testing.assert_allclose(T2.R, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(T2.t, 0.0, atol=1e-9)


def test_pure_sim3_fixture_alignment():
    fx = make_scene(11, noise=NoiseSpec.pure_sim3())
    for v in range(2):
        M, _ = align_mono_to_pair(fx.mono[v], fx.pair[v], fx.conf[v])
        assert rms_error(M, fx.gt_world[v]) <= 1e-9


def test_error_helpers():
    a = Pointmap.from_points(np.zeros((1, 2, 3)))
    pts = np.zeros((1, 2, 3))
    pts[0, 0] = [3.0, 4.0, 0.0]
    b = Pointmap.from_points(pts)
    assert mean_point_error(a, b) == 2.5
    # per-coordinate RMS: sqrt((9 + 16) / 6)
    assert rms_error(a, b) == pytest.approx(np.sqrt(25 / 6))
