from __future__ import annotations

import numpy as np
import pytest

from tests._helpers import ball, constant_volume, mask_of
from volcore import (
    AE_WINDOW,
    SEG_WINDOW,
    Volume,
    VolumeError,
    VoxelMask,
    crop_patch,
    label_components,
    largest_component,
    max_diameter_mm,
    paste_patch,
    preprocess,
    reorient,
    resample_isotropic,
    window_normalize,
)


def _ramp(shape=(4, 5, 6)) -> Volume:
    return Volume(np.arange(np.prod(shape), dtype=np.float32).reshape(shape), spacing=(1.0, 2.0, 3.0))


def test_reorient_flips_axes_and_keeps_world_positions():
    v = _ramp()
    lps = reorient(v, ("L", "P", "S"))
    assert lps.orientation == ("L", "P", "S")
    assert np.array_equal(lps.data, v.data[::-1, ::-1, :])
    # same voxel seen from both grids sits at the same world point
    i, j, k = 1, 2, 3
    w_src = v.affine() @ np.array([i, j, k, 1.0])
    w_dst = lps.affine() @ np.array([v.shape[0] - 1 - i, v.shape[1] - 1 - j, k, 1.0])
    assert np.allclose(w_src, w_dst)


def test_reorient_roundtrip_and_identity():
    v = _ramp()
    assert reorient(v, ("R", "A", "S")) is v
    back = reorient(reorient(v, ("P", "S", "L")), ("R", "A", "S"))
    assert np.array_equal(back.data, v.data)
    assert np.allclose(back.spacing, v.spacing)
    assert np.allclose(back.origin, v.origin)


def test_resample_output_shape_rounds_half_up():
    v = Volume(np.zeros((4, 4, 8), dtype=np.float32), spacing=(1.0, 1.0, 0.5))
    out = resample_isotropic(v, 1.0)
    assert out.shape == (4, 4, 4)
    assert out.spacing == (1.0, 1.0, 1.0)

    v2 = Volume(np.zeros((5, 5, 5), dtype=np.float32), spacing=(1.5, 1.5, 1.5))
    assert resample_isotropic(v2, 1.0).shape == (8, 8, 8)


def test_resample_constant_stays_constant():
    v = constant_volume((6, 6, 6), 42.0, spacing=2.0)
    out = resample_isotropic(v, 1.0)
    assert out.shape == (12, 12, 12)
    assert np.allclose(out.data, 42.0)


def test_resample_same_spacing_is_identity():
    v = _ramp((4, 4, 4))
    v = Volume(v.data, spacing=(1.0, 1.0, 1.0))
    assert np.allclose(resample_isotropic(v, 1.0).data, v.data)


def test_resample_mask_requires_nearest():
    m = mask_of(ball((8, 8, 8), (4, 4, 4), 2))
    with pytest.raises(VolumeError, match="nearest"):
        resample_isotropic(m, 0.5, "linear")
    out = resample_isotropic(m, 0.5, "nearest")
    assert isinstance(out, VoxelMask)
    assert set(np.unique(out.data)) <= {0, 1}


def test_resample_rejects_bad_spacing():
    with pytest.raises(VolumeError, match="target_spacing"):
        resample_isotropic(constant_volume((2, 2, 2)), 0.0)


def test_window_normalize_endpoints_and_clip():
    v = Volume(np.array([-1000.0, -175.0, 37.5, 250.0, 3000.0], dtype=np.float32).reshape(5, 1, 1))
    ae = window_normalize(v, AE_WINDOW)
    assert np.allclose(ae.data.ravel(), [-1.0, -1.0, 0.0, 1.0, 1.0])
    seg = window_normalize(v, SEG_WINDOW)
    assert np.allclose(seg.data.ravel(), [0.0, 0.0, 0.5, 1.0, 1.0])
    assert ae.window == AE_WINDOW


def test_window_normalize_is_idempotent():
    v = _ramp()
    once = window_normalize(v, AE_WINDOW)
    twice = window_normalize(once, AE_WINDOW)
    assert np.array_equal(once.data, twice.data)


def test_preprocess_chain():
    v = Volume(np.full((4, 4, 4), 250.0, dtype=np.float32), spacing=(2.0, 2.0, 2.0), orientation=("L", "P", "S"))
    out = preprocess(v)
    assert out.orientation == ("R", "A", "S")
    assert out.shape == (8, 8, 8)
    assert np.allclose(out.data, 1.0)


def test_crop_patch_pads_out_of_bounds():
    v = _ramp((6, 6, 6))
    p = crop_patch(v, (0, 0, 0), (4, 4, 4), pad_value=-7.0)
    assert p.shape == (4, 4, 4)
    assert p.data[2, 2, 2] == v.data[0, 0, 0]
    assert p.data[0, 0, 0] == -7.0

    m = mask_of(np.ones((6, 6, 6)))
    mp = crop_patch(m, (0, 0, 0), (4, 4, 4), pad_value=9.0)
    assert mp.data[0, 0, 0] == 0
    assert mp.data[3, 3, 3] == 1


def test_crop_patch_origin_tracks_world_position():
    v = _ramp((6, 6, 6))
    p = crop_patch(v, (3, 3, 3), (2, 2, 2))
    w_patch = p.affine() @ np.array([0, 0, 0, 1.0])
    w_src = v.affine() @ np.array([2, 2, 2, 1.0])
    assert np.allclose(w_patch, w_src)


def test_paste_patch_inverts_crop():
    v = _ramp((6, 6, 6))
    for center in [(0, 0, 0), (3, 2, 5), (5, 5, 5)]:
        p = crop_patch(v, center, (4, 3, 5))
        assert np.array_equal(paste_patch(v.data, p.data, center), v.data)


def test_components_use_face_connectivity():
    arr = np.zeros((3, 3, 3), dtype=bool)
    arr[0, 0, 0] = True
    arr[1, 1, 0] = True  # edge-diagonal neighbor only
    _labels, n = label_components(arr)
    assert n == 2


def test_largest_component_keeps_biggest():
    arr = np.zeros((10, 10, 10), dtype=bool)
    arr[0:2, 0:2, 0:2] = True
    arr[5:9, 5:9, 5:9] = True
    out = largest_component(arr)
    assert out.sum() == 64
    assert not out[0, 0, 0]


def test_max_diameter_mm_pairs_and_spacing():
    arr = np.zeros((5, 5, 2), dtype=bool)
    arr[0, 0, 0] = True
    arr[3, 4, 0] = True
    assert max_diameter_mm(arr, (1.0, 1.0, 1.0)) == pytest.approx(5.0)
    assert max_diameter_mm(arr, (2.0, 2.0, 2.0)) == pytest.approx(10.0)
    assert max_diameter_mm(np.zeros((3, 3, 3)), (1.0, 1.0, 1.0)) == 0.0


def test_max_diameter_of_ball_matches_brute_force():
    arr = ball((15, 15, 15), (7, 7, 7), 5.5)
    pts = np.argwhere(arr).astype(float)
    brute = max(np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1).max(axis=1))
    assert max_diameter_mm(arr, (1.0, 1.0, 1.0)) == pytest.approx(brute)
