import json
import math

import numpy as np
import pytest

from ctbench.errors import FormatError, IntegrityError, ParameterError
from ctbench.geometry import (ConeBeamGeometry, ProjectionStack, backproject,
                              cosine_weights, fdk_filter, forward_project,
                              load_projections, ramp_kernel, save_projections)
from ctbench.volume import Grid3, Volume3


def small_geometry(n_views=8, nu=16, nv=16, du=2.0):
    return ConeBeamGeometry.circular(n_views, 100.0, 200.0, (nu, nv), (du, du))


def test_geometry_validation():
    with pytest.raises(ParameterError):
        ConeBeamGeometry.circular(4, 200.0, 100.0, (8, 8), (1.0, 1.0))  # sdd < sod
    with pytest.raises(ParameterError):
        ConeBeamGeometry(np.array([0.0, 0.0]), 100.0, 200.0, (8, 8), (1.0, 1.0))
    with pytest.raises(ParameterError):
        ConeBeamGeometry(np.array([0.0, 7.0]), 100.0, 200.0, (8, 8), (1.0, 1.0))
    with pytest.raises(ParameterError):
        ConeBeamGeometry.circular(4, 100.0, 200.0, (0, 8), (1.0, 1.0))


def _segment_box_chord(src, dst, lo, hi):
    """Independent slab-method oracle for |segment ∩ box| in mm."""
    d = np.asarray(dst, float) - np.asarray(src, float)
    tmin, tmax = 0.0, 1.0
    for a in range(3):
        if abs(d[a]) < 1e-300:
            if not lo[a] <= src[a] <= hi[a]:
                return 0.0
            continue
        t1 = (lo[a] - src[a]) / d[a]
        t2 = (hi[a] - src[a]) / d[a]
        tmin = max(tmin, min(t1, t2))
        tmax = min(tmax, max(t1, t2))
    return max(0.0, (tmax - tmin)) * float(np.linalg.norm(d))


def test_zero_volume_projects_to_zero():
    grid = Grid3.centered((8, 8, 8), (1.0, 1.0, 1.0))
    p = forward_project(Volume3.zeros(grid), small_geometry())
    assert np.all(p.data == 0.0)
    assert not p.fov_warning


def test_single_voxel_rays_match_chord_oracle():
    grid = Grid3.centered((1, 1, 1), (1.0, 1.0, 1.0))
    vol = Volume3(grid, np.ones((1, 1, 1)))
    g = ConeBeamGeometry.circular(5, 80.0, 160.0, (9, 9), (1.0, 1.0))
    p = forward_project(vol, g)
    src, det_base, ustep, vstep = g.view_frames()
    lo = np.array([-0.5, -0.5, -0.5])
    hi = np.array([0.5, 0.5, 0.5])
    for view in range(g.n_views):
        for iv in range(9):
            for iu in range(9):
                pixel = det_base[view] + iu * ustep[view] + iv * vstep[view]
                want = _segment_box_chord(src[view], pixel, lo, hi)
                assert p.data[view, iv, iu] == pytest.approx(want, abs=1e-9)


def test_centered_cube_axial_ray_integral_is_side_length():
    side = 10
    grid = Grid3.centered((side, side, side), (1.0, 1.0, 1.0))
    vol = Volume3(grid, np.ones((side, side, side)))
    g = ConeBeamGeometry.circular(1, 100.0, 200.0, (9, 9), (1.0, 1.0))  # odd -> exact center pixel
    p = forward_project(vol, g)
    assert p.data[0, 4, 4] == pytest.approx(side, abs=1e-9)


def test_forward_projection_linear_and_nonnegative():
    rng = np.random.default_rng(0)
    grid = Grid3.centered((8, 8, 8), (1.0, 1.0, 1.0))
    vol = Volume3(grid, rng.random((8, 8, 8)))
    g = small_geometry()
    p1 = forward_project(vol, g)
    # power-of-two scale: multiplication is exact, so scaling commutes bitwise
    p2 = forward_project(Volume3(grid, 2.0 * vol.data), g)
    assert np.array_equal(2.0 * p1.data, p2.data)
    p3 = forward_project(Volume3(grid, 3.0 * vol.data), g)
    assert np.allclose(3.0 * p1.data, p3.data, rtol=1e-13, atol=0)
    assert np.all(p1.data >= 0.0)


def test_adjointness_small():
    rng = np.random.default_rng(1)
    grid = Grid3.centered((16, 16, 16), (1.0, 1.0, 1.0))
    g = small_geometry(n_views=10, nu=20, nv=20)
    x = Volume3(grid, rng.standard_normal((16, 16, 16)))
    y = rng.standard_normal((10, 20, 20))
    ax = forward_project(x, g)
    aty = backproject(ax.with_data(y), grid)
    lhs = float((ax.data * y).sum())
    rhs = float((x.data * aty.data).sum())
    denom = np.linalg.norm(ax.data) * np.linalg.norm(y) + 1e-12
    assert abs(lhs - rhs) / denom < 1e-3


def test_backproject_zero_and_point_source_focus():
    grid = Grid3.centered((16, 16, 16), (1.0, 1.0, 1.0))
    g = small_geometry(n_views=12, nu=24, nv=24)
    zeros = ProjectionStack(g, np.zeros((12, 24, 24)))
    assert np.all(backproject(zeros, grid).data == 0.0)

    point = np.zeros((16, 16, 16))
    point[8, 8, 8] = 1.0
    p = forward_project(Volume3(grid, point), g)
    smeared = backproject(p, grid)
    assert np.unravel_index(np.argmax(smeared.data), smeared.data.shape) == (8, 8, 8)


def test_backproject_needs_grid():
    g = small_geometry()
    stack = ProjectionStack(g, np.zeros((8, 16, 16)))
    with pytest.raises(ParameterError):
        backproject(stack, "not a grid")


def test_fov_warning_for_distant_volume():
    grid = Grid3((8, 8, 8), (1.0, 1.0, 1.0), (500.0, 500.0, 500.0))
    vol = Volume3(grid, np.ones((8, 8, 8)))
    p = forward_project(vol, small_geometry())
    assert p.fov_warning
    assert np.all(p.data == 0.0)


# ---------------------------------------------------------------------------
# Ramp filtering
# ---------------------------------------------------------------------------


def test_filter_impulse_equals_spatial_ramp_kernel():
    nu, nv = 64, 8
    g = ConeBeamGeometry.circular(2, 100.0, 200.0, (nu, nv), (1.5, 1.5))
    data = np.zeros((2, nv, nu))
    data[0, 3, 20] = 1.0
    out = fdk_filter(ProjectionStack(g, data)).data
    cw = cosine_weights(g)
    want = cw[3, 20] * ramp_kernel(np.arange(nu) - 20, 1.5) * 1.5  # x du convolution scale
    assert np.max(np.abs(out[0, 3] - want)) < 1e-12
    assert np.all(out[1] == 0.0)


def test_filter_suppresses_dc():
    # the truncated ramp kernel leaves a small positive DC residual; assert
    # strong suppression relative to the kernel peak response
    nu = 96
    g = ConeBeamGeometry.circular(1, 100.0, 200.0, (nu, 4), (1.0, 1.0))
    out = fdk_filter(ProjectionStack(g, np.ones((1, 4, nu)))).data
    assert abs(out[0, 0].mean()) < 0.02  # input magnitude 1, h(0) = 0.25


def test_filter_linearity():
    rng = np.random.default_rng(2)
    g = small_geometry(n_views=3, nu=32, nv=4)
    p1 = rng.random((3, 4, 32))
    p2 = rng.random((3, 4, 32))
    fa = fdk_filter(ProjectionStack(g, 2.0 * p1 + 3.0 * p2)).data
    fb = 2.0 * fdk_filter(ProjectionStack(g, p1)).data + 3.0 * fdk_filter(ProjectionStack(g, p2)).data
    assert np.max(np.abs(fa - fb)) < 1e-9


def test_filter_translation_equivariance_along_u():
    nu, nv = 64, 4
    g = ConeBeamGeometry.circular(1, 100.0, 200.0, (nu, nv), (1.0, 1.0))
    row = np.zeros((1, nv, nu))
    row[0, 1, 10:20] = np.linspace(1, 2, 10)
    shifted = np.roll(row, 7, axis=-1)
    # remove the cosine weight so pure convolution shift-equivariance is visible
    f0 = fdk_filter(ProjectionStack(g, row / cosine_weights(g)[None])).data[0, 1]
    f1 = fdk_filter(ProjectionStack(g, shifted / cosine_weights(g)[None])).data[0, 1]
    # interior samples, away from linear-convolution boundary effects
    assert np.allclose(f1[17 : nu - 10], f0[10 : nu - 17], atol=1e-9)


def test_filter_hann_reduces_high_frequency_gain():
    nu = 64
    g = ConeBeamGeometry.circular(1, 100.0, 200.0, (nu, 4), (1.0, 1.0))
    rng = np.random.default_rng(3)
    data = rng.random((1, 4, nu))
    sharp = fdk_filter(ProjectionStack(g, data), "none").data
    smooth = fdk_filter(ProjectionStack(g, data), "hann").data
    assert np.abs(np.diff(smooth, axis=-1)).sum() < np.abs(np.diff(sharp, axis=-1)).sum()
    with pytest.raises(ParameterError):
        fdk_filter(ProjectionStack(g, data), "hamming")


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------


def test_projection_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    g = small_geometry(n_views=3, nu=8, nv=6)
    stack = ProjectionStack(g, rng.random((3, 6, 8)).astype(np.float32).astype(np.float64),
                            fov_warning=True)
    save_projections(stack, tmp_path / "p")
    back = load_projections(tmp_path / "p")
    assert back.fov_warning
    assert np.array_equal(back.data, stack.data)
    assert back.geometry.det_size == (8, 6)
    assert np.allclose(back.geometry.angles_rad, g.angles_rad)


def test_projection_load_errors(tmp_path):
    g = small_geometry(n_views=2, nu=4, nv=4)
    save_projections(ProjectionStack(g, np.zeros((2, 4, 4))), tmp_path / "p")
    (tmp_path / "p.f32").write_bytes(b"\x00" * 4 * 7)
    with pytest.raises(IntegrityError):
        load_projections(tmp_path / "p")
    (tmp_path / "p.json").unlink()
    with pytest.raises(FormatError):
        load_projections(tmp_path / "p")


def test_angular_weights_uniform():
    g = small_geometry(n_views=10)
    w = g.angular_weights()
    assert np.allclose(w, 2 * math.pi / 10)
    assert w.sum() == pytest.approx(2 * math.pi)
