"""Numba kernels: Siddon ray traversal and weighted voxel-driven backprojection.

The projector integrates piecewise-constant voxel values along the exact
source-to-pixel segment (intersection lengths in mm). The scatter kernel is
its exact adjoint. Parallel loops only ever write to disjoint outputs, so
results are bit-reproducible.
"""

import numpy as np
from numba import njit, prange

_EPS_DIR = 1e-12


@njit(cache=True)
def _line_integral(vol, bx0, by0, bz0, sx, sy, sz, nx, ny, nz, rx, ry, rz, px, py, pz):
    dx = px - rx
    dy = py - ry
    dz = pz - rz
    tmin = 0.0
    tmax = 1.0
    # slab clipping per axis
    if abs(dx) > _EPS_DIR:
        t1 = (bx0 - rx) / dx
        t2 = (bx0 + nx * sx - rx) / dx
        lo = min(t1, t2)
        hi = max(t1, t2)
        if lo > tmin:
            tmin = lo
        if hi < tmax:
            tmax = hi
    elif rx < bx0 or rx > bx0 + nx * sx:
        return 0.0
    if abs(dy) > _EPS_DIR:
        t1 = (by0 - ry) / dy
        t2 = (by0 + ny * sy - ry) / dy
        lo = min(t1, t2)
        hi = max(t1, t2)
        if lo > tmin:
            tmin = lo
        if hi < tmax:
            tmax = hi
    elif ry < by0 or ry > by0 + ny * sy:
        return 0.0
    if abs(dz) > _EPS_DIR:
        t1 = (bz0 - rz) / dz
        t2 = (bz0 + nz * sz - rz) / dz
        lo = min(t1, t2)
        hi = max(t1, t2)
        if lo > tmin:
            tmin = lo
        if hi < tmax:
            tmax = hi
    elif rz < bz0 or rz > bz0 + nz * sz:
        return 0.0
    if tmax <= tmin:
        return 0.0

    ray_len = np.sqrt(dx * dx + dy * dy + dz * dz)
    # initial voxel from a point nudged just inside the entry face
    tn = tmin + 1e-10 * (tmax - tmin)
    ix = int(np.floor((rx + tn * dx - bx0) / sx))
    iy = int(np.floor((ry + tn * dy - by0) / sy))
    iz = int(np.floor((rz + tn * dz - bz0) / sz))
    if ix < 0:
        ix = 0
    if ix > nx - 1:
        ix = nx - 1
    if iy < 0:
        iy = 0
    if iy > ny - 1:
        iy = ny - 1
    if iz < 0:
        iz = 0
    if iz > nz - 1:
        iz = nz - 1

    # parametric distance to the next crossing per axis
    big = 1e300
    if dx > _EPS_DIR:
        tx = (bx0 + (ix + 1) * sx - rx) / dx
        dtx = sx / dx
        stepx = 1
    elif dx < -_EPS_DIR:
        tx = (bx0 + ix * sx - rx) / dx
        dtx = -sx / dx
        stepx = -1
    else:
        tx = big
        dtx = big
        stepx = 0
    if dy > _EPS_DIR:
        ty = (by0 + (iy + 1) * sy - ry) / dy
        dty = sy / dy
        stepy = 1
    elif dy < -_EPS_DIR:
        ty = (by0 + iy * sy - ry) / dy
        dty = -sy / dy
        stepy = -1
    else:
        ty = big
        dty = big
        stepy = 0
    if dz > _EPS_DIR:
        tz = (bz0 + (iz + 1) * sz - rz) / dz
        dtz = sz / dz
        stepz = 1
    elif dz < -_EPS_DIR:
        tz = (bz0 + iz * sz - rz) / dz
        dtz = -sz / dz
        stepz = -1
    else:
        tz = big
        dtz = big
        stepz = 0

    acc = 0.0
    t = tmin
    while t < tmax:
        tnext = tx
        if ty < tnext:
            tnext = ty
        if tz < tnext:
            tnext = tz
        if tnext > tmax:
            tnext = tmax
        seg = (tnext - t) * ray_len
        if seg > 0.0:
            acc += vol[ix, iy, iz] * seg
        t = tnext
        if t >= tmax:
            break
        if tx <= tnext:
            ix += stepx
            tx += dtx
            if ix < 0 or ix >= nx:
                break
        if ty <= tnext:
            iy += stepy
            ty += dty
            if iy < 0 or iy >= ny:
                break
        if tz <= tnext:
            iz += stepz
            tz += dtz
            if iz < 0 or iz >= nz:
                break
    return acc


@njit(cache=True)
def _line_scatter(out, bx0, by0, bz0, sx, sy, sz, nx, ny, nz, rx, ry, rz, px, py, pz, val):
    """Adjoint of _line_integral: add val * segment_length into crossed voxels."""
    dx = px - rx
    dy = py - ry
    dz = pz - rz
    tmin = 0.0
    tmax = 1.0
    if abs(dx) > _EPS_DIR:
        t1 = (bx0 - rx) / dx
        t2 = (bx0 + nx * sx - rx) / dx
        lo = min(t1, t2)
        hi = max(t1, t2)
        if lo > tmin:
            tmin = lo
        if hi < tmax:
            tmax = hi
    elif rx < bx0 or rx > bx0 + nx * sx:
        return
    if abs(dy) > _EPS_DIR:
        t1 = (by0 - ry) / dy
        t2 = (by0 + ny * sy - ry) / dy
        lo = min(t1, t2)
        hi = max(t1, t2)
        if lo > tmin:
            tmin = lo
        if hi < tmax:
            tmax = hi
    elif ry < by0 or ry > by0 + ny * sy:
        return
    if abs(dz) > _EPS_DIR:
        t1 = (bz0 - rz) / dz
        t2 = (bz0 + nz * sz - rz) / dz
        lo = min(t1, t2)
        hi = max(t1, t2)
        if lo > tmin:
            tmin = lo
        if hi < tmax:
            tmax = hi
    elif rz < bz0 or rz > bz0 + nz * sz:
        return
    if tmax <= tmin:
        return

    ray_len = np.sqrt(dx * dx + dy * dy + dz * dz)
    tn = tmin + 1e-10 * (tmax - tmin)
    ix = int(np.floor((rx + tn * dx - bx0) / sx))
    iy = int(np.floor((ry + tn * dy - by0) / sy))
    iz = int(np.floor((rz + tn * dz - bz0) / sz))
    if ix < 0:
        ix = 0
    if ix > nx - 1:
        ix = nx - 1
    if iy < 0:
        iy = 0
    if iy > ny - 1:
        iy = ny - 1
    if iz < 0:
        iz = 0
    if iz > nz - 1:
        iz = nz - 1

    big = 1e300
    if dx > _EPS_DIR:
        tx = (bx0 + (ix + 1) * sx - rx) / dx
        dtx = sx / dx
        stepx = 1
    elif dx < -_EPS_DIR:
        tx = (bx0 + ix * sx - rx) / dx
        dtx = -sx / dx
        stepx = -1
    else:
        tx = big
        dtx = big
        stepx = 0
    if dy > _EPS_DIR:
        ty = (by0 + (iy + 1) * sy - ry) / dy
        dty = sy / dy
        stepy = 1
    elif dy < -_EPS_DIR:
        ty = (by0 + iy * sy - ry) / dy
        dty = -sy / dy
        stepy = -1
    else:
        ty = big
        dty = big
        stepy = 0
    if dz > _EPS_DIR:
        tz = (bz0 + (iz + 1) * sz - rz) / dz
        dtz = sz / dz
        stepz = 1
    elif dz < -_EPS_DIR:
        tz = (bz0 + iz * sz - rz) / dz
        dtz = -sz / dz
        stepz = -1
    else:
        tz = big
        dtz = big
        stepz = 0

    t = tmin
    while t < tmax:
        tnext = tx
        if ty < tnext:
            tnext = ty
        if tz < tnext:
            tnext = tz
        if tnext > tmax:
            tnext = tmax
        seg = (tnext - t) * ray_len
        if seg > 0.0:
            out[ix, iy, iz] += val * seg
        t = tnext
        if t >= tmax:
            break
        if tx <= tnext:
            ix += stepx
            tx += dtx
            if ix < 0 or ix >= nx:
                break
        if ty <= tnext:
            iy += stepy
            ty += dty
            if iy < 0 or iy >= ny:
                break
        if tz <= tnext:
            iz += stepz
            tz += dtz
            if iz < 0 or iz >= nz:
                break


@njit(cache=True, parallel=True)
def forward_view(vol, bx0, by0, bz0, sx, sy, sz, src, det_base, ustep, vstep, out):
    """Project one view; out has shape (nv, nu). Rows run in parallel."""
    nx, ny, nz = vol.shape
    nv, nu = out.shape
    for iv in prange(nv):
        base_x = det_base[0] + iv * vstep[0]
        base_y = det_base[1] + iv * vstep[1]
        base_z = det_base[2] + iv * vstep[2]
        for iu in range(nu):
            px = base_x + iu * ustep[0]
            py = base_y + iu * ustep[1]
            pz = base_z + iu * ustep[2]
            out[iv, iu] = _line_integral(
                vol, bx0, by0, bz0, sx, sy, sz, nx, ny, nz,
                src[0], src[1], src[2], px, py, pz,
            )


@njit(cache=True)
def backproject_view(out, view_data, bx0, by0, bz0, sx, sy, sz, src, det_base, ustep, vstep):
    """Scatter-adjoint of forward_view for one view; serial (overlapping writes)."""
    nx, ny, nz = out.shape
    nv, nu = view_data.shape
    for iv in range(nv):
        base_x = det_base[0] + iv * vstep[0]
        base_y = det_base[1] + iv * vstep[1]
        base_z = det_base[2] + iv * vstep[2]
        for iu in range(nu):
            val = view_data[iv, iu]
            if val == 0.0:
                continue
            px = base_x + iu * ustep[0]
            py = base_y + iu * ustep[1]
            pz = base_z + iu * ustep[2]
            _line_scatter(
                out, bx0, by0, bz0, sx, sy, sz, nx, ny, nz,
                src[0], src[1], src[2], px, py, pz, val,
            )


@njit(cache=True, parallel=True)
def fdk_backproject(q, sin_t, cos_t, weight, sod, sdd, nu, nv, du, dv, u0, v0,
                    bx_c, by_c, bz_c, sx, sy, sz, out):
    """Distance-weighted backprojection of filtered views with bilinear sampling.

    q: (n_views, nv, nu) filtered projections; weight: per-view angular step / 2
    scaled by sdd/sod; (bx_c, by_c, bz_c) is the world position of voxel (0,0,0)
    center. Each voxel is written by exactly one thread.
    """
    nx, ny, nz = out.shape
    n_views = q.shape[0]
    half_u = (nu - 1) / 2.0
    half_v = (nv - 1) / 2.0
    for ixy in prange(nx * ny):
        ix = ixy // ny
        iy = ixy % ny
        wx = bx_c + ix * sx
        wy = by_c + iy * sy
        for iz in range(nz):
            wz = bz_c + iz * sz
            acc = 0.0
            for v in range(n_views):
                st = sin_t[v]
                ct = cos_t[v]
                L = sod - wx * st + wy * ct
                if L < 1e-6:
                    continue
                mag = sdd / L
                us = mag * (wx * ct + wy * st)
                vs = mag * wz
                fu = (us - u0) / du + half_u
                fv = (vs - v0) / dv + half_v
                if fu < 0.0 or fu > nu - 1 or fv < 0.0 or fv > nv - 1:
                    continue
                ju = int(np.floor(fu))
                jv = int(np.floor(fv))
                if ju > nu - 2:
                    ju = nu - 2
                if jv > nv - 2:
                    jv = nv - 2
                au = fu - ju
                av = fv - jv
                s = (
                    (1.0 - av) * ((1.0 - au) * q[v, jv, ju] + au * q[v, jv, ju + 1])
                    + av * ((1.0 - au) * q[v, jv + 1, ju] + au * q[v, jv + 1, ju + 1])
                )
                acc += weight[v] * (sod / L) * (sod / L) * s
            out[ix, iy, iz] = acc
