"""Classical reconstruction baselines: FDK, SART and TV-regularized SART.

All reconstructors are pure functions of (projections, grid, params) and are
bit-reproducible: view loops run in a fixed order and every parallel kernel
writes disjoint outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _siddon
from .errors import ParameterError
from .geometry import ProjectionStack, backproject_view_into, fdk_filter, forward_project_view, _volume_box
from .volume import Grid3, Volume3

_GOLDEN_FRAC = (math.sqrt(5.0) - 1.0) / 2.0
_SUM_GUARD = 1e-12  # rows/columns with smaller weight sums contribute no update


@dataclass(frozen=True)
class SartParams:
    iterations: int = 20
    relaxation: float = 0.7
    view_order: str = "sequential"  # or "golden"
    view_order_seed: int = 0
    nonneg_clip: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ParameterError("iterations must be >= 0")
        if not 0.0 < self.relaxation < 2.0:
            raise ParameterError(f"relaxation must be in (0, 2), got {self.relaxation}")
        if self.view_order not in ("sequential", "golden"):
            raise ParameterError(f"unknown view order {self.view_order!r}")


@dataclass(frozen=True)
class AsdPocsParams:
    iterations: int = 20
    tv_steps_per_iter: int = 20
    alpha: float = 0.2
    alpha_red: float = 0.95
    r_max: float = 0.95
    tv_epsilon: float = 1e-8
    sart_inner: SartParams = field(default_factory=lambda: SartParams(iterations=1))

    def __post_init__(self):
        if self.iterations <= 0 or self.tv_steps_per_iter < 0:
            raise ParameterError("iteration counts must be positive (tv steps >= 0)")
        if not 0.0 < self.alpha_red < 1.0:
            raise ParameterError("alpha_red must lie in (0, 1)")
        if self.alpha < 0 or self.r_max <= 0:
            raise ParameterError("alpha must be >= 0 and r_max positive")


@dataclass
class ReconDiagnostics:
    """Per-iteration traces; written as CSV (iteration, residual, tv)."""

    residuals: list = field(default_factory=list)
    tv_values: list = field(default_factory=list)
    tv_step_trace: list = field(default_factory=list)  # list per iteration of TV after each step

    def rows(self):
        out = []
        for i in range(max(len(self.residuals), len(self.tv_values))):
            res = self.residuals[i] if i < len(self.residuals) else ""
            tv = self.tv_values[i] if i < len(self.tv_values) else ""
            out.append((i + 1, res, tv))
        return out


def _grid_of(grid) -> Grid3:
    if isinstance(grid, Volume3):
        return grid.grid
    if isinstance(grid, Grid3):
        return grid
    raise ParameterError("grid template must be a Grid3 or Volume3")


# ---------------------------------------------------------------------------
# FDK
# ---------------------------------------------------------------------------


def fdk(p: ProjectionStack, grid, apodization: str = "none") -> Volume3:
    """Feldkamp reconstruction: filtered views, distance-weighted backprojection."""
    grid = _grid_of(grid)
    g = p.geometry
    if g.n_views < 2:
        raise ParameterError("fdk needs at least 2 views")
    nu, nv = g.det_size
    if nu < 2 or nv < 2:
        raise ParameterError("fdk needs a detector of at least 2x2 pixels")
    filtered = fdk_filter(p, apodization)

    du, dv = g.det_spacing_mm
    u0, v0 = g.det_offset_mm
    # angular step weights; sdd/sod rescales filtering done in physical detector units
    weights = p.geometry.angular_weights() / 2.0 * (g.sdd_mm / g.sod_mm)
    th = g.angles_rad
    bx_c, by_c, bz_c = grid.origin_mm
    sx, sy, sz = grid.spacing_mm
    out = np.zeros(grid.dims, dtype=np.float64)
    _siddon.fdk_backproject(
        np.ascontiguousarray(filtered.data),
        np.sin(th), np.cos(th), weights,
        g.sod_mm, g.sdd_mm, nu, nv, du, dv, u0, v0,
        bx_c, by_c, bz_c, sx, sy, sz, out,
    )
    return Volume3(grid, out)


# ---------------------------------------------------------------------------
# SART
# ---------------------------------------------------------------------------


def _view_order(n_views: int, params: SartParams) -> np.ndarray:
    if params.view_order == "sequential":
        return np.arange(n_views)
    keys = ((np.arange(n_views) + params.view_order_seed) * _GOLDEN_FRAC) % 1.0
    return np.argsort(keys, kind="stable")


def _sart_normalizers(p: ProjectionStack, grid: Grid3):
    """Per-ray chord sums (A 1) and per-view voxel weight sums (A^T 1)."""
    g = p.geometry
    nu, nv = g.det_size
    ones_vol = np.ones(grid.dims, dtype=np.float64)
    row_sums = np.empty((g.n_views, nv, nu), dtype=np.float64)
    col_sums = np.empty((g.n_views,) + tuple(grid.dims), dtype=np.float32)
    ones_view = np.ones((nv, nu), dtype=np.float64)
    acc = np.empty(grid.dims, dtype=np.float64)
    for v in range(g.n_views):
        forward_project_view(ones_vol, grid, g, v, row_sums[v])
        acc[:] = 0.0
        backproject_view_into(acc, grid, g, v, ones_view)
        col_sums[v] = acc.astype(np.float32)
    return row_sums, col_sums


def sart(p: ProjectionStack, grid, params: SartParams, init: Volume3 | None = None,
         diagnostics: ReconDiagnostics | None = None, _normalizers=None) -> Volume3:
    """Additive SART with per-view normalized residual backprojection.

    ``_normalizers`` lets asd_pocs reuse the per-view weight sums across its
    outer iterations; they depend only on (geometry, grid).
    """
    grid = _grid_of(grid)
    g = p.geometry
    if init is not None and init.grid != grid:
        raise ParameterError("init volume grid does not match the template")
    x = (init.data.astype(np.float64) if init is not None
         else np.zeros(grid.dims, dtype=np.float64))
    if params.iterations == 0:
        return Volume3(grid, x)

    row_sums, col_sums = _normalizers if _normalizers is not None else _sart_normalizers(p, grid)
    order = _view_order(g.n_views, params)
    nu, nv = g.det_size
    proj = np.empty((nv, nu), dtype=np.float64)
    upd = np.empty(grid.dims, dtype=np.float64)

    for _ in range(params.iterations):
        for v in order:
            forward_project_view(x, grid, g, int(v), proj)
            resid = p.data[v] - proj
            rs = row_sums[v]
            np.divide(resid, rs, out=resid, where=rs > _SUM_GUARD)
            resid[rs <= _SUM_GUARD] = 0.0
            upd[:] = 0.0
            backproject_view_into(upd, grid, g, int(v), resid)
            cs = col_sums[v]
            np.divide(upd, cs, out=upd, where=cs > _SUM_GUARD)
            upd[cs <= _SUM_GUARD] = 0.0
            x += params.relaxation * upd
            if params.nonneg_clip:
                np.maximum(x, 0.0, out=x)
        if diagnostics is not None:
            diagnostics.residuals.append(_residual_norm(p, grid, x))
    return Volume3(grid, x)


def _residual_norm(p: ProjectionStack, grid: Grid3, x: np.ndarray) -> float:
    g = p.geometry
    nu, nv = g.det_size
    proj = np.empty((nv, nu), dtype=np.float64)
    acc = 0.0
    for v in range(g.n_views):
        forward_project_view(x, grid, g, v, proj)
        d = proj - p.data[v]
        acc += float(np.dot(d.ravel(), d.ravel()))
    return math.sqrt(acc)


# ---------------------------------------------------------------------------
# ASD-POCS
# ---------------------------------------------------------------------------


def tv_value(x: np.ndarray, eps: float = 1e-8) -> float:
    """Smoothed isotropic total variation (forward differences)."""
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gz = np.zeros_like(x)
    gx[:-1] = x[1:] - x[:-1]
    gy[:, :-1] = x[:, 1:] - x[:, :-1]
    gz[:, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    return float(np.sqrt(gx * gx + gy * gy + gz * gz + eps * eps).sum())


def _tv_gradient(x: np.ndarray, eps: float) -> np.ndarray:
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gz = np.zeros_like(x)
    gx[:-1] = x[1:] - x[:-1]
    gy[:, :-1] = x[:, 1:] - x[:, :-1]
    gz[:, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    mag = np.sqrt(gx * gx + gy * gy + gz * gz + eps * eps)
    gx /= mag
    gy /= mag
    gz /= mag
    grad = -(gx + gy + gz)
    grad[1:] += gx[:-1]
    grad[:, 1:] += gy[:, :-1]
    grad[:, :, 1:] += gz[:, :, :-1]
    return grad


def asd_pocs(p: ProjectionStack, grid, params: AsdPocsParams,
             diagnostics: ReconDiagnostics | None = None) -> Volume3:
    """Alternate SART data-consistency passes with adaptive TV descent.

    The TV step size starts at alpha * ||first data step|| and shrinks by
    alpha_red whenever the TV move outruns r_max times the data move.
    """
    grid = _grid_of(grid)
    x = Volume3.zeros(grid, dtype=np.float64)
    normalizers = _sart_normalizers(p, grid) if params.sart_inner.iterations > 0 else None
    dtvg = 0.0
    first = True
    for _ in range(params.iterations):
        x_prev = x.data
        x = sart(p, grid, params.sart_inner, init=x, _normalizers=normalizers)
        dp = float(np.linalg.norm((x.data - x_prev).ravel()))
        if first:
            dtvg = params.alpha * dp
            first = False

        if params.tv_steps_per_iter > 0 and dtvg > 0.0:
            y = x.data.copy()
            step_trace = []
            for _step in range(params.tv_steps_per_iter):
                grad = _tv_gradient(y, params.tv_epsilon)
                norm = float(np.linalg.norm(grad.ravel()))
                if norm <= 0.0:
                    break
                y -= dtvg * (grad / norm)
                if diagnostics is not None:
                    step_trace.append(tv_value(y, params.tv_epsilon))
            dg = float(np.linalg.norm((y - x.data).ravel()))
            if diagnostics is not None:
                diagnostics.tv_step_trace.append(step_trace)
            if dg > params.r_max * dp and dp > _SUM_GUARD:
                dtvg *= params.alpha_red
            x = Volume3(grid, y)
        elif diagnostics is not None:
            diagnostics.tv_step_trace.append([])

        if diagnostics is not None:
            diagnostics.residuals.append(_residual_norm(p, grid, x.data))
            diagnostics.tv_values.append(tv_value(x.data, params.tv_epsilon))
    return x
