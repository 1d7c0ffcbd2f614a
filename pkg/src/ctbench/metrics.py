"""Pixel-wise and anatomy-aware evaluation metrics.

Empty-mask policy for the set metrics: both sides empty scores 1.0, exactly
one side empty scores 0.0 (an absent structure counts as a failure, not a
missing sample).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import _thinning
from .errors import ParameterError
from .volume import Grid3, Mask3, Volume3

BOTH_EMPTY_SCORE = 1.0
ONE_EMPTY_SCORE = 0.0


@dataclass(frozen=True)
class MetricParams:
    """Shared metric knobs; defaults follow the package-wide conventions."""

    nsd_tau_mm: float = 2.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03

    def __post_init__(self):
        if not self.nsd_tau_mm > 0:
            raise ParameterError("nsd tolerance must be positive")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ParameterError("ssim window must be odd and >= 3")


DEFAULT_PARAMS = MetricParams()


def _require_same_grid(a_grid: Grid3, b_grid: Grid3, what: str) -> None:
    if a_grid != b_grid:
        raise ParameterError(f"{what}: grids differ ({a_grid} vs {b_grid})")


# ---------------------------------------------------------------------------
# Pixel-wise metrics
# ---------------------------------------------------------------------------


def psnr(ref: Volume3, test: Volume3, data_range: float) -> float:
    """10*log10(range^2 / MSE); +inf when the volumes are identical."""
    _require_same_grid(ref.grid, test.grid, "psnr")
    if not data_range > 0:
        raise ParameterError("data_range must be positive")
    diff = ref.data.astype(np.float64) - test.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return float(10.0 * math.log10(data_range * data_range / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(ref: Volume3, test: Volume3, params: MetricParams = DEFAULT_PARAMS,
         data_range: float = 1.0) -> float:
    """Mean structural similarity, computed per axial (fixed-z) slice.

    Gaussian-weighted local statistics over the valid region only (no
    padding), averaged across the slice map and then across slices.
    """
    _require_same_grid(ref.grid, test.grid, "ssim")
    nx, ny, nz = ref.grid.dims
    win = params.ssim_window
    if nx < win or ny < win:
        raise ParameterError(f"slice ({nx}x{ny}) smaller than ssim window {win}")
    w = _gaussian_window(win, params.ssim_sigma)
    half = win // 2
    c1 = (params.ssim_k1 * data_range) ** 2
    c2 = (params.ssim_k2 * data_range) ** 2

    def local_mean(img):
        full = ndimage.correlate(img, w, mode="constant")
        return full[half : img.shape[0] - half, half : img.shape[1] - half]

    scores = np.empty(nz, dtype=np.float64)
    for z in range(nz):
        x = ref.data[:, :, z].astype(np.float64)
        y = test.data[:, :, z].astype(np.float64)
        mu_x = local_mean(x)
        mu_y = local_mean(y)
        var_x = local_mean(x * x) - mu_x * mu_x
        var_y = local_mean(y * y) - mu_y * mu_y
        cov = local_mean(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores[z] = float(np.mean(num / den))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Overlap and surface metrics
# ---------------------------------------------------------------------------


def dsc(p: Mask3, g: Mask3) -> float:
    """Dice overlap 2|P&G| / (|P|+|G|), with the empty-mask policy."""
    _require_same_grid(p.grid, g.grid, "dsc")
    np_, ng = p.count(), g.count()
    if np_ == 0 and ng == 0:
        return BOTH_EMPTY_SCORE
    if np_ == 0 or ng == 0:
        return ONE_EMPTY_SCORE
    inter = int(np.logical_and(p.bits, g.bits).sum())
    return 2.0 * inter / (np_ + ng)


@dataclass(frozen=True)
class SurfacePointSet:
    """Centers of the voxel faces separating foreground from background (mm)."""

    points: np.ndarray  # (n, 3) float64
    grid: Grid3

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def extract_surface(m: Mask3) -> SurfacePointSet:
    """One point per exposed voxel face (6-connectivity, outside = background)."""
    bits = m.bits
    spacing = m.grid.spacing_mm
    origin = m.grid.origin_mm
    pieces = []
    for axis in range(3):
        pad_width = [(0, 0)] * 3
        pad_width[axis] = (1, 1)
        pb = np.pad(bits, pad_width, constant_values=False)
        a = pb[tuple(slice(0, -1) if ax == axis else slice(None) for ax in range(3))]
        b = pb[tuple(slice(1, None) if ax == axis else slice(None) for ax in range(3))]
        # face index f along `axis` separates voxels f-1 and f; f in [0, n]
        faces = np.argwhere(a != b)
        if faces.size == 0:
            continue
        pts = faces.astype(np.float64)
        for ax in range(3):
            shift = 0.5 if ax == axis else 0.0
            pts[:, ax] = origin[ax] + (pts[:, ax] - shift) * spacing[ax]
        pieces.append(pts)
    if not pieces:
        return SurfacePointSet(np.empty((0, 3)), m.grid)
    return SurfacePointSet(np.concatenate(pieces, axis=0), m.grid)


def nsd(p: Mask3, g: Mask3, tau_mm: float | None = None,
        params: MetricParams = DEFAULT_PARAMS) -> float:
    """Normalized surface agreement: the fraction of both boundary-face sets
    lying within ``tau_mm`` (Euclidean, mm) of the opposing surface."""
    _require_same_grid(p.grid, g.grid, "nsd")
    tau = params.nsd_tau_mm if tau_mm is None else float(tau_mm)
    if not tau > 0:
        raise ParameterError("tau must be positive")
    if p.count() == 0 and g.count() == 0:
        return BOTH_EMPTY_SCORE
    if p.count() == 0 or g.count() == 0:
        return ONE_EMPTY_SCORE
    sp = extract_surface(p).points
    sg = extract_surface(g).points
    d_p = cKDTree(sg).query(sp, k=1)[0]
    d_g = cKDTree(sp).query(sg, k=1)[0]
    hits = int((d_p <= tau).sum()) + int((d_g <= tau).sum())
    return hits / (len(sp) + len(sg))


# ---------------------------------------------------------------------------
# Centerline metrics
# ---------------------------------------------------------------------------


def skeletonize(m: Mask3) -> Mask3:
    """Topology-preserving centerline skeleton (see _thinning)."""
    if m.count() == 0:
        return m
    return Mask3(m.grid, _thinning.thin(m.bits))


def cl_dice(p: Mask3, g: Mask3) -> float:
    """Harmonic mean of skeleton-in-mask precision and sensitivity."""
    _require_same_grid(p.grid, g.grid, "cl_dice")
    skel_p = skeletonize(p).bits
    skel_g = skeletonize(g).bits
    n_sp = int(skel_p.sum())
    n_sg = int(skel_g.sum())
    if n_sp == 0 and n_sg == 0:
        return BOTH_EMPTY_SCORE
    if n_sp == 0 or n_sg == 0:
        return ONE_EMPTY_SCORE
    tprec = int(np.logical_and(skel_p, g.bits).sum()) / n_sp
    tsens = int(np.logical_and(skel_g, p.bits).sum()) / n_sg
    if tprec + tsens == 0.0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)
