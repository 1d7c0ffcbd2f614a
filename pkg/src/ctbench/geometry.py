"""Circular cone-beam geometry, projection and backprojection.

World frame: the rotation axis is z. At angle theta the source sits at
``(sod*sin(theta), -sod*cos(theta), 0)`` and the flat detector, orthogonal to
the central ray at distance ``sdd`` from the source, has in-plane axes
``e_u = (cos t, sin t, 0)`` and ``e_v = (0, 0, 1)``. Projection values are
line integrals in (attenuation * mm).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import _siddon
from .errors import FormatError, IntegrityError, ParameterError
from .volume import FORMAT_VERSION, Grid3, Volume3

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Circular trajectory acquisition description."""

    angles_rad: np.ndarray
    sod_mm: float
    sdd_mm: float
    det_size: tuple[int, int]  # (nu, nv)
    det_spacing_mm: tuple[float, float]  # (du, dv)
    det_offset_mm: tuple[float, float] = (0.0, 0.0)  # (u0, v0)

    def __post_init__(self):
        angles = np.asarray(self.angles_rad, dtype=np.float64)
        if angles.ndim != 1 or angles.size == 0:
            raise ParameterError("angles_rad must be a nonempty 1-D array")
        if np.any(angles < 0) or np.any(angles >= TWO_PI):
            raise ParameterError("angles must lie in [0, 2*pi)")
        if angles.size > 1 and np.any(np.diff(angles) <= 0):
            raise ParameterError("angles must be strictly increasing")
        if not (self.sdd_mm > self.sod_mm > 0):
            raise ParameterError(f"need sdd > sod > 0, got sod={self.sod_mm}, sdd={self.sdd_mm}")
        nu, nv = self.det_size
        if nu <= 0 or nv <= 0:
            raise ParameterError("detector pixel counts must be positive")
        du, dv = self.det_spacing_mm
        if not (du > 0 and dv > 0):
            raise ParameterError("detector spacings must be positive")
        angles.flags.writeable = False
        object.__setattr__(self, "angles_rad", angles)
        object.__setattr__(self, "det_size", (int(nu), int(nv)))
        object.__setattr__(self, "det_spacing_mm", (float(du), float(dv)))
        object.__setattr__(self, "det_offset_mm", tuple(float(o) for o in self.det_offset_mm))
        object.__setattr__(self, "sod_mm", float(self.sod_mm))
        object.__setattr__(self, "sdd_mm", float(self.sdd_mm))

    @property
    def n_views(self) -> int:
        return int(self.angles_rad.size)

    @staticmethod
    def circular(n_views: int, sod_mm: float, sdd_mm: float, det_size, det_spacing_mm,
                 det_offset_mm=(0.0, 0.0)) -> "ConeBeamGeometry":
        """n_views equally spaced over [0, 2*pi)."""
        if n_views <= 0:
            raise ParameterError("n_views must be positive")
        angles = np.arange(n_views, dtype=np.float64) * (TWO_PI / n_views)
        return ConeBeamGeometry(angles, sod_mm, sdd_mm, det_size, det_spacing_mm, det_offset_mm)

    def with_views(self, n_views: int) -> "ConeBeamGeometry":
        return ConeBeamGeometry.circular(
            n_views, self.sod_mm, self.sdd_mm, self.det_size, self.det_spacing_mm, self.det_offset_mm
        )

    def view_frames(self):
        """Per-view source points and detector pixel-(0,0) frames, in mm.

        Returns (src, det_base, ustep, vstep), each of shape (n_views, 3);
        pixel (iu, iv) center = det_base + iu*ustep + iv*vstep.
        """
        th = self.angles_rad
        st, ct = np.sin(th), np.cos(th)
        nu, nv = self.det_size
        du, dv = self.det_spacing_mm
        u0, v0 = self.det_offset_mm
        src = np.stack([self.sod_mm * st, -self.sod_mm * ct, np.zeros_like(th)], axis=1)
        det_center = np.stack(
            [-(self.sdd_mm - self.sod_mm) * st, (self.sdd_mm - self.sod_mm) * ct, np.zeros_like(th)],
            axis=1,
        )
        e_u = np.stack([ct, st, np.zeros_like(th)], axis=1)
        e_v = np.broadcast_to(np.array([0.0, 0.0, 1.0]), (th.size, 3)).copy()
        det_base = (
            det_center
            + (u0 - (nu - 1) / 2.0 * du) * e_u
            + (v0 - (nv - 1) / 2.0 * dv) * e_v
        )
        return src, det_base, du * e_u, dv * e_v

    def angular_weights(self) -> np.ndarray:
        """Per-view angular step (rad), wrap-around midpoint rule on the circle."""
        th = self.angles_rad
        if th.size == 1:
            return np.array([TWO_PI])
        ext = np.concatenate([[th[-1] - TWO_PI], th, [th[0] + TWO_PI]])
        return (ext[2:] - ext[:-2]) / 2.0


@dataclass(frozen=True)
class ProjectionStack:
    """Line integrals for every view: data shape (n_views, nv, nu)."""

    geometry: ConeBeamGeometry
    data: np.ndarray
    fov_warning: bool = False

    def __post_init__(self):
        nu, nv = self.geometry.det_size
        data = np.asarray(self.data, dtype=np.float64)
        expected = (self.geometry.n_views, nv, nu)
        if data.shape != expected:
            raise ParameterError(f"projection data shape {data.shape}, expected {expected}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("projection data must be finite")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    def with_data(self, data: np.ndarray) -> "ProjectionStack":
        return replace(self, data=data)


def _volume_box(grid: Grid3):
    """Lower corner of the voxel box (origin is the first voxel *center*)."""
    ox, oy, oz = grid.origin_mm
    sx, sy, sz = grid.spacing_mm
    return ox - sx / 2.0, oy - sy / 2.0, oz - sz / 2.0


def _outside_fov(v: Volume3, g: ConeBeamGeometry) -> bool:
    """Conservative test: bounding sphere misses the detector in every view."""
    grid = v.grid
    half = np.array(grid.dims) * np.array(grid.spacing_mm) / 2.0
    center = np.array(grid.origin_mm) + half - np.array(grid.spacing_mm) / 2.0
    radius = float(np.linalg.norm(half))
    nu, nv = g.det_size
    du, dv = g.det_spacing_mm
    u0, v0 = g.det_offset_mm
    u_lo = u0 - nu / 2.0 * du
    u_hi = u0 + nu / 2.0 * du
    v_lo = v0 - nv / 2.0 * dv
    v_hi = v0 + nv / 2.0 * dv
    for th in g.angles_rad:
        st, ct = np.sin(th), np.cos(th)
        L = g.sod_mm - center[0] * st + center[1] * ct
        if L + radius <= 1e-9:
            continue  # wholly behind the source: invisible in this view
        if L - radius <= 1e-9:
            return False  # straddles the source plane; cannot certify
        mag = g.sdd_mm / (L - radius)
        uc = g.sdd_mm * (center[0] * ct + center[1] * st) / L
        vc = g.sdd_mm * center[2] / L
        rho = mag * radius
        if uc + rho >= u_lo and uc - rho <= u_hi and vc + rho >= v_lo and vc - rho <= v_hi:
            return False
    return True


def forward_project(v: Volume3, g: ConeBeamGeometry) -> ProjectionStack:
    """Siddon line integrals of the volume for every view."""
    nu, nv = g.det_size
    src, det_base, ustep, vstep = g.view_frames()
    bx0, by0, bz0 = _volume_box(v.grid)
    sx, sy, sz = v.grid.spacing_mm
    vol = np.ascontiguousarray(v.data, dtype=np.float64)
    out = np.empty((g.n_views, nv, nu), dtype=np.float64)
    for i in range(g.n_views):
        _siddon.forward_view(vol, bx0, by0, bz0, sx, sy, sz, src[i], det_base[i], ustep[i], vstep[i], out[i])
    return ProjectionStack(g, out, fov_warning=_outside_fov(v, g))


def forward_project_view(vol: np.ndarray, grid: Grid3, g: ConeBeamGeometry, view: int,
                         out: np.ndarray | None = None) -> np.ndarray:
    """Project a raw (nx,ny,nz) float64 array for a single view index."""
    nu, nv = g.det_size
    src, det_base, ustep, vstep = g.view_frames()
    bx0, by0, bz0 = _volume_box(grid)
    sx, sy, sz = grid.spacing_mm
    if out is None:
        out = np.empty((nv, nu), dtype=np.float64)
    _siddon.forward_view(vol, bx0, by0, bz0, sx, sy, sz, src[view], det_base[view], ustep[view], vstep[view], out)
    return out


def backproject_view_into(acc: np.ndarray, grid: Grid3, g: ConeBeamGeometry, view: int,
                          view_data: np.ndarray) -> None:
    """Scatter one view's values into ``acc`` (adjoint of forward_project_view)."""
    src, det_base, ustep, vstep = g.view_frames()
    bx0, by0, bz0 = _volume_box(grid)
    sx, sy, sz = grid.spacing_mm
    _siddon.backproject_view(
        acc, np.ascontiguousarray(view_data, dtype=np.float64),
        bx0, by0, bz0, sx, sy, sz, src[view], det_base[view], ustep[view], vstep[view],
    )


def backproject(p: ProjectionStack, grid) -> Volume3:
    """Unweighted exact adjoint of forward_project onto the template grid.

    Views are accumulated in index order, so the result is reproducible
    bit-for-bit.
    """
    grid = grid.grid if isinstance(grid, Volume3) else grid
    if not isinstance(grid, Grid3):
        raise ParameterError("backproject needs a Grid3 or Volume3 template")
    acc = np.zeros(grid.dims, dtype=np.float64)
    for i in range(p.geometry.n_views):
        backproject_view_into(acc, grid, p.geometry, i, p.data[i])
    return Volume3(grid, acc)


# ---------------------------------------------------------------------------
# Ramp filtering
# ---------------------------------------------------------------------------


def ramp_kernel(offsets: np.ndarray, du: float) -> np.ndarray:
    """Band-limited ramp (Ramachandran-Lakshminarayanan) sampled at integer offsets."""
    offsets = np.asarray(offsets)
    h = np.zeros(offsets.shape, dtype=np.float64)
    h[offsets == 0] = 1.0 / (4.0 * du * du)
    odd = offsets % 2 != 0
    h[odd] = -1.0 / (np.pi**2 * offsets[odd].astype(np.float64) ** 2 * du * du)
    return h


def _pad_length(nu: int) -> int:
    p = 1
    while p < 2 * nu:
        p *= 2
    return p


def cosine_weights(g: ConeBeamGeometry) -> np.ndarray:
    """(nv, nu) pre-weights sdd / sqrt(sdd^2 + u^2 + v^2) at pixel centers."""
    nu, nv = g.det_size
    du, dv = g.det_spacing_mm
    u0, v0 = g.det_offset_mm
    u = (np.arange(nu) - (nu - 1) / 2.0) * du + u0
    vv = (np.arange(nv) - (nv - 1) / 2.0) * dv + v0
    uu, vvv = np.meshgrid(u, vv)
    return g.sdd_mm / np.sqrt(g.sdd_mm**2 + uu**2 + vvv**2)


def fdk_filter(p: ProjectionStack, apodization: str = "none") -> ProjectionStack:
    """Cosine-weight each view, then ramp-convolve rows along u.

    The convolution is the exact linear convolution with the discrete ramp
    kernel (frequency-domain product after zero-padding to the next power of
    two >= 2*nu), scaled by du so rows approximate the continuous filtered
    projection. "hann" multiplies the ramp spectrum by a Hann window.
    """
    if apodization not in ("none", "hann"):
        raise ParameterError(f"unknown apodization {apodization!r}")
    g = p.geometry
    nu, _ = g.det_size
    du, _ = g.det_spacing_mm
    pad = _pad_length(nu)

    # circularly embedded spatial kernel over offsets [-(nu-1), nu-1]
    ker = np.zeros(pad, dtype=np.float64)
    offs = np.arange(nu)
    ker[:nu] = ramp_kernel(offs, du)
    ker[pad - nu + 1 :] = ramp_kernel(offs[1:][::-1], du)
    spec = np.fft.rfft(ker)
    if apodization == "hann":
        f = np.arange(spec.size) / (pad / 2.0)  # 0..1 of Nyquist
        spec = spec * (0.5 * (1.0 + np.cos(np.pi * f)))

    weighted = p.data * cosine_weights(g)[None, :, :]
    rows = np.fft.rfft(weighted, n=pad, axis=-1)
    filtered = np.fft.irfft(rows * spec[None, None, :], n=pad, axis=-1)[..., :nu]
    return p.with_data(filtered * du)


# ---------------------------------------------------------------------------
# On-disk format: <name>.f32 raw + sidecar embedding the geometry
# ---------------------------------------------------------------------------


def _geometry_meta(g: ConeBeamGeometry) -> dict:
    return {
        "angles_rad": [float(a) for a in g.angles_rad],
        "sod_mm": g.sod_mm,
        "sdd_mm": g.sdd_mm,
        "det_size": list(g.det_size),
        "det_spacing_mm": list(g.det_spacing_mm),
        "det_offset_mm": list(g.det_offset_mm),
    }


def geometry_from_meta(meta: dict) -> ConeBeamGeometry:
    return ConeBeamGeometry(
        np.asarray(meta["angles_rad"], dtype=np.float64),
        meta["sod_mm"],
        meta["sdd_mm"],
        tuple(meta["det_size"]),
        tuple(meta["det_spacing_mm"]),
        tuple(meta.get("det_offset_mm", (0.0, 0.0))),
    )


def save_projections(p: ProjectionStack, path) -> None:
    path = Path(path).with_suffix(".f32")
    raw = np.asarray(p.data, dtype="<f4").ravel(order="C")
    path.write_bytes(raw.tobytes())
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "projections",
        "n_views": p.geometry.n_views,
        "geometry": _geometry_meta(p.geometry),
        "fov_warning": bool(p.fov_warning),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_projections(path) -> ProjectionStack:
    path = Path(path).with_suffix(".f32")
    side = path.with_suffix(".json")
    if not side.exists():
        raise FormatError(f"missing sidecar {side}")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt sidecar {side}: {exc}") from exc
    if meta.get("kind") != "projections" or "geometry" not in meta:
        raise FormatError(f"sidecar {side} is not a projection-stack sidecar")
    g = geometry_from_meta(meta["geometry"])
    nu, nv = g.det_size
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = g.n_views * nv * nu
    if raw.size != expected:
        raise IntegrityError(f"{path} holds {raw.size} floats, geometry requires {expected}")
    data = raw.reshape((g.n_views, nv, nu)).astype(np.float64)
    return ProjectionStack(g, data, fov_warning=bool(meta.get("fov_warning", False)))
