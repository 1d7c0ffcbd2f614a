"""Deterministic synthetic labeled phantom and controlled perturbations.

Shapes are rasterized with 2x supersampling per axis (8 sub-points per
voxel); a voxel is claimed when at least half of its sub-points fall inside,
which keeps thin tubes 26-connected at coarse grids. Labeled structures must
not overlap; the enclosing body ellipsoid is intensity-only (label 0).
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ParameterError, PhantomSpecError, UnknownLabelError
from .volume import CATEGORIES, Grid3, LabelVolume, Mask3, Volume3

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Shape descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple[float, float, float]
    radii_mm: tuple[float, float, float]

    def __post_init__(self):
        if any(not (r > 0) for r in self.radii_mm):
            raise ParameterError("ellipsoid radii must be positive")

    def aabb(self):
        c, r = np.asarray(self.center_mm), np.asarray(self.radii_mm)
        return c - r, c + r

    def segments(self, rng):
        return None

    def contains(self, x, y, z):
        cx, cy, cz = self.center_mm
        rx, ry, rz = self.radii_mm
        return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2 <= 1.0


@dataclass(frozen=True)
class Tube:
    """Capsule chain along a polyline with a constant radius."""

    points_mm: tuple
    radius_mm: float

    def __post_init__(self):
        pts = tuple(tuple(float(c) for c in p) for p in self.points_mm)
        if len(pts) < 2:
            raise ParameterError("tube needs at least two polyline points")
        if not self.radius_mm > 0:
            raise ParameterError("tube radius must be positive")
        object.__setattr__(self, "points_mm", pts)

    def aabb(self):
        pts = np.asarray(self.points_mm)
        return pts.min(axis=0) - self.radius_mm, pts.max(axis=0) + self.radius_mm

    def segments(self, rng):
        pts = np.asarray(self.points_mm)
        return [(pts[i], pts[i + 1], self.radius_mm) for i in range(len(pts) - 1)]


@dataclass(frozen=True)
class BranchingTree:
    """Recursive bifurcating capsule tree with seeded direction jitter.

    Radii taper by ``taper`` and segment lengths by 0.8 per level.
    """

    root_mm: tuple[float, float, float]
    direction: tuple[float, float, float]
    depth: int
    segment_length_mm: float
    radius_mm: float
    taper: float = 0.75
    branch_angle_deg: float = 28.0
    jitter_deg: float = 6.0

    def __post_init__(self):
        if self.depth < 0:
            raise ParameterError("tree depth must be >= 0")
        if not (self.segment_length_mm > 0 and self.radius_mm > 0):
            raise ParameterError("tree lengths and radii must be positive")
        if not 0 < self.taper <= 1:
            raise ParameterError("taper must lie in (0, 1]")

    def segments(self, rng):
        segs = []
        d0 = np.asarray(self.direction, dtype=np.float64)
        norm = np.linalg.norm(d0)
        if norm == 0:
            raise ParameterError("tree direction must be nonzero")
        d0 = d0 / norm

        def grow(p, d, length, radius, level):
            q = p + length * d
            segs.append((p.copy(), q.copy(), radius))
            if level >= self.depth:
                return
            # random branching plane orthogonal to the current direction
            a = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            e1 = np.cross(d, a)
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(d, e1)
            azim = rng.uniform(0.0, 2.0 * math.pi)
            u = math.cos(azim) * e1 + math.sin(azim) * e2
            for sign in (1.0, -1.0):
                ang = math.radians(
                    self.branch_angle_deg + rng.uniform(-self.jitter_deg, self.jitter_deg)
                )
                cd = math.cos(ang) * d + sign * math.sin(ang) * u
                cd /= np.linalg.norm(cd)
                grow(q, cd, length * 0.8, radius * self.taper, level + 1)

        grow(np.asarray(self.root_mm, dtype=np.float64), d0, self.segment_length_mm, self.radius_mm, 0)
        return segs

    def aabb(self):
        # conservative: total reach is a geometric series of segment lengths
        reach = self.segment_length_mm * sum(0.8**k for k in range(self.depth + 1))
        c = np.asarray(self.root_mm, dtype=np.float64)
        pad = reach + self.radius_mm
        return c - pad, c + pad


SHAPE_TYPES = {"ellipsoid": Ellipsoid, "tube": Tube, "branching_tree": BranchingTree}


@dataclass(frozen=True)
class PhantomStructure:
    name: str
    category: str
    shape: object
    attenuation: float

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise PhantomSpecError(f"structure {self.name!r}: unknown category {self.category!r}")
        if not self.attenuation > 0:
            raise PhantomSpecError(f"structure {self.name!r}: attenuation must be positive")


@dataclass(frozen=True)
class PhantomSpec:
    """Everything needed to rasterize one synthetic labeled scan."""

    seed: int
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    body_shape: Ellipsoid
    body_attenuation: float
    structures: tuple[PhantomStructure, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "structures", tuple(self.structures))
        names = [s.name for s in self.structures]
        if len(set(names)) != len(names):
            raise PhantomSpecError("structure names must be unique")
        attens = [self.body_attenuation] + [s.attenuation for s in self.structures]
        if len(set(attens)) != len(attens):
            raise PhantomSpecError(
                "attenuation values must be pairwise distinct (needed by the "
                "intensity-based structure classifier)"
            )

    def grid(self) -> Grid3:
        return Grid3.centered(self.dims, self.spacing_mm)


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------


def _shape_to_json(shape) -> dict:
    if isinstance(shape, Ellipsoid):
        return {"type": "ellipsoid", "center_mm": list(shape.center_mm), "radii_mm": list(shape.radii_mm)}
    if isinstance(shape, Tube):
        return {"type": "tube", "points_mm": [list(p) for p in shape.points_mm], "radius_mm": shape.radius_mm}
    if isinstance(shape, BranchingTree):
        return {
            "type": "branching_tree",
            "root_mm": list(shape.root_mm),
            "direction": list(shape.direction),
            "depth": shape.depth,
            "segment_length_mm": shape.segment_length_mm,
            "radius_mm": shape.radius_mm,
            "taper": shape.taper,
            "branch_angle_deg": shape.branch_angle_deg,
            "jitter_deg": shape.jitter_deg,
        }
    raise ParameterError(f"unknown shape {shape!r}")


def _shape_from_json(obj: dict):
    kind = obj.get("type")
    if kind == "ellipsoid":
        return Ellipsoid(tuple(obj["center_mm"]), tuple(obj["radii_mm"]))
    if kind == "tube":
        return Tube(tuple(tuple(p) for p in obj["points_mm"]), float(obj["radius_mm"]))
    if kind == "branching_tree":
        return BranchingTree(
            tuple(obj["root_mm"]),
            tuple(obj["direction"]),
            int(obj["depth"]),
            float(obj["segment_length_mm"]),
            float(obj["radius_mm"]),
            float(obj.get("taper", 0.75)),
            float(obj.get("branch_angle_deg", 28.0)),
            float(obj.get("jitter_deg", 6.0)),
        )
    raise PhantomSpecError(f"unknown shape type {kind!r}")


def spec_to_json(spec: PhantomSpec) -> dict:
    return {
        "seed": spec.seed,
        "dims": list(spec.dims),
        "spacing_mm": list(spec.spacing_mm),
        "body": {"shape": _shape_to_json(spec.body_shape), "attenuation": spec.body_attenuation},
        "structures": [
            {
                "name": s.name,
                "category": s.category,
                "attenuation": s.attenuation,
                "shape": _shape_to_json(s.shape),
            }
            for s in spec.structures
        ],
    }


def spec_from_json(obj: dict) -> PhantomSpec:
    try:
        return PhantomSpec(
            seed=int(obj["seed"]),
            dims=tuple(obj["dims"]),
            spacing_mm=tuple(obj["spacing_mm"]),
            body_shape=_shape_from_json(obj["body"]["shape"]),
            body_attenuation=float(obj["body"]["attenuation"]),
            structures=tuple(
                PhantomStructure(
                    s["name"], s["category"], _shape_from_json(s["shape"]), float(s["attenuation"])
                )
                for s in obj.get("structures", ())
            ),
        )
    except KeyError as exc:
        raise PhantomSpecError(f"phantom spec missing field {exc}") from exc


def load_spec(path) -> PhantomSpec:
    return spec_from_json(json.loads(Path(path).read_text()))


def save_spec(spec: PhantomSpec, path) -> None:
    Path(path).write_text(json.dumps(spec_to_json(spec), indent=2, sort_keys=True) + "\n")


def default_spec() -> PhantomSpec:
    """The 64^3 / 1 mm abdomen-like phantom shipped with the package."""
    with resources.files("ctbench.data").joinpath("phantom_default.json").open() as fh:
        return spec_from_json(json.load(fh))


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

_SUB_OFFSETS = tuple(itertools.product((-0.25, 0.25), repeat=3))


def _rasterize_shape(shape, grid: Grid3, rng) -> np.ndarray:
    """Supersampled occupancy of one shape on the grid."""
    lo_mm, hi_mm = shape.aabb()
    origin = np.asarray(grid.origin_mm)
    spacing = np.asarray(grid.spacing_mm)
    lo_idx = np.maximum(np.floor((lo_mm - origin) / spacing - 1).astype(int), 0)
    hi_idx = np.minimum(np.ceil((hi_mm - origin) / spacing + 1).astype(int), np.asarray(grid.dims) - 1)
    out = np.zeros(grid.dims, dtype=bool)
    if np.any(lo_idx > hi_idx):
        return out
    idx = [np.arange(lo_idx[a], hi_idx[a] + 1) for a in range(3)]
    base = [origin[a] + idx[a] * spacing[a] for a in range(3)]
    counts = np.zeros(tuple(len(i) for i in idx), dtype=np.int8)

    segments = shape.segments(rng) if not isinstance(shape, Ellipsoid) else None
    for frac in _SUB_OFFSETS:
        x = (base[0] + frac[0] * spacing[0])[:, None, None]
        y = (base[1] + frac[1] * spacing[1])[None, :, None]
        z = (base[2] + frac[2] * spacing[2])[None, None, :]
        if segments is None:
            counts += shape.contains(x, y, z)
        else:
            hit = np.zeros(counts.shape, dtype=bool)
            for p0, p1, radius in segments:
                hit |= _capsule_contains(x, y, z, np.asarray(p0), np.asarray(p1), radius)
            counts += hit
    out[lo_idx[0] : hi_idx[0] + 1, lo_idx[1] : hi_idx[1] + 1, lo_idx[2] : hi_idx[2] + 1] = counts >= 4
    return out


def _capsule_contains(x, y, z, p0, p1, radius):
    d = p1 - p0
    l2 = float(np.dot(d, d))
    if l2 == 0.0:
        dx, dy, dz = x - p0[0], y - p0[1], z - p0[2]
        return dx * dx + dy * dy + dz * dz <= radius * radius
    t = ((x - p0[0]) * d[0] + (y - p0[1]) * d[1] + (z - p0[2]) * d[2]) / l2
    t = np.clip(t, 0.0, 1.0)
    dx = x - (p0[0] + t * d[0])
    dy = y - (p0[1] + t * d[1])
    dz = z - (p0[2] + t * d[2])
    return dx * dx + dy * dy + dz * dz <= radius * radius


def make_phantom(spec: PhantomSpec) -> tuple[Volume3, LabelVolume]:
    """Rasterize the spec into an intensity volume and matching label volume.

    Deterministic for a fixed spec (the tree jitter is seeded by spec.seed).
    Raises PhantomSpecError when two labeled structures claim one voxel.
    """
    grid = spec.grid()
    rng = np.random.default_rng(spec.seed)
    intensity = np.zeros(grid.dims, dtype=np.float64)
    labels = np.zeros(grid.dims, dtype=np.uint16)

    body = _rasterize_shape(spec.body_shape, grid, rng)
    intensity[body] = spec.body_attenuation

    claimed_by = np.zeros(grid.dims, dtype=np.int32)  # structure index + 1
    table = {}
    for i, s in enumerate(spec.structures, start=1):
        occ = _rasterize_shape(s.shape, grid, rng)
        clash = occ & (claimed_by > 0)
        if np.any(clash):
            other = spec.structures[int(claimed_by[clash][0]) - 1].name
            raise PhantomSpecError(
                f"structures {other!r} and {s.name!r} overlap after rasterization"
            )
        claimed_by[occ] = i
        intensity[occ] = s.attenuation
        labels[occ] = i
        table[i] = (s.name, s.category)

    return Volume3(grid, intensity.astype(np.float32)), LabelVolume(grid, labels, table)


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------


def ablate_structure(v: Volume3, lv: LabelVolume, label: int) -> Volume3:
    """Replace one structure's voxels with the surrounding background intensity."""
    label = int(label)
    if label == 0:
        raise ParameterError("cannot ablate background (label 0)")
    if label not in lv.table:
        raise UnknownLabelError(f"label {label} not in table {sorted(lv.table)}")
    if v.grid != lv.grid:
        raise ParameterError("volume and labels live on different grids")
    mask = lv.labels == label
    shell = ndimage.binary_dilation(mask, structure=np.ones((3, 3, 3), bool)) & ~mask
    shell &= lv.labels == 0
    if np.any(shell):
        fill = float(np.median(v.data[shell]))
    else:
        fill = float(np.median(v.data[lv.labels == 0]))
    out = v.data.copy()
    out[mask] = fill
    return Volume3(v.grid, out)


def shift_mask(m: Mask3, offset_mm) -> Mask3:
    """Translate by the nearest whole-voxel offset, truncating at the borders."""
    offset_mm = np.asarray(offset_mm, dtype=np.float64)
    if offset_mm.shape != (3,):
        raise ParameterError("offset_mm must be a 3-vector")
    vox = np.rint(offset_mm / np.asarray(m.grid.spacing_mm)).astype(int)
    rounding = offset_mm - vox * np.asarray(m.grid.spacing_mm)
    if np.any(np.abs(rounding) > 1e-9):
        log.info("shift_mask: offset %s mm rounded to %s voxels (residual %s mm)",
                 offset_mm.tolist(), vox.tolist(), rounding.tolist())
    out = np.zeros_like(m.bits)
    src = []
    dst = []
    for axis, k in enumerate(vox):
        n = m.bits.shape[axis]
        if abs(k) >= n:
            return Mask3(m.grid, out)
        if k >= 0:
            src.append(slice(0, n - k))
            dst.append(slice(k, n))
        else:
            src.append(slice(-k, n))
            dst.append(slice(0, n + k))
    out[tuple(dst)] = m.bits[tuple(src)]
    return Mask3(m.grid, out)


def dilate_mask(m: Mask3, delta_mm: float) -> Mask3:
    """Morphological dilation by a Euclidean ball of radius delta_mm."""
    if delta_mm < 0:
        raise ParameterError("dilation radius must be >= 0")
    if delta_mm == 0 or m.count() == 0:
        return m
    dist = ndimage.distance_transform_edt(~m.bits, sampling=m.grid.spacing_mm)
    return Mask3(m.grid, dist <= delta_mm)
