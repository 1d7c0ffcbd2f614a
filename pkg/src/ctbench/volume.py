"""Voxel-grid data types and their on-disk formats.

Conventions used everywhere in the package:

* volumes are indexed ``data[x, y, z]`` with shape ``(nx, ny, nz)``;
* the flat/serialized order is x-fastest (Fortran order of that array);
* ``origin_mm`` is the world position of the *center* of voxel (0, 0, 0);
* raw payloads are little-endian: float32 for intensities (``.f32``),
  uint16 for labels (``.u16``), each next to a JSON sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError, ParameterError, UnknownLabelError

FORMAT_VERSION = "1.0"

CATEGORIES = ("LargeOrgan", "SmallOrgan", "Intestine", "Vessel")


@dataclass(frozen=True)
class Grid3:
    """Geometry of a voxel grid: counts, physical spacing and origin (mm)."""

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float]

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) <= 0 for d in self.dims):
            raise ParameterError(f"dims must be three positive counts, got {self.dims}")
        if len(self.spacing_mm) != 3 or any(not (s > 0) for s in self.spacing_mm):
            raise ParameterError(f"spacing_mm must be strictly positive, got {self.spacing_mm}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    @staticmethod
    def centered(dims, spacing_mm) -> "Grid3":
        """Grid whose voxel centers are symmetric about the world origin."""
        origin = tuple(-(d - 1) / 2.0 * s for d, s in zip(dims, spacing_mm))
        return Grid3(tuple(dims), tuple(spacing_mm), origin)


def _check_payload(grid: Grid3, data: np.ndarray, name: str) -> np.ndarray:
    if data.shape != grid.dims:
        raise ParameterError(f"{name} shape {data.shape} does not match dims {grid.dims}")
    return data


@dataclass(frozen=True)
class Volume3:
    """Scalar intensity volume on a grid. Immutable after construction."""

    grid: Grid3
    data: np.ndarray  # shape (nx, ny, nz), float32 or float64

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        _check_payload(self.grid, data, "volume data")
        if not np.all(np.isfinite(data)):
            raise ParameterError("volume data must be finite")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing_mm(self):
        return self.grid.spacing_mm

    @property
    def origin_mm(self):
        return self.grid.origin_mm

    def with_data(self, data: np.ndarray) -> "Volume3":
        return Volume3(self.grid, data)

    @staticmethod
    def zeros(grid: Grid3, dtype=np.float32) -> "Volume3":
        return Volume3(grid, np.zeros(grid.dims, dtype=dtype))


@dataclass(frozen=True)
class Mask3:
    """Boolean mask on a grid."""

    grid: Grid3
    bits: np.ndarray  # shape (nx, ny, nz), bool

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        _check_payload(self.grid, bits, "mask bits")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class LabelVolume:
    """Integer anatomy labels on a grid plus a label -> (name, category) table.

    Label 0 is background and never appears in the table.
    """

    grid: Grid3
    labels: np.ndarray  # shape (nx, ny, nz), uint16
    table: dict[int, tuple[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.dtype != np.uint16:
            if labels.min(initial=0) < 0 or labels.max(initial=0) > np.iinfo(np.uint16).max:
                raise ParameterError("labels must fit in uint16")
            labels = labels.astype(np.uint16)
        _check_payload(self.grid, labels, "labels")
        table = {int(k): (str(n), str(c)) for k, (n, c) in self.table.items()}
        for lab, (name, cat) in table.items():
            if lab == 0:
                raise ParameterError("label 0 is reserved for background")
            if cat not in CATEGORIES:
                raise ParameterError(f"unknown category {cat!r} for label {lab} ({name})")
        present = set(np.unique(labels).tolist()) - {0}
        missing = present - set(table)
        if missing:
            raise ParameterError(f"labels {sorted(missing)} present in volume but not in table")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "table", table)

    @property
    def dims(self):
        return self.grid.dims

    def name_of(self, label: int) -> str:
        return self.table[int(label)][0]

    def category_of(self, label: int) -> str:
        return self.table[int(label)][1]


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def binary_mask(lv: LabelVolume, label: int) -> Mask3:
    """Mask of voxels carrying exactly ``label`` (0 selects background)."""
    label = int(label)
    if label != 0 and label not in lv.table:
        raise UnknownLabelError(f"label {label} not in table {sorted(lv.table)}")
    return Mask3(lv.grid, lv.labels == label)


def window_normalize(v: Volume3, lo: float, hi: float) -> Volume3:
    """Clamp-and-rescale intensities so [lo, hi] maps linearly onto [0, 1]."""
    if not lo < hi:
        raise ParameterError(f"window requires lo < hi, got ({lo}, {hi})")
    out = np.clip((v.data.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return Volume3(v.grid, out.astype(np.float32))


# ---------------------------------------------------------------------------
# On-disk formats
# ---------------------------------------------------------------------------
#
# <name>.f32 + <name>.json : Volume3 (little-endian float32, x-fastest)
# <name>.u16 + <name>.json : LabelVolume (little-endian uint16 + label table)


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _write_sidecar(path: Path, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    _sidecar_path(path).write_text(text)


def _read_sidecar(path: Path) -> dict:
    side = _sidecar_path(path)
    if not side.exists():
        raise FormatError(f"missing sidecar {side}")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt sidecar {side}: {exc}") from exc
    for key in ("format_version", "dims", "spacing_mm", "origin_mm"):
        if key not in meta:
            raise FormatError(f"sidecar {side} missing field {key!r}")
    return meta


def _grid_from_meta(meta: dict) -> Grid3:
    return Grid3(tuple(meta["dims"]), tuple(meta["spacing_mm"]), tuple(meta["origin_mm"]))


def _grid_meta(grid: Grid3) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "dims": list(grid.dims),
        "spacing_mm": list(grid.spacing_mm),
        "origin_mm": list(grid.origin_mm),
    }


def save_volume(v: Volume3, path) -> None:
    """Write ``<path>.f32`` (raw LE float32, x-fastest) and its JSON sidecar."""
    path = Path(path).with_suffix(".f32")
    raw = np.asarray(v.data, dtype="<f4").ravel(order="F")
    path.write_bytes(raw.tobytes())
    meta = _grid_meta(v.grid)
    meta["kind"] = "volume"
    _write_sidecar(path, meta)


def load_volume(path) -> Volume3:
    path = Path(path).with_suffix(".f32")
    meta = _read_sidecar(path)
    grid = _grid_from_meta(meta)
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != grid.n_voxels:
        raise IntegrityError(
            f"{path} holds {raw.size} floats but dims {grid.dims} require {grid.n_voxels}"
        )
    data = raw.reshape(grid.dims, order="F")
    return Volume3(grid, data)


def save_labels(lv: LabelVolume, path) -> None:
    """Write ``<path>.u16`` plus a sidecar that embeds the label table."""
    path = Path(path).with_suffix(".u16")
    raw = np.asarray(lv.labels, dtype="<u2").ravel(order="F")
    path.write_bytes(raw.tobytes())
    meta = _grid_meta(lv.grid)
    meta["kind"] = "labels"
    meta["label_table"] = {
        str(lab): {"name": name, "category": cat} for lab, (name, cat) in sorted(lv.table.items())
    }
    _write_sidecar(path, meta)


def load_labels(path) -> LabelVolume:
    path = Path(path).with_suffix(".u16")
    meta = _read_sidecar(path)
    if "label_table" not in meta:
        raise FormatError(f"sidecar for {path} missing label_table")
    grid = _grid_from_meta(meta)
    raw = np.frombuffer(path.read_bytes(), dtype="<u2")
    if raw.size != grid.n_voxels:
        raise IntegrityError(
            f"{path} holds {raw.size} labels but dims {grid.dims} require {grid.n_voxels}"
        )
    labels = raw.reshape(grid.dims, order="F")
    table = {
        int(lab): (entry["name"], entry["category"]) for lab, entry in meta["label_table"].items()
    }
    return LabelVolume(grid, labels, table)
