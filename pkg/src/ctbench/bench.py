"""Staged benchmark pipeline: phantom -> project -> reconstruct -> evaluate -> report.

Every stage reads its inputs from ``out_dir`` and overwrites its outputs
byte-identically for a fixed (config, seed), so expensive stages can be
cached and re-run safely.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import phantom as ph
from .errors import EvaluationError, ParameterError, PipelineError
from .geometry import ConeBeamGeometry, forward_project, load_projections, save_projections
from .metrics import MetricParams, cl_dice, dsc, nsd, psnr, ssim
from .recon import AsdPocsParams, ReconDiagnostics, SartParams, asd_pocs, fdk, sart
from .stats import (MetricRecord, mann_whitney_u, median_iqr, pearson,
                    per_scan_category_means)
from .volume import (LabelVolume, Mask3, Volume3, binary_mask, load_labels, load_volume,
                     save_labels, save_volume, window_normalize)

log = logging.getLogger(__name__)

METHODS = ("fdk", "sart", "asdpocs")
PIXEL_STRUCTURE = "whole_volume"
PIXEL_CATEGORY = "Pixel"

# which anatomy metric feeds each category's summary cell
CATEGORY_METRIC = {
    "LargeOrgan": "nsd",
    "SmallOrgan": "nsd",
    "Intestine": "cldice",
    "Vessel": "cldice",
}
SUMMARY_CELLS = (
    ("ssim", PIXEL_CATEGORY, "ssim"),
    ("psnr", PIXEL_CATEGORY, "psnr"),
    ("nsd_large", "LargeOrgan", "nsd"),
    ("nsd_small", "SmallOrgan", "nsd"),
    ("cldice_intestine", "Intestine", "cldice"),
    ("cldice_vessel", "Vessel", "cldice"),
)


@dataclass(frozen=True)
class GeometryConfig:
    sod_mm: float = 200.0
    sdd_mm: float = 400.0
    det_size: tuple[int, int] = (96, 96)
    det_spacing_mm: tuple[float, float] = (2.0, 2.0)
    det_offset_mm: tuple[float, float] = (0.0, 0.0)

    def for_views(self, n_views: int) -> ConeBeamGeometry:
        return ConeBeamGeometry.circular(
            n_views, self.sod_mm, self.sdd_mm, self.det_size, self.det_spacing_mm, self.det_offset_mm
        )


@dataclass(frozen=True)
class BenchConfig:
    out_dir: str = "bench_out"
    phantom_spec: str | None = None  # None -> packaged default
    seed: int = 0
    n_scans: int = 1
    views: tuple[int, ...] = (50, 100, 200, 360)
    methods: tuple[str, ...] = METHODS
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    window: tuple[float, float] = (0.0, 2.0)
    nsd_tau_mm: float = 2.0
    noise_sigma: float = 0.0
    apodization: str = "none"
    sart: SartParams = field(default_factory=SartParams)
    asdpocs: AsdPocsParams = field(default_factory=lambda: AsdPocsParams(alpha=0.05))
    compare_methods: tuple[str, str] | None = None
    pitfall_views: int = 360
    pitfall_noise_sigma: float = 4.5
    pitfall_apodization: str = "hann"

    def __post_init__(self):
        if not self.methods:
            raise ParameterError("methods list must be nonempty")
        for m in self.methods:
            if m not in METHODS:
                raise ParameterError(f"unknown method {m!r}; valid: {list(METHODS)}")
        if any(v <= 0 for v in self.views):
            raise ParameterError("view counts must be positive")
        if self.n_scans < 1:
            raise ParameterError("n_scans must be >= 1")
        if self.noise_sigma < 0 or self.pitfall_noise_sigma < 0:
            raise ParameterError("noise sigma must be >= 0")

    def metric_params(self) -> MetricParams:
        return MetricParams(nsd_tau_mm=self.nsd_tau_mm)

    def load_spec(self) -> ph.PhantomSpec:
        if self.phantom_spec is None:
            return ph.default_spec()
        return ph.load_spec(self.phantom_spec)

    def scan_ids(self) -> list[str]:
        return [f"scan{idx:03d}" for idx in range(self.n_scans)]


def config_from_json(obj: dict) -> BenchConfig:
    kw = dict(obj)
    if "geometry" in kw:
        geo = dict(kw["geometry"])
        for key in ("det_size", "det_spacing_mm", "det_offset_mm"):
            if key in geo:
                geo[key] = tuple(geo[key])
        kw["geometry"] = GeometryConfig(**geo)
    if "sart" in kw:
        kw["sart"] = SartParams(**kw["sart"])
    if "asdpocs" in kw:
        inner = kw["asdpocs"]
        if "sart_inner" in inner:
            inner = dict(inner)
            inner["sart_inner"] = SartParams(**inner["sart_inner"])
        kw["asdpocs"] = AsdPocsParams(**inner)
    for key in ("views", "methods", "window"):
        if key in kw:
            kw[key] = tuple(kw[key])
    if kw.get("compare_methods") is not None:
        kw["compare_methods"] = tuple(kw["compare_methods"])
    try:
        return BenchConfig(**kw)
    except TypeError as exc:
        raise ParameterError(f"bad config field: {exc}") from exc


def load_config(path) -> BenchConfig:
    return config_from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Stage helpers
# ---------------------------------------------------------------------------


def _scan_dir(cfg: BenchConfig, scan_id: str) -> Path:
    return Path(cfg.out_dir) / scan_id


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise PipelineError(f"{stage}: missing upstream artifact {path}")
    return path


def _scan_spec(cfg: BenchConfig, idx: int) -> ph.PhantomSpec:
    spec = cfg.load_spec()
    return replace(spec, seed=spec.seed + idx)


def cmd_phantom(cfg: BenchConfig) -> list[Path]:
    """Rasterize one labeled phantom per scan."""
    written = []
    for idx, scan_id in enumerate(cfg.scan_ids()):
        d = _scan_dir(cfg, scan_id)
        d.mkdir(parents=True, exist_ok=True)
        vol, lv = ph.make_phantom(_scan_spec(cfg, idx))
        save_volume(vol, d / "gt")
        save_labels(lv, d / "gt_labels")
        written += [d / "gt.f32", d / "gt_labels.u16"]
        log.info("phantom %s: %d labeled structures", scan_id, len(lv.table))
    return written


def _noise_rng(cfg: BenchConfig, scan_idx: int, n_views: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, scan_idx, n_views])


def cmd_project(cfg: BenchConfig) -> list[Path]:
    """Simulate projections for every scan and view count."""
    written = []
    for idx, scan_id in enumerate(cfg.scan_ids()):
        d = _scan_dir(cfg, scan_id)
        gt = load_volume(_require(d / "gt.f32", "project"))
        for n_views in cfg.views:
            stack = forward_project(gt, cfg.geometry.for_views(n_views))
            if stack.fov_warning:
                log.warning("project %s v%d: volume outside field of view", scan_id, n_views)
            if cfg.noise_sigma > 0:
                noise = _noise_rng(cfg, idx, n_views).standard_normal(stack.data.shape)
                stack = stack.with_data(stack.data + cfg.noise_sigma * noise)
            path = d / f"proj_v{n_views:03d}"
            save_projections(stack, path)
            written.append(path.with_suffix(".f32"))
    return written


def _reconstruct_one(cfg: BenchConfig, method: str, stack, grid,
                     diagnostics: ReconDiagnostics | None = None) -> Volume3:
    if method == "fdk":
        return fdk(stack, grid, cfg.apodization)
    if method == "sart":
        return sart(stack, grid, cfg.sart, diagnostics=diagnostics)
    if method == "asdpocs":
        return asd_pocs(stack, grid, cfg.asdpocs, diagnostics=diagnostics)
    raise ParameterError(f"unknown method {method!r}; valid: {list(METHODS)}")


def cmd_reconstruct(cfg: BenchConfig) -> list[Path]:
    """Run every configured method on every projection stack."""
    written = []
    for scan_id in cfg.scan_ids():
        d = _scan_dir(cfg, scan_id)
        gt = load_volume(_require(d / "gt.f32", "reconstruct"))
        for n_views in cfg.views:
            stack = load_projections(_require(d / f"proj_v{n_views:03d}.f32", "reconstruct"))
            for method in cfg.methods:
                diag = ReconDiagnostics() if method in ("sart", "asdpocs") else None
                vol = _reconstruct_one(cfg, method, stack, gt.grid, diag)
                path = d / f"recon_{method}_v{n_views:03d}"
                save_volume(vol, path)
                written.append(path.with_suffix(".f32"))
                if diag is not None:
                    _write_diagnostics(path.with_name(path.name + "_diag.csv"), diag)
                log.info("reconstructed %s %s v%d", scan_id, method, n_views)
    return written


def _write_diagnostics(path: Path, diag: ReconDiagnostics) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "residual", "tv"])
        for row in diag.rows():
            w.writerow(row)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def classify_structures(v: Volume3, spec: ph.PhantomSpec) -> np.ndarray:
    """Stand-in segmentator: nearest-attenuation voxel classification.

    Returns an integer label array aligned with the phantom's label ids
    (0 = air/body background). Requires the spec's attenuations to be
    pairwise distinct, which PhantomSpec enforces.
    """
    values = np.array([0.0, spec.body_attenuation] + [s.attenuation for s in spec.structures])
    ids = np.array([0, 0] + list(range(1, len(spec.structures) + 1)))
    order = np.argsort(values)
    values, ids = values[order], ids[order]
    midpoints = (values[1:] + values[:-1]) / 2.0
    return ids[np.digitize(v.data, midpoints)]


def evaluate_volume(test: Volume3, gt: Volume3, lv: LabelVolume, spec: ph.PhantomSpec,
                    cfg: BenchConfig, scan_id: str, method: str, n_views: int) -> list[MetricRecord]:
    """Pixel metrics on the windowed volumes plus per-structure anatomy metrics."""
    if test.grid != gt.grid or test.grid != lv.grid:
        raise EvaluationError("evaluation inputs live on different grids")
    lo, hi = cfg.window
    w_gt = window_normalize(gt, lo, hi)
    w_test = window_normalize(test, lo, hi)
    params = cfg.metric_params()
    recs = [
        MetricRecord(scan_id, method, n_views, PIXEL_STRUCTURE, PIXEL_CATEGORY, "psnr",
                     psnr(w_gt, w_test, 1.0)),
        MetricRecord(scan_id, method, n_views, PIXEL_STRUCTURE, PIXEL_CATEGORY, "ssim",
                     ssim(w_gt, w_test, params, 1.0)),
    ]
    pred_labels = classify_structures(test, spec)
    for lab, (name, category) in sorted(lv.table.items()):
        g_mask = binary_mask(lv, lab)
        p_mask = Mask3(lv.grid, pred_labels == lab)
        recs.append(MetricRecord(scan_id, method, n_views, name, category, "dsc",
                                 dsc(p_mask, g_mask)))
        if CATEGORY_METRIC[category] == "nsd":
            value = nsd(p_mask, g_mask, cfg.nsd_tau_mm, params)
            recs.append(MetricRecord(scan_id, method, n_views, name, category, "nsd", value))
        else:
            recs.append(MetricRecord(scan_id, method, n_views, name, category, "cldice",
                                     cl_dice(p_mask, g_mask)))
    return recs


RECORD_HEADER = ["scan_id", "method", "views", "structure", "category", "metric", "value"]


def _format_value(v: float) -> str:
    return "inf" if v == math.inf else repr(float(v))


def write_records(records: list[MetricRecord], path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_HEADER)
        for r in records:
            w.writerow([r.scan_id, r.method_id, r.views, r.structure, r.category,
                        r.metric, _format_value(r.value)])


def read_records(path: Path) -> list[MetricRecord]:
    records = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(MetricRecord(
                row["scan_id"], row["method"], int(row["views"]), row["structure"],
                row["category"], row["metric"],
                math.inf if row["value"] == "inf" else float(row["value"]),
            ))
    return records


def cmd_evaluate(cfg: BenchConfig) -> Path:
    """Score every reconstruction against its scan's ground truth."""
    out = Path(cfg.out_dir)
    records: list[MetricRecord] = []
    for idx, scan_id in enumerate(cfg.scan_ids()):
        d = _scan_dir(cfg, scan_id)
        gt = load_volume(_require(d / "gt.f32", "evaluate"))
        lv = load_labels(_require(d / "gt_labels.u16", "evaluate"))
        spec = _scan_spec(cfg, idx)
        for n_views in cfg.views:
            for method in cfg.methods:
                recon = load_volume(_require(d / f"recon_{method}_v{n_views:03d}.f32", "evaluate"))
                records.extend(evaluate_volume(recon, gt, lv, spec, cfg, scan_id, method, n_views))
    path = out / "records.csv"
    write_records(records, path)
    log.info("evaluate: wrote %d records", len(records))
    return path


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


def _cell_samples(records: list[MetricRecord]) -> dict[tuple, dict[str, float]]:
    """(method, views, cell) -> {scan_id: per-scan value} for the summary cells."""
    means = per_scan_category_means(records)
    cells: dict[tuple, dict[str, float]] = {}
    for (method, views, category, metric, scan), value in means.items():
        for cell, cell_cat, cell_metric in SUMMARY_CELLS:
            if category == cell_cat and metric == cell_metric:
                cells.setdefault((method, views, cell), {})[scan] = value
    return cells


def _fmt_cell(metric: str, med: float, q1: float, q3: float) -> str:
    if metric == "psnr":
        return f"{med:.2f} ({q1:.2f},{q3:.2f})"
    return f"{med:.4f} ({q1:.4f},{q3:.4f})"


def build_summary(records: list[MetricRecord], compare: tuple[str, str] | None = None):
    """Table-shaped rows: one per (method, views), six median (q1,q3) cells.

    With ``compare`` = (baseline, variant) and >= 2 scans, appends one
    two-sided Mann-Whitney p column per cell on every non-baseline row.
    """
    cells = _cell_samples(records)
    keys = sorted({(m, v) for (m, v, _c) in cells})
    n_scans = len({r.scan_id for r in records})
    add_p = compare is not None and n_scans >= 2
    if compare is not None and not add_p:
        log.warning("significance requested but only %d scan(s); omitting p columns", n_scans)
    header = ["method", "views"] + [c for c, _, _ in SUMMARY_CELLS]
    if add_p:
        header += [f"p_{c}" for c, _, _ in SUMMARY_CELLS]
    rows = [header]
    for method, views in keys:
        row = [method, str(views)]
        for cell, _cat, metric in SUMMARY_CELLS:
            samples = cells.get((method, views, cell))
            if not samples:
                row.append("")
                continue
            med, q1, q3 = median_iqr(list(samples.values()))
            row.append(_fmt_cell(metric, med, q1, q3))
        if add_p:
            base, variant = compare
            for cell, _cat, metric in SUMMARY_CELLS:
                if method == base:
                    row.append("")
                    continue
                a = cells.get((base, views, cell), {})
                b = cells.get((method, views, cell), {})
                shared = sorted(set(a) & set(b))
                if len(shared) < 2:
                    row.append("")
                    continue
                _, p = mann_whitney_u([a[s] for s in shared], [b[s] for s in shared])
                row.append(f"{p:.4f}{'*' if p < 0.05 else ''}")
        rows.append(row)
    return rows


def build_scatter(records: list[MetricRecord]) -> dict:
    """Per-(scan, method, views) mean anatomy score vs pixel metrics, with Pearson r."""
    means = per_scan_category_means(records)
    anatomy: dict[tuple, list[float]] = {}
    pixel: dict[tuple, dict[str, float]] = {}
    for (method, views, category, metric, scan), value in means.items():
        key = (scan, method, views)
        if category == PIXEL_CATEGORY:
            pixel.setdefault(key, {})[metric] = value
        elif CATEGORY_METRIC.get(category) == metric:
            anatomy.setdefault(key, []).append(value)
    points = []
    for key in sorted(anatomy):
        if len(anatomy[key]) < len(CATEGORY_METRIC) or key not in pixel:
            continue
        scan, method, views = key
        points.append({
            "scan": scan, "method": method, "views": views,
            "anatomy": float(np.mean(anatomy[key])),
            "ssim": pixel[key].get("ssim"),
            "psnr": pixel[key].get("psnr"),
        })
    result = {"points": points, "pearson_r_ssim": None, "pearson_r_psnr": None}
    finite = [p for p in points if math.isfinite(p["psnr"])]
    if len(points) >= 2:
        try:
            result["pearson_r_ssim"] = pearson([p["anatomy"] for p in points],
                                               [p["ssim"] for p in points])
        except ParameterError as exc:
            log.warning("scatter: %s", exc)
    if len(finite) >= 2:
        try:
            result["pearson_r_psnr"] = pearson([p["anatomy"] for p in finite],
                                               [p["psnr"] for p in finite])
        except ParameterError as exc:
            log.warning("scatter: %s", exc)
    return result


def cmd_report(cfg: BenchConfig) -> tuple[Path, Path]:
    out = Path(cfg.out_dir)
    records = read_records(_require(out / "records.csv", "report"))
    summary_rows = build_summary(records, cfg.compare_methods)
    summary_path = out / "summary.csv"
    with summary_path.open("w", newline="") as fh:
        csv.writer(fh).writerows(summary_rows)
    scatter = build_scatter(records)
    scatter_path = out / "scatter.json"
    scatter_path.write_text(json.dumps(scatter, indent=2, sort_keys=True) + "\n")
    return summary_path, scatter_path


# ---------------------------------------------------------------------------
# Pitfall experiment
# ---------------------------------------------------------------------------


def _pick_target(lv: LabelVolume, target: str) -> int:
    """Resolve a pitfall target selector to a label id."""
    if target.startswith("label:"):
        lab = int(target.split(":", 1)[1])
        if lab not in lv.table:
            raise ParameterError(f"label {lab} not in phantom table {sorted(lv.table)}")
        return lab
    if target == "smallest-small":
        cands = [(binary_mask(lv, lab).count(), lab)
                 for lab, (_n, cat) in lv.table.items() if cat == "SmallOrgan"]
    elif target == "largest-large":
        cands = [(-binary_mask(lv, lab).count(), lab)
                 for lab, (_n, cat) in lv.table.items() if cat == "LargeOrgan"]
    else:
        raise ParameterError(f"unknown pitfall target {target!r}")
    if not cands:
        raise ParameterError(f"no candidate structure for target {target!r}")
    return min(cands)[1]


def cmd_pitfall(cfg: BenchConfig, target: str = "smallest-small") -> Path:
    """Two-row experiment: reconstruct the scan with and without one structure.

    Both variants are reconstructed from identically seeded noisy projections
    and scored against the *intact* ground truth, so the table isolates what
    ablating one structure does to each metric.
    """
    spec = _scan_spec(cfg, 0)
    vol, lv = ph.make_phantom(spec)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    lab = None if target == "none" else _pick_target(lv, target)
    ablated = vol if lab is None else ph.ablate_structure(vol, lv, lab)

    geom = cfg.geometry.for_views(cfg.pitfall_views)
    noise = None
    if cfg.pitfall_noise_sigma > 0:
        rng = np.random.default_rng([cfg.seed, 9001, cfg.pitfall_views])
        noise = rng.standard_normal((geom.n_views,) + tuple(reversed(geom.det_size)))

    def recon_of(volume: Volume3) -> Volume3:
        stack = forward_project(volume, geom)
        if noise is not None:
            stack = stack.with_data(stack.data + cfg.pitfall_noise_sigma * noise)
        return fdk(stack, vol.grid, cfg.pitfall_apodization)

    rows = []
    target_name = lv.name_of(lab) if lab is not None else "(none)"
    for variant, volume in (("intact", vol), ("ablated", ablated)):
        recon = recon_of(volume)
        recs = evaluate_volume(recon, vol, lv, spec, cfg, "pitfall", variant, cfg.pitfall_views)
        by = {(r.structure, r.metric): r.value for r in recs}
        if lab is None:
            t_metric, t_value = "", ""
        else:
            t_metric = CATEGORY_METRIC[lv.category_of(lab)]
            t_value = _format_value(by[(target_name, t_metric)])
        rows.append([variant, _format_value(by[(PIXEL_STRUCTURE, "psnr")]),
                     _format_value(by[(PIXEL_STRUCTURE, "ssim")]),
                     target_name, t_metric, t_value])

    path = out / "pitfall.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "psnr_db", "ssim", "target_structure", "target_metric", "target_value"])
        w.writerows(rows)
    return path
