"""Accuracy metrics, evaluation masks, residual tables and stratified reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import Raster, require_aligned

OUTLIER_CAP = 50.0


class EmptyStratumError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    n: int
    mbe: float
    mae: float
    rmse: float
    maer: float
    r2: float
    fit_slope: float
    fit_intercept: float
    mean_vh: float


def metrics_from_arrays(pred: np.ndarray, ref: np.ndarray) -> MetricReport:
    p = np.asarray(pred, dtype=np.float64).ravel()
    r = np.asarray(ref, dtype=np.float64).ravel()
    n = p.size
    if n == 0:
        raise EmptyStratumError("empty stratum")
    e = p - r
    mean_vh = float(p.mean())
    mae = float(np.abs(e).mean())
    pc, rc = p - p.mean(), r - r.mean()
    spp, srr, spr = float(pc @ pc), float(rc @ rc), float(pc @ rc)
    slope = spr / spp if spp > 0 else math.nan
    intercept = float(r.mean() - slope * p.mean()) if spp > 0 else math.nan
    r2 = spr * spr / (spp * srr) if spp > 0 and srr > 0 else math.nan
    return MetricReport(n=n, mbe=float(e.mean()), mae=mae, rmse=float(np.sqrt((e * e).mean())),
                        maer=mae / mean_vh if mean_vh > 0 else math.nan, r2=r2,
                        fit_slope=slope, fit_intercept=intercept, mean_vh=mean_vh)


def _selected(pred: Raster, ref: Raster, mask: Raster) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    require_aligned(pred, ref, mask)
    sel = mask.valid() & (mask.data[0] != 0) & pred.valid() & ref.valid()
    return sel, pred.data[0], ref.data[0]


def compute_metrics(pred: Raster, ref: Raster, mask: Raster) -> MetricReport:
    """Metrics over pixels where ``mask`` is nonzero and both rasters are valid."""
    sel, p, r = _selected(pred, ref, mask)
    return metrics_from_arrays(p[sel], r[sel])


def build_eval_mask(ref: Raster, forest: Raster, outlier_cap: float = OUTLIER_CAP) -> Raster:
    require_aligned(ref, forest)
    r = ref.data[0]
    m = forest.valid() & (forest.data[0] != 0) & ref.valid() & (r <= outlier_cap)
    return Raster(m.astype(np.float32), ref.grid, ref.nodata)


@dataclass(frozen=True)
class ResidualBin:
    lower: float
    upper: float
    count: int
    mean_residual: float | None
    mean_abs_residual: float | None


def residual_bins(pred: Raster, ref: Raster, mask: Raster, bin_width: float = 5.0) -> list[ResidualBin]:
    """Residuals (pred - ref) grouped by reference height in ``[k*w, (k+1)*w)`` bins from 0."""
    sel, p, r = _selected(pred, ref, mask)
    p, r = p[sel].astype(np.float64), r[sel].astype(np.float64)
    if r.size == 0:
        return []
    idx = np.floor(r / bin_width).astype(np.int64)
    top = max(int(idx.max()), 0)
    out = []
    for k in range(top + 1):
        inb = idx == k
        c = int(inb.sum())
        e = p[inb] - r[inb]
        out.append(ResidualBin(k * bin_width, (k + 1) * bin_width, c,
                               float(e.mean()) if c else None, float(np.abs(e).mean()) if c else None))
    return out


@dataclass
class DensityScatter:
    cell: float
    counts: dict[tuple[int, int], int]   # (ref cell, pred cell) -> count
    fit_slope: float
    fit_intercept: float


def density_scatter_export(pred: Raster, ref: Raster, mask: Raster, cell: float = 1.0) -> DensityScatter:
    sel, p, r = _selected(pred, ref, mask)
    p, r = p[sel].astype(np.float64), r[sel].astype(np.float64)
    rk = np.floor(r / cell).astype(np.int64)
    pk = np.floor(p / cell).astype(np.int64)
    keys, counts = np.unique(np.stack([rk, pk], axis=1), axis=0, return_counts=True) if p.size else ([], [])
    rep = metrics_from_arrays(p, r) if p.size else None
    return DensityScatter(cell, {(int(a), int(b)): int(c) for (a, b), c in zip(keys, counts)},
                          rep.fit_slope if rep else math.nan, rep.fit_intercept if rep else math.nan)


def _g6(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{v:.6g}"


def write_density_scatter(sc: DensityScatter, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# fit ref = slope * pred + intercept\n# slope={_g6(sc.fit_slope)}\n"
                 f"# intercept={_g6(sc.fit_intercept)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ref_lower", "pred_lower", "count"])
        for (a, b), c in sorted(sc.counts.items()):
            w.writerow([_g6(a * sc.cell), _g6(b * sc.cell), c])


def write_residual_bins(rows: list[ResidualBin], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lower", "bin_upper", "count", "mean_residual", "mean_abs_residual"])
        for b in rows:
            w.writerow([_g6(b.lower), _g6(b.upper), b.count, _g6(b.mean_residual), _g6(b.mean_abs_residual)])


@dataclass(frozen=True)
class StratumDef:
    family: str
    name: str
    source: str          # elevation | slope | aspect | mix_rate | tree_cover_density
    lower: float
    upper: float
    upper_inclusive: bool = False
    min_slope: float | None = None   # guard: only pixels with slope >= this value

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"stratum {self.name}: lower {self.lower} must be below upper {self.upper}")

    def select(self, values: np.ndarray) -> np.ndarray:
        hi = values <= self.upper if self.upper_inclusive else values < self.upper
        return (values >= self.lower) & hi


def _edges(family, source, edges, last_inclusive=False, names=None, min_slope=None):
    out = []
    for i, (a, b) in enumerate(zip(edges, edges[1:])):
        incl = last_inclusive and i == len(edges) - 2
        label = names[i] if names else (f"{a:g}-{b:g}" if math.isfinite(b) else f">={a:g}")
        out.append(StratumDef(family, label, source, a, b, incl, min_slope))
    return out


def default_strata() -> list[StratumDef]:
    return (_edges("elevation", "elevation", [240, 600, 900, 1200, 2500], last_inclusive=True,
                   names=["240-599", "600-899", "900-1199", "1200-2500"])
            + _edges("slope", "slope", [0, 10, 20, 30, 40, 50, math.inf])
            + _edges("aspect", "aspect", [0, 45, 90, 135, 180, 215, 270, 315, 360], last_inclusive=True,
                     min_slope=30.0)
            + _edges("mix", "mix_rate", [0, 25, 75, 100], last_inclusive=True)
            + _edges("density", "tree_cover_density", [0, 80, 100], last_inclusive=True))


def check_disjoint(defs: list[StratumDef]) -> None:
    """Reject families whose intervals overlap."""
    fams: dict[str, list[StratumDef]] = {}
    for d in defs:
        fams.setdefault(d.family, []).append(d)
    for fam, ds in fams.items():
        if len({(d.source, d.min_slope) for d in ds}) > 1:
            raise ValueError(f"family {fam} mixes sources or guards")
        ds = sorted(ds, key=lambda d: d.lower)
        for a, b in zip(ds, ds[1:]):
            if b.lower < a.upper or (b.lower == a.upper and a.upper_inclusive):
                raise ValueError(f"family {fam}: strata {a.name} and {b.name} overlap")


@dataclass(frozen=True)
class StratumRow:
    family: str
    stratum: str
    report: MetricReport | None   # None for an empty stratum


def stratified_metrics(pred: Raster, ref: Raster, mask: Raster, strata: dict[str, Raster],
                       defs: list[StratumDef] | None = None) -> list[StratumRow]:
    """One row per stratum plus a ``total`` row per family over the pixels that fall in any stratum."""
    defs = default_strata() if defs is None else defs
    check_disjoint(defs)
    sel, p, r = _selected(pred, ref, mask)
    rows = []
    families = list(dict.fromkeys(d.family for d in defs))
    for fam in families:
        fdefs = [d for d in defs if d.family == fam]
        src = strata.get(fdefs[0].source)
        if src is None:
            continue
        require_aligned(pred, src)
        vals = src.data[0]
        base = sel & src.valid()
        if fdefs[0].min_slope is not None:
            slope = strata["slope"]
            require_aligned(pred, slope)
            base &= slope.valid() & (slope.data[0] >= fdefs[0].min_slope)
        covered = np.zeros_like(base)
        for d in fdefs:
            m = base & d.select(vals)
            covered |= m
            rows.append(StratumRow(fam, d.name, metrics_from_arrays(p[m], r[m]) if m.any() else None))
        rows.append(StratumRow(fam, "total", metrics_from_arrays(p[covered], r[covered]) if covered.any() else None))
    return rows


REPORT_HEADER = ("family", "stratum", "n", "r2", "mean_vh", "mbe", "mae", "rmse", "maer")


def write_report(rows: list[StratumRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for row in rows:
            rep = row.report
            if rep is None:
                w.writerow([row.family, row.stratum, 0] + [""] * 6)
            else:
                w.writerow([row.family, row.stratum, rep.n] + [_g6(getattr(rep, k)) for k in REPORT_HEADER[3:]])


def write_metrics(rep: MetricReport, path) -> None:
    write_report([StratumRow("overall", "all", rep)], Path(path))
