"""Depth accuracy up to a global scale and shift along the depth axis.

The estimate is modelled as ``est = scale * gt + shift``; RANSAC over
2-pixel samples finds the pair, and errors are measured on the normalised
estimate ``(est - shift) / scale`` in ground-truth units, reported as a
percentage of the ground-truth depth range.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from facegeom import kernels
from facegeom.errors import DegenerateSample, DimensionMismatch, TooFewPixels
from facegeom.maps import depth_to_normals
from facegeom.rigid import RansacConfig

MAX_REFITS = 20
TABLE_COLUMNS = (("Mean", "mean_err"), ("Std", "std_err"), ("Median", "median_err"),
                 ("90%", "p90_err"))


@dataclass(frozen=True)
class EvalConfig:
    iterations: int = 1000
    # inlier threshold as a fraction of the gt depth range, unless
    # ``threshold`` (gt depth units) is given
    threshold_fraction: float = 0.03
    threshold: float = None
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.threshold_fraction > 0:
            raise ValueError("threshold_fraction must be > 0")
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError("threshold must be > 0")

    @classmethod
    def from_ransac(cls, cfg: RansacConfig, threshold=None):
        return cls(iterations=cfg.iterations, threshold=threshold, seed=cfg.seed)


@dataclass(frozen=True)
class DepthEvalReport:
    """Error statistics in percent of the gt depth range.

    ``p90_err`` is the mean of the largest 10% of errors; ``percentile90``
    is the plain 90th percentile.
    """

    mean_err: float
    std_err: float
    median_err: float
    p90_err: float
    percentile90: float
    inlier_fraction: float
    ransac_scale: float
    ransac_shift: float
    pixel_count: int

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _valid_pixels(est, gt, mask):
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise DimensionMismatch(f"estimate {est.shape} and ground truth {gt.shape} differ")
    valid = np.isfinite(est) & np.isfinite(gt)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise DimensionMismatch(f"mask {mask.shape} and depth {gt.shape} differ")
        valid &= mask
    return est[valid], gt[valid], valid


def _line_models(est, gt, samples):
    """(scale, shift) through each 2-pixel sample, plus a validity flag."""
    e0, e1 = est[samples[:, 0]], est[samples[:, 1]]
    g0, g1 = gt[samples[:, 0]], gt[samples[:, 1]]
    dg = g1 - g0
    ok = (dg != 0) & (e1 != e0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(ok, (e1 - e0) / np.where(ok, dg, 1.0), 1.0)
    shift = e0 - scale * g0
    ok &= (scale > 0) & np.isfinite(scale) & np.isfinite(shift)
    return np.stack([np.where(ok, scale, 1.0), np.where(ok, shift, 0.0)], axis=1), ok


def _fit_line(est, gt):
    design = np.stack([gt, np.ones_like(gt)], axis=1)
    (scale, shift), *_ = np.linalg.lstsq(design, est, rcond=None)
    return float(scale), float(shift)


def normalize_depth_ransac(est, gt, mask=None, cfg: EvalConfig = None):
    """Robust ``(scale, shift)`` with ``est ~ scale * gt + shift``.

    Returns ``(scale, shift, inliers)`` with ``inliers`` a boolean raster.
    Inliers satisfy ``|(est - shift) / scale - gt| <= threshold``.
    """
    cfg = cfg or EvalConfig()
    e, g, valid = _valid_pixels(est, gt, mask)
    n = len(g)
    if n < 2:
        raise TooFewPixels(f"{n} valid pixel(s); depth normalisation needs at least 2")
    span = float(g.max() - g.min())
    threshold = cfg.threshold if cfg.threshold is not None else cfg.threshold_fraction * span
    if not threshold > 0:
        raise DegenerateSample("ground-truth depth is constant on the mask")

    rng = np.random.Generator(np.random.Philox(cfg.seed))
    samples = np.stack([rng.choice(n, 2, replace=False) for _ in range(cfg.iterations)])
    models, ok = _line_models(e, g, samples)
    if not ok.any():
        raise DegenerateSample("every RANSAC sample had equal depths")
    counts, sse = kernels.line_consensus(e, g, models, threshold)
    counts = np.where(ok, counts, -1)
    sse = np.where(ok, sse, np.inf)
    best = int(np.lexsort((np.arange(len(counts)), sse, -counts))[0])
    scale, shift = (float(x) for x in models[best])

    def select(a, b):
        return np.abs((e - b) / a - g) <= threshold

    def sse(a, b, keep):
        return float((((e[keep] - b) / a - g[keep]) ** 2).sum())

    # refit on the consensus set while that lowers its squared error
    inl = select(scale, shift)
    for _ in range(MAX_REFITS):
        if inl.sum() < 2:
            break
        a, b = _fit_line(e[inl], g[inl])
        if not (a > 0 and np.isfinite(b)) or sse(a, b, inl) >= sse(scale, shift, inl):
            break
        scale, shift = a, b
        new = select(scale, shift)
        if np.array_equal(new, inl):
            break
        inl = new

    raster = np.zeros(valid.shape, dtype=bool)
    raster[valid] = inl
    return scale, shift, raster


def worst_decile_mean(errors):
    """Mean of the largest ``ceil(n / 10)`` values."""
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    k = max(1, math.ceil(len(errors) / 10))
    return float(errors[len(errors) - k:].mean())


def error_statistics(est, gt, mask=None, scale=1.0, shift=0.0, inliers=None) -> DepthEvalReport:
    """Statistics of ``|(est - shift) / scale - gt|`` over the mask, in percent
    of the gt depth range. ``inliers`` (raster) only feeds ``inlier_fraction``."""
    if not scale > 0:
        raise ValueError("scale must be > 0")
    e, g, valid = _valid_pixels(est, gt, mask)
    if len(g) == 0:
        raise TooFewPixels("no valid pixels to evaluate")
    span = float(g.max() - g.min())
    err = np.abs((e - shift) / scale - g)
    err = 100.0 * err / span if span > 0 else np.where(err == 0, 0.0, np.inf)
    frac = 1.0 if inliers is None else float(np.asarray(inliers, bool)[valid].mean())
    return DepthEvalReport(
        mean_err=float(err.mean()),
        std_err=float(err.std()),
        median_err=float(np.median(err)),
        p90_err=worst_decile_mean(err),
        percentile90=float(np.percentile(err, 90)),
        inlier_fraction=frac,
        ransac_scale=float(scale),
        ransac_shift=float(shift),
        pixel_count=int(len(err)),
    )


def evaluate_depth(est, gt, mask=None, cfg: EvalConfig = None) -> DepthEvalReport:
    scale, shift, inliers = normalize_depth_ransac(est, gt, mask, cfg)
    return error_statistics(est, gt, mask, scale, shift, inliers)


def normal_discrepancy(est, gt, mask=None, spacing=1.0) -> float:
    """Mean L1 distance between unit normals of two depth rasters."""
    e, g, valid = _valid_pixels(est, gt, mask)
    if len(g) == 0:
        raise TooFewPixels("no valid pixels to compare")
    ne = depth_to_normals(est, valid, spacing)
    ng = depth_to_normals(gt, valid, spacing)
    return float(np.abs(ne[valid] - ng[valid]).sum(axis=1).mean())


def aggregate_reports(reports, labels=None):
    """Per-label means of the per-sample statistics plus an ``all`` row.

    ``reports`` maps sample name to :class:`DepthEvalReport`; ``labels`` maps
    sample name to its group. Returns an ordered ``{group: row}`` dict.
    """
    keys = [k for _, k in TABLE_COLUMNS] + ["percentile90"]
    groups = {}
    if labels:
        for name in sorted(reports):
            groups.setdefault(str(labels.get(name, "unlabelled")), []).append(name)
    out = {}
    for group in sorted(groups):
        out[group] = _mean_row([reports[n] for n in groups[group]], keys)
    out["all"] = _mean_row([reports[n] for n in sorted(reports)], keys)
    return out


def _mean_row(items, keys):
    row = {k: float(np.mean([getattr(r, k) for r in items])) for k in keys}
    row["count"] = len(items)
    return row


def format_table(rows) -> str:
    """Aligned plain-text table (Mean, Std, Median, 90%) from ``{name: row}``
    where each row is a report or a mapping with the report's field names."""
    rows = {k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in rows.items()}
    name_w = max([len("Sample")] + [len(k) for k in rows])
    head = "Sample".ljust(name_w) + "".join(f"{h:>10}" for h, _ in TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for name, row in rows.items():
        lines.append(name.ljust(name_w) + "".join(f"{row[k]:>10.2f}" for _, k in TABLE_COLUMNS))
    return "\n".join(lines) + "\n"
