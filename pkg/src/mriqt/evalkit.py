"""Volumetric image-quality metrics, paired significance tests and cohort reports.

All metrics are computed on whole 3D volumes (no slice averaging). When a
foreground mask is supplied the voxel-wise metrics use only masked voxels.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, stats

from .errors import ShapeMismatch, SubjectMismatch, TooFewSamples, VolumeTooSmall, ZeroVariance
from .volume import VolumeGrid, load_volume

PSNR_CAP = 100.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
METRICS = ("psnr", "ssim", "ms_ssim", "lpips3d", "mae", "rmse", "pearson")
HIGHER_IS_BETTER = {"psnr": True, "ssim": True, "ms_ssim": True, "lpips3d": False, "mae": False,
                    "rmse": False, "pearson": True}
REPORT_VERSION = 1


def _pair(a, b, mask=None) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a.data if isinstance(a, VolumeGrid) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, VolumeGrid) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        return a[mask], b[mask]
    return a.ravel(), b.ravel()


def mae(a, b, mask=None) -> float:
    a, b = _pair(a, b, mask)
    return float(np.mean(np.abs(a - b)))


def rmse(a, b, mask=None) -> float:
    a, b = _pair(a, b, mask)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b, data_range: Optional[float] = None, mask=None) -> float:
    """PSNR of ``a`` against reference ``b``; ``data_range`` defaults to the range of ``b``.

    Identical inputs give the cap of 100 dB instead of infinity.
    """
    a_, b_ = _pair(a, b, mask)
    if data_range is None:
        data_range = float(b_.max() - b_.min())
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((a_ - b_) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse)))


def pearson(a, b, mask=None) -> float:
    a, b = _pair(a, b, mask)
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt(np.sum(da * da))
    nb = np.sqrt(np.sum(db * db))
    if na == 0 or nb == 0:
        raise ZeroVariance("pearson correlation is undefined for a constant input")
    return float(np.clip(np.sum(da * db) / (na * nb), -1.0, 1.0))


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation with ``g`` keeping only positions where the window fits."""
    n = len(g)
    for axis in range(x.ndim):
        x = ndimage.correlate1d(x, g, axis=axis, mode="constant")
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(n // 2, x.shape[axis] - (n - 1 - n // 2))
        x = x[tuple(sl)]
    return x


def _ssim_terms(a: np.ndarray, b: np.ndarray, data_range: float, window: int, sigma: float):
    if min(a.shape) < window:
        raise VolumeTooSmall(f"volume {a.shape} smaller than the {window}-voxel window")
    g = gaussian_window(window, sigma)
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def _arrays(a, b):
    a = np.asarray(a.data if isinstance(a, VolumeGrid) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, VolumeGrid) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def ssim3d(a, b, window: int = 7, data_range: Optional[float] = None, sigma: float = 1.5) -> float:
    """Mean 3D SSIM with a Gaussian window over the valid (fully covered) region."""
    a, b = _arrays(a, b)
    if data_range is None:
        data_range = float(b.max() - b.min()) or 1.0
    lum, cs = _ssim_terms(a, b, data_range, window, sigma)
    return float(np.mean(lum * cs))


def _downsample2(x: np.ndarray) -> np.ndarray:
    h, w, d = (s // 2 * 2 for s in x.shape)
    x = x[:h, :w, :d]
    return x.reshape(h // 2, 2, w // 2, 2, d // 2, 2).mean(axis=(1, 3, 5))


def max_scales(shape: Sequence[int], window: int = 7, limit: int = 3) -> int:
    s = 1
    while s < limit and min(shape) >= window * 2 ** s:
        s += 1
    return s


def ms_ssim3d(a, b, scales: int = 3, window: int = 7, data_range: Optional[float] = None,
              sigma: float = 1.5) -> float:
    """Multi-scale SSIM; the standard weights are truncated to ``scales`` and renormalized.

    Negative per-scale terms are clamped to 0 before exponentiation.
    """
    a, b = _arrays(a, b)
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ValueError(f"scales must be in 1..{len(MS_SSIM_WEIGHTS)}")
    if min(a.shape) < window * 2 ** (scales - 1):
        raise VolumeTooSmall(f"volume {a.shape} too small for {scales} scales with window {window}")
    if data_range is None:
        data_range = float(b.max() - b.min()) or 1.0
    weights = np.array(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    result = 1.0
    for j in range(scales):
        lum, cs = _ssim_terms(a, b, data_range, window, sigma)
        term = np.mean(lum * cs) if j == scales - 1 else np.mean(cs)
        result *= max(float(term), 0.0) ** weights[j]
        if j < scales - 1:
            a, b = _downsample2(a), _downsample2(b)
    return float(result)


def paired_t_test(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """Two-sided paired t-test; returns (t statistic, p-value)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch("paired samples must have equal length")
    n = len(x)
    if n < 3:
        raise TooFewSamples(f"paired t-test needs at least 3 pairs, got {n}")
    d = x - y
    sd = d.std(ddof=1)
    if sd == 0 or sd <= 1e-12 * max(1.0, float(np.abs(d).max())):
        raise ZeroVariance("differences have zero variance (no detectable difference)")
    t = float(d.mean() / (sd / math.sqrt(n)))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return t, p


@dataclasses.dataclass
class MetricReport:
    per_subject: List[Dict[str, float]]
    aggregate: Dict[str, Tuple[float, float]]
    significance: Dict[str, float] = dataclasses.field(default_factory=dict)
    reference_method: str = ""
    method: str = ""

    def column(self, metric: str) -> List[float]:
        return [row[metric] for row in self.per_subject]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"# report_version={REPORT_VERSION}", f"method={self.method}"])
            w.writerow(["subject_id", "data_range", *METRICS])
            for row in self.per_subject:
                w.writerow([row["subject_id"], f"{row['data_range']:.8g}", *[f"{row[m]:.8g}" for m in METRICS]])
            w.writerow(["mean", "", *[f"{self.aggregate[m][0]:.8g}" for m in METRICS]])
            w.writerow(["std", "", *[f"{self.aggregate[m][1]:.8g}" for m in METRICS]])
            if self.significance:
                w.writerow([f"p_vs_{self.reference_method}", "",
                            *[f"{self.significance.get(m, float('nan')):.6g}" for m in METRICS]])
        return path


def compute_metrics(gen: np.ndarray, ref: np.ndarray, fe=None, mask=None, ms_scales: Optional[int] = None) -> dict:
    from .perceptual import perceptual_distance

    gen = np.asarray(gen, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    lo, hi = float(ref.min()), float(ref.max())
    rng_ = hi - lo
    scales = ms_scales or max_scales(ref.shape)
    row = {
        "data_range": rng_,
        "psnr": psnr(gen, ref, rng_, mask),
        "ssim": ssim3d(gen, ref, data_range=rng_),
        "ms_ssim": ms_ssim3d(gen, ref, scales=scales, data_range=rng_),
        "mae": mae(gen, ref, mask),
        "rmse": rmse(gen, ref, mask),
        "pearson": pearson(gen, ref, mask),
        "lpips3d": float("nan"),
    }
    if fe is not None:
        # both volumes mapped with the reference's affine so the extractor sees comparable inputs
        to_unit = lambda x: (2.0 * (x - lo) / rng_ - 1.0).astype(np.float32)
        row["lpips3d"] = perceptual_distance(fe, to_unit(gen), to_unit(ref))
    return row


def build_report(rows: List[dict], method: str = "", baseline: Optional[MetricReport] = None) -> MetricReport:
    rows = sorted(rows, key=lambda r: r["subject_id"])
    agg = {}
    for m in METRICS:
        vals = np.array([r[m] for r in rows], dtype=np.float64)
        agg[m] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    report = MetricReport(per_subject=rows, aggregate=agg, method=method)
    if baseline is not None:
        report.reference_method = baseline.method or "baseline"
        base = {r["subject_id"]: r for r in baseline.per_subject}
        if set(base) != {r["subject_id"] for r in rows}:
            raise SubjectMismatch("baseline report covers different subjects")
        for m in METRICS:
            try:
                _, p = paired_t_test([r[m] for r in rows], [base[r["subject_id"]][m] for r in rows])
            except (ZeroVariance, TooFewSamples):
                p = float("nan")
            report.significance[m] = p
    return report


def evaluate_volumes(pairs: Sequence[Tuple[str, np.ndarray, np.ndarray]], fe=None, method: str = "",
                     baseline: Optional[MetricReport] = None) -> MetricReport:
    """``pairs`` holds (subject_id, generated, reference) triples."""
    if not pairs:
        raise SubjectMismatch("empty cohort")
    rows = [{"subject_id": sid, **compute_metrics(g, r, fe)} for sid, g, r in pairs]
    return build_report(rows, method, baseline)


def evaluate_cohort(generated: Sequence, references: Sequence, fe=None, method: str = "",
                    baseline: Optional[MetricReport] = None) -> MetricReport:
    """Load both path lists, match them by subject id and build the report."""
    gen = {v.subject_id: v for v in map(load_volume, generated)}
    ref = {v.subject_id: v for v in map(load_volume, references)}
    if not gen or set(gen) != set(ref):
        raise SubjectMismatch(f"generated subjects {sorted(gen)} do not match references {sorted(ref)}")
    return evaluate_volumes([(sid, gen[sid].data, ref[sid].data) for sid in sorted(gen)], fe, method, baseline)


def format_table(reports: Sequence[MetricReport], alpha: float = 0.01) -> str:
    """Text table in the layout of a results table: mean +- std, '*' marks p < alpha."""
    arrows = {m: "↑" if HIGHER_IS_BETTER[m] else "↓" for m in METRICS}
    header = ["Method"] + [f"{m.upper()}{arrows[m]}" for m in METRICS]
    lines = []
    for rep in reports:
        cells = [rep.method or "?"]
        for m in METRICS:
            mean, std = rep.aggregate[m]
            star = " *" if rep.significance.get(m, 1.0) < alpha else ""
            cells.append(f"{mean:.3f} ± {std:.3f}{star}")
        lines.append(cells)
    widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths))
    out = [fmt(header), "-" * (sum(widths) + 2 * (len(widths) - 1))]
    out += [fmt(r) for r in lines]
    return "\n".join(out)
