"""Evaluation statistics: image error, overlap, clinical metrics and paired tests.

All functions take numpy arrays or volumes and return plain floats or pydantic
result records, so they can be serialized straight into reports.
"""

import math
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import norm, rankdata

from .errors import DegenerateInputError, GeometryError, UndefinedMetricError
from .models import ClassRoster, QuantReport, RegressionResult, WilcoxonResult
from .volume import LabelVolume, Volume3D, check_geometry, check_roster

ArrayLike = Union[np.ndarray, Volume3D, LabelVolume]

# Effective sample sizes up to this use the exact null distribution
EXACT_WILCOXON_MAX_N = 15


def _values(x: ArrayLike) -> np.ndarray:
    if isinstance(x, (Volume3D, LabelVolume)):
        return x.data
    return np.asarray(x)


def _pair(a: ArrayLike, b: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(a, (Volume3D, LabelVolume)) and isinstance(b, (Volume3D, LabelVolume)):
        check_geometry(a, b)
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise GeometryError(f"shape mismatch {va.shape} vs {vb.shape}")
    return va, vb


# =============================================================================
# IMAGE AND OVERLAP METRICS
# =============================================================================


def nrmse(pred: ArrayLike, ref: ArrayLike, mask: Optional[ArrayLike] = None) -> float:
    """RMSE normalized by the range of the reference over the evaluated region.

    Raises:
        UndefinedMetricError: fewer than 2 voxels in the region or zero reference range
    """
    p, r = _pair(pred, ref)
    p = p.astype(np.float64)
    r = r.astype(np.float64)
    if mask is not None:
        m = _values(mask).astype(bool)
        if m.shape != r.shape:
            raise GeometryError(f"mask shape {m.shape} != {r.shape}")
        if m.sum() < 2:
            raise UndefinedMetricError("NRMSE needs at least 2 voxels in the mask", field="mask")
        p, r = p[m], r[m]
    value_range = float(r.max() - r.min())
    if value_range == 0.0:
        raise UndefinedMetricError("reference range is zero", field="ref")
    rmse = math.sqrt(float(np.mean((p - r) ** 2)))
    return rmse / value_range


def dice(pred_mask: ArrayLike, ref_mask: ArrayLike) -> float:
    """2|A and B| / (|A| + |B|); two empty masks score 1."""
    a, b = _pair(pred_mask, ref_mask)
    a = a.astype(bool)
    b = b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def class_nrmse(
    pred: Volume3D, ref: Volume3D, labels: LabelVolume, roster: ClassRoster
) -> dict[str, Optional[float]]:
    """Whole-image NRMSE under "all" plus one entry per class over its reference mask.

    Classes whose region is too small or flat are reported as None.
    """
    check_geometry(pred, ref)
    check_geometry(ref, labels)
    scores: dict[str, Optional[float]] = {}
    try:
        scores["all"] = nrmse(pred, ref)
    except UndefinedMetricError:
        scores["all"] = None
    for s, name in enumerate(roster.names):
        try:
            scores[name] = nrmse(pred, ref, labels.data == s)
        except UndefinedMetricError:
            scores[name] = None
    return scores


def class_dice(pred: LabelVolume, ref: LabelVolume, roster: ClassRoster) -> dict[str, float]:
    """Dice per foreground class (background excluded)."""
    check_geometry(pred, ref)
    return {
        name: dice(pred.data == s, ref.data == s)
        for s, name in enumerate(roster.names)
        if s > 0
    }


# =============================================================================
# CLINICAL METRICS
# =============================================================================


def clinical_metrics(suv: Volume3D, labels: LabelVolume, roster: ClassRoster) -> QuantReport:
    """MTV, TLG, lesion SUVmean and per-organ SUVmean from a label map.

    An empty lesion mask gives MTV = TLG = 0 and no lesion SUVmean.
    """
    check_geometry(suv, labels)
    check_roster(labels, roster)
    values = suv.data.astype(np.float64)

    lesion = labels.data == 1
    n_lesion = int(lesion.sum())
    mtv = n_lesion * suv.voxel_volume_ml
    lesion_mean = float(values[lesion].mean()) if n_lesion else None
    tlg = mtv * lesion_mean if lesion_mean is not None else 0.0

    suv_mean: dict[str, Optional[float]] = {}
    for s, name in enumerate(roster.names):
        if s < 2:
            continue
        region = labels.data == s
        suv_mean[name] = float(values[region].mean()) if region.any() else None

    return QuantReport(mtv_ml=mtv, tlg=tlg, lesion_suv_mean=lesion_mean, suv_mean=suv_mean)


def percent_bias(est: float, gt: float) -> float:
    """100 * (est - gt) / gt.

    Raises:
        UndefinedMetricError: gt == 0
    """
    if gt == 0:
        raise UndefinedMetricError("percent bias is undefined for a zero reference", field="gt")
    return 100.0 * (est - gt) / gt


def summarize_bias(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise UndefinedMetricError("no values to summarize", field="values")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def format_bias(mean: float, std: float) -> str:
    """Render a bias summary as e.g. '-26.98 ± 56.76%'."""
    return f"{mean:.2f} ± {std:.2f}%"


# =============================================================================
# STATISTICS
# =============================================================================


def ols_regression(x: Sequence[float], y: Sequence[float]) -> RegressionResult:
    """Least-squares line y = slope * x + intercept with R^2.

    A constant y has SS_tot = 0; R^2 is then reported as 0 and flagged degenerate.

    Raises:
        DegenerateInputError: fewer than 2 points, unequal lengths or constant x
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise DegenerateInputError("x and y must be 1-D sequences of equal length")
    n = xa.size
    if n < 2:
        raise DegenerateInputError("regression needs at least 2 points", field="n")
    dx = xa - xa.mean()
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        raise DegenerateInputError("x is constant", field="x")
    dy = ya - ya.mean()
    slope = float(np.dot(dx, dy)) / sxx
    intercept = float(ya.mean() - slope * xa.mean())

    ss_tot = float(np.dot(dy, dy))
    if ss_tot == 0.0:
        return RegressionResult(slope=slope, intercept=intercept, r_squared=0.0, n=n, degenerate=True)
    residual = ya - (slope * xa + intercept)
    r_squared = 1.0 - float(np.dot(residual, residual)) / ss_tot
    return RegressionResult(
        slope=slope,
        intercept=intercept,
        r_squared=min(1.0, max(0.0, r_squared)),
        n=n,
    )


def _exact_signed_rank_counts(doubled_ranks: np.ndarray) -> list[int]:
    """Number of sign assignments reaching each doubled positive-rank sum.

    Counting by convolution enumerates all 2^n assignments without listing them.
    """
    counts = [1]
    for r in doubled_ranks.astype(int):
        grown = [0] * (len(counts) + r)
        for total, c in enumerate(counts):
            if c:
                grown[total] += c
                grown[total + r] += c
        counts = grown
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test of paired samples.

    Zero differences are dropped, ties get mid-ranks. The statistic is the sum
    of positive ranks. Exact null distribution up to EXACT_WILCOXON_MAX_N
    effective pairs, normal approximation with continuity correction beyond.
    """
    xa = np.asarray(a, dtype=np.float64)
    xb = np.asarray(b, dtype=np.float64)
    if xa.shape != xb.shape or xa.ndim != 1 or xa.size < 1:
        raise DegenerateInputError("paired samples must be equal-length and non-empty")

    diff = xa - xb
    diff = diff[diff != 0.0]
    n = int(diff.size)
    if n == 0:
        return WilcoxonResult(
            statistic=0.0, p_two_sided=1.0, n_effective=0, method="degenerate", degenerate=True
        )

    ranks = rankdata(np.abs(diff))  # mid-ranks
    w_plus = float(ranks[diff > 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        counts = _exact_signed_rank_counts(doubled)
        observed = int(round(2 * w_plus))
        lower = sum(counts[: observed + 1])
        upper = sum(counts[observed:])
        p = min(1.0, 2 * min(lower, upper) / 2**n)
        return WilcoxonResult(statistic=w_plus, p_two_sided=p, n_effective=n, method="exact")

    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(variance)
    p = float(min(1.0, 2.0 * norm.sf(z)))
    p = max(p, np.finfo(np.float64).tiny)
    return WilcoxonResult(statistic=w_plus, p_two_sided=p, n_effective=n, method="normal")
