"""Evaluation measures for saliency maps against human fixations.

Two ROC constructions (one against the blurred fixation density, one
against fixation points with uniformly sampled random negatives), plus
Pearson correlation and a regularized KL divergence. All randomness is
seeded through MetricConfig.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .imaging import PROBABILITY, Map2D

EPSILON_DEFAULT = 2.220446e-16


@dataclass(frozen=True)
class FixationGroundTruth:
    """Observer fixations for one image: a binary point map and the
    blurred fixation density in probability state."""

    points: np.ndarray
    density: Map2D

    def __post_init__(self) -> None:
        pts = np.asarray(self.points)
        if pts.ndim != 2:
            raise DataError("fixation points must form a 2D map")
        uniq = np.unique(pts)
        if not np.all(np.isin(uniq, (0, 1))):
            raise DataError("fixation point map must be binary")
        pts = pts.astype(bool)
        if not pts.any():
            raise DataError("fixation point map has no positives")
        if self.density.state != PROBABILITY:
            raise DataError("fixation density must be probability state")
        if pts.shape != self.density.data.shape:
            raise DataError("fixation points and density dimensions differ")
        object.__setattr__(self, "points", pts)

    @property
    def fixation_count(self) -> int:
        return int(self.points.sum())


@dataclass(frozen=True)
class RocCurve:
    """Threshold-sweep curve: fpr non-decreasing from 0 to 1, tpr likewise."""

    fpr: np.ndarray
    tpr: np.ndarray

    def __post_init__(self) -> None:
        fpr = np.ascontiguousarray(self.fpr, dtype=np.float64)
        tpr = np.ascontiguousarray(self.tpr, dtype=np.float64)
        if fpr.ndim != 1 or fpr.shape != tpr.shape or fpr.size < 2:
            raise DataError("roc curve needs matched fpr/tpr vectors")
        if not (np.all(np.isfinite(fpr)) and np.all(np.isfinite(tpr))):
            raise DataError("roc curve values must be finite")
        for name, v in (("fpr", fpr), ("tpr", tpr)):
            if v.min() < 0.0 or v.max() > 1.0:
                raise DataError(f"{name} values must lie in [0, 1]")
            if np.any(np.diff(v) < 0):
                raise DataError(f"{name} must be non-decreasing")
        if fpr[0] != 0.0 or tpr[0] != 0.0 or fpr[-1] != 1.0 or tpr[-1] != 1.0:
            raise DataError("roc curve must run from (0,0) to (1,1)")
        object.__setattr__(self, "fpr", fpr)
        object.__setattr__(self, "tpr", tpr)


@dataclass(frozen=True)
class MetricConfig:
    """Shared metric settings; borji_sample_size defaults to the number of
    fixation points of the image under evaluation."""

    epsilon: float = EPSILON_DEFAULT
    borji_splits: int = 100
    borji_sample_size: int | None = None
    rng_seed: int = 42

    def __post_init__(self) -> None:
        if self.epsilon <= 0.0:
            raise DataError("epsilon must be positive")
        if self.borji_splits < 1:
            raise DataError("borji_splits must be >= 1")
        if self.borji_sample_size is not None and self.borji_sample_size < 1:
            raise DataError("borji_sample_size must be >= 1")


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve over fpr."""
    df = np.diff(curve.fpr)
    mid = (curve.tpr[1:] + curve.tpr[:-1]) / 2.0
    return float(np.sum(df * mid))


def roc_dist(sal: Map2D, gt: FixationGroundTruth) -> RocCurve:
    """ROC against the fixation density.

    Sweeping thresholds down the distinct saliency values, the true
    positive rate is the density mass on pixels at or above threshold and
    the false positive rate is the fraction of pixels at or above it.
    """
    if sal.data.shape != gt.density.data.shape:
        raise DataError("saliency and density dimensions differ")
    s = sal.data.ravel()
    f = gt.density.data.ravel()
    order = np.argsort(s, kind="stable")[::-1]
    s_sorted = s[order]
    f_cum = np.cumsum(f[order])
    n = s.size
    # Last index of each run of equal saliency values marks one threshold.
    ends = np.nonzero(np.diff(s_sorted) != 0)[0]
    ends = np.concatenate([ends, [n - 1]])
    total = f_cum[-1]
    if total <= 0.0:
        raise DataError("fixation density carries no mass")
    tpr = np.concatenate([[0.0], f_cum[ends] / total])
    fpr = np.concatenate([[0.0], (ends + 1) / n])
    return RocCurve(fpr, tpr)


def _lattice_envelope(pos: np.ndarray, neg: np.ndarray):
    """Sweep statistics of one positive/negative split.

    Returns, for every false-positive count j = 0..len(neg), the lowest
    and highest true positive rate the swept curve attains at fpr = j/N;
    lattice values the sweep skips over are filled by linear interpolation
    so trapezoidal area is preserved exactly.
    """
    n_pos = pos.size
    n_neg = neg.size
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    pos_cnt = n_pos - np.searchsorted(pos_sorted, thr, side="left")
    neg_cnt = n_neg - np.searchsorted(neg_sorted, thr, side="left")
    # Point list including the pre-sweep origin.
    fpr_pts = np.concatenate([[0], neg_cnt])
    tpr_pts = np.concatenate([[0], pos_cnt]) / n_pos

    lattice = np.arange(n_neg + 1)
    left = np.searchsorted(fpr_pts, lattice, side="left")
    right = np.searchsorted(fpr_pts, lattice, side="right")
    lo = np.empty(n_neg + 1)
    hi = np.empty(n_neg + 1)
    hit = left < right
    lo[hit] = tpr_pts[left[hit]]
    hi[hit] = tpr_pts[right[hit] - 1]
    gap = ~hit
    if gap.any():
        i = left[gap]
        x0 = fpr_pts[i - 1]
        x1 = fpr_pts[i]
        y0 = tpr_pts[i - 1]
        y1 = tpr_pts[i]
        t = (lattice[gap] - x0) / (x1 - x0)
        filled = y0 + t * (y1 - y0)
        lo[gap] = filled
        hi[gap] = filled
    return lo, hi


def rank_roc(pos: np.ndarray, neg: np.ndarray) -> RocCurve:
    """ROC of positive sample values against negative sample values,
    sweeping every distinct value of either set. The trapezoidal area of
    this curve equals P(pos > neg) + 0.5 P(pos = neg) over all pairs."""
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise DataError("rank_roc needs non-empty positive and negative sets")
    lo, hi = _lattice_envelope(pos, neg)
    n_neg = neg.size
    fpr = np.repeat(np.arange(n_neg + 1) / n_neg, 2)
    tpr = np.stack([lo, hi], axis=1).ravel()
    return RocCurve(fpr, tpr)


def roc_borji(
    sal: Map2D, gt: FixationGroundTruth, cfg: MetricConfig | None = None
) -> RocCurve:
    """ROC against fixation points with uniform random negatives.

    Positives are the saliency values at fixation points. Each of
    ``borji_splits`` seeded splits draws ``borji_sample_size`` negative
    pixels uniformly with replacement; the returned curve is the pointwise
    mean of the per-split curves on the shared fpr lattice, so its area
    equals the mean of the per-split areas.
    """
    cfg = cfg or MetricConfig()
    if sal.data.shape != gt.points.shape:
        raise DataError("saliency and fixation dimensions differ")
    flat = sal.data.ravel()
    pos = sal.data[gt.points]
    size = cfg.borji_sample_size or pos.size
    rng = np.random.default_rng(cfg.rng_seed)
    draws = rng.integers(0, flat.size, size=(cfg.borji_splits, size))
    lo_sum = np.zeros(size + 1)
    hi_sum = np.zeros(size + 1)
    for s in range(cfg.borji_splits):
        lo, hi = _lattice_envelope(pos, flat[draws[s]])
        lo_sum += lo
        hi_sum += hi
    lo_mean = lo_sum / cfg.borji_splits
    hi_mean = hi_sum / cfg.borji_splits
    # Endpoints must close exactly; every split starts at 0 and ends at 1.
    lo_mean[0] = 0.0
    hi_mean[-1] = 1.0
    fpr = np.repeat(np.arange(size + 1) / size, 2)
    tpr = np.stack([lo_mean, hi_mean], axis=1).ravel()
    return RocCurve(fpr, tpr)


def cc(sal: Map2D, gt_density: Map2D) -> float:
    """Pearson correlation over pixels, population form (divide by N)."""
    if sal.data.shape != gt_density.data.shape:
        raise DataError("cc requires equal dimensions")
    a = sal.data.ravel()
    b = gt_density.data.ravel()
    da = a - a.mean()
    db = b - b.mean()
    var_a = float(np.mean(da * da))
    var_b = float(np.mean(db * db))
    if var_a == 0.0 or var_b == 0.0:
        raise DataError("undefined correlation for a zero-variance map")
    r = float(np.mean(da * db)) / np.sqrt(var_a * var_b)
    return float(np.clip(r, -1.0, 1.0))


def kl(
    sal: Map2D, gt_density: Map2D, epsilon: float = EPSILON_DEFAULT
) -> float:
    """Divergence of the prediction S from the fixation density F:
    sum of F * ln(eps + F / (eps + S)); natural logarithm."""
    if sal.state != PROBABILITY or gt_density.state != PROBABILITY:
        raise DataError("kl requires probability-state maps")
    if sal.data.shape != gt_density.data.shape:
        raise DataError("kl requires equal dimensions")
    if epsilon <= 0.0:
        raise DataError("epsilon must be positive")
    f = gt_density.data
    s = sal.data
    return float(np.sum(f * np.log(epsilon + f / (epsilon + s))))


def roc_csv(curve: RocCurve) -> str:
    """CSV rendering of a curve: header plus one fpr,tpr row per point."""
    lines = ["fpr,tpr"]
    for x, y in zip(curve.fpr, curve.tpr):
        lines.append(f"{x:.6f},{y:.6f}")
    return "\n".join(lines) + "\n"
