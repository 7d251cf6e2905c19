"""Dataset ingestion, batch evaluation and report emission.

Loads an eye-fixation dataset (images, fixation point CSVs, density maps),
evaluates the four model variants or externally supplied saliency maps
with all four metrics, aggregates mean/SEM, runs paired significance
tests, and renders deterministic CSV reports.
"""

from __future__ import annotations

import csv
import io
import logging
import re
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import stats as scipy_stats

from .backbone import (
    FeatureBundle,
    TorchBackbone,
    load_features,
    save_features,
    working_size,
)
from .errors import DataError, ModelError
from .fusion import VARIANTS, FusionConfig, predict_all
from .imaging import (
    PROBABILITY,
    Map2D,
    load_image,
    load_map_png,
    load_map_raw,
    minmax_normalize,
    resize_array,
)
from .metrics import (
    FixationGroundTruth,
    MetricConfig,
    auc,
    cc,
    kl,
    roc_borji,
    roc_dist,
)

log = logging.getLogger("deepfeat.harness")

METRICS = ("auc", "auc_borji", "cc", "kl")
HIGHER_IS_BETTER = {"auc": True, "auc_borji": True, "cc": True, "kl": False}
_METRIC_LABELS = {"auc": "AUC", "auc_borji": "AUC_BORJI", "cc": "CC", "kl": "KL"}


def metric_label(metric: str) -> str:
    """Report-file spelling of a metric key (e.g. ``auc`` -> ``AUC``)."""
    return _METRIC_LABELS[metric]


_IMAGE_EXTS = (".jpeg", ".jpg", ".png")
_ROC_GRID = np.linspace(0.0, 1.0, 201)


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class DatasetEntry:
    image_id: str
    image_path: Path
    points_path: Path
    density_path: Path
    size: tuple[int, int]
    points: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    entries: tuple[DatasetEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)


def _image_dims(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            w, h = im.size
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if w == 0 or h == 0:
        raise DataError(f"zero-dimension image: {path}")
    return h, w


def _parse_points(path: Path, size: tuple[int, int]):
    h, w = size
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read fixation file {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != ["x", "y"]:
        raise DataError(f"{path}: expected header 'x,y'")
    points = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"{path} row {i}: expected two columns")
        try:
            x = int(row[0])
            y = int(row[1])
        except ValueError as exc:
            raise DataError(
                f"{path} row {i}: coordinates must be integers"
            ) from exc
        if not (0 <= x < w and 0 <= y < h):
            raise DataError(
                f"{path} row {i}: fixation ({x}, {y}) outside {w}x{h} image"
            )
        points.append((x, y))
    if not points:
        raise DataError(f"{path}: no fixation rows")
    return tuple(points)


def load_dataset(root: str | Path) -> DatasetIndex:
    """Index a dataset laid out as images/, fixations/points/ and
    fixations/maps/; every id must appear in all three places and every
    fixation file is validated eagerly."""
    root = Path(root)
    images_dir = root / "images"
    points_dir = root / "fixations" / "points"
    maps_dir = root / "fixations" / "maps"
    for d in (images_dir, points_dir, maps_dir):
        if not d.is_dir():
            raise DataError(f"missing dataset directory: {d}")

    images: dict[str, Path] = {}
    for p in sorted(images_dir.iterdir()):
        if p.suffix.lower() not in _IMAGE_EXTS:
            continue
        if p.stem in images:
            raise DataError(f"duplicate image id: {p.stem}")
        images[p.stem] = p
    point_ids = {p.stem for p in points_dir.glob("*.csv")}
    map_ids = {p.stem for p in maps_dir.glob("*.png")}

    all_ids = set(images) | point_ids | map_ids
    for i in sorted(all_ids):
        missing = []
        if i not in images:
            missing.append("images/")
        if i not in point_ids:
            missing.append("fixations/points/")
        if i not in map_ids:
            missing.append("fixations/maps/")
        if missing:
            raise DataError(f"id {i!r} missing from {', '.join(missing)}")
    if not all_ids:
        raise DataError(f"dataset at {root} contains no images")

    entries = []
    for image_id in sorted(images):
        img_path = images[image_id]
        size = _image_dims(img_path)
        pts_path = points_dir / f"{image_id}.csv"
        density_path = maps_dir / f"{image_id}.png"
        points = _parse_points(pts_path, size)
        density = load_map_png(density_path)
        if float(density.data.sum()) <= 0.0:
            raise DataError(f"degenerate density map: {density_path}")
        entries.append(
            DatasetEntry(image_id, img_path, pts_path, density_path, size, points)
        )
    return DatasetIndex(root, tuple(entries))


def load_ground_truth(
    entry: DatasetEntry, regen_sigma: float | None = None
) -> FixationGroundTruth:
    """Fixations of one entry; the density comes from the dataset's map
    file, or is regenerated by Gaussian-blurring the points when
    ``regen_sigma`` (pixels) is given."""
    h, w = entry.size
    pts = np.zeros((h, w), dtype=bool)
    for x, y in entry.points:
        pts[y, x] = True
    if regen_sigma is not None:
        if regen_sigma <= 0.0:
            raise DataError("regeneration sigma must be positive")
        from scipy.ndimage import gaussian_filter

        dens = gaussian_filter(pts.astype(np.float64), sigma=regen_sigma)
    else:
        m = load_map_png(entry.density_path)
        dens = m.data
        if dens.shape != (h, w):
            dens = resize_array(dens, h, w)
    total = float(dens.sum())
    if total <= 0.0:
        raise DataError(f"degenerate density map: {entry.density_path}")
    return FixationGroundTruth(pts, Map2D(dens / total, PROBABILITY))


# ---------------------------------------------------------------------------
# feature providers


def cache_filename(image_id: str, digest: str, size: tuple[int, int]) -> str:
    wh, ww = size
    return f"{image_id}-{digest[:16]}-{wh}x{ww}.dfb1"


class BackboneSource:
    """Feature provider backed by a live model, with an optional on-disk
    cache keyed by image id, checkpoint digest and working resolution."""

    def __init__(self, backbone: TorchBackbone, cache_dir: str | Path | None = None):
        self.backbone = backbone
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _cache_path(self, image_id: str, size: tuple[int, int]) -> Path | None:
        if self.cache_dir is None:
            return None
        cfg = self.backbone.config
        ws = working_size(*size, cfg.working_long_side, cfg.round_multiple)
        return self.cache_dir / cache_filename(image_id, self.backbone.digest, ws)

    def bundle_for(self, image_id: str, image_path: str | Path) -> FeatureBundle:
        img = load_image(image_path)
        path = self._cache_path(image_id, (img.height, img.width))
        if path is not None and path.is_file():
            return load_features(path)
        bundle = self.backbone.extract_features(img)
        if path is not None:
            tmp = path.with_suffix(".tmp")
            save_features(bundle, tmp)
            tmp.replace(path)
        return bundle


class CachedSource:
    """Feature provider that serves only pre-extracted containers; raises
    when an image has no cached bundle."""

    def __init__(self, cache_dir: str | Path):
        self.cache_dir = Path(cache_dir)
        if not self.cache_dir.is_dir():
            raise DataError(f"feature cache directory not found: {cache_dir}")

    def bundle_for(self, image_id: str, image_path: str | Path) -> FeatureBundle:
        hits = sorted(self.cache_dir.glob(f"{image_id}-*.dfb1"))
        if not hits:
            raise ModelError(
                f"no cached features for {image_id!r} and no model loaded"
            )
        return load_features(hits[0])


# ---------------------------------------------------------------------------
# reports and statistics


@dataclass(frozen=True)
class ImageScore:
    image_id: str
    auc: float
    auc_borji: float
    cc: float
    kl: float

    def value(self, metric: str) -> float:
        return getattr(self, metric)


@dataclass(frozen=True)
class MetricReport:
    """Per-image scores and aggregates for one model."""

    model: str
    rows: tuple[ImageScore, ...]
    config: dict = field(default_factory=dict)
    roc_points: tuple[tuple[float, float], ...] = ()
    roc_borji_points: tuple[tuple[float, float], ...] = ()

    @property
    def n(self) -> int:
        return len(self.rows)

    def scores(self, metric: str) -> np.ndarray:
        return np.array([r.value(metric) for r in self.rows])

    def aggregate(self, metric: str) -> tuple[float, float, int]:
        vals = self.scores(metric)
        return float(vals.mean()), sem(vals), len(vals)


@dataclass(frozen=True)
class PairwiseTest:
    model_a: str
    model_b: str
    metric: str
    t: float
    p: float
    significant: bool
    degenerate: bool = False


@dataclass(frozen=True)
class EvaluationResult:
    reports: tuple[MetricReport, ...]
    tests: tuple[PairwiseTest, ...]
    skipped: tuple[str, ...] = ()


def sem(values) -> float:
    """Standard error of the mean: sample std (n-1 denominator) / sqrt(n).
    Zero for a single value, where the sample std is undefined."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 1:
        raise DataError("sem needs at least one value")
    if v.size == 1:
        return 0.0
    return float(v.std(ddof=1) / np.sqrt(v.size))


def paired_ttest(
    a, b, model_a: str = "A", model_b: str = "B", metric: str = ""
) -> PairwiseTest:
    """Two-tailed paired t-test on matched score vectors.

    All-zero differences return t=0, p=1. Nonzero constant differences
    have no variance to test against; that case returns p=0 with the
    degenerate flag set.
    """
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape or av.ndim != 1:
        raise DataError("paired_ttest needs equal-length vectors")
    n = av.size
    if n < 2:
        raise DataError("paired_ttest needs at least two pairs")
    d = av - bv
    sd = float(d.std(ddof=1))
    mean = float(d.mean())
    if sd == 0.0:
        if mean == 0.0:
            return PairwiseTest(model_a, model_b, metric, 0.0, 1.0, False)
        t = float(np.copysign(np.inf, mean))
        return PairwiseTest(model_a, model_b, metric, t, 0.0, True, True)
    t = mean / (sd / np.sqrt(n))
    p = float(2.0 * scipy_stats.t.sf(abs(t), df=n - 1))
    return PairwiseTest(model_a, model_b, metric, t, p, p <= 0.05)


# ---------------------------------------------------------------------------
# evaluation


def _canon(x: float) -> float:
    # Scores are quantized to their serialized precision before any
    # aggregation, so statistics recomputed from scores.csv match exactly.
    return float(f"{x:.6f}")


def _image_seed(base_seed: int, image_id: str) -> int:
    # Stable per-image seed: scores do not depend on worker scheduling.
    return (base_seed * 1000003 + zlib.crc32(image_id.encode("utf-8"))) % 2**63


def _sample_curve(curve) -> np.ndarray:
    """Staircase reading of a curve on the shared fpr grid: at each grid
    point, the highest tpr the curve attains at or below that fpr."""
    idx = np.searchsorted(curve.fpr, _ROC_GRID, side="right") - 1
    return curve.tpr[np.clip(idx, 0, curve.tpr.size - 1)]


def score_map(
    sal: Map2D, gt: FixationGroundTruth, cfg: MetricConfig
) -> tuple[dict, np.ndarray, np.ndarray]:
    """All four metrics of one saliency map plus sampled curve points."""
    dist_curve = roc_dist(sal, gt)
    borji_curve = roc_borji(sal, gt, cfg)
    scores = {
        "auc": _canon(auc(dist_curve)),
        "auc_borji": _canon(auc(borji_curve)),
        "cc": _canon(cc(sal, gt.density)),
        "kl": _canon(kl(sal, gt.density, cfg.epsilon)),
    }
    return scores, _sample_curve(dist_curve), _sample_curve(borji_curve)


def _roc_rows(mean_tpr: np.ndarray) -> tuple[tuple[float, float], ...]:
    pts = [(0.0, 0.0)]
    pts.extend(zip(_ROC_GRID.tolist(), mean_tpr.tolist()))
    return tuple(pts)


def _consecutive_pairs(reports, metric: str, all_pairs: bool):
    ordered = sorted(
        reports,
        key=lambda r: (
            -r.aggregate(metric)[0] if HIGHER_IS_BETTER[metric] else r.aggregate(metric)[0],
            r.model,
        ),
    )
    if all_pairs:
        return [
            (ordered[i], ordered[j])
            for i in range(len(ordered))
            for j in range(i + 1, len(ordered))
        ]
    return list(zip(ordered, ordered[1:]))


def run_pairwise_tests(reports, all_pairs: bool = False) -> tuple[PairwiseTest, ...]:
    """Paired t-tests between models, per metric.

    Default mode tests consecutive models in each metric's ranking;
    ``all_pairs`` tests every ordered-by-rank pair. Reports must cover the
    same images in the same order; fewer than two reports, or fewer than
    two images, yields no tests.
    """
    tests = []
    if len(reports) < 2 or reports[0].n < 2:
        return ()
    for metric in METRICS:
        for ra, rb in _consecutive_pairs(reports, metric, all_pairs):
            tests.append(
                paired_ttest(
                    ra.scores(metric),
                    rb.scores(metric),
                    ra.model,
                    rb.model,
                    _METRIC_LABELS[metric],
                )
            )
    return tuple(tests)


def evaluate_variants(
    ds: DatasetIndex,
    provider,
    variants=VARIANTS,
    fusion_cfg: FusionConfig | None = None,
    metric_cfg: MetricConfig | None = None,
    workers: int = 1,
    regen_sigma: float | None = None,
    all_pairs: bool = False,
) -> EvaluationResult:
    """Score every requested variant on every dataset image.

    Features are pulled from the provider once per image and shared by all
    variants. A provider failure skips that image for every variant, so
    reports stay paired; more than 10% skips aborts the run.
    """
    fusion_cfg = fusion_cfg or FusionConfig()
    metric_cfg = metric_cfg or MetricConfig()
    requested = [v for v in VARIANTS if v in set(variants)]
    if not requested or set(variants) - set(VARIANTS):
        raise DataError(f"variants must be a non-empty subset of {VARIANTS}")
    if not ds.entries:
        raise DataError("dataset is empty")

    def job(entry: DatasetEntry):
        try:
            bundle = provider.bundle_for(entry.image_id, entry.image_path)
        except (DataError, ModelError) as exc:
            return entry.image_id, None, str(exc)
        gt = load_ground_truth(entry, regen_sigma)
        img_cfg = MetricConfig(
            epsilon=metric_cfg.epsilon,
            borji_splits=metric_cfg.borji_splits,
            borji_sample_size=metric_cfg.borji_sample_size,
            rng_seed=_image_seed(metric_cfg.rng_seed, entry.image_id),
        )
        h, w = entry.size
        maps = predict_all(bundle, requested, fusion_cfg, h, w)
        out = {v: score_map(maps[v], gt, img_cfg) for v in requested}
        return entry.image_id, out, None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, ds.entries))
    else:
        results = [job(e) for e in ds.entries]

    by_id = {image_id: payload for image_id, payload, _ in results}
    skipped = tuple(
        image_id for image_id, payload, reason in results if payload is None
    )
    for image_id, payload, reason in results:
        if payload is None:
            log.warning("skipping %s: %s", image_id, reason)
    if skipped and len(skipped) > 0.10 * len(ds.entries):
        raise DataError(
            f"{len(skipped)} of {len(ds.entries)} images failed; "
            "aborting (more than 10% skipped)"
        )
    kept = [e.image_id for e in ds.entries if by_id[e.image_id] is not None]
    if not kept:
        raise DataError("every image failed feature extraction")

    config_echo = {
        "alpha": fusion_cfg.alpha,
        "beta": fusion_cfg.beta,
        "sigma_frac": fusion_cfg.sigma_frac,
        "seed": metric_cfg.rng_seed,
        "epsilon": metric_cfg.epsilon,
    }
    reports = []
    for v in requested:
        rows = []
        dist_sum = np.zeros_like(_ROC_GRID)
        borji_sum = np.zeros_like(_ROC_GRID)
        for image_id in kept:
            scores, dist_pts, borji_pts = by_id[image_id][v]
            rows.append(ImageScore(image_id, **scores))
            dist_sum += dist_pts
            borji_sum += borji_pts
        reports.append(
            MetricReport(
                v,
                tuple(rows),
                dict(config_echo),
                _roc_rows(dist_sum / len(kept)),
                _roc_rows(borji_sum / len(kept)),
            )
        )
    return EvaluationResult(tuple(reports), run_pairwise_tests(reports, all_pairs), skipped)


def _load_external_map(maps_root: Path, image_id: str) -> Map2D:
    raw = maps_root / f"{image_id}.dfm1"
    png = maps_root / f"{image_id}.png"
    if raw.is_file():
        return load_map_raw(raw)
    if png.is_file():
        return load_map_png(png)
    raise DataError(f"no saliency map for {image_id!r} under {maps_root}")


def normalize_external(m: Map2D, out_h: int, out_w: int) -> Map2D:
    """Bring an externally produced map into probability state at the
    image resolution.

    Maps that already look like distributions (nonnegative, sum within
    1e-3 of 1) are only renormalized, so a map this harness itself dumped
    scores identically. Anything else is min-max normalized and passed
    through the pixel softmax. The distribution check runs before any
    resizing, which rescales total mass.
    """
    data = m.data
    prob_like = data.min() >= 0.0 and abs(float(data.sum()) - 1.0) <= 1e-3
    if data.shape != (out_h, out_w):
        data = resize_array(data, out_h, out_w)
    if prob_like:
        return Map2D(data / float(data.sum()), PROBABILITY)
    unit = minmax_normalize(Map2D(data)).data
    shifted = np.exp(unit - unit.max())
    return Map2D(shifted / shifted.sum(), PROBABILITY)


def evaluate_external(
    ds: DatasetIndex,
    maps_root: str | Path,
    model_name: str,
    metric_cfg: MetricConfig | None = None,
    regen_sigma: float | None = None,
) -> MetricReport:
    """Score a directory of externally produced saliency maps (one PNG or
    DFM1 file per dataset id) with the same protocol as the variants."""
    metric_cfg = metric_cfg or MetricConfig()
    maps_root = Path(maps_root)
    if not ds.entries:
        raise DataError("dataset is empty")
    rows = []
    dist_sum = np.zeros_like(_ROC_GRID)
    borji_sum = np.zeros_like(_ROC_GRID)
    for entry in ds.entries:
        gt = load_ground_truth(entry, regen_sigma)
        h, w = entry.size
        sal = normalize_external(_load_external_map(maps_root, entry.image_id), h, w)
        img_cfg = MetricConfig(
            epsilon=metric_cfg.epsilon,
            borji_splits=metric_cfg.borji_splits,
            borji_sample_size=metric_cfg.borji_sample_size,
            rng_seed=_image_seed(metric_cfg.rng_seed, entry.image_id),
        )
        scores, dist_pts, borji_pts = score_map(sal, gt, img_cfg)
        rows.append(ImageScore(entry.image_id, **scores))
        dist_sum += dist_pts
        borji_sum += borji_pts
    n = len(ds.entries)
    return MetricReport(
        model_name,
        tuple(rows),
        {"seed": metric_cfg.rng_seed, "epsilon": metric_cfg.epsilon},
        _roc_rows(dist_sum / n),
        _roc_rows(borji_sum / n),
    )


# ---------------------------------------------------------------------------
# report files


def _safe_name(model: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", model)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def render_report_files(reports, tests) -> dict[str, str]:
    """All report CSVs as filename -> text, deterministic order."""
    if not reports:
        raise DataError("render_report_files needs at least one report")
    files: dict[str, str] = {}

    lines = ["model,image_id,auc,auc_borji,cc,kl"]
    for r in reports:
        for row in r.rows:
            lines.append(
                f"{r.model},{row.image_id},{_fmt(row.auc)},"
                f"{_fmt(row.auc_borji)},{_fmt(row.cc)},{_fmt(row.kl)}"
            )
    files["scores.csv"] = "\n".join(lines) + "\n"

    lines = ["model,metric,mean,sem,n"]
    for r in reports:
        for metric in METRICS:
            mean, err, n = r.aggregate(metric)
            lines.append(
                f"{r.model},{_METRIC_LABELS[metric]},{_fmt(mean)},{_fmt(err)},{n}"
            )
    files["summary.csv"] = "\n".join(lines) + "\n"

    lines = ["model_a,model_b,metric,t,p,significant"]
    for t in tests:
        lines.append(
            f"{t.model_a},{t.model_b},{t.metric},{_fmt(t.t)},{_fmt(t.p)},"
            f"{str(t.significant).lower()}"
        )
    files["ttests.csv"] = "\n".join(lines) + "\n"

    for metric in METRICS:
        ordered = sorted(
            reports,
            key=lambda r: (
                -r.aggregate(metric)[0]
                if HIGHER_IS_BETTER[metric]
                else r.aggregate(metric)[0],
                r.model,
            ),
        )
        lines = ["rank,model,mean,sem"]
        for i, r in enumerate(ordered, start=1):
            mean, err, _ = r.aggregate(metric)
            lines.append(f"{i},{r.model},{_fmt(mean)},{_fmt(err)}")
        files[f"ranking_{metric}.csv"] = "\n".join(lines) + "\n"

    for r in reports:
        for suffix, pts in (("", r.roc_points), ("borji_", r.roc_borji_points)):
            if not pts:
                continue
            lines = ["fpr,tpr"]
            for x, y in pts:
                lines.append(f"{_fmt(x)},{_fmt(y)}")
            files[f"roc_{suffix}{_safe_name(r.model)}.csv"] = "\n".join(lines) + "\n"
    return files


def emit_report(reports, tests, out_dir: str | Path) -> list[Path]:
    """Write every report CSV under out_dir; returns the written paths."""
    out_dir = Path(out_dir)
    files = render_report_files(reports, tests)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name in sorted(files):
            path = out_dir / name
            path.write_text(files[name])
            written.append(path)
    except OSError as exc:
        raise DataError(f"cannot write reports under {out_dir}: {exc}") from exc
    return written
