"""Request handlers behind the saliency service.

Each handler takes a :class:`ServiceState` plus a schema object and
returns a schema object, raising :class:`DataError` for bad inputs and
:class:`ModelError` when the backbone is missing or broken. The FastAPI
routes and the local command line path both call straight into these, so
the two front ends cannot drift apart.
"""

from __future__ import annotations

import base64
import binascii
import threading
from pathlib import Path

from deepfeat.backbone import (
    BackboneConfig,
    FeatureBundle,
    TorchBackbone,
    decode_features,
    save_features,
    working_size,
)
from deepfeat.bottomup import center_surround
from deepfeat.errors import DataError, ModelError
from deepfeat.fusion import VARIANTS, FusionConfig, predict
from deepfeat.harness import (
    BackboneSource,
    CachedSource,
    DatasetIndex,
    METRICS,
    cache_filename,
    evaluate_external,
    evaluate_variants,
    load_dataset,
    metric_label,
    render_report_files,
    run_pairwise_tests,
)
from deepfeat.imaging import (
    encode_map_png,
    encode_map_raw,
    load_image,
    load_image_bytes,
)
from deepfeat.metrics import MetricConfig
from deepfeat.service import schemas
from deepfeat.topdown import class_activation_map


class ServiceState:
    """Shared configuration and the lazily constructed backbone.

    The torch model is built on first use and reused afterwards; building
    is serialized so concurrent first requests do not race. A state with
    neither a checkpoint nor a feature cache can still answer requests
    that carry their own feature containers.
    """

    def __init__(
        self,
        model_path: str | None = None,
        cache_dir: str | None = None,
        working_long_side: int = 448,
    ):
        self.model_path = model_path
        self.cache_dir = cache_dir
        self.working_long_side = working_long_side
        self._backbone: TorchBackbone | None = None
        self._lock = threading.Lock()

    @property
    def model_loaded(self) -> bool:
        return self._backbone is not None

    def backbone(self) -> TorchBackbone:
        if self.model_path is None:
            raise ModelError("no model checkpoint configured")
        with self._lock:
            if self._backbone is None:
                self._backbone = TorchBackbone(
                    BackboneConfig(
                        checkpoint=self.model_path,
                        working_long_side=self.working_long_side,
                    )
                )
            return self._backbone

    def provider(self):
        """Feature source for dataset runs: the model (with the cache as a
        write-through store) when configured, else the cache alone."""
        if self.model_path is not None:
            return BackboneSource(self.backbone(), self.cache_dir)
        if self.cache_dir is not None:
            return CachedSource(self.cache_dir)
        raise ModelError("no model checkpoint and no feature cache configured")


def _decode_b64(payload: str, what: str) -> bytes:
    try:
        return base64.b64decode(payload.encode("ascii"), validate=True)
    except (binascii.Error, ValueError) as exc:
        raise DataError(f"invalid base64 {what}: {exc}") from exc


def _encode_b64(blob: bytes) -> str:
    return base64.b64encode(blob).decode("ascii")


def _canon_variant(name: str) -> str:
    v = name.strip().upper()
    if v not in VARIANTS:
        low = ", ".join(x.lower() for x in VARIANTS)
        raise DataError(f"unknown variant {name!r} (choose from {low})")
    return v


def canon_variants(names) -> list[str]:
    """Normalize a variant list: case-insensitive, 'all' expands to every
    variant, order follows the canonical ordering."""
    names = list(names)
    if not names:
        raise DataError("no variants requested")
    if any(n.strip().lower() == "all" for n in names):
        return list(VARIANTS)
    seen = {_canon_variant(n) for n in names}
    return [v for v in VARIANTS if v in seen]


def _bundle_from_request(state: ServiceState, req) -> FeatureBundle:
    if req.features_b64 is not None:
        return decode_features(_decode_b64(req.features_b64, "feature container"))
    if req.image_b64 is not None:
        img = load_image_bytes(_decode_b64(req.image_b64, "image"))
        return state.backbone().extract_features(img)
    raise DataError("request needs an image or a feature container")


def handle_health(state: ServiceState) -> schemas.HealthResponse:
    return schemas.HealthResponse(status="ok", model_loaded=state.model_loaded)


def handle_predict(
    state: ServiceState, req: schemas.PredictRequest
) -> schemas.PredictResponse:
    variant = _canon_variant(req.variant)
    cfg = FusionConfig(alpha=req.alpha, beta=req.beta, sigma_frac=req.sigma_frac)
    bundle = _bundle_from_request(state, req)
    sal = predict(bundle, variant, cfg, top_n=req.top_n)
    png_b64 = _encode_b64(encode_map_png(sal)) if req.want_png else None
    raw_b64 = _encode_b64(encode_map_raw(sal)) if req.want_raw else None
    return schemas.PredictResponse(
        variant=variant,
        height=sal.height,
        width=sal.width,
        png_b64=png_b64,
        raw_b64=raw_b64,
    )


def _run_configs(req: schemas.EvaluateRequest):
    fusion_cfg = FusionConfig(
        alpha=req.alpha, beta=req.beta, sigma_frac=req.sigma_frac
    )
    metric_cfg = MetricConfig(borji_splits=req.borji_splits, rng_seed=req.seed)
    return fusion_cfg, metric_cfg


def _summary_rows(reports) -> list[schemas.SummaryRow]:
    rows = []
    for r in reports:
        for metric in METRICS:
            mean, sem_val, n = r.aggregate(metric)
            rows.append(
                schemas.SummaryRow(
                    model=r.model,
                    metric=metric_label(metric),
                    mean=mean,
                    sem=sem_val,
                    n=n,
                )
            )
    return rows


def handle_evaluate(
    state: ServiceState, req: schemas.EvaluateRequest
) -> schemas.EvaluateResponse:
    ds = load_dataset(req.dataset_root)
    variants = canon_variants(req.variants)
    fusion_cfg, metric_cfg = _run_configs(req)
    result = evaluate_variants(
        ds,
        state.provider(),
        variants,
        fusion_cfg,
        metric_cfg,
        workers=req.workers,
        regen_sigma=req.regen_sigma,
        all_pairs=req.all_pairs,
    )
    files = render_report_files(result.reports, result.tests)
    return schemas.EvaluateResponse(
        files=files,
        summary=_summary_rows(result.reports),
        skipped=list(result.skipped),
    )


def handle_compare(
    state: ServiceState, req: schemas.CompareRequest
) -> schemas.EvaluateResponse:
    if not req.externals:
        raise DataError("compare needs at least one external model directory")
    ds = load_dataset(req.dataset_root)
    variants = canon_variants(req.variants)
    fusion_cfg, metric_cfg = _run_configs(req)
    result = evaluate_variants(
        ds,
        state.provider(),
        variants,
        fusion_cfg,
        metric_cfg,
        workers=req.workers,
        regen_sigma=req.regen_sigma,
        all_pairs=req.all_pairs,
    )
    # Externals are scored on exactly the images the variants kept, so the
    # paired tests across the union stay aligned.
    kept = {row.image_id for row in result.reports[0].rows}
    scored_ds = DatasetIndex(
        ds.root, tuple(e for e in ds.entries if e.image_id in kept)
    )
    reports = list(result.reports)
    for name in sorted(req.externals):
        reports.append(
            evaluate_external(
                scored_ds,
                req.externals[name],
                name,
                metric_cfg,
                regen_sigma=req.regen_sigma,
            )
        )
    tests = run_pairwise_tests(reports, req.all_pairs)
    files = render_report_files(reports, tests)
    return schemas.EvaluateResponse(
        files=files,
        summary=_summary_rows(reports),
        skipped=list(result.skipped),
    )


def handle_features(
    state: ServiceState, req: schemas.FeaturesRequest
) -> schemas.FeaturesResponse:
    bundle = _bundle_from_request(state, req)
    by_index = {f.layer_index: (f, c) for f, c in zip(bundle.fine, bundle.coarse)}
    files: dict[str, str] = {}
    for layer in req.layers:
        if layer not in by_index:
            raise DataError(
                f"layer {layer} not in bundle (have 1..{bundle.layer_count})"
            )
        fine, coarse = by_index[layer]
        resp = center_surround(fine, coarse)
        files[f"layer_{layer:02d}.png"] = _encode_b64(encode_map_png(resp.map))
    if req.cam_class is not None:
        cam = class_activation_map(bundle.cam_inputs, req.cam_class)
        files[f"cam_{req.cam_class}.png"] = _encode_b64(encode_map_png(cam))
    return schemas.FeaturesResponse(files_b64=files)


def handle_cache(
    state: ServiceState, req: schemas.CacheRequest
) -> schemas.CacheResponse:
    ds = load_dataset(req.dataset_root)
    backbone = state.backbone()
    out_dir = Path(req.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create cache directory {out_dir}: {exc}") from exc
    cfg = backbone.config
    written = 0
    reused = 0
    for entry in ds.entries:
        ws = working_size(*entry.size, cfg.working_long_side, cfg.round_multiple)
        path = out_dir / cache_filename(entry.image_id, backbone.digest, ws)
        if path.is_file():
            reused += 1
            continue
        bundle = backbone.extract_features(load_image(entry.image_path))
        tmp = path.with_suffix(".tmp")
        save_features(bundle, tmp)
        tmp.replace(path)
        written += 1
    return schemas.CacheResponse(written=written, reused=reused, total=len(ds))
