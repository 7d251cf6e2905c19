"""Request and response models for the saliency service.

Binary payloads (images, feature containers, rendered maps) travel as
base64 strings so every endpoint speaks plain JSON. Report CSVs come
back as a filename -> text mapping, byte-identical to what the command
line writes to disk.
"""

from __future__ import annotations

from pydantic import BaseModel, Field

DEFAULT_FEATURE_LAYERS = (1, 10, 20, 30, 40, 49)


class HealthResponse(BaseModel):
    status: str
    model_loaded: bool


class PredictRequest(BaseModel):
    """One image (or a precomputed feature container) in, one map out."""

    image_b64: str | None = None
    features_b64: str | None = None
    variant: str = "wcb"
    alpha: float = 0.5
    beta: float = 0.5
    sigma_frac: float = 0.25
    top_n: int | None = None
    want_png: bool = True
    want_raw: bool = False


class PredictResponse(BaseModel):
    variant: str
    height: int
    width: int
    png_b64: str | None = None
    raw_b64: str | None = None


class EvaluateRequest(BaseModel):
    """Score pipeline variants against a fixation dataset on the server's
    filesystem."""

    dataset_root: str
    variants: list[str] = Field(default_factory=lambda: ["wcb", "ncb", "td", "bu"])
    alpha: float = 0.5
    beta: float = 0.5
    sigma_frac: float = 0.25
    seed: int = 42
    borji_splits: int = 100
    workers: int = 1
    regen_sigma: float | None = None
    all_pairs: bool = False


class CompareRequest(EvaluateRequest):
    """Variants plus externally produced map directories, scored under one
    protocol with significance tests across the union."""

    externals: dict[str, str] = Field(default_factory=dict)


class SummaryRow(BaseModel):
    model: str
    metric: str
    mean: float
    sem: float
    n: int


class EvaluateResponse(BaseModel):
    files: dict[str, str]
    summary: list[SummaryRow]
    skipped: list[str]


class FeaturesRequest(BaseModel):
    """Dump per-layer contrast responses (and optionally one class
    activation map) for a single image."""

    image_b64: str | None = None
    features_b64: str | None = None
    layers: list[int] = Field(default_factory=lambda: list(DEFAULT_FEATURE_LAYERS))
    cam_class: int | None = None


class FeaturesResponse(BaseModel):
    files_b64: dict[str, str]


class CacheRequest(BaseModel):
    """Precompute feature containers for every image of a dataset."""

    dataset_root: str
    out_dir: str


class CacheResponse(BaseModel):
    written: int
    reused: int
    total: int
