"""Map fusion and the final probability output.

Combines the bottom-up and top-down branches, applies the Gaussian center
prior, converts to a pixel probability distribution, and defines the four
model variants: BU and TD (single branch), NCB (fused, no center bias) and
WCB (fused with center bias).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import FeatureBundle
from .bottomup import center_surround, combine_layers
from .errors import DataError
from .imaging import (
    PROBABILITY,
    RAW,
    UNIT,
    Map2D,
    gaussian_center_map,
    minmax_normalize,
    resize_array,
)
from .topdown import topdown_map

BU = "BU"
TD = "TD"
NCB = "NCB"
WCB = "WCB"
VARIANTS = (BU, TD, NCB, WCB)


@dataclass(frozen=True)
class FusionConfig:
    """Mixing constants: alpha weights bottom-up against top-down, beta
    weights the center prior, sigma_frac sizes the prior."""

    alpha: float = 0.5
    beta: float = 0.5
    sigma_frac: float = 0.25

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise DataError("alpha must lie in [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise DataError("beta must lie in [0, 1]")
        if self.sigma_frac <= 0.0:
            raise DataError("sigma_frac must be positive")


def fuse(bu: Map2D, td: Map2D, alpha: float) -> Map2D:
    """Convex combination of the two branches after normalizing each.

    The branches have incomparable dynamic ranges (a 49-layer sum against
    a probability-weighted mixture), so both are min-max normalized before
    Y = (1 - alpha) * td + alpha * bu.
    """
    if (bu.height, bu.width) != (td.height, td.width):
        raise DataError("fuse requires equal map dimensions")
    y = (1.0 - alpha) * minmax_normalize(td).data + alpha * minmax_normalize(bu).data
    return Map2D(y, RAW)


def apply_center_bias(y: Map2D, center: Map2D, beta: float) -> Map2D:
    """Y' = (1 - beta) * y + beta * center, with a unit-state prior."""
    if (y.height, y.width) != (center.height, center.width):
        raise DataError("center bias requires equal map dimensions")
    if center.state != UNIT:
        raise DataError("center prior must be unit state")
    return Map2D((1.0 - beta) * y.data + beta * center.data, RAW)


def to_probability(yp: Map2D) -> Map2D:
    """Pixel softmax: exp(Y') rescaled to sum to 1.

    The max is subtracted first; the result is identical and exp cannot
    overflow.
    """
    shifted = np.exp(yp.data - yp.data.max())
    return Map2D(shifted / shifted.sum(), PROBABILITY)


def working_grid(bundle: FeatureBundle) -> tuple[int, int]:
    """Grid on which branch maps are combined: twice the largest fine
    stack, which for a stride-2 stem recovers the inference resolution."""
    h = max(s.height for s in bundle.fine)
    w = max(s.width for s in bundle.fine)
    return 2 * h, 2 * w


def bottomup_from_bundle(bundle: FeatureBundle, out_h: int, out_w: int) -> Map2D:
    responses = [
        center_surround(f, c) for f, c in zip(bundle.fine, bundle.coarse)
    ]
    return combine_layers(responses, out_h, out_w)


def predict_all(
    bundle: FeatureBundle,
    variants,
    config: FusionConfig | None = None,
    out_h: int | None = None,
    out_w: int | None = None,
    top_n: int | None = None,
) -> dict[str, Map2D]:
    """Probability maps for several variants, computing each branch once.

    Saliency is assembled at the working grid, resized to the output
    dimensions (the source image size unless overridden), then passed
    through the pixel softmax so the probability state holds exactly at
    output resolution. ``top_n`` optionally truncates the top-down class
    mixture; the default keeps every class.
    """
    config = config or FusionConfig()
    requested = list(variants)
    unknown = [v for v in requested if v not in VARIANTS]
    if unknown:
        raise DataError(f"unknown variants: {unknown}")
    if out_h is None or out_w is None:
        out_h, out_w = bundle.source_size
    gh, gw = working_grid(bundle)

    bu = None
    if any(v in requested for v in (BU, NCB, WCB)):
        bu = bottomup_from_bundle(bundle, gh, gw)
    td = None
    if any(v in requested for v in (TD, NCB, WCB)):
        td = topdown_map(bundle.cam_inputs, gh, gw, top_n=top_n)
    fused = None
    if NCB in requested or WCB in requested:
        fused = fuse(bu, td, config.alpha)

    out: dict[str, Map2D] = {}
    for v in requested:
        if v == BU:
            y = Map2D(minmax_normalize(bu).data, RAW)
        elif v == TD:
            y = Map2D(minmax_normalize(td).data, RAW)
        elif v == NCB:
            y = fused
        else:
            center = gaussian_center_map(gh, gw, config.sigma_frac)
            y = apply_center_bias(fused, center, config.beta)
        resized = resize_array(y.data, out_h, out_w)
        out[v] = to_probability(Map2D(resized, RAW))
    return out


def predict(
    bundle: FeatureBundle,
    variant: str,
    config: FusionConfig | None = None,
    out_h: int | None = None,
    out_w: int | None = None,
    top_n: int | None = None,
) -> Map2D:
    """Probability saliency map for one variant."""
    return predict_all(bundle, [variant], config, out_h, out_w, top_n=top_n)[variant]
