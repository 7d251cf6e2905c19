"""Bottom-up saliency: per-layer center-surround contrast between the fine
features and the upsampled coarse features, combined across layers with
equal weight after per-layer normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import COARSE, FINE, FeatureStack
from .errors import DataError
from .imaging import RAW, Map2D, minmax_normalize, resize_array


@dataclass(frozen=True)
class LayerResponse:
    """Center-surround response of one layer at the fine resolution."""

    layer_index: int
    map: Map2D

    def __post_init__(self) -> None:
        if self.map.state != RAW:
            raise DataError("layer response map must be raw state")
        if self.map.data.min() < 0.0:
            raise DataError("layer response must be nonnegative")


def center_surround(fine: FeatureStack, coarse: FeatureStack) -> LayerResponse:
    """Sum over response images of |fine - upsampled coarse|.

    Each coarse response image is bilinearly upsampled to the fine stack's
    grid; the per-image absolute differences are accumulated into one map.
    """
    if fine.layer_index != coarse.layer_index:
        raise DataError(
            f"layer mismatch: {fine.layer_index} vs {coarse.layer_index}"
        )
    if fine.k != coarse.k:
        raise DataError(f"layer {fine.layer_index}: stack k mismatch")
    if fine.scale != FINE or coarse.scale != COARSE:
        raise DataError("center_surround needs a fine stack and a coarse stack")
    up = resize_array(
        coarse.data.transpose(1, 2, 0), fine.height, fine.width
    ).transpose(2, 0, 1)
    resp = np.abs(fine.data.astype(np.float64) - up).sum(axis=0)
    return LayerResponse(fine.layer_index, Map2D(resp, RAW))


def combine_layers(responses, out_h: int, out_w: int) -> Map2D:
    """Equal-weight combination of per-layer responses on a shared grid.

    Each response is resized to (out_h, out_w), min-max normalized, then
    accumulated. Summation runs in ascending layer order so the result is
    bit-identical regardless of input ordering.
    """
    items = sorted(responses, key=lambda r: r.layer_index)
    if not items:
        raise DataError("combine_layers needs at least one response")
    acc = np.zeros((out_h, out_w), dtype=np.float64)
    for resp in items:
        resized = resize_array(resp.map.data, out_h, out_w)
        acc += minmax_normalize(Map2D(resized, RAW)).data
    return Map2D(acc, RAW)
