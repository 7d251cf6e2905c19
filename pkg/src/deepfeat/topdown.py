"""Top-down saliency: class activation maps from the final activations and
classifier weights, mixed under the classifier's own class probabilities."""

from __future__ import annotations

import numpy as np

from .backbone import ClassActivationInputs
from .errors import DataError
from .imaging import RAW, Map2D, resize_array


def class_activation_map(inputs: ClassActivationInputs, c: int) -> Map2D:
    """Activation map of one class: sum over units of w_{k,c} * a_k."""
    if not 0 <= c < inputs.num_classes:
        raise DataError(f"class index {c} out of range 0..{inputs.num_classes - 1}")
    weights = inputs.weights[:, c].astype(np.float64)
    act = inputs.activations.astype(np.float64)
    return Map2D(np.tensordot(weights, act, axes=1), RAW)


def topdown_map(
    inputs: ClassActivationInputs,
    out_h: int,
    out_w: int,
    top_n: int | None = None,
) -> Map2D:
    """Probability-weighted mixture of all per-class activation maps.

    Computed by collapsing the weights across classes first (one vector of
    per-unit coefficients), which is algebraically identical to summing
    S_c * CAM_c over classes but avoids materializing C maps. ``top_n``
    optionally restricts the mixture to the n most probable classes with
    renormalized probabilities; the default uses every class.
    """
    probs = inputs.class_probs.astype(np.float64)
    if top_n is not None:
        if top_n < 1:
            raise DataError("top_n must be >= 1")
        n = min(top_n, inputs.num_classes)
        keep = np.argsort(probs)[::-1][:n]
        mask = np.zeros_like(probs)
        mask[keep] = probs[keep]
        total = mask.sum()
        if total <= 0.0:
            raise DataError("selected classes have zero total probability")
        probs = mask / total
    collapsed = inputs.weights.astype(np.float64) @ probs
    act = inputs.activations.astype(np.float64)
    raw = np.tensordot(collapsed, act, axes=1)
    return Map2D(resize_array(raw, out_h, out_w), RAW)
