"""Tests for center-surround responses and cross-layer combination."""

import numpy as np
import pytest

from deepfeat.backbone import COARSE, FINE, FeatureStack
from deepfeat.bottomup import LayerResponse, center_surround, combine_layers
from deepfeat.errors import DataError
from deepfeat.imaging import RAW, Map2D, minmax_normalize, resize_array


def _stacks(rng, k=2, fine_hw=(6, 4), coarse_hw=(3, 2), layer=1):
    fine = FeatureStack(layer, rng.normal(size=(k, *fine_hw)), FINE)
    coarse = FeatureStack(layer, rng.normal(size=(k, *coarse_hw)), COARSE)
    return fine, coarse


def test_layer_response_validation():
    LayerResponse(1, Map2D(np.ones((2, 2))))
    with pytest.raises(DataError):
        LayerResponse(1, Map2D(np.array([[-1.0, 0.0]])))


def test_identical_scales_give_zero():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(3, 5, 5))
    fine = FeatureStack(2, data, FINE)
    coarse = FeatureStack(2, data, COARSE)
    r = center_surround(fine, coarse)
    assert np.array_equal(r.map.data, np.zeros((5, 5)))


def test_constant_upsample_hand_case():
    fine = FeatureStack(1, np.array([[[1.0, 0.0], [0.0, 1.0]]]), FINE)
    coarse = FeatureStack(1, np.array([[[0.5]]]), COARSE)
    r = center_surround(fine, coarse)
    assert np.allclose(r.map.data, 0.5, atol=1e-12)


def test_matches_per_map_loop():
    rng = np.random.default_rng(1)
    fine, coarse = _stacks(rng, k=4, fine_hw=(7, 5), coarse_hw=(4, 3))
    got = center_surround(fine, coarse).map.data
    want = np.zeros((7, 5))
    for i in range(4):
        up = resize_array(coarse.data[i].astype(np.float64), 7, 5)
        want += np.abs(fine.data[i].astype(np.float64) - up)
    assert np.allclose(got, want, atol=1e-12)


def test_nonneg_and_sign_symmetry():
    rng = np.random.default_rng(2)
    for _ in range(5):
        fine, coarse = _stacks(rng)
        r = center_surround(fine, coarse).map.data
        assert r.min() >= 0.0
        neg = center_surround(
            FeatureStack(1, -fine.data, FINE), FeatureStack(1, -coarse.data, COARSE)
        ).map.data
        assert np.allclose(r, neg, atol=1e-12)


def test_center_surround_rejects_mismatches():
    rng = np.random.default_rng(3)
    fine, coarse = _stacks(rng)
    with pytest.raises(DataError):
        center_surround(fine, FeatureStack(2, coarse.data, COARSE))
    with pytest.raises(DataError):
        center_surround(fine, FeatureStack(1, coarse.data[:1], COARSE))
    with pytest.raises(DataError):
        center_surround(coarse, fine)
    with pytest.raises(DataError):
        center_surround(fine, FeatureStack(1, coarse.data, FINE))


# ---------------------------------------------------------------------------
# combination


def _resp(layer, data):
    return LayerResponse(layer, Map2D(np.abs(data)))


def test_single_layer_is_its_normalization():
    rng = np.random.default_rng(4)
    r = _resp(1, rng.normal(size=(5, 6)))
    out = combine_layers([r], 5, 6)
    assert out.state == RAW
    assert np.array_equal(out.data, minmax_normalize(r.map).data)


def test_two_identical_layers_double():
    rng = np.random.default_rng(5)
    base = np.abs(rng.normal(size=(4, 4)))
    out = combine_layers([_resp(1, base), _resp(2, base)], 4, 4)
    assert np.allclose(out.data, 2 * minmax_normalize(Map2D(base)).data, atol=1e-12)


def test_constant_layer_contributes_nothing():
    rng = np.random.default_rng(6)
    varied = _resp(1, rng.normal(size=(4, 4)))
    flat = _resp(2, np.full((4, 4), 3.0))
    with_flat = combine_layers([varied, flat], 4, 4)
    without = combine_layers([varied], 4, 4)
    assert np.array_equal(with_flat.data, without.data)


def test_permutation_invariant_bitwise():
    rng = np.random.default_rng(7)
    resps = [_resp(i + 1, rng.normal(size=(3 + i, 4))) for i in range(5)]
    a = combine_layers(resps, 6, 6)
    b = combine_layers(resps[::-1], 6, 6)
    c = combine_layers([resps[2], resps[0], resps[4], resps[1], resps[3]], 6, 6)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(a.data, c.data)


def test_output_bounded_by_layer_count():
    rng = np.random.default_rng(8)
    resps = [_resp(i + 1, rng.normal(size=(5, 5))) for i in range(7)]
    out = combine_layers(resps, 9, 9)
    assert out.data.min() >= 0.0
    assert out.data.max() <= 7.0 + 1e-12


def test_empty_sequence_rejected():
    with pytest.raises(DataError):
        combine_layers([], 4, 4)
