"""Shared fixtures: synthetic feature bundles, a cached random-weight
checkpoint for model-dependent tests, and a deterministic test image."""

from pathlib import Path

import numpy as np
import pytest

from deepfeat.backbone import (
    COARSE,
    FINE,
    ClassActivationInputs,
    FeatureBundle,
    FeatureStack,
)
from deepfeat.imaging import ImageTensor

_CKPT_CACHE = Path("/tmp/deepfeat-test-resnet50.pt")


def make_bundle(
    seed=0,
    layers=3,
    k=2,
    fine_hw=(8, 6),
    coarse_hw=(4, 3),
    cam_hw=(4, 3),
    k_last=2,
    classes=4,
    source=(32, 24),
):
    """Small synthetic FeatureBundle with seeded random content."""
    rng = np.random.default_rng(seed)
    fine = tuple(
        FeatureStack(i + 1, rng.normal(size=(k, *fine_hw)), FINE)
        for i in range(layers)
    )
    coarse = tuple(
        FeatureStack(i + 1, rng.normal(size=(k, *coarse_hw)), COARSE)
        for i in range(layers)
    )
    act = np.abs(rng.normal(size=(k_last, *cam_hw)))
    wts = rng.normal(size=(k_last, classes))
    probs = rng.random(classes)
    probs /= probs.sum()
    cam = ClassActivationInputs(act, wts, probs.astype(np.float32))
    return FeatureBundle(fine, coarse, cam, source)


@pytest.fixture(scope="session")
def bundle():
    return make_bundle()


@pytest.fixture(scope="session")
def checkpoint_path():
    """State dict of a randomly initialized 50-layer residual classifier,
    cached on disk so repeated test runs skip the rebuild."""
    torch = pytest.importorskip("torch")
    from torchvision.models import resnet50

    if not _CKPT_CACHE.exists():
        torch.manual_seed(0)
        model = resnet50(weights=None)
        torch.save(model.state_dict(), _CKPT_CACHE)
    return _CKPT_CACHE


def make_dataset(root, n=4, size=(24, 30), seed=0):
    """Synthetic fixation dataset in the on-disk layout the harness
    ingests: random images, point CSVs, blurred density PNGs."""
    from PIL import Image
    from scipy.ndimage import gaussian_filter

    root = Path(root)
    (root / "images").mkdir(parents=True)
    (root / "fixations" / "points").mkdir(parents=True)
    (root / "fixations" / "maps").mkdir(parents=True)
    rng = np.random.default_rng(seed)
    h, w = size
    ids = []
    for i in range(n):
        image_id = f"img{i:02d}"
        ids.append(image_id)
        arr = (rng.random((h, w, 3)) * 255).astype(np.uint8)
        Image.fromarray(arr).save(root / "images" / f"{image_id}.png")
        k = int(rng.integers(3, 7))
        xs = rng.integers(0, w, size=k)
        ys = rng.integers(0, h, size=k)
        lines = ["x,y"] + [f"{x},{y}" for x, y in zip(xs, ys)]
        (root / "fixations" / "points" / f"{image_id}.csv").write_text(
            "\n".join(lines) + "\n"
        )
        dens = np.zeros((h, w))
        dens[ys, xs] = 1.0
        dens = gaussian_filter(dens, sigma=3.0)
        q = np.floor(dens / dens.max() * 255 + 0.5).astype(np.uint8)
        Image.fromarray(q, mode="L").save(
            root / "fixations" / "maps" / f"{image_id}.png"
        )
    return ids


def make_cache(cache_dir, ids, size=(24, 30)):
    """Synthetic feature cache: one small bundle per image id, shaped so
    the working grid equals the image size."""
    from deepfeat.backbone import save_features

    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    h, w = size
    for i, image_id in enumerate(ids):
        bundle = make_bundle(
            seed=100 + i,
            layers=3,
            k=2,
            fine_hw=(h // 2, w // 2),
            coarse_hw=(h // 4, w // 4),
            cam_hw=(h // 4, w // 4),
            k_last=2,
            classes=5,
            source=(h, w),
        )
        save_features(bundle, cache_dir / f"{image_id}-0000000000000000-{h}x{w}.dfb1")
    return cache_dir


@pytest.fixture()
def dataset_dir(tmp_path):
    ids = make_dataset(tmp_path / "ds")
    make_cache(tmp_path / "cache", ids)
    return tmp_path / "ds", tmp_path / "cache"


@pytest.fixture(scope="session")
def photo_image():
    """Deterministic structured RGB image with off-multiple dimensions."""
    h, w = 97, 131
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r = 0.5 + 0.5 * np.sin(xx / 9.0)
    g = yy / (h - 1)
    b = np.zeros((h, w))
    b[30:60, 40:80] = 1.0
    img = np.stack([r, g, b], axis=2)
    return ImageTensor(np.clip(img, 0.0, 1.0))
