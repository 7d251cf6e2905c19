"""Feature provider for the saliency pipeline.

Supplies the quantities a pretrained 50-layer residual classifier exposes:
per-convolution response stacks at a fine and a coarse working scale, plus
the final activation stack, classifier weight matrix and class probability
vector. A file-backed container format lets everything downstream run with
no model runtime installed.
"""

from __future__ import annotations

import hashlib
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ModelError
from .imaging import ImageTensor, resize_array

FINE = "fine"
COARSE = "coarse"

DFB_MAGIC = b"DFB1"
DFB_VERSION = 1

# Channel statistics of the corpus the reference classifier was trained on.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _as_f32(arr, name: str, ndim: int) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    if out.ndim != ndim or out.size == 0:
        raise DataError(f"{name} must be a non-empty {ndim}D array")
    if not np.all(np.isfinite(out)):
        raise DataError(f"{name} contains non-finite values")
    return out


@dataclass(frozen=True)
class FeatureStack:
    """Response images of one convolution: (k, h, w) float32 values."""

    layer_index: int
    data: np.ndarray
    scale: str = FINE

    def __post_init__(self) -> None:
        if self.layer_index < 1:
            raise DataError("layer_index must be >= 1")
        if self.scale not in (FINE, COARSE):
            raise DataError(f"unknown scale tag: {self.scale!r}")
        object.__setattr__(
            self, "data", _as_f32(self.data, f"layer {self.layer_index} stack", 3)
        )

    @property
    def k(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ClassActivationInputs:
    """Final activation stack with the classifier that consumes it.

    ``activations`` is (k_last, h, w), ``weights`` is (k_last, C) with one
    row per activation unit, ``class_probs`` is a length-C probability
    vector.
    """

    activations: np.ndarray
    weights: np.ndarray
    class_probs: np.ndarray

    def __post_init__(self) -> None:
        act = _as_f32(self.activations, "activations", 3)
        wts = _as_f32(self.weights, "weights", 2)
        probs = np.ascontiguousarray(self.class_probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0 or not np.all(np.isfinite(probs)):
            raise DataError("class_probs must be a non-empty finite vector")
        if wts.shape[0] != act.shape[0]:
            raise DataError(
                "weight rows must match activation units: "
                f"{wts.shape[0]} vs {act.shape[0]}"
            )
        if probs.shape[0] != wts.shape[1]:
            raise DataError("class_probs length must match weight columns")
        if probs.min() < 0.0 or abs(float(probs.sum()) - 1.0) > 1e-6:
            raise DataError("class_probs must be nonnegative and sum to 1")
        object.__setattr__(self, "activations", act)
        object.__setattr__(self, "weights", wts)
        object.__setattr__(self, "class_probs", probs)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class FeatureBundle:
    """Everything one image contributes: matched fine/coarse stacks plus
    classifier inputs and the original image size."""

    fine: tuple[FeatureStack, ...]
    coarse: tuple[FeatureStack, ...]
    cam_inputs: ClassActivationInputs
    source_size: tuple[int, int]

    def __post_init__(self) -> None:
        fine = tuple(self.fine)
        coarse = tuple(self.coarse)
        if not fine or len(fine) != len(coarse):
            raise DataError("fine and coarse stacks must be non-empty and paired")
        idx = [s.layer_index for s in fine]
        if idx != sorted(set(idx)):
            raise DataError("fine layer indices must be strictly ascending")
        for f, c in zip(fine, coarse):
            if f.layer_index != c.layer_index:
                raise DataError("fine/coarse layer index mismatch")
            if f.k != c.k:
                raise DataError(f"layer {f.layer_index}: fine/coarse k mismatch")
            if c.height > f.height or c.width > f.width:
                raise DataError(
                    f"layer {f.layer_index}: coarse stack larger than fine"
                )
            if f.scale != FINE or c.scale != COARSE:
                raise DataError("stack scale tags do not match their position")
        h, w = self.source_size
        if h < 1 or w < 1:
            raise DataError("source_size must be positive")
        object.__setattr__(self, "fine", fine)
        object.__setattr__(self, "coarse", coarse)
        object.__setattr__(self, "source_size", (int(h), int(w)))

    @property
    def layer_count(self) -> int:
        return len(self.fine)


@dataclass(frozen=True)
class BackboneConfig:
    """Provider settings: checkpoint location, working resolution rule and
    the input standardization statistics of the model."""

    checkpoint: str | None = None
    working_long_side: int = 448
    round_multiple: int = 32
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    device: str = "cpu"


def _round_to_multiple(x: float, m: int) -> int:
    return max(m, int(np.floor(x / m + 0.5)) * m)


def working_size(
    h: int, w: int, long_side: int = 448, multiple: int = 32
) -> tuple[int, int]:
    """Inference resolution for an h x w image: longer side scaled to
    ``long_side``, aspect preserved, both dimensions rounded to the nearest
    multiple of ``multiple`` (and at least one multiple)."""
    if h < 1 or w < 1:
        raise DataError("image dimensions must be positive")
    scale = long_side / max(h, w)
    return _round_to_multiple(h * scale, multiple), _round_to_multiple(w * scale, multiple)


def file_digest(path: str | Path) -> str:
    """Hex sha256 of a file, used to key feature caches to a checkpoint."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class TorchBackbone:
    """50-layer residual classifier driven through torchvision.

    Captures the 49 convolution responses (after batch normalization,
    before shortcut addition and activation; shortcut projections are
    skipped), the final block output, the classifier weight matrix and the
    softmax class probabilities. A session is single-use-at-a-time: calls
    are serialized on an internal lock, so share one instance freely or
    build one per thread for parallel extraction.
    """

    def __init__(self, config: BackboneConfig):
        if config.checkpoint is None:
            raise ModelError("a model checkpoint path is required for extraction")
        try:
            import torch
            from torchvision.models import resnet50
        except ImportError as exc:
            raise ModelError(
                "torch and torchvision are required for feature extraction"
            ) from exc

        self.config = config
        self._torch = torch
        ckpt = Path(config.checkpoint)
        if not ckpt.is_file():
            raise ModelError(f"model checkpoint not found: {ckpt}")
        self.digest = file_digest(ckpt)

        model = resnet50(weights=None)
        try:
            state = torch.load(ckpt, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise ModelError(f"cannot read checkpoint {ckpt}: {exc}") from exc
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        if not isinstance(state, dict):
            raise ModelError("checkpoint does not contain a state dict")
        state = {k.removeprefix("module."): v for k, v in state.items()}
        try:
            model.load_state_dict(state)
        except Exception as exc:
            raise ModelError(f"checkpoint does not fit the model: {exc}") from exc
        model.eval()
        self._model = model

        # Execution order of the residual trunk follows registration order
        # here; shortcut projection layers carry "downsample" in their name.
        norms = [
            m
            for name, m in model.named_modules()
            if isinstance(m, torch.nn.BatchNorm2d) and "downsample" not in name
        ]
        if len(norms) != 49:
            raise ModelError(
                f"expected 49 convolution capture points, found {len(norms)}"
            )
        self._slots: list = [None] * 49
        self._final: list = [None]

        def stash(idx):
            def hook(_mod, _inp, out):
                self._slots[idx] = out.detach()[0].cpu().numpy().astype(np.float32)

            return hook

        for i, mod in enumerate(norms):
            mod.register_forward_hook(stash(i))

        def stash_final(_mod, _inp, out):
            self._final[0] = out.detach()[0].cpu().numpy().astype(np.float32)

        model.layer4.register_forward_hook(stash_final)

        self._weights = (
            model.fc.weight.detach().cpu().numpy().astype(np.float32).T.copy()
        )
        self._lock = threading.Lock()

    def _run(self, img: ImageTensor, h: int, w: int, scale: str):
        arr = img.data
        if img.channels == 1:
            arr = np.repeat(arr, 3, axis=2)
        arr = resize_array(arr, h, w)
        mean = np.asarray(self.config.mean, dtype=np.float64)
        std = np.asarray(self.config.std, dtype=np.float64)
        arr = (arr - mean) / std
        x = self._torch.from_numpy(
            np.ascontiguousarray(arr.transpose(2, 0, 1)[None], dtype=np.float32)
        )
        self._slots = [None] * 49
        self._final = [None]
        with self._torch.inference_mode():
            logits = self._model(x)[0].cpu().numpy().astype(np.float64)
        stacks = tuple(
            FeatureStack(i + 1, data, scale) for i, data in enumerate(self._slots)
        )
        return stacks, self._final[0], logits

    def extract_features(self, img: ImageTensor) -> FeatureBundle:
        cfg = self.config
        wh, ww = working_size(
            img.height, img.width, cfg.working_long_side, cfg.round_multiple
        )
        with self._lock:
            fine, final_act, logits = self._run(img, wh, ww, FINE)
            coarse, _, _ = self._run(img, wh // 2, ww // 2, COARSE)
        shifted = np.exp(logits - logits.max())
        probs = (shifted / shifted.sum()).astype(np.float32)
        cam = ClassActivationInputs(final_act, self._weights, probs)
        return FeatureBundle(fine, coarse, cam, (img.height, img.width))


def encode_features(bundle: FeatureBundle) -> bytes:
    """Serialize a bundle to the DFB1 container.

    Layout: magic ``DFB1``; u32 version; u32 layer_count; u16 scale_count;
    u32 source height and width; per scale (fine then coarse), per layer:
    u32 layer_index, k, h, w plus k*h*w float32 values row-major; then the
    classifier block: u32 k_last, h, w, C, activations, weights (row-major
    by unit), class_probs; finally CRC32 of everything between the magic
    and the checksum. All integers and floats little-endian.
    """
    parts = [
        struct.pack(
            "<IIHII",
            DFB_VERSION,
            bundle.layer_count,
            2,
            bundle.source_size[0],
            bundle.source_size[1],
        )
    ]
    for stacks in (bundle.fine, bundle.coarse):
        for st in stacks:
            parts.append(
                struct.pack("<IIII", st.layer_index, st.k, st.height, st.width)
            )
            parts.append(np.ascontiguousarray(st.data, dtype="<f4").tobytes())
    cam = bundle.cam_inputs
    k_last, h, w = cam.activations.shape
    parts.append(struct.pack("<IIII", k_last, h, w, cam.num_classes))
    parts.append(np.ascontiguousarray(cam.activations, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(cam.weights, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(cam.class_probs, dtype="<f4").tobytes())
    body = b"".join(parts)
    return DFB_MAGIC + body + struct.pack("<I", zlib.crc32(body))


def save_features(bundle: FeatureBundle, path: str | Path) -> None:
    Path(path).write_bytes(encode_features(bundle))


class _Cursor:
    def __init__(self, blob: bytes, start: int, end: int):
        self.blob = blob
        self.pos = start
        self.end = end

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > self.end:
            raise DataError("truncated DFB1 container")
        vals = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return vals

    def floats(self, count: int) -> np.ndarray:
        size = 4 * count
        if self.pos + size > self.end:
            raise DataError("truncated DFB1 container")
        arr = np.frombuffer(self.blob, dtype="<f4", count=count, offset=self.pos)
        self.pos += size
        return arr


def decode_features(blob: bytes) -> FeatureBundle:
    if len(blob) < 4 or blob[:4] != DFB_MAGIC:
        raise DataError("bad magic: not a DFB1 container")
    if len(blob) < 8 + struct.calcsize("<IIHII"):
        raise DataError("truncated DFB1 container")
    stored_crc = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    if zlib.crc32(blob[4:-4]) != stored_crc:
        raise DataError("DFB1 checksum mismatch")

    cur = _Cursor(blob, 4, len(blob) - 4)
    version, layer_count, scale_count, src_h, src_w = cur.unpack("<IIHII")
    if version != DFB_VERSION:
        raise DataError(f"unsupported DFB1 version: {version}")
    if layer_count < 1 or scale_count != 2:
        raise DataError("DFB1 container must hold two scales of >= 1 layer")

    scales = []
    for tag in (FINE, COARSE):
        stacks = []
        for _ in range(layer_count):
            layer_index, k, h, w = cur.unpack("<IIII")
            data = cur.floats(k * h * w).reshape(k, h, w)
            stacks.append(FeatureStack(layer_index, data, tag))
        scales.append(tuple(stacks))

    k_last, h, w, num_classes = cur.unpack("<IIII")
    activations = cur.floats(k_last * h * w).reshape(k_last, h, w)
    weights = cur.floats(k_last * num_classes).reshape(k_last, num_classes)
    probs = cur.floats(num_classes)
    if cur.pos != cur.end:
        raise DataError("DFB1 container has trailing bytes")
    cam = ClassActivationInputs(activations, weights, probs)
    return FeatureBundle(scales[0], scales[1], cam, (src_h, src_w))


def load_features(path: str | Path) -> FeatureBundle:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"cannot read feature container: {path}") from exc
    return decode_features(blob)
