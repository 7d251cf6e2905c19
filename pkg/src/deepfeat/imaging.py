"""Image decoding and shared 2D map primitives.

Every other module works on the two containers defined here: ``ImageTensor``
for decoded images and ``Map2D`` for single-channel float maps. The shared
resampling, normalization and center-prior operations are pure functions so
callers can treat them as fixed plumbing.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

# Map2D normalization states.
RAW = "raw"
UNIT = "unit"
PROBABILITY = "probability"

_PROB_TOL = 1e-6
DFM_MAGIC = b"DFM1"

# Pillow modes decoded as single-channel 16-bit data.
_GRAY16_MODES = {"I;16", "I;16L", "I;16B", "I;16N", "I"}


@dataclass(frozen=True)
class Map2D:
    """Single-channel float map with an explicit normalization state.

    ``state`` is one of ``raw`` (unconstrained finite values), ``unit``
    (all values in [0, 1]) or ``probability`` (nonnegative, sums to 1
    within 1e-6).
    """

    data: np.ndarray
    state: str = RAW

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise DataError("Map2D requires a non-empty 2D array")
        if not np.all(np.isfinite(arr)):
            raise DataError("Map2D values must be finite")
        if self.state == UNIT:
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise DataError("unit-state map has values outside [0, 1]")
        elif self.state == PROBABILITY:
            if arr.min() < 0.0 or abs(float(arr.sum()) - 1.0) > _PROB_TOL:
                raise DataError(
                    "probability-state map must be nonnegative and sum to 1"
                )
        elif self.state != RAW:
            raise DataError(f"unknown map state: {self.state!r}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ImageTensor:
    """Decoded image as an (h, w, c) float grid with values in [0, 1].

    Grayscale sources keep one channel, color sources three.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError("ImageTensor requires a non-empty (h, w, c) array")
        if arr.shape[2] not in (1, 3):
            raise DataError("ImageTensor channels must be 1 or 3")
        if not np.all(np.isfinite(arr)):
            raise DataError("ImageTensor values must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("ImageTensor values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _decode_pil(im: Image.Image) -> ImageTensor:
    if im.width == 0 or im.height == 0:
        raise DataError("zero-dimension image")
    mode = im.mode
    if mode in _GRAY16_MODES:
        arr = np.asarray(im, dtype=np.float64)[:, :, None] / 65535.0
    elif mode in ("L", "1", "LA"):
        arr = np.asarray(im.convert("L"), dtype=np.float64)[:, :, None] / 255.0
    else:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ImageTensor(np.clip(arr, 0.0, 1.0))


def load_image(path: str | Path) -> ImageTensor:
    """Decode a PNG or JPEG file into an ImageTensor scaled to [0, 1].

    8-bit sources are scaled by 1/255, 16-bit by 1/65535.
    """
    try:
        with Image.open(path) as im:
            im.load()
            return _decode_pil(im)
    except FileNotFoundError as exc:
        raise DataError(f"cannot read image file: {path}") from exc
    except UnidentifiedImageError as exc:
        raise DataError(f"unsupported image format: {path}") from exc
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def load_image_bytes(data: bytes) -> ImageTensor:
    """Decode an in-memory PNG or JPEG byte string."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            return _decode_pil(im)
    except UnidentifiedImageError as exc:
        raise DataError("unsupported image format in byte payload") from exc
    except OSError as exc:
        raise DataError(f"cannot decode image bytes: {exc}") from exc


def resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an (h, w) or (h, w, c) array.

    Output pixel centers map to source coordinates through the half-pixel
    rule src = (dst + 0.5) * (in / out) - 0.5, clamped to the valid range.
    Channels are interpolated independently; the result never leaves the
    input value range.
    """
    if out_h < 1 or out_w < 1:
        raise DataError("resize target dimensions must be >= 1")
    a = np.asarray(arr, dtype=np.float64)
    in_h, in_w = a.shape[:2]
    if (out_h, out_w) == (in_h, in_w):
        return a.copy()

    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    np.clip(ys, 0.0, in_h - 1.0, out=ys)
    np.clip(xs, 0.0, in_w - 1.0, out=xs)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = ys - y0
    wx = xs - x0
    if a.ndim == 3:
        wy = wy[:, None, None]
        wx = wx[None, :, None]
    else:
        wy = wy[:, None]
        wx = wx[None, :]

    top = a[y0[:, None], x0[None, :]] * (1.0 - wx) + a[y0[:, None], x1[None, :]] * wx
    bot = a[y1[:, None], x0[None, :]] * (1.0 - wx) + a[y1[:, None], x1[None, :]] * wx
    out = top * (1.0 - wy) + bot * wy
    # Guard the convex-combination range against last-ulp rounding.
    np.clip(out, a.min(), a.max(), out=out)
    return out


def resize_bilinear(m: Map2D | ImageTensor, out_h: int, out_w: int):
    """Resize a map or image with bilinear interpolation.

    Resizing to the input size returns the input unchanged; otherwise a
    Map2D result degrades to raw state.
    """
    if isinstance(m, Map2D):
        if (out_h, out_w) == (m.height, m.width):
            return m
        return Map2D(resize_array(m.data, out_h, out_w), RAW)
    if isinstance(m, ImageTensor):
        if (out_h, out_w) == (m.height, m.width):
            return m
        return ImageTensor(resize_array(m.data, out_h, out_w))
    raise TypeError(f"cannot resize object of type {type(m).__name__}")


def minmax_normalize(m: Map2D) -> Map2D:
    """Rescale a map to [0, 1]; a constant map becomes all zeros.

    A constant map carries no contrast, so its normalized form is the
    neutral all-zero map rather than an error.
    """
    arr = m.data
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        return Map2D(np.zeros_like(arr), UNIT)
    return Map2D((arr - lo) / (hi - lo), UNIT)


def gaussian_center_map(h: int, w: int, sigma_frac: float = 0.25) -> Map2D:
    """Isotropic Gaussian prior peaked at the image center.

    sigma = sigma_frac * max(h, w); the peak value 1 sits at the (possibly
    fractional) center ((h-1)/2, (w-1)/2).
    """
    if h < 1 or w < 1:
        raise DataError("center map dimensions must be >= 1")
    if sigma_frac <= 0.0:
        raise DataError("sigma_frac must be positive")
    sigma = sigma_frac * max(h, w)
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    dy2 = (np.arange(h, dtype=np.float64) - cy) ** 2
    dx2 = (np.arange(w, dtype=np.float64) - cx) ** 2
    g = np.exp(-(dy2[:, None] + dx2[None, :]) / (2.0 * sigma * sigma))
    return Map2D(g, UNIT)


def encode_map_png(m: Map2D) -> bytes:
    """Encode a map as 8-bit grayscale PNG bytes (scaled by 255, rounding
    half-up); non-unit maps are min-max rescaled first."""
    arr = m.data if m.state == UNIT else minmax_normalize(m).data
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def save_map_png(m: Map2D, path: str | Path) -> None:
    Path(path).write_bytes(encode_map_png(m))


def load_map_png(path: str | Path) -> Map2D:
    """Load an 8-bit grayscale PNG as a unit-state map (values / 255)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except FileNotFoundError as exc:
        raise DataError(f"cannot read map file: {path}") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode map {path}: {exc}") from exc
    return Map2D(arr, UNIT)


def encode_map_raw(m: Map2D) -> bytes:
    """Encode a map in the raw container: magic ``DFM1``, u32-LE height and
    width, then height*width float32-LE values row-major."""
    header = DFM_MAGIC + struct.pack("<II", m.height, m.width)
    return header + np.ascontiguousarray(m.data, dtype="<f4").tobytes()


def save_map_raw(m: Map2D, path: str | Path) -> None:
    Path(path).write_bytes(encode_map_raw(m))


def decode_map_raw(blob: bytes) -> Map2D:
    if len(blob) < 12 or blob[:4] != DFM_MAGIC:
        raise DataError("bad magic: not a DFM1 map")
    h, w = struct.unpack_from("<II", blob, 4)
    if h < 1 or w < 1:
        raise DataError("DFM1 map has zero dimension")
    expected = 12 + 4 * h * w
    if len(blob) != expected:
        raise DataError(
            f"truncated DFM1 map: expected {expected} bytes, got {len(blob)}"
        )
    arr = np.frombuffer(blob, dtype="<f4", count=h * w, offset=12)
    return Map2D(arr.astype(np.float64).reshape(h, w), RAW)


def load_map_raw(path: str | Path) -> Map2D:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"cannot read map file: {path}") from exc
    return decode_map_raw(blob)
