"""Image buffers, masks, PNG/PNM I/O and seeded random substreams."""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CorruptHeader, DimensionMismatch, IoFailure, NotFound, UnsupportedFormat

_SUPPORTED = {".png", ".pgm", ".ppm", ".pnm"}
_MODES = {1: "L", 3: "RGB"}


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """8-bit raster stored as a read-only ``(height, width, channels)`` array."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W[, 1|3]) array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255):
                raise ValueError("pixel values must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.ascontiguousarray(arr)
        if arr is self.pixels:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @classmethod
    def from_flat(cls, width, height, channels, data):
        arr = np.asarray(data, dtype=np.int64)
        if arr.size != width * height * channels:
            raise ValueError("data length must equal width * height * channels")
        return cls(arr.reshape(height, width, channels))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def data(self):
        """Row-major flat view of the pixel intensities."""
        return self.pixels.reshape(-1)

    def gray(self):
        """Pixels of a 1-channel image as a 2-D array."""
        return self.pixels[:, :, 0]

    def float(self):
        return self.pixels.astype(np.float64)

    def to_png_bytes(self):
        buf = io.BytesIO()
        _to_pil(self).save(buf, format="PNG")
        return buf.getvalue()

    @classmethod
    def from_png_bytes(cls, blob, origin="<bytes>"):
        return _decode(io.BytesIO(blob), origin)

    def sha256(self):
        h = hashlib.sha256()
        h.update(np.array(self.pixels.shape, dtype="<i8").tobytes())
        h.update(self.pixels.tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash(self.sha256())

    def __repr__(self):
        return f"ImageBuffer({self.width}x{self.height}x{self.channels})"


@dataclass(frozen=True, eq=False)
class DefectMask:
    """Binary defect raster; ``bits[y, x]`` is True on synthesized defect pixels."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.bits) != 0)
        if arr.ndim != 2:
            raise ValueError("mask must be 2-D")
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    @classmethod
    def empty(cls, height, width):
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def shape(self):
        return self.bits.shape

    @property
    def area(self):
        return int(self.bits.sum())

    def is_empty(self):
        return not self.bits.any()

    def check_matches(self, img):
        if self.shape != img.shape:
            raise DimensionMismatch(f"mask {self.shape} does not match image {img.shape}")

    def to_image(self):
        return ImageBuffer(self.bits.astype(np.uint8) * 255)

    @classmethod
    def from_image(cls, img):
        return cls(img.pixels[:, :, 0] > 127)

    def __eq__(self, other):
        if not isinstance(other, DefectMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"DefectMask({self.width}x{self.height}, area={self.area})"


def _to_pil(img):
    if img.channels == 1:
        return Image.fromarray(img.gray(), mode="L")
    return Image.fromarray(img.pixels, mode="RGB")


def _decode(fp, origin):
    try:
        with Image.open(fp) as im:
            im.load()
            if im.mode in ("L", "RGB"):
                arr = np.asarray(im, dtype=np.uint8)
            elif im.mode in ("1", "P", "LA", "RGBA", "I;16", "I", "F"):
                raise UnsupportedFormat(origin, f"pixel mode {im.mode} is not 8-bit gray/RGB")
            else:
                raise UnsupportedFormat(origin, f"pixel mode {im.mode}")
    except UnidentifiedImageError as exc:
        raise CorruptHeader(origin, "unrecognised or damaged image header") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptHeader(origin, str(exc)) from exc
    return ImageBuffer(arr)


def load_image(path):
    path = Path(path)
    if not path.is_file():
        raise NotFound(path)
    if path.suffix.lower() not in _SUPPORTED:
        raise UnsupportedFormat(path, f"extension {path.suffix!r}")
    with path.open("rb") as fh:
        blob = fh.read()
    return _decode(io.BytesIO(blob), path)


def save_image(img, path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in _SUPPORTED:
        raise UnsupportedFormat(path, f"extension {path.suffix!r}")
    if not path.parent.is_dir():
        raise IoFailure(path, "parent directory does not exist")
    if suffix == ".png":
        blob = img.to_png_bytes()
    else:
        buf = io.BytesIO()
        _to_pil(img).save(buf, format="PPM")
        blob = buf.getvalue()
    try:
        path.write_bytes(blob)
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc


def to_grayscale(img):
    if img.channels == 1:
        return img
    rgb = img.float()
    lum = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    # round half away from zero; all values are non-negative
    return ImageBuffer(np.clip(np.floor(lum + 0.5), 0, 255).astype(np.uint8))


def file_sha256(path):
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- random substreams -------------------------------------------------------

def _encode_key(key):
    if isinstance(key, (bool, np.bool_)):
        raise TypeError("boolean substream keys are ambiguous")
    if isinstance(key, (int, np.integer)):
        return b"i" + str(int(key)).encode("ascii")
    if isinstance(key, str):
        return b"s" + key.encode("utf-8")
    raise TypeError(f"unsupported substream key type {type(key).__name__}")


def substream(seed, *keys):
    """Philox generator keyed by ``(seed, *keys)``.

    Keys are ints or strings, e.g. ``substream(7, "eval", 3)``; the stream is
    stable across platforms and independent of call order.
    """
    h = hashlib.blake2b(digest_size=16)
    for part in (seed, *keys):
        enc = _encode_key(part)
        h.update(len(enc).to_bytes(4, "little"))
        h.update(enc)
    entropy = int.from_bytes(h.digest(), "little")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed, *keys):
    """63-bit integer seed for ``(seed, *keys)``; recorded in manifests."""
    return int(substream(seed, *keys).integers(0, 2**63 - 1))
