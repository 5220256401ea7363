"""Hemispherical sky rasters, cloud masks and dynamic-range curves.

Images are square fisheye frames stored as ``(H, W, 3)`` float64 arrays in
linear [0, 1]. Only pixels whose centers fall inside the inscribed disc are
valid; everything else is held at exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DEFAULT_CLOUD_THRESHOLD = 0.46


def disc_validity(width: int) -> np.ndarray:
    """Boolean ``(width, width)`` flags, True where the pixel center lies in the inscribed disc."""
    if width <= 0:
        raise ValueError(f"width must be positive, got {width}")
    centers = np.arange(width) + 0.5
    r = width / 2.0
    du = centers[None, :] - r
    dv = centers[:, None] - r
    return du * du + dv * dv <= r * r


@dataclass(frozen=True, eq=False)
class SkyImage:
    pixels: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        h, w = px.shape[:2]
        if h != w:
            raise ValueError(f"sky images must be square, got {w}x{h}")
        valid = disc_validity(w) if self.valid is None else np.asarray(self.valid, dtype=bool)
        if valid.shape != (h, w):
            raise ValueError("validity flags do not match image size")
        if not np.all(np.isfinite(px)):
            raise ValueError("sky image contains non-finite pixels")
        if np.any(px[~valid] != 0.0):
            raise ValueError("invalid (outside-disc) pixels must be zero")
        inside = px[valid]
        if inside.size and (inside.min() < 0.0 or inside.max() > 1.0):
            raise ValueError("valid pixel channels must lie in [0, 1]")
        px = px.copy()
        px.flags.writeable = False
        valid = valid.copy()
        valid.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "SkyImage":
        """Clip to [0, 1] and zero the outside of the disc, then wrap."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"expected square (H, W, 3) array, got shape {arr.shape}")
        valid = disc_validity(arr.shape[0])
        out = np.clip(np.nan_to_num(arr, nan=0.0), 0.0, 1.0)
        out[~valid] = 0.0
        return cls(out, valid)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def luminance(self) -> np.ndarray:
        p = self.pixels
        return 0.299 * p[..., 0] + 0.587 * p[..., 1] + 0.114 * p[..., 2]

    def __eq__(self, other):
        if not isinstance(other, SkyImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class CloudMask:
    bits: np.ndarray

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


def compute_cloud_mask(img: SkyImage, threshold: float = DEFAULT_CLOUD_THRESHOLD) -> CloudMask:
    """Classify valid pixels as cloud where red/blue exceeds ``threshold``.

    A zero blue channel counts as an infinite ratio when red is positive and
    as zero when red is also zero.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    r = img.pixels[..., 0]
    b = img.pixels[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(b > 0, r / np.where(b > 0, b, 1.0), np.where(r > 0, np.inf, 0.0))
    bits = (ratio > threshold) & img.valid
    bits.flags.writeable = False
    return CloudMask(bits)


@dataclass(frozen=True)
class ToneCurve:
    """Monotone bijection between normalized HDR values and [0, 1] display values.

    ``kind`` is one of ``identity``, ``gamma`` (``exponent``) or
    ``exponential`` (``scale``): forward ``log1p(k x) / log1p(k)``.
    """

    kind: str = "identity"
    exponent: float = 2.2
    scale: float = 10.0

    def __post_init__(self):
        if self.kind not in ("identity", "gamma", "exponential"):
            raise ValueError(f"unknown tone curve kind {self.kind!r}")
        if self.kind == "gamma" and self.exponent <= 0:
            raise ValueError("gamma exponent must be positive")
        if self.kind == "exponential" and self.scale <= 0:
            raise ValueError("exponential scale must be positive")

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "gamma":
            return np.power(x, 1.0 / self.exponent)
        if self.kind == "exponential":
            return np.log1p(self.scale * x) / math.log1p(self.scale)
        return x.copy()

    def inverse(self, y):
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "gamma":
            return np.power(y, self.exponent)
        if self.kind == "exponential":
            return np.expm1(y * math.log1p(self.scale)) / self.scale
        return y.copy()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "exponent": self.exponent, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "ToneCurve":
        return cls(**d)


def normalize_hdr(raw: np.ndarray, curve: ToneCurve, peak: float | None = None) -> SkyImage:
    """Map an HDR raster into a [0, 1] ``SkyImage``.

    Values are divided by ``peak`` (the raster maximum over the disc when not
    given), clipped, then passed through the curve's forward map.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[2] != 3 or raw.shape[0] != raw.shape[1]:
        raise ValueError(f"expected square (H, W, 3) HDR raster, got shape {raw.shape}")
    bad = ~np.isfinite(raw)
    if bad.any():
        v, u, c = np.argwhere(bad)[0]
        raise ValueError(f"non-finite HDR value at row {v}, col {u}, channel {c}")
    if (raw < 0).any():
        v, u, c = np.argwhere(raw < 0)[0]
        raise ValueError(f"negative HDR value {raw[v, u, c]} at row {v}, col {u}, channel {c}")
    valid = disc_validity(raw.shape[0])
    if peak is None:
        inside = raw[valid]
        peak = float(inside.max()) if inside.size else 1.0
        if peak == 0.0:
            peak = 1.0
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    out = curve.forward(np.clip(raw / peak, 0.0, 1.0))
    out = np.clip(out, 0.0, 1.0)
    out[~valid] = 0.0
    return SkyImage(out, valid)


def expand_ldr(img: SkyImage, curve: ToneCurve, peak: float) -> np.ndarray:
    """Inverse of :func:`normalize_hdr`; a display value of 1 maps to ``peak``."""
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    out = curve.inverse(img.pixels) * peak
    out[~img.valid] = 0.0
    return out


# --- file formats -----------------------------------------------------------


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, x * 12.92, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def load_png(path: str | Path) -> SkyImage:
    """Load an 8-bit PNG, decoding sRGB to linear [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return SkyImage.from_array(srgb_to_linear(arr))


def save_png(img: SkyImage, path: str | Path) -> None:
    enc = np.round(linear_to_srgb(img.pixels) * 255.0).astype(np.uint8)
    Image.fromarray(enc, mode="RGB").save(path, format="PNG")


def save_mask_png(mask: CloudMask, path: str | Path) -> None:
    Image.fromarray(mask.bits.astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_mask_png(path: str | Path) -> CloudMask:
    with Image.open(path) as im:
        bits = np.asarray(im.convert("L")) > 127
    return CloudMask(bits)


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a little-endian colour PFM (rows stored bottom-to-top)."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError("PFM writer expects (H, W, 3) data")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        channels = 3 if header == b"PF" else 1
        w, h = (int(t) for t in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * channels)
    data = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
    return data[::-1].astype(np.float64)
