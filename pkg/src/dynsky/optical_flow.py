"""Dense optical flow between sky frames.

The estimator is Farnebäck's two-frame method: every pixel's neighbourhood is
fitted with a quadratic polynomial by normalized convolution, and displacement
follows from how the polynomial coefficients change between frames, refined
coarse-to-fine over an image pyramid. Pixels outside the fisheye disc get zero
certainty so they never enter the fits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .sky_image import CloudMask, SkyImage, disc_validity

MAG_EPS = 1e-6


@dataclass(frozen=True)
class FlowField:
    """Per-pixel ``(du, dv)`` displacement in pixels per step, shape ``(H, W, 2)``."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2:
            raise ValueError(f"flow must have shape (H, W, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("flow contains non-finite vectors")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)

    @classmethod
    def zeros(cls, size: int) -> "FlowField":
        return cls(np.zeros((size, size, 2)))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FlowField":
        """Wrap ``arr`` after zeroing pixels outside the inscribed disc."""
        arr = np.array(arr, dtype=np.float64)
        arr[~disc_validity(arr.shape[0])] = 0.0
        return cls(arr)

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vectors[..., 0], self.vectors[..., 1])

    def __neg__(self) -> "FlowField":
        return FlowField(-self.vectors)


@dataclass(frozen=True)
class EncodedFlow:
    """Flow as ``(sin θ, cos θ, magnitude)`` channels, shape ``(H, W, 3)``."""

    channels: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.channels, dtype=np.float64)
        if c.ndim != 3 or c.shape[2] != 3:
            raise ValueError(f"encoded flow must have shape (H, W, 3), got {c.shape}")
        c = c.copy()
        c.flags.writeable = False
        object.__setattr__(self, "channels", c)

    @property
    def width(self) -> int:
        return self.channels.shape[1]

    @property
    def height(self) -> int:
        return self.channels.shape[0]


@dataclass(frozen=True)
class FarnebackParams:
    levels: int = 4
    pyr_scale: float = 0.5
    winsize: int = 15
    poly_n: int = 5
    poly_sigma: float = 1.1
    iterations: int = 3

    def __post_init__(self):
        if not 0.0 < self.pyr_scale < 1.0:
            raise ValueError("pyr_scale must lie in (0, 1)")
        for name in ("levels", "winsize", "poly_n", "iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.winsize % 2 == 0:
            raise ValueError("winsize must be odd")
        if self.poly_sigma <= 0:
            raise ValueError("poly_sigma must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "FarnebackParams":
        return cls(**d)


# --- polynomial expansion ---------------------------------------------------

# (i, j) exponents of x and y for the basis 1, x, y, x^2, y^2, xy.
_BASIS = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]


def _poly_kernels(n: int, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    x = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return x, g


def _moment(img: np.ndarray, x: np.ndarray, g: np.ndarray, i: int, j: int) -> np.ndarray:
    out = ndimage.correlate1d(img, g * x**i, axis=1, mode="reflect")
    return ndimage.correlate1d(out, g * x**j, axis=0, mode="reflect")


def poly_expand(
    img: np.ndarray, certainty: np.ndarray, n: int, sigma: float
) -> np.ndarray:
    """Weighted least-squares quadratic fit around every pixel.

    Returns ``(H, W, 5)`` coefficients ``(b_x, b_y, a_xx, a_yy, a_xy)`` of
    ``f(p + o) ~ c + b.o + a_xx o_x^2 + a_yy o_y^2 + a_xy o_x o_y``. Pixels
    whose neighbourhood has too little certainty to pin down the fit get zeros.
    """
    x, g = _poly_kernels(n, sigma)
    h, w = img.shape
    cert = certainty.astype(np.float64)
    moments = {}
    for i in range(5):
        for j in range(5 - i):
            moments[i, j] = _moment(cert, x, g, i, j)
    rhs = np.stack([_moment(cert * img, x, g, i, j) for i, j in _BASIS], axis=-1)

    G0 = np.empty((6, 6))
    full_g = {}
    for (i, j), _ in moments.items():
        full_g[i, j] = (g * x**i).sum() * (g * x**j).sum()
    for k, (ik, jk) in enumerate(_BASIS):
        for m, (im, jm) in enumerate(_BASIS):
            G0[k, m] = full_g[ik + im, jk + jm]
    G0_inv = np.linalg.inv(G0)

    coeffs = rhs @ G0_inv.T
    # Neighbourhoods touching zero certainty need their own solve.
    full = ndimage.minimum_filter(cert, size=2 * n + 1, mode="reflect") >= 1.0
    partial = ~full & (ndimage.maximum_filter(cert, size=2 * n + 1, mode="reflect") > 0)
    if partial.any():
        idx = np.nonzero(partial)
        G = np.empty((len(idx[0]), 6, 6))
        for k, (ik, jk) in enumerate(_BASIS):
            for m, (im, jm) in enumerate(_BASIS):
                G[:, k, m] = moments[ik + im, jk + jm][idx]
        b = rhs[idx]
        scale = np.maximum(G[:, 0, 0], 1e-12)
        ridge = 1e-12 * scale[:, None, None] * np.eye(6)
        coeffs[idx] = np.linalg.solve(G + ridge, b[..., None])[..., 0]
        # Too little support for a stable fit.
        weak = G[:, 0, 0] < 0.25 * G0[0, 0]
        sub = coeffs[idx]
        sub[weak] = 0.0
        coeffs[idx] = sub
    coeffs[~(full | partial)] = 0.0
    return coeffs[..., 1:]


# --- displacement estimation ------------------------------------------------


def _bilinear(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``arr`` (H, W[, C]) at pixel-index coordinates with edge clamping."""
    h, w = arr.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2) if w > 1 else np.zeros_like(xs, dtype=np.intp)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2) if h > 1 else np.zeros_like(ys, dtype=np.intp)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if arr.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = arr[y0, x0] * (1 - fx) + arr[y0, x1] * fx
    bot = arr[y1, x0] * (1 - fx) + arr[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _update_matrices(R0, R1, flow, cert0, cert1):
    h, w = flow.shape[:2]
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = gx + flow[..., 0]
    ys = gy + flow[..., 1]
    r1 = _bilinear(R1, xs, ys)
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    wgt = cert0 * _bilinear(cert1, xs, ys) * inside

    axx = 0.5 * (R0[..., 2] + r1[..., 2])
    ayy = 0.5 * (R0[..., 3] + r1[..., 3])
    axy = 0.25 * (R0[..., 4] + r1[..., 4])
    bx = 0.5 * (R0[..., 0] - r1[..., 0]) + axx * flow[..., 0] + axy * flow[..., 1]
    by = 0.5 * (R0[..., 1] - r1[..., 1]) + axy * flow[..., 0] + ayy * flow[..., 1]

    M = np.empty((h, w, 5))
    M[..., 0] = axx * axx + axy * axy
    M[..., 1] = (axx + ayy) * axy
    M[..., 2] = ayy * ayy + axy * axy
    M[..., 3] = axx * bx + axy * by
    M[..., 4] = axy * bx + ayy * by
    return M * wgt[..., None]


def _solve_flow(M: np.ndarray, winsize: int) -> np.ndarray:
    Mb = ndimage.uniform_filter(M, size=(winsize, winsize, 1), mode="reflect")
    g11, g12, g22, h1, h2 = (Mb[..., k] for k in range(5))
    idet = 1.0 / (g11 * g22 - g12 * g12 + 1e-3)
    flow = np.empty(M.shape[:2] + (2,))
    flow[..., 0] = (g22 * h1 - g12 * h2) * idet
    flow[..., 1] = (g11 * h2 - g12 * h1) * idet
    return flow


def _resize(arr: np.ndarray, size: int) -> np.ndarray:
    h = arr.shape[0]
    if h == size:
        return arr
    factor = size / h
    # Sample centers of the target grid in source pixel-index coordinates.
    c = (np.arange(size) + 0.5) / factor - 0.5
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return _bilinear(arr, xs, ys)


def _luma(img: SkyImage) -> np.ndarray:
    # Working in 0..255 keeps the solver's fixed regularizer well scaled.
    return img.luminance() * 255.0


def farneback_flow(a: SkyImage, b: SkyImage, params: FarnebackParams | None = None) -> FlowField:
    """Estimate the dense displacement carrying ``a`` onto ``b``."""
    params = params or FarnebackParams()
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(
            f"frame size mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    return FlowField.from_array(
        farneback_dense(_luma(a), _luma(b), a.valid.astype(np.float64), b.valid.astype(np.float64), params)
    )


def farneback_dense(
    f0: np.ndarray,
    f1: np.ndarray,
    cert0: np.ndarray,
    cert1: np.ndarray,
    params: FarnebackParams,
) -> np.ndarray:
    """Coarse-to-fine Farnebäck flow on single-channel arrays with certainty maps."""
    size = f0.shape[0]
    flow = None
    for k in range(params.levels - 1, -1, -1):
        scale = params.pyr_scale**k
        lsize = int(round(size * scale))
        if lsize < 2 * params.poly_n + 1:
            continue
        if k == 0:
            g0, g1, c0, c1 = f0, f1, cert0, cert1
        else:
            sigma = (1.0 / scale - 1.0) * 0.5
            g0 = _resize(ndimage.gaussian_filter(f0, sigma, mode="reflect"), lsize)
            g1 = _resize(ndimage.gaussian_filter(f1, sigma, mode="reflect"), lsize)
            c0 = (_resize(cert0, lsize) >= 0.999).astype(np.float64)
            c1 = (_resize(cert1, lsize) >= 0.999).astype(np.float64)
        if flow is None:
            flow = np.zeros((lsize, lsize, 2))
        else:
            prev = flow.shape[0]
            flow = _resize(flow, lsize) * (lsize / prev)
        R0 = poly_expand(g0, c0, params.poly_n, params.poly_sigma)
        R1 = poly_expand(g1, c1, params.poly_n, params.poly_sigma)
        for _ in range(params.iterations):
            M = _update_matrices(R0, R1, flow, c0, c1)
            flow = _solve_flow(M, params.winsize)
    if flow is None:
        flow = np.zeros((size, size, 2))
    return flow * (cert0 > 0)[..., None]


# --- masking and encoding ---------------------------------------------------


def mask_flow(flow: FlowField, mask: CloudMask) -> FlowField:
    if mask.bits.shape != flow.vectors.shape[:2]:
        raise ValueError("flow and mask dimensions differ")
    return FlowField(flow.vectors * mask.bits[..., None])


def encode_flow(flow: FlowField) -> EncodedFlow:
    du = flow.vectors[..., 0]
    dv = flow.vectors[..., 1]
    m = np.hypot(du, dv)
    moving = m > MAG_EPS
    theta = np.arctan2(dv, du)
    s = np.where(moving, np.sin(theta), 0.0)
    c = np.where(moving, np.cos(theta), 1.0)
    return EncodedFlow(np.stack([s, c, m], axis=-1))


def decode_flow(enc: EncodedFlow) -> FlowField:
    s = enc.channels[..., 0]
    c = enc.channels[..., 1]
    m = np.maximum(enc.channels[..., 2], 0.0)
    norm = np.hypot(s, c)
    ok = norm > 0
    safe = np.where(ok, norm, 1.0)
    cos_t = np.where(ok, c / safe, 1.0)
    sin_t = np.where(ok, s / safe, 0.0)
    return FlowField(np.stack([m * cos_t, m * sin_t], axis=-1))


def flow_magnitude_histogram(
    flow: FlowField, edges, mask: CloudMask | np.ndarray | None = None
) -> np.ndarray:
    """Normalized histogram of flow magnitudes over the selected pixels.

    ``edges`` define half-open bins ``[e_i, e_{i+1})``; magnitudes past the
    last edge land in the last bin, so the result always sums to one. Without
    a mask all in-disc pixels are counted.
    """
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be a strictly increasing sequence of length >= 2")
    if edges[0] >= 1.0:
        raise ValueError("first bin edge must lie below one pixel")
    if mask is None:
        sel = disc_validity(flow.width)
    else:
        sel = mask.bits if isinstance(mask, CloudMask) else np.asarray(mask, dtype=bool)
        if sel.shape != flow.vectors.shape[:2]:
            raise ValueError("mask and flow dimensions differ")
    mags = flow.magnitude()[sel]
    if mags.size == 0:
        raise ValueError("histogram mask selects no pixels")
    nbins = len(edges) - 1
    idx = np.clip(np.searchsorted(edges, mags, side="right") - 1, 0, nbins - 1)
    counts = np.bincount(idx, minlength=nbins).astype(np.float64)
    return counts / counts.sum()


# --- file format ------------------------------------------------------------

_FLOW_MAGIC = b"SKFL"
_ENC_MAGIC = b"SKF3"


def _write_grid(path, magic: bytes, data: np.ndarray) -> None:
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_grid(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    w, h = struct.unpack("<II", raw[4:12])
    expected = w * h * channels * 4
    if len(raw) - 12 != expected:
        raise ValueError(f"{path}: payload is {len(raw) - 12} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, channels).astype(np.float64)


def write_flow(path, flow: FlowField) -> None:
    _write_grid(path, _FLOW_MAGIC, flow.vectors)


def read_flow(path) -> FlowField:
    return FlowField(_read_grid(path, _FLOW_MAGIC, 2))


def write_encoded_flow(path, enc: EncodedFlow) -> None:
    _write_grid(path, _ENC_MAGIC, enc.channels)


def read_encoded_flow(path) -> EncodedFlow:
    return EncodedFlow(_read_grid(path, _ENC_MAGIC, 3))
