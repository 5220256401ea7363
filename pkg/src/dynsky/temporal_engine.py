"""Multi-timescale sequence synthesis.

Keyframes one step apart come from the neural predictor applied recursively.
Between two keyframes the sky is filled in deterministically: the first
keyframe advected a third of the way forward, the second advected a third of
the way back, and straight blends linking keyframes and anchors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .optical_flow import (
    EncodedFlow,
    FarnebackParams,
    FlowField,
    farneback_flow,
    mask_flow,
)
from .sky_image import (
    DEFAULT_CLOUD_THRESHOLD,
    CloudMask,
    SkyImage,
    ToneCurve,
    compute_cloud_mask,
)
from .sphere_map import FisheyeProjection, displace_on_sphere


@dataclass(frozen=True)
class SequenceConfig:
    dt: float = 10.0
    keyframes: int = 1
    substeps: int = 30
    projection: FisheyeProjection | None = None
    tone_curve: ToneCurve = field(default_factory=ToneCurve)
    peak: float = 1.0
    farneback: FarnebackParams = field(default_factory=FarnebackParams)
    cloud_threshold: float = DEFAULT_CLOUD_THRESHOLD
    inpaint_iterations: int = 50

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.keyframes < 1:
            raise ValueError("keyframes must be >= 1")
        if self.substeps < 3 or self.substeps % 3:
            raise ValueError(f"substeps must be a positive multiple of 3, got {self.substeps}")
        if self.peak <= 0:
            raise ValueError("peak must be positive")

    @property
    def frame_count(self) -> int:
        return self.keyframes * self.substeps + 1


@dataclass(frozen=True)
class KeyframePair:
    a: SkyImage
    b: SkyImage
    flow: FlowField
    index: int = 0

    def __post_init__(self):
        if self.a.pixels.shape != self.b.pixels.shape:
            raise ValueError("keyframes differ in resolution")
        if self.flow.vectors.shape[:2] != self.a.pixels.shape[:2]:
            raise ValueError("flow resolution differs from keyframes")


# --- medium timescale -------------------------------------------------------


def xi_step(flownet, cloudnet, img: SkyImage) -> tuple[SkyImage, EncodedFlow]:
    """One medium-timescale step: CloudNet applied to the image and FlowNet's flow."""
    from .neural_predictor import cloudnet_infer, flownet_infer

    enc = flownet_infer(flownet, img)
    return cloudnet_infer(cloudnet, img, enc), enc


# --- short timescale --------------------------------------------------------


def _sample(pixels: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous ``(u, v)`` coordinates; zero beyond the raster."""
    h, w = pixels.shape[:2]
    x = coords[..., 0] - 0.5
    y = coords[..., 1] - 0.5
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    out = np.zeros(coords.shape[:-1] + (pixels.shape[2],))
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = pixels[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += np.where(inside[..., None], wx * wy * vals, 0.0)
    return out


def _pixel_centers(n: int) -> np.ndarray:
    c = np.arange(n) + 0.5
    u, v = np.meshgrid(c, c)
    return np.stack([u, v], axis=-1)


def advect(
    img: SkyImage, flow: FlowField, fraction: float, proj: FisheyeProjection | None = None
) -> SkyImage:
    """Carry image content a ``fraction`` of the way along ``flow``.

    Backward warp: each output pixel reads the source at the point reached by
    stepping the negated local flow along a great arc, with bilinear filtering.
    """
    if flow.vectors.shape[:2] != img.pixels.shape[:2]:
        raise ValueError("flow and image resolutions differ")
    if fraction == 0.0 or not np.any(flow.vectors):
        return img
    proj = proj or FisheyeProjection(img.width)
    q = _pixel_centers(img.width)
    valid = img.valid
    src = q.copy()
    src[valid], _ = displace_on_sphere(q[valid], -flow.vectors[valid], fraction, proj)
    out = _sample(img.pixels, src)
    out[~valid] = 0.0
    return SkyImage(np.clip(out, 0.0, 1.0), valid)


def interpolate(a: SkyImage, b: SkyImage, w: float) -> SkyImage:
    """Per-pixel ``(1 - w) a + w b``."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError("images differ in resolution")
    if w == 0.0:
        return a
    if w == 1.0:
        return b
    # a + w (b - a) returns a bit-exactly wherever the two frames agree.
    out = a.pixels + w * (b.pixels - a.pixels)
    return SkyImage(np.clip(out, 0.0, 1.0), a.valid)


def anchors(pair: KeyframePair, proj: FisheyeProjection | None = None) -> tuple[SkyImage, SkyImage]:
    """Frames at one and two thirds of the step."""
    first = advect(pair.a, pair.flow, 1.0 / 3.0, proj)
    second = advect(pair.b, -pair.flow, 1.0 / 3.0, proj)
    return first, second


def gamma(
    pair: KeyframePair,
    t: float,
    dt: float = 10.0,
    proj: FisheyeProjection | None = None,
    _anchors: tuple[SkyImage, SkyImage] | None = None,
) -> SkyImage:
    """Sky at time ``t`` in ``(0, dt)`` after keyframe ``pair.a``."""
    if not 0.0 < t < dt:
        raise ValueError(f"t={t} outside the open interval (0, {dt})")
    third = dt / 3.0
    tol = 1e-12 * dt
    first, second = _anchors if _anchors is not None else anchors(pair, proj)
    if abs(t - third) <= tol:
        return first
    if abs(t - 2 * third) <= tol:
        return second
    if t < third:
        return interpolate(pair.a, first, t / third)
    if t < 2 * third:
        return interpolate(first, second, (t - third) / third)
    return interpolate(second, pair.b, (t - 2 * third) / third)


def inpaint_flow(
    flow: FlowField, mask: CloudMask, iterations: int = 50, still: float = 0.05
) -> FlowField:
    """Spread motion into cloud pixels whose estimated flow is (near) zero.

    Homogeneous cloud interiors give the estimator nothing to track; each
    iteration replaces such pixels by the mean of their in-cloud 3x3
    neighbourhood while pixels with measurable motion stay fixed.
    """
    if iterations <= 0:
        return flow
    m = mask.bits.astype(np.float64)
    vec = flow.vectors * m[..., None]
    known = mask.bits & (np.hypot(vec[..., 0], vec[..., 1]) > still)
    fill = mask.bits & ~known
    if not known.any() or not fill.any():
        return FlowField(vec)
    den = ndimage.uniform_filter(m, size=3, mode="constant")
    den = np.where(den > 0, den, 1.0)
    for _ in range(iterations):
        for c in range(2):
            num = ndimage.uniform_filter(vec[..., c] * m, size=3, mode="constant")
            vec[..., c] = np.where(fill, num / den, vec[..., c])
    return FlowField(vec)


def keyframe_flow(a: SkyImage, b: SkyImage, cfg: SequenceConfig) -> FlowField:
    """Re-estimated, cloud-masked and inpainted flow between two keyframes."""
    mask = compute_cloud_mask(a, cfg.cloud_threshold)
    flow = mask_flow(farneback_flow(a, b, cfg.farneback), mask)
    return inpaint_flow(flow, mask, cfg.inpaint_iterations)


# --- dispatcher -------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    index: int
    time: float
    kind: str  # keyframe | anchor | blend
    image: SkyImage


def substep_frames(
    pair: KeyframePair, cfg: SequenceConfig, start_index: int, start_time: float
) -> list[Frame]:
    """The ``substeps - 1`` frames strictly between the keyframes of ``pair``."""
    proj = cfg.projection or FisheyeProjection(pair.a.width)
    anc = anchors(pair, proj)
    s = cfg.substeps
    frames = []
    for j in range(1, s):
        if 3 * j == s:
            kind, img = "anchor", anc[0]
        elif 3 * j == 2 * s:
            kind, img = "anchor", anc[1]
        else:
            kind = "blend"
            img = gamma(pair, j * cfg.dt / s, cfg.dt, proj, _anchors=anc)
        frames.append(Frame(start_index + j, start_time + j * cfg.dt / s, kind, img))
    return frames


def synthesize_sequence(input_image: SkyImage, flownet, cloudnet, cfg: SequenceConfig) -> list[Frame]:
    """All frames from ``input_image`` through ``cfg.keyframes`` predicted steps."""
    frames = [Frame(0, 0.0, "keyframe", input_image)]
    current = input_image
    for i in range(cfg.keyframes):
        base = i * cfg.substeps
        try:
            nxt, _ = xi_step(flownet, cloudnet, current)
            pair = KeyframePair(current, nxt, keyframe_flow(current, nxt, cfg), i)
            frames.extend(substep_frames(pair, cfg, base, i * cfg.dt))
        except Exception as exc:
            raise RuntimeError(f"frame {base + 1}..{base + cfg.substeps}: {exc}") from exc
        frames.append(Frame(base + cfg.substeps, (i + 1) * cfg.dt, "keyframe", nxt))
        current = nxt
    return frames
