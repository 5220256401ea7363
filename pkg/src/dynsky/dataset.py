"""Timelapse sky sequences: loading, splitting, training pairs and synthetic scenes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .optical_flow import (
    EncodedFlow,
    FarnebackParams,
    FlowField,
    encode_flow,
    farneback_flow,
    mask_flow,
)
from .sky_image import (
    DEFAULT_CLOUD_THRESHOLD,
    SkyImage,
    compute_cloud_mask,
    disc_validity,
    load_png,
)


@dataclass
class CaptureSequence:
    frames: list[SkyImage]
    interval: float = 10.0
    device: str = "unknown"
    location: str = "unknown"

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError(f"a capture sequence needs at least 2 frames, got {len(self.frames)}")
        size = self.frames[0].pixels.shape
        for i, f in enumerate(self.frames):
            if f.pixels.shape != size:
                raise ValueError(f"frame {i} has shape {f.pixels.shape}, expected {size}")
        if self.interval <= 0:
            raise ValueError("interval must be positive")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def resolution(self) -> int:
        return self.frames[0].width


def load_sequence(directory: str | Path, interval: float | None = None) -> CaptureSequence:
    """Load ``frames/*.png`` (or ``*.png`` directly) in lexicographic order.

    ``sequence.json`` next to the frames supplies interval, device and
    location; an explicit ``interval`` argument wins.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"sequence directory {directory} does not exist")
    frame_dir = directory / "frames" if (directory / "frames").is_dir() else directory
    paths = sorted(frame_dir.glob("*.png"))
    if not paths:
        raise ValueError(f"no PNG frames found in {frame_dir}")
    meta = {}
    if (directory / "sequence.json").is_file():
        meta = json.loads((directory / "sequence.json").read_text())
    frames = []
    for p in paths:
        try:
            img = load_png(p)
        except Exception as exc:  # PIL raises a zoo of types
            raise ValueError(f"cannot read frame {p.name}: {exc}") from exc
        if frames and img.pixels.shape != frames[0].pixels.shape:
            raise ValueError(
                f"frame {p.name} is {img.width}x{img.height}, expected "
                f"{frames[0].width}x{frames[0].height}"
            )
        frames.append(img)
    if len(frames) < 2:
        raise ValueError(f"{frame_dir} holds only {len(frames)} frame(s); need at least 2")
    return CaptureSequence(
        frames,
        interval=float(interval if interval is not None else meta.get("interval", 10.0)),
        device=meta.get("device", "unknown"),
        location=meta.get("location", "unknown"),
    )


def split_train_test(seq: CaptureSequence, train_fraction: float = 0.8):
    """Contiguous temporal split: the first ``round(f N)`` frames train, the rest test."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train fraction must lie in (0, 1)")
    n = len(seq)
    # Half-up rounding; 3626 frames at 0.8 give 2901/725.
    n_train = math.floor(train_fraction * n + 0.5)
    n_test = n - n_train
    if n_train < 2 or n_test < 2:
        raise ValueError(f"split of {n} frames at {train_fraction} leaves {n_train}/{n_test} frames")
    meta = dict(interval=seq.interval, device=seq.device, location=seq.location)
    return CaptureSequence(seq.frames[:n_train], **meta), CaptureSequence(seq.frames[n_train:], **meta)


def flow_target(
    a: SkyImage,
    b: SkyImage,
    params: FarnebackParams | None = None,
    threshold: float = DEFAULT_CLOUD_THRESHOLD,
) -> FlowField:
    """Farnebäck flow from ``a`` to ``b`` restricted to the clouds of ``a``."""
    return mask_flow(farneback_flow(a, b, params), compute_cloud_mask(a, threshold))


def build_flownet_pairs(
    seq: CaptureSequence,
    params: FarnebackParams | None = None,
    threshold: float = DEFAULT_CLOUD_THRESHOLD,
) -> list[tuple[SkyImage, EncodedFlow]]:
    frames = seq.frames
    return [
        (frames[i], encode_flow(flow_target(frames[i], frames[i + 1], params, threshold)))
        for i in range(len(frames) - 1)
    ]


def build_cloudnet_pairs(seq: CaptureSequence, flownet) -> list[tuple[SkyImage, EncodedFlow, SkyImage]]:
    from .neural_predictor import flownet_infer

    frames = seq.frames
    return [(frames[i], flownet_infer(flownet, frames[i]), frames[i + 1]) for i in range(len(frames) - 1)]


# --- synthetic scenes -------------------------------------------------------


@dataclass
class CloudLayer:
    velocity: tuple[float, float] = (3.0, 0.0)
    octaves: int = 5
    base_frequency: int = 8
    coverage: float = 0.5
    softness: float = 0.25
    color: tuple[float, float, float] = (0.85, 0.85, 0.88)
    shading: float = 0.5
    persistence: float = 0.65

    def __post_init__(self):
        self.velocity = tuple(float(x) for x in self.velocity)
        self.color = tuple(float(x) for x in self.color)
        if not all(math.isfinite(x) for x in self.velocity):
            raise ValueError("layer velocity must be finite")
        if not 0.0 < self.coverage < 1.0:
            raise ValueError("coverage must lie in (0, 1)")
        if self.octaves < 1 or self.base_frequency < 1:
            raise ValueError("octaves and base_frequency must be >= 1")
        if self.softness <= 0:
            raise ValueError("softness must be positive")


@dataclass
class SyntheticSceneSpec:
    """Procedural sky: value-noise cloud layers drifting over a static gradient.

    Each layer's noise is periodic over the frame, so an integer velocity
    moves it by an exact circular shift.
    """

    resolution: int = 128
    layers: list[CloudLayer] = field(default_factory=lambda: [CloudLayer()])
    zenith_color: tuple[float, float, float] = (0.08, 0.2, 0.6)
    horizon_color: tuple[float, float, float] = (0.3, 0.45, 0.75)
    seed: int = 0

    def __post_init__(self):
        self.layers = [l if isinstance(l, CloudLayer) else CloudLayer(**l) for l in self.layers]
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "layers": [dict(l.__dict__) for l in self.layers],
            "zenith_color": list(self.zenith_color),
            "horizon_color": list(self.horizon_color),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        return cls(**d)


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def periodic_value_noise(
    u: np.ndarray,
    v: np.ndarray,
    period: float,
    lattices: Sequence[np.ndarray],
    persistence: float = 0.5,
) -> np.ndarray:
    """Fractal value noise with period ``period`` in both coordinates, in [0, 1].

    ``lattices[o]`` holds the random values of octave ``o``; its side length is
    that octave's cell count across one period.
    """
    total = np.zeros(np.broadcast(u, v).shape)
    norm = 0.0
    amp = 1.0
    for lat in lattices:
        n = lat.shape[0]
        x = np.mod(u, period) * (n / period)
        y = np.mod(v, period) * (n / period)
        x0 = np.floor(x).astype(np.intp)
        y0 = np.floor(y).astype(np.intp)
        fx = _fade(x - x0)
        fy = _fade(y - y0)
        x0 %= n
        y0 %= n
        x1 = (x0 + 1) % n
        y1 = (y0 + 1) % n
        top = lat[y0, x0] * (1 - fx) + lat[y0, x1] * fx
        bot = lat[y1, x0] * (1 - fx) + lat[y1, x1] * fx
        total += amp * (top * (1 - fy) + bot * fy)
        norm += amp
        amp *= persistence
    return total / norm


def _layer_lattices(layer: CloudLayer, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.random((layer.base_frequency * 2**o,) * 2) for o in range(layer.octaves)]


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


class SyntheticScene:
    """Renders frames of a :class:`SyntheticSceneSpec` at arbitrary times."""

    def __init__(self, spec: SyntheticSceneSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self._lattices = [(_layer_lattices(l, rng), _layer_lattices(l, rng)) for l in spec.layers]
        n = spec.resolution
        c = np.arange(n) + 0.5
        self._u, self._v = np.meshgrid(c, c)
        self.valid = disc_validity(n)
        r = np.hypot(self._u - n / 2, self._v - n / 2) / (n / 2)
        t = np.clip(r, 0.0, 1.0)[..., None]
        self._sky = (1 - t) * np.asarray(spec.zenith_color) + t * np.asarray(spec.horizon_color)

    def layer_alpha(self, k: float, layer_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Coverage and brightness of one layer at time ``k`` (in steps)."""
        layer = self.spec.layers[layer_index]
        shape_lat, shade_lat = self._lattices[layer_index]
        vx, vy = layer.velocity
        u = self._u - k * vx
        v = self._v - k * vy
        period = float(self.spec.resolution)
        n = periodic_value_noise(u, v, period, shape_lat, layer.persistence)
        alpha = _smoothstep((n - (1.0 - layer.coverage)) / layer.softness + 0.5)
        shade = periodic_value_noise(u, v, period, shade_lat, layer.persistence)
        bright = 1.0 - layer.shading * shade
        return alpha, bright

    def render(self, k: float) -> tuple[SkyImage, FlowField]:
        """Frame at time ``k`` plus its visibility-weighted ground-truth flow."""
        img = self._sky.copy()
        flow = np.zeros(img.shape[:2] + (2,))
        for i, layer in enumerate(self.spec.layers):
            alpha, bright = self.layer_alpha(k, i)
            color = bright[..., None] * np.asarray(layer.color)
            img = img * (1 - alpha[..., None]) + color * alpha[..., None]
            # Upper layers hide what lies beneath, static sky included.
            flow = flow * (1 - alpha[..., None]) + alpha[..., None] * np.asarray(layer.velocity)
        img[~self.valid] = 0.0
        flow[~self.valid] = 0.0
        return SkyImage(np.clip(img, 0.0, 1.0), self.valid), FlowField(flow)


def generate_synthetic_sequence(
    spec: SyntheticSceneSpec, frames: int, interval: float = 10.0
) -> tuple[CaptureSequence, list[FlowField]]:
    """Render ``frames`` consecutive frames; flow ``k`` carries frame ``k`` to ``k + 1``."""
    if frames < 2:
        raise ValueError(f"need at least 2 frames, got {frames}")
    scene = SyntheticScene(spec)
    rendered = [scene.render(k) for k in range(frames)]
    seq = CaptureSequence([r[0] for r in rendered], interval=interval, device="synthetic", location="procedural")
    return seq, [r[1] for r in rendered]
