"""Image metrics and the evaluation protocols built on them."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .optical_flow import FarnebackParams, farneback_flow, flow_magnitude_histogram
from .sky_image import DEFAULT_CLOUD_THRESHOLD, SkyImage, compute_cloud_mask

DEFAULT_HIST_EDGES = (0.0, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)


def _check_pair(a: SkyImage, b: SkyImage) -> None:
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"image sizes differ: {a.pixels.shape} vs {b.pixels.shape}")


def mse(a: SkyImage, b: SkyImage) -> float:
    """Mean squared error over in-disc pixels and all channels."""
    _check_pair(a, b)
    valid = a.valid & b.valid
    d = a.pixels[valid] - b.pixels[valid]
    return float(np.mean(d * d))


def psnr_from_mse(err: float, peak: float = 1.0) -> float:
    if err <= 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def psnr(a: SkyImage, b: SkyImage, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``inf``."""
    return psnr_from_mse(mse(a, b), peak)


def _window_sums(x: np.ndarray, w: int) -> np.ndarray:
    c = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    c[1:, 1:] = np.cumsum(np.cumsum(x, axis=0), axis=1)
    return c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]


def ssim(a: SkyImage, b: SkyImage, window: int = 8, peak: float = 1.0) -> float:
    """Mean SSIM of luminance over ``window`` x ``window`` windows lying fully in the disc."""
    _check_pair(a, b)
    if window > a.width:
        raise ValueError("window larger than the image")
    x = a.luminance()
    y = b.luminance()
    valid = (a.valid & b.valid).astype(np.float64)
    n = float(window * window)
    inside = _window_sums(valid, window) >= n - 0.5
    if not inside.any():
        raise ValueError("no window fits inside the valid disc")
    mx = _window_sums(x, window)[inside] / n
    my = _window_sums(y, window)[inside] / n
    sxx = _window_sums(x * x, window)[inside] / n - mx * mx
    syy = _window_sums(y * y, window)[inside] / n - my * my
    sxy = _window_sums(x * y, window)[inside] / n - mx * my
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    mse: float
    psnr: float
    ssim: float
    frame_count: int
    averaging: str = "per-frame"
    psnr_of_mean_mse: float = math.nan
    per_frame: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            return v

        d = asdict(self)
        d = {k: clean(v) for k, v in d.items()}
        d["per_frame"] = [{k: clean(v) for k, v in row.items()} for row in self.per_frame]
        return json.dumps(d, indent=2, sort_keys=True)

    def to_text(self) -> str:
        rows = [("metric", "value"), ("MSE", f"{self.mse:.6f}"), ("PSNR (dB)", f"{self.psnr:.3f}"),
                ("SSIM", f"{self.ssim:.4f}"), ("frames", str(self.frame_count)),
                ("averaging", self.averaging)]
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{w}}  {v}" for k, v in rows) + "\n"


Predictor = Callable[[int, SkyImage], SkyImage]


def evaluate_frames(frames: Sequence[SkyImage], predict: Predictor) -> MetricReport:
    """Compare ``predict(i, frames[i])`` with ``frames[i + 1]`` and average per frame."""
    if len(frames) < 2:
        raise ValueError("evaluation needs at least 2 frames")
    rows = []
    for i in range(len(frames) - 1):
        pred = predict(i, frames[i])
        target = frames[i + 1]
        e = mse(pred, target)
        rows.append({"index": i, "mse": e, "psnr": psnr_from_mse(e), "ssim": ssim(pred, target)})
    m = float(np.mean([r["mse"] for r in rows]))
    return MetricReport(
        mse=m,
        psnr=float(np.mean([r["psnr"] for r in rows])),
        ssim=float(np.mean([r["ssim"] for r in rows])),
        frame_count=len(rows),
        psnr_of_mean_mse=psnr_from_mse(m),
        per_frame=rows,
    )


def evaluate_test_set(test, flownet=None, cloudnet=None, predictor: Predictor | None = None) -> MetricReport:
    """Next-frame prediction error of the medium-timescale step over a test sequence.

    ``predictor`` replaces the networks (used for oracle stubs and baselines).
    """
    frames = test.frames if hasattr(test, "frames") else list(test)
    if predictor is None:
        if flownet is None or cloudnet is None:
            raise ValueError("either both models or a predictor are required")
        from .temporal_engine import xi_step

        def predictor(i, img):
            return xi_step(flownet, cloudnet, img)[0]

    return evaluate_frames(frames, predictor)


# --- flow distribution comparison -------------------------------------------


@dataclass
class HistogramComparison:
    edges: np.ndarray
    real: list[np.ndarray]
    generated: list[np.ndarray]
    distances: list[float]

    @property
    def mean_distance(self) -> float:
        return float(np.mean(self.distances))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["frame", "bin_low", "bin_high", "real", "generated"])
            for k, (hr, hg) in enumerate(zip(self.real, self.generated)):
                for i in range(len(hr)):
                    w.writerow([k, f"{self.edges[i]:g}", f"{self.edges[i + 1]:g}", f"{hr[i]:.10f}", f"{hg[i]:.10f}"])


def sequence_flow_histograms(
    frames: Sequence[SkyImage],
    edges,
    params: FarnebackParams | None = None,
    threshold: float = DEFAULT_CLOUD_THRESHOLD,
) -> list[np.ndarray]:
    """Histogram of re-estimated flow magnitude over each frame's cloud pixels."""
    if len(frames) < 2:
        raise ValueError("flow histograms need at least 2 frames")
    out = []
    for i in range(len(frames) - 1):
        flow = farneback_flow(frames[i], frames[i + 1], params)
        mask = compute_cloud_mask(frames[i], threshold)
        try:
            out.append(flow_magnitude_histogram(flow, edges, mask))
        except ValueError as exc:
            raise ValueError(f"frame {i}: {exc}") from exc
    return out


def flow_histogram_compare(
    real,
    generated,
    edges=DEFAULT_HIST_EDGES,
    params: FarnebackParams | None = None,
    threshold: float = DEFAULT_CLOUD_THRESHOLD,
) -> HistogramComparison:
    """Per-frame flow-magnitude histograms of two sequences and their L1 distances."""
    rf = real.frames if hasattr(real, "frames") else list(real)
    gf = generated.frames if hasattr(generated, "frames") else list(generated)
    n = min(len(rf), len(gf))
    if n < 2:
        raise ValueError("both sequences need at least 2 frames")
    hr = sequence_flow_histograms(rf[:n], edges, params, threshold)
    hg = sequence_flow_histograms(gf[:n], edges, params, threshold)
    dist = [float(np.abs(a - b).sum()) for a, b in zip(hr, hg)]
    return HistogramComparison(np.asarray(edges, dtype=np.float64), hr, hg, dist)


# --- loss ablation ----------------------------------------------------------


def ablation_run(
    train,
    test,
    epochs: int = 500,
    variants: dict[str, float] | None = None,
    seed: int = 0,
    learning_rate: float = 2e-4,
    width_scale: float = 1.0,
    params: FarnebackParams | None = None,
    batch_size: int = 1,
) -> dict[str, float]:
    """Train FlowNet+CloudNet per loss variant and report final test-set MSE.

    ``variants`` maps a label to the cosine weight (0 means MSE only). All
    variants see the same seed, data and epoch budget.
    """
    from .dataset import build_cloudnet_pairs, build_flownet_pairs
    from .neural_predictor import TrainConfig, default_config, train_cloudnet, train_flownet

    variants = variants or {"mse": 0.0, "mse+cos": 1.0}
    res = train.resolution
    flow_pairs = build_flownet_pairs(train, params)
    results = {}
    for name, lam in variants.items():
        cfg = TrainConfig(
            epochs=epochs, batch_size=batch_size, learning_rate=learning_rate, cosine_weight=lam, seed=seed
        )
        fnet = train_flownet(flow_pairs, cfg, default_config("flownet", res, width_scale)).model
        cnet = train_cloudnet(
            build_cloudnet_pairs(train, fnet), cfg, default_config("cloudnet", res, width_scale)
        ).model
        results[name] = evaluate_test_set(test, fnet, cnet).mse
    return results
