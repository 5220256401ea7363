import math

import numpy as np
import pytest

from dynsky.dataset import generate_synthetic_sequence
from dynsky.evaluation import (
    evaluate_frames,
    flow_histogram_compare,
    mse,
    psnr,
    psnr_from_mse,
    ssim,
)
from .conftest import random_sky, textured_spec


def brute_mse(a, b):
    total, count = 0.0, 0
    for y in range(a.height):
        for x in range(a.width):
            if a.valid[y, x] and b.valid[y, x]:
                for c in range(3):
                    total += (a.pixels[y, x, c] - b.pixels[y, x, c]) ** 2
                    count += 1
    return total / count


def brute_ssim(a, b, w=8):
    la = 0.299 * a.pixels[..., 0] + 0.587 * a.pixels[..., 1] + 0.114 * a.pixels[..., 2]
    lb = 0.299 * b.pixels[..., 0] + 0.587 * b.pixels[..., 1] + 0.114 * b.pixels[..., 2]
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for y in range(a.height - w + 1):
        for x in range(a.width - w + 1):
            if not (a.valid[y:y + w, x:x + w].all() and b.valid[y:y + w, x:x + w].all()):
                continue
            p = la[y:y + w, x:x + w]
            q = lb[y:y + w, x:x + w]
            mp, mq = p.mean(), q.mean()
            vp, vq = ((p - mp) ** 2).mean(), ((q - mq) ** 2).mean()
            cov = ((p - mp) * (q - mq)).mean()
            vals.append((2 * mp * mq + c1) * (2 * cov + c2) / ((mp**2 + mq**2 + c1) * (vp + vq + c2)))
    return float(np.mean(vals))


class TestMetrics:
    def test_mse_brute(self, rng):
        a, b = random_sky(rng, 32), random_sky(rng, 32)
        assert abs(mse(a, b) - brute_mse(a, b)) < 1e-12

    def test_ssim_brute(self, rng):
        a, b = random_sky(rng, 32), random_sky(rng, 32)
        assert abs(ssim(a, b) - brute_ssim(a, b)) < 1e-9

    def test_ssim_self(self, rng):
        a = random_sky(rng, 32)
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_psnr_values(self, rng):
        assert psnr_from_mse(0.01) == 20.0
        a = random_sky(rng, 16)
        assert psnr(a, a) == math.inf

    def test_size_mismatch(self, rng):
        with pytest.raises(ValueError):
            mse(random_sky(rng, 16), random_sky(rng, 32))

    def test_ssim_window_too_large(self, rng):
        with pytest.raises(ValueError):
            ssim(random_sky(rng, 4), random_sky(rng, 4))


class TestReport:
    def test_perfect_predictor(self, moving_sequence):
        seq, _ = moving_sequence
        rep = evaluate_frames(seq.frames, lambda i, img: seq.frames[i + 1])
        assert rep.mse == 0.0 and rep.psnr == math.inf and rep.ssim == pytest.approx(1.0)
        assert rep.frame_count == len(seq) - 1
        assert '"psnr": "inf"' in rep.to_json()
        assert "SSIM" in rep.to_text()

    def test_needs_two_frames(self, rng):
        with pytest.raises(ValueError):
            evaluate_frames([random_sky(rng)], lambda i, x: x)

    def test_per_frame_average(self, moving_sequence):
        seq, _ = moving_sequence
        rep = evaluate_frames(seq.frames, lambda i, img: img)
        assert rep.mse == pytest.approx(np.mean([r["mse"] for r in rep.per_frame]))
        assert rep.psnr == pytest.approx(np.mean([r["psnr"] for r in rep.per_frame]))


class TestHistogramCompare:
    def test_self_distance_zero(self, tmp_path):
        seq, _ = generate_synthetic_sequence(textured_spec(64, (2.0, 0.0), coverage=0.6), 4)
        comp = flow_histogram_compare(seq, seq)
        assert comp.mean_distance == 0.0
        for h in comp.real:
            assert h.sum() == pytest.approx(1.0, abs=1e-9)
        comp.write_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "frame,bin_low,bin_high,real,generated"
        assert len(lines) == 1 + 3 * (len(comp.edges) - 1)

    def test_different_motion_distinguished(self):
        slow, _ = generate_synthetic_sequence(textured_spec(64, (0.5, 0.0), coverage=0.6), 3)
        fast, _ = generate_synthetic_sequence(textured_spec(64, (4.0, 0.0), coverage=0.6), 3)
        assert flow_histogram_compare(slow, fast).mean_distance > 0.5


def test_static_vs_moving_distance_bound():
    from dynsky.dataset import CaptureSequence

    moving, _ = generate_synthetic_sequence(textured_spec(64, (3.0, 0.0), coverage=0.6), 3)
    static = CaptureSequence([moving.frames[0]] * 3)
    edges = [0, 0.05, 0.5, 1, 2, 4, 8]
    comp = flow_histogram_compare(static, moving, edges)
    for h_static, h_move, dist in zip(comp.real, comp.generated, comp.distances):
        assert h_static[0] == pytest.approx(1.0)
        outside = h_move[3:].sum()  # mass at or above one pixel
        assert outside > 0.5
        assert dist >= outside - 1e-12


def test_identical_variants_equal():
    from dynsky.dataset import split_train_test
    from dynsky.evaluation import ablation_run

    seq, _ = generate_synthetic_sequence(textured_spec(32, (1.0, 0.0), coverage=0.6), 8)
    train, test = split_train_test(seq, 0.7)
    res = ablation_run(train, test, epochs=2, variants={"a": 0.0, "b": 0.0}, width_scale=0.125)
    assert res["a"] == res["b"]
