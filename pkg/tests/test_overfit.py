"""Contracts that need networks fitted to a synthetic pair (shared, slow fixture)."""

import json

import numpy as np
import pytest

from dynsky.cli import run
from dynsky.evaluation import evaluate_test_set
from dynsky.neural_predictor import flownet_infer, save_checkpoint
from dynsky.optical_flow import decode_flow
from dynsky.sky_image import save_png
from dynsky.temporal_engine import xi_step

pytestmark = pytest.mark.slow


def test_flownet_recovers_target_flow(overfit):
    img, target = overfit["pairs"][0]
    pred = decode_flow(flownet_infer(overfit["flownet"].model, img)).vectors
    ref = decode_flow(target).vectors
    epe = np.hypot(*(pred - ref)[img.valid].T).mean()
    assert epe < 0.5


def test_xi_step_reproduces_next_frame(overfit):
    seq = overfit["seq"]
    nxt, _ = xi_step(overfit["flownet"].model, overfit["cloudnet"].model, seq.frames[0])
    assert np.mean((nxt.pixels - seq.frames[1].pixels)[nxt.valid] ** 2) < 1e-3


def test_history_lengths(overfit):
    assert len(overfit["flownet"].history) == 500
    assert len(overfit["cloudnet"].mse_history) == 500


def test_evaluate_on_fitted_pair(overfit):
    report = evaluate_test_set(overfit["seq"], overfit["flownet"].model, overfit["cloudnet"].model)
    assert report.mse < 1e-3 and report.frame_count == 1


def test_cli_evaluate_on_fitted_models(overfit, tmp_path):
    ck = tmp_path / "ckpt"
    ck.mkdir()
    save_checkpoint(overfit["flownet"].model, ck / "flownet.ckpt")
    save_checkpoint(overfit["cloudnet"].model, ck / "cloudnet.ckpt")
    data = tmp_path / "data"
    data.mkdir()
    for k, f in enumerate(overfit["seq"].frames):
        save_png(f, data / f"{k:06d}.png")
    assert run(["evaluate", "--checkpoints", str(ck), "--test", str(data), "--out", str(tmp_path / "r")]) == 0
    # PNG quantization adds a little error on top of the fitted model's.
    assert json.loads((tmp_path / "r/report.json").read_text())["mse"] < 1e-3
