import numpy as np
import pytest
import torch

from dynsky.dataset import CloudLayer, SyntheticSceneSpec, generate_synthetic_sequence
from dynsky.sky_image import SkyImage

torch.set_num_threads(1)


def random_sky(rng: np.random.Generator, size: int = 32) -> SkyImage:
    return SkyImage.from_array(rng.random((size, size, 3)))


def textured_spec(resolution=128, velocity=(3.0, 0.0), seed=1, **layer):
    """A fully clouded, richly textured scene: every pixel carries trackable detail."""
    opts = dict(coverage=0.99, softness=0.05, shading=0.7, persistence=0.7)
    opts.update(layer)
    return SyntheticSceneSpec(
        resolution=resolution, layers=[CloudLayer(velocity=velocity, **opts)], seed=seed
    )


def interior(n: int, fraction: float = 0.8) -> np.ndarray:
    c = np.arange(n) + 0.5
    u, v = np.meshgrid(c, c)
    return np.hypot(u - n / 2, v - n / 2) < fraction * n / 2


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def overfit():
    """Full-width FlowNet and CloudNet fitted for 500 epochs to one 128^2 synthetic pair."""
    import time

    from dynsky.dataset import build_cloudnet_pairs, build_flownet_pairs
    from dynsky.neural_predictor import TrainConfig, default_config, train_cloudnet, train_flownet

    spec = SyntheticSceneSpec(resolution=128, layers=[CloudLayer(velocity=(3, 0))], seed=0)
    seq, _ = generate_synthetic_sequence(spec, 2)
    t0 = time.perf_counter()
    cfg = TrainConfig(epochs=500)
    pairs = build_flownet_pairs(seq)
    fres = train_flownet(pairs, cfg, default_config("flownet", 128))
    cres = train_cloudnet(build_cloudnet_pairs(seq, fres.model), cfg, default_config("cloudnet", 128))
    return {"seq": seq, "pairs": pairs, "flownet": fres, "cloudnet": cres,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def moving_sequence():
    spec = SyntheticSceneSpec(resolution=64, layers=[CloudLayer(velocity=(2.0, 1.0))], seed=3)
    return generate_synthetic_sequence(spec, 4)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
