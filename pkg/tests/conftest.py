"""
Shared fixtures for the myoreg tests.
"""

import numpy as np
import pytest

from myoreg import siren
from myoreg.pipeline import AffineField, FrameBundle, PairRegistration
from myoreg.volume import Grid3, NormFrame


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_grid(values, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Grid3:
    return Grid3(values=np.asarray(values, dtype=np.float64), spacing=spacing, origin=origin)


def tiny_model(seed: int, hidden_layers: int = 2, width: int = 8, omega: float = 30.0, out_scale: float = 0.1):
    """Random float64 SIREN with a non-zero output layer."""
    model = siren.init(seed, hidden_layers, width, omega, dtype=np.float64)
    rng = np.random.default_rng(1000 + seed)
    model.weights[-1][...] = rng.normal(0.0, out_scale, size=model.weights[-1].shape)
    model.biases[-1][...] = rng.normal(0.0, out_scale, size=model.biases[-1].shape)
    return model


TINY = dict(epochs_first=3, epochs_rest=2, batch_size=64, hidden_layers=1, width=8, precision="float64")


def block_frames(count: int, spacing=(1.0, 1.0, 2.0)):
    """16^3 frames with a block moving one voxel along x per frame."""
    frames = []
    for t in range(count):
        mask = np.zeros((16, 16, 16))
        mask[4 + t : 10 + t, 5:11, 5:11] = 1
        ct = 100.0 * mask + np.random.default_rng(t).normal(0.0, 5.0, size=mask.shape)
        frames.append(
            FrameBundle.build(
                ct=make_grid(ct, spacing=spacing),
                lv_mask=make_grid(mask, spacing=spacing),
                frame_index=t,
                percent=100.0 * t / count,
                dilation_mm=2.0,
            )
        )
    return frames


def registration(model, grid: Grid3, source_index: int = 0, target_index: int = 1) -> PairRegistration:
    return PairRegistration(
        model=model,
        source_index=source_index,
        target_index=target_index,
        frame=NormFrame.from_grid(grid),
        dims=grid.dims,
        spacing=grid.spacing,
        origin=grid.origin,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cube_mask():
    """16^3 grid, spacing (1, 1, 2), with a 6^3 block set in the middle."""
    values = np.zeros((16, 16, 16))
    values[5:11, 5:11, 5:11] = 1
    return make_grid(values, spacing=(1.0, 1.0, 2.0), origin=(-3.0, 4.0, 1.5))


@pytest.fixture
def identity_model():
    return siren.init(0, hidden_layers=1, width=4, omega=30.0, dtype=np.float64)


@pytest.fixture
def identity_field():
    return AffineField()
