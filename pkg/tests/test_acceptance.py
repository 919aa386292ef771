"""
Full-scale training checks on the phantom. These take minutes to hours on a
CPU and only run with --runslow.
"""

import numpy as np
import pytest

from myoreg import storage
from myoreg.config import RegConfig, RegistrationMode
from myoreg.experiment import evaluate_registrations, mean_displacement_mm, tre_table
from myoreg.metrics import neg_jac_fraction
from myoreg.phantom import PhantomSpec, generate
from myoreg.pipeline import register_pair, run_cycle

pytestmark = pytest.mark.slow

CYCLE_EPOCHS = dict(epochs_first=500, epochs_rest=300)
TWIST_SEEDS = (0, 1, 2)


class CycleCache:
    """Trains each (phantom, alpha, mode, seed) cycle once per module."""

    def __init__(self):
        self.phantoms = {}
        self.cycles = {}

    def phantom(self, twist: bool, seed: int):
        key = (twist, seed)
        if key not in self.phantoms:
            spec = PhantomSpec(amplitude=0.15, twist_deg=15.0 if twist else 0.0, seed=seed)
            self.phantoms[key] = generate(spec)
        return self.phantoms[key]

    def cycle(self, alpha: float, mode: RegistrationMode, twist: bool = False, seed: int = 0):
        key = (alpha, RegistrationMode(mode), twist, seed)
        if key not in self.cycles:
            frames, _ = self.phantom(twist, seed)
            cfg = RegConfig(alpha=alpha, mode=mode, seed=seed, **CYCLE_EPOCHS)
            self.cycles[key] = run_cycle(frames, cfg)
        return self.cycles[key]

    def metrics(self, alpha: float, mode: RegistrationMode):
        frames, track = self.phantom(False, 0)
        table, _ = evaluate_registrations(frames, self.cycle(alpha, mode), mode, track)
        return table

    def tre_at(self, alpha: float, mode: RegistrationMode, seed: int, frame: int) -> float:
        frames, track = self.phantom(True, seed)
        errors, _ = tre_table(self.cycle(alpha, mode, twist=True, seed=seed), track, mode, frames)
        return float(errors.loc[errors["target"] == frame, "tre"].mean())


@pytest.fixture(scope="module")
def cycles():
    return CycleCache()


def test_self_registration_stays_put():
    """Test that registering a frame to itself barely moves it."""
    frames, _ = generate(PhantomSpec(amplitude=0.15))
    frame = frames[0]
    reg = register_pair(frame, frame, RegConfig(alpha=0.0), epochs=200)
    assert mean_displacement_mm(reg, frame.sample_mask) <= 0.5
    assert neg_jac_fraction(reg, frame.sample_mask) == 0.0


@pytest.mark.parametrize("mode", list(RegistrationMode))
def test_cycle_accuracy(cycles, mode):
    """Test that a full cycle reaches the target overlap without folding."""
    table = cycles.metrics(1.0, mode)
    assert len(table) == 19
    assert table["dsc"].mean() >= 0.95
    assert table["hd95"].mean() <= 4.0
    assert (table["neg_jac_fraction"] <= 0.01).all()


def test_sdf_weight_ordering(cycles):
    """Test that weighting the SDF term raises the overlap."""
    mode = RegistrationMode.SEQUENTIAL
    dsc = {alpha: cycles.metrics(alpha, mode)["dsc"].mean() for alpha in (0.0, 0.8, 1.0)}
    assert dsc[0.0] < dsc[0.8] <= dsc[1.0] + 0.01


def test_pure_sdf_lets_points_slide(cycles):
    """Test that mixing in CT similarity beats pure SDF on landmark error."""
    mid = PhantomSpec().frames // 2
    wins = 0
    for seed in TWIST_SEEDS:
        mixed = cycles.tre_at(0.8, RegistrationMode.NONSEQUENTIAL, seed, mid)
        pure = cycles.tre_at(1.0, RegistrationMode.NONSEQUENTIAL, seed, mid)
        wins += mixed < pure
    assert wins >= 2


def test_sequential_tracking_accumulates_error(cycles):
    """Test that chained registrations drift further than direct ones."""
    last = PhantomSpec().frames - 1
    wins = 0
    for seed in TWIST_SEEDS:
        sequential = cycles.tre_at(0.8, RegistrationMode.SEQUENTIAL, seed, last)
        direct = cycles.tre_at(0.8, RegistrationMode.NONSEQUENTIAL, seed, last)
        wins += sequential >= direct
    assert wins >= 2


def test_rerun_is_bitwise_identical(cycles, tmp_path):
    """Test that a rerun with the same seed gives identical bytes."""
    frames, _ = cycles.phantom(False, 0)
    first = cycles.cycle(1.0, RegistrationMode.SEQUENTIAL)
    second = run_cycle(frames, RegConfig(alpha=1.0, mode=RegistrationMode.SEQUENTIAL, **CYCLE_EPOCHS))
    for name, regs in (("a", first), ("b", second)):
        storage.write_run(tmp_path / name, regs, {"mode": "sequential"})
        storage.write_csv(tmp_path / name / storage.LOSSES, storage.loss_table(regs))
    assert (tmp_path / "a" / storage.LOSSES).read_bytes() == (tmp_path / "b" / storage.LOSSES).read_bytes()
    for ckpt in (tmp_path / "a" / "checkpoints").iterdir():
        assert ckpt.read_bytes() == (tmp_path / "b" / "checkpoints" / ckpt.name).read_bytes()


@pytest.mark.parametrize("mode", list(RegistrationMode))
def test_twenty_frames_give_nineteen_checkpoints(cycles, mode, tmp_path):
    """Test that a twenty-frame cycle writes nineteen checkpoints."""
    regs = cycles.cycle(1.0, mode)
    storage.write_run(tmp_path, regs, {"mode": RegistrationMode(mode).value})
    assert len(list((tmp_path / "checkpoints").glob("pair_*.ckpt"))) == 19
    assert np.isfinite(cycles.metrics(1.0, mode)["dsc"]).all()
