"""
Tests for cycle evaluation and the experiment grid, on small block frames.
"""

import numpy as np
import pandas as pd
import pytest

from myoreg import siren, storage
from myoreg.config import RegConfig, RegistrationMode, thread_count
from myoreg.errors import ConfigError, FormatError
from myoreg.experiment import (
    evaluate_pair,
    evaluate_registrations,
    mean_displacement_mm,
    run_experiment,
    run_meta,
    summarize,
)
from myoreg.figures import as_curve
from myoreg.pipeline import AffineField, LandmarkTrack, cycle_pairs
from myoreg.volume import NormFrame

from conftest import TINY, block_frames, registration


def identity_cycle(frames, mode=RegistrationMode.SEQUENTIAL):
    return [registration(siren.init(0, 1, 4), frames[0].ct, s, t) for s, t in cycle_pairs(len(frames), mode)]


class TestEvaluate:
    """Per-pair metrics of finished cycles."""

    def test_identity_pair(self):
        """Test that the identity scores the raw overlap of two shifted blocks."""
        frames = block_frames(2)
        metrics = evaluate_pair(identity_cycle(frames)[0], frames[0], frames[1], n_samples=100)
        assert metrics.dsc == pytest.approx(2 * 5 / 12)
        assert metrics.hd95 == pytest.approx(1.0)
        assert metrics.neg_jac_fraction == 0.0
        assert metrics.jac_mean == pytest.approx(1.0)
        assert metrics.percent == frames[1].percent

    def test_perfect_translation(self):
        """Test that the exact translation gives perfect overlap."""
        frames = block_frames(2)
        half = 1.0 / NormFrame.from_grid(frames[1].ct).half_extent[0]
        reg = registration(AffineField.translation([-half, 0.0, 0.0]), frames[1].ct)
        metrics = evaluate_pair(reg, frames[0], frames[1], n_samples=50)
        assert metrics.dsc == pytest.approx(1.0)
        assert metrics.hd95 == 0.0

    def test_threads_give_the_same_table(self):
        """Test that the thread count does not change the table."""
        frames = block_frames(4)
        regs = identity_cycle(frames)
        single, _ = evaluate_registrations(frames, regs, RegistrationMode.SEQUENTIAL, n_samples=50, threads=1)
        pooled, _ = evaluate_registrations(frames, regs, RegistrationMode.SEQUENTIAL, n_samples=50, threads=3)
        pd.testing.assert_frame_equal(single, pooled)

    def test_tre_columns(self):
        """Test that landmark errors are averaged per pair and listed per landmark."""
        frames = block_frames(3)
        points = np.zeros((3, 2, 3))
        points[:, 1, 0] = [0.0, 3.0, 4.0]
        track = LandmarkTrack(names=["a", "b"], points=points + 5.0)
        table, errors = evaluate_registrations(
            frames, identity_cycle(frames), RegistrationMode.SEQUENTIAL, track, n_samples=20
        )
        assert table["tre_mean"].tolist() == pytest.approx([1.5, 2.0])
        assert errors.columns.tolist() == ["target", "percent", "landmark", "tre", "residual"]
        assert len(errors) == 4

    def test_thread_count_from_environment(self, monkeypatch):
        """Test that MYOREG_THREADS sets the worker count and rejects junk."""
        monkeypatch.setenv("MYOREG_THREADS", "4")
        assert thread_count() == 4
        monkeypatch.setenv("MYOREG_THREADS", "zero")
        with pytest.raises(ConfigError):
            thread_count()


class TestSummaries:
    """Table summaries and run metadata."""

    def test_summarize(self):
        """Test that summarize averages DSC, HD95 and TRE and takes the worst folding."""
        table = pd.DataFrame(
            {"dsc": [0.9, 0.8], "hd95": [1.0, 3.0], "neg_jac_fraction": [0.0, 0.02], "tre_mean": [2.0, 4.0]}
        )
        assert summarize(table) == pytest.approx(
            {"dsc_percent": 85.0, "hd95_mm": 2.0, "neg_jac_fraction_max": 0.02, "tre_mm": 3.0}
        )

    def test_summarize_without_landmarks(self):
        """Test that TRE is NaN when no landmarks were scored."""
        table = pd.DataFrame({"dsc": [1.0], "hd95": [0.0], "neg_jac_fraction": [0.0]})
        assert np.isnan(summarize(table)["tre_mm"])

    def test_run_meta(self):
        """Test that run metadata records the mode, final losses and config."""
        frames = block_frames(2)
        regs = identity_cycle(frames)
        regs[0].loss_trace = np.array([[0.5, 0.1, 0.2, 0.0], [0.25, 0.1, 0.1, 0.0]])
        meta = run_meta(RegConfig(), regs)
        assert meta["mode"] == "sequential"
        assert meta["final_loss"] == {"00->01": 0.25}
        assert meta["config"]["lambda"] == 0.05

    def test_mean_displacement(self, cube_mask):
        """Test that a translation has its mean displacement in mm."""
        reg = registration(AffineField.translation([0.0, 0.0, 0.1]), cube_mask)
        assert mean_displacement_mm(reg, cube_mask) == pytest.approx(0.1 * reg.frame.half_extent[2])

    def test_as_curve(self):
        """Test that as_curve groups by cycle percentage and needs a DSC column."""
        curve = as_curve(pd.DataFrame({"percent": [0.0, 50.0], "dsc": [0.9, 0.8]}))
        assert curve.columns.tolist() == ["percent", "mean", "std", "n"]
        with pytest.raises(FormatError):
            as_curve(pd.DataFrame({"x": [1]}))


class TestRunExperiment:
    """Alpha and mode grids."""

    def test_grid(self, tmp_path):
        """Test that every grid cell is announced, run and tabulated."""
        frames = block_frames(3)
        announced = []
        result = run_experiment(
            frames,
            RegConfig(**TINY),
            tmp_path,
            alphas=(0.0, 1.0),
            modes=(RegistrationMode.NONSEQUENTIAL,),
            on_run_start=lambda mode, alpha: announced.append((mode.value, alpha)),
        )
        assert announced == [("nonsequential", 0.0), ("nonsequential", 1.0)]
        assert result[["mode", "alpha"]].values.tolist() == [["nonsequential", 0.0], ["nonsequential", 1.0]]
        table = storage.read_csv(tmp_path / "table.csv")
        assert table.columns.tolist() == [
            "mode", "alpha", "dsc_percent", "hd95_mm", "neg_jac_fraction_max", "tre_mm"
        ]
        regs, meta = storage.load_run(tmp_path / "nonsequential_alpha1")
        assert meta["config"]["alpha"] == 1.0
        assert [(r.source_index, r.target_index) for r in regs] == [(0, 1), (0, 2)]
        assert not (tmp_path / "nonsequential_alpha1" / "tre.csv").exists()
