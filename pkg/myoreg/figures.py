"""
Figures: DSC over the cardiac cycle and landmark trajectories.
"""

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .errors import FormatError  # noqa: E402
from .metrics import dsc_curve  # noqa: E402
from .pipeline import LandmarkTrack  # noqa: E402
from .storage import atomic_target  # noqa: E402


def as_curve(table: pd.DataFrame, source: str = "table") -> pd.DataFrame:
    """Accept either a metrics table (percent, dsc) or a curve table (percent, mean, std)."""
    if {"percent", "mean", "std"} <= set(table.columns):
        return table
    if {"percent", "dsc"} <= set(table.columns):
        return dsc_curve([table])
    raise FormatError(f"{source}: expected columns percent+dsc or percent+mean+std, got {list(table.columns)}")


def plot_dsc_curves(curves: Sequence[pd.DataFrame], labels: Sequence[str], ax=None):
    """DSC (%) against cycle percentage, one line per curve with a +-1 std band."""
    if ax is None:
        _, ax = plt.subplots(figsize=(8, 5))
    for curve, label in zip(curves, labels):
        x = curve["percent"].to_numpy()
        mean = 100.0 * curve["mean"].to_numpy()
        std = 100.0 * curve["std"].to_numpy()
        ax.plot(x, mean, marker="o", markersize=3, label=label)
        ax.fill_between(x, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("Cardiac cycle [%]")
    ax.set_ylabel("DSC [%]")
    ax.set_xlim(0, 100)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left")
    return ax


def plot_tracks(track: LandmarkTrack, ax=None):
    """Trajectories projected on the sagittal (y, z) plane, coloured by frame."""
    if ax is None:
        _, ax = plt.subplots(figsize=(6, 6))
    colours = plt.cm.viridis(np.linspace(0.0, 1.0, track.frames))
    for i, name in enumerate(track.names):
        y, z = track.points[:, i, 1], track.points[:, i, 2]
        ax.plot(y, z, color="0.6", linewidth=0.8)
        ax.scatter(y, z, c=colours, s=12)
        ax.annotate(name, (y[0], z[0]), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("y [mm]")
    ax.set_ylabel("z [mm]")
    ax.set_aspect("equal", adjustable="datalim")
    return ax


def save_figure(
    out: Path,
    curves: Sequence[pd.DataFrame],
    labels: Sequence[str],
    track: Optional[LandmarkTrack] = None,
) -> Path:
    panels = 2 if track is not None else 1
    fig, axes = plt.subplots(1, panels, figsize=(8 * panels, 5), squeeze=False)
    plot_dsc_curves(curves, labels, axes[0, 0])
    if track is not None:
        plot_tracks(track, axes[0, 1])
    fig.tight_layout()
    out = Path(out)
    with atomic_target(out) as tmp:
        fig.savefig(tmp, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return out
