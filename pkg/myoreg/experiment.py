"""
Evaluation of finished cycles and the alpha x mode experiment grid.
"""

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import storage
from .config import RegConfig, RegistrationMode, thread_count
from .errors import EmptyMaskError
from .metrics import PairMetrics, dice, hd95, jacobian_stats, metrics_frame, tre
from .pipeline import (
    FrameBundle,
    LandmarkTrack,
    PairRegistration,
    map_to_source,
    run_cycle,
    track_landmarks,
    warp_mask,
)
from .volume import Grid3

DEFAULT_ALPHAS = (0.0, 0.8, 1.0)


def evaluate_pair(
    reg: PairRegistration,
    source: FrameBundle,
    target: FrameBundle,
    n_samples: int = 10_000,
    seed: int = 0,
) -> PairMetrics:
    """DSC and HD95 of the warped source mask against the target mask, plus det stats."""
    warped = warp_mask(reg, source.lv_mask)
    try:
        distance = hd95(warped, target.lv_mask)
    except EmptyMaskError:
        distance = float("nan")
    stats = jacobian_stats(reg, target.sample_mask, n_samples, seed)
    return PairMetrics(
        source_index=reg.source_index,
        target_index=reg.target_index,
        percent=target.percent,
        dsc=dice(warped, target.lv_mask),
        hd95=distance,
        **stats,
    )


def tre_table(
    registrations: Sequence[PairRegistration],
    reference: LandmarkTrack,
    mode: RegistrationMode,
    frames: Sequence[FrameBundle],
) -> Tuple[pd.DataFrame, LandmarkTrack]:
    """Per landmark per frame TRE of the tracked frame-0 landmarks against reference."""
    tracked = track_landmarks(registrations, reference.points[0], mode, reference.names)
    percents = {f.frame_index: f.percent for f in frames}
    rows = []
    for t in range(1, tracked.frames):
        errors = tre(tracked.points[t], reference.points[t])
        for i, name in enumerate(reference.names):
            rows.append(
                {
                    "target": t,
                    "percent": percents.get(t, float("nan")),
                    "landmark": name,
                    "tre": errors[i],
                    "residual": float(tracked.residuals[t, i]),
                }
            )
    return pd.DataFrame.from_records(rows), tracked


def evaluate_registrations(
    frames: Sequence[FrameBundle],
    registrations: Sequence[PairRegistration],
    mode: RegistrationMode,
    landmarks: Optional[LandmarkTrack] = None,
    n_samples: int = 10_000,
    seed: int = 0,
    threads: Optional[int] = None,
) -> Tuple[pd.DataFrame, Optional[pd.DataFrame]]:
    """Metrics table (one row per pair) and, with landmarks, the TRE table.

    Pairs are independent and evaluated on MYOREG_THREADS workers; rows keep the
    registration order.

    Args:
        frames: The dataset the registrations were trained on
        registrations: One registration per pair of the cycle
        mode: Schedule the registrations follow, used for landmark tracking
        landmarks: Reference track; frame 0 seeds the tracked points
        n_samples: Points per pair for the Jacobian statistics
        seed: Seed of the Jacobian sample
        threads: Worker count, MYOREG_THREADS when omitted

    Returns:
        The metrics table, and the TRE table or None without landmarks
    """
    by_index = {f.frame_index: f for f in frames}
    threads = threads or thread_count()

    def one(reg: PairRegistration) -> PairMetrics:
        return evaluate_pair(reg, by_index[reg.source_index], by_index[reg.target_index], n_samples, seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, registrations))
    else:
        rows = [one(reg) for reg in registrations]

    errors = None
    if landmarks is not None:
        errors, _ = tre_table(registrations, landmarks, mode, frames)
        per_frame = errors.groupby("target")["tre"].mean()
        for m in rows:
            m.tre = errors.loc[errors["target"] == m.target_index, "tre"].tolist()
        table = metrics_frame(rows)
        table["tre_mean"] = table["target"].map(per_frame)
    else:
        table = metrics_frame(rows)
    return table, errors


def summarize(table: pd.DataFrame) -> Dict[str, float]:
    """Cycle averages in the units results tables are usually quoted in."""
    summary = {
        "dsc_percent": 100.0 * float(table["dsc"].mean()),
        "hd95_mm": float(table["hd95"].mean()),
        "neg_jac_fraction_max": float(table["neg_jac_fraction"].max()),
    }
    summary["tre_mm"] = float(table["tre_mean"].mean()) if "tre_mean" in table else float("nan")
    return summary


def run_experiment(
    frames: Sequence[FrameBundle],
    base: RegConfig,
    outdir: Path,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    modes: Sequence[RegistrationMode] = tuple(RegistrationMode),
    landmarks: Optional[LandmarkTrack] = None,
    on_run_start: Optional[Callable[[RegistrationMode, float], None]] = None,
    **callbacks,
) -> pd.DataFrame:
    """Register and evaluate the cycle for every (mode, alpha); write table.csv.

    Each run lands in outdir/<mode>_alpha<alpha>/ with checkpoints, losses.csv,
    metrics.csv and run.json. Extra keyword arguments go to run_cycle.
    """
    outdir = Path(outdir)
    rows: List[Dict[str, object]] = []
    for mode in modes:
        mode = RegistrationMode(mode)
        for alpha in alphas:
            cfg = base.model_copy(update={"alpha": float(alpha), "mode": mode})
            if on_run_start is not None:
                on_run_start(mode, float(alpha))
            registrations = run_cycle(frames, cfg, **callbacks)
            table, errors = evaluate_registrations(frames, registrations, mode, landmarks, seed=cfg.seed)

            rundir = outdir / f"{mode.value}_alpha{alpha:g}"
            storage.write_run(rundir, registrations, run_meta(cfg, registrations))
            storage.write_csv(rundir / storage.LOSSES, storage.loss_table(registrations), cfg.echo())
            storage.write_csv(rundir / "metrics.csv", table, cfg.echo())
            if errors is not None:
                storage.write_csv(rundir / "tre.csv", errors, cfg.echo())

            rows.append({"mode": mode.value, "alpha": float(alpha), **summarize(table)})

    result = pd.DataFrame.from_records(rows)
    storage.write_csv(outdir / "table.csv", result, base.echo())
    return result


def run_meta(cfg: RegConfig, registrations: Sequence[PairRegistration]) -> Dict[str, object]:
    return {
        "mode": RegistrationMode(cfg.mode).value,
        "config": cfg.echo(),
        "train_seconds": {r.label: r.train_seconds for r in registrations},
        "final_loss": {
            r.label: float(r.loss_trace[-1, 0]) if len(r.loss_trace) else float("nan") for r in registrations
        },
    }


def mean_displacement_mm(reg: PairRegistration, mask: Grid3) -> float:
    """Mean |u| (mm) over the voxel centers of mask."""
    centers = mask.voxel_centers()[mask.as_mask().ravel()]
    return float(np.mean(np.linalg.norm(map_to_source(reg, centers) - centers, axis=1)))
