"""
Overlap, surface-distance, landmark and deformation-quality metrics.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import ndimage

from .errors import EmptyMaskError, ShapeMismatchError
from .objective import sample_batch
from .volume import Grid3

SIX_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


@dataclass
class PairMetrics:
    source_index: int
    target_index: int
    percent: float
    dsc: float
    hd95: float
    neg_jac_fraction: float
    jac_min: float = float("nan")
    jac_max: float = float("nan")
    jac_mean: float = float("nan")
    tre: Optional[List[float]] = field(default=None)


def dice(a: Grid3, b: Grid3) -> float:
    """2|A and B| / (|A| + |B|); two empty masks agree perfectly (1.0)."""
    a.require_same_geometry(b, "masks compared by Dice")
    ma, mb = a.as_mask(), b.as_mask()
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Set voxels with at least one unset 6-neighbor; outside the grid counts as unset."""
    eroded = ndimage.binary_erosion(mask, structure=SIX_NEIGHBORS, border_value=0)
    return mask & ~eroded


def surface_distances(a: Grid3, b: Grid3) -> np.ndarray:
    """Pooled boundary-to-boundary nearest distances (mm), a->b then b->a."""
    a.require_same_geometry(b, "masks compared by surface distance")
    ma, mb = a.as_mask(), b.as_mask()
    if not ma.any():
        raise EmptyMaskError("first mask")
    if not mb.any():
        raise EmptyMaskError("second mask")
    edge_a, edge_b = boundary(ma), boundary(mb)
    to_b = ndimage.distance_transform_edt(~edge_b, sampling=a.spacing)
    to_a = ndimage.distance_transform_edt(~edge_a, sampling=a.spacing)
    return np.concatenate([to_b[edge_a], to_a[edge_b]])


def hd95(a: Grid3, b: Grid3) -> float:
    """95th percentile (linear interpolation) of the pooled symmetric surface distances."""
    return float(np.percentile(surface_distances(a, b), 95))


def hausdorff(a: Grid3, b: Grid3) -> float:
    return float(np.max(surface_distances(a, b)))


def tre(predicted: np.ndarray, reference: np.ndarray) -> List[float]:
    """Per-point Euclidean distances, in the order given."""
    predicted = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    if predicted.shape != reference.shape:
        raise ShapeMismatchError(
            f"landmark lists differ: {predicted.shape[0]} predicted vs {reference.shape[0]} reference"
        )
    return np.linalg.norm(predicted - reference, axis=1).tolist()


def jacobian_determinants(reg, mask: Grid3, n_samples: int, seed: int) -> np.ndarray:
    """det of the Jacobian of Phi at n_samples random points of the mask."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    rng = np.random.default_rng(seed)
    batch = sample_batch(mask, n_samples, rng, reg.frame)
    return np.linalg.det(np.asarray(reg.model.jacobian(batch.points), dtype=np.float64))


def neg_jac_fraction(reg, mask: Grid3, n_samples: int = 10_000, seed: int = 0) -> float:
    """Fraction of sampled mask points where Phi folds (det <= 0)."""
    dets = jacobian_determinants(reg, mask, n_samples, seed)
    return float(np.mean(dets <= 0))


def jacobian_stats(reg, mask: Grid3, n_samples: int = 10_000, seed: int = 0) -> Dict[str, float]:
    dets = jacobian_determinants(reg, mask, n_samples, seed)
    return {
        "neg_jac_fraction": float(np.mean(dets <= 0)),
        "jac_min": float(dets.min()),
        "jac_max": float(dets.max()),
        "jac_mean": float(dets.mean()),
    }


def metrics_frame(rows: Sequence[PairMetrics]) -> pd.DataFrame:
    """One row per pair, without the per-landmark TRE lists."""
    records = []
    for m in rows:
        records.append(
            {
                "source": m.source_index,
                "target": m.target_index,
                "percent": m.percent,
                "dsc": m.dsc,
                "hd95": m.hd95,
                "neg_jac_fraction": m.neg_jac_fraction,
                "jac_min": m.jac_min,
                "jac_max": m.jac_max,
                "jac_mean": m.jac_mean,
            }
        )
    return pd.DataFrame.from_records(records)


def dsc_curve(tables: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """DSC per cycle percentage: mean and population std across evaluations."""
    stacked = pd.concat([t[["percent", "dsc"]] for t in tables], ignore_index=True)
    grouped = stacked.groupby("percent")["dsc"]
    curve = pd.DataFrame({"mean": grouped.mean(), "std": grouped.std(ddof=0), "n": grouped.size()})
    return curve.reset_index()
