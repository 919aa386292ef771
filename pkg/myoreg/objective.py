"""
Training objective: NCC similarity on the CT and SDF channels plus the clipped
symmetric Jacobian penalty, and the masked point sampler feeding it.

Batch points x live in the target frame's normalized coordinates; the model maps
them into the source frame, Phi(x) = x + u(x).
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .config import LossWeights
from .errors import EmptyMaskError, NonFiniteGradientError
from .volume import Grid3, NormFrame, sample_with_gradient, trilinear_sample


@dataclass
class SampleBatch:
    points: np.ndarray  # (n, 3) normalized
    world: np.ndarray  # (n, 3) mm

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class LossBreakdown:
    total: float
    ncc_ct: float
    ncc_sdf: float
    sjac: float
    dl_du: np.ndarray
    dl_dj: Optional[np.ndarray]


def sample_batch(
    mask: Grid3,
    n: int,
    rng: np.random.Generator,
    frame: Optional[NormFrame] = None,
) -> SampleBatch:
    """Draw n points: a uniformly chosen set voxel, jittered uniformly within its extent."""
    voxels = np.argwhere(mask.as_mask())
    if len(voxels) == 0:
        raise EmptyMaskError("sampling mask")
    frame = frame or NormFrame.from_grid(mask)
    chosen = voxels[rng.integers(0, len(voxels), size=n)]
    jitter = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.asarray(mask.spacing)
    world = mask.index_to_world(chosen) + jitter
    return SampleBatch(points=frame.to_normalized(world), world=world)


def ncc_loss(a: np.ndarray, b: np.ndarray, epsilon: float = 1e-8) -> Tuple[float, np.ndarray, np.ndarray]:
    """Global zero-normalized cross correlation loss 1 - r and its gradients.

    r = sum((a - mean a)(b - mean b)) / (n * std a * std b + epsilon), population stds.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.size
    am = a - a.mean()
    bm = b - b.mean()
    sa = np.sqrt(np.mean(am * am))
    sb = np.sqrt(np.mean(bm * bm))
    cov = np.sum(am * bm)
    denom = n * sa * sb + epsilon
    loss = 1.0 - cov / denom
    # d(n sa sb)/da_i = sb * am_i / sa; vanishes for a constant argument
    da_scale = sb / sa if sa > 0 else 0.0
    db_scale = sa / sb if sb > 0 else 0.0
    dloss_da = -(bm / denom - cov * da_scale * am / denom**2)
    dloss_db = -(am / denom - cov * db_scale * bm / denom**2)
    return float(loss), dloss_da, dloss_db


def _cofactors(j: np.ndarray) -> np.ndarray:
    """d det / dJ for a stack of 3x3 matrices, without inverting."""
    r0, r1, r2 = j[..., 0, :], j[..., 1, :], j[..., 2, :]
    return np.stack([np.cross(r1, r2), np.cross(r2, r0), np.cross(r0, r1)], axis=-2)


def sjac_loss(j: np.ndarray, tau: float = 10.0) -> Tuple[np.ndarray, np.ndarray]:
    """Clipped symmetric Jacobian penalty min((det - 1)^2 / |det|, tau), per matrix.

    Accepts one (3, 3) matrix or a stack (n, 3, 3). The gradient is zero where the
    penalty is clipped, including det = 0.
    """
    j = np.asarray(j, dtype=np.float64)
    det = np.linalg.det(j)
    abs_det = np.abs(det)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(abs_det > 0, (det - 1.0) ** 2 / abs_det, np.inf)
        clipped = raw >= tau
        loss = np.where(clipped, tau, raw)
        d_ddet = np.where(clipped, 0.0, np.sign(det) * (1.0 - 1.0 / det**2))
    grad = d_ddet[..., None, None] * _cofactors(j)
    if np.ndim(loss) == 0:
        return float(loss), grad
    return loss, grad


def total_loss(
    points: np.ndarray,
    u: np.ndarray,
    jac: Optional[np.ndarray],
    source_ct: Grid3,
    source_sdf: Grid3,
    target_ct: Grid3,
    target_sdf: Grid3,
    frame: NormFrame,
    weights: LossWeights,
) -> LossBreakdown:
    """(1 - alpha) NCC(I_S o Phi, I_T) + alpha NCC(S_S o Phi, S_T) + lambda mean sjac.

    Returns cotangents dL/du (normalized units) and dL/dJ for siren.backward. With
    jac=None the regularizer is skipped (only valid for lambda = 0).
    """
    x_world = frame.to_world(points)
    phi_world = frame.to_world(np.asarray(points, dtype=np.float64) + np.asarray(u, dtype=np.float64))
    half = np.asarray(frame.half_extent)

    a_ct, grad_ct = sample_with_gradient(source_ct, phi_world)
    a_sdf, grad_sdf = sample_with_gradient(source_sdf, phi_world)
    b_ct = trilinear_sample(target_ct, x_world)
    b_sdf = trilinear_sample(target_sdf, x_world)

    ncc_ct, dct_da, _ = ncc_loss(a_ct, b_ct, weights.epsilon)
    ncc_sdf, dsdf_da, _ = ncc_loss(a_sdf, b_sdf, weights.epsilon)

    alpha = weights.alpha
    dl_dphi = (1.0 - alpha) * dct_da[:, None] * grad_ct + alpha * dsdf_da[:, None] * grad_sdf
    dl_du = dl_dphi * half

    total = (1.0 - alpha) * ncc_ct + alpha * ncc_sdf
    sjac_mean = 0.0
    dl_dj = None
    if jac is not None:
        penalty, dpen_dj = sjac_loss(jac, weights.tau)
        sjac_mean = float(np.mean(penalty))
        total += weights.lam * sjac_mean
        dl_dj = weights.lam * dpen_dj / len(points)
    elif weights.lam > 0:
        raise ValueError("the Jacobian regularizer needs jac when lambda > 0")

    if not np.isfinite(total) or not np.all(np.isfinite(dl_du)):
        raise NonFiniteGradientError()
    return LossBreakdown(
        total=float(total),
        ncc_ct=ncc_ct,
        ncc_sdf=ncc_sdf,
        sjac=sjac_mean,
        dl_du=dl_du,
        dl_dj=dl_dj,
    )
