"""
Pairwise registration, cycle schedules, warping and landmark tracking.

Direction convention: a registration's Phi maps target-frame coordinates into
the source frame. Warped source images are therefore plain pull-backs, while
moving points from source to target needs a fixed-point inversion.
"""

import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from . import siren
from .config import RegConfig, RegistrationMode
from .errors import DataError, GeometryMismatchError, NoConvergenceError, NonFiniteGradientError
from .objective import LossBreakdown, sample_batch, total_loss
from .sdf import signed_distance_field
from .volume import Grid3, NormFrame, dilate_mask, trilinear_sample

CONVENTION = "target_to_source"
CHUNK = 32_768

EpochCallback = Callable[[int, LossBreakdown], None]


class Deformation(Protocol):
    def displace(self, xs: np.ndarray) -> np.ndarray: ...

    def jacobian(self, xs: np.ndarray) -> np.ndarray: ...


@dataclass
class AffineField:
    """Closed-form displacement u(x) = A x + c in normalized coordinates."""

    matrix: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def translation(cls, offset) -> "AffineField":
        return cls(offset=np.asarray(offset, dtype=np.float64))

    def displace(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        return xs @ np.asarray(self.matrix).T + np.asarray(self.offset)

    def jacobian(self, xs: np.ndarray) -> np.ndarray:
        n = np.shape(xs)[0]
        jac = np.eye(3) + np.asarray(self.matrix, dtype=np.float64)
        return np.broadcast_to(jac, (n, 3, 3)).copy()


@dataclass
class FrameBundle:
    """One cardiac frame: CT, LV myocardium mask, its SDF and the sampling mask."""

    ct: Grid3
    lv_mask: Grid3
    sdf: Grid3
    sample_mask: Grid3
    frame_index: int
    percent: float

    def __post_init__(self):
        for name in ("lv_mask", "sdf", "sample_mask"):
            self.ct.require_same_geometry(getattr(self, name), f"frame {self.frame_index} ct and {name}")

    @classmethod
    def build(
        cls,
        ct: Grid3,
        lv_mask: Grid3,
        frame_index: int,
        percent: float,
        dilation_mm: float = 10.0,
        sdf: Optional[Grid3] = None,
    ) -> "FrameBundle":
        return cls(
            ct=ct,
            lv_mask=lv_mask,
            sdf=sdf if sdf is not None else signed_distance_field(lv_mask),
            sample_mask=dilate_mask(lv_mask, dilation_mm),
            frame_index=frame_index,
            percent=percent,
        )


@dataclass
class PairRegistration:
    """A trained source->target registration; Phi maps target coords into the source."""

    model: Any
    source_index: int
    target_index: int
    frame: NormFrame
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]
    loss_trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    convention: str = CONVENTION
    init_fingerprint: Optional[str] = None
    train_seconds: float = 0.0
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return f"{self.source_index:02d}->{self.target_index:02d}"

    def target_grid(self, values: Optional[np.ndarray] = None) -> Grid3:
        if values is None:
            values = np.zeros(self.dims)
        return Grid3(values=values, spacing=self.spacing, origin=self.origin)

    def require_geometry(self, grid: Grid3, what: str = "volume") -> None:
        if not self.target_grid().same_geometry(grid):
            raise GeometryMismatchError(
                f"{what} geometry {grid.dims}/{grid.spacing}/{grid.origin} does not match "
                f"registration {self.label} geometry {self.dims}/{self.spacing}/{self.origin}"
            )


@dataclass
class InversionResult:
    points: np.ndarray  # (m, 3) world mm in the target frame
    residuals: np.ndarray  # (m,) mm
    iterations: int


@dataclass
class LandmarkTrack:
    """Per-frame world points (mm): points[frame, landmark]."""

    names: List[str]
    points: np.ndarray
    residuals: Optional[np.ndarray] = None

    @property
    def frames(self) -> int:
        return self.points.shape[0]


def cycle_pairs(frame_count: int, mode: RegistrationMode) -> List[Tuple[int, int]]:
    """(source, target) frame indices of a cycle, without looping back."""
    if frame_count < 2:
        raise DataError(f"a cycle needs at least 2 frames, got {frame_count}")
    mode = RegistrationMode(mode)
    if mode is RegistrationMode.SEQUENTIAL:
        return [(t - 1, t) for t in range(1, frame_count)]
    return [(0, t) for t in range(1, frame_count)]


def pair_rng(cfg: RegConfig, source_index: int, target_index: int) -> np.random.Generator:
    """Sampling stream of one pair; fixed by the seed and the pair indices."""
    return np.random.default_rng([cfg.seed, source_index, target_index])


def register_pair(
    source: FrameBundle,
    target: FrameBundle,
    cfg: RegConfig,
    init: Optional[siren.SirenModel] = None,
    epochs: Optional[int] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> PairRegistration:
    """Fit Phi for one pair, one Adam step per epoch on a fresh batch.

    Args:
        source: Frame that Phi maps into
        target: Frame whose grid Phi is defined on and sampled from
        cfg: Loss weights, network shape and optimizer settings
        init: Network to warm-start from; copied, never modified
        epochs: Epoch count, cfg.epochs_first when omitted
        on_epoch: Called with the epoch number and its loss after every step

    Returns:
        The trained registration with its per-epoch loss trace

    Raises:
        GeometryMismatchError: If source and target grids differ
        NonFiniteGradientError: If a loss or gradient stops being finite
    """
    source.ct.require_same_geometry(target.ct, "source and target frames")
    epochs = cfg.epochs_first if epochs is None else epochs
    dtype = np.dtype(cfg.precision)
    if init is None:
        model = siren.init(cfg.seed, cfg.hidden_layers, cfg.width, cfg.omega, dtype=dtype)
        init_fingerprint = None
    else:
        model = init.copy(dtype)
        init_fingerprint = init.fingerprint()

    frame = NormFrame.from_grid(target.ct)
    rng = pair_rng(cfg, source.frame_index, target.frame_index)
    state = siren.AdamState.for_parameters(model.parameters(), cfg.learning_rate)
    weights = cfg.weights
    use_jacobian = weights.lam > 0
    label = f"{source.frame_index:02d}->{target.frame_index:02d}"

    trace = np.zeros((epochs, 4))
    started = time.perf_counter()
    for epoch in range(epochs):
        batch = sample_batch(target.sample_mask, cfg.batch_size, rng, frame)
        u, tape = siren.forward(model, batch.points)
        jac = siren.spatial_jacobian(model, batch.points, tape) if use_jacobian else None
        try:
            loss = total_loss(
                batch.points, u, jac,
                source.ct, source.sdf, target.ct, target.sdf,
                frame, weights,
            )
            grads = siren.backward(model, tape, loss.dl_du, loss.dl_dj)
            siren.adam_step(state, model.parameters(), grads)
        except NonFiniteGradientError as e:
            raise NonFiniteGradientError(epoch=epoch, pair=label) from e
        trace[epoch] = (loss.total, loss.ncc_ct, loss.ncc_sdf, loss.sjac)
        if on_epoch is not None:
            on_epoch(epoch, loss)

    return PairRegistration(
        model=model,
        source_index=source.frame_index,
        target_index=target.frame_index,
        frame=frame,
        dims=target.ct.dims,
        spacing=target.ct.spacing,
        origin=target.ct.origin,
        loss_trace=trace,
        init_fingerprint=init_fingerprint,
        train_seconds=time.perf_counter() - started,
        config=cfg.echo(),
    )


def run_cycle(
    frames: Sequence[FrameBundle],
    cfg: RegConfig,
    on_pair_start: Optional[Callable[[int, int, int], None]] = None,
    on_pair_done: Optional[Callable[[PairRegistration], None]] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> List[PairRegistration]:
    """Register the cycle in cfg.mode; every pair after the first is warm-started.

    Args:
        frames: Every frame of the cycle, in any order
        cfg: Training settings, including the schedule in cfg.mode
        on_pair_start: Called with source, target and epoch count before each pair
        on_pair_done: Called with each finished registration
        on_epoch: Passed through to register_pair

    Returns:
        One registration per pair, in cycle_pairs order
    """
    by_index = {f.frame_index: f for f in frames}
    ordered = [by_index[i] for i in sorted(by_index)]
    registrations: List[PairRegistration] = []
    previous = None
    for k, (s, t) in enumerate(cycle_pairs(len(ordered), cfg.mode)):
        epochs = cfg.epochs_first if k == 0 else cfg.epochs_rest
        if on_pair_start is not None:
            on_pair_start(s, t, epochs)
        reg = register_pair(ordered[s], ordered[t], cfg, init=previous, epochs=epochs, on_epoch=on_epoch)
        registrations.append(reg)
        previous = reg.model
        if on_pair_done is not None:
            on_pair_done(reg)
    return registrations


def map_to_source(reg: PairRegistration, world_points: np.ndarray) -> np.ndarray:
    """Phi applied to target-frame world points, returned as source-frame world points."""
    world_points = np.asarray(world_points, dtype=np.float64)
    out = np.empty_like(world_points)
    for start in range(0, len(world_points), CHUNK):
        x = reg.frame.to_normalized(world_points[start : start + CHUNK])
        u = np.asarray(reg.model.displace(x), dtype=np.float64)
        out[start : start + CHUNK] = reg.frame.to_world(x + u)
    return out


def warp_volume(reg: PairRegistration, volume: Grid3) -> Grid3:
    """Pull the source volume back onto the target grid by trilinear sampling at Phi(x)."""
    reg.require_geometry(volume, "volume to warp")
    target = reg.target_grid()
    values = trilinear_sample(volume, map_to_source(reg, target.voxel_centers()))
    return target.with_values(np.asarray(values).reshape(target.dims))


def warp_mask(reg: PairRegistration, src_mask: Grid3) -> Grid3:
    """Pull-back of a binary mask, thresholded at 0.5."""
    warped = warp_volume(reg, src_mask.with_values(src_mask.as_mask().astype(np.float64)))
    return warped.with_values((warped.values >= 0.5).astype(np.uint8))


def displacement_field_mm(reg: PairRegistration) -> np.ndarray:
    """Dense u on the target grid in mm, shape dims + (3,)."""
    target = reg.target_grid()
    centers = target.voxel_centers()
    return (map_to_source(reg, centers) - centers).reshape(target.dims + (3,))


def invert_points(
    reg: PairRegistration,
    points: np.ndarray,
    iters: int = 50,
    tol: float = 1e-4,
) -> InversionResult:
    """Solve Phi(y) = p for source-frame world points p by y <- p - u(y).

    Args:
        reg: Registration whose map is inverted
        points: (N, 3) source-frame points in mm
        iters: Fixed-point iterations before giving up
        tol: Largest accepted residual |Phi(y) - p| in mm

    Returns:
        Target-frame points, their residuals and the iterations used

    Raises:
        NoConvergenceError: If some residual is still above tol
    """
    p_world = np.atleast_2d(np.asarray(points, dtype=np.float64))
    p_norm = reg.frame.to_normalized(p_world)
    y = p_norm.copy()
    residual = np.full(len(p_world), np.inf)
    for iteration in range(iters + 1):
        u = np.asarray(reg.model.displace(y), dtype=np.float64)
        residual = np.linalg.norm(reg.frame.to_world(y + u) - p_world, axis=1)
        if np.all(residual <= tol):
            return InversionResult(points=reg.frame.to_world(y), residuals=residual, iterations=iteration)
        if iteration == iters:
            break
        y = p_norm - u
    raise NoConvergenceError(float(np.max(residual)), iters)


def invert_point(reg: PairRegistration, p, iters: int = 50, tol: float = 1e-4) -> np.ndarray:
    return invert_points(reg, np.asarray(p)[None, :], iters, tol).points[0]


def track_landmarks(
    registrations: Sequence[PairRegistration],
    lm0: np.ndarray,
    mode: RegistrationMode,
    names: Optional[List[str]] = None,
    iters: int = 50,
    tol: float = 1e-4,
) -> LandmarkTrack:
    """Carry frame-0 landmarks through a cycle's registrations.

    Non-sequential: every frame inverts its own 0->t registration. Sequential: the
    points are pushed through each consecutive registration in turn.
    """
    lm0 = np.atleast_2d(np.asarray(lm0, dtype=np.float64))
    pairs = [(r.source_index, r.target_index) for r in registrations]
    if pairs != cycle_pairs(len(registrations) + 1, mode):
        raise DataError(f"registrations {pairs} do not form a {RegistrationMode(mode).value} cycle")
    frames = len(registrations) + 1
    points = np.empty((frames, len(lm0), 3))
    residuals = np.zeros((frames, len(lm0)))
    points[0] = lm0
    sequential = RegistrationMode(mode) is RegistrationMode.SEQUENTIAL
    for reg in registrations:
        t = reg.target_index
        start = points[t - 1] if sequential else lm0
        try:
            result = invert_points(reg, start, iters, tol)
        except NoConvergenceError as e:
            raise NoConvergenceError(e.residual_mm, e.iterations, frame=t) from e
        points[t] = result.points
        residuals[t] = result.residuals
    names = names or [f"landmark_{i}" for i in range(len(lm0))]
    return LandmarkTrack(names=list(names), points=points, residuals=residuals)
