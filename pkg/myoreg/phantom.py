"""
Synthetic beating-ventricle phantom with closed-form motion.

The myocardium is an ellipsoidal shell about a long axis parallel to z, cut off
at the base. Over the cycle it contracts in-plane by s(t) = 1 - A (1 - cos phi)/2
and twists about the long axis by an angle growing linearly from apex to base.
Frame t is rendered by pulling the frame-0 scene back through the exact inverse
motion, so no resampling error enters the ground truth.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .config import describe_validation_error
from .errors import FormatError
from .pipeline import FrameBundle, LandmarkTrack
from .volume import Grid3

DEFAULT_LANDMARKS = [
    ("LAD", 30.0, 0.85),
    ("CX", 140.0, 0.85),
    ("OM", 200.0, 0.55),
    ("DIAG", 320.0, 0.55),
]


class LandmarkSeed(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    angle_deg: float
    height: float = Field(ge=0.0, le=1.0, description="0 at the apex, 1 at the base cut")


class PhantomSpec(BaseModel):
    """Geometry, motion and appearance of the phantom. Lengths in mm."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    dims: Tuple[int, int, int] = (64, 64, 32)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 2.0)
    outer_radii: Tuple[float, float, float] = (18.3, 18.3, 23.7)
    wall_thickness: float = Field(6.2, gt=0.0)
    base_cut: float = Field(0.55, gt=-1.0, le=1.0, description="base plane height / long radius")
    amplitude: float = Field(0.15, ge=0.0, lt=1.0)
    twist_deg: float = 0.0
    frames: int = Field(20, ge=2)
    background: float = -50.0
    wall: float = 100.0
    blood_pool: float = 300.0
    texture_amplitude: float = Field(30.0, ge=0.0)
    noise_sigma: float = Field(10.0, ge=0.0)
    landmarks: List[LandmarkSeed] = Field(
        default_factory=lambda: [
            LandmarkSeed(name=n, angle_deg=a, height=h) for n, a, h in DEFAULT_LANDMARKS
        ]
    )
    seed: int = 0

    @model_validator(mode="after")
    def _check_geometry(self) -> "PhantomSpec":
        if any(d < 2 for d in self.dims):
            raise ValueError("dims: every dimension must be >= 2")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing: must be positive")
        if any(r <= 0 for r in self.outer_radii):
            raise ValueError("outer_radii: must be positive")
        if self.wall_thickness >= min(self.outer_radii):
            raise ValueError("wall_thickness: must be smaller than the smallest outer radius")
        return self

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing) / 2.0

    @property
    def inner_radii(self) -> np.ndarray:
        return np.asarray(self.outer_radii) - self.wall_thickness

    @property
    def apex_z(self) -> float:
        return float(self.center[2] - self.outer_radii[2])

    @property
    def base_z(self) -> float:
        return float(self.center[2] + self.base_cut * self.outer_radii[2])

    def percent(self, t: int) -> float:
        return 100.0 * t / self.frames


def cycle_phase(spec: PhantomSpec, t: float) -> float:
    """Contraction progress in [0, 1]: 0 at frame 0, 1 at mid-cycle."""
    return (1.0 - np.cos(2.0 * np.pi * t / spec.frames)) / 2.0


def radial_scale(spec: PhantomSpec, t: float) -> float:
    return 1.0 - spec.amplitude * cycle_phase(spec, t)


def twist_angle(spec: PhantomSpec, t: float, z: np.ndarray) -> np.ndarray:
    """Rotation (radians) about the long axis at height z; zero at the apex."""
    height = np.clip((np.asarray(z) - spec.apex_z) / (spec.base_z - spec.apex_z), 0.0, 1.0)
    return np.deg2rad(spec.twist_deg) * height * cycle_phase(spec, t)


def _rotate_xy(d: np.ndarray, angle: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    out = d.copy()
    out[..., 0] = c * d[..., 0] - s * d[..., 1]
    out[..., 1] = s * d[..., 0] + c * d[..., 1]
    return out


def _is_identity(spec: PhantomSpec, t: float) -> bool:
    no_twist = spec.twist_deg == 0.0 or cycle_phase(spec, t) == 0.0
    return radial_scale(spec, t) == 1.0 and no_twist


def motion(spec: PhantomSpec, t: float, p: np.ndarray) -> np.ndarray:
    """Frame-0 world points to their frame-t positions: in-plane scaling, then twist."""
    p = np.asarray(p, dtype=np.float64)
    if _is_identity(spec, t):
        return p.copy()
    center = spec.center
    d = p - center
    d[..., :2] *= radial_scale(spec, t)
    d = _rotate_xy(d, twist_angle(spec, t, p[..., 2]))
    return center + d


def inverse_motion(spec: PhantomSpec, t: float, q: np.ndarray) -> np.ndarray:
    """Exact inverse of motion: untwist, then undo the scaling. z is never moved."""
    q = np.asarray(q, dtype=np.float64)
    if _is_identity(spec, t):
        return q.copy()
    center = spec.center
    d = _rotate_xy(q - center, -twist_angle(spec, t, q[..., 2]))
    d[..., :2] /= radial_scale(spec, t)
    return center + d


def _ellipsoid_radius(d: np.ndarray, radii) -> np.ndarray:
    r = np.asarray(radii, dtype=np.float64)
    return np.sqrt(np.sum((d / r) ** 2, axis=-1))


def shell_indicator(spec: PhantomSpec, p: np.ndarray) -> np.ndarray:
    """Frame-0 myocardium membership of world points."""
    p = np.asarray(p, dtype=np.float64)
    d = p - spec.center
    below_base = p[..., 2] <= spec.base_z
    inside_outer = _ellipsoid_radius(d, spec.outer_radii) <= 1.0
    outside_inner = _ellipsoid_radius(d, spec.inner_radii) > 1.0
    return inside_outer & outside_inner & below_base


class _Texture:
    """Smooth seeded angular/height modulation of the wall intensity."""

    def __init__(self, spec: PhantomSpec):
        rng = np.random.default_rng([spec.seed, 7])
        self.orders = np.arange(2, 7)
        self.weights = rng.uniform(0.5, 1.0, size=len(self.orders))
        self.phases = rng.uniform(0, 2 * np.pi, size=len(self.orders))
        self.tilts = rng.uniform(-0.15, 0.15, size=len(self.orders))
        self.amplitude = spec.texture_amplitude
        self.spec = spec

    def __call__(self, p: np.ndarray) -> np.ndarray:
        d = p - self.spec.center
        psi = np.arctan2(d[..., 1], d[..., 0])
        signal = np.zeros(psi.shape)
        for k, w, phase, tilt in zip(self.orders, self.weights, self.phases, self.tilts):
            signal += w * np.cos(k * psi + tilt * d[..., 2] + phase)
        return self.amplitude * signal / np.sum(self.weights)


def render_scene(spec: PhantomSpec, p: np.ndarray, texture: Optional[_Texture] = None) -> np.ndarray:
    """Noise-free frame-0 intensities at world points."""
    texture = texture or _Texture(spec)
    d = p - spec.center
    below_base = p[..., 2] <= spec.base_z
    cavity = (_ellipsoid_radius(d, spec.inner_radii) <= 1.0) & below_base
    wall = shell_indicator(spec, p)
    values = np.full(p.shape[:-1], spec.background, dtype=np.float64)
    values[cavity] = spec.blood_pool
    if spec.texture_amplitude > 0:
        values[wall] = spec.wall + texture(p[wall])
    else:
        values[wall] = spec.wall
    return values


def seed_points(spec: PhantomSpec) -> np.ndarray:
    """Frame-0 landmark positions on the mid-wall surface, (n, 3) mm."""
    points = []
    center = spec.center
    for seed in spec.landmarks:
        z = spec.apex_z + seed.height * (spec.base_z - spec.apex_z)
        dz = z - center[2]
        outer = np.sqrt(max(0.0, 1.0 - (dz / spec.outer_radii[2]) ** 2))
        inner = np.sqrt(max(0.0, 1.0 - (dz / spec.inner_radii[2]) ** 2))
        angle = np.deg2rad(seed.angle_deg)
        direction = np.array([np.cos(angle), np.sin(angle)])
        # mid-wall along the ray: halfway between the inner and outer ellipse crossings
        ro = outer / np.sqrt(np.sum((direction / np.asarray(spec.outer_radii[:2])) ** 2))
        ri = inner / np.sqrt(np.sum((direction / spec.inner_radii[:2]) ** 2))
        r = (ro + ri) / 2.0
        points.append([center[0] + r * direction[0], center[1] + r * direction[1], z])
    return np.asarray(points)


def generate(spec: PhantomSpec, dilation_mm: float = 10.0) -> Tuple[List[FrameBundle], LandmarkTrack]:
    """All frames of the cycle plus the ground-truth landmark track.

    Args:
        spec: Geometry, motion and texture of the phantom
        dilation_mm: Radius of the sampling mask around each LV mask

    Returns:
        The frames in cycle order and the analytic track of the seed points
    """
    grid = Grid3(values=np.zeros(spec.dims), spacing=spec.spacing, origin=(0.0, 0.0, 0.0))
    centers = grid.voxel_centers()
    texture = _Texture(spec)
    seeds = seed_points(spec)
    frames: List[FrameBundle] = []
    track = np.empty((spec.frames, len(seeds), 3))
    for t in range(spec.frames):
        reference = inverse_motion(spec, t, centers)
        ct = render_scene(spec, reference, texture).reshape(spec.dims)
        if spec.noise_sigma > 0:
            noise_rng = np.random.default_rng([spec.seed, t])
            ct = ct + noise_rng.normal(0.0, spec.noise_sigma, size=spec.dims)
        mask = shell_indicator(spec, reference).reshape(spec.dims).astype(np.uint8)
        frames.append(
            FrameBundle.build(
                ct=grid.with_values(ct),
                lv_mask=grid.with_values(mask),
                frame_index=t,
                percent=spec.percent(t),
                dilation_mm=dilation_mm,
            )
        )
        track[t] = motion(spec, t, seeds)
    names = [seed.name for seed in spec.landmarks]
    return frames, LandmarkTrack(names=names, points=track)


def build_phantom_spec(spec_file: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> PhantomSpec:
    """Defaults < JSON spec file < explicit overrides (None values skipped)."""
    values: Dict[str, Any] = {}
    if spec_file is not None:
        try:
            loaded = json.loads(Path(spec_file).read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"{spec_file}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from e
        if not isinstance(loaded, dict):
            raise FormatError(f"{spec_file}: a phantom spec must be a JSON object")
        values.update(loaded)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return PhantomSpec.model_validate(values)
    except ValidationError as e:
        raise FormatError(describe_validation_error(e).replace("configuration", "phantom spec")) from e
