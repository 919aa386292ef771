"""
3D grids with physical geometry.

Values live at voxel centers; index (i, j, k) sits at world position
origin + (i, j, k) * spacing, in mm. Array axes are ordered x, y, z.
"""

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, GeometryMismatchError

Vec3 = Tuple[float, float, float]
ArrayLike = Union[np.ndarray, Tuple[float, ...], list]


@dataclass(frozen=True, eq=False)
class Grid3:
    """A scalar lattice: CT in HU, SDF in mm or a {0, 1} mask."""

    values: np.ndarray
    spacing: Vec3
    origin: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise GeometryMismatchError(f"grid values must be 3D, got shape {values.shape}")
        if any(d < 2 for d in values.shape):
            raise GeometryMismatchError(f"every grid dimension must be >= 2, got {values.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise GeometryMismatchError("spacing and origin need exactly 3 components")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise GeometryMismatchError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def bbox_min(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def bbox_max(self) -> np.ndarray:
        return self.bbox_min + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def same_geometry(self, other: "Grid3") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=1e-7, atol=0)
            and np.allclose(self.origin, other.origin, rtol=1e-7, atol=1e-9)
        )

    def require_same_geometry(self, other: "Grid3", what: str = "grids") -> None:
        if not self.same_geometry(other):
            raise GeometryMismatchError(
                f"{what} differ in geometry: dims {self.dims} vs {other.dims}, "
                f"spacing {self.spacing} vs {other.spacing}, origin {self.origin} vs {other.origin}"
            )

    def with_values(self, values: np.ndarray) -> "Grid3":
        return Grid3(values=values, spacing=self.spacing, origin=self.origin)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel center, shape (nx*ny*nz, 3), C order."""
        axes = [
            self.origin[a] + np.arange(self.dims[a]) * self.spacing[a] for a in range(3)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def index_to_world(self, index: ArrayLike) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=np.float64) * np.asarray(self.spacing)

    def world_to_index(self, p: ArrayLike) -> np.ndarray:
        """Continuous voxel index of world points."""
        return (np.asarray(p, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def as_mask(self) -> np.ndarray:
        return self.values > 0.5


@dataclass(frozen=True)
class NormFrame:
    """Per-axis affine map of a grid's voxel-center bounding box onto [-1, 1]^3."""

    center: Vec3
    half_extent: Vec3

    def __post_init__(self):
        half = tuple(float(h) for h in self.half_extent)
        if len(half) != 3 or any(not np.isfinite(h) or h <= 0 for h in half):
            raise GeometryMismatchError(f"degenerate normalization frame, half extent {half}")
        object.__setattr__(self, "half_extent", half)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def from_grid(cls, grid: Grid3) -> "NormFrame":
        lo, hi = grid.bbox_min, grid.bbox_max
        return cls(center=tuple((lo + hi) / 2.0), half_extent=tuple((hi - lo) / 2.0))

    def to_normalized(self, p: ArrayLike) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - np.asarray(self.center)) / np.asarray(self.half_extent)

    def to_world(self, q: ArrayLike) -> np.ndarray:
        return np.asarray(q, dtype=np.float64) * np.asarray(self.half_extent) + np.asarray(self.center)


def world_to_normalized(frame: NormFrame, p: ArrayLike) -> np.ndarray:
    return frame.to_normalized(p)


def normalized_to_world(frame: NormFrame, q: ArrayLike) -> np.ndarray:
    return frame.to_world(q)


def _cell_coordinates(grid: Grid3, points: np.ndarray):
    """Lower-corner cell index, fractional offset and out-of-box flags per axis.

    Points are clamped to the voxel-center bounding box. Inside, the containing
    cell is the half-open interval [node, next node); the last node belongs to the
    last cell.
    """
    dims = np.asarray(grid.dims)
    c = grid.world_to_index(points)
    outside = (c < 0) | (c > dims - 1)
    c = np.clip(c, 0, dims - 1)
    i0 = np.minimum(np.floor(c).astype(np.int64), dims - 2)
    t = c - i0
    return i0, t, outside


def _corner_values(grid: Grid3, i0: np.ndarray) -> np.ndarray:
    """The 8 corner values per point, shape (n, 2, 2, 2)."""
    v = grid.values
    x, y, z = i0[:, 0], i0[:, 1], i0[:, 2]
    corners = np.empty((len(i0), 2, 2, 2), dtype=np.float64)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corners[:, dx, dy, dz] = v[x + dx, y + dy, z + dz]
    return corners


def _collapse(corners: np.ndarray, w0: np.ndarray, w1: np.ndarray):
    """Interpolate along z, then y, then x, keeping the partial reductions."""
    cz = corners[..., 0] * w0[:, 2, None, None] + corners[..., 1] * w1[:, 2, None, None]
    cy = cz[..., 0] * w0[:, 1, None] + cz[..., 1] * w1[:, 1, None]
    value = cy[:, 0] * w0[:, 0] + cy[:, 1] * w1[:, 0]
    return value, cz, cy


def sample_with_gradient(grid: Grid3, points: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """Trilinear values and their spatial gradient (value units per mm).

    Accepts a single point (3,) or a batch (n, 3). The gradient component along
    an axis on which the point was clamped is zero, matching the clamped sampler.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    i0, t, outside = _cell_coordinates(grid, p)
    corners = _corner_values(grid, i0)
    w0, w1 = 1.0 - t, t
    value, cz, cy = _collapse(corners, w0, w1)

    d_dx = cy[:, 1] - cy[:, 0]
    cz_x = cz[:, 0, :] * w0[:, 0, None] + cz[:, 1, :] * w1[:, 0, None]
    d_dy = cz_x[:, 1] - cz_x[:, 0]
    cxy = (
        corners[:, 0, 0, :] * (w0[:, 0] * w0[:, 1])[:, None]
        + corners[:, 1, 0, :] * (w1[:, 0] * w0[:, 1])[:, None]
        + corners[:, 0, 1, :] * (w0[:, 0] * w1[:, 1])[:, None]
        + corners[:, 1, 1, :] * (w1[:, 0] * w1[:, 1])[:, None]
    )
    d_dz = cxy[:, 1] - cxy[:, 0]

    grad = np.stack([d_dx, d_dy, d_dz], axis=-1) / np.asarray(grid.spacing)
    grad[outside] = 0.0
    if single:
        return value[0], grad[0]
    return value, grad


def trilinear_sample(grid: Grid3, points: ArrayLike) -> Union[float, np.ndarray]:
    """Border-clamped trilinear interpolation at world points (mm)."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    i0, t, _ = _cell_coordinates(grid, p)
    corners = _corner_values(grid, i0)
    value, _, _ = _collapse(corners, 1.0 - t, t)
    return float(value[0]) if single else value


def trilinear_gradient(grid: Grid3, points: ArrayLike) -> np.ndarray:
    """Analytic gradient of the trilinear interpolant within the containing cell."""
    return sample_with_gradient(grid, points)[1]


def dilate_mask(mask: Grid3, radius_mm: float) -> Grid3:
    """Set every voxel whose center lies within radius_mm of a set voxel center.

    Distances are physical, so anisotropic spacing is respected.
    """
    if radius_mm < 0:
        raise ValueError(f"dilation radius must be >= 0, got {radius_mm}")
    inside = mask.as_mask()
    if not inside.any():
        raise EmptyMaskError("mask to dilate")
    if radius_mm == 0:
        return mask.with_values(inside.astype(np.uint8))
    if inside.all():
        return mask.with_values(inside.astype(np.uint8))
    distance = ndimage.distance_transform_edt(~inside, sampling=mask.spacing)
    dilated = distance <= radius_mm * (1.0 + 1e-12)
    return mask.with_values(dilated.astype(np.uint8))
