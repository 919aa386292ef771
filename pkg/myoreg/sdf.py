"""Signed Euclidean distance fields of binary masks, in mm."""

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, FullMaskError
from .volume import Grid3


def signed_distance_field(mask: Grid3) -> Grid3:
    """Exact anisotropic SDF at voxel centers, negative inside the mask.

    An unset voxel gets the distance to the nearest set voxel center; a set voxel
    gets minus the distance to the nearest unset voxel center. No value is zero.
    """
    inside = mask.as_mask()
    if not inside.any():
        raise EmptyMaskError("mask for SDF")
    if inside.all():
        raise FullMaskError("mask for SDF")
    outside_distance = ndimage.distance_transform_edt(~inside, sampling=mask.spacing)
    inside_distance = ndimage.distance_transform_edt(inside, sampling=mask.spacing)
    sdf = np.where(inside, -inside_distance, outside_distance)
    return mask.with_values(sdf.astype(np.float64))
