"""Small builders shared across test modules."""

import numpy as np

from longreg.geometry import Grid


def centered_grid(shape, spacing=1.0):
    """Axis-aligned grid whose world origin sits at the volume center."""
    affine = np.eye(4)
    affine[0, 0] = affine[1, 1] = affine[2, 2] = spacing
    affine[:3, 3] = -spacing * (np.asarray(shape, dtype=float) - 1.0) / 2.0
    return Grid(tuple(shape), affine)


def index_grid(shape):
    """Voxel index coordinates, shape (X, Y, Z, 3), float64."""
    axes = [np.arange(s, dtype=np.float64) for s in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def smooth_field(shape, rng, sigma=3.0, scale=1.0):
    """Gaussian-smoothed random vector field scaled to a peak norm."""
    from scipy.ndimage import gaussian_filter

    raw = gaussian_filter(rng.normal(size=tuple(shape) + (3,)), (sigma, sigma, sigma, 0))
    peak = np.sqrt((raw**2).sum(axis=-1)).max()
    return raw * (scale / peak)
