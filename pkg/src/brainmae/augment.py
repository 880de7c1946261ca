"""Spatial augmentation: flips, small affines, elastic deformation.

One transform is sampled per subject and applied identically to every
modality, so cross-modal voxel correspondence is preserved. Intensities
are clamped back to [0, 1] after interpolation.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = False
    affine: bool = False
    elastic: bool = False
    rotate_max_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    translate_max: float = 4.0
    elastic_grid: int = 4
    elastic_sigma: float = 2.0

    @property
    def enabled(self) -> bool:
        return self.flip or self.affine or self.elastic


@dataclass
class SpatialTransform:
    """A sampled transform, reusable across the modalities of one subject."""

    flip_axes: tuple[int, ...] = ()
    affine_matrix: Optional[np.ndarray] = None  # output -> input mapping
    affine_offset: Optional[np.ndarray] = None
    displacement: Optional[np.ndarray] = None  # (3, D, H, W) voxel offsets

    def apply(self, volume: np.ndarray) -> np.ndarray:
        out = volume
        if self.flip_axes:
            out = np.flip(out, axis=self.flip_axes)
        if self.affine_matrix is not None:
            out = ndimage.affine_transform(
                out, self.affine_matrix, offset=self.affine_offset, order=1, mode="nearest"
            )
        if self.displacement is not None:
            grids = np.meshgrid(*(np.arange(s) for s in out.shape), indexing="ij")
            coords = [g + d for g, d in zip(grids, self.displacement)]
            out = ndimage.map_coordinates(out, coords, order=1, mode="nearest")
        return np.ascontiguousarray(out)


def _rotation_matrix(angles_rad: np.ndarray) -> np.ndarray:
    az, ay, ax = angles_rad
    cz, sz = np.cos(az), np.sin(az)
    cy, sy = np.cos(ay), np.sin(ay)
    cx, sx = np.cos(ax), np.sin(ax)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_transform(
    shape: tuple[int, int, int], cfg: AugmentConfig, rng: np.random.Generator
) -> SpatialTransform:
    t = SpatialTransform()
    if cfg.flip:
        t.flip_axes = tuple(int(a) for a in range(3) if rng.random() < 0.5)
    if cfg.affine:
        angles = np.deg2rad(rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg, size=3))
        scale = rng.uniform(*cfg.scale_range)
        # Output->input mapping: rotate and scale about the center, shift by t.
        matrix = _rotation_matrix(angles) / scale
        center = (np.array(shape) - 1) / 2.0
        shift = rng.uniform(-cfg.translate_max, cfg.translate_max, size=3)
        t.affine_matrix = matrix
        t.affine_offset = center - matrix @ center + shift
    if cfg.elastic:
        coarse = rng.normal(0.0, cfg.elastic_sigma, size=(3, cfg.elastic_grid) + (cfg.elastic_grid,) * 2)
        factors = tuple(s / cfg.elastic_grid for s in shape)
        t.displacement = np.stack(
            [ndimage.zoom(coarse[i], factors, order=1, mode="nearest") for i in range(3)]
        )
    return t


def augment(
    volumes: dict[str, np.ndarray], cfg: AugmentConfig, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    """Apply one sampled transform to every modality of a subject."""
    if not cfg.enabled:
        return volumes
    shapes = {v.shape for v in volumes.values()}
    if len(shapes) != 1:
        raise ValueError(f"modalities must share a shape, got {shapes}")
    transform = sample_transform(next(iter(shapes)), cfg, rng)
    return {
        m: np.clip(transform.apply(v), 0.0, 1.0).astype(np.float32)
        for m, v in volumes.items()
    }
