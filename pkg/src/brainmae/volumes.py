"""Volume file IO, intensity normalization and patch partitioning.

File formats:

* Scan volume (``BAV1``): bytes 0-3 magic ``b"BAV1"``, bytes 4-15 three
  little-endian uint32 dims D, H, W, then D*H*W little-endian float32
  values in row-major z, y, x order.
* Region atlas (``BAL1``): same header layout with magic ``b"BAL1"`` and a
  uint16 payload of region labels; region 0 is background.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, TruncationError

VOLUME_MAGIC = b"BAV1"
ATLAS_MAGIC = b"BAL1"
NORM_EPS = 1e-8

_HEADER = struct.Struct("<4s3I")


def _write_grid(path, magic: bytes, data: np.ndarray, dtype) -> None:
    data = np.ascontiguousarray(data, dtype=dtype)
    if data.ndim != 3:
        raise DataError(f"expected a 3D grid, got shape {data.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, *data.shape))
        fh.write(data.tobytes())


def _load_grid(path, magic: bytes, dtype) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    got_magic, d, h, w = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    payload = raw[_HEADER.size :]
    expected = d * h * w * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise TruncationError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(d, h, w).copy()


def write_volume(path, data: np.ndarray) -> None:
    _write_grid(path, VOLUME_MAGIC, data, np.dtype("<f4"))


def load_volume(path) -> np.ndarray:
    """Load a BAV1 scan volume as a float32 array of shape (D, H, W)."""
    return _load_grid(path, VOLUME_MAGIC, np.dtype("<f4"))


def write_atlas(path, labels: np.ndarray) -> None:
    _write_grid(path, ATLAS_MAGIC, labels, np.dtype("<u2"))


def load_atlas(path) -> np.ndarray:
    """Load a BAL1 region-label grid as a uint16 array of shape (D, H, W)."""
    return _load_grid(path, ATLAS_MAGIC, np.dtype("<u2"))


def normalize_volume(v: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1] with an epsilon-guarded denominator.

    A constant volume maps to all zeros. Non-finite voxels are rejected.
    """
    v = np.asarray(v)
    if not np.all(np.isfinite(v)):
        raise DataError("volume contains non-finite voxels")
    lo = float(v.min())
    hi = float(v.max())
    return ((v - lo) / (hi - lo + NORM_EPS)).astype(np.float32)


@dataclass(frozen=True)
class PatchGrid:
    """Partition geometry of a volume into non-overlapping cubic patches.

    Patch indices run row-major over block coordinates in z, then y,
    then x, so index <-> (z, y, x) is a bijection.
    """

    shape: tuple[int, int, int]
    patch: int

    def __post_init__(self):
        if self.patch <= 0:
            raise ConfigError(f"patch size must be positive, got {self.patch}")
        if any(s % self.patch for s in self.shape):
            raise ConfigError(
                f"volume shape {self.shape} not divisible by patch size {self.patch}"
            )

    @property
    def blocks(self) -> tuple[int, int, int]:
        return tuple(s // self.patch for s in self.shape)

    @property
    def n_patches(self) -> int:
        bz, by, bx = self.blocks
        return bz * by * bx

    @property
    def patch_voxels(self) -> int:
        return self.patch**3

    def patch_coords(self, index: int) -> tuple[int, int, int]:
        """Block coordinates (z, y, x) of a patch index."""
        bz, by, bx = self.blocks
        if not 0 <= index < self.n_patches:
            raise DataError(f"patch index {index} out of range [0, {self.n_patches})")
        z, rest = divmod(index, by * bx)
        y, x = divmod(rest, bx)
        return z, y, x

    def coords_to_index(self, z: int, y: int, x: int) -> int:
        _, by, bx = self.blocks
        return (z * by + y) * bx + x


def partition_patches(v: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Split a volume into flattened patches, shape (N, patch**3)."""
    if tuple(v.shape) != tuple(grid.shape):
        raise ConfigError(f"volume shape {v.shape} does not match grid {grid.shape}")
    p = grid.patch
    bz, by, bx = grid.blocks
    blocks = v.reshape(bz, p, by, p, bx, p).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(grid.n_patches, grid.patch_voxels)


def unpartition_patches(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Inverse of :func:`partition_patches`; voxel-exact reconstruction."""
    p = grid.patch
    bz, by, bx = grid.blocks
    if patches.shape != (grid.n_patches, grid.patch_voxels):
        raise ConfigError(
            f"patches shape {patches.shape} does not match grid "
            f"({grid.n_patches}, {grid.patch_voxels})"
        )
    blocks = patches.reshape(bz, by, bx, p, p, p).transpose(0, 3, 1, 4, 2, 5)
    return blocks.reshape(grid.shape)
