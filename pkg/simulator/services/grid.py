"""
Dense axis-aligned voxel grids with trilinear sampling and its adjoint

Layout: data is a flat float64 array in x-fastest order, i.e. linear index
i = ix + nx * (iy + ny * iz). Voxel (ix, iy, iz) is centered at
origin + (index + 0.5) * resolution.
"""
import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from models.errors import BoundaryError, DomainError
from utils.io import atomic_write_bytes

HEADER = struct.Struct("<3dd3I")
SNAP_TOL = 1e-9

_CORNERS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)[:, ::-1]


@dataclass
class VoxelGrid:
    origin: np.ndarray
    resolution: float
    dims: Tuple[int, int, int]
    data: np.ndarray = field(default=None)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.resolution <= 0 or any(d <= 0 for d in self.dims):
            raise DomainError(f"invalid grid geometry: resolution={self.resolution}, dims={self.dims}")
        if self.data is None:
            self.data = np.zeros(self.size, dtype=np.float64)
        self.data = np.ascontiguousarray(self.data, dtype=np.float64).ravel()
        if self.data.size != self.size:
            raise DomainError(f"data length {self.data.size} != {self.size}")

    # ==================== CONSTRUCTION ====================

    @classmethod
    def covering(cls, lo, hi, resolution: float, padding: float = 0.0, fill: float = 0.0) -> "VoxelGrid":
        """Smallest grid whose voxels cover [lo - padding, hi + padding]."""
        lo = np.asarray(lo, dtype=np.float64) - padding
        hi = np.asarray(hi, dtype=np.float64) + padding
        dims = tuple(max(2, int(math.ceil((h - l) / resolution - 1e-9))) for l, h in zip(lo, hi))
        return cls(lo, resolution, dims, np.full(int(np.prod(dims)), fill, dtype=np.float64))

    def like(self, fill: float = 0.0) -> "VoxelGrid":
        return VoxelGrid(self.origin.copy(), self.resolution, self.dims, np.full(self.size, fill))

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.origin.copy(), self.resolution, self.dims, self.data.copy())

    def same_geometry(self, other: "VoxelGrid") -> bool:
        return (
            self.dims == other.dims
            and self.resolution == other.resolution
            and np.array_equal(self.origin, other.origin)
        )

    # ==================== INDEXING ====================

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def linear_index(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        return np.ravel_multi_index(tuple(ijk.T), self.dims, order="F")

    def unravel(self, linear: Union[int, np.ndarray]) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(linear, dtype=np.int64), self.dims, order="F"), axis=-1)

    def voxel_center(self, index: Union[int, np.ndarray]) -> np.ndarray:
        """Center(s) of voxel(s) given linear indices."""
        return self.origin + (self.unravel(index) + 0.5) * self.resolution

    def centers(self) -> np.ndarray:
        return self.voxel_center(np.arange(self.size))

    def world_to_index(self, p: np.ndarray) -> np.ndarray:
        """Integer 3-index of the voxel containing p (unclamped)."""
        return np.floor((np.asarray(p, dtype=np.float64) - self.origin) / self.resolution).astype(np.int64)

    def contains_index(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk)
        return np.all((ijk >= 0) & (ijk < np.asarray(self.dims)), axis=-1)

    def nearest_index(self, p: np.ndarray) -> np.ndarray:
        """Linear index of the voxel containing p, clamped to the grid."""
        ijk = np.clip(self.world_to_index(p), 0, np.asarray(self.dims) - 1)
        return self.linear_index(ijk.reshape(-1, 3)).reshape(np.shape(p)[:-1])

    # ==================== INTERIOR ====================

    @property
    def interior_lo(self) -> np.ndarray:
        return self.origin + 0.5 * self.resolution

    @property
    def interior_hi(self) -> np.ndarray:
        return self.origin + (np.asarray(self.dims) - 0.5) * self.resolution

    def in_interior(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        tol = SNAP_TOL * self.resolution
        return np.all((points >= self.interior_lo - tol) & (points <= self.interior_hi + tol), axis=-1)

    # ==================== INTERPOLATION ====================

    def trilinear_weights(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Corner voxels and weights for every point.

        Args:
            points: (M, 3) positions inside the sampleable interior

        Returns:
            (indices (M, 8) linear voxel ids, weights (M, 8) summing to 1)
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inside = self.in_interior(points)
        if not np.all(inside):
            bad = points[~inside][0]
            raise BoundaryError(f"point {bad.tolist()} outside the sampleable interior")

        u = (points - self.origin) / self.resolution - 0.5
        nearest = np.round(u)
        u = np.where(np.abs(u - nearest) < SNAP_TOL, nearest, u)
        base = np.clip(np.floor(u).astype(np.int64), 0, np.asarray(self.dims) - 2)
        frac = np.clip(u - base, 0.0, 1.0)

        corners = base[:, None, :] + _CORNERS[None, :, :]
        axis_weights = np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
        weights = np.prod(axis_weights, axis=-1)
        dims = self.dims
        indices = corners[..., 0] + dims[0] * (corners[..., 1] + dims[1] * corners[..., 2])
        return indices, weights

    def sample(self, points: np.ndarray) -> np.ndarray:
        indices, weights = self.trilinear_weights(points)
        return np.sum(self.data[indices] * weights, axis=-1)

    def adjoint(self, points: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        """Gradient of sum(upstream * sample(points)) with respect to data."""
        indices, weights = self.trilinear_weights(points)
        contributions = weights * np.asarray(upstream, dtype=np.float64).reshape(-1, 1)
        return np.bincount(indices.ravel(), weights=contributions.ravel(), minlength=self.size)

    # ==================== SERIALIZATION ====================

    def to_bytes(self) -> bytes:
        header = HEADER.pack(*self.origin, self.resolution, *self.dims)
        return header + self.data.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "VoxelGrid":
        if len(payload) < HEADER.size:
            raise DomainError("grid dump shorter than its header")
        values = HEADER.unpack_from(payload)
        dims = tuple(values[4:7])
        data = np.frombuffer(payload, dtype="<f8", offset=HEADER.size)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise DomainError(f"grid dump holds {data.size} values, expected {dims}")
        return cls(np.array(values[0:3]), values[3], dims, data.astype(np.float64))

    def save(self, path: Union[str, Path]) -> Path:
        return atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "VoxelGrid":
        return cls.from_bytes(Path(path).read_bytes())


def trilinear_sample(g: VoxelGrid, p: np.ndarray) -> Union[float, np.ndarray]:
    """Sample g at one point (3,) or many (M, 3)."""
    p = np.asarray(p, dtype=np.float64)
    values = g.sample(p.reshape(-1, 3))
    return float(values[0]) if p.ndim == 1 else values


def trilinear_adjoint(g: VoxelGrid, p: np.ndarray, upstream, out: np.ndarray | None = None) -> np.ndarray:
    """Accumulate upstream * corner weight into out (flat, grid-sized)."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    upstream = np.broadcast_to(np.asarray(upstream, dtype=np.float64), (len(p),))
    grad = g.adjoint(p, upstream)
    if out is None:
        return grad
    out += grad
    return out
