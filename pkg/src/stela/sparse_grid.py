"""Cylindrical partitioning and the sparse (V, I) voxel layout.

A frame is turned into a :class:`SparseVoxelSet`: every point goes through a
shared MLP, and points landing in the same cylindrical voxel are reduced by
elementwise max. Rows are kept lexicographically sorted by ``(h, w, l)``.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import scan_point_features

CONTAINER_VERSION = 1


class GridConfigError(ValueError):
    pass


class InvariantViolation(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    rho_range: tuple[float, float] = (0.0, 50.0)
    z_range: tuple[float, float] = (-4.0, 2.0)
    resolution: tuple[int, int, int] = (240, 180, 16)
    feature_dim: int = 16
    # scale x, y, z, rho, theta to roughly unit range before the point MLP
    normalize: bool = False

    def __post_init__(self):
        (r0, r1), (z0, z1) = self.rho_range, self.z_range
        if not (r1 > r0 >= 0):
            raise GridConfigError(f"bad rho range {self.rho_range}")
        if not z1 > z0:
            raise GridConfigError(f"bad z range {self.z_range}")
        if len(self.resolution) != 3 or min(self.resolution) < 1:
            raise GridConfigError(f"bad resolution {self.resolution}")
        if self.feature_dim < 1:
            raise GridConfigError("feature_dim must be >= 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(r) for r in self.resolution)

    @property
    def cell_size(self) -> np.ndarray:
        (r0, r1), (z0, z1) = self.rho_range, self.z_range
        h, w, l = self.shape
        return np.array([(r1 - r0) / h, 2.0 * np.pi / w, (z1 - z0) / l])

    @property
    def num_cells(self) -> int:
        h, w, l = self.shape
        return h * w * l


@dataclass(frozen=True)
class SparseVoxelSet:
    """Features ``V`` (N x D) and grid indices ``I`` (N x 3) of non-empty voxels."""

    features: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features)
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        if feats.ndim != 2 or feats.shape[0] != idx.shape[0]:
            raise InvariantViolation(f"feature rows {feats.shape} do not match indices {idx.shape}")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return self.indices.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @classmethod
    def empty(cls, dim: int) -> SparseVoxelSet:
        return cls(np.zeros((0, dim)), np.zeros((0, 3), dtype=np.int64))

    def validate(self, cfg: GridConfig | None = None) -> None:
        idx = self.indices
        if len(idx) > 1:
            keys = np.lexsort(idx.T[::-1])
            if not np.array_equal(keys, np.arange(len(idx))):
                raise InvariantViolation("index rows are not lexicographically sorted")
            if np.any(np.all(idx[1:] == idx[:-1], axis=1)):
                raise InvariantViolation("duplicate index rows")
        if cfg is not None and len(idx):
            if idx.min() < 0 or np.any(idx.max(axis=0) >= np.array(cfg.shape)):
                raise InvariantViolation("index outside grid resolution")


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (in, out); y = x @ weight + bias
    bias: np.ndarray
    relu: bool = True


MlpParams = list[Layer]


def init_mlp(widths, seed: int | np.random.Generator, relu_last: bool = False) -> MlpParams:
    """Glorot-uniform MLP with ReLU between layers.

    ``widths`` lists every width including input and output, so a four-layer
    network needs five entries.
    """
    rng = np.random.default_rng(seed)
    layers = []
    n = len(widths) - 1
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(Layer(w, np.zeros(fan_out), relu=(i < n - 1) or relu_last))
    return layers


def point_encoder(in_dim: int, cfg: GridConfig, seed, hidden=(64, 128, 256)) -> MlpParams:
    """Default four-layer point MLP ``in_dim -> hidden... -> D``."""
    return init_mlp([in_dim, *hidden, cfg.feature_dim], seed)


def mlp_forward(params: MlpParams, x: np.ndarray, keep_cache: bool = False):
    """Row-wise MLP evaluation. Returns ``out`` or ``(out, cache)``."""
    if params and x.shape[-1] != params[0].weight.shape[0]:
        raise GridConfigError(f"input width {x.shape[-1]} != MLP input {params[0].weight.shape[0]}")
    cache = [x]
    h = x
    for layer in params:
        h = h @ layer.weight + layer.bias
        if layer.relu:
            h = np.maximum(h, 0.0)
        cache.append(h)
    return (h, cache) if keep_cache else h


def mlp_backward(params: MlpParams, cache, dout: np.ndarray):
    """Backprop through :func:`mlp_forward`; returns ``(dx, [(dW, db), ...])``."""
    grads = [None] * len(params)
    g = dout
    for i in range(len(params) - 1, -1, -1):
        layer = params[i]
        if layer.relu:
            g = g * (cache[i + 1] > 0)
        grads[i] = (cache[i].T @ g, g.sum(axis=0))
        g = g @ layer.weight.T
    return g, grads


def voxel_index(cyl: np.ndarray, cfg: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Bin cylindrical coordinates into ``(h, w, l)``.

    Returns ``(indices, in_bounds)``. Out-of-bounds rows (rho or z outside
    the half-open ranges) carry ``-1`` indices and ``in_bounds == False``.
    """
    cyl = np.asarray(cyl, dtype=np.float64)
    rho, theta, z = cyl[..., 0], cyl[..., 1], cyl[..., 2]
    (r0, r1), (z0, z1) = cfg.rho_range, cfg.z_range
    d = cfg.cell_size
    h, w, l = cfg.shape
    inb = (rho >= r0) & (rho < r1) & (z >= z0) & (z < z1)
    # clips guard against float rounding at the upper edges
    hi = np.clip(np.floor((rho - r0) / d[0]), 0, h - 1)
    wi = np.clip(np.floor((theta + np.pi) / d[1]), 0, w - 1)
    li = np.clip(np.floor((z - z0) / d[2]), 0, l - 1)
    idx = np.stack([hi, wi, li], axis=-1).astype(np.int64)
    idx[~inb] = -1
    return idx, inb


def normalize_features(feats: np.ndarray, cfg: GridConfig) -> np.ndarray:
    if not cfg.normalize:
        return feats
    r = cfg.rho_range[1]
    zs = max(abs(cfg.z_range[0]), abs(cfg.z_range[1]))
    scale = np.array([1 / r, 1 / r, 1 / zs, 1 / r, 1 / np.pi, 1.0])
    return feats * scale


def partition_scan(points: np.ndarray, cfg: GridConfig):
    """Cylindrical features and voxel assignments of the in-bounds points.

    Returns ``(features, assignments, keep)`` where ``keep`` masks the input
    points that survived the bounds check.
    """
    cyl, feats = scan_point_features(points)
    idx, keep = voxel_index(cyl, cfg)
    return normalize_features(feats[keep], cfg), idx[keep], keep


def _linear_keys(idx: np.ndarray, shape) -> np.ndarray:
    _, w, l = shape
    return (idx[:, 0] * w + idx[:, 1]) * l + idx[:, 2]


def _unlinear(keys: np.ndarray, shape) -> np.ndarray:
    _, w, l = shape
    return np.stack([keys // (w * l), (keys // l) % w, keys % l], axis=1)


@dataclass
class PoolRouting:
    """Bookkeeping needed to backprop through max pooling."""

    inverse: np.ndarray  # point -> voxel row
    argmax: np.ndarray  # (N, D) winning point per voxel channel


def max_pool(point_feats: np.ndarray, assignments: np.ndarray, cfg: GridConfig):
    """Reduce point features into voxels by elementwise max.

    Returns ``(SparseVoxelSet, PoolRouting)``. Ties go to the lowest point
    index, which keeps the routing independent of input order only up to
    ties; the pooled values themselves are order independent.
    """
    assignments = np.asarray(assignments, dtype=np.int64).reshape(-1, 3)
    d = point_feats.shape[1]
    if len(assignments) == 0:
        return SparseVoxelSet.empty(d), PoolRouting(np.zeros(0, np.int64), np.zeros((0, d), np.int64))
    keys = _linear_keys(assignments, cfg.shape)
    uniq, inverse = np.unique(keys, return_inverse=True)
    n = len(uniq)
    pooled = np.full((n, d), -np.inf)
    np.maximum.at(pooled, inverse, point_feats)
    winners = point_feats == pooled[inverse]
    argmax = np.full((n, d), len(point_feats), dtype=np.int64)
    pts, chans = np.nonzero(winners)
    np.minimum.at(argmax, (inverse[pts], chans), pts)
    return SparseVoxelSet(pooled, _unlinear(uniq, cfg.shape)), PoolRouting(inverse, argmax)


def max_pool_backward(routing: PoolRouting, dpooled: np.ndarray, n_points: int) -> np.ndarray:
    dpoints = np.zeros((n_points, dpooled.shape[1]))
    chans = np.broadcast_to(np.arange(dpooled.shape[1]), dpooled.shape)
    np.add.at(dpoints, (routing.argmax.ravel(), chans.ravel()), dpooled.ravel())
    return dpoints


def encode_points(point_feats: np.ndarray, assignments: np.ndarray, params: MlpParams,
                  cfg: GridConfig) -> SparseVoxelSet:
    """Run the point MLP and max-pool the outputs into a sparse voxel set."""
    point_feats = np.asarray(point_feats, dtype=np.float64).reshape(len(assignments), -1)
    if params and params[-1].weight.shape[1] != cfg.feature_dim:
        raise GridConfigError(f"MLP output {params[-1].weight.shape[1]} != feature_dim {cfg.feature_dim}")
    out = mlp_forward(params, point_feats)
    return max_pool(out, assignments, cfg)[0]


def decompose(grid: np.ndarray, cfg: GridConfig | None = None) -> SparseVoxelSet:
    """Split a ``D x H x W x L`` tensor into its non-zero voxels."""
    grid = np.asarray(grid)
    if cfg is not None and grid.shape != (cfg.feature_dim, *cfg.shape):
        raise GridConfigError(f"grid shape {grid.shape} does not match config")
    occupied = np.any(grid != 0, axis=0)
    idx = np.argwhere(occupied)  # C order == lexicographic (h, w, l)
    feats = grid[:, idx[:, 0], idx[:, 1], idx[:, 2]].T
    return SparseVoxelSet(np.ascontiguousarray(feats), idx)


def densify(sparse: SparseVoxelSet, cfg: GridConfig) -> np.ndarray:
    idx = sparse.indices
    if len(idx) and (idx.min() < 0 or np.any(idx.max(axis=0) >= np.array(cfg.shape))):
        raise InvariantViolation("index outside grid resolution")
    keys = _linear_keys(idx, cfg.shape)
    if len(np.unique(keys)) != len(keys):
        raise InvariantViolation("duplicate voxel indices")
    grid = np.zeros((sparse.dim, *cfg.shape), dtype=sparse.features.dtype)
    grid[:, idx[:, 0], idx[:, 1], idx[:, 2]] = sparse.features.T
    return grid


def dumps_sparse(sparse: SparseVoxelSet) -> bytes:
    """Binary container: version byte, N and D as uint32, int32 I, float32 V."""
    buf = io.BytesIO()
    buf.write(struct.pack("<BII", CONTAINER_VERSION, len(sparse), sparse.dim))
    buf.write(sparse.indices.astype("<i4").tobytes())
    buf.write(sparse.features.astype("<f4").tobytes())
    return buf.getvalue()


def loads_sparse(data: bytes) -> SparseVoxelSet:
    head = struct.calcsize("<BII")
    if len(data) < head:
        raise InvariantViolation("truncated sparse container")
    version, n, d = struct.unpack_from("<BII", data)
    if version != CONTAINER_VERSION:
        raise InvariantViolation(f"unsupported container version {version}")
    if len(data) != head + 12 * n + 4 * n * d:
        raise InvariantViolation("sparse container length does not match header")
    idx = np.frombuffer(data, "<i4", 3 * n, head).reshape(n, 3).astype(np.int64)
    feats = np.frombuffer(data, "<f4", n * d, head + 12 * n).reshape(n, d).astype(np.float32)
    return SparseVoxelSet(feats, idx)


def save_sparse(path: str | os.PathLike, sparse: SparseVoxelSet) -> None:
    Path(path).write_bytes(dumps_sparse(sparse))


def load_sparse(path: str | os.PathLike) -> SparseVoxelSet:
    return loads_sparse(Path(path).read_bytes())
