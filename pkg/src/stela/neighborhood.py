"""Sparse local neighbourhoods between voxel sets of different frames.

For every current-frame voxel the ``k`` nearest non-empty past voxels are
found by Euclidean distance between integer grid indices. Distances are
compared as exact integer squares; ties go to the smaller past row.

Two implementations share one contract: :func:`knn_bruteforce` (full
distance matrix, stable sort) and :func:`knn_neighborhood` (spatial hash
over index cells with ring expansion). They must agree exactly.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .sparse_grid import SparseVoxelSet

_PAD = -1


class NeighborhoodConfigError(ValueError):
    pass


class CorruptTableError(IndexError):
    pass


@dataclass(frozen=True)
class NeighborhoodEntry:
    """Neighbourhood of one past frame.

    ``neighbor_indices`` and ``sq_distances`` are ``(N, k)`` with ``-1`` in
    padding slots; ``neighbor_count[i] == min(k, N_past)``.
    """

    neighbor_indices: np.ndarray
    neighbor_count: np.ndarray
    sq_distances: np.ndarray

    @property
    def k(self) -> int:
        return self.neighbor_indices.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.neighbor_indices != _PAD

    @property
    def distances(self) -> np.ndarray:
        return np.where(self.valid, np.sqrt(np.maximum(self.sq_distances, 0)), np.inf)

    def __eq__(self, other):
        if not isinstance(other, NeighborhoodEntry):
            return NotImplemented
        return (np.array_equal(self.neighbor_indices, other.neighbor_indices)
                and np.array_equal(self.neighbor_count, other.neighbor_count)
                and np.array_equal(self.sq_distances, other.sq_distances))


# one entry per past frame, index 0 is frame t-1
NeighborhoodTable = list[NeighborhoodEntry]


def _check(k: int):
    if k < 1:
        raise NeighborhoodConfigError(f"k must be >= 1, got {k}")


def _empty_entry(n: int, k: int) -> NeighborhoodEntry:
    return NeighborhoodEntry(
        np.full((n, k), _PAD, dtype=np.int64),
        np.zeros(n, dtype=np.int64),
        np.full((n, k), _PAD, dtype=np.int64),
    )


def _pairwise_sq(q: np.ndarray, p: np.ndarray, wrap_w: int | None) -> np.ndarray:
    diff = np.abs(q[:, None, :] - p[None, :, :])
    if wrap_w is not None:
        diff[..., 1] = np.minimum(diff[..., 1], wrap_w - diff[..., 1])
    return np.einsum("nmc,nmc->nm", diff, diff)


def knn_bruteforce(query: SparseVoxelSet, past: SparseVoxelSet, k: int,
                   wrap_w: int | None = None) -> NeighborhoodEntry:
    """Exhaustive reference: full distance matrix plus stable argsort.

    ``wrap_w`` (extension, off by default) measures the azimuth axis
    cyclically with period ``wrap_w``.
    """
    _check(k)
    n, m = len(query), len(past)
    out = _empty_entry(n, k)
    if n == 0 or m == 0:
        return out
    kk = min(k, m)
    d2 = _pairwise_sq(query.indices, past.indices, wrap_w)
    order = np.argsort(d2, axis=1, kind="stable")[:, :kk]
    out.neighbor_indices[:, :kk] = order
    out.sq_distances[:, :kk] = np.take_along_axis(d2, order, axis=1)
    out.neighbor_count[:] = kk
    return out


@lru_cache(maxsize=64)
def _shell(r: int) -> np.ndarray:
    """Integer offsets with Chebyshev norm exactly ``r``."""
    rng = np.arange(-r, r + 1)
    cube = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    shell = cube[np.abs(cube).max(axis=1) == r]
    shell.setflags(write=False)
    return shell


def _auto_cell(past_idx: np.ndarray, k: int) -> int:
    extent = past_idx.max(axis=0) - past_idx.min(axis=0) + 1
    density = len(past_idx) / float(np.prod(extent))
    # aim for roughly k/2 occupied voxels per cell
    return max(1, int(round((0.5 * k / density) ** (1.0 / 3.0))))


class _CellHash:
    """Past voxels bucketed into cubic cells of edge ``s`` grid units."""

    def __init__(self, past_idx: np.ndarray, s: int):
        self.s = s
        cells = past_idx // s
        self.cmin = cells.min(axis=0)
        self.cmax = cells.max(axis=0)
        self.dims = self.cmax - self.cmin + 1
        keys = self._key(cells)
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]

    def _key(self, cells: np.ndarray) -> np.ndarray:
        c = cells - self.cmin
        return (c[..., 0] * self.dims[1] + c[..., 1]) * self.dims[2] + c[..., 2]

    def lookup(self, cells: np.ndarray):
        """Row ranges ``[start, end)`` in :attr:`order` for in-box cells."""
        inside = np.all((cells >= self.cmin) & (cells <= self.cmax), axis=-1)
        keys = self._key(cells[inside])
        start = np.searchsorted(self.sorted_keys, keys, "left")
        end = np.searchsorted(self.sorted_keys, keys, "right")
        return inside, start, end


def knn_neighborhood(query: SparseVoxelSet, past: SparseVoxelSet, k: int,
                     wrap_w: int | None = None, cell_size: int | None = None) -> NeighborhoodEntry:
    """Exact k nearest past voxels for every query voxel via a cell hash.

    Rings of cells around each query's cell are visited in increasing
    Chebyshev order. After ring ``r`` every unvisited voxel is at least
    ``r*s + 1`` grid units away, so a query is finished once its k-th best
    squared distance is strictly below ``(r*s + 1)**2`` (strict, so that an
    equal-distance voxel with a smaller row can't be missed).
    """
    _check(k)
    n, m = len(query), len(past)
    if n == 0 or m == 0:
        return _empty_entry(n, k)
    kk = min(k, m)
    if wrap_w is not None or kk == m:
        # every past voxel is selected, or the metric is cyclic: exhaustive path
        return knn_bruteforce(query, past, k, wrap_w)

    q, p = query.indices, past.indices
    s = cell_size or _auto_cell(p, kk)
    grid = _CellHash(p, s)
    cq = q // s
    # first ring that can touch the past bounding box, and the ring covering all of it
    r_first = np.maximum(np.maximum(grid.cmin - cq, cq - grid.cmax), 0).max(axis=1)
    r_last = np.maximum(cq - grid.cmin, grid.cmax - cq).max(axis=1)

    best_row = np.full((n, kk), _PAD, dtype=np.int64)
    best_d2 = np.full((n, kk), _PAD, dtype=np.int64)
    found = np.zeros(n, dtype=np.int64)
    pending = np.ones(n, dtype=bool)
    key_scale = int(np.sum(np.ptp(np.vstack([q, p]), axis=0) ** 2)) + 1
    packed_keys = n * key_scale * m < 2**62

    r = 0
    while pending.any():
        active = np.flatnonzero(pending & (r >= r_first))
        if len(active):
            offsets = _shell(r)
            cells = cq[active, None, :] + offsets[None, :, :]
            inside, start, end = grid.lookup(cells)
            qpos = np.broadcast_to(np.arange(len(active))[:, None], inside.shape)[inside]
            counts = end - start
            total = int(counts.sum())
            if total:
                cand_q = np.repeat(qpos, counts)
                first = np.repeat(start - np.cumsum(counts) + counts, counts)
                cand_row = grid.order[first + np.arange(total)]
                diff = q[active[cand_q]] - p[cand_row]
                cand_d2 = np.einsum("ij,ij->i", diff, diff)

                held = best_row[active] != _PAD
                hq, hslot = np.nonzero(held)
                all_q = np.concatenate([hq, cand_q])
                all_row = np.concatenate([best_row[active][held], cand_row])
                all_d2 = np.concatenate([best_d2[active][held], cand_d2])
                if packed_keys:
                    order = np.argsort((all_q * key_scale + all_d2) * m + all_row)
                else:
                    order = np.lexsort((all_row, all_d2, all_q))
                all_q, all_row, all_d2 = all_q[order], all_row[order], all_d2[order]
                group_start = np.searchsorted(all_q, np.arange(len(active)), "left")
                rank = np.arange(len(all_q)) - group_start[all_q]
                keep = rank < kk
                rows_a = active[all_q[keep]]
                best_row[rows_a, rank[keep]] = all_row[keep]
                best_d2[rows_a, rank[keep]] = all_d2[keep]
                found[active] = np.minimum(np.bincount(all_q, minlength=len(active)), kk)

            fa = found[active]
            kth = best_d2[active, kk - 1]
            bound = (r * s + 1) ** 2
            done = (r >= r_last[active]) | ((fa == kk) & (kth < bound))
            pending[active[done]] = False
        r += 1

    out = _empty_entry(n, k)
    out.neighbor_indices[:, :kk] = best_row
    out.sq_distances[:, :kk] = best_d2
    out.neighbor_count[:] = kk
    return out


def build_table(current: SparseVoxelSet, past_frames: list[SparseVoxelSet], k: int,
                **kwargs) -> NeighborhoodTable:
    return [knn_neighborhood(current, past, k, **kwargs) for past in past_frames]


def gather_neighbors(past: SparseVoxelSet, entry: NeighborhoodEntry):
    """Copy neighbour features/indices into dense ``(N, k, ...)`` blocks.

    Returns ``(V_local, I_local, mask)``; padding slots are zero-filled.
    """
    rows = entry.neighbor_indices
    mask = rows != _PAD
    if np.any(rows[mask] >= len(past)) or np.any(rows[~mask] != _PAD) or np.any(rows < _PAD):
        raise CorruptTableError("neighbour row outside the past voxel set")
    safe = np.where(mask, rows, 0)
    n, k = rows.shape
    if len(past):
        v_local = past.features[safe] * mask[..., None]
        i_local = past.indices[safe] * mask[..., None]
    else:
        v_local = np.zeros((n, k, past.dim))
        i_local = np.zeros((n, k, 3), dtype=np.int64)
    return v_local, i_local, mask


def dump_table_csv(path: str | os.PathLike, table: NeighborhoodTable) -> None:
    """Write ``i, n, j_rank, past_row, distance`` rows for every valid slot."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "n", "j_rank", "past_row", "distance"])
        for n, entry in enumerate(table, start=1):
            dist = entry.distances
            for i, j in zip(*np.nonzero(entry.valid)):
                writer.writerow([int(i), n, int(j), int(entry.neighbor_indices[i, j]), repr(float(dist[i, j]))])
