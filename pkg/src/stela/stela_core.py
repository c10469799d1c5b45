"""Sparse temporal local attention: keys, correlation, joint softmax, memory, gated fusion.

Shapes used throughout: ``N`` current voxels, ``F`` past frames, ``k``
neighbours per frame, ``D`` feature width, ``DK`` key width. Neighbour
blocks are stacked as ``(N, F, k, ...)`` so that the softmax can run jointly
over neighbours and frames.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .neighborhood import NeighborhoodTable, gather_neighbors
from .sparse_grid import GridConfigError, Layer, MlpParams, SparseVoxelSet, mlp_backward, mlp_forward


CHECKPOINT_VERSION = 1


class StelaUsageError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def default_key_dim(feature_dim: int) -> int:
    return max(8, feature_dim // 4)


@dataclass
class StelaParams:
    key_adapter: MlpParams
    gate_t: Layer
    gate_m: Layer

    @property
    def feature_dim(self) -> int:
        return self.gate_t.weight.shape[1]

    @property
    def key_dim(self) -> int:
        return self.key_adapter[-1].weight.shape[1]

    @classmethod
    def init(cls, feature_dim: int, seed, key_dim: int | None = None, hidden: int | None = None) -> StelaParams:
        rng = np.random.default_rng(seed)
        d = feature_dim
        dk = key_dim or default_key_dim(d)
        hid = hidden or d

        def glorot(fan_in, fan_out):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        adapter = [Layer(glorot(d, hid), np.zeros(hid), relu=True), Layer(glorot(hid, dk), np.zeros(dk), relu=False)]
        return cls(adapter, Layer(glorot(2 * d, d), np.zeros(d), relu=False),
                   Layer(glorot(2 * d, d), np.zeros(d), relu=False))

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.key_adapter):
            out[f"key_adapter.{i}.weight"] = layer.weight
            out[f"key_adapter.{i}.bias"] = layer.bias
        for name in ("gate_t", "gate_m"):
            layer = getattr(self, name)
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], relu=(True, False)) -> StelaParams:
        adapter = []
        i = 0
        while f"key_adapter.{i}.weight" in tensors:
            adapter.append(Layer(tensors[f"key_adapter.{i}.weight"], tensors[f"key_adapter.{i}.bias"],
                                 relu=relu[i] if i < len(relu) else False))
            i += 1
        gt = Layer(tensors["gate_t.weight"], tensors["gate_t.bias"], relu=False)
        gm = Layer(tensors["gate_m.weight"], tensors["gate_m.bias"], relu=False)
        return cls(adapter, gt, gm)

    def astype(self, dtype) -> StelaParams:
        cast = lambda l: Layer(l.weight.astype(dtype), l.bias.astype(dtype), l.relu)  # noqa: E731
        return StelaParams([cast(l) for l in self.key_adapter], cast(self.gate_t), cast(self.gate_m))


@dataclass
class CorrelationBlock:
    scores: np.ndarray  # (N, F, k), -inf in masked slots
    mask: np.ndarray  # (N, F, k) bool


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def compute_keys(features: np.ndarray, params: StelaParams, keep_cache: bool = False):
    """Apply the shared key adapter row-wise."""
    if features.shape[-1] != params.key_adapter[0].weight.shape[0]:
        raise GridConfigError(f"feature width {features.shape[-1]} != key adapter input")
    return mlp_forward(params.key_adapter, features, keep_cache=keep_cache)


def correlate(keys_q: np.ndarray, keys_local: np.ndarray, mask: np.ndarray, key_dim: int | None = None) -> CorrelationBlock:
    """Scaled dot products between each query key and its neighbour keys.

    ``keys_local`` may be ``(N, k, DK)`` for a single frame or
    ``(N, F, k, DK)``; the block is always returned in the stacked layout.
    """
    if keys_local.ndim == 3:
        keys_local, mask = keys_local[:, None], mask[:, None]
    dk = key_dim or keys_q.shape[-1]
    raw = np.einsum("nd,nfkd->nfk", keys_q, keys_local) / np.sqrt(dk)
    return CorrelationBlock(np.where(mask, raw, -np.inf), mask.astype(bool))


def attention_softmax(block: CorrelationBlock) -> np.ndarray:
    """Softmax over all valid ``(frame, neighbour)`` slots of each query row."""
    scores, mask = block.scores, block.mask
    n = scores.shape[0]
    width = int(np.prod(scores.shape[1:], dtype=np.int64))
    flat = scores.reshape(n, width)
    fmask = mask.reshape(n, width)
    any_valid = fmask.any(axis=1)
    cmax = np.where(any_valid, np.max(np.where(fmask, flat, -np.inf), axis=1, initial=-np.inf), 0.0)
    ex = np.where(fmask, np.exp(np.where(fmask, flat, 0.0) - cmax[:, None]), 0.0)
    denom = ex.sum(axis=1, keepdims=True)
    probs = np.divide(ex, denom, out=np.zeros_like(ex), where=denom > 0)
    return probs.reshape(scores.shape)


def aggregate_memory(probs: np.ndarray, v_local: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Attention-weighted sum of neighbour features, ``(N, D)``."""
    if v_local.ndim == 3:
        v_local, mask, probs = v_local[:, None], mask[:, None], probs.reshape(probs.shape[0], 1, -1)
    return np.einsum("nfk,nfkd->nd", probs * mask, v_local)


def fuse(v_t: np.ndarray, v_m: np.ndarray, params: StelaParams, keep_cache: bool = False):
    """Sigmoid-gated blend of present features and memory."""
    z = np.concatenate([v_t, v_m], axis=1)
    g_t = sigmoid(z @ params.gate_t.weight + params.gate_t.bias)
    g_m = sigmoid(z @ params.gate_m.weight + params.gate_m.bias)
    out = g_t * v_t + g_m * v_m
    if keep_cache:
        return out, (z, g_t, g_m)
    return out


@dataclass
class StelaCache:
    v_t: np.ndarray
    past_features: list[np.ndarray]
    rows: np.ndarray  # (N, F, k) past row per slot, 0 in padding
    mask: np.ndarray
    q_cache: list
    past_key_caches: list
    keys_local: np.ndarray
    v_local: np.ndarray
    probs: np.ndarray
    memory: np.ndarray
    fuse_cache: tuple


@dataclass
class StelaGrads:
    current: np.ndarray
    past: list[np.ndarray]
    params: dict[str, np.ndarray] = field(default_factory=dict)


def _stack_neighbors(past: list[SparseVoxelSet], table: NeighborhoodTable, n: int, d: int):
    if len(past) != len(table):
        raise StelaUsageError(f"{len(past)} past frames but {len(table)} neighbourhood entries")
    if not past:
        return np.zeros((n, 0, 0, d)), np.zeros((n, 0, 0), dtype=np.int64), np.zeros((n, 0, 0), dtype=bool)
    v_blocks, rows, masks = [], [], []
    for frame, entry in zip(past, table):
        v_local, _, mask = gather_neighbors(frame, entry)
        v_blocks.append(v_local)
        rows.append(np.where(mask, entry.neighbor_indices, 0))
        masks.append(mask)
    return np.stack(v_blocks, axis=1), np.stack(rows, axis=1), np.stack(masks, axis=1)


def stela_forward(current: SparseVoxelSet | np.ndarray, past: list[SparseVoxelSet], table: NeighborhoodTable,
                  params: StelaParams, keep_cache: bool = False):
    """Fused features for the current frame given past frames and their neighbourhoods.

    With no past frames the memory is zero and the result is
    ``fuse(V_t, 0)``.
    """
    v_t = current.features if isinstance(current, SparseVoxelSet) else np.asarray(current)
    n, d = v_t.shape
    if d != params.feature_dim:
        raise GridConfigError(f"feature width {d} != STELA width {params.feature_dim}")
    v_local, rows, mask = _stack_neighbors(past, table, n, d)

    keys_q, q_cache = compute_keys(v_t, params, keep_cache=True)
    past_keys, past_caches = [], []
    for frame in past:
        kp, kc = compute_keys(frame.features, params, keep_cache=True)
        past_keys.append(kp)
        past_caches.append(kc)
    if past:
        keys_local = np.stack([kp[rows[:, f]] if len(kp) else np.zeros(rows[:, f].shape + (params.key_dim,))
                               for f, kp in enumerate(past_keys)], axis=1)
    else:
        keys_local = np.zeros((n, 0, 0, params.key_dim))

    block = correlate(keys_q, keys_local, mask, params.key_dim)
    probs = attention_softmax(block)
    memory = aggregate_memory(probs, v_local, mask)
    out, fcache = fuse(v_t, memory, params, keep_cache=True)
    if not keep_cache:
        return out
    cache = StelaCache(v_t, [f.features for f in past], rows, mask, q_cache, past_caches,
                       keys_local, v_local, probs, memory, fcache)
    return out, cache


def stela_backward(cache: StelaCache | None, params: StelaParams, upstream: np.ndarray) -> StelaGrads:
    """Exact gradients of ``sum(upstream * V_out)`` for inputs and parameters."""
    if cache is None:
        raise StelaUsageError("stela_backward needs the cache from stela_forward(keep_cache=True)")
    z, g_t, g_m = cache.fuse_cache
    v_t, memory = cache.v_t, cache.memory
    d = v_t.shape[1]
    grads: dict[str, np.ndarray] = {}

    # fusion
    dv_t = upstream * g_t
    dmem = upstream * g_m
    da_t = upstream * v_t * g_t * (1.0 - g_t)
    da_m = upstream * memory * g_m * (1.0 - g_m)
    grads["gate_t.weight"] = z.T @ da_t
    grads["gate_t.bias"] = da_t.sum(axis=0)
    grads["gate_m.weight"] = z.T @ da_m
    grads["gate_m.bias"] = da_m.sum(axis=0)
    dz = da_t @ params.gate_t.weight.T + da_m @ params.gate_m.weight.T
    dv_t = dv_t + dz[:, :d]
    dmem = dmem + dz[:, d:]

    # memory aggregation
    probs, mask, v_local = cache.probs, cache.mask, cache.v_local
    dprobs = np.einsum("nd,nfkd->nfk", dmem, v_local) * mask
    dv_local = probs[..., None] * dmem[:, None, None, :]

    # joint softmax
    inner = np.sum(probs * dprobs, axis=(1, 2), keepdims=True)
    dscores = probs * (dprobs - inner)

    # correlation
    scale = 1.0 / np.sqrt(params.key_dim)
    keys_q = cache.q_cache[-1]
    dkeys_q = np.einsum("nfk,nfkd->nd", dscores, cache.keys_local) * scale
    dkeys_local = dscores[..., None] * keys_q[:, None, None, :] * scale

    adapter_grads = [[np.zeros_like(l.weight), np.zeros_like(l.bias)] for l in params.key_adapter]

    def accumulate(layer_grads):
        for acc, (gw, gb) in zip(adapter_grads, layer_grads):
            acc[0] += gw
            acc[1] += gb

    dq_in, lg = mlp_backward(params.key_adapter, cache.q_cache, dkeys_q)
    accumulate(lg)
    dv_t = dv_t + dq_in

    d_past = []
    for f, feats in enumerate(cache.past_features):
        rows = cache.rows[:, f].ravel()
        valid = cache.mask[:, f].ravel()
        dfeat = np.zeros_like(feats, dtype=np.float64)
        dkey = np.zeros((len(feats), params.key_dim))
        np.add.at(dfeat, rows[valid], dv_local[:, f].reshape(-1, d)[valid])
        np.add.at(dkey, rows[valid], dkeys_local[:, f].reshape(-1, params.key_dim)[valid])
        dk_in, lg = mlp_backward(params.key_adapter, cache.past_key_caches[f], dkey)
        accumulate(lg)
        d_past.append(dfeat + dk_in)

    for i, (gw, gb) in enumerate(adapter_grads):
        grads[f"key_adapter.{i}.weight"] = gw
        grads[f"key_adapter.{i}.bias"] = gb
    return StelaGrads(dv_t, d_past, grads)


def global_cross_attention(v_t: np.ndarray, past_features: list[np.ndarray], params: StelaParams,
                           chunk: int = 1024) -> np.ndarray:
    """Memory from attending over every past voxel of every frame.

    Processes query rows in chunks so the score matrix stays bounded.
    """
    n, d = v_t.shape
    dtype = v_t.dtype
    if not past_features or sum(len(p) for p in past_features) == 0:
        return np.zeros((n, d), dtype=dtype)
    keys_q = compute_keys(v_t, params)
    all_v = np.concatenate(past_features, axis=0)
    keys_p = compute_keys(all_v, params)
    scale = dtype.type(1.0 / np.sqrt(params.key_dim))
    memory = np.empty((n, d), dtype=dtype)
    for lo in range(0, n, chunk):
        s = (keys_q[lo:lo + chunk] @ keys_p.T) * scale
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=1, keepdims=True)
        memory[lo:lo + chunk] = s @ all_v
    return memory


def local_attention_memory(keys_q: np.ndarray, keys_past: np.ndarray, v_past: np.ndarray,
                           rows: np.ndarray) -> np.ndarray:
    """Local attention for one full past frame (every slot valid).

    Lean path used for timing; ``rows`` is ``(N, k)``.
    """
    kl = keys_past[rows]
    s = np.einsum("nd,nkd->nk", keys_q, kl) * keys_q.dtype.type(1.0 / np.sqrt(keys_q.shape[1]))
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return np.einsum("nk,nkd->nd", s, v_past[rows])


def dumps_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    """Named-tensor container, little-endian.

    Layout: version byte, uint32 tensor count, then per tensor a uint16
    name length, UTF-8 name, uint8 rank, uint32 dims and float64 payload.
    """
    parts = [struct.pack("<BI", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    try:
        version, count = struct.unpack_from("<BI", data, 0)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 5
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(data):
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(data, "<f8", size, pos).reshape(shape).copy()
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_checkpoint(tensors))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads_checkpoint(Path(path).read_bytes())
