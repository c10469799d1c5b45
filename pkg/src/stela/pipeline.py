"""Desk-scale segmentation network around the STELA module, with training and evaluation.

The network is: per-point MLP -> voxel max-pool -> shared MLP stage per
scale (stand-in for the convolutional encoder) -> optional STELA fusion
with past frames -> MLP decoder -> per-voxel class logits. Points inherit
the prediction of their voxel at evaluation time.

Training is plain gradient descent on cross-entropy plus Lovasz-softmax,
one step per frame, in three stages: single-frame pretraining, STELA-only
warmup with everything else frozen, then joint fine-tuning with a
decay-on-plateau learning rate.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidPose, align_to_frame
from .losses_metrics import (
    ClassTable,
    ConfusionMatrix,
    accumulate_confusion,
    lovasz_softmax,
    softmax,
    weighted_cross_entropy,
)
from .neighborhood import NeighborhoodTable, build_table
from .sparse_grid import (
    GridConfig,
    Layer,
    MlpParams,
    PoolRouting,
    SparseVoxelSet,
    init_mlp,
    max_pool,
    max_pool_backward,
    mlp_backward,
    mlp_forward,
    partition_scan,
)
from .stela_core import StelaParams, stela_backward, stela_forward

log = logging.getLogger(__name__)

POINT_FEATURES = 6


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class FrameInput:
    points: np.ndarray  # (N, 4) sensor frame
    labels: np.ndarray | None  # (N,) training ids, ignore allowed
    pose: RigidPose


@dataclass
class Partition:
    feats: np.ndarray
    assign: np.ndarray
    indices: np.ndarray  # (V, 3) sorted voxel indices
    inverse: np.ndarray  # in-bounds point -> voxel row


def _partition(points: np.ndarray, grid: GridConfig) -> tuple[Partition, np.ndarray]:
    feats, assign, keep = partition_scan(points, grid)
    # pooling only to learn the voxel layout; features are recomputed per step
    svs, routing = max_pool(np.zeros((len(assign), 1)), assign, grid)
    return Partition(feats, assign, svs.indices, routing.inverse), keep


@dataclass
class Sample:
    """One current frame with its (optionally aligned) past frames, partitioned."""

    current: Partition
    past: list[Partition]
    table: NeighborhoodTable
    voxel_labels: np.ndarray
    point_labels: np.ndarray | None  # in-bounds points only


def voxel_majority(labels: np.ndarray, inverse: np.ndarray, n_voxels: int, table: ClassTable) -> np.ndarray:
    """Most frequent non-ignore label per voxel (lowest id on ties)."""
    valid = labels != table.ignore_id
    counts = np.zeros((n_voxels, table.num_classes), dtype=np.int64)
    np.add.at(counts, (inverse[valid], labels[valid]), 1)
    out = counts.argmax(axis=1)
    out[counts.sum(axis=1) == 0] = table.ignore_id
    return out


def build_samples(frames: list[FrameInput], grid: GridConfig, table: ClassTable, k: int, n_past: int,
                  aligned: bool = True, start: int = 0) -> list[Sample]:
    """Partition every frame ``t >= start`` together with up to ``n_past`` predecessors."""
    samples = []
    for t in range(start, len(frames)):
        cur = frames[t]
        cur_part, keep = _partition(cur.points, grid)
        past_parts = []
        for n in range(1, n_past + 1):
            if t - n < 0:
                break
            src = frames[t - n]
            pts = align_to_frame(src.points, src.pose, cur.pose) if aligned else src.points
            past_parts.append(_partition(pts, grid)[0])
        index_only = lambda p: SparseVoxelSet(np.zeros((len(p.indices), 0)), p.indices)  # noqa: E731
        tbl = build_table(index_only(cur_part), [index_only(p) for p in past_parts], k)
        labels = None
        voxel_labels = np.full(len(cur_part.indices), table.ignore_id)
        if cur.labels is not None:
            labels = np.asarray(cur.labels, dtype=np.int64)[keep]
            voxel_labels = voxel_majority(labels, cur_part.inverse, len(cur_part.indices), table)
        samples.append(Sample(cur_part, past_parts, tbl, voxel_labels, labels))
    return samples


@dataclass
class StelaNet:
    grid: GridConfig
    encoder: MlpParams
    backbone: MlpParams
    stela: StelaParams
    decoder: MlpParams

    @classmethod
    def init(cls, grid: GridConfig, num_classes: int, seed: int, key_dim: int | None = None,
             encoder_hidden=(64, 128, 256), decoder_hidden=(64,), scales: int = 1) -> StelaNet:
        ss = np.random.SeedSequence(seed)
        s_enc, s_bb, s_st, s_dec = ss.spawn(4)
        d = grid.feature_dim
        encoder = init_mlp([POINT_FEATURES, *encoder_hidden, d], np.random.default_rng(s_enc))
        bb_rng = np.random.default_rng(s_bb)
        backbone = [layer for _ in range(scales) for layer in init_mlp([d, d], bb_rng, relu_last=True)]
        stela = StelaParams.init(d, np.random.default_rng(s_st), key_dim=key_dim)
        decoder = init_mlp([d, *decoder_hidden, num_classes], np.random.default_rng(s_dec))
        return cls(grid, encoder, backbone, stela, decoder)

    def groups(self) -> dict[str, dict[str, np.ndarray]]:
        def mlp(prefix, layers):
            out = {}
            for i, l in enumerate(layers):
                out[f"{prefix}.{i}.weight"] = l.weight
                out[f"{prefix}.{i}.bias"] = l.bias
            return out

        return {
            "encoder": {**mlp("encoder", self.encoder), **mlp("backbone", self.backbone)},
            "stela": {f"stela.{k}": v for k, v in self.stela.tensors().items()},
            "decoder": mlp("decoder", self.decoder),
        }

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for g in self.groups().values():
            out.update(g)
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        mine = self.tensors()
        missing = set(mine) - set(tensors)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)}")
        for name, arr in mine.items():
            if arr.shape != tensors[name].shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != {arr.shape}")
            arr[...] = tensors[name]

    # -- forward / backward -------------------------------------------------

    def _encode(self, part: Partition):
        h, enc_cache = mlp_forward(self.encoder, part.feats, keep_cache=True)
        pooled, routing = max_pool(h, part.assign, self.grid)
        v, bb_cache = mlp_forward(self.backbone, pooled.features, keep_cache=True)
        return v, (enc_cache, routing, bb_cache, len(part.feats))

    def _encode_backward(self, cache, dv, grads):
        enc_cache, routing, bb_cache, n_points = cache
        dpooled, g_bb = mlp_backward(self.backbone, bb_cache, dv)
        dpoints = max_pool_backward(routing, dpooled, n_points)
        _, g_enc = mlp_backward(self.encoder, enc_cache, dpoints)
        _add_layer_grads(grads, "backbone", g_bb)
        _add_layer_grads(grads, "encoder", g_enc)

    def forward(self, sample: Sample, use_stela: bool, keep_cache: bool = False):
        v_t, enc_t = self._encode(sample.current)
        caches = {"enc_t": enc_t}
        fused = v_t
        if use_stela:
            past_v, enc_p = [], []
            for part in sample.past:
                v, c = self._encode(part)
                past_v.append(v)
                enc_p.append(c)
            current = SparseVoxelSet(v_t, sample.current.indices)
            past = [SparseVoxelSet(v, p.indices) for v, p in zip(past_v, sample.past)]
            fused, caches["stela"] = stela_forward(current, past, sample.table, self.stela, keep_cache=True)
            caches["enc_p"] = enc_p
        logits, caches["dec"] = mlp_forward(self.decoder, fused, keep_cache=True)
        return (logits, caches) if keep_cache else logits

    def backward(self, caches, dlogits, use_stela: bool, train: set[str]) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        dfused, g_dec = mlp_backward(self.decoder, caches["dec"], dlogits)
        if "decoder" in train:
            _add_layer_grads(grads, "decoder", g_dec)
        dv_t = dfused
        if use_stela:
            sg = stela_backward(caches["stela"], self.stela, dfused)
            if "stela" in train:
                grads.update({f"stela.{k}": v for k, v in sg.params.items()})
            dv_t = sg.current
            if "encoder" in train:
                for c, dv in zip(caches["enc_p"], sg.past):
                    self._encode_backward(c, dv, grads)
        if "encoder" in train:
            self._encode_backward(caches["enc_t"], dv_t, grads)
        return grads

    def predict(self, sample: Sample, use_stela: bool) -> np.ndarray:
        return self.forward(sample, use_stela).argmax(axis=1)


def _add_layer_grads(grads, prefix, layer_grads):
    for i, (gw, gb) in enumerate(layer_grads):
        for name, g in ((f"{prefix}.{i}.weight", gw), (f"{prefix}.{i}.bias", gb)):
            if name in grads:
                grads[name] = grads[name] + g
            else:
                grads[name] = g


def combined_loss(logits: np.ndarray, targets: np.ndarray, table: ClassTable):
    """Cross-entropy plus Lovasz-softmax, unit weights; returns ``(loss, dlogits)``."""
    ce, g_ce = weighted_cross_entropy(logits, targets, table)
    probs = softmax(logits)
    lz, g_p = lovasz_softmax(probs, targets, table)
    # softmax Jacobian-vector product
    g_lz = probs * (g_p - np.sum(probs * g_p, axis=1, keepdims=True))
    return ce + lz, g_ce + g_lz


@dataclass
class Stage:
    name: str
    epochs: int
    lr: float
    train: set[str]
    use_stela: bool
    plateau: bool = False


@dataclass
class TrainResult:
    loss_history: dict[str, list[float]] = field(default_factory=dict)
    stage_seconds: dict[str, float] = field(default_factory=dict)
    lr_history: dict[str, list[float]] = field(default_factory=dict)


def schedule(epochs: tuple[int, int, int], lrs: tuple[float, float, float], use_stela: bool) -> list[Stage]:
    stages = [Stage("pretrain", epochs[0], lrs[0], {"encoder", "decoder"}, use_stela=False)]
    if use_stela:
        stages.append(Stage("warmup", epochs[1], lrs[1], {"stela"}, use_stela=True))
        stages.append(Stage("joint", epochs[2], lrs[2], {"encoder", "stela", "decoder"}, True, plateau=True))
    else:
        stages.append(Stage("joint", epochs[2], lrs[2], {"encoder", "decoder"}, False, plateau=True))
    return stages


def train(model: StelaNet, samples: list[Sample], table: ClassTable, stages: list[Stage], seed: int,
          patience: int = 3, decay: float = 0.5, clip: float | None = 5.0) -> TrainResult:
    """Per-frame gradient descent through each stage in order.

    Frames are visited in a seeded random order each epoch. With ``clip``
    set, each step's gradient is rescaled to at most that global norm.
    """
    rng = np.random.default_rng(seed)
    params = model.tensors()
    result = TrainResult()
    for stage in stages:
        t0 = time.perf_counter()
        lr = stage.lr
        best, stale = np.inf, 0
        losses, lrs = [], []
        for epoch in range(stage.epochs):
            total = 0.0
            for idx in rng.permutation(len(samples)):
                sample = samples[idx]
                logits, caches = model.forward(sample, stage.use_stela, keep_cache=True)
                loss, dlogits = combined_loss(logits, sample.voxel_labels, table)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"stage {stage.name} epoch {epoch}: loss {loss}")
                grads = model.backward(caches, dlogits, stage.use_stela, stage.train)
                scale = 1.0
                if clip is not None:
                    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                    if norm > clip:
                        scale = clip / norm
                for name, g in grads.items():
                    params[name] -= (lr * scale) * g
                total += loss
            mean_loss = total / max(len(samples), 1)
            losses.append(mean_loss)
            lrs.append(lr)
            log.debug("%s epoch %d loss %.5f lr %.2e", stage.name, epoch, mean_loss, lr)
            if stage.plateau:
                if mean_loss < best:
                    best, stale = mean_loss, 0
                else:
                    stale += 1
                    if stale >= patience:
                        lr *= decay
                        stale = 0
        result.loss_history[stage.name] = losses
        result.lr_history[stage.name] = lrs
        result.stage_seconds[stage.name] = time.perf_counter() - t0
    return result


def evaluate(model: StelaNet, samples: list[Sample], table: ClassTable, use_stela: bool) -> ConfusionMatrix:
    """Point-level confusion matrix; points take their voxel's prediction."""
    cm = ConfusionMatrix.zeros(table.num_classes)
    for sample in samples:
        if sample.point_labels is None:
            continue
        pred = model.predict(sample, use_stela)
        cm = accumulate_confusion(pred[sample.current.inverse], sample.point_labels, table, cm)
    return cm
