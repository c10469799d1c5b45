"""Experiment runner: toy training, ablation grids, attention benchmarks, reports.

Report files hold only reproducible fields; wall-clock measurements go to
a separate timings file so that repeated runs with the same config and
seed produce byte-identical reports.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .kitti_io import ClassMap, build_tiny_subset, load_class_map, load_sequence, read_labels, read_scan
from .losses_metrics import ClassTable, inverse_log_frequency, miou
from .neighborhood import knn_neighborhood
from .pipeline import (
    FrameInput,
    Sample,
    StelaNet,
    TrainingDiverged,
    build_samples,
    evaluate,
    schedule,
    train,
)
from .sparse_grid import SparseVoxelSet
from .stela_core import StelaParams, compute_keys, global_cross_attention, local_attention_memory
from .synthetic import CLASS_NAMES, make_synthetic_sequence

log = logging.getLogger(__name__)

SCHEMA_NAME = "report.schema.json"


@dataclass
class RunReport:
    config: dict
    class_names: list[str]
    per_class_iou: list[float | None]
    miou: float | None
    train_miou: float | None
    loss_history: dict[str, list[float]]
    attention_flops: int
    peak_memory_bytes: int
    status: str = "ok"
    error: str = ""
    stage_seconds: dict[str, float] = field(default_factory=dict)

    def to_dict(self, timing: bool = False) -> dict:
        out = {
            "config": self.config,
            "class_names": self.class_names,
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "train_miou": self.train_miou,
            "loss_history": self.loss_history,
            "attention_flops": self.attention_flops,
            "peak_memory_bytes": self.peak_memory_bytes,
            "status": self.status,
            "error": self.error,
        }
        if timing:
            out["stage_seconds"] = self.stage_seconds
        return out


# -- data ------------------------------------------------------------------


class KittiFrames:
    """Lazily loaded frames of one SemanticKITTI sequence."""

    def __init__(self, manifest, class_map: ClassMap):
        self.manifest = manifest
        self.class_map = class_map

    def __len__(self):
        return len(self.manifest)

    @lru_cache(maxsize=8)
    def __getitem__(self, i: int) -> FrameInput:
        m = self.manifest
        points = read_scan(m.scan_paths[i])
        labels = None
        if m.label_paths is not None:
            raw = read_labels(m.label_paths[i], len(points))
            labels = self.class_map.remap(raw.semantic)
        return FrameInput(points, labels, m.poses[i])


def _kitti_samples(cfg: ExperimentConfig, sequences, stride: int, table: ClassTable, class_map) -> list[Sample]:
    samples = []
    for seq in sequences:
        manifest = load_sequence(Path(cfg.data) / "sequences" / seq)
        frames = KittiFrames(manifest, class_map)
        targets = list(range(len(manifest)))[::stride]
        if cfg.max_frames:
            targets = targets[:cfg.max_frames]
        for t in targets:
            # past frames come from the full sequence, not the subset
            lo = max(0, t - cfg.n_past)
            window = [frames[i] for i in range(lo, t + 1)]
            samples += build_samples(window, cfg.grid(), table, cfg.k, cfg.n_past, cfg.aligned, start=t - lo)
    return samples


def _synthetic_samples(cfg: ExperimentConfig, seeds, table: ClassTable) -> list[Sample]:
    spec = cfg.synthetic_spec()
    samples = []
    for seed in seeds:
        frames = [FrameInput(f.points, f.labels, f.pose) for f in make_synthetic_sequence(spec, seed)]
        if cfg.max_frames:
            frames = frames[:cfg.max_frames + cfg.n_past]
        samples += build_samples(frames, cfg.grid(), table, cfg.k, cfg.n_past, cfg.aligned, start=cfg.n_past)
    return samples


def load_data(cfg: ExperimentConfig) -> tuple[list[Sample], list[Sample], ClassTable]:
    """Partitioned train and held-out samples plus the class table."""
    if cfg.data == "synthetic":
        names = CLASS_NAMES
        table = ClassTable(len(names), names=names)
        train_s = _synthetic_samples(cfg, cfg.synthetic_train_seeds, table)
        val_s = _synthetic_samples(cfg, cfg.synthetic_val_seeds, table)
    else:
        root = Path(cfg.data)
        if not (root / "sequences").is_dir():
            raise FileNotFoundError(f"no sequences/ directory under {root}")
        class_map = load_class_map(cfg.class_map or None)
        table = ClassTable(class_map.num_classes, names=tuple(class_map.names))
        train_s = _kitti_samples(cfg, cfg.train_sequences, cfg.train_stride, table, class_map)
        val_s = _kitti_samples(cfg, cfg.val_sequences, cfg.val_stride, table, class_map)
    if cfg.class_weights == "inverse_log":
        counts = np.zeros(table.num_classes)
        for s in train_s:
            if s.point_labels is not None:
                lab = s.point_labels[s.point_labels != table.ignore_id]
                counts += np.bincount(lab, minlength=table.num_classes)
        table = ClassTable(table.num_classes, inverse_log_frequency(counts), table.ignore_id, table.names)
    return train_s, val_s, table


# -- instrumentation -------------------------------------------------------


def local_attention_flops(valid_slots: int, key_dim: int, feature_dim: int) -> int:
    """Multiply-adds counted as 2 FLOPs: one score dot product and one weighted sum per slot."""
    return int(valid_slots) * (2 * key_dim + 2 * feature_dim)


def global_attention_flops(n_query: int, n_past: int, key_dim: int, feature_dim: int) -> int:
    return int(n_query) * int(n_past) * (2 * key_dim + 2 * feature_dim)


def attention_memory_bytes(n_query: int, slots: int, key_dim: int, feature_dim: int, itemsize: int = 8) -> int:
    """Bytes held by the gathered keys, values, scores and weights."""
    return int(n_query) * int(slots) * (key_dim + feature_dim + 2) * itemsize


def _sample_instrumentation(samples: list[Sample], cfg: ExperimentConfig, key_dim: int) -> tuple[int, int]:
    if not cfg.stela or not samples:
        return 0, 0
    flops, peak = 0, 0
    for s in samples:
        valid = sum(int(e.neighbor_count.sum()) for e in s.table)
        flops += local_attention_flops(valid, key_dim, cfg.feature_dim)
        slots = sum(e.k for e in s.table)
        peak = max(peak, attention_memory_bytes(len(s.current.indices), slots, key_dim, cfg.feature_dim))
    return flops // len(samples), peak


# -- experiments -------------------------------------------------------------


def build_model(cfg: ExperimentConfig, table: ClassTable) -> StelaNet:
    return StelaNet.init(cfg.grid(), table.num_classes, cfg.seed, key_dim=cfg.key_dim or None,
                         encoder_hidden=cfg.encoder_hidden, decoder_hidden=cfg.decoder_hidden, scales=cfg.scales)


def _iou_list(per_class: np.ndarray) -> list[float | None]:
    return [None if math.isnan(v) else float(v) for v in per_class]


def _safe_miou(model, samples, table, use_stela):
    if not samples:
        return None, None
    per_class, mean = miou(evaluate(model, samples, table, use_stela))
    return per_class, mean


def train_toy(cfg: ExperimentConfig, data=None) -> tuple[RunReport, StelaNet]:
    """Train one configuration through the staged schedule and evaluate it.

    ``data`` may carry pre-built ``(train, val, table)`` to skip loading.
    """
    train_s, val_s, table = data if data is not None else load_data(cfg)
    model = build_model(cfg, table)
    stages = schedule((cfg.epochs_pretrain, cfg.epochs_warmup, cfg.epochs_joint),
                      (cfg.lr_pretrain, cfg.lr_warmup, cfg.lr_joint), cfg.stela)
    flops, peak = _sample_instrumentation(val_s or train_s, cfg, model.stela.key_dim)
    report = RunReport(cfg.to_flat(), table.class_names(), [None] * table.num_classes, None, None, {}, flops, peak)
    try:
        result = train(model, train_s, table, stages, cfg.seed, patience=cfg.plateau_patience,
                       decay=cfg.plateau_factor, clip=cfg.grad_clip or None)
    except TrainingDiverged as exc:
        report.status, report.error = "failed", str(exc)
        log.warning("run diverged: %s", exc)
        return report, model
    report.loss_history = result.loss_history
    report.stage_seconds = dict(result.stage_seconds)
    t0 = time.perf_counter()
    per_class, mean = _safe_miou(model, val_s, table, cfg.stela)
    if per_class is not None:
        report.per_class_iou, report.miou = _iou_list(per_class), mean
    report.train_miou = _safe_miou(model, train_s, table, cfg.stela)[1]
    report.stage_seconds["evaluate"] = time.perf_counter() - t0
    return report, model


def evaluate_checkpoint(cfg: ExperimentConfig, tensors: dict[str, np.ndarray]) -> RunReport:
    _, val_s, table = load_data(cfg)
    model = build_model(cfg, table)
    model.load_tensors(tensors)
    flops, peak = _sample_instrumentation(val_s, cfg, model.stela.key_dim)
    per_class, mean = _safe_miou(model, val_s, table, cfg.stela)
    report = RunReport(cfg.to_flat(), table.class_names(), [None] * table.num_classes, mean, None, {}, flops, peak)
    if per_class is not None:
        report.per_class_iou = _iou_list(per_class)
    return report


def run_ablation(configs: list[ExperimentConfig], threads: int = 1) -> list[RunReport]:
    """Train and evaluate every config; reports come back in config order.

    Failed runs (missing data aside) are reported with ``status='failed'``
    and do not stop the grid.
    """
    def job(cfg):
        try:
            return train_toy(cfg)[0]
        except (FloatingPointError, ValueError) as exc:
            return RunReport(cfg.to_flat(), [], [], None, None, {}, 0, 0, "failed", repr(exc))

    if threads <= 1:
        return [job(c) for c in configs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, configs))


# -- benchmark ----------------------------------------------------------------


@dataclass
class BenchRow:
    n: int
    k: int
    feature_dim: int
    key_dim: int
    local_flops: int
    global_flops: int | None
    local_memory_bytes: int
    global_memory_bytes: int | None
    local_seconds: float = float("nan")
    global_seconds: float | None = None

    def to_dict(self, timing: bool = False) -> dict:
        out = {k: getattr(self, k) for k in ("n", "k", "feature_dim", "key_dim", "local_flops", "global_flops",
                                              "local_memory_bytes", "global_memory_bytes")}
        if timing:
            out["local_seconds"] = self.local_seconds
            out["global_seconds"] = self.global_seconds
        return out


def synthetic_voxel_set(n: int, dim: int, rng: np.random.Generator, density: float = 0.05,
                        dtype=np.float64) -> SparseVoxelSet:
    """``n`` distinct random voxels in a cube sized for the requested occupancy."""
    side = max(2, int(math.ceil((n / density) ** (1.0 / 3.0))))
    keys = np.sort(rng.choice(side ** 3, size=n, replace=False))
    idx = np.stack([keys // (side * side), (keys // side) % side, keys % side], axis=1)
    return SparseVoxelSet(rng.standard_normal((n, dim)).astype(dtype), idx)


def _median_time(fn, repeats: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_attention(n_grid, k_grid, feature_dim: int = 32, repeats: int = 3, seed: int = 0,
                    key_dim: int | None = None, max_global_n: int = 16384, dtype=np.float32,
                    timing: bool = True) -> list[BenchRow]:
    """Time local attention (precomputed KNN tables) against global attention.

    Both run over the same synthetic current/past voxel sets of size N.
    Global attention above ``max_global_n`` is skipped with a log notice.
    """
    rng = np.random.default_rng(seed)
    params = StelaParams.init(feature_dim, rng, key_dim=key_dim).astype(dtype)
    dk = params.key_dim
    itemsize = np.dtype(dtype).itemsize
    rows = []
    for n in n_grid:
        current = synthetic_voxel_set(n, feature_dim, rng, dtype=dtype)
        past = synthetic_voxel_set(n, feature_dim, rng, dtype=dtype)
        keys_q = compute_keys(current.features, params)
        keys_p = compute_keys(past.features, params)
        do_global = n <= max_global_n
        if not do_global:
            log.warning("skipping global attention for N=%d (above budget %d)", n, max_global_n)
        t_global = None
        if do_global and timing:
            t_global = _median_time(lambda: global_cross_attention(current.features, [past.features], params),
                                    repeats)
        for k in k_grid:
            entry = knn_neighborhood(current, past, k)
            nbr = entry.neighbor_indices[:, :min(k, n)]
            row = BenchRow(
                n, k, feature_dim, dk,
                local_attention_flops(int(entry.neighbor_count.sum()), dk, feature_dim),
                global_attention_flops(n, n, dk, feature_dim) if do_global else None,
                attention_memory_bytes(n, nbr.shape[1], dk, feature_dim, itemsize),
                attention_memory_bytes(min(n, 1024), n, 0, 0, itemsize) if do_global else None,
            )
            if timing:
                row.local_seconds = _median_time(
                    lambda: local_attention_memory(keys_q, keys_p, past.features, nbr), repeats)
                row.global_seconds = t_global
            rows.append(row)
    return rows


def loglog_slope(ns, seconds) -> float:
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(seconds, float)), 1)[0])


# -- report files ---------------------------------------------------------------


def report_schema() -> dict:
    return json.loads(resources.files("stela").joinpath(f"data/{SCHEMA_NAME}").read_text())


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _flatten_row(report: dict) -> dict:
    row = {f"config.{k}": (",".join(map(str, v)) if isinstance(v, (list, tuple)) else v)
           for k, v in report["config"].items()}
    row.update({k: report[k] for k in ("miou", "train_miou", "attention_flops", "peak_memory_bytes", "status")})
    for name, value in zip(report["class_names"], report["per_class_iou"]):
        row[f"iou.{name}"] = value
    return row


def write_run_reports(out_dir: Path, reports: list[RunReport], fmt: str = "json") -> list[Path]:
    """Write ``report.{json,csv}``, ``metrics_per_class.csv``, timings and the schema."""
    out_dir.mkdir(parents=True, exist_ok=True)
    docs = [r.to_dict() for r in reports]
    written = []
    if fmt == "json":
        path = out_dir / "report.json"
        _json_dump({"kind": "runs", "runs": docs}, path)
    else:
        path = out_dir / "report.csv"
        rows = [_flatten_row(d) for d in docs]
        fieldnames = list(dict.fromkeys(k for r in rows for k in r))
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)
    written.append(path)

    metrics = out_dir / "metrics_per_class.csv"
    with open(metrics, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "class", "iou"])
        for i, d in enumerate(docs):
            for name, value in zip(d["class_names"], d["per_class_iou"]):
                writer.writerow([i, name, "" if value is None else repr(value)])
            writer.writerow([i, "mean", "" if d["miou"] is None else repr(d["miou"])])
    written.append(metrics)

    timing = out_dir / "timings.json"
    _json_dump({"runs": [r.stage_seconds for r in reports]}, timing)
    schema = out_dir / SCHEMA_NAME
    _json_dump(report_schema(), schema)
    return written + [timing, schema]


def write_bench_reports(out_dir: Path, rows: list[BenchRow], fmt: str = "json") -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    docs = [r.to_dict() for r in rows]
    if fmt == "json":
        path = out_dir / "report.json"
        _json_dump({"kind": "bench", "rows": docs}, path)
    else:
        path = out_dir / "report.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(docs[0]) if docs else ["n"])
            writer.writeheader()
            writer.writerows(docs)
    timing = out_dir / "timings.json"
    _json_dump({"rows": [r.to_dict(timing=True) for r in rows]}, timing)
    schema = out_dir / SCHEMA_NAME
    _json_dump(report_schema(), schema)
    return [path, timing, schema]
