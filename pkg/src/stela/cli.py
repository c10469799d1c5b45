"""Command-line entry point: ``stela <verb> [options]``."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import harness
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .geometry import RigidPose
from .kitti_io import LabelArray, build_tiny_subset, load_sequence, read_scan, write_calib, write_labels, \
    write_poses, write_scan
from .neighborhood import build_table, dump_table_csv
from .sparse_grid import encode_points, load_sparse, partition_scan, save_sparse
from .stela_core import load_checkpoint, save_checkpoint
from .synthetic import CLASS_NAMES, make_synthetic_sequence

log = logging.getLogger("stela")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _write_synthetic_dataset(cfg: ExperimentConfig, root: Path) -> ExperimentConfig:
    """Write synthetic sequences in SemanticKITTI layout; returns a config pointing at them."""
    spec = cfg.synthetic_spec()
    class_map = root / "classes.txt"
    lines = ["[raw]", "0: 255 unlabeled"] + [f"{i + 1}: {i} {n}" for i, n in enumerate(CLASS_NAMES)]
    lines += ["[train]"] + [f"{i}: {n}" for i, n in enumerate(CLASS_NAMES)]
    root.mkdir(parents=True, exist_ok=True)
    class_map.write_text("\n".join(lines) + "\n")
    seq_ids = {}
    for seed in (*cfg.synthetic_train_seeds, *cfg.synthetic_val_seeds):
        seq = f"{seed:02d}"
        seq_ids[seed] = seq
        seq_dir = root / "sequences" / seq
        (seq_dir / "velodyne").mkdir(parents=True, exist_ok=True)
        (seq_dir / "labels").mkdir(exist_ok=True)
        frames = make_synthetic_sequence(spec, seed)
        for t, frame in enumerate(frames):
            write_scan(seq_dir / "velodyne" / f"{t:06d}.bin", frame.points)
            raw = (frame.labels + 1).astype(np.uint32)
            write_labels(seq_dir / "labels" / f"{t:06d}.label", LabelArray(raw, np.zeros_like(raw)))
        write_calib(seq_dir / "calib.txt", RigidPose.identity())
        write_poses(seq_dir / "poses.txt", [f.pose for f in frames])
    return cfg.replace(
        data=str(root), class_map=str(class_map),
        train_sequences=tuple(seq_ids[s] for s in cfg.synthetic_train_seeds),
        val_sequences=tuple(seq_ids[s] for s in cfg.synthetic_val_seeds),
        val_stride=1,
    )


def cmd_prepare(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out)
    if cfg.data == "synthetic":
        cfg = _write_synthetic_dataset(cfg, out / "dataset")
        (out / "experiment.cfg").write_text(dump_config(cfg))
    root = Path(cfg.data)
    grid = cfg.grid()
    manifest_doc = {"root": str(root), "splits": {}}
    for split, seqs, stride in (("train", cfg.train_sequences, cfg.train_stride),
                                ("val", cfg.val_sequences, cfg.val_stride)):
        entries = []
        for seq in seqs:
            manifest = build_tiny_subset(load_sequence(root / "sequences" / seq), stride)
            cache_dir = out / "cache" / seq
            cache_dir.mkdir(parents=True, exist_ok=True)
            for fid, path in zip(manifest.frame_ids, manifest.scan_paths):
                cache = cache_dir / f"{fid:06d}.svs"
                if not args.no_cache:
                    feats, assign, _ = partition_scan(read_scan(path), grid)
                    save_sparse(cache, encode_points(feats, assign, [], grid))
                entries.append({"sequence": seq, "frame": fid, "scan": str(path), "cache": str(cache)})
        manifest_doc["splits"][split] = entries
    (out / "manifest.json").write_text(json.dumps(manifest_doc, indent=2) + "\n")
    print(f"prepared {sum(len(v) for v in manifest_doc['splits'].values())} frames under {out}")
    return 0


def _sweep_grid(base: ExperimentConfig, sweeps: list[str]) -> list[ExperimentConfig]:
    axes = []
    for item in sweeps:
        key, sep, values = item.partition("=")
        if not sep:
            raise ConfigError(f"--sweep expects key=v1,v2,..., got {item!r}")
        axes.append([(key.strip(), v.strip()) for v in values.split(";" if ";" in values else ",")])
    configs = []
    for combo in itertools.product(*axes):
        flat = {k: v for k, v in base.to_flat().items()}
        flat.update(dict(combo))
        configs.append(ExperimentConfig.from_flat(flat))
    return configs


def cmd_ablate(args, cfg):
    configs = _sweep_grid(cfg, args.sweep or [])
    reports = harness.run_ablation(configs, threads=args.threads)
    harness.write_run_reports(Path(args.out), reports, args.format)
    for r in reports:
        k = r.config.get("k")
        n = r.config.get("n_past")
        print(f"k={k} n_past={n} aligned={r.config.get('aligned')} stela={r.config.get('stela')} "
              f"mIoU={r.miou} status={r.status}")
    return 0


def cmd_train_toy(args, cfg):
    report, model = harness.train_toy(cfg)
    out = Path(args.out)
    harness.write_run_reports(out, [report], args.format)
    save_checkpoint(out / "checkpoint.bin", model.tensors())
    print(f"train mIoU={report.train_miou} held-out mIoU={report.miou} status={report.status}")
    return 0 if report.status == "ok" else 2


def cmd_eval(args, cfg):
    report = harness.evaluate_checkpoint(cfg, load_checkpoint(args.checkpoint))
    harness.write_run_reports(Path(args.out), [report], args.format)
    print(f"held-out mIoU={report.miou}")
    return 0


def cmd_bench(args, cfg):
    ns = [int(v) for v in args.n.split(",")]
    ks = [int(v) for v in args.k.split(",")] if args.k else [cfg.k]
    rows = harness.bench_attention(ns, ks, feature_dim=args.dim, repeats=args.repeats, seed=cfg.seed,
                                   max_global_n=args.max_global_n)
    harness.write_bench_reports(Path(args.out), rows, args.format)
    for k in ks:
        sel = [r for r in rows if r.k == k]
        line = f"k={k} local slope={harness.loglog_slope([r.n for r in sel], [r.local_seconds for r in sel]):.2f}"
        glob = [r for r in sel if r.global_seconds is not None]
        if len(glob) >= 2:
            line += f" global slope={harness.loglog_slope([r.n for r in glob], [r.global_seconds for r in glob]):.2f}"
        print(line)
    return 0


def cmd_dump_neighborhood(args, cfg):
    current = load_sparse(args.current)
    past = [load_sparse(p) for p in args.past]
    table = build_table(current, past, args.k or cfg.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_table_csv(out / "neighborhood.csv", table)
    print(f"wrote {out / 'neighborhood.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--format", choices=("csv", "json"), default="json")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads and parallel ablation jobs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stela", description="Sparse temporal local attention toolkit")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prepare", parents=[common], help="build manifests and voxel caches")
    p.add_argument("--no-cache", action="store_true", help="skip writing voxel caches")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("ablate", parents=[common], help="train/evaluate a grid of configs")
    p.add_argument("--sweep", action="append", help="key=v1,v2 (repeatable; cartesian product)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", parents=[common], help="local vs global attention timing")
    p.add_argument("--n", default="1000,2000,4000,8000")
    p.add_argument("--k", default="")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--max-global-n", type=int, default=16384)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train-toy", parents=[common], help="staged training on one config")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-neighborhood", parents=[common], help="write a KNN table as CSV")
    p.add_argument("--current", required=True, help="current-frame .svs file")
    p.add_argument("--past", nargs="+", required=True, help="past-frame .svs files, t-1 first")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_dump_neighborhood)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        with threadpool_limits(limits=args.threads):
            return args.func(args, cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
