"""Readers and writers for SemanticKITTI-format sequences.

On-disk conventions:

* ``velodyne/*.bin``: little-endian float32 ``(x, y, z, intensity)`` per point.
* ``labels/*.label``: little-endian uint32 per point, low 16 bits semantic id,
  high 16 bits instance id.
* ``poses.txt``: one row-major 3x4 camera pose per line.
* ``calib.txt``: the ``Tr:`` line holds the LiDAR to camera transform.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import RigidPose

IGNORE_ID = 255

_SCAN_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("<u4")


class MalformedScanError(ValueError):
    pass


class MalformedLabelError(ValueError):
    pass


class MalformedPoseError(ValueError):
    pass


@dataclass(frozen=True)
class LabelArray:
    semantic: np.ndarray
    instance: np.ndarray

    def __len__(self):
        return len(self.semantic)


@dataclass
class SequenceManifest:
    sequence: str
    frame_ids: list[int]
    scan_paths: list[Path]
    poses: list[RigidPose]
    calibration: RigidPose = field(default_factory=RigidPose.identity)
    label_paths: list[Path] | None = None

    def __post_init__(self):
        if len(self.poses) != len(self.frame_ids) or len(self.scan_paths) != len(self.frame_ids):
            raise ValueError("frame, scan and pose counts differ")
        if self.label_paths is not None and len(self.label_paths) != len(self.frame_ids):
            raise ValueError("label count differs from frame count")
        if any(b <= a for a, b in zip(self.frame_ids, self.frame_ids[1:])):
            raise ValueError("frame ids must be strictly increasing")

    def __len__(self):
        return len(self.frame_ids)


def read_scan(path: str | os.PathLike) -> np.ndarray:
    """Decode a ``.bin`` scan into an ``(N, 4)`` float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise MalformedScanError(f"{path}: {len(raw)} bytes is not a multiple of 16")
    return np.frombuffer(raw, dtype=_SCAN_DTYPE).astype(np.float32).reshape(-1, 4)


def write_scan(path: str | os.PathLike, points: np.ndarray) -> None:
    points = np.asarray(points).reshape(-1, 4)
    Path(path).write_bytes(points.astype(_SCAN_DTYPE).tobytes())


def read_labels(path: str | os.PathLike, n_points: int) -> LabelArray:
    raw = Path(path).read_bytes()
    if len(raw) != 4 * n_points:
        raise MalformedLabelError(f"{path}: expected {n_points} labels, file holds {len(raw) / 4:g}")
    packed = np.frombuffer(raw, dtype=_LABEL_DTYPE)
    return LabelArray(
        semantic=(packed & 0xFFFF).astype(np.uint16),
        instance=(packed >> 16).astype(np.uint16),
    )


def write_labels(path: str | os.PathLike, labels: LabelArray) -> None:
    sem = np.asarray(labels.semantic, dtype=np.uint32)
    inst = np.asarray(labels.instance, dtype=np.uint32)
    if np.any(sem > 0xFFFF) or np.any(inst > 0xFFFF):
        raise MalformedLabelError("label fields must fit in 16 bits")
    Path(path).write_bytes(((inst << 16) | sem).astype(_LABEL_DTYPE).tobytes())


def _parse_row(tokens: list[str], where: str) -> RigidPose:
    if len(tokens) != 12:
        raise MalformedPoseError(f"{where}: expected 12 values, got {len(tokens)}")
    try:
        mat = np.array([float(t) for t in tokens]).reshape(3, 4)
    except ValueError as exc:
        raise MalformedPoseError(f"{where}: {exc}") from None
    return RigidPose.from_matrix(mat)


def read_calib(path: str | os.PathLike) -> RigidPose:
    """Return the ``Tr`` (LiDAR to camera) transform from ``calib.txt``."""
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        key, _, rest = line.partition(":")
        if key.strip() == "Tr":
            return _parse_row(rest.split(), f"{path}:{lineno}")
    raise MalformedPoseError(f"{path}: no Tr entry")


def read_poses(poses_path: str | os.PathLike, calib_path: str | os.PathLike | None = None) -> list[RigidPose]:
    """Read camera-frame poses and convert them to LiDAR-frame poses.

    Each pose becomes ``Tr^-1 @ P_cam @ Tr``. Without a calibration file
    ``Tr`` is taken as identity.
    """
    tr = read_calib(calib_path) if calib_path is not None else RigidPose.identity()
    tr_inv = tr.inverse()
    poses = []
    for lineno, line in enumerate(Path(poses_path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        cam = _parse_row(line.split(), f"{poses_path}:{lineno}")
        poses.append(tr_inv @ cam @ tr)
    return poses


def _format_row(pose: RigidPose) -> str:
    return " ".join(repr(float(v)) for v in pose.matrix()[:3].ravel())


def write_poses(poses_path, poses: list[RigidPose], calibration: RigidPose | None = None) -> None:
    """Inverse of :func:`read_poses`: LiDAR poses go out as camera poses."""
    tr = calibration or RigidPose.identity()
    lines = [_format_row(tr @ p @ tr.inverse()) for p in poses]
    Path(poses_path).write_text("".join(line + "\n" for line in lines))


def write_calib(path, calibration: RigidPose) -> None:
    Path(path).write_text(f"Tr: {_format_row(calibration)}\n")


def build_tiny_subset(manifest: SequenceManifest, stride: int) -> SequenceManifest:
    """Keep every ``stride``-th frame (by position), preserving pose pairing."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    keep = slice(None, None, stride)
    return replace(
        manifest,
        frame_ids=manifest.frame_ids[keep],
        scan_paths=manifest.scan_paths[keep],
        poses=manifest.poses[keep],
        label_paths=None if manifest.label_paths is None else manifest.label_paths[keep],
    )


def load_sequence(seq_dir: str | os.PathLike) -> SequenceManifest:
    """Build a manifest from a SemanticKITTI sequence directory."""
    seq_dir = Path(seq_dir)
    scans = sorted((seq_dir / "velodyne").glob("*.bin"))
    frame_ids = [int(p.stem) for p in scans]
    calib = seq_dir / "calib.txt"
    all_poses = read_poses(seq_dir / "poses.txt", calib if calib.exists() else None)
    try:
        poses = [all_poses[i] for i in frame_ids]
    except IndexError:
        raise MalformedPoseError(f"{seq_dir}: fewer poses than scans") from None
    label_dir = seq_dir / "labels"
    labels = None
    if label_dir.is_dir():
        labels = [label_dir / f"{p.stem}.label" for p in scans]
    return SequenceManifest(
        sequence=seq_dir.name,
        frame_ids=frame_ids,
        scan_paths=scans,
        poses=poses,
        calibration=read_calib(calib) if calib.exists() else RigidPose.identity(),
        label_paths=labels,
    )


@dataclass(frozen=True)
class ClassMap:
    """Raw-id to training-id lookup loaded from a class-map file."""

    raw_to_train: dict[int, int]
    names: list[str]
    ignore_id: int = IGNORE_ID

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def remap(self, semantic: np.ndarray) -> np.ndarray:
        """Translate raw semantic ids; unknown ids become the ignore id."""
        semantic = np.asarray(semantic, dtype=np.int64)
        lut = np.full(max(max(self.raw_to_train, default=0), int(semantic.max(initial=0))) + 1,
                      self.ignore_id, dtype=np.int64)
        for raw, train in self.raw_to_train.items():
            lut[raw] = train
        return lut[semantic]


def load_class_map(path: str | os.PathLike | None = None) -> ClassMap:
    """Parse a class-map file; defaults to the bundled SemanticKITTI table.

    The file has a ``[raw]`` block of ``raw_id: train_id name`` lines and a
    ``[train]`` block of ``train_id: name`` lines.
    """
    if path is None:
        text = resources.files("stela").joinpath("data/semantic_kitti_classes.txt").read_text()
    else:
        text = Path(path).read_text()
    raw_to_train: dict[int, int] = {}
    train_names: dict[int, str] = {}
    section = None
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            continue
        key, _, value = line.partition(":")
        if section == "raw":
            raw_to_train[int(key)] = int(value.split()[0])
        elif section == "train":
            train_names[int(key)] = value.strip()
        else:
            raise ValueError(f"class map entry outside a section: {line!r}")
    if sorted(train_names) != list(range(len(train_names))):
        raise ValueError("training ids must be contiguous from 0")
    unknown = {t for t in raw_to_train.values() if t != IGNORE_ID and t not in train_names}
    if unknown:
        raise ValueError(f"raw ids map to undeclared training ids {sorted(unknown)}")
    return ClassMap(raw_to_train, [train_names[i] for i in range(len(train_names))])
