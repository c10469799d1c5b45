import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stela.geometry import RigidPose
from stela.kitti_io import (
    IGNORE_ID,
    LabelArray,
    MalformedLabelError,
    MalformedPoseError,
    MalformedScanError,
    SequenceManifest,
    build_tiny_subset,
    load_class_map,
    load_sequence,
    read_calib,
    read_labels,
    read_poses,
    read_scan,
    write_calib,
    write_labels,
    write_poses,
    write_scan,
)


def test_read_scan_single_point(tmp_path):
    path = tmp_path / "a.bin"
    path.write_bytes(struct.pack("<4f", 1.0, 0.0, 0.0, 0.5))
    scan = read_scan(path)
    assert scan.shape == (1, 4)
    np.testing.assert_array_equal(scan[0], [1.0, 0.0, 0.0, 0.5])


def test_read_scan_empty(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    assert read_scan(path).shape == (0, 4)


def test_read_scan_rejects_partial_point(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\0" * 17)
    with pytest.raises(MalformedScanError):
        read_scan(path)


def test_read_scan_missing_file(tmp_path):
    with pytest.raises(OSError):
        read_scan(tmp_path / "nope.bin")


@settings(max_examples=50, deadline=None)
@given(st.binary(max_size=40).map(lambda b: b[: len(b) - len(b) % 16]))
def test_scan_round_trip_is_byte_exact(tmp_path_factory, payload):
    src = tmp_path_factory.mktemp("scan") / "src.bin"
    dst = src.with_name("dst.bin")
    src.write_bytes(payload)
    write_scan(dst, read_scan(src))
    assert dst.read_bytes() == payload


@pytest.mark.parametrize("value, semantic, instance", [(0x00010009, 9, 1), (0, 0, 0), (0xFFFFFFFF, 0xFFFF, 0xFFFF)])
def test_read_labels_unpacks_fields(tmp_path, value, semantic, instance):
    path = tmp_path / "x.label"
    path.write_bytes(struct.pack("<I", value))
    labels = read_labels(path, 1)
    assert labels.semantic[0] == semantic
    assert labels.instance[0] == instance


def test_read_labels_count_mismatch(tmp_path):
    path = tmp_path / "x.label"
    path.write_bytes(struct.pack("<2I", 1, 2))
    with pytest.raises(MalformedLabelError):
        read_labels(path, 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2**16 - 1), st.integers(0, 2**16 - 1)), max_size=20))
def test_label_round_trip(tmp_path_factory, pairs):
    path = tmp_path_factory.mktemp("lab") / "x.label"
    sem = np.array([p[0] for p in pairs], dtype=np.uint32)
    inst = np.array([p[1] for p in pairs], dtype=np.uint32)
    write_labels(path, LabelArray(sem, inst))
    back = read_labels(path, len(pairs))
    np.testing.assert_array_equal(back.semantic, sem)
    np.testing.assert_array_equal(back.instance, inst)


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_identity_pose_identity_calib(tmp_path):
    poses = _write(tmp_path, "poses.txt", "1 0 0 0 0 1 0 0 0 0 1 0\n")
    calib = _write(tmp_path, "calib.txt", "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n")
    (pose,) = read_poses(poses, calib)
    np.testing.assert_array_equal(pose.matrix(), np.eye(4))


def test_identity_pose_conjugated_by_translation(tmp_path):
    poses = _write(tmp_path, "poses.txt", "1 0 0 0 0 1 0 0 0 0 1 0\n")
    calib = _write(tmp_path, "calib.txt", "Tr: 1 0 0 1 0 1 0 0 0 0 1 0\n")
    (pose,) = read_poses(poses, calib)
    np.testing.assert_allclose(pose.matrix(), np.eye(4), atol=1e-15)


def test_pose_conjugation_matches_matrix_product(tmp_path):
    # camera pose: translation (0, 0, 2); Tr: 90 degrees about z
    poses = _write(tmp_path, "poses.txt", "1 0 0 0 0 1 0 0 0 0 1 2\n")
    calib = _write(tmp_path, "calib.txt", "Tr: 0 -1 0 0 1 0 0 0 0 0 1 0\n")
    (pose,) = read_poses(poses, calib)
    cam = np.eye(4)
    cam[2, 3] = 2.0
    tr = np.array([[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
    oracle = np.linalg.inv(tr) @ cam @ tr
    np.testing.assert_allclose(pose.matrix(), oracle, atol=1e-12)
    # frozen: rotation cancels, translation rotated by -90 deg about z leaves (0, 0, 2)
    np.testing.assert_allclose(pose.translation, [0.0, 0.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-12)


def test_malformed_pose_line(tmp_path):
    poses = _write(tmp_path, "poses.txt", "1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(MalformedPoseError):
        read_poses(poses)


def test_calib_without_tr(tmp_path):
    calib = _write(tmp_path, "calib.txt", "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(MalformedPoseError):
        read_calib(calib)


def test_pose_write_read_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    lidar = [RigidPose.from_yaw(rng.uniform(-3, 3), rng.normal(size=3)) for _ in range(5)]
    calib = RigidPose.from_yaw(0.3, (0.1, -0.2, 0.05))
    write_poses(tmp_path / "poses.txt", lidar, calib)
    write_calib(tmp_path / "calib.txt", calib)
    back = read_poses(tmp_path / "poses.txt", tmp_path / "calib.txt")
    for a, b in zip(lidar, back):
        np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-12)


def test_identity_calibration_is_identity_on_poses(tmp_path):
    rng = np.random.default_rng(1)
    poses = [RigidPose.from_yaw(rng.uniform(-3, 3), rng.normal(size=3)) for _ in range(4)]
    write_poses(tmp_path / "poses.txt", poses)
    write_calib(tmp_path / "calib.txt", RigidPose.identity())
    back = read_poses(tmp_path / "poses.txt", tmp_path / "calib.txt")
    for a, b in zip(poses, back):
        np.testing.assert_array_equal(a.matrix(), b.matrix())


def _manifest(n):
    return SequenceManifest(
        sequence="08",
        frame_ids=list(range(n)),
        scan_paths=[f"{i:06d}.bin" for i in range(n)],
        poses=[RigidPose.from_yaw(0.0, (float(i), 0.0, 0.0)) for i in range(n)],
    )


def test_tiny_subset_every_tenth_frame():
    sub = build_tiny_subset(_manifest(25), 10)
    assert sub.frame_ids == [0, 10, 20]
    assert [p.translation[0] for p in sub.poses] == [0.0, 10.0, 20.0]


def test_tiny_subset_stride_one_is_identity():
    m = _manifest(7)
    sub = build_tiny_subset(m, 1)
    assert sub.frame_ids == m.frame_ids
    assert sub.scan_paths == m.scan_paths


def test_tiny_subset_empty():
    assert len(build_tiny_subset(_manifest(0), 3)) == 0


def test_tiny_subset_bad_stride():
    with pytest.raises(ValueError):
        build_tiny_subset(_manifest(3), 0)


def test_manifest_rejects_unsorted_frames():
    with pytest.raises(ValueError):
        SequenceManifest("00", [1, 0], ["a", "b"], [RigidPose.identity()] * 2)


def test_bundled_class_map():
    cmap = load_class_map()
    assert cmap.num_classes == 19
    assert cmap.names[0] == "car" and cmap.names[18] == "traffic-sign"
    raw = np.array([0, 1, 10, 252, 30, 254, 40, 60, 52, 81, 999])
    np.testing.assert_array_equal(
        cmap.remap(raw), [IGNORE_ID, IGNORE_ID, 0, 0, 5, 5, 8, 8, IGNORE_ID, 18, IGNORE_ID])


def test_load_sequence_from_disk(tmp_path):
    seq = tmp_path / "sequences" / "03"
    (seq / "velodyne").mkdir(parents=True)
    (seq / "labels").mkdir()
    poses = [RigidPose.from_yaw(0.1 * i, (i, 0, 0)) for i in range(3)]
    for i in range(3):
        write_scan(seq / "velodyne" / f"{i:06d}.bin", np.ones((2, 4), np.float32) * i)
        write_labels(seq / "labels" / f"{i:06d}.label", LabelArray(np.array([10, 40]), np.array([0, 0])))
    write_poses(seq / "poses.txt", poses)
    write_calib(seq / "calib.txt", RigidPose.identity())
    m = load_sequence(seq)
    assert m.sequence == "03" and m.frame_ids == [0, 1, 2]
    np.testing.assert_allclose(m.poses[2].matrix(), poses[2].matrix(), atol=1e-12)
    assert read_labels(m.label_paths[1], 2).semantic.tolist() == [10, 40]
