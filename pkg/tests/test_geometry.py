import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stela.geometry import RigidPose, align_to_frame, build_point_features, from_cylindrical, to_cylindrical


def _homog(pose_rot, pose_t):
    m = np.eye(4)
    m[:3, :3] = pose_rot
    m[:3, 3] = pose_t
    return m


def random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return RigidPose(rot, rng.uniform(-20, 20, size=3))


def test_pose_validation():
    with pytest.raises(ValueError):
        RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidPose(2 * np.eye(3), np.zeros(3))


def test_align_same_pose_is_identity(rng):
    pts = rng.normal(size=(10, 4))
    pose = random_pose(rng)
    np.testing.assert_allclose(align_to_frame(pts, pose, pose), pts, atol=1e-12)


def test_align_pure_translation():
    out = align_to_frame(np.array([[0.0, 0.0, 0.0, 0.3]]), RigidPose.from_yaw(0, (1, 0, 0)), RigidPose.identity())
    np.testing.assert_allclose(out, [[1.0, 0.0, 0.0, 0.3]])


def test_align_matches_homogeneous_product():
    src = RigidPose.from_yaw(np.pi / 2, (2, 0, 0))
    dst = RigidPose.from_yaw(0.0, (0, 1, 0))
    point = np.array([[1.0, 1.0, 0.0, 0.7]])
    oracle = np.linalg.inv(_homog(dst.rotation, dst.translation)) @ _homog(src.rotation, src.translation) \
        @ np.array([1.0, 1.0, 0.0, 1.0])
    out = align_to_frame(point, src, dst)
    np.testing.assert_allclose(out[0, :3], oracle[:3], atol=1e-12)
    # frozen from the product above
    np.testing.assert_allclose(out[0], [1.0, 0.0, 0.0, 0.7], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_align_composition_and_isometry(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_pose(rng) for _ in range(3))
    pts = np.column_stack([rng.uniform(-50, 50, size=(20, 3)), rng.uniform(0, 1, 20)])
    two_step = align_to_frame(align_to_frame(pts, a, b), b, c)
    np.testing.assert_allclose(two_step, align_to_frame(pts, a, c), atol=1e-9, rtol=0)
    moved = align_to_frame(pts, a, c)
    d0 = np.linalg.norm(pts[:, None, :3] - pts[None, :, :3], axis=-1)
    d1 = np.linalg.norm(moved[:, None, :3] - moved[None, :, :3], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-9, rtol=0)
    np.testing.assert_array_equal(moved[:, 3], pts[:, 3])


@pytest.mark.parametrize("xyz, expected", [
    ((1, 0, 0), (1, 0, 0)),
    ((0, 2, 5), (2, np.pi / 2, 5)),
    ((0, 0, 3), (0, 0, 3)),
])
def test_to_cylindrical_axes(xyz, expected):
    np.testing.assert_allclose(to_cylindrical(np.array(xyz, float)), expected, atol=1e-15)


def test_to_cylindrical_345_round_trip():
    cyl = to_cylindrical(np.array([3.0, 4.0, 0.0]))
    assert cyl[0] == pytest.approx(5.0, abs=1e-15)
    assert cyl[1] == pytest.approx(0.9272952180016122, abs=1e-15)
    np.testing.assert_allclose(from_cylindrical(cyl), [3, 4, 0], atol=1e-12)


def test_theta_half_open_interval():
    cyl = to_cylindrical(np.array([[-1.0, 0.0, 0.0], [-1.0, -0.0, 0.0], [-1.0, 1e-300, 0.0]]))
    assert np.all(cyl[:, 1] >= -np.pi) and np.all(cyl[:, 1] < np.pi)
    assert cyl[0, 1] == -np.pi


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.floats(-1e3, 1e3, allow_nan=False) for _ in range(3)]))
def test_cylindrical_round_trip(xyz):
    xyz = np.array(xyz)
    cyl = to_cylindrical(xyz)
    assert -np.pi <= cyl[1] < np.pi
    if cyl[0] > 0:
        np.testing.assert_allclose(from_cylindrical(cyl), xyz, atol=1e-12 * max(1.0, np.abs(xyz).max()))


@pytest.mark.parametrize("xyz, intensity, expected", [
    ((1, 0, 0), 0.5, (1, 0, 0, 1, 0, 0.5)),
    ((0, 0, 0), 0.0, (0, 0, 0, 0, 0, 0)),
    ((3, 4, 2), 0.7, (3, 4, 2, 5, 0.9272952180016122, 0.7)),
])
def test_build_point_features(xyz, intensity, expected):
    xyz = np.array(xyz, float)
    feats = build_point_features(xyz, to_cylindrical(xyz), intensity)
    np.testing.assert_allclose(feats, expected, atol=1e-15)
