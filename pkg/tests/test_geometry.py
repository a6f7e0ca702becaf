import numpy as np
import pytest

from sonotrace import ConfigError, FanConfig, TransducerPose, VolumeGrid, VolumeKind
from sonotrace.geometry import (canonical_ray_dirs, extract_profile,
                                extract_profiles_batch, generate_rays, ray_angles,
                                rotation_log, rotation_matrix,
                                rotation_matrix_partials)

POSE = TransducerPose(position=(1.0, 2.0, 3.0), axis=(0, 0, 1.0), in_plane=(1.0, 0, 0))


def test_single_ray_points_along_axis():
    cfg = FanConfig(n_rays=1, n_samples=8, depth_mm=10.0)
    origins, dirs = generate_rays(POSE, cfg)
    np.testing.assert_allclose(dirs[0], POSE.axis, atol=1e-15)
    np.testing.assert_array_equal(origins[0], POSE.position)


def test_three_ray_fan_angles():
    cfg = FanConfig(n_rays=3, n_samples=8, fan_angle=np.pi / 2, depth_mm=10.0)
    _, dirs = generate_rays(POSE, cfg)
    s = np.sin(np.pi / 4)
    np.testing.assert_allclose(dirs[0], [-s, 0.0, s], atol=1e-12)
    np.testing.assert_allclose(dirs[1], [0.0, 0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(dirs[2], [s, 0.0, s], atol=1e-12)


def test_ray_directions_unit_and_ordered():
    cfg = FanConfig(n_rays=33, n_samples=8, fan_angle=np.deg2rad(70), depth_mm=10.0)
    _, dirs = generate_rays(POSE, cfg)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
    th = ray_angles(cfg)
    assert th[0] == -0.5 * cfg.fan_angle
    assert np.all(np.diff(th) > 0)
    # all origins at the apex
    origins, _ = generate_rays(POSE, cfg)
    assert np.all(origins == np.asarray(POSE.position))


def test_fan_config_validation():
    with pytest.raises(ConfigError):
        FanConfig(n_rays=0)
    with pytest.raises(ConfigError):
        FanConfig(n_samples=1)
    with pytest.raises(ConfigError):
        FanConfig(fan_angle=np.pi)
    with pytest.raises(ConfigError):
        FanConfig(depth_mm=0.0)


def test_pose_validation():
    with pytest.raises(ConfigError):
        TransducerPose(position=(0, 0, 0), axis=(0, 0, 2.0), in_plane=(1, 0, 0))
    with pytest.raises(ConfigError):
        TransducerPose(position=(0, 0, 0), axis=(0, 0, 1.0), in_plane=(0, 0, 1.0))


def test_extract_constant_volume():
    v = VolumeGrid((8, 8, 8), (2, 2, 2), (0, 0, 0), np.full((8, 8, 8), 1.55),
                   VolumeKind.IMPEDANCE_MRAYL)
    cfg = FanConfig(n_rays=1, n_samples=9, depth_mm=10.0)
    pose = TransducerPose(position=(7.0, 7.0, 1.0), axis=(0, 0, 1.0), in_plane=(1, 0, 0))
    prof = extract_profile(v, (pose.position, pose.axis), cfg)
    assert prof.z.size == cfg.n_samples
    np.testing.assert_array_equal(prof.z, np.full(9, 1.55))


def test_extract_step_phantom():
    # Z = 1 for x < 10mm, 3 beyond; ray along +x
    data = np.ones((20, 4, 4))
    data[10:] = 3.0
    v = VolumeGrid((20, 4, 4), (1, 1, 1), (0, 0, 0), data, VolumeKind.IMPEDANCE_MRAYL)
    cfg = FanConfig(n_rays=1, n_samples=19, depth_mm=18.0)
    prof = extract_profile(v, (np.array([0.0, 1.0, 1.0]), np.array([1.0, 0.0, 0.0])), cfg)
    z = prof.z
    assert z[0] == 1.0 and z[-1] == 3.0
    transitions = np.flatnonzero(np.abs(np.diff(z)) > 1e-12)
    assert transitions.size <= 2  # one interface, at most one interpolated sample


def test_batch_matches_single(tmp_path):
    rng = np.random.default_rng(0)
    v = VolumeGrid((10, 10, 10), (2, 2, 2), (0, 0, 0),
                   rng.uniform(1.3, 1.8, (10, 10, 10)), VolumeKind.IMPEDANCE_MRAYL)
    cfg = FanConfig(n_rays=5, n_samples=12, fan_angle=np.deg2rad(40), depth_mm=14.0)
    pose = TransducerPose(position=(9.0, 9.0, 1.0), axis=(0, 0, 1.0), in_plane=(1, 0, 0))
    batch = extract_profiles_batch(v, pose, cfg)
    origins, dirs = generate_rays(pose, cfg)
    for r in range(cfg.n_rays):
        single = extract_profile(v, (origins[r], dirs[r]), cfg)
        np.testing.assert_array_equal(batch[r], single.z)


def test_rotation_matrix_basics():
    np.testing.assert_allclose(rotation_matrix([0, 0, 0]), np.eye(3), atol=1e-15)
    R = rotation_matrix([0, 0, np.pi / 2])
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)
    w = np.array([0.3, -0.2, 0.5])
    R = rotation_matrix(w)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(rotation_log(R), w, atol=1e-10)


def test_rotation_partials_match_finite_differences():
    rng = np.random.default_rng(1)
    for w in [np.zeros(3), np.array([0.2, -0.1, 0.4]), rng.normal(0, 0.5, 3)]:
        R, parts = rotation_matrix_partials(w)
        h = 1e-7
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd = (rotation_matrix(w + e) - rotation_matrix(w - e)) / (2 * h)
            np.testing.assert_allclose(parts[i], fd, atol=1e-6)


def test_pose_vector_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(10):
        q = np.concatenate([rng.uniform(-30, 30, 3), rng.normal(0, 0.6, 3)])
        pose = TransducerPose.from_vector(q)
        np.testing.assert_allclose(pose.to_vector(), q, atol=1e-10)


def test_rigid_motion_invariance_on_affine_phantom():
    # rotating pose and volume together leaves profiles unchanged
    a = np.array([0.004, -0.003, 0.005])
    d = 1.5

    def make_volume(transform):
        n = 24
        spacing = 2.0
        idx = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), axis=-1)
        pts = idx * spacing
        data = transform(pts.reshape(-1, 3)).reshape(n, n, n)
        return VolumeGrid((n, n, n), (spacing,) * 3, (0, 0, 0), data,
                          VolumeKind.IMPEDANCE_MRAYL)

    v1 = make_volume(lambda p: p @ a + d)
    R = rotation_matrix([0.2, -0.3, 0.4])
    t = np.array([3.0, -2.0, 1.0])
    # moved volume sees field f(R^-1 (p - t))
    v2 = make_volume(lambda p: ((p - t) @ R) @ a + d)  # R^-1 = R^T applied row-wise
    pose1 = TransducerPose(position=(24.0, 22.0, 6.0), axis=(0, 0, 1.0), in_plane=(1, 0, 0))
    pose2 = TransducerPose(position=R @ pose1.position + t, axis=R @ pose1.axis,
                           in_plane=R @ pose1.in_plane)
    cfg = FanConfig(n_rays=7, n_samples=12, fan_angle=np.deg2rad(30), depth_mm=20.0)
    p1 = extract_profiles_batch(v1, pose1, cfg)
    p2 = extract_profiles_batch(v2, pose2, cfg)
    np.testing.assert_allclose(p1, p2, atol=1e-6)


def test_canonical_dirs_match_identity_pose():
    cfg = FanConfig(n_rays=9, n_samples=4, fan_angle=np.deg2rad(50), depth_mm=5.0)
    pose = TransducerPose.from_vector(np.zeros(6))
    _, dirs = generate_rays(pose, cfg)
    np.testing.assert_allclose(dirs, canonical_ray_dirs(cfg), atol=1e-15)


def test_pose_fan_json_round_trip(tmp_path):
    pose = TransducerPose.from_vector(np.array([1.0, 2.0, 3.0, 0.1, -0.2, 0.05]))
    pose.to_json(tmp_path / "pose.json")
    loaded = TransducerPose.from_json(tmp_path / "pose.json")
    np.testing.assert_allclose(loaded.position, pose.position, atol=1e-12)
    np.testing.assert_allclose(loaded.axis, pose.axis, atol=1e-12)

    fan = FanConfig(n_rays=64, n_samples=100, fan_angle=np.deg2rad(55), depth_mm=90.0)
    fan.to_json(tmp_path / "fan.json")
    loaded_fan = FanConfig.from_json(tmp_path / "fan.json")
    assert loaded_fan.n_rays == 64 and loaded_fan.n_samples == 100
    assert loaded_fan.fan_angle == pytest.approx(fan.fan_angle, rel=1e-12)

    with pytest.raises(ConfigError):
        TransducerPose.from_json(tmp_path / "missing.json")
