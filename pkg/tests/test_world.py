import numpy as np
import pytest

from sdfnav.geometry import Box, Circle, NnIndex
from sdfnav.world import (LidarConfig, RobotModel, RobotPose, WorldSpec, body_points_from_state, builtin_worlds,
                          check_collision, clearance, ground_truth_sdf, ground_truth_sdf_grad, lidar_scan,
                          load_world, save_world, step_dynamics, unicycle_step, wrap_angle)


def circle_world(center=(3.0, 0.0), radius=1.0, **kw):
    return WorldSpec([Circle(center, radius)], ((-10, -10), (10, 10)), **kw)


@pytest.fixture(scope="module", params=["corridor", "rooms", "factory2d"])
def world(request):
    return load_world(request.param)


def test_builtin_worlds_present():
    assert builtin_worlds() == ["corridor", "factory2d", "rooms"]


def test_world_roundtrip(world, tmp_path):
    save_world(world, tmp_path / "w.yaml")
    again = load_world(tmp_path / "w.yaml")
    p = np.random.default_rng(0).uniform(world.bounds[0], world.bounds[1], size=(200, 2))
    np.testing.assert_array_equal(ground_truth_sdf(world, p), ground_truth_sdf(again, p))
    assert again.to_dict() == world.to_dict()


def test_start_is_free(world):
    assert not check_collision(world, world.start_pose, world.robot)[0]


def test_gt_sdf_matches_boundary_sampling(world):
    """Outside all obstacles the union SDF is exact; compare with dense boundary samples."""
    rng = np.random.default_rng(1)
    bnd = []
    for prim in world.primitives:
        lo, hi = prim.bbox()
        pts = rng.uniform(lo - 0.01, hi + 0.01, size=(400_000, 2))
        # project random points onto the primitive boundary by one Newton step
        s = prim.sdf(pts)
        pts = pts - s[:, None] * prim.grad(pts)
        bnd.append(pts)
    bnd = np.concatenate(bnd)
    bnd = bnd[np.abs(ground_truth_sdf(world, bnd)) < 1e-9]
    q = rng.uniform(world.bounds[0], world.bounds[1], size=(300, 2))
    d = ground_truth_sdf(world, q)
    out = d > 0
    oracle = NnIndex(bnd).query(q[out])[0]
    np.testing.assert_allclose(d[out], oracle, atol=1e-3)
    assert np.all(d[~out] <= 0)


def test_gt_sdf_inside_negative_far_positive():
    w = circle_world()
    assert ground_truth_sdf(w, np.array([3.0, 0.0])) == pytest.approx(-1.0)
    assert ground_truth_sdf(w, np.array([-5.0, 0.0])) == pytest.approx(7.0)


def test_gt_gradient_fd(world):
    rng = np.random.default_rng(2)
    p = rng.uniform(world.bounds[0], world.bounds[1], size=(100, 2))
    v, g = ground_truth_sdf_grad(world, p)
    h = 1e-6
    fd = np.stack([(ground_truth_sdf(world, p + h * e) - ground_truth_sdf(world, p - h * e)) / (2 * h)
                   for e in np.eye(2)], 1)
    ok = np.abs(np.linalg.norm(fd, axis=1) - 1) < 1e-4
    np.testing.assert_allclose(v, ground_truth_sdf(world, p))
    np.testing.assert_allclose(g[ok], fd[ok], atol=1e-5)


def test_lidar_circle_dead_ahead():
    w = circle_world()
    scan = lidar_scan(w, RobotPose(np.zeros(2), 0.0), rays=360, noise_sigma=0.0)
    assert scan.hit_mask[0]
    assert scan.ranges[0] == pytest.approx(2.0, abs=1e-3)


def test_lidar_open_space_misses():
    w = circle_world(center=(9.0, 9.0), radius=0.5)
    scan = lidar_scan(w, RobotPose(np.array([-9.0, -9.0]), 0.0), max_range=5.0, noise_sigma=0.0)
    assert scan.n_hits == 0


def test_lidar_hits_on_surface(world):
    scan = lidar_scan(world, world.start_pose, noise_sigma=0.0)
    assert scan.n_hits > 0
    assert np.abs(ground_truth_sdf(world, scan.hit_points)).max() <= 1e-3


def test_lidar_noise_is_seeded():
    w = circle_world(lidar=LidarConfig(noise_sigma=0.01))
    a = lidar_scan(w, RobotPose(np.zeros(2), 0.0), rng=np.random.default_rng(3))
    b = lidar_scan(w, RobotPose(np.zeros(2), 0.0), rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a.ranges, b.ranges)


def test_dynamics_examples():
    np.testing.assert_allclose(unicycle_step(np.zeros(3), np.array([1.0, 0.0]), 1.0), [1, 0, 0])
    np.testing.assert_allclose(unicycle_step(np.zeros(3), np.array([0.0, np.pi]), 1.0), [0, 0, np.pi])
    np.testing.assert_allclose(unicycle_step(np.zeros(3), np.array([1.0, 1.0]), 0.1), [0.1, 0, 0.1])
    pose = step_dynamics(RobotPose(np.zeros(2), 0.0), [0.0, np.pi], 1.0)
    assert pose.heading == pytest.approx(np.pi)
    with pytest.raises(ValueError):
        step_dynamics(RobotPose(np.zeros(2), 0.0), [5.0, 0.0], 1.0, RobotModel())


def test_wrap_angle():
    assert wrap_angle(3 * np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)
    np.testing.assert_allclose(wrap_angle(np.array([0.1, 2 * np.pi + 0.1])), [0.1, 0.1])


def test_body_transform():
    m = RobotModel(radius=1.0, n_boundary=4)
    np.testing.assert_allclose(body_points_from_state(np.zeros(3), m), m.body_points)
    rot = body_points_from_state(np.array([0, 0, np.pi / 2]), m)
    np.testing.assert_allclose(rot[1], [0, 1], atol=1e-12)
    st = np.array([1.3, -0.4, 0.7])
    pts = body_points_from_state(st, RobotModel())
    ref = RobotModel().body_points
    d0 = np.linalg.norm(ref[:, None] - ref[None], axis=2)
    d1 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    np.testing.assert_allclose(d0, d1, atol=1e-12)


def test_collision_examples():
    w = circle_world()
    m = RobotModel(radius=0.3)
    assert check_collision(w, RobotPose(np.array([-5.0, 0.0]), 0.0), m) == (False, 0.0)
    hit, depth = check_collision(w, RobotPose(np.array([3.0, 0.0]), 0.0), m)
    assert hit and depth == pytest.approx(1.3)
    assert clearance(w, RobotPose(np.array([-5.0, 0.0]), 0.0), m) == pytest.approx(6.7)


def test_collision_matches_dense_body_oracle():
    w = WorldSpec([Circle((3.0, 0.0), 1.0), Box((-1, 2), (1, 3))], ((-10, -10), (10, 10)))
    m = RobotModel(radius=0.3)
    rng = np.random.default_rng(4)
    r = np.sqrt(rng.uniform(size=10_000)) * m.radius
    t = rng.uniform(0, 2 * np.pi, size=10_000)
    disc = np.concatenate([np.stack([r * np.cos(t), r * np.sin(t)], 1),
                           m.radius * np.stack([np.cos(t), np.sin(t)], 1)])
    checked = 0
    for _ in range(400):
        pos = rng.uniform([-1.5, -1.5], [4.5, 3.5])
        c = clearance(w, RobotPose(pos, 0.0), m)
        if abs(c) < 2e-3:
            continue  # within sampling resolution of grazing contact
        oracle = bool((ground_truth_sdf(w, disc + pos) < 0).any())
        assert check_collision(w, RobotPose(pos, 0.0), m)[0] == oracle
        checked += 1
    assert checked > 300
    # grazing: touching exactly at the tolerance boundary is not a collision
    graze = RobotPose(np.array([3.0 - 1.3, 0.0]), 0.0)
    assert check_collision(w, graze, m)[1] <= 1e-12


def test_bad_world_rejected():
    with pytest.raises(ValueError):
        WorldSpec([], ((0, 0), (1, 1)))
    with pytest.raises(ValueError):
        WorldSpec([Circle((5, 5), 1)], ((0, 0), (1, 1)))
    with pytest.raises(ValueError):
        RobotModel(u_lower=[1, 1], u_upper=[0, 0])
