import numpy as np
import pytest

from sdfnav import network as nn
from sdfnav.geometry import Box, Circle, NnIndex
from sdfnav.mapper import (FREE, INTERIOR, SURFACE, GlobalSdfMap, LocalMapRecord, Mapper, MapperConfig, Samples,
                           TrainingSet, Trainer, accept_scan, augment_scan, cache_and_reset, interior_confidence,
                           load_bundle, merge_datasets, replace_dataset, sample_batch, sample_indices, save_bundle,
                           select_goal, should_cache, softmax_fuse, train_step, waiting_over)
from sdfnav.world import LidarScan, RobotPose, WorldSpec, ground_truth_sdf, lidar_scan, load_world

from oracles import fd_input_grad, small_net

TOY = dict(n_freq=16, hidden=32, batch_size=200)


def const_net(s, c, dim=2):
    """Network whose outputs are the constants (s, c) everywhere."""
    p = nn.zero_like(nn.init_params(0, dim, n_freq=2, hidden=4, dtype=np.float64))
    p.weights["s_b3"][0] = s
    p.weights["c_b3"][0] = c
    return p


def record(params):
    return LocalMapRecord(params, (None, None), 0, 0.0)


def circle_world():
    return WorldSpec([Circle((0.0, 0.0), 1.0)], ((-4, -4), (4, 4)))


def one_ray_scan(rng_=2.0):
    d = np.array([[1.0, 0.0]])
    return LidarScan(np.zeros(2), d, np.array([rng_]), np.array([True]), 8.0)


@pytest.fixture(scope="module")
def toy_trained():
    """Small network trained for 2000 steps on a frozen 200-sample circle dataset."""
    world = circle_world()
    cfg = MapperConfig(**TOY)
    rng = np.random.default_rng(0)
    scan = lidar_scan(world, RobotPose(np.array([-3.0, 0.0]), 0.0), rays=360, noise_sigma=0.0)
    new = augment_scan(scan, NnIndex(scan.hit_points), cfg, rng)
    new = new.take(np.sort(rng.choice(len(new), 200, replace=False)))
    ts = TrainingSet(2, None, None)
    merge_datasets(ts, new, rng)
    params = nn.init_params(0, 2, cfg.n_freq, cfg.hidden, cfg.sigma_b, world.bounds)
    trainer = Trainer(params, cfg.replace(max_steps_per_map=10**9), world.bounds)
    logs = [train_step(trainer, ts, rng, k) for k in range(2000)]
    return world, scan, trainer, logs


def test_interior_confidence_labels():
    assert interior_confidence(0.0, 0.5, 4.0) == pytest.approx(1 + 1e-7, abs=1e-12)
    assert interior_confidence(0.5, 0.5, 4.0) == pytest.approx(1e-7, abs=1e-15)
    d = np.linspace(0, 0.5, 50)
    assert np.all(np.diff(interior_confidence(d, 0.5, 4.0)) < 0)


def test_augment_lone_hit_labels():
    cfg = MapperConfig()
    scan = one_ray_scan(2.0)
    out = augment_scan(scan, NnIndex(scan.hit_points), cfg, np.random.default_rng(0))
    surf, free, inner = (out.take(out.kind == k) for k in (SURFACE, FREE, INTERIOR))
    assert len(surf) == 1 and surf.s[0] == 0 and surf.c[0] == 1
    assert len(free) == cfg.n_free and len(inner) == cfg.n_interior
    # with one stored point the nearest distance is the along-ray gap
    np.testing.assert_allclose(free.s, 2.0 - free.p[:, 0], atol=1e-12)
    assert np.all((free.p[:, 0] > 0) & (free.p[:, 0] < 2)) and np.all(free.c == 1)
    depth = inner.p[:, 0] - 2.0
    np.testing.assert_allclose(inner.s, -depth, atol=1e-12)
    assert np.all((depth > 0) & (depth < cfg.d_max))
    np.testing.assert_allclose(inner.c, interior_confidence(depth, cfg.d_max, cfg.base))
    # stratified: one sample per stratum
    np.testing.assert_array_equal(np.floor(free.p[:, 0] / (2.0 / cfg.n_free)), np.arange(cfg.n_free))


def test_free_labels_over_approximate_corridor():
    world = load_world("corridor")
    cfg = MapperConfig()
    rng = np.random.default_rng(1)
    stored = []
    for x in (1.5, 5.0, 8.5):
        scan = lidar_scan(world, RobotPose(np.array([x, 2.0]), 0.3), noise_sigma=0.0)
        stored.append(scan.hit_points)
        out = augment_scan(scan, NnIndex(np.concatenate(stored)), cfg, rng)
        free = out.take(out.kind == FREE)
        assert np.all(free.s >= ground_truth_sdf(world, free.p) - 1e-3)


def test_accept_scan():
    world = circle_world()
    scan = lidar_scan(world, RobotPose(np.array([-3.0, 0.0]), 0.0), noise_sigma=0.0)
    assert accept_scan(scan, None)
    assert not accept_scan(scan, scan.hit_points)
    wall = WorldSpec([Circle((0.0, 0.0), 1.0), Box((2.0, -4.0), (2.5, 4.0))], ((-4, -4), (4, 4)))
    scan2 = lidar_scan(wall, RobotPose(np.array([1.5, 0.0]), 0.0), noise_sigma=0.0)
    assert accept_scan(scan2, scan.hit_points, 0.1)
    empty = LidarScan(np.zeros(2), np.array([[1.0, 0]]), np.array([np.inf]), np.array([False]), 8.0)
    assert not accept_scan(empty, None)


def samples(n, s=None, kind=FREE):
    s = np.arange(n, dtype=float) if s is None else s
    return Samples(np.stack([np.arange(n), np.zeros(n)], 1).astype(float), s, np.ones(n), np.full(n, kind, np.int8))


def test_merge_capacity():
    ts = TrainingSet(2, 10, 10)
    merge_datasets(ts, samples(8), np.random.default_rng(0))
    assert len(ts.aug) == 8
    merge_datasets(ts, samples(12), np.random.default_rng(0))
    assert len(ts.aug) == 10
    ts2 = TrainingSet(2, 5, 5)
    merge_datasets(ts2, Samples.concat([samples(10, kind=SURFACE), samples(10)]), np.random.default_rng(0))
    assert len(ts2.surface) == 5 and len(ts2.aug) == 5


def test_merge_retention_uniform():
    n, cap, trials = 20, 10, 1000
    counts = np.zeros(n)
    rng = np.random.default_rng(1)
    for _ in range(trials):
        ts = TrainingSet(2, None, cap)
        merge_datasets(ts, samples(n), rng)
        counts[ts.aug.s.astype(int)] += 1
    p = cap / n
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) <= 3 * sigma + 1)


def test_sampling_weights():
    rng = np.random.default_rng(2)
    ts = TrainingSet(2, None, None)
    merge_datasets(ts, samples(4, s=np.full(4, 0.3)), rng)
    counts = np.bincount(sample_indices(ts, 40_000, rng), minlength=4)
    assert np.all(np.abs(counts - 10_000) < 3 * np.sqrt(40_000 * 0.25 * 0.75))
    ts = TrainingSet(2, None, None)
    merge_datasets(ts, samples(2, s=np.array([0.05, 0.95])), rng)
    n = 10_000
    k = np.bincount(sample_indices(ts, n, rng), minlength=2)[0]
    p = 10 / 11
    assert abs(k - n * p) <= 3 * np.sqrt(n * p * (1 - p))
    batch = sample_batch(ts, 50, rng)
    assert len(batch) == 50
    with pytest.raises(ValueError):
        sample_indices(TrainingSet(2, None, None), 5, rng)


def test_unseen_samples_are_far():
    rng = np.random.default_rng(3)
    ts = TrainingSet(2, None, None)
    merge_datasets(ts, samples(5), rng)
    b = sample_batch(ts, 100, rng, bounds=(np.array([-10, -10]), np.array([10, 10])), unseen_fraction=0.5)
    extra = ~b.has_sdf
    assert extra.sum() > 20
    assert np.all(ts.nearest_sample_distance(b.p[extra].astype(float)) > 0.5)
    assert np.all(b.c[extra] == np.float32(nn.CONF_FLOOR))


def test_training_reduces_loss(toy_trained):
    _, _, trainer, logs = toy_trained
    assert all(np.isfinite(r["total"]) for r in logs) and len(trainer.log) == 2000
    first = logs[0]["total"] * 1e-4
    assert trainer.ema < 0.1 * first


def test_zero_lr_leaves_params():
    world = circle_world()
    cfg = MapperConfig(**TOY, lr=0.0, weight_decay=0.0)
    rng = np.random.default_rng(0)
    scan = lidar_scan(world, RobotPose(np.array([-3.0, 0.0]), 0.0), rays=30, noise_sigma=0.0)
    ts = merge_datasets(TrainingSet(2, None, None), augment_scan(scan, NnIndex(scan.hit_points), cfg, rng), rng)
    tr = Trainer(nn.init_params(0, 2, 16, 32), cfg, world.bounds)
    before = tr.params.flat().copy()
    for k in range(5):
        train_step(tr, ts, rng, k)
    np.testing.assert_array_equal(tr.params.flat(), before)
    tr.waiting = True
    with pytest.raises(RuntimeError):
        train_step(tr, ts, rng)


def test_should_cache_rules():
    cfg = MapperConfig(cache_patience=50, max_steps_per_map=100)
    tr = Trainer(small_net(0), cfg, None)
    assert not should_cache(tr)
    tr.below = 49
    assert not should_cache(tr)
    tr.below = 0  # an EMA above threshold resets the streak
    assert not should_cache(tr)
    tr.below = 50
    assert should_cache(tr)
    tr.below, tr.map_steps = 0, 100
    assert should_cache(tr)


def test_cache_and_reset(toy_trained):
    world, scan, trainer, _ = toy_trained
    gmap = GlobalSdfMap()
    tr = Trainer(trainer.params.copy(), trainer.cfg, world.bounds)
    tr.log = list(trainer.log)
    tr.note_surface(scan.hit_points)
    rec = cache_and_reset(gmap, tr, 7)
    assert len(gmap.records) == 1 and rec.created_step == 7
    for k in nn.TRAINABLE:
        np.testing.assert_array_equal(rec.params.weights[k], trainer.params.weights[k])
    assert tr.waiting and tr.map_steps == 0 and tr.prev_record is rec
    probe = np.random.default_rng(4).uniform(-3, 3, size=(100, 2))
    before = GlobalSdfMap()
    before.records = [rec]
    ref = before.query(probe)
    # keep training the (warm-started) active copy; the frozen record must not move
    tr.params = rec.params.copy()
    tr.waiting = False
    ts = merge_datasets(TrainingSet(2, None, None),
                        augment_scan(scan, NnIndex(scan.hit_points), tr.cfg, np.random.default_rng(5)),
                        np.random.default_rng(5))
    for k in range(20):
        train_step(tr, ts, np.random.default_rng(k), k)
    np.testing.assert_array_equal(before.query(probe), ref)


def test_waiting_over(toy_trained):
    world, scan, trainer, _ = toy_trained
    rec = record(trainer.params)
    assert not waiting_over(rec, scan, 0.3)
    far = WorldSpec([Circle((0.0, 0.0), 1.0), Box((2.0, -4.0), (2.5, 4.0))], ((-4, -4), (4, 4)))
    scan2 = lidar_scan(far, RobotPose(np.array([1.2, 0.0]), 0.0), rays=90, noise_sigma=0.0)
    assert np.abs(nn.forward(trainer.params, scan2.hit_points)[0]).max() > 0.3
    assert waiting_over(rec, scan2, 0.3)
    empty = LidarScan(np.zeros(2), np.array([[1.0, 0]]), np.array([np.inf]), np.array([False]), 8.0)
    assert not waiting_over(rec, empty, 0.3)


def test_global_query_selection():
    g = GlobalSdfMap()
    with pytest.raises(ValueError):
        g.query(np.zeros((1, 2)))
    g.records = [record(const_net(0.5, 0.9)), record(const_net(-0.2, 0.2))]
    assert g.query(np.zeros((3, 2))) == pytest.approx([0.5] * 3)
    g.records.append(record(const_net(0.7, 0.9)))
    assert g.query(np.zeros((1, 2)))[0] == pytest.approx(0.7)  # tie goes to the most recent
    single = GlobalSdfMap()
    single.records = [record(small_net(1))]
    p = np.random.default_rng(5).uniform(-1, 1, size=(50, 2))
    np.testing.assert_array_equal(single.query(p), nn.forward(small_net(1), p)[0])
    np.testing.assert_array_equal(single.query_smooth(p), single.query(p))


def test_global_query_matches_brute_force():
    nets = [small_net(k) for k in range(4)]
    g = GlobalSdfMap()
    g.records = [record(n) for n in nets[:3]]
    g.active = nets[3]
    p = np.random.default_rng(6).uniform(-1.5, 1.5, size=(200, 2))
    s, c, k = g.query_full(p)
    outs = [nn.forward(n, p) for n in nets]
    for j in range(len(p)):
        best, best_c = None, -np.inf
        for i, (si, ci) in enumerate(outs):
            if ci[j] >= best_c:
                best, best_c, bi = si[j], ci[j], i
        assert s[j] == best and c[j] == best_c and k[j] == bi
    np.testing.assert_array_equal(g.confidence(p), c)


def test_softmax_fusion_examples():
    s = np.array([[1.0], [3.0]])
    assert softmax_fuse(s, np.array([[0.4], [0.4]]), 100.0)[0] == pytest.approx(2.0)
    c = np.array([[0.6], [0.5]])
    dev = abs(softmax_fuse(s, c, 100.0)[0] - 1.0)
    assert dev <= np.exp(-10) * 2.0
    # huge alpha and confidences must not overflow
    assert np.isfinite(softmax_fuse(s, c * 1e3, 1e4)).all()


def test_softmax_converges_to_argmax():
    rng = np.random.default_rng(7)
    for _ in range(50):
        s = rng.normal(size=(2, 1))
        c = rng.uniform(0, 1, size=(2, 1))
        gap = abs(c[0, 0] - c[1, 0])
        if gap < 0.05:
            continue
        exact = s[np.argmax(c[:, 0]), 0]
        devs = [abs(softmax_fuse(s, c, a)[0] - exact) for a in (1e2, 1e3, 1e4)]
        bound = [np.exp(-a * gap) * abs(s[0, 0] - s[1, 0]) for a in (1e2, 1e3, 1e4)]
        assert devs[0] >= devs[1] >= devs[2]
        assert all(d <= b + 1e-15 for d, b in zip(devs, bound))


def test_smooth_query_gradient_fd():
    g = GlobalSdfMap(alpha=10.0)
    g.records = [record(small_net(2)), record(small_net(3))]
    p = np.random.default_rng(8).uniform(-1.5, 1.5, size=(30, 2))
    v, grad = g.query_smooth_with_grad(p)
    np.testing.assert_allclose(v, g.query_smooth(p), rtol=1e-12, atol=1e-12)
    fd = fd_input_grad(g.query_smooth, p)
    _, c = g._eval(p)
    ok = np.all((c > nn.CONF_FLOOR + 1e-4) & (c < 1 - 1e-4), axis=0)
    np.testing.assert_allclose(grad[ok], fd[ok], rtol=1e-4, atol=1e-7)


def test_select_goal_rules():
    cfg = MapperConfig(goal_cell=0.5, goal_inflate=0.0)
    g = GlobalSdfMap()
    g.records = [record(const_net(5.0, 0.5))]
    pose = RobotPose(np.array([0.1, 0.1]), 0.0)
    goal = select_goal(g, pose, (np.zeros(2), np.array([4.0, 2.0])), 0.3, cfg)
    np.testing.assert_allclose(goal, [3.75, 1.75])
    # excluded neighbourhoods are skipped
    goal2 = select_goal(g, pose, (np.zeros(2), np.array([4.0, 2.0])), 0.3, cfg, exclude=[goal], exclude_radius=1.0)
    assert np.linalg.norm(goal2 - goal) > 1.0
    blocked = GlobalSdfMap()
    blocked.records = [record(const_net(0.1, 0.5))]
    with pytest.raises(LookupError):
        select_goal(blocked, pose, (np.zeros(2), np.array([4.0, 2.0])), 0.3, cfg)


def test_select_goal_prefers_unvisited_room():
    """Trained on scans from the left room only: the goal must land in the right one."""
    world = load_world("rooms")
    cfg = MapperConfig(**TOY)
    m = Mapper(2, world.bounds, cfg, seed=0)
    for k, x in enumerate((1.5, 3.0, 4.5)):
        for y in (1.5, 4.5):
            m.ingest(lidar_scan(world, RobotPose(np.array([x, y]), 0.0), noise_sigma=0.0))
            m.train(60)
    goal = select_goal(m.gmap, RobotPose(np.array([3.0, 2.0]), 0.0), world.bounds, world.robot.radius, cfg)
    assert goal[0] > 6.25


def test_bundle_roundtrip(tmp_path):
    g = GlobalSdfMap(alpha=50.0)
    g.records = [LocalMapRecord(nn.init_params(1, 2), (np.zeros(2), np.ones(2)), 3, 0.5)]
    g.active = nn.init_params(2, 2)
    save_bundle(g, tmp_path / "b", {"note": "x"})
    again, manifest = load_bundle(tmp_path / "b")
    assert manifest["note"] == "x" and again.alpha == 50.0
    p = np.random.default_rng(9).uniform(-1, 1, size=(1000, 2))
    np.testing.assert_array_equal(g.query(p), again.query(p))


def test_mapper_modes():
    world = load_world("rooms")
    cfg = MapperConfig(**TOY)
    scans = [lidar_scan(world, RobotPose(np.array([x, 1.5]), 0.0), noise_sigma=0.0) for x in (1.5, 8.0)]
    ft = Mapper(2, world.bounds, cfg, seed=0, mode="fine_tune")
    for s in scans:
        assert ft.ingest(s)
    last = augment_scan(scans[1], NnIndex(scans[1].hit_points), cfg, np.random.default_rng(0))
    assert len(ft.dataset) == len(last)
    ours = Mapper(2, world.bounds, cfg, seed=0)
    assert ours.ingest(scans[0]) and not ours.ingest(scans[0])
    assert ours.ingest(scans[1])
    bat = Mapper(2, world.bounds, cfg.replace(n_surface=10, n_aug=10), seed=0, mode="batched")
    for s in scans:
        bat.ingest(s)
    assert len(bat.dataset) > 20  # batched keeps everything


def test_replace_dataset():
    ts = TrainingSet(2, 5, 5)
    merge_datasets(ts, samples(5), np.random.default_rng(0))
    replace_dataset(ts, samples(3, kind=SURFACE))
    assert len(ts.surface) == 3 and len(ts.aug) == 0


def test_config_replace_rejects_unknown():
    with pytest.raises(ValueError):
        MapperConfig().replace(nonsense=1)
    assert MapperConfig.paper_scale().batch_size == 10_000
