"""Closed-loop map-and-navigate episodes, the two baselines, metrics and exports."""

import csv
import hashlib
import json
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy
import yaml
from scipy import ndimage
from skimage.graph import MCP_Geometric

from . import network as nn
from . import planner as pl
from .geometry import NnIndex, extract_level_set, write_segments_csv
from .mapper import Mapper, MapperConfig, load_bundle, save_bundle, select_goal
from .world import check_collision, clearance, ground_truth_sdf, lidar_scan, load_world, step_dynamics

MODES = ("ours", "fine_tune", "batched")
# the learned map is off by a few centimetres near surfaces; plan with more room
PLANNER_DEFAULTS = {"margin": 0.2}


class ConfigError(ValueError):
    pass


@dataclass
class EpisodeConfig:
    world: str = "rooms"
    seed: int = 0
    n_scans: int = 300
    mode: str = "ours"
    out: str = None
    mapper: dict = field(default_factory=dict)
    planner: dict = field(default_factory=dict)
    replan_period: float = 1.0
    goal_every: int = 20
    goal_timeout: int = 60
    goal_tol: float = 0.4
    route: list = None
    guide: bool = True
    guide_cell: float = 0.1
    guide_clearance: float = 0.25
    lookahead: float = 2.0
    batched_budget_steps: int = 1500
    batched_budget_s: float = None
    eval_cell: float = 0.05
    curve_cell: float = 0.1
    curve_every: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_scans < 0:
            raise ConfigError("n_scans must be non-negative")
        if self.replan_period <= 0 or self.eval_cell <= 0 or self.curve_cell <= 0:
            raise ConfigError("periods and cell sizes must be positive")
        unknown = set(self.planner) - {f.name for f in fields(pl.OcpSpec)}
        if unknown:
            raise ConfigError(f"unknown planner options: {sorted(unknown)}")
        try:
            MapperConfig().replace(**self.mapper)
        except ValueError as err:
            raise ConfigError(str(err)) from err

    @classmethod
    def from_file(cls, path, **overrides):
        path = Path(path)
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        # world paths are relative to the config file
        w = raw.get("world")
        if w is not None and not Path(w).is_absolute() and (path.parent / w).exists():
            raw["world"] = str(path.parent / w)
        try:
            return cls(**raw)
        except TypeError as err:
            raise ConfigError(str(err)) from err

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class EpisodeReport:
    cfg: EpisodeConfig
    world: object
    mapper: object
    metrics: dict
    trajectory: list
    planner_log: list
    training_log: list
    curve: list
    scan_poses: np.ndarray
    goals: list
    departures: dict


# evaluation grids and metrics

def cell_centers(bounds, cell):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    axes = [np.arange(l + cell / 2, h, cell) for l, h in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1), mesh[0].shape


def visited_mask(pts, scan_poses, radius):
    if scan_poses is None or len(scan_poses) == 0:
        return np.zeros(len(pts), dtype=bool)
    d, _ = NnIndex(np.asarray(scan_poses)[:, :pts.shape[1]]).query(pts)
    return d <= radius


def reachable_free(world, pts, shape, start, margin):
    free = (ground_truth_sdf(world, pts) > margin).reshape(shape)
    lab, _ = ndimage.label(free, structure=np.ones((3,) * len(shape)))
    k = np.argmin(np.linalg.norm(pts[:, :len(start)] - start, axis=1))
    tag = lab.ravel()[k]
    if tag == 0:
        return free.ravel() & False
    return (lab == tag).ravel()


def map_fields(gmap, pts, chunk=20000):
    """Argmax value, confidence and selected-map index at each point."""
    out_s, out_c, out_k = [], [], []
    for i in range(0, len(pts), chunk):
        s, c, k = gmap.query_full(pts[i:i + chunk])
        out_s.append(s)
        out_c.append(c)
        out_k.append(k)
    return np.concatenate(out_s), np.concatenate(out_c), np.concatenate(out_k)


def eikonal_rms(gmap, pts, k):
    if len(pts) == 0:
        return float("nan")
    g = np.asarray(gmap.selected_grad(pts, k), dtype=np.float64)
    err = np.linalg.norm(g, axis=1) - 1.0
    return float(np.sqrt(np.mean(err ** 2)))


def surface_samples(world, cell):
    """Points on the ground-truth zero level set that face free space."""
    lo, hi = world.bounds
    res = int(np.ceil((hi - lo).max() / cell))
    segs = extract_level_set(lambda p: ground_truth_sdf(world, p), world.bounds, res)
    pts = segs.reshape(-1, 2)
    return np.unique(np.round(pts, 9), axis=0)


def chamfer(a, b):
    """Symmetric mean nearest distance between two point sets."""
    if len(a) == 0 or len(b) == 0:
        return float("nan")
    da, _ = NnIndex(b).query(a)
    db, _ = NnIndex(a).query(b)
    return 0.5 * (float(da.mean()) + float(db.mean()))


def compute_metrics(gmap, world, scan_poses=None, cell=0.05, conf_band=0.8, dist_band=1.0, surf_cell=0.02):
    """Chamfer, grid MAE in the confident band and Eikonal RMS.

    Everything is restricted to the visited region (discs of LiDAR range
    around the scan poses); with no poses given the whole world counts as
    visited. Metrics over an empty set come back as NaN with ``absent`` set."""
    pts, shape = cell_centers(world.bounds, cell)
    rng_ = world.lidar.max_range
    vis = np.ones(len(pts), dtype=bool) if scan_poses is None else visited_mask(pts, scan_poses, rng_)
    gt = ground_truth_sdf(world, pts)
    s, c, k = map_fields(gmap, pts)
    band = vis & (c >= conf_band) & (np.abs(gt) <= dist_band)
    out = {"n_band": int(band.sum()), "n_local_maps": len(gmap.records)}
    out["mae"] = float(np.abs(s[band] - gt[band]).mean()) if band.any() else float("nan")
    out["eikonal_rms"] = eikonal_rms(gmap, pts[band], k[band]) if band.any() else float("nan")
    # zero level set of the fused map against the free-space-facing ground truth surface
    res = int(np.ceil((world.bounds[1] - world.bounds[0]).max() / cell))
    segs = extract_level_set(gmap.query, world.bounds, res)
    learned = segs.reshape(-1, 2) if len(segs) else np.zeros((0, 2))
    truth = surface_samples(world, surf_cell)
    if scan_poses is not None:
        learned = learned[visited_mask(learned, scan_poses, rng_)] if len(learned) else learned
        truth = truth[visited_mask(truth, scan_poses, rng_)]
    free_side = reachable_free(world, pts, shape, np.asarray(world.start[:2]), world.robot.radius)
    near_free, _ = NnIndex(pts[free_side]).query(truth) if free_side.any() else (np.full(len(truth), np.inf), None)
    truth = truth[near_free <= world.robot.radius + 2 * cell]
    out["chamfer"] = chamfer(learned, truth)
    out["absent"] = int(not band.any() or not np.isfinite(out["chamfer"]))
    return out


def region_curve_row(gmap, world, pts, gt, masks):
    s, c, _ = map_fields(gmap, pts)
    err = np.abs(s - gt)
    row = {}
    for name, (fixed, band_base) in masks.items():
        row[f"{name}_mae"] = float(err[fixed].mean()) if fixed.any() else float("nan")
        band = band_base & (c >= 0.8)
        row[f"{name}_band_mae"] = float(err[band].mean()) if band.any() else float("nan")
    return row


def curve_masks(world, pts, gt, d_max, dist_band=1.0):
    """Fixed near-surface masks per region (and the whole world).

    The fixed mask ignores confidence so that a map cannot hide forgetting
    by lowering its confidence; the band variant applies the confidence
    threshold on top at evaluation time."""
    near = (gt <= dist_band) & (gt >= -d_max)
    band_base = np.abs(gt) <= dist_band
    masks = {"all": (near, band_base)}
    for name, (lo, hi) in sorted(world.regions.items()):
        inside = np.all((pts[:, :len(lo)] >= lo) & (pts[:, :len(hi)] <= hi), axis=1)
        masks[name] = (near & inside, band_base & inside)
    return masks


def region_of(world, xy):
    for name, (lo, hi) in sorted(world.regions.items()):
        if np.all(xy[:len(lo)] >= lo) and np.all(xy[:len(hi)] <= hi):
            return name
    return ""


# guidance toward far goals

def guide_waypoint(gmap, start, goal, bounds, radius, cell=0.1, clear=0.25, lookahead=2.0, escape=0.5):
    """Point ``lookahead`` metres along a cheapest grid path to ``goal``, or
    ``goal`` itself when no path exists.

    Cells with more than ``clear`` to spare cost 1, tighter cells that still
    fit the robot cost 10, the rest are impassable except within ``escape``
    of the start so a robot hugging an obstacle can always leave."""
    pts, shape = cell_centers(bounds, cell)
    s = np.asarray(gmap.query(pts), dtype=np.float64).reshape(shape)
    lo = np.asarray(bounds[0], dtype=np.float64)[:2]

    def index(p):
        return tuple(np.clip(((np.asarray(p[:2]) - lo) / cell).astype(int), 0, np.array(shape) - 1))

    cost = np.where(s > radius + clear, 1.0, np.where(s > radius, 10.0, -1.0))
    near = np.linalg.norm(pts[:, :2] - np.asarray(start[:2]), axis=1).reshape(shape) <= escape
    cost[near & (cost < 0)] = 10.0
    i0, i1 = index(start), index(goal)
    cost[i0] = max(cost[i0], 1.0)
    if cost[i1] < 0:
        return np.asarray(goal, dtype=np.float64)
    mcp = MCP_Geometric(cost, fully_connected=True)
    cum, _ = mcp.find_costs([i0], [i1])
    if not np.isfinite(cum[i1]):
        return np.asarray(goal, dtype=np.float64)
    path = lo + (np.array(mcp.traceback(i1), dtype=np.float64) + 0.5) * cell
    path[0] = start[:2]
    path[-1] = goal[:2]
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    along = np.concatenate([[0.0], np.cumsum(seg)])
    j = np.searchsorted(along, lookahead)
    return path[min(j, len(path) - 1)]


# the episode

def _merge(world_block, override):
    out = dict(world_block or {})
    out.update(override or {})
    return out


def run_episode(cfg, progress=None):
    """Scan, ingest, train, pick a goal, plan and act, once per scan period."""
    try:
        world = load_world(cfg.world)
    except (OSError, KeyError, TypeError, ValueError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot load world {cfg.world!r}: {err}") from err
    wcfg = world.config or {}
    try:
        mcfg = MapperConfig().replace(**_merge(wcfg.get("mapper"), cfg.mapper))
    except ValueError as err:
        raise ConfigError(str(err)) from err
    pkw = _merge(_merge(PLANNER_DEFAULTS, wcfg.get("planner")), cfg.planner)
    model = world.robot
    dim = world.dim
    seq = np.random.SeedSequence(cfg.seed)
    noise_rng = np.random.default_rng(seq.spawn(1)[0])
    mapper = Mapper(dim, world.bounds, mcfg, seed=cfg.seed, mode=cfg.mode)

    dt = model.dt
    scan_period = 1.0 / world.lidar.rate_hz
    n_sub = max(1, int(round(scan_period / dt)))
    replan_every = max(1, int(round(cfg.replan_period / dt)))

    curve_pts, _ = cell_centers(world.bounds, cfg.curve_cell)
    curve_gt = ground_truth_sdf(world, curve_pts)
    masks = curve_masks(world, curve_pts, curve_gt, mcfg.d_max)

    pose = world.start_pose
    traj, plog, tlog, curve, scan_poses, goals = [], [], [], [], [], []
    explored_lo = explored_hi = None
    goal, goal_set_at, last_pick, excluded = None, 0, 0, []
    route = [np.asarray(g, dtype=np.float64) for g in (cfg.route or [])]
    route_i = 0
    plan_U, warm, since_plan = None, None, 0
    collisions, min_clear = 0, np.inf
    departures = {}
    step = 0
    budget_t0 = time.perf_counter()

    def explored_bbox():
        return explored_lo, explored_hi

    for k in range(cfg.n_scans):
        t_now = step * dt
        scan = lidar_scan(world, pose, rng=noise_rng, time=t_now)
        scan_poses.append(pose.position.copy())
        mapper.ingest(scan)
        hits = scan.hit_points
        here = np.vstack([hits, pose.position[None]]) if len(hits) else pose.position[None]
        explored_lo = here.min(axis=0) if explored_lo is None else np.minimum(explored_lo, here.min(axis=0))
        explored_hi = here.max(axis=0) if explored_hi is None else np.maximum(explored_hi, here.max(axis=0))

        n_train = mcfg.steps_per_scan
        if cfg.mode == "batched":
            left = cfg.batched_budget_steps - mapper.global_step
            n_train = max(0, min(n_train, left))
            if cfg.batched_budget_s is not None and time.perf_counter() - budget_t0 > cfg.batched_budget_s:
                n_train = 0
        logs = mapper.train(n_train)
        for row in logs:
            tlog.append({"step": row["step"], "total": row["total"], "L_Hs": row["sdf"], "L_Hc": row["conf"],
                         "L_E": row["eikonal"], "L_R": row["lipschitz"]})
        have_map = len(mapper.gmap) > 0 and mapper.global_step > 0
        gmap = mapper.gmap.snapshot()

        # goal bookkeeping
        pos = pose.position
        if have_map:
            if route:
                if route_i < len(route) and (np.linalg.norm(pos[:2] - route[route_i][:2]) < cfg.goal_tol
                                             or k - goal_set_at >= cfg.goal_timeout):
                    if np.linalg.norm(pos[:2] - route[route_i][:2]) < cfg.goal_tol:
                        goals.append({"scan": k, "time": t_now, "reached": 1, "x": route[route_i][0],
                                      "y": route[route_i][1], "elapsed": (k - goal_set_at) * scan_period})
                    route_i += 1
                    goal_set_at = k
                goal = route[min(route_i, len(route) - 1)] if route_i < len(route) else None
            else:
                reached = goal is not None and np.linalg.norm(pos[:2] - goal[:2]) < cfg.goal_tol
                stale = goal is not None and k - goal_set_at >= cfg.goal_timeout
                if goal is not None and (reached or stale):
                    goals.append({"scan": k, "time": t_now, "reached": int(reached), "x": goal[0], "y": goal[1],
                                  "elapsed": (k - goal_set_at) * scan_period})
                    # reached or abandoned, either way do not pick it again
                    excluded.append(goal.copy())
                fresh = goal is None or reached or stale
                if fresh or k - last_pick >= cfg.goal_every:
                    last_pick = k
                    try:
                        new = select_goal(gmap, pose, explored_bbox(), model.radius, mcfg, world.bounds, excluded)
                    except LookupError:
                        new = None
                    if new is None:
                        goal = None
                    elif fresh or np.linalg.norm(new - goal) > 1e-9:
                        goal, goal_set_at = new, k

        for name in world.regions:
            if name not in departures and region_of(world, pos) == name:
                departures[name] = k

        if k % cfg.curve_every == 0 or k == cfg.n_scans - 1:
            if have_map:
                row = {"scan": k, "time": t_now, "region": region_of(world, pos), "n_maps": len(gmap.records)}
                row.update(region_curve_row(gmap, world, curve_pts, curve_gt, masks))
                curve.append(row)

        # plan and act over one scan period
        for _ in range(n_sub):
            if since_plan % replan_every == 0 or plan_U is None:
                since_plan = 0
                if have_map and goal is not None:
                    target = goal
                    if cfg.guide:
                        target = guide_waypoint(gmap, pose.state, goal, world.bounds, model.radius,
                                                cfg.guide_cell, cfg.guide_clearance, cfg.lookahead)
                    gstate = pl.goal_state(pose.state, target)
                    res = pl.mpc_step(pose.state, gmap, gstate, model, warm, pkw, dim, shift=replan_every)
                    sol = res.solution
                    plan_U = np.zeros_like(sol.U) if res.fallback else sol.U
                    warm = sol.U
                    d = pl.collision_distance(sol.X, gmap, model, 0.0, dim)
                    plog.append({"step": step, "scp_iters": sol.iterations, "converged": int(sol.converged),
                                 "c1": sol.costs["c1"], "c2": sol.costs["c2"], "c3": sol.costs["c3"],
                                 "c4": sol.costs["c4"], "min_d": float(d.min()), "fallback": int(res.fallback),
                                 "solve_ms": res.solve_ms})
                else:
                    plan_U = np.zeros((1, 2))
                    warm = None
            j = min(since_plan, len(plan_U) - 1)
            u = np.clip(plan_U[j], model.u_lower, model.u_upper)
            pose = step_dynamics(pose, u, dt, model)
            since_plan += 1
            step += 1
            hit, _ = check_collision(world, pose, model)
            clr = clearance(world, pose, model)
            collisions += int(hit)
            min_clear = min(min_clear, clr)
            st = pose.state
            traj.append({"t": step * dt, "x": st[0], "y": st[1], "theta": st[2], "v": u[0], "omega": u[1],
                         "min_clearance": clr})
        if progress is not None:
            progress(k, mapper)

    scan_arr = np.array(scan_poses) if scan_poses else np.zeros((0, dim))
    metrics = {"world": world.name, "mode": cfg.mode, "seed": cfg.seed, "n_scans": cfg.n_scans,
               "scans_accepted": mapper.scans_accepted, "train_steps": mapper.global_step}
    if mapper.global_step > 0:
        metrics.update(compute_metrics(mapper.gmap, world, scan_arr, cfg.eval_cell))
    else:
        metrics.update({"n_band": 0, "n_local_maps": 0, "mae": float("nan"), "eikonal_rms": float("nan"),
                        "chamfer": float("nan"), "absent": 1})
    metrics["collisions"] = collisions
    metrics["min_clearance"] = float(min_clear) if traj else float("nan")
    metrics["coverage"] = coverage(world, scan_arr, cfg.curve_cell)
    done = [g for g in goals if g["reached"]]
    metrics["goals_reached"] = len(done)
    metrics["goals_abandoned"] = len(goals) - len(done)
    metrics["mean_goal_time"] = float(np.mean([g["elapsed"] for g in done])) if done else float("nan")
    metrics["sim_time"] = step * dt
    if curve:
        last = curve[-1]
        for key in sorted(last):
            if key.endswith("_mae"):
                metrics[f"final_{key}"] = last[key]
    return EpisodeReport(cfg, world, mapper, metrics, traj, plog, tlog, curve, scan_arr, goals, departures)


def coverage(world, scan_poses, cell=0.1):
    """Share of the start-connected free space inside the visited region."""
    pts, shape = cell_centers(world.bounds, cell)
    reach = reachable_free(world, pts, shape, np.asarray(world.start[:2]), world.robot.radius)
    if not reach.any():
        return float("nan")
    vis = visited_mask(pts, scan_poses, world.lidar.max_range)
    return float((reach & vis).sum() / reach.sum())


def run_baseline(cfg, progress=None):
    """Same loop with the mapper lifecycle replaced according to ``cfg.mode``."""
    return run_episode(cfg, progress)


def forgetting_summary(report, src="A", dst="B", key="mae"):
    """Region-``src`` error just before the robot first enters ``dst`` and at the end."""
    k = report.departures.get(dst)
    rows = report.curve
    if k is None or not rows:
        return None
    before = [r for r in rows if r["scan"] <= k]
    if not before:
        return None
    pre, post = before[-1][f"{src}_{key}"], rows[-1][f"{src}_{key}"]
    return {"departure_scan": k, "pre": pre, "post": post, "ratio": post / pre if pre > 0 else float("inf")}


# exports

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def write_rows(rows, path, columns=None):
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def write_metrics(metrics, path):
    write_rows([metrics], path, list(metrics))


def export_artifacts(report, outdir, figures=True, level_res=None):
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {outdir}: {err}") from err
    world = report.world
    write_metrics(report.metrics, outdir / "metrics.csv")
    write_rows(report.trajectory, outdir / "trajectory.csv", ["t", "x", "y", "theta", "v", "omega", "min_clearance"])
    write_rows(report.planner_log, outdir / "planner.csv",
               ["step", "scp_iters", "converged", "c1", "c2", "c3", "c4", "min_d", "fallback", "solve_ms"])
    write_rows(report.training_log, outdir / "training.csv", ["step", "total", "L_Hs", "L_Hc", "L_E", "L_R"])
    if report.curve:
        write_rows(report.curve, outdir / "forgetting.csv")
    write_rows(report.goals, outdir / "goals.csv", ["scan", "time", "reached", "x", "y", "elapsed"])
    gmap = report.mapper.gmap
    bundle = outdir / "bundle"
    extra = {"world": world.to_dict(), "scan_poses": np.asarray(report.scan_poses).tolist(),
             "mapper_config": asdict(report.mapper.cfg), "mode": report.cfg.mode}
    if len(gmap):
        save_bundle(gmap, bundle, extra)
        res = level_res or int(np.ceil((world.bounds[1] - world.bounds[0]).max() / report.cfg.eval_cell))
        segs = extract_level_set(gmap.query, world.bounds, res)
        write_segments_csv(segs, outdir / "levelset.csv")
    manifest = {
        "config": report.cfg.to_dict(),
        "config_hash": report.cfg.digest(),
        "seed": report.cfg.seed,
        "world": world.name,
        "versions": {"sdfnav": _version(), "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "departures": report.departures,
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    if figures:
        from . import plotting
        plotting.episode_figures(report, outdir)
    return outdir


def _version():
    try:
        from importlib.metadata import version
        return version("sdfnav")
    except Exception:
        return "unknown"


def bundle_metrics(bundle_dir, world_path=None):
    gmap, manifest = load_bundle(bundle_dir)
    if world_path is not None:
        world = load_world(world_path)
    elif "world" in manifest:
        from .world import world_from_dict
        world = world_from_dict(manifest["world"])
    else:
        raise ConfigError("bundle has no world; pass one explicitly")
    poses = manifest.get("scan_poses")
    poses = np.asarray(poses) if poses else None
    return compute_metrics(gmap, world, poses)


def export_levelset(bundle_dir, res, out=None):
    gmap, manifest = load_bundle(bundle_dir)
    if "world" not in manifest:
        raise ConfigError("bundle manifest lacks world bounds")
    from .world import world_from_dict
    world = world_from_dict(manifest["world"])
    out = Path(out) if out else Path(bundle_dir) / f"levelset_{res}.csv"
    if world.dim == 2:
        write_segments_csv(extract_level_set(gmap.query, world.bounds, res), out)
    else:
        from .geometry import write_obj
        verts, faces = extract_level_set(gmap.query, world.bounds, res)
        out = out.with_suffix(".obj")
        write_obj(verts, faces, out)
    return out
