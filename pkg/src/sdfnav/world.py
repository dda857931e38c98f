"""Ground-truth world, LiDAR simulation, unicycle kinematics and collision checks."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geometry import primitive_from_dict

TRACE_TOL = 1e-4
TRACE_SAFETY = 0.99
TRACE_MAX_STEPS = 256
FLOOR_BAND = 0.05


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(a) == 0 else w


@dataclass(frozen=True)
class RobotPose:
    position: np.ndarray
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def state(self):
        """Planar state (x, y, theta)."""
        return np.array([self.position[0], self.position[1], self.heading])

    @classmethod
    def from_state(cls, state, z=None):
        pos = state[:2] if z is None else np.array([state[0], state[1], z])
        return cls(pos, state[2])


@dataclass
class RobotModel:
    """Disc robot. Each body sample carries a local radius: the robot is the
    union of balls around its samples, so clearance of a sample is
    ``S(p_k) - r_k``."""

    radius: float = 0.3
    n_boundary: int = 8
    u_lower: np.ndarray = field(default_factory=lambda: np.array([-0.5, -1.5]))
    u_upper: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.5]))
    dt: float = 0.25
    height: float = 0.0

    def __post_init__(self):
        self.u_lower = np.asarray(self.u_lower, dtype=np.float64)
        self.u_upper = np.asarray(self.u_upper, dtype=np.float64)
        if self.n_boundary < 0 or self.radius <= 0:
            raise ValueError("bad robot body")
        if not np.all(self.u_lower < self.u_upper):
            raise ValueError("u_lower must be below u_upper")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        ang = 2 * np.pi * np.arange(self.n_boundary) / max(self.n_boundary, 1)
        ring = self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        self.body_points = np.vstack([np.zeros((1, 2)), ring])
        self.body_radii = np.concatenate([[self.radius], np.zeros(self.n_boundary)])

    @property
    def n_body(self):
        return len(self.body_points)

    def to_dict(self):
        return {
            "radius": self.radius,
            "n_boundary": self.n_boundary,
            "u_lower": self.u_lower.tolist(),
            "u_upper": self.u_upper.tolist(),
            "dt": self.dt,
            "height": self.height,
        }


@dataclass
class LidarConfig:
    rays: int = 360
    max_range: float = 8.0
    noise_sigma: float = 0.0
    rate_hz: float = 2.0
    elevations: tuple = (0.0,)

    def to_dict(self):
        return {
            "rays": self.rays,
            "max_range": self.max_range,
            "noise_sigma": self.noise_sigma,
            "rate_hz": self.rate_hz,
            "elevations": list(self.elevations),
        }


@dataclass
class WorldSpec:
    primitives: list
    bounds: tuple
    floor_height: float = None
    name: str = "world"
    robot: RobotModel = field(default_factory=RobotModel)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    start: tuple = (0.0, 0.0, 0.0)
    regions: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("world needs at least one primitive")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        self.bounds = (lo, hi)
        for prim in self.primitives:
            plo, phi = prim.bbox()
            if prim.dim != self.dim or np.any(plo < lo - 1e-9) or np.any(phi > hi + 1e-9):
                raise ValueError(f"primitive {prim} outside world bounds")

    @property
    def dim(self):
        return len(self.bounds[0])

    @property
    def start_pose(self):
        z = self.robot.height if self.dim == 3 else None
        return RobotPose.from_state(np.asarray(self.start, dtype=np.float64), z)

    def to_dict(self):
        lo, hi = self.bounds
        return {
            "name": self.name,
            "bounds": {"min": lo.tolist(), "max": hi.tolist()},
            "floor_height": self.floor_height,
            "primitives": [p.to_dict() for p in self.primitives],
            "robot": self.robot.to_dict(),
            "lidar": self.lidar.to_dict(),
            "start": list(self.start),
            "regions": {k: {"min": list(v[0]), "max": list(v[1])} for k, v in self.regions.items()},
            "config": self.config,
        }


def world_from_dict(d):
    lidar = dict(d.get("lidar", {}))
    if "elevations" in lidar:
        lidar["elevations"] = tuple(lidar["elevations"])
    return WorldSpec(
        primitives=[primitive_from_dict(p) for p in d["primitives"]],
        bounds=(d["bounds"]["min"], d["bounds"]["max"]),
        floor_height=d.get("floor_height"),
        name=d.get("name", "world"),
        robot=RobotModel(**d.get("robot", {})),
        lidar=LidarConfig(**lidar),
        start=tuple(d.get("start", (0.0, 0.0, 0.0))),
        regions={k: (tuple(v["min"]), tuple(v["max"])) for k, v in d.get("regions", {}).items()},
        config=d.get("config", {}) or {},
    )


def load_world(path):
    path = Path(path)
    if not path.exists():
        builtin = Path(__file__).parent / "worlds" / f"{path.name}.yaml"
        if builtin.exists():
            path = builtin
    with open(path) as fh:
        return world_from_dict(yaml.safe_load(fh))


def save_world(world, path):
    with open(path, "w") as fh:
        yaml.safe_dump(world.to_dict(), fh, sort_keys=False)


def builtin_worlds():
    return sorted(p.stem for p in (Path(__file__).parent / "worlds").glob("*.yaml"))


def _primitive_values(world, p):
    vals = [prim.sdf(p) for prim in world.primitives]
    if world.floor_height is not None:
        vals.append(p[:, 2] - world.floor_height)
    return np.stack(vals)


def ground_truth_sdf(world, p):
    """Union (min) of the primitive SDFs, plus the floor half-space in 3D."""
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    out = _primitive_values(world, pts).min(axis=0)
    return float(out[0]) if np.ndim(p) == 1 else out


def ground_truth_sdf_grad(world, p):
    """Value and gradient of the union SDF; gradient taken from the minimising primitive."""
    pts = np.atleast_2d(np.asarray(p, dtype=np.float64))
    vals = _primitive_values(world, pts)
    k = np.argmin(vals, axis=0)
    grads = np.zeros_like(pts)
    for j, prim in enumerate(world.primitives):
        sel = k == j
        if sel.any():
            grads[sel] = prim.grad(pts[sel])
    if world.floor_height is not None:
        sel = k == len(world.primitives)
        grads[sel] = np.array([0.0, 0.0, 1.0])
    return vals[k, np.arange(len(pts))], grads


@dataclass(frozen=True)
class LidarScan:
    origin: np.ndarray
    directions: np.ndarray
    ranges: np.ndarray
    hit_mask: np.ndarray
    max_range: float
    pose: RobotPose = None
    time: float = 0.0

    @property
    def hit_points(self):
        return self.origin + self.ranges[self.hit_mask, None] * self.directions[self.hit_mask]

    @property
    def hit_directions(self):
        return self.directions[self.hit_mask]

    @property
    def n_hits(self):
        return int(self.hit_mask.sum())


def ray_directions(heading, rays, elevations=(0.0,), dim=2):
    az = heading + 2 * np.pi * np.arange(rays) / rays
    if dim == 2:
        return np.stack([np.cos(az), np.sin(az)], axis=1)
    dirs = []
    for el in elevations:
        dirs.append(np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                              np.full_like(az, np.sin(el))], axis=1))
    return np.concatenate(dirs)


def sphere_trace(world, origin, directions, max_range):
    """March each ray by the SDF value until it converges on a surface.

    Returns (ranges, hit_mask)."""
    n = len(directions)
    t = np.zeros(n)
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    s = np.full(n, np.inf)
    for _ in range(TRACE_MAX_STEPS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        s[idx] = ground_truth_sdf(world, origin + t[idx, None] * directions[idx])
        done = np.abs(s[idx]) < TRACE_TOL
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, TRACE_SAFETY * s[idx])
        gone = t[idx] > max_range
        active[idx[done | gone]] = False
    # rays still creeping along a grazed surface after the step budget
    stalled = active & (np.abs(s) <= 1e-3) & (t <= max_range)
    hit |= stalled
    hit &= t <= max_range
    return np.where(hit, t, np.inf), hit


def lidar_scan(world, pose, rays=None, max_range=None, noise_sigma=None, rng=None, time=0.0):
    cfg = world.lidar
    rays = cfg.rays if rays is None else rays
    max_range = cfg.max_range if max_range is None else max_range
    noise_sigma = cfg.noise_sigma if noise_sigma is None else noise_sigma
    origin = np.asarray(pose.position, dtype=np.float64)
    dirs = ray_directions(pose.heading, rays, cfg.elevations, world.dim)
    ranges, hit = sphere_trace(world, origin, dirs, max_range)
    if noise_sigma > 0:
        rng = np.random.default_rng() if rng is None else rng
        noise = rng.normal(0.0, noise_sigma, size=len(ranges))
        ranges = np.where(hit, np.clip(ranges + noise, 0.0, max_range), ranges)
    return LidarScan(origin, dirs, ranges, hit, max_range, pose, time)


def unicycle_step(state, u, dt):
    """Explicit Euler step of the unicycle on a (3,) or (N, 3) state."""
    x, y, th = state[..., 0], state[..., 1], state[..., 2]
    v, w = u[..., 0], u[..., 1]
    return np.stack([x + v * np.cos(th) * dt, y + v * np.sin(th) * dt, th + w * dt], axis=-1)


def step_dynamics(pose, u, dt, model=None):
    u = np.asarray(u, dtype=np.float64)
    if model is not None and (np.any(u < model.u_lower - 1e-9) or np.any(u > model.u_upper + 1e-9)):
        raise ValueError(f"control {u} outside bounds")
    nxt = unicycle_step(pose.state, u, dt)
    z = pose.position[2] if len(pose.position) == 3 else None
    return RobotPose.from_state(nxt, z)


def body_points_from_state(state, model, dim=2):
    """World-frame body samples for a planar state (x, y, theta)."""
    c, s = np.cos(state[2]), np.sin(state[2])
    rot = np.array([[c, -s], [s, c]])
    pts = model.body_points @ rot.T + state[:2]
    if dim == 3:
        pts = np.hstack([pts, np.full((len(pts), 1), model.height)])
    return pts


def robot_body_points(pose, model):
    pts = body_points_from_state(pose.state, model, 2)
    if len(pose.position) == 3:
        pts = np.hstack([pts, np.full((len(pts), 1), pose.position[2])])
    return pts


def check_collision(world, pose, model):
    """(collides, penetration depth) against the ground-truth geometry."""
    pts = robot_body_points(pose, model)
    viol = model.body_radii - ground_truth_sdf(world, pts)
    depth = float(viol.max())
    return depth > 0, max(depth, 0.0)


def clearance(world, pose, model):
    """Signed clearance of the robot body: min over samples of S(p_k) - r_k."""
    pts = robot_body_points(pose, model)
    return float((ground_truth_sdf(world, pts) - model.body_radii).min())


def free_space_mask(world, axes, margin):
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return (ground_truth_sdf(world, pts) > margin).reshape(mesh[0].shape)
