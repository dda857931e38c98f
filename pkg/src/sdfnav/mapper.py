"""Online continual mapping with a growing set of cached local networks."""

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import network as nn
from .geometry import NnIndex, directed_hausdorff

SURFACE, FREE, INTERIOR = 0, 1, 2
KIND_NAMES = {SURFACE: "surface", FREE: "free", INTERIOR: "interior"}


@dataclass
class MapperConfig:
    n_surface: int = 20_000
    n_aug: int = 100_000
    batch_size: int = 1_000
    base: float = 4.0
    d_max: float = 0.5
    n_free: int = 8
    n_interior: int = 4
    tau_ingest: float = 0.1
    tau_wait: float = 0.2
    tau_cache: float = 0.01
    cache_patience: int = 50
    ema_decay: float = 0.99
    max_steps_per_map: int = 3000
    eps_weight: float = 0.05
    alpha: float = 100.0
    lr: float = 1e-2
    weight_decay: float = 1e-4
    sigma_b: float = 0.8
    n_freq: int = 64
    hidden: int = 128
    # unobserved-space confidence supervision
    unseen_fraction: float = 0.1
    unseen_radius: float = 0.5
    floor_height: float = None
    steps_per_scan: int = 25
    goal_cell: float = 0.5
    goal_clearance: float = 0.2
    goal_inflate: float = 1.0

    @classmethod
    def paper_scale(cls, **kw):
        """Dataset and batch sizes used in the original experiments."""
        return cls(n_surface=200_000, n_aug=300_000, batch_size=10_000, **kw)

    def replace(self, **kw):
        unknown = set(kw) - set(asdict(self))
        if unknown:
            raise ValueError(f"unknown mapper options: {sorted(unknown)}")
        out = copy.copy(self)
        for k, v in kw.items():
            setattr(out, k, v)
        return out


@dataclass
class Samples:
    """Columnar store of labelled samples (p, s, c, kind)."""

    p: np.ndarray
    s: np.ndarray
    c: np.ndarray
    kind: np.ndarray

    @classmethod
    def empty(cls, dim):
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int8))

    def __len__(self):
        return len(self.s)

    def take(self, idx):
        return Samples(self.p[idx], self.s[idx], self.c[idx], self.kind[idx])

    @staticmethod
    def concat(parts):
        parts = list(parts)
        return Samples(np.concatenate([q.p for q in parts]), np.concatenate([q.s for q in parts]),
                       np.concatenate([q.c for q in parts]), np.concatenate([q.kind for q in parts]))


def interior_confidence(depth, d_max, base):
    """Confidence label for a point ``depth`` metres past the observed surface."""
    w = 1.0 - np.asarray(depth) / d_max
    return (base ** w - 1.0) / (base - 1.0) + 1e-7


def accept_scan(scan, stored_surface, tau_ingest=0.1):
    hits = scan.hit_points
    if len(hits) == 0:
        return False
    if stored_surface is None or len(stored_surface) == 0:
        return True
    return directed_hausdorff(hits, stored_surface) > tau_ingest


def obstacle_hits(scan, floor_height=None):
    """Hit points and their ray directions, with floor returns removed."""
    hits, dirs = scan.hit_points, scan.hit_directions
    if floor_height is not None and hits.shape[1] == 3:
        keep = np.abs(hits[:, 2] - floor_height) > 0.05
        hits, dirs = hits[keep], dirs[keep]
    return hits, dirs


def augment_scan(scan, index, cfg, rng):
    """Surface, free-space and interior samples along every obstacle ray."""
    hits, dirs = obstacle_hits(scan, cfg.floor_height)
    n = len(hits)
    dim = scan.origin.shape[0]
    if n == 0:
        return Samples.empty(dim)
    ranges = np.linalg.norm(hits - scan.origin, axis=1)

    u = rng.uniform(0.0, 1.0, size=(n, cfg.n_free))
    u = np.clip(u, 1e-6, 1 - 1e-6)
    t = ranges[:, None] * (np.arange(cfg.n_free) + u) / cfg.n_free
    free_p = (scan.origin + t[..., None] * dirs[:, None, :]).reshape(-1, dim)
    free_s, _ = index.query(free_p)

    u = rng.uniform(0.0, 1.0, size=(n, cfg.n_interior))
    u = np.clip(u, 1e-6, 1 - 1e-6)
    depth = cfg.d_max * (np.arange(cfg.n_interior) + u) / cfg.n_interior
    int_p = (hits[:, None, :] + depth[..., None] * dirs[:, None, :]).reshape(-1, dim)
    int_s, _ = index.query(int_p)
    int_c = interior_confidence(depth.ravel(), cfg.d_max, cfg.base)

    return Samples(
        np.concatenate([hits, free_p, int_p]),
        np.concatenate([np.zeros(n), free_s, -int_s]),
        np.concatenate([np.ones(n), np.ones(len(free_p)), int_c]),
        np.concatenate([np.full(n, SURFACE), np.full(len(free_p), FREE),
                        np.full(len(int_p), INTERIOR)]).astype(np.int8),
    )


class TrainingSet:
    """Bounded surface and augmented buffers with inverse-distance sampling weights."""

    def __init__(self, dim, n_surface, n_aug, eps_weight=0.05):
        self.dim = dim
        self.n_surface = n_surface
        self.n_aug = n_aug
        self.eps_weight = eps_weight
        self.surface = Samples.empty(dim)
        self.aug = Samples.empty(dim)
        self._refresh()

    def __len__(self):
        return len(self.surface) + len(self.aug)

    def _refresh(self):
        self.all = Samples.concat([self.surface, self.aug])
        w = 1.0 / (np.abs(self.all.s) + self.eps_weight)
        self.weights = w
        self._cdf = np.cumsum(w)
        self._tree = NnIndex(self.all.p) if len(self.all) else None

    def surface_points(self):
        return self.surface.p

    def nearest_sample_distance(self, p):
        if self._tree is None:
            return np.full(len(p), np.inf)
        return self._tree.query(p)[0]


def _downsample(samples, capacity, rng):
    if capacity is None or len(samples) <= capacity:
        return samples
    keep = np.sort(rng.choice(len(samples), size=capacity, replace=False))
    return samples.take(keep)


def merge_datasets(ts, new, rng):
    """Append ``new`` samples and uniformly subsample each buffer back to capacity."""
    surf = new.take(new.kind == SURFACE)
    aug = new.take(new.kind != SURFACE)
    ts.surface = _downsample(Samples.concat([ts.surface, surf]), ts.n_surface, rng)
    ts.aug = _downsample(Samples.concat([ts.aug, aug]), ts.n_aug, rng)
    ts._refresh()
    return ts


def replace_dataset(ts, new):
    ts.surface = new.take(new.kind == SURFACE)
    ts.aug = new.take(new.kind != SURFACE)
    ts._refresh()
    return ts


def sample_indices(ts, batch_size, rng):
    """Draw with replacement, probability proportional to 1 / (|s| + eps)."""
    if len(ts) == 0:
        raise ValueError("empty training set")
    r = rng.random(batch_size) * ts._cdf[-1]
    return np.minimum(np.searchsorted(ts._cdf, r, side="right"), len(ts) - 1)


def sample_batch(ts, batch_size, rng, bounds=None, unseen_fraction=0.0, unseen_radius=0.5, dtype=np.float32):
    """Weighted batch; optionally a share of uniform points in ``bounds`` that
    lie far from every stored sample, labelled with zero confidence and no
    distance target."""
    n_unseen = int(round(batch_size * unseen_fraction)) if bounds is not None else 0
    idx = sample_indices(ts, batch_size - n_unseen, rng)
    p, s, c = ts.all.p[idx], ts.all.s[idx], ts.all.c[idx]
    has_sdf = np.ones(len(idx), dtype=bool)
    if n_unseen:
        lo, hi = bounds
        q = rng.uniform(lo, hi, size=(n_unseen, len(lo)))
        far = ts.nearest_sample_distance(q) > unseen_radius
        q = q[far]
        p = np.concatenate([p, q])
        s = np.concatenate([s, np.zeros(len(q))])
        c = np.concatenate([c, np.full(len(q), nn.CONF_FLOOR)])
        has_sdf = np.concatenate([has_sdf, np.zeros(len(q), dtype=bool)])
    return nn.Batch(p.astype(dtype), s.astype(dtype), c.astype(dtype), has_sdf)


@dataclass
class LocalMapRecord:
    params: nn.NetParams
    region: tuple
    created_step: int
    final_loss: float


class Trainer:
    """Single-owner training state of the active local map."""

    def __init__(self, params, cfg, bounds):
        self.cfg = cfg
        self.bounds = bounds
        self.params = params
        self.opt = nn.OptState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.map_steps = 0
        self.ema = None
        self.below = 0
        self.waiting = False
        self.prev_record = None
        self.region_lo = None
        self.region_hi = None
        self.log = []

    def note_surface(self, pts):
        if len(pts) == 0:
            return
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        self.region_lo = lo if self.region_lo is None else np.minimum(self.region_lo, lo)
        self.region_hi = hi if self.region_hi is None else np.maximum(self.region_hi, hi)

    def reset(self):
        self.opt = nn.OptState(lr=self.cfg.lr, weight_decay=self.cfg.weight_decay)
        self.map_steps = 0
        self.ema = None
        self.below = 0
        self.region_lo = self.region_hi = None


class DivergedError(nn.DivergenceError):
    def __init__(self, msg, params):
        super().__init__(msg)
        self.params = params


def train_step(trainer, ts, rng, global_step=0):
    if trainer.waiting:
        raise RuntimeError("trainer is in its waiting period")
    cfg = trainer.cfg
    batch = sample_batch(ts, cfg.batch_size, rng, trainer.bounds, cfg.unseen_fraction, cfg.unseen_radius,
                         dtype=trainer.params.dtype)
    backup = trainer.params.copy()
    try:
        loss, grads, parts = nn.loss_and_param_grads(trainer.params, batch)
        nn.amsgrad_step(trainer.opt, trainer.params, grads)
        if not np.all(np.isfinite(trainer.params.flat())):
            raise nn.DivergenceError("non-finite parameters after update")
    except nn.DivergenceError as err:
        trainer.params = backup
        raise DivergedError(str(err), backup) from err
    trainer.map_steps += 1
    scaled = loss * 1e-4
    d = cfg.ema_decay
    trainer.ema = scaled if trainer.ema is None else d * trainer.ema + (1 - d) * scaled
    trainer.below = trainer.below + 1 if trainer.ema < cfg.tau_cache else 0
    parts = dict(parts, step=global_step, ema=trainer.ema)
    trainer.log.append(parts)
    return parts


def should_cache(trainer):
    return trainer.below >= trainer.cfg.cache_patience or trainer.map_steps >= trainer.cfg.max_steps_per_map


class GlobalSdfMap:
    """Confidence-fused collection of local maps.

    The active map's latest published snapshot takes part in queries as the
    most recent entry."""

    def __init__(self, alpha=100.0):
        self.records = []
        self.active = None
        self.alpha = alpha

    def networks(self):
        nets = [r.params for r in self.records]
        if self.active is not None:
            nets.append(self.active)
        return nets

    def __len__(self):
        return len(self.networks())

    def _eval(self, p):
        nets = self.networks()
        if not nets:
            raise ValueError("global map has no local maps")
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        out = [nn.forward(net, p) for net in nets]
        s = np.stack([o[0] for o in out]).astype(np.float64)
        c = np.stack([o[1] for o in out]).astype(np.float64)
        return s, c

    @staticmethod
    def _select(c):
        # ties go to the most recent map
        n = c.shape[0]
        return n - 1 - np.argmax(c[::-1], axis=0)

    def query(self, p):
        s, c = self._eval(p)
        k = self._select(c)
        return s[k, np.arange(s.shape[1])]

    def query_full(self, p):
        """Selected value, its confidence and the selected map index."""
        s, c = self._eval(p)
        k = self._select(c)
        cols = np.arange(s.shape[1])
        return s[k, cols], c[k, cols], k

    def selected_grad(self, p, k):
        """Input gradient of the map each point selected (index ``k`` per point)."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        out = np.zeros_like(p)
        for j, net in enumerate(self.networks()):
            sel = k == j
            if sel.any():
                out[sel] = nn.forward_with_input_grad(net, p[sel])[1]
        return out

    def confidence(self, p):
        _, c = self._eval(p)
        return c.max(axis=0)

    def query_with_confidence(self, p):
        s, c = self._eval(p)
        k = self._select(c)
        cols = np.arange(s.shape[1])
        return s[k, cols], c[k, cols]

    def query_smooth(self, p, alpha=None):
        alpha = self.alpha if alpha is None else alpha
        s, c = self._eval(p)
        return softmax_fuse(s, c, alpha)

    def query_smooth_with_grad(self, p, alpha=None):
        """Softmax-fused value and its gradient in p."""
        alpha = self.alpha if alpha is None else alpha
        nets = self.networks()
        if not nets:
            raise ValueError("global map has no local maps")
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        outs = [nn.forward_all_with_input_grad(net, p) for net in nets]
        s = np.stack([o[0] for o in outs]).astype(np.float64)
        ds = np.stack([o[1] for o in outs]).astype(np.float64)
        c = np.stack([o[2] for o in outs]).astype(np.float64)
        dc = np.stack([o[3] for o in outs]).astype(np.float64)
        return softmax_fuse_grad(s, ds, c, dc, alpha)

    def snapshot(self):
        out = GlobalSdfMap(self.alpha)
        out.records = list(self.records)
        out.active = self.active
        return out


def softmax_fuse(s, c, alpha):
    z = alpha * (c - c.max(axis=0))
    w = np.exp(z)
    return (w * s).sum(axis=0) / w.sum(axis=0)


def softmax_fuse_grad(s, ds, c, dc, alpha):
    z = alpha * (c - c.max(axis=0))
    w = np.exp(z)
    w = w / w.sum(axis=0)
    val = (w * s).sum(axis=0)
    # d/dp sum_i w_i s_i = sum_i w_i (ds_i + alpha (s_i - val) dc_i)
    grad = (w[..., None] * (ds + alpha * (s - val)[..., None] * dc)).sum(axis=0)
    return val, grad


def cache_and_reset(gmap, trainer, step=0):
    region = (None, None) if trainer.region_lo is None else (trainer.region_lo.copy(), trainer.region_hi.copy())
    final = trainer.log[-1]["total"] if trainer.log else float("nan")
    rec = LocalMapRecord(trainer.params.copy(), region, step, final)
    gmap.records.append(rec)
    trainer.reset()
    trainer.waiting = True
    trainer.prev_record = rec
    return rec


def waiting_over(prev, scan, tau_wait=0.2, floor_height=None):
    hits, _ = obstacle_hits(scan, floor_height)
    if len(hits) == 0:
        return False
    s, _ = nn.forward(prev.params, hits)
    return float(np.abs(s).max()) > tau_wait


def select_goal(gmap, pose, explored_bbox, robot_radius, cfg, world_bounds=None, exclude=None, exclude_radius=1.0):
    """Least-confident cell with enough predicted clearance.

    Cells within ``exclude_radius`` of any point in ``exclude`` (goals the
    caller gave up on) are skipped."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in explored_bbox)
    lo, hi = lo - cfg.goal_inflate, hi + cfg.goal_inflate
    if world_bounds is not None:
        lo = np.maximum(lo, world_bounds[0])
        hi = np.minimum(hi, world_bounds[1])
    pos = np.asarray(pose.position, dtype=np.float64)
    dim = len(lo)
    axes = [np.arange(l + cfg.goal_cell / 2, h, cfg.goal_cell) for l, h in zip(lo[:2], hi[:2])]
    mesh = np.meshgrid(*axes, indexing="ij")
    cells = np.stack([m.ravel() for m in mesh], axis=1)
    if dim == 3:
        cells = np.hstack([cells, np.full((len(cells), 1), pos[2])])
    if len(cells) == 0:
        raise LookupError("no goal candidates")
    s, c = gmap.query_with_confidence(cells)
    keep = s > robot_radius + cfg.goal_clearance
    if exclude is not None and len(exclude):
        ex = np.asarray(exclude, dtype=np.float64)[:, :cells.shape[1]]
        gap = np.linalg.norm(cells[:, None, :2] - ex[None, :, :2], axis=-1).min(axis=1)
        keep &= gap > exclude_radius
    ok = np.flatnonzero(keep)
    if ok.size == 0:
        raise LookupError("no reachable low-confidence cell")
    dist = np.linalg.norm(cells[ok] - pos, axis=1)
    # lexsort keys: last is primary
    order = np.lexsort((ok, -dist, c[ok]))
    return cells[ok[order[0]]]


class Mapper:
    """Scan ingestion plus the cache / warm-start / waiting lifecycle.

    ``mode`` selects the map lifecycle: ``ours`` (cached local maps),
    ``fine_tune`` (one network, dataset replaced by each scan) or ``batched``
    (one network trained on everything seen so far)."""

    def __init__(self, dim, bounds, cfg=None, seed=0, mode="ours"):
        self.cfg = MapperConfig() if cfg is None else cfg
        self.dim = dim
        self.bounds = (np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64))
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        params = nn.init_params(seed, dim, self.cfg.n_freq, self.cfg.hidden, self.cfg.sigma_b, self.bounds)
        self.trainer = Trainer(params, self.cfg, self.bounds)
        cap_s = None if mode == "batched" else self.cfg.n_surface
        cap_a = None if mode == "batched" else self.cfg.n_aug
        self.dataset = TrainingSet(dim, cap_s, cap_a, self.cfg.eps_weight)
        self.gmap = GlobalSdfMap(self.cfg.alpha)
        self.global_step = 0
        self.scans_seen = 0
        self.scans_accepted = 0
        self.events = []

    def ingest(self, scan):
        cfg = self.cfg
        self.scans_seen += 1
        tr = self.trainer
        if tr.waiting and waiting_over(tr.prev_record, scan, cfg.tau_wait, cfg.floor_height):
            tr.waiting = False
            self.events.append(("resume", self.global_step))
        hits, _ = obstacle_hits(scan, cfg.floor_height)
        if len(hits) == 0:
            return False
        if self.mode != "fine_tune":
            stored = self.dataset.surface_points()
            if len(stored) and directed_hausdorff(hits, stored) <= cfg.tau_ingest:
                return False
            index = NnIndex(np.concatenate([stored, hits]))
        else:
            index = NnIndex(hits)
        new = augment_scan(scan, index, cfg, self.rng)
        if self.mode == "fine_tune":
            replace_dataset(self.dataset, new)
        else:
            merge_datasets(self.dataset, new, self.rng)
        tr.note_surface(hits)
        self.scans_accepted += 1
        return True

    def train(self, n_steps):
        out = []
        if len(self.dataset) == 0:
            return out
        for _ in range(n_steps):
            if self.trainer.waiting:
                break
            out.append(train_step(self.trainer, self.dataset, self.rng, self.global_step))
            self.global_step += 1
            if self.mode == "ours" and should_cache(self.trainer):
                rec = cache_and_reset(self.gmap, self.trainer, self.global_step)
                self.events.append(("cache", self.global_step))
                # warm start: the new active map begins from the cached weights
                self.trainer.params = rec.params.copy()
        self.publish()
        return out

    def publish(self):
        self.gmap.active = self.trainer.params.copy()

    @property
    def n_cached(self):
        return len(self.gmap.records)


def save_bundle(gmap, outdir, extra=None):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(gmap.records):
        name = f"map_{i:03d}.ckpt"
        nn.save_checkpoint(rec.params, outdir / name)
        region = None
        if rec.region[0] is not None:
            region = [np.asarray(rec.region[0]).tolist(), np.asarray(rec.region[1]).tolist()]
        entries.append({"file": name, "region": region, "created_step": rec.created_step,
                        "final_loss": rec.final_loss})
    manifest = {"alpha": gmap.alpha, "maps": entries, "active": None}
    if gmap.active is not None:
        nn.save_checkpoint(gmap.active, outdir / "active.ckpt")
        manifest["active"] = "active.ckpt"
    if extra:
        manifest.update(extra)
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=float)
    return outdir


def load_bundle(path):
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    gmap = GlobalSdfMap(manifest["alpha"])
    for e in manifest["maps"]:
        region = (None, None) if e["region"] is None else tuple(np.asarray(r) for r in e["region"])
        gmap.records.append(LocalMapRecord(nn.load_checkpoint(path / e["file"]), region,
                                           e["created_step"], e["final_loss"]))
    if manifest.get("active"):
        gmap.active = nn.load_checkpoint(path / manifest["active"])
    return gmap, manifest


def write_dataset_csv(ts, path):
    data = ts.all
    dim = data.p.shape[1]
    cols = ["x", "y", "z"][:dim]
    with open(path, "w") as fh:
        fh.write(",".join(cols + ["s", "c", "kind"]) + "\n")
        for p, s, c, k in zip(data.p, data.s, data.c, data.kind):
            fh.write(",".join(f"{v:.9g}" for v in p) + f",{s:.9g},{c:.9g},{KIND_NAMES[int(k)]}\n")
