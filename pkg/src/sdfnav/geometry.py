"""Analytic SDF primitives, set algebra, nearest-neighbour queries and
iso-contour extraction. Works in 2D and 3D; everything is float64."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure


def _as_points(p):
    p = np.asarray(p, dtype=np.float64)
    return p[None, :] if p.ndim == 1 else p


@dataclass(frozen=True)
class Circle:
    """Circle in 2D, sphere in 3D."""

    center: tuple
    radius: float
    kind = "circle"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def dim(self):
        return len(self.center)

    def sdf(self, p):
        p = _as_points(p)
        return np.linalg.norm(p - np.asarray(self.center), axis=1) - self.radius

    def grad(self, p):
        p = _as_points(p)
        d = p - np.asarray(self.center)
        n = np.linalg.norm(d, axis=1, keepdims=True)
        g = np.zeros_like(d)
        g[:, 0] = 1.0
        ok = n[:, 0] > 0
        g[ok] = d[ok] / n[ok]
        return g

    def bbox(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius

    def to_dict(self):
        return {"type": "circle", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its min and max corners."""

    lo: tuple
    hi: tuple
    kind = "box"

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or not all(a < b for a, b in zip(lo, hi)):
            raise ValueError("box min corner must be below max corner")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return len(self.lo)

    def _q(self, p):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        c, h = 0.5 * (lo + hi), 0.5 * (hi - lo)
        rel = p - c
        return rel, np.abs(rel) - h

    def sdf(self, p):
        p = _as_points(p)
        _, q = self._q(p)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def grad(self, p):
        p = _as_points(p)
        rel, q = self._q(p)
        sgn = np.where(rel >= 0, 1.0, -1.0)
        qpos = np.maximum(q, 0.0)
        n = np.linalg.norm(qpos, axis=1)
        g = np.zeros_like(p)
        out = n > 0
        g[out] = qpos[out] / n[out, None] * sgn[out]
        ins = ~out
        k = np.argmax(q[ins], axis=1)
        g[np.flatnonzero(ins), k] = sgn[ins][np.arange(k.size), k]
        return g

    def bbox(self):
        return np.asarray(self.lo), np.asarray(self.hi)

    def to_dict(self):
        return {"type": "box", "min": list(self.lo), "max": list(self.hi)}


@dataclass(frozen=True)
class Capsule:
    """Segment a-b swept by a ball of the given radius."""

    a: tuple
    b: tuple
    radius: float
    kind = "capsule"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))

    @property
    def dim(self):
        return len(self.a)

    def _offset(self, p):
        a, b = np.asarray(self.a), np.asarray(self.b)
        pa, ba = p - a, b - a
        denom = ba @ ba
        h = np.zeros(len(p)) if denom == 0 else np.clip(pa @ ba / denom, 0.0, 1.0)
        return pa - h[:, None] * ba

    def sdf(self, p):
        p = _as_points(p)
        return np.linalg.norm(self._offset(p), axis=1) - self.radius

    def grad(self, p):
        p = _as_points(p)
        d = self._offset(p)
        n = np.linalg.norm(d, axis=1, keepdims=True)
        g = np.zeros_like(d)
        g[:, 0] = 1.0
        ok = n[:, 0] > 0
        g[ok] = d[ok] / n[ok]
        return g

    def bbox(self):
        a, b = np.asarray(self.a), np.asarray(self.b)
        return np.minimum(a, b) - self.radius, np.maximum(a, b) + self.radius

    def to_dict(self):
        return {"type": "capsule", "a": list(self.a), "b": list(self.b), "radius": self.radius}


def primitive_from_dict(d):
    kind = d["type"]
    if kind in ("circle", "sphere"):
        return Circle(d["center"], d["radius"])
    if kind == "box":
        return Box(d["min"], d["max"])
    if kind == "capsule":
        return Capsule(d["a"], d["b"], d["radius"])
    raise ValueError(f"unknown primitive type {kind!r}")


def sdf_primitive(p, prim):
    """Exact signed distance from ``p`` (one point or an (N, D) array) to ``prim``."""
    out = prim.sdf(p)
    return float(out[0]) if np.ndim(p) == 1 else out


def sdf_union(values):
    """Pointwise minimum over the leading axis."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] == 0:
        raise ValueError("sdf_union needs at least one value")
    return values.min(axis=0)


def sdf_intersection(values):
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] == 0:
        raise ValueError("sdf_intersection needs at least one value")
    return values.max(axis=0)


class NnIndex:
    """K-D tree over a fixed point set.

    Ties between equidistant stored points resolve to the lowest insertion
    index so that labels built from the index are reproducible.
    """

    def __init__(self, points, leaf_capacity=50):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("NnIndex needs a non-empty (N, D) point array")
        self.points = pts
        self.leaf_capacity = leaf_capacity
        self._tree = cKDTree(pts, leafsize=leaf_capacity)

    def __len__(self):
        return len(self.points)

    def query(self, q):
        """Return (distances, indices) of nearest stored points for each row of ``q``."""
        q = _as_points(q)
        k = min(4, len(self.points))
        d, i = self._tree.query(q, k=k)
        if k == 1:
            return d, i
        tie = d == d[:, :1]
        idx = np.where(tie, i, np.iinfo(i.dtype).max).min(axis=1)
        dist = d[:, 0]
        # every returned neighbour tied, so the lowest index may lie further out
        for r in np.flatnonzero(tie.all(axis=1)):
            cand = self._tree.query_ball_point(q[r], dist[r] * (1 + 1e-12) + 1e-300)
            idx[r] = min(cand)
        return dist, idx


def build_nn_index(points, leaf_capacity=50):
    return NnIndex(points, leaf_capacity)


def nearest_distance(index, p):
    """Distance from ``p`` to its nearest stored point, and that point."""
    d, i = index.query(p)
    if np.ndim(p) == 1:
        return float(d[0]), index.points[i[0]]
    return d, index.points[i]


def directed_hausdorff(a, b):
    """max over a in A of min over b in B of |a - b|."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("directed_hausdorff needs two non-empty sets")
    d, _ = NnIndex(b).query(a)
    return float(d.max())


def grid_axes(bbox, resolution):
    lo, hi = (np.asarray(v, dtype=np.float64) for v in bbox)
    if lo.shape != hi.shape or not np.all(hi > lo):
        raise ValueError("degenerate bounding box")
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    return [np.linspace(l, h, resolution + 1) for l, h in zip(lo, hi)]


def extract_level_set(field, bbox, resolution, iso=0.0):
    """Contour ``{field == iso}`` on a regular grid.

    ``field`` maps an (N, D) array to N values. Returns an (S, 2, 2) array of
    segments in 2D, or ``(vertices, faces)`` in 3D.
    """
    axes = grid_axes(bbox, resolution)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vol = np.asarray(field(pts), dtype=np.float64).reshape(mesh[0].shape)
    spacing = [ax[1] - ax[0] for ax in axes]
    origin = np.array([ax[0] for ax in axes])
    if len(axes) == 2:
        segs = []
        for c in measure.find_contours(vol, iso):
            w = origin + c * spacing
            segs.append(np.stack([w[:-1], w[1:]], axis=1))
        return np.concatenate(segs) if segs else np.zeros((0, 2, 2))
    if vol.min() > iso or vol.max() < iso:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=int)
    verts, faces, _, _ = measure.marching_cubes(vol, iso, spacing=tuple(spacing))
    return verts + origin, faces


def contour_polylines(field, bbox, resolution, iso=0.0):
    """Like :func:`extract_level_set` in 2D, but keeps each contour as a polyline."""
    axes = grid_axes(bbox, resolution)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vol = np.asarray(field(pts), dtype=np.float64).reshape(mesh[0].shape)
    spacing = np.array([ax[1] - ax[0] for ax in axes])
    origin = np.array([ax[0] for ax in axes])
    return [origin + c * spacing for c in measure.find_contours(vol, iso)]


def polygon_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def write_segments_csv(segments, path):
    with open(path, "w") as fh:
        fh.write("x0,y0,x1,y1\n")
        for (x0, y0), (x1, y1) in segments:
            fh.write(f"{x0:.9g},{y0:.9g},{x1:.9g},{y1:.9g}\n")


def write_obj(verts, faces, path):
    with open(path, "w") as fh:
        for v in verts:
            fh.write("v {:.9g} {:.9g} {:.9g}\n".format(*v))
        for f in faces:
            fh.write("f {} {} {}\n".format(*(np.asarray(f) + 1)))
