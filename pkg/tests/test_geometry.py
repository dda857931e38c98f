import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdfnav.geometry import (Box, Capsule, Circle, NnIndex, contour_polylines, directed_hausdorff,
                             extract_level_set, nearest_distance, polygon_area, primitive_from_dict,
                             sdf_intersection, sdf_primitive, sdf_union, write_obj, write_segments_csv)


def boundary_samples(prim, n=200_000, seed=0):
    """Dense points on the primitive boundary, by rejection onto the zero set."""
    rng = np.random.default_rng(seed)
    if isinstance(prim, Circle):
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        return np.asarray(prim.center) + prim.radius * np.stack([np.cos(t), np.sin(t)], 1)
    if isinstance(prim, Box):
        lo, hi = np.asarray(prim.lo), np.asarray(prim.hi)
        out = []
        for axis in range(2):
            for side in (lo, hi):
                pts = rng.uniform(lo, hi, size=(n // 4, 2))
                pts[:, axis] = side[axis]
                out.append(pts)
        return np.concatenate(out)
    raise TypeError


def test_circle_examples():
    c = Circle((0, 0), 1.0)
    assert sdf_primitive(np.array([2.0, 0.0]), c) == pytest.approx(1.0)
    assert sdf_primitive(np.array([0.0, 0.0]), c) == pytest.approx(-1.0)


def test_box_face_distance():
    assert sdf_primitive(np.array([3.0, 0.0]), Box((-1, -1), (1, 1))) == pytest.approx(2.0)


def test_sign_convention_and_boundary_oracle():
    rng = np.random.default_rng(1)
    for prim in (Circle((0.5, -0.2), 0.7), Box((-1, -0.5), (0.8, 1.2))):
        bnd = boundary_samples(prim)
        p = rng.uniform(-3, 3, size=(300, 2))
        d = prim.sdf(p)
        oracle = NnIndex(bnd).query(p)[0]
        np.testing.assert_allclose(np.abs(d), oracle, atol=2e-3)


def test_capsule_matches_segment_distance():
    cap = Capsule((0, 0), (2, 0), 0.5)
    p = np.array([[1.0, 1.0], [-1.0, 0.0], [3.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(cap.sdf(p), [0.5, 0.5, 0.5, -0.5])


@pytest.mark.parametrize("prim", [Circle((0.3, 0.1), 0.8), Box((-1, -0.4), (0.5, 0.9)), Capsule((0, 0), (1, 1), 0.3)])
def test_gradient_matches_finite_differences(prim):
    rng = np.random.default_rng(2)
    p = rng.uniform(-2, 2, size=(50, 2))
    h = 1e-6
    fd = np.stack([(prim.sdf(p + h * e) - prim.sdf(p - h * e)) / (2 * h) for e in np.eye(2)], 1)
    # stay away from the medial axis where the gradient jumps
    ok = np.abs(np.linalg.norm(fd, axis=1) - 1) < 1e-4
    np.testing.assert_allclose(prim.grad(p)[ok], fd[ok], atol=1e-5)


def test_union_and_intersection():
    assert sdf_union([1.0, -0.5, 2.0]) == -0.5
    assert sdf_union([0.3]) == 0.3
    assert sdf_intersection([1.0, -0.5]) == 1.0
    with pytest.raises(ValueError):
        sdf_union([])
    with pytest.raises(ValueError):
        sdf_intersection([])


def test_union_of_overlapping_circles_matches_oracle():
    a, b = Circle((0, 0), 1.0), Circle((1, 0), 1.0)
    p = np.array([[0.5, 0.0]])
    v = sdf_union([a.sdf(p), b.sdf(p)])
    assert v[0] == pytest.approx(-0.5)
    # exact union boundary: each circle's boundary points outside the other one
    bnd = np.concatenate([x[y.sdf(x) >= 0] for x, y in ((boundary_samples(a), b), (boundary_samples(b), a))])
    exact = NnIndex(bnd).query(p)[0][0]
    # the min rule is exact outside; inside an overlap it under-reports depth
    assert exact == pytest.approx(np.sqrt(0.75), abs=1e-3)
    assert abs(v[0]) <= exact
    q = np.random.default_rng(6).uniform(-2, 3, size=(400, 2))
    u = sdf_union([a.sdf(q), b.sdf(q)])
    oracle = NnIndex(bnd).query(q)[0]
    out = u > 0
    np.testing.assert_allclose(u[out], oracle[out], atol=2e-3)
    assert np.all(-u[~out] <= oracle[~out] + 1e-9)


def test_disjoint_circles_between_is_positive():
    v = sdf_union([Circle((-2, 0), 1).sdf([0, 0]), Circle((2, 0), 1).sdf([0, 0])])
    assert v[0] == pytest.approx(1.0)


def test_primitive_from_dict_roundtrip():
    for prim in (Circle((1, 2), 0.5), Box((0, 0), (1, 2)), Capsule((0, 0), (1, 0), 0.2)):
        again = primitive_from_dict(prim.to_dict())
        p = np.random.default_rng(0).normal(size=(20, 2))
        np.testing.assert_array_equal(prim.sdf(p), again.sdf(p))
    with pytest.raises(ValueError):
        primitive_from_dict({"type": "torus"})
    with pytest.raises(ValueError):
        Circle((0, 0), 0.0)


def test_nn_index_matches_brute_force():
    rng = np.random.default_rng(3)
    pts = rng.uniform(size=(1000, 2))
    q = rng.uniform(size=(100, 2))
    d, i = NnIndex(pts).query(q)
    brute = np.linalg.norm(q[:, None] - pts[None], axis=2)
    np.testing.assert_allclose(d, brute.min(axis=1), atol=1e-12)
    np.testing.assert_array_equal(i, brute.argmin(axis=1))


def test_nn_index_small_cases():
    one = NnIndex(np.array([[0.0, 0.0]]))
    d, p = nearest_distance(one, np.array([3.0, 4.0]))
    assert d == 5.0 and np.array_equal(p, [0, 0])
    dup = NnIndex(np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]]))
    d, i = dup.query(np.array([[1.0, 1.0]]))
    assert d[0] == 0.0 and i[0] == 0
    with pytest.raises(ValueError):
        NnIndex(np.zeros((0, 2)))


def test_nn_tie_break_lowest_index():
    pts = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [0.0, 2.0]])
    _, i = NnIndex(pts[::-1].copy()).query(np.zeros((1, 2)))
    assert i[0] == 1  # the first of the four equidistant points in reversed order


def test_directed_hausdorff():
    assert directed_hausdorff([[0, 0]], [[1, 0]]) == 1.0
    b = np.random.default_rng(4).normal(size=(30, 2))
    assert directed_hausdorff(b[:10], b) == 0.0
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(50, 2)), rng.normal(size=(50, 2))
    oracle = max(min(np.linalg.norm(x - y) for y in b) for x in a)
    assert directed_hausdorff(a, b) == pytest.approx(oracle, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=20),
       st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=20))
def test_directed_hausdorff_properties(a, b):
    a, b = np.array(a), np.array(b)
    assert directed_hausdorff(a, b) >= 0
    assert directed_hausdorff(a, np.concatenate([a, b])) == 0.0


def test_level_set_circle_vertices_on_circle():
    res = 256
    segs = extract_level_set(lambda p: np.linalg.norm(p, axis=1) - 1.0, ((-2, -2), (2, 2)), res)
    cell = 4 / res
    v = segs.reshape(-1, 2)
    assert len(v) > 100
    assert np.all(np.abs(np.linalg.norm(v, axis=1) - 1) <= 2 * cell * np.sqrt(2))


def test_level_set_constant_field_is_empty():
    assert extract_level_set(lambda p: np.ones(len(p)), ((0, 0), (1, 1)), 16).shape == (0, 2, 2)
    verts, faces = extract_level_set(lambda p: np.ones(len(p)), ((0, 0, 0), (1, 1, 1)), 8)
    assert len(verts) == 0 and len(faces) == 0


def test_box_contour_area():
    box = Box((-1, -1), (1, 1))
    polys = contour_polylines(box.sdf, ((-2, -2), (2, 2)), 200)
    assert len(polys) == 1
    assert polygon_area(polys[0]) == pytest.approx(4.0, rel=0.01)


def test_level_set_3d_sphere(tmp_path):
    verts, faces = extract_level_set(lambda p: np.linalg.norm(p, axis=1) - 1.0, ((-1.5,) * 3, (1.5,) * 3), 32)
    assert np.all(np.abs(np.linalg.norm(verts, axis=1) - 1) < 3 / 32 * np.sqrt(3))
    write_obj(verts, faces, tmp_path / "s.obj")
    assert (tmp_path / "s.obj").read_text().startswith("v ")


def test_segments_csv(tmp_path):
    segs = np.array([[[0.0, 0.0], [1.0, 0.5]]])
    write_segments_csv(segs, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text() == "x0,y0,x1,y1\n0,0,1,0.5\n"


def test_grid_rejects_bad_input():
    with pytest.raises(ValueError):
        extract_level_set(lambda p: p[:, 0], ((0, 0), (0, 1)), 10)
    with pytest.raises(ValueError):
        extract_level_set(lambda p: p[:, 0], ((0, 0), (1, 1)), 1)
