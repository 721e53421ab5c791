import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import Point, Polygon

from tsi_kit.geometry import (GeometryError, MaskGrid, ProbGrid, binarize, centroid, dice_coefficient,
                              dice_loss, expand_contour, expand_offset, extract_components,
                              load_prob_grid, polygon_area, polygon_iou, polygons_from_json,
                              polygons_to_json, rasterize, read_pgm, sample_dense_contour,
                              shrink_contour, shrink_offset, write_pgm)
from tsi_kit.scene import QuadBox


def rect(x0, y0, w, h):
    return np.array([[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]], dtype=float)


def random_convex_quad(rng, scale=100.0):
    # four angles sorted around a centre, radii bounded away from zero
    ang = np.sort(rng.uniform(0, 2 * np.pi, 4))
    while np.max(np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))) >= np.pi * 0.9:
        ang = np.sort(rng.uniform(0, 2 * np.pi, 4))
    r = rng.uniform(0.5, 1.0, 4) * scale
    pts = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1) + rng.uniform(0, 500, 2)
    if not Polygon(pts).convex_hull.equals(Polygon(pts)):
        return random_convex_quad(rng, scale)
    return pts


# -- dense sampling ---------------------------------------------------------

def test_unit_square_four_points_per_side():
    c = sample_dense_contour(rect(0, 0, 1, 1), 16)
    pts = c.points
    assert len(pts) == 16
    on_side = [np.sum(np.isclose(pts[:, 1], 0) & (pts[:, 0] < 1 - 1e-12)),
               np.sum(np.isclose(pts[:, 0], 1) & (pts[:, 1] < 1 - 1e-12))]
    assert on_side == [4, 4]
    assert np.allclose(pts[0], [0, 0])


def test_rectangle_spacing():
    c = sample_dense_contour(rect(0, 0, 4, 2), 24)
    assert np.allclose(c.spacing(), 0.5)


def test_random_quad_spacing_uniform():
    rng = np.random.default_rng(0)
    q = random_convex_quad(rng)
    c = sample_dense_contour(q, 1000)
    # points sit on the polygon; arc length between neighbours is constant,
    # but the chord shortens across a corner, so compare arc lengths
    poly = Polygon(q)
    s = np.array([poly.exterior.project(Point(p)) for p in c.points])
    gaps = np.diff(np.concatenate([s, [s[0] + poly.length]]))
    assert np.max(np.abs(gaps / gaps.mean() - 1)) < 1e-6


def test_degenerate_polygon():
    with pytest.raises(GeometryError, match="degenerate polygon"):
        sample_dense_contour(rect(0, 0, 0, 5), 16)


def test_too_few_points():
    with pytest.raises(GeometryError):
        sample_dense_contour(rect(0, 0, 4, 4), 8)


# -- centroid and offsets ---------------------------------------------------------

def test_centroid_square_and_translation():
    sq = rect(0, 0, 4, 4)
    assert centroid(sample_dense_contour(sq, 16)) == pytest.approx((2, 2))
    assert centroid(sample_dense_contour(sq + [10, 5], 16)) == pytest.approx((12, 7))


def test_centroid_matches_monte_carlo():
    rng = np.random.default_rng(1)
    q = random_convex_quad(rng, scale=1.0) - 0.0
    poly = Polygon(q)
    minx, miny, maxx, maxy = poly.bounds
    n = 10 ** 6
    xs = rng.uniform(minx, maxx, n)
    ys = rng.uniform(miny, maxy, n)
    from shapely import contains_xy
    inside = contains_xy(poly, xs, ys)
    mc = (xs[inside].mean(), ys[inside].mean())
    got = centroid(sample_dense_contour(q, 64))
    assert got == pytest.approx(mc, abs=1e-2)


def test_shrink_offset_square_and_rectangle():
    assert shrink_offset(sample_dense_contour(rect(-2, -2, 4, 4), 64)) == pytest.approx(1.0, abs=1e-12)
    assert shrink_offset(sample_dense_contour(rect(0, 0, 4, 2), 64)) == pytest.approx(0.5, abs=1e-12)


def test_shrink_offset_discrete_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(20):
        q = random_convex_quad(rng)
        c = sample_dense_contour(q, 1000)
        cx, cy = Polygon(q).centroid.coords[0]
        brute = min(math.hypot(x - cx, y - cy) for x, y in c.points) / 2
        assert shrink_offset(c, refine=False) == pytest.approx(brute, rel=1e-9)


def test_refined_offset_matches_exact_edge_distance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        q = random_convex_quad(rng)
        poly = Polygon(q)
        exact = poly.exterior.distance(poly.centroid)
        assert shrink_offset(sample_dense_contour(q, 200)) == pytest.approx(exact / 2, rel=1e-9)


def test_discrete_minimum_converges_within_documented_bound():
    rng = np.random.default_rng(4)
    q = random_convex_quad(rng)
    per = Polygon(q).length
    for n in (64, 256, 1024):
        c = sample_dense_contour(q, n)
        gap = shrink_offset(c, refine=False) - shrink_offset(c)
        assert 0 <= gap
        # sampled points lie on the polyline, so the gap is bounded by half a spacing squared over the distance
        assert gap <= (per / n) ** 2 / shrink_offset(c) + 1e-12


def test_centroid_exterior():
    # a thin chevron whose area centroid falls outside
    chevron = np.array([[0, 0], [10, 10], [20, 0], [10, 9.0]])
    with pytest.raises(GeometryError, match="centroid exterior"):
        shrink_offset(sample_dense_contour(chevron, 64))


def test_shrink_contour_examples():
    out = shrink_contour(rect(0, 0, 4, 4), 1.0)
    assert np.allclose(out, rect(1, 1, 2, 2))
    out = shrink_contour(rect(0, 0, 4, 2), 0.5)
    assert np.allclose(out, rect(0.5, 0.5, 3, 1))


def test_shrink_contour_random_convex_distance_oracle():
    rng = np.random.default_rng(5)
    for _ in range(30):
        q = random_convex_quad(rng)
        d = shrink_offset(sample_dense_contour(q, 400))
        out = shrink_contour(q, d)
        assert polygon_area(out) < polygon_area(q)
        edges = Polygon(q).exterior
        for v in out:
            assert edges.distance(Point(v)) >= d - 1e-6


def test_over_shrunk():
    with pytest.raises(GeometryError, match="over-shrunk"):
        shrink_contour(rect(0, 0, 4, 2), 1.5)


def test_expand_examples():
    assert expand_offset(sample_dense_contour(rect(-1, -1, 2, 2), 64)) == pytest.approx(1.0)
    assert expand_offset(sample_dense_contour(rect(0, 0, 3, 1), 64)) == pytest.approx(0.5)
    assert np.allclose(expand_contour(rect(1, 1, 2, 2), 1.0), rect(0, 0, 4, 4))
    assert np.allclose(expand_contour(rect(0.5, 0.5, 3, 1), 0.5), rect(0, 0, 4, 2))


dims = st.floats(1.0, 500.0)


@settings(max_examples=200, deadline=None)
@given(dims, dims, st.floats(-1000, 1000), st.floats(-1000, 1000))
def test_rectangle_duality_and_round_trip(w, h, x0, y0):
    B = rect(x0, y0, w, h)
    ds = shrink_offset(sample_dense_contour(B))
    assert ds == pytest.approx(min(w, h) / 4, rel=1e-9)
    S = shrink_contour(B, ds)
    de = expand_offset(sample_dense_contour(S))
    assert de == pytest.approx(ds, rel=1e-9)
    back = expand_contour(S, de)
    assert np.max(np.abs(back - B)) <= 1e-6
    assert polygon_iou(back, B) == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.1, 20), st.floats(-300, 300), st.floats(-300, 300))
def test_offsets_scale_and_translate(k, tx, ty):
    q = np.array([[0, 0], [40, 3], [37, 25], [2, 20]], dtype=float)
    base = shrink_offset(sample_dense_contour(q, 256))
    scaled = shrink_offset(sample_dense_contour(q * k, 256))
    moved = shrink_offset(sample_dense_contour(q + [tx, ty], 256))
    assert scaled == pytest.approx(k * base, rel=1e-9)
    assert moved == pytest.approx(base, rel=1e-9)
    s0 = shrink_contour(q, base)
    assert np.allclose(shrink_contour(q + [tx, ty], base), s0 + [tx, ty], atol=1e-8)


def test_quadbox_input_accepted():
    qb = QuadBox.from_xyxy(0, 0, 8, 4)
    assert shrink_offset(sample_dense_contour(qb)) == pytest.approx(1.0)


# -- raster ----------------------------------------------------------------

def test_rasterize_hand_enumerated_square():
    m = rasterize(rect(2, 2, 4, 4), 10, 10)
    assert m.count() == 16
    assert m.cells[2:6, 2:6].all()


def test_rasterize_empty_and_full():
    assert rasterize(np.zeros((0, 2)), 5, 5).count() == 0
    assert rasterize(rect(0, 0, 7, 5), 5, 7).count() == 35


def test_rasterize_matches_shapely_centres():
    rng = np.random.default_rng(6)
    for _ in range(10):
        q = random_convex_quad(rng, scale=25)
        q = q - q.min(axis=0) + rng.uniform(0, 10, 2)
        poly = Polygon(q)
        if not poly.is_valid or poly.area < 1:
            continue
        m = rasterize(q, 64, 64)
        ys, xs = np.mgrid[0:64, 0:64] + 0.5
        from shapely import intersects_xy
        expected = intersects_xy(poly, xs.ravel(), ys.ravel()).reshape(64, 64)
        assert np.array_equal(m.cells, expected)


def test_binarize_examples():
    assert binarize(ProbGrid(np.full((3, 3), 0.9))).count() == 9
    assert binarize(ProbGrid(np.full((3, 3), 0.5)), 0.5).count() == 9
    rng = np.random.default_rng(7)
    g = rng.uniform(0, 1, (20, 30))
    assert np.array_equal(binarize(ProbGrid(g), 0.3).cells, g >= 0.3)
    with pytest.raises(GeometryError):
        ProbGrid(np.full((2, 2), 1.5))
    with pytest.raises(GeometryError):
        binarize(ProbGrid(g), 1.0)


def test_dice_values():
    a = rasterize(rect(0, 0, 10, 10), 20, 20)
    b = rasterize(rect(10, 10, 10, 10), 20, 20)
    half = rasterize(rect(5, 0, 10, 10), 20, 20)
    assert dice_coefficient(a, a) == 1.0
    assert dice_coefficient(a, b) == 0.0
    assert dice_coefficient(a, half) == 0.5
    assert dice_loss(a, half) == 0.5
    empty = MaskGrid(np.zeros((4, 4), bool))
    assert dice_coefficient(empty, empty) == 1.0
    with pytest.raises(GeometryError):
        dice_coefficient(a, MaskGrid(np.zeros((3, 3), bool)))
    with pytest.raises(GeometryError):
        MaskGrid(np.zeros((0, 3), bool))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=36, max_size=36), st.lists(st.booleans(), min_size=36, max_size=36))
def test_dice_symmetric_and_identity(xa, xb):
    a = MaskGrid(np.array(xa).reshape(6, 6))
    b = MaskGrid(np.array(xb).reshape(6, 6))
    assert dice_coefficient(a, b) == dice_coefficient(b, a)
    if a.count() and b.count():
        assert (dice_coefficient(a, b) == 1.0) == (a == b)


def test_dice_monotone_in_symmetric_difference():
    a = rasterize(rect(0, 0, 10, 10), 10, 40)
    prev = 1.0
    for shift in range(11):
        d = dice_coefficient(a, rasterize(rect(shift, 0, 10, 10), 10, 40))
        assert d <= prev
        prev = d


# -- components -------------------------------------------------------------

def test_extract_square_round_trip():
    m = rasterize(rect(3, 4, 10, 6), 20, 20)
    polys = extract_components(m)
    assert len(polys) == 1
    assert polygon_iou(polys[0], rect(3, 4, 10, 6)) >= 0.95


def test_extract_empty_and_two_squares():
    assert extract_components(MaskGrid(np.zeros((8, 8), bool))) == []
    m = MaskGrid(rasterize(rect(0, 0, 3, 3), 12, 12).cells | rasterize(rect(6, 6, 4, 4), 12, 12).cells)
    assert len(extract_components(m)) == 2


def test_extract_drops_small_and_joins_diagonals():
    cells = np.zeros((8, 8), bool)
    cells[0, 0] = cells[1, 1] = cells[2, 2] = cells[3, 3] = True
    cells[6, 6] = True
    polys = extract_components(MaskGrid(cells))
    assert len(polys) == 1
    assert rasterize(polys[0], 8, 8).count() >= 4


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30), st.integers(2, 12), st.integers(2, 12)),
                min_size=1, max_size=4))
def test_raster_extract_raster_idempotent(rects):
    cells = np.zeros((40, 40), bool)
    for x, y, w, h in rects:
        cells |= rasterize(rect(x, y, w, h), 40, 40).cells
    from scipy import ndimage
    filled = ndimage.binary_fill_holes(cells)
    m = MaskGrid(filled)
    again = np.zeros_like(filled)
    for poly in extract_components(m, min_area=1):
        again |= rasterize(poly, 40, 40).cells
    assert np.array_equal(again, filled)


# -- files ------------------------------------------------------------------

def test_pgm_round_trip(tmp_path):
    m = rasterize(rect(1, 1, 5, 3), 6, 9)
    path = tmp_path / "m.pgm"
    write_pgm(m, path)
    assert path.read_bytes().startswith(b"P5\n9 6\n1\n")
    assert np.array_equal(read_pgm(path) >= 0.5, m.cells)
    assert binarize(load_prob_grid(path)) == m


def test_polygon_json_round_trip():
    polys = [rect(0, 0, 2, 3), rect(5, 5, 1, 1)]
    back = polygons_from_json(polygons_to_json(polys))
    assert all(np.array_equal(a, b) for a, b in zip(polys, back))
