"""Shrink-mask box geometry: dense contours, shrink/expand offsets, masks.

Polygons are ``(k, 2)`` float arrays of ``(x, y)`` pixel coordinates in image
orientation (y grows downward).  Boxes are turned into shrink-mask labels by
offsetting every edge inward by half the minimum centre-to-boundary distance,
and predicted shrink-masks are turned back into boxes by offsetting outward by
the full minimum centre-to-boundary distance of the shrunk contour.  For
rectangles the two distances coincide (both equal a quarter of the short
side), which makes shrink followed by expand an exact round trip.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

DEFAULT_MAX_SPACING = 2.0
DEFAULT_THRESHOLD = 0.5
DEFAULT_MIN_AREA = 4
MIN_CONTOUR_POINTS = 16


class GeometryError(ValueError):
    pass


def as_polygon(obj) -> np.ndarray:
    """Accept a QuadBox, DenseContour, or any (k, 2) array-like."""
    if hasattr(obj, "as_array"):
        return obj.as_array()
    if isinstance(obj, DenseContour):
        return obj.points
    arr = np.asarray(obj, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GeometryError(f"polygon must be (k, 2), got shape {arr.shape}")
    return arr


def signed_area(poly) -> float:
    p = as_polygon(poly)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(poly) -> float:
    return abs(signed_area(poly))


def polygon_centroid(poly) -> tuple[float, float]:
    """Area centroid; falls back to the vertex mean for degenerate input."""
    p = as_polygon(poly)
    if len(p) == 0:
        raise GeometryError("empty polygon has no centroid")
    x, y = p[:, 0], p[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum()
    if abs(a) <= 1e-12 * max(1.0, float(np.abs(p).max()) ** 2):
        return float(x.mean()), float(y.mean())
    # shift to the first vertex for numerical stability far from the origin
    ox, oy = x[0], y[0]
    xs, ys = x - ox, y - oy
    xsn, ysn = np.roll(xs, -1), np.roll(ys, -1)
    cr = xs * ysn - xsn * ys
    a = 0.5 * cr.sum()
    cx = ((xs + xsn) * cr).sum() / (6 * a)
    cy = ((ys + ysn) * cr).sum() / (6 * a)
    return float(cx + ox), float(cy + oy)


def point_in_polygon(pt, poly) -> bool:
    """Even-odd test; points exactly on the boundary count as inside."""
    p = as_polygon(poly)
    px, py = float(pt[0]), float(pt[1])
    if len(p) < 3:
        return False
    if _point_segment_distance(np.array([px, py]), p, np.roll(p, -1, axis=0)).min() <= 1e-12:
        return True
    inside = False
    n = len(p)
    for i in range(n):
        x0, y0 = p[i]
        x1, y1 = p[(i + 1) % n]
        if (y0 > py) != (y1 > py):
            xc = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            if px < xc:
                inside = not inside
    return inside


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def segments_intersect(a, b, c, d) -> bool:
    """True when closed segments ab and cd share at least one point."""
    d1, d2 = _orient(c, d, a), _orient(c, d, b)
    d3, d4 = _orient(a, b, c), _orient(a, b, d)
    if ((d1 > 0) != (d2 > 0)) and d1 != 0 and d2 != 0 and ((d3 > 0) != (d4 > 0)) and d3 != 0 and d4 != 0:
        return True

    def on_seg(p, q, r):
        return (min(p[0], q[0]) <= r[0] <= max(p[0], q[0])
                and min(p[1], q[1]) <= r[1] <= max(p[1], q[1]))

    return ((d1 == 0 and on_seg(c, d, a)) or (d2 == 0 and on_seg(c, d, b))
            or (d3 == 0 and on_seg(a, b, c)) or (d4 == 0 and on_seg(a, b, d)))


def is_simple_polygon(poly) -> bool:
    p = as_polygon(poly)
    n = len(p)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if segments_intersect(p[i], p[(i + 1) % n], p[j], p[(j + 1) % n]):
                return False
    return True


def _point_segment_distance(pt: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.where(denom > 0, np.einsum("ij,ij->i", pt - a, ab) / np.where(denom > 0, denom, 1), 0.0)
    t = np.clip(t, 0.0, 1.0)
    proj = a + ab * t[:, None]
    return np.hypot(*(pt - proj).T)


# -- dense contours ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DenseContour:
    """Closed boundary sampled densely by arc length.

    ``source`` keeps the polygon the samples were drawn from, so the enclosed
    region (and its centroid) is known exactly rather than up to corner cuts.
    """

    points: np.ndarray
    closed: bool = True
    source: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.points)

    @property
    def region(self) -> np.ndarray:
        return self.source if self.source is not None else self.points

    def spacing(self) -> np.ndarray:
        return np.hypot(*(np.roll(self.points, -1, axis=0) - self.points).T)


def perimeter(poly) -> float:
    p = as_polygon(poly)
    return float(np.hypot(*(np.roll(p, -1, axis=0) - p).T).sum())


def default_sample_count(poly, max_spacing: float = DEFAULT_MAX_SPACING) -> int:
    return max(64, int(math.ceil(perimeter(poly) / max_spacing)))


def sample_dense_contour(box, n: int | None = None,
                         max_spacing: float = DEFAULT_MAX_SPACING) -> DenseContour:
    """Sample ``n`` points uniformly by arc length, starting at corner 0."""
    poly = as_polygon(box)
    if len(poly) < 3 or polygon_area(poly) <= 0:
        raise GeometryError("degenerate polygon")
    if n is None:
        n = default_sample_count(poly, max_spacing)
    if n < MIN_CONTOUR_POINTS:
        raise GeometryError(f"need at least {MIN_CONTOUR_POINTS} contour points, got {n}")
    nxt = np.roll(poly, -1, axis=0)
    seg = np.hypot(*(nxt - poly).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    s = np.arange(n) * (total / n)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(poly) - 1)
    t = (s - cum[idx]) / np.where(seg[idx] > 0, seg[idx], 1.0)
    pts = poly[idx] + (nxt[idx] - poly[idx]) * t[:, None]
    return DenseContour(pts, True, poly.copy())


def centroid(contour: DenseContour) -> tuple[float, float]:
    """Area centroid of the region enclosed by the contour."""
    return polygon_centroid(contour.region)


def _min_center_distance(contour: DenseContour, center, refine: bool) -> float:
    c = np.asarray(center, dtype=float)
    pts = contour.points
    if not refine:
        return float(np.hypot(*(pts - c).T).min())
    # distance to the dense polyline: the limit of the sampled minimum
    return float(_point_segment_distance(c, pts, np.roll(pts, -1, axis=0)).min())


def _checked_center(contour: DenseContour) -> tuple[float, float]:
    c = centroid(contour)
    if not point_in_polygon(c, contour.region):
        raise GeometryError("centroid exterior")
    return c


def shrink_offset(contour: DenseContour, refine: bool = True) -> float:
    """Half the minimum distance from the region centroid to the contour.

    With ``refine=False`` the minimum runs over the sampled points only; the
    default measures against the polyline through them, which is what the
    sampled minimum converges to and is exact on straight edges.
    """
    return 0.5 * _min_center_distance(contour, _checked_center(contour), refine)


def expand_offset(contour: DenseContour, refine: bool = True) -> float:
    """Minimum distance from the shrink-mask centroid to its contour (no halving)."""
    return _min_center_distance(contour, _checked_center(contour), refine)


def offset_polygon(poly, distance: float) -> np.ndarray:
    """Translate every edge by ``distance`` along its outward normal.

    Negative distances move edges inward.  Vertices are re-intersected from
    neighbouring offset edges, so angles are preserved (mitre joins).
    """
    p = as_polygon(poly)
    orient = 1.0 if signed_area(p) > 0 else -1.0
    nxt = np.roll(p, -1, axis=0)
    u = nxt - p
    lengths = np.hypot(*u.T)
    if np.any(lengths <= 0):
        raise GeometryError("polygon has repeated vertices")
    u = u / lengths[:, None]
    normal = orient * np.stack([u[:, 1], -u[:, 0]], axis=1)
    base = p + normal * distance
    out = np.empty_like(p)
    k = len(p)
    for j in range(k):
        i = (j - 1) % k
        # intersect line i (base[i] + s*u[i]) with line j (base[j] + t*u[j])
        cr = u[i, 0] * u[j, 1] - u[i, 1] * u[j, 0]
        if abs(cr) < 1e-12:
            out[j] = p[j] + normal[j] * distance
            continue
        d = base[j] - base[i]
        s = (d[0] * u[j, 1] - d[1] * u[j, 0]) / cr
        out[j] = base[i] + s * u[i]
    return out


def _is_convex(p: np.ndarray) -> bool:
    nxt, nxt2 = np.roll(p, -1, axis=0), np.roll(p, -2, axis=0)
    cr = (nxt[:, 0] - p[:, 0]) * (nxt2[:, 1] - nxt[:, 1]) - (nxt[:, 1] - p[:, 1]) * (nxt2[:, 0] - nxt[:, 0])
    return bool(np.all(cr >= 0) or np.all(cr <= 0))


def _inner_parallel(p: np.ndarray, d: float) -> np.ndarray:
    """Points of convex ``p`` at distance >= d from every edge line (half-plane clipping)."""
    orient = 1.0 if signed_area(p) > 0 else -1.0
    nxt = np.roll(p, -1, axis=0)
    region = [tuple(v) for v in p]
    for a, b in zip(p, nxt):
        u = (b - a) / math.hypot(*(b - a))
        inward = -orient * np.array([u[1], -u[0]])
        off = float(inward @ a) + d

        def side(v):
            return float(inward @ np.asarray(v)) - off

        out = []
        for k, cur in enumerate(region):
            prev = region[k - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append(tuple(np.asarray(prev) + t * (np.asarray(cur) - np.asarray(prev))))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append(tuple(np.asarray(prev) + t * (np.asarray(cur) - np.asarray(prev))))
        region = out
        if len(region) < 3:
            return np.zeros((0, 2))
    res = np.asarray(region, dtype=float)
    scale = max(float(np.ptp(p, axis=0).max()), 1.0)
    keep = [i for i in range(len(res)) if math.hypot(*(res[i] - res[i - 1])) > 1e-12 * scale]
    return res[keep]


def shrink_contour(box, d_s: float) -> np.ndarray:
    """Inward uniform edge offset; raises ``GeometryError('over-shrunk')``.

    Edges move inward by ``d_s`` and vertices are re-intersected.  When that
    would flip an edge of a convex polygon (a short edge swallowed by its
    neighbours) the exact inner parallel region is returned instead, which
    may have fewer vertices.
    """
    p = as_polygon(box)
    out = offset_polygon(p, -float(d_s))
    before = np.roll(p, -1, axis=0) - p
    after = np.roll(out, -1, axis=0) - out
    area_in, area_out = signed_area(p), signed_area(out)
    if not (np.any(np.einsum("ij,ij->i", before, after) <= 0)
            or area_out == 0 or np.sign(area_out) != np.sign(area_in)
            or abs(area_out) >= abs(area_in)):
        return out
    if _is_convex(p) and d_s > 0:
        inner = _inner_parallel(p, float(d_s))
        if len(inner) >= 3 and polygon_area(inner) > 0:
            return inner
    raise GeometryError("over-shrunk")


def expand_contour(poly, d_e: float) -> np.ndarray:
    """Outward uniform edge offset by ``d_e``."""
    return offset_polygon(poly, float(d_e))


# -- masks -------------------------------------------------------------------

def _check_grid(cells: np.ndarray) -> None:
    if cells.ndim != 2 or cells.shape[0] <= 0 or cells.shape[1] <= 0:
        raise GeometryError(f"grid dimensions must be positive, got {cells.shape}")


@dataclass(frozen=True, eq=False)
class MaskGrid:
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=bool)
        _check_grid(cells)
        object.__setattr__(self, "cells", cells)

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def count(self) -> int:
        return int(self.cells.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, MaskGrid) and np.array_equal(self.cells, other.cells)


@dataclass(frozen=True, eq=False)
class ProbGrid:
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=float)
        _check_grid(cells)
        if not np.all((cells >= 0) & (cells <= 1)):
            raise GeometryError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "cells", cells)

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]


def rasterize(polygon, height: int, width: int) -> MaskGrid:
    """Set each cell whose centre lies inside the polygon (even-odd, boundary inside)."""
    cells = np.zeros((height, width), dtype=bool)
    p = as_polygon(polygon)
    if len(p) < 3 or polygon_area(p) == 0:
        return MaskGrid(cells)
    nxt = np.roll(p, -1, axis=0)
    cx = np.arange(width) + 0.5
    y0i = max(int(math.floor(p[:, 1].min() - 0.5)), 0)
    y1i = min(int(math.ceil(p[:, 1].max() - 0.5)), height - 1)
    for r in range(y0i, y1i + 1):
        y = r + 0.5
        a, b = p[:, 1], nxt[:, 1]
        hit = (a <= y) != (b <= y)
        if not hit.any():
            continue
        xs = p[hit, 0] + (y - a[hit]) * (nxt[hit, 0] - p[hit, 0]) / (b[hit] - a[hit])
        xs.sort()
        for k in range(0, len(xs) - 1, 2):
            cells[r] |= (cx >= xs[k]) & (cx <= xs[k + 1])
    _mark_boundary_centres(cells, p, nxt)
    return MaskGrid(cells)


def _mark_boundary_centres(cells: np.ndarray, p: np.ndarray, nxt: np.ndarray) -> None:
    h, w = cells.shape
    for a, b in zip(p, nxt):
        c0 = max(int(math.floor(min(a[0], b[0]) - 0.5)), 0)
        c1 = min(int(math.ceil(max(a[0], b[0]) - 0.5)), w - 1)
        r0 = max(int(math.floor(min(a[1], b[1]) - 0.5)), 0)
        r1 = min(int(math.ceil(max(a[1], b[1]) - 0.5)), h - 1)
        if c0 > c1 or r0 > r1:
            continue
        xs = np.arange(c0, c1 + 1) + 0.5
        ys = np.arange(r0, r1 + 1) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        ab = b - a
        denom = float(ab @ ab)
        t = np.clip(((pts - a) @ ab) / denom, 0, 1)
        d = np.hypot(*(pts - (a + t[:, None] * ab)).T)
        on = d.reshape(gx.shape) <= 1e-12
        cells[r0:r1 + 1, c0:c1 + 1] |= on


def binarize(grid: ProbGrid, threshold: float = DEFAULT_THRESHOLD) -> MaskGrid:
    if not 0 < threshold < 1:
        raise GeometryError("threshold must be in (0, 1)")
    if not isinstance(grid, ProbGrid):
        grid = ProbGrid(grid)
    return MaskGrid(grid.cells >= threshold)


def dice_coefficient(a: MaskGrid, b: MaskGrid) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    if a.cells.shape != b.cells.shape:
        raise GeometryError(f"mask shapes differ: {a.cells.shape} vs {b.cells.shape}")
    sa, sb = int(a.cells.sum()), int(b.cells.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a.cells, b.cells).sum()) / (sa + sb)


def dice_loss(a: MaskGrid, b: MaskGrid) -> float:
    return 1.0 - dice_coefficient(a, b)


_EIGHT = np.ones((3, 3), dtype=int)

# outgoing-edge preference at a vertex where two boundary paths meet
# diagonally: turning left keeps 8-connected cells on a single loop
_LEFT_OF = {(1, 0): (0, -1), (0, 1): (1, 0), (-1, 0): (0, 1), (0, -1): (-1, 0)}


def _trace_loops(comp: np.ndarray) -> list[list[tuple[int, int]]]:
    """Directed cell-edge loops around a boolean component, interior on the right."""
    h, w = comp.shape
    padded = np.pad(comp, 1)
    out: dict[tuple[int, int], list[tuple[int, int]]] = {}
    rows, cols = np.nonzero(comp)
    for r, c in zip(rows.tolist(), cols.tolist()):
        pr, pc = r + 1, c + 1
        if not padded[pr - 1, pc]:
            out.setdefault((c, r), []).append((c + 1, r))
        if not padded[pr, pc + 1]:
            out.setdefault((c + 1, r), []).append((c + 1, r + 1))
        if not padded[pr + 1, pc]:
            out.setdefault((c + 1, r + 1), []).append((c, r + 1))
        if not padded[pr, pc - 1]:
            out.setdefault((c, r + 1), []).append((c, r))
    loops = []
    while out:
        # topmost-leftmost vertex: never a diagonal pinch, so the first return closes the loop
        start = min(out, key=lambda v: (v[1], v[0]))
        loop = []
        prev_dir = None
        cur = start
        while True:
            loop.append(cur)
            options = out[cur]
            nxt = options[0]
            if len(options) > 1 and prev_dir is not None:
                want = _LEFT_OF[prev_dir]
                nxt = next((o for o in options if (o[0] - cur[0], o[1] - cur[1]) == want), nxt)
            options.remove(nxt)
            if not options:
                del out[cur]
            prev_dir = (nxt[0] - cur[0], nxt[1] - cur[1])
            cur = nxt
            if cur == start:
                break
        loops.append(loop)
    return loops


def _simplify(loop: list[tuple[int, int]]) -> np.ndarray:
    pts = np.asarray(loop, dtype=float)
    n = len(pts)
    keep = []
    for i in range(n):
        a, b, c = pts[i - 1], pts[i], pts[(i + 1) % n]
        if _orient(a, b, c) != 0:
            keep.append(i)
    return pts[keep]


def extract_components(mask: MaskGrid, min_area: int = DEFAULT_MIN_AREA) -> list[np.ndarray]:
    """Outer contour polygon (along cell edges) of every 8-connected component.

    Components with fewer than ``min_area`` cells are dropped.  Polygons are
    returned in label order (row-major first cell).
    """
    labels, n = ndimage.label(mask.cells, structure=_EIGHT)
    polys = []
    for k in range(1, n + 1):
        comp = labels == k
        if int(comp.sum()) < min_area:
            continue
        loops = [_simplify(loop) for loop in _trace_loops(comp)]
        loops = [lp for lp in loops if len(lp) >= 3]
        outer = max(loops, key=signed_area)
        polys.append(outer)
    return polys


def polygon_iou(a, b) -> float:
    from .detection import polygon_intersection_area

    pa, pb = as_polygon(a), as_polygon(b)
    inter = polygon_intersection_area(pa, pb)
    union = polygon_area(pa) + polygon_area(pb) - inter
    return inter / union if union > 0 else 0.0


# -- file interfaces ---------------------------------------------------------

def write_pgm(mask: MaskGrid, path) -> None:
    """Binary PGM (P5) with maxval 1."""
    header = f"P5\n{mask.width} {mask.height}\n1\n".encode("ascii")
    Path(path).write_bytes(header + mask.cells.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise GeometryError("only binary P5 PGM is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return arr.astype(float) / maxval


def load_prob_grid(path) -> ProbGrid:
    """Load a probability map from ``.npy`` or PGM (scaled by maxval)."""
    path = Path(path)
    if path.suffix == ".npy":
        return ProbGrid(np.load(path))
    return ProbGrid(read_pgm(path))


def polygons_to_json(polys) -> str:
    return json.dumps([[[float(x), float(y)] for x, y in as_polygon(p)] for p in polys])


def polygons_from_json(text: str) -> list[np.ndarray]:
    return [np.asarray(p, dtype=float).reshape(-1, 2) for p in json.loads(text)]
