"""Planar Lipschitz domains, cut-cell lattices and subdomain masks.

Three domain families are supported: axis-aligned rectangles, simple
polygons and horn-shaped regions ``{1 < x < X_max, |y| < c x**-p}``.
Every domain carries a counterclockwise polygonal boundary; for horns this
is an inscribed tangent polyline of the profile, so the polygon always lies
inside the closure of the exact region.

Grids are square lattices clipped against that polygon.  Cell areas,
centroids, shared-face lengths and boundary-face lengths are all computed
from one set of lattice-split boundary pieces using Green's theorem, so the
sum of cell areas reproduces the polygon's shoelace area to rounding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

MAX_REFLECTIONS = 4
DEFAULT_MAX_CELLS = 400_000
SLIVER_FRACTION = 1e-6

_KINDS = ("rectangle", "polygon", "horn")


class DomainError(ValueError):
    """Invalid or unparsable domain description."""


class GridError(ValueError):
    """Grid construction failed (too many cells, empty grid, ...)."""


# ---------------------------------------------------------------------------
# polygon helpers


def signed_area(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_intersect(p1, p2, q1, q2, tol=1e-14) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - tol <= c[0] <= max(a[0], b[0]) + tol
                and min(a[1], b[1]) - tol <= c[1] <= max(a[1], b[1]) + tol)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if ((o1 > tol and o2 < -tol) or (o1 < -tol and o2 > tol)) and \
            ((o3 > tol and o4 < -tol) or (o3 < -tol and o4 > tol)):
        return True
    if abs(o1) <= tol and on_seg(p1, p2, q1):
        return True
    if abs(o2) <= tol and on_seg(p1, p2, q2):
        return True
    if abs(o3) <= tol and on_seg(q1, q2, p1):
        return True
    if abs(o4) <= tol and on_seg(q1, q2, p2):
        return True
    return False


def _check_simple(vertices: np.ndarray) -> None:
    n = len(vertices)
    edges = [(vertices[i], vertices[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        if np.allclose(edges[i][0], edges[i][1]):
            raise DomainError(f"polygon has a repeated vertex at index {i}")
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                # adjacent edges share a vertex; reject only backtracking
                a0, a1 = edges[i]
                b0, b1 = edges[j]
                shared = a1 if j == i + 1 else a0
                da = (a0 if j == i + 1 else a1) - shared
                db = (b1 if j == i + 1 else b0) - shared
                cross = da[0] * db[1] - da[1] * db[0]
                if abs(cross) <= 1e-14 * (np.linalg.norm(da) * np.linalg.norm(db)) \
                        and np.dot(da, db) > 0:
                    raise DomainError(f"polygon edges {i} and {j} overlap")
                continue
            if _segments_intersect(*edges[i], *edges[j]):
                raise DomainError(f"polygon is self-intersecting (edges {i} and {j})")


def _horn_polyline(p: float, c: float, x_max: float, tol: float) -> np.ndarray:
    """Vertices of the tangent polyline under ``c x**-p`` on ``[1, x_max]``."""
    xs = [1.0]
    x = 1.0
    while x < x_max:
        curv = c * p * (p + 1.0) * x ** (-p - 2.0)
        step = min(math.sqrt(8.0 * tol / curv), 0.05, max(x_max - x, 0.0))
        x = x + step
        if x_max - x < 0.25 * step:
            x = x_max
        xs.append(min(x, x_max))
    xs = np.asarray(xs)
    mids = 0.5 * (xs[:-1] + xs[1:])
    hv = c * mids ** -p
    slope = -p * c * mids ** (-p - 1.0)
    icpt = hv - slope * mids
    # consecutive tangents meet between their touching points
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = (icpt[1:] - icpt[:-1]) / (slope[:-1] - slope[1:])
    xi = np.where(np.isfinite(xi), xi, xs[1:-1])
    vx = np.concatenate([[1.0], xi, [x_max]])
    seg = np.concatenate([[0], np.arange(len(xi)), [len(mids) - 1]])
    vy = icpt[seg] + slope[seg] * vx
    return np.column_stack([vx, vy])


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True, eq=False)
class DomainSpec:
    """Geometric description of a planar Lipschitz domain.

    ``kind`` is one of ``rectangle`` (params ``width``, ``height`` and an
    optional ``origin``), ``polygon`` (``vertices``, counterclockwise) or
    ``horn`` (``p``, ``c``, ``x_max`` and optional ``profile_tol``).
    """

    kind: str
    params: Mapping[str, Any]
    name: str = ""
    vertices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DomainError(f"unknown domain kind {self.kind!r}; expected one of {_KINDS}")
        params = dict(self.params)
        if self.kind == "rectangle":
            w = float(params.get("width", 0.0))
            hgt = float(params.get("height", 0.0))
            if not (w > 0 and hgt > 0):
                raise DomainError(f"rectangle needs width > 0 and height > 0, got {w}, {hgt}")
            ox, oy = (float(v) for v in params.get("origin", (0.0, 0.0)))
            params.update(width=w, height=hgt, origin=(ox, oy))
            verts = np.array([[ox, oy], [ox + w, oy], [ox + w, oy + hgt], [ox, oy + hgt]])
        elif self.kind == "polygon":
            try:
                verts = np.asarray(params["vertices"], dtype=float)
            except (KeyError, TypeError, ValueError) as exc:
                raise DomainError(f"polygon needs a numeric vertex list: {exc}") from None
            if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
                raise DomainError("polygon needs at least 3 vertices of the form [x, y]")
            if not np.all(np.isfinite(verts)):
                raise DomainError("polygon vertices must be finite")
            if len(verts) > 3 and np.allclose(verts[0], verts[-1]):
                verts = verts[:-1]
            _check_simple(verts)
            if signed_area(verts) <= 0:
                raise DomainError("polygon vertices must be in counterclockwise order "
                                  "(positive signed area)")
            params["vertices"] = verts.tolist()
        else:
            p = float(params.get("p", 0.0))
            c = float(params.get("c", 0.0))
            x_max = float(params.get("x_max", 0.0))
            tol = float(params.get("profile_tol", 1e-6))
            if not p > 0:
                raise DomainError(f"horn exponent p must be > 0, got {p}")
            if not c > 0:
                raise DomainError(f"horn scale c must be > 0, got {c}")
            if not x_max > 1:
                raise DomainError(f"horn x_max must exceed 1, got {x_max}")
            if not tol > 0:
                raise DomainError("profile_tol must be > 0")
            params.update(p=p, c=c, x_max=x_max, profile_tol=tol)
            top = _horn_polyline(p, c, x_max, tol)
            # lower profile left to right, then upper profile right to left
            verts = np.vstack([top * np.array([1.0, -1.0]), top[::-1]])
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "vertices", np.ascontiguousarray(verts, dtype=float))

    # -- scalar properties -------------------------------------------------

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices, np.roll(self.vertices, -1, axis=0)

    @property
    def area(self) -> float:
        """Exact area of the domain (analytic for horns)."""
        if self.kind == "rectangle":
            return self.params["width"] * self.params["height"]
        if self.kind == "polygon":
            return signed_area(self.vertices)
        p, c, x_max = self.params["p"], self.params["c"], self.params["x_max"]
        if abs(p - 1.0) < 1e-14:
            return 2.0 * c * math.log(x_max)
        return 2.0 * c * (x_max ** (1.0 - p) - 1.0) / (1.0 - p)

    @property
    def polygon_area(self) -> float:
        return signed_area(self.vertices)

    @property
    def perimeter(self) -> float:
        a, b = self.edges
        return float(np.linalg.norm(b - a, axis=1).sum())

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    @property
    def diameter(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return math.hypot(x1 - x0, y1 - y0)

    def profile(self, x):
        """Horn half-width ``H(x) = c x**-p``."""
        if self.kind != "horn":
            raise DomainError("profile() is only defined for horn domains")
        return self.params["c"] * np.asarray(x, dtype=float) ** (-self.params["p"])

    def with_x_max(self, x_max: float) -> DomainSpec:
        """Horn truncated at a different ``x_max``."""
        if self.kind != "horn":
            raise DomainError("with_x_max() is only defined for horn domains")
        params = dict(self.params, x_max=float(x_max))
        return DomainSpec("horn", params, name=f"{self.name}[x<{x_max:g}]")

    # -- point queries -----------------------------------------------------

    def contains(self, pts) -> np.ndarray | bool:
        """True iff the point lies in the open domain."""
        pts = np.asarray(pts, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        x, y = pts[:, 0], pts[:, 1]
        if self.kind == "rectangle":
            ox, oy = self.params["origin"]
            res = (x > ox) & (x < ox + self.params["width"]) & \
                  (y > oy) & (y < oy + self.params["height"])
        elif self.kind == "horn":
            res = np.zeros(len(pts), dtype=bool)
            inx = (x > 1.0) & (x < self.params["x_max"])
            res[inx] = np.abs(y[inx]) < self.profile(x[inx])
        else:
            dist = self.distance_to_boundary(pts)
            res = _point_in_polygon(pts, self.vertices) & (dist > 1e-12 * max(self.diameter, 1.0))
        return bool(res[0]) if single else res

    def contains_closed(self, pts, tol: float = 1e-10) -> np.ndarray:
        """Membership in the closed polygonal region (within ``tol``)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.kind == "rectangle":
            ox, oy = self.params["origin"]
            x, y = pts[:, 0], pts[:, 1]
            return (x >= ox - tol) & (x <= ox + self.params["width"] + tol) & \
                   (y >= oy - tol) & (y <= oy + self.params["height"] + tol)
        inside = _point_in_polygon(pts, self.vertices)
        if inside.all():
            return inside
        out = ~inside
        inside[out] = self.distance_to_boundary(pts[out]) <= tol
        return inside

    def distance_to_boundary(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.kind == "rectangle":
            ox, oy = self.params["origin"]
            x, y = pts[:, 0], pts[:, 1]
            dx = np.minimum(np.abs(x - ox), np.abs(ox + self.params["width"] - x))
            dy = np.minimum(np.abs(y - oy), np.abs(oy + self.params["height"] - y))
            inside = self.contains_closed(pts, 0.0)
            d_in = np.minimum(dx, dy)
            cx = np.clip(x, ox, ox + self.params["width"])
            cy = np.clip(y, oy, oy + self.params["height"])
            d_out = np.hypot(x - cx, y - cy)
            return np.where(inside, d_in, d_out)
        return _closest_on_edges(pts, *self.edges)[0]

    def closest_point(self, pts) -> np.ndarray:
        """Closest point of the closed region to each query point."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.kind == "rectangle":
            ox, oy = self.params["origin"]
            return np.column_stack([np.clip(pts[:, 0], ox, ox + self.params["width"]),
                                    np.clip(pts[:, 1], oy, oy + self.params["height"])])
        res = pts.copy()
        inside = self.contains_closed(pts, 0.0)
        if (~inside).any():
            res[~inside] = _closest_on_edges(pts[~inside], *self.edges)[1]
        return res

    def to_dict(self) -> dict:
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.params.items()}
        return {"name": self.name, "kind": self.kind, "params": params}


def _point_in_polygon(pts: np.ndarray, vertices: np.ndarray, chunk: int = 4_000_000) -> np.ndarray:
    """Crossing-number test, vectorized over points and edges."""
    a = vertices
    b = np.roll(vertices, -1, axis=0)
    n_e = len(a)
    out = np.empty(len(pts), dtype=bool)
    step = max(1, chunk // n_e)
    for s in range(0, len(pts), step):
        px = pts[s:s + step, 0][:, None]
        py = pts[s:s + step, 1][:, None]
        cond = (a[None, :, 1] > py) != (b[None, :, 1] > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = a[None, :, 0] + (py - a[None, :, 1]) * (b[None, :, 0] - a[None, :, 0]) / \
                (b[None, :, 1] - a[None, :, 1])
        hits = cond & (px < xint)
        out[s:s + step] = (hits.sum(axis=1) % 2) == 1
    return out


def _closest_on_edges(pts, a, b, chunk: int = 4_000_000):
    """Distance, closest point and edge index of the nearest boundary edge."""
    n_e = len(a)
    dist = np.empty(len(pts))
    close = np.empty_like(pts)
    which = np.empty(len(pts), dtype=np.int64)
    ab = b - a
    ab2 = np.einsum("ij,ij->i", ab, ab)
    step = max(1, chunk // n_e)
    for s in range(0, len(pts), step):
        p = pts[s:s + step]
        ap = p[:, None, :] - a[None, :, :]
        u = np.clip(np.einsum("nej,ej->ne", ap, ab) / ab2[None, :], 0.0, 1.0)
        cp = a[None, :, :] + u[..., None] * ab[None, :, :]
        d2 = ((p[:, None, :] - cp) ** 2).sum(axis=2)
        k = np.argmin(d2, axis=1)
        rows = np.arange(len(p))
        dist[s:s + step] = np.sqrt(d2[rows, k])
        close[s:s + step] = cp[rows, k]
        which[s:s + step] = k
    return dist, close, which


def build_domain(spec: str | Mapping[str, Any]) -> DomainSpec:
    """Parse a structured domain description (YAML/JSON text or a mapping).

    The document has the fields ``kind``, ``params`` and optionally ``name``::

        name: unit-square
        kind: rectangle
        params: {width: 1, height: 1}
    """
    if isinstance(spec, str):
        try:
            doc = yaml.safe_load(spec)
        except yaml.YAMLError as exc:
            raise DomainError(f"cannot parse domain text: {exc}") from None
    else:
        doc = spec
    if not isinstance(doc, Mapping):
        raise DomainError("domain description must be a mapping with 'kind' and 'params'")
    kind = doc.get("kind")
    params = doc.get("params", {})
    if kind is None:
        raise DomainError("domain description is missing 'kind'")
    if not isinstance(params, Mapping):
        raise DomainError("'params' must be a mapping")
    return DomainSpec(str(kind), dict(params), name=str(doc.get("name", kind)))


def load_domain(path: str | Path) -> DomainSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DomainError(f"cannot read domain file {path}: {exc}") from None
    return build_domain(text)


def contains(d: DomainSpec, pt) -> np.ndarray | bool:
    return d.contains(pt)


# ---------------------------------------------------------------------------
# reflection


def _fold(v: np.ndarray, lo: float, hi: float, counts: np.ndarray) -> np.ndarray:
    v = v.copy()
    for _ in range(MAX_REFLECTIONS + 1):
        below = v < lo
        above = v > hi
        if not (below.any() or above.any()):
            break
        v[below] = 2.0 * lo - v[below]
        v[above] = 2.0 * hi - v[above]
        counts += below | above
    return v


def _first_hit(p, q, a, b, exclude, chunk: int = 2_000_000):
    """Smallest crossing parameter of segments p->q with polygon edges."""
    n_e = len(a)
    s_best = np.full(len(p), np.inf)
    e_best = np.full(len(p), -1, dtype=np.int64)
    ab = b - a
    step = max(1, chunk // n_e)
    for s0 in range(0, len(p), step):
        pp = p[s0:s0 + step][:, None, :]
        d = (q[s0:s0 + step] - p[s0:s0 + step])[:, None, :]
        ap = a[None, :, :] - pp
        denom = d[..., 0] * ab[None, :, 1] - d[..., 1] * ab[None, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (ap[..., 0] * ab[None, :, 1] - ap[..., 1] * ab[None, :, 0]) / denom
            u = (ap[..., 0] * d[..., 1] - ap[..., 1] * d[..., 0]) / denom
        ok = (np.abs(denom) > 1e-300) & (s > 1e-12) & (s <= 1.0 + 1e-12) & \
             (u >= -1e-12) & (u <= 1.0 + 1e-12)
        ex = exclude[s0:s0 + step]
        rows = np.nonzero(ex >= 0)[0]
        ok[rows, ex[rows]] = False
        s = np.where(ok, s, np.inf)
        k = np.argmin(s, axis=1)
        rr = np.arange(len(k))
        s_best[s0:s0 + step] = s[rr, k]
        e_best[s0:s0 + step] = np.where(np.isfinite(s[rr, k]), k, -1)
    return s_best, e_best


def reflect_step(d: DomainSpec, frm, to) -> np.ndarray:
    """Map a proposed move ``frm -> to`` back into the closed domain.

    Points already in the closed domain are returned unchanged.  Otherwise
    the overshoot is mirrored across the first boundary segment crossed, up
    to ``MAX_REFLECTIONS`` times; anything still outside is projected to the
    closest point of the closed domain.
    """
    frm = np.asarray(frm, dtype=float)
    to = np.asarray(to, dtype=float)
    single = to.ndim == 1
    frm2 = np.atleast_2d(frm)
    to2 = np.atleast_2d(to)
    if frm2.shape[0] == 1 and to2.shape[0] > 1:
        frm2 = np.broadcast_to(frm2, to2.shape)
    out = to2.copy()
    if d.kind == "rectangle":
        ox, oy = d.params["origin"]
        counts = np.zeros(len(out), dtype=np.int64)
        out[:, 0] = _fold(to2[:, 0], ox, ox + d.params["width"], counts)
        out[:, 1] = _fold(to2[:, 1], oy, oy + d.params["height"], counts)
        bad = counts > MAX_REFLECTIONS
        if bad.any():
            out[bad] = d.closest_point(to2[bad])
        return out[0] if single else out

    outside = ~d.contains_closed(out, 0.0)
    if not outside.any():
        return out[0] if single else out
    idx = np.nonzero(outside)[0]
    p = frm2[idx].copy()
    q = to2[idx].copy()
    last = np.full(len(idx), -1, dtype=np.int64)
    a, b = d.edges
    normals = np.column_stack([b[:, 1] - a[:, 1], a[:, 0] - b[:, 0]])
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    alive = np.ones(len(idx), dtype=bool)
    settled = np.zeros(len(idx), dtype=bool)
    for _ in range(MAX_REFLECTIONS):
        act = np.nonzero(alive)[0]
        if len(act) == 0:
            break
        s, e = _first_hit(p[act], q[act], a, b, last[act])
        miss = e < 0
        alive[act[miss]] = False
        act, s, e = act[~miss], s[~miss], e[~miss]
        hit = p[act] + s[:, None] * (q[act] - p[act])
        n = normals[e]
        dq = np.einsum("ij,ij->i", q[act] - hit, n)
        q[act] = q[act] - 2.0 * dq[:, None] * n
        p[act] = hit
        last[act] = e
        ok = d.contains_closed(q[act], 0.0)
        settled[act[ok]] = True
        alive[act[ok]] = False
    out[idx[settled]] = q[settled]
    rest = idx[~settled]
    if len(rest):
        out[rest] = d.closest_point(to2[rest])
    return out[0] if single else out


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True, eq=False)
class SubdomainMask:
    name: str
    cells: np.ndarray
    predicate: str = ""

    @property
    def count(self) -> int:
        return int(self.cells.sum())

    def __le__(self, other: SubdomainMask) -> bool:
        return bool(np.all(~self.cells | other.cells))


@dataclass(frozen=True, eq=False)
class Grid:
    """Cut-cell lattice over a domain.

    Cells are indexed ``0..n_cells-1``.  ``lattice[k]`` holds the lattice
    position of cell ``k`` and ``lookup[i, j]`` maps lattice positions back
    to cell indices (``-1`` outside the domain; merged slivers point at the
    cell that absorbed them).
    """

    domain: DomainSpec
    h: float
    origin: tuple[float, float]
    shape: tuple[int, int]
    vertices: np.ndarray
    lattice: np.ndarray
    centers: np.ndarray
    measure: np.ndarray
    faces: np.ndarray
    trans: np.ndarray
    bface_cell: np.ndarray
    bface_length: np.ndarray
    bface_mid: np.ndarray
    lookup: np.ndarray
    nearest: np.ndarray = field(repr=False)

    @property
    def n_cells(self) -> int:
        return len(self.measure)

    @property
    def total_measure(self) -> float:
        return float(self.measure.sum())

    @property
    def boundary_length(self) -> float:
        return float(self.bface_length.sum())

    @property
    def lattice_centers(self) -> np.ndarray:
        return np.asarray(self.origin) + (self.lattice + 0.5) * self.h

    def boundary_weight(self) -> np.ndarray:
        """Surface-measure weight accumulated per cell."""
        return np.bincount(self.bface_cell, weights=self.bface_length, minlength=self.n_cells)

    def locate(self, pts) -> np.ndarray:
        """Index of the cell containing (or nearest to) each point."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        ij = np.floor((pts - np.asarray(self.origin)) / self.h).astype(np.int64)
        nx, ny = self.shape
        ij[:, 0] = np.clip(ij[:, 0], 0, nx - 1)
        ij[:, 1] = np.clip(ij[:, 1], 0, ny - 1)
        return self.nearest[ij[:, 0], ij[:, 1]]

    def interpolation(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear weights over neighbouring cell centres.

        Returns ``(cells, weights)`` of shape ``(n, 4)``; weights of missing
        neighbours are zero and each row sums to one.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        f = (pts - np.asarray(self.origin)) / self.h - 0.5
        i0 = np.floor(f).astype(np.int64)
        a = f - i0
        nx, ny = self.shape
        cells = np.zeros((len(pts), 4), dtype=np.int64)
        wts = np.zeros((len(pts), 4))
        for k, (di, dj) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
            ii = i0[:, 0] + di
            jj = i0[:, 1] + dj
            ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
            c = np.full(len(pts), -1, dtype=np.int64)
            c[ok] = self.lookup[ii[ok], jj[ok]]
            wx = a[:, 0] if di else 1.0 - a[:, 0]
            wy = a[:, 1] if dj else 1.0 - a[:, 1]
            cells[:, k] = np.maximum(c, 0)
            wts[:, k] = np.where(c >= 0, wx * wy, 0.0)
        tot = wts.sum(axis=1)
        lost = tot <= 1e-12
        if lost.any():
            cells[lost, 0] = self.locate(pts[lost])
            wts[lost] = 0.0
            wts[lost, 0] = 1.0
            tot[lost] = 1.0
        return cells, wts / tot[:, None]

    # -- masks -------------------------------------------------------------

    def all_mask(self) -> SubdomainMask:
        return SubdomainMask("all", np.ones(self.n_cells, dtype=bool), "all cells")

    def ball_mask(self, radius: float, center=(0.0, 0.0)) -> SubdomainMask:
        """Cells whose centroid lies in the open ball ``B(center, radius)``."""
        r = np.linalg.norm(self.centers - np.asarray(center, dtype=float), axis=1)
        return SubdomainMask(f"ball(R={radius:g})", r < radius, f"|x - {tuple(center)}| < {radius:g}")

    def cut_mask(self, x_cut: float) -> SubdomainMask:
        """Cells whose centroid lies left of the vertical line ``x = x_cut``."""
        return SubdomainMask(f"cut(X={x_cut:g})", self.centers[:, 0] < x_cut, f"x < {x_cut:g}")

    def window_mask(self, radius: float, eps: float, center=(0.0, 0.0)) -> SubdomainMask:
        """Cells at distance more than ``eps * radius`` from the domain outside the ball.

        The complement ``closure(D) \\ B(radius)`` is sampled by cell
        centroids, boundary-face midpoints and points of the circle
        ``|x| = radius`` lying in the closed domain.
        """
        center = np.asarray(center, dtype=float)
        n_circ = max(64, int(math.ceil(8 * math.pi * radius / self.h)))
        theta = np.linspace(0.0, 2.0 * math.pi, n_circ, endpoint=False)
        circ = center + radius * np.column_stack([np.cos(theta), np.sin(theta)])
        circ = circ[self.domain.contains_closed(circ, 1e-12)]
        cand = np.vstack([self.centers, self.bface_mid, self.vertices, circ])
        far = np.linalg.norm(cand - center, axis=1) >= radius
        pts = cand[far]
        if len(pts) == 0:
            sel = np.ones(self.n_cells, dtype=bool)
        else:
            dist, _ = cKDTree(pts).query(self.centers)
            sel = dist > eps * radius
        return SubdomainMask(f"window(R={radius:g},eps={eps:g})", sel,
                             f"dist(x, D \\ B({radius:g})) > {eps * radius:g}")

    def strip_mask(self, eps: float) -> SubdomainMask:
        """Cells whose centroid is within ``eps`` of the boundary."""
        dist = self.domain.distance_to_boundary(self.centers)
        return SubdomainMask(f"strip(eps={eps:g})", dist < eps, f"dist(x, boundary) < {eps:g}")


@dataclass(frozen=True)
class TruncationScheme:
    """Increasing exhaustion schedule: balls ``B(R_n)`` or vertical cuts ``x < X_n``."""

    kind: str
    levels: tuple[float, ...]
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("ball", "cut"):
            raise DomainError(f"unknown truncation scheme {self.kind!r}")
        lv = tuple(float(v) for v in self.levels)
        if not lv:
            raise DomainError("truncation schedule is empty")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise DomainError(f"truncation schedule must be strictly increasing: {lv}")
        object.__setattr__(self, "levels", lv)

    def __len__(self) -> int:
        return len(self.levels)


def truncate(g: Grid, n: int, scheme: TruncationScheme) -> SubdomainMask:
    """Mask of the ``n``-th truncation ``K_n`` (1-based)."""
    if not 1 <= n <= len(scheme):
        raise IndexError(f"level {n} outside schedule of length {len(scheme)}")
    level = scheme.levels[n - 1]
    if scheme.kind == "ball":
        m = g.ball_mask(level, scheme.center)
    else:
        m = g.cut_mask(level)
    return SubdomainMask(f"K{n}:{m.name}", m.cells, m.predicate)


def _snap(v: np.ndarray, lines: np.ndarray, h: float) -> np.ndarray:
    v = v.copy()
    k = np.clip(np.rint((v - lines[0]) / h).astype(np.int64), 0, len(lines) - 1)
    close = np.abs(v - lines[k]) <= 1e-9 * h
    v[close] = lines[k[close]]
    return v


def _line_crossings(coord_a, coord_b, other_a, other_b, lines):
    """Crossings of polygon edges with lattice lines ``coord = lines[i]``.

    Uses the half-open rule ``(a <= L) != (b <= L)``, i.e. each lattice line
    is treated as shifted by an infinitesimal positive amount.
    """
    lo = np.minimum(coord_a, coord_b)
    hi = np.maximum(coord_a, coord_b)
    i_lo = np.searchsorted(lines, lo, side="left")
    i_hi = np.searchsorted(lines, hi, side="left")
    counts = np.where(coord_a != coord_b, i_hi - i_lo, 0)
    edge = np.repeat(np.arange(len(coord_a)), counts)
    offs = np.concatenate([[0], np.cumsum(counts)[:-1]])
    line = i_lo[edge] + np.arange(len(edge)) - np.repeat(offs, counts)
    t = (lines[line] - coord_a[edge]) / (coord_b[edge] - coord_a[edge])
    other = other_a[edge] + t * (other_b[edge] - other_a[edge])
    return edge, line, t, other


def _inside_lengths(line_idx, cross_other, n_lines, seg_lines):
    """Inside length of each lattice segment ``[seg_lines[j], seg_lines[j+1]]`` on every line."""
    out = np.zeros((n_lines, len(seg_lines) - 1))
    if len(line_idx) == 0:
        return out
    order = np.lexsort((cross_other, line_idx))
    li = line_idx[order]
    yo = cross_other[order]
    bounds = np.searchsorted(li, np.arange(n_lines + 1))
    for i in range(n_lines):
        ys = yo[bounds[i]:bounds[i + 1]]
        if len(ys) == 0:
            continue
        if len(ys) % 2:
            raise GridError("odd number of boundary crossings on a lattice line")
        cum = np.zeros(len(ys))
        cum[1::2] = np.cumsum(ys[1::2] - ys[0::2])
        cum[2::2] = cum[1:-1:2]
        f = np.interp(seg_lines, ys, cum, left=0.0, right=cum[-1])
        out[i] = np.diff(f)
    return np.clip(out, 0.0, None)


def build_grid(d: DomainSpec, h: float, max_cells: int = DEFAULT_MAX_CELLS,
               sliver_fraction: float = SLIVER_FRACTION) -> Grid:
    """Clip a square lattice of spacing ``h`` against the domain polygon."""
    if not h > 0:
        raise GridError(f"spacing must be positive, got {h}")
    xmin, ymin, xmax, ymax = d.bbox
    nx = int(math.ceil((xmax - xmin) / h - 1e-9)) + 2
    ny = int(math.ceil((ymax - ymin) / h - 1e-9)) + 2
    if nx * ny > 4 * max_cells or d.area / (h * h) > max_cells:
        raise GridError(f"spacing h={h:g} gives about {d.area / h / h:.0f} cells "
                        f"(> {max_cells}); use a coarser h")
    x0, y0 = xmin - h, ymin - h
    xs = x0 + h * np.arange(nx + 1)
    ys = y0 + h * np.arange(ny + 1)

    verts = d.vertices.copy()
    verts[:, 0] = _snap(verts[:, 0], xs, h)
    verts[:, 1] = _snap(verts[:, 1], ys, h)
    a = verts
    b = np.roll(verts, -1, axis=0)
    ax, ay, bx, by = a[:, 0], a[:, 1], b[:, 0], b[:, 1]

    # inside lengths of vertical / horizontal lattice segments
    ev, lv, tv, yv = _line_crossings(ax, bx, ay, by, xs)
    eh, lh, th, xh = _line_crossings(ay, by, ax, bx, ys)
    len_v = _inside_lengths(lv, yv, nx + 1, ys)        # (nx+1, ny)
    len_h = _inside_lengths(lh, xh, ny + 1, xs).T      # (nx, ny+1)

    # boundary pieces: split every edge at all lattice crossings
    n_e = len(a)
    ev_t = np.concatenate([np.zeros(n_e), np.ones(n_e), tv, th])
    ev_e = np.concatenate([np.arange(n_e), np.arange(n_e), ev, eh])
    ev_x = np.concatenate([ax, bx, xs[lv], xh])
    ev_y = np.concatenate([ay, by, yv, ys[lh]])
    order = np.lexsort((ev_t, ev_e))
    ev_t, ev_e, ev_x, ev_y = ev_t[order], ev_e[order], ev_x[order], ev_y[order]
    same = ev_e[1:] == ev_e[:-1]
    px, py = ev_x[:-1][same], ev_y[:-1][same]
    qx, qy = ev_x[1:][same], ev_y[1:][same]
    plen = np.hypot(qx - px, qy - py)
    keep = plen > 1e-14 * h
    px, py, qx, qy, plen = px[keep], py[keep], qx[keep], qy[keep], plen[keep]
    mx, my = 0.5 * (px + qx), 0.5 * (py + qy)

    # owner cell under the shifted-line convention: a piece lying on a
    # lattice line belongs to the cell below / left of it
    ci = np.floor((mx - x0) / h).astype(np.int64)
    cj = np.floor((my - y0) / h).astype(np.int64)
    on_v = (px == qx) & np.isin(px, xs)
    on_h = (py == qy) & np.isin(py, ys)
    ci[on_v] = np.searchsorted(xs, px[on_v]) - 1
    cj[on_h] = np.searchsorted(ys, py[on_h]) - 1
    ci = np.clip(ci, 0, nx - 1)
    cj = np.clip(cj, 0, ny - 1)

    # Green's theorem in cell-local coordinates
    xl, yb = xs[ci], ys[cj]
    up, uq = px - xl, qx - xl
    vp, vq = py - yb, qy - yb
    area = np.zeros((nx, ny))
    mom_x = np.zeros((nx, ny))
    mom_y = np.zeros((nx, ny))
    np.add.at(area, (ci, cj), 0.5 * (up + uq) * (qy - py))
    np.add.at(mom_x, (ci, cj), (qy - py) * (up * up + up * uq + uq * uq) / 3.0)
    np.add.at(mom_y, (ci, cj), -(qx - px) * (vp * vp + vp * vq + vq * vq) / 3.0)
    area += h * len_v[1:, :]
    mom_x += h * h * len_v[1:, :]
    mom_y += h * h * len_h[:, 1:]

    tiny = 1e-12 * h * h
    active = area > tiny
    if not active.any():
        raise GridError("grid has no cells inside the domain")
    # absolute first moments, for merging
    gx = np.where(active, mom_x / 2.0 + xs[:-1, None] * area, 0.0)
    gy = np.where(active, mom_y / 2.0 + ys[None, :-1] * area, 0.0)

    rep = np.full((nx, ny), -1, dtype=np.int64)
    flat = np.arange(nx * ny).reshape(nx, ny)
    rep[active] = flat[active]
    sliver = active & (area < sliver_fraction * h * h)
    for i, j in zip(*np.nonzero(sliver)):
        best, best_a = -1, 0.0
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ii, jj = i + di, j + dj
            if 0 <= ii < nx and 0 <= jj < ny and active[ii, jj] and not sliver[ii, jj] \
                    and area[ii, jj] > best_a:
                best, best_a = flat[ii, jj], area[ii, jj]
        if best >= 0:
            rep[i, j] = best
    rep_flat = rep.ravel()

    owners = np.unique(rep_flat[rep_flat >= 0])
    index_of = np.full(nx * ny, -1, dtype=np.int64)
    index_of[owners] = np.arange(len(owners))
    lookup = np.where(rep_flat >= 0, index_of[np.maximum(rep_flat, 0)], -1).reshape(nx, ny)

    n_cells = len(owners)
    live = lookup >= 0
    cell_of = lookup[live]
    measure = np.bincount(cell_of, weights=area[live], minlength=n_cells)
    cx = np.bincount(cell_of, weights=gx[live], minlength=n_cells) / measure
    cy = np.bincount(cell_of, weights=gy[live], minlength=n_cells) / measure
    lattice = np.column_stack(np.unravel_index(owners, (nx, ny)))

    # interior faces
    pairs = []
    weights = []
    lv_in = len_v[1:nx, :]          # line i between cells (i-1, j) and (i, j)
    ca = lookup[:-1, :]
    cb = lookup[1:, :]
    ok = (ca >= 0) & (cb >= 0) & (ca != cb) & (lv_in > 0)
    pairs.append(np.column_stack([ca[ok], cb[ok]]))
    weights.append(lv_in[ok] / h)
    lh_in = len_h[:, 1:ny]
    ca = lookup[:, :-1]
    cb = lookup[:, 1:]
    ok = (ca >= 0) & (cb >= 0) & (ca != cb) & (lh_in > 0)
    pairs.append(np.column_stack([ca[ok], cb[ok]]))
    weights.append(lh_in[ok] / h)
    pairs = np.vstack(pairs)
    weights = np.concatenate(weights)
    pairs = np.sort(pairs, axis=1)
    if len(pairs):
        key = pairs[:, 0] * n_cells + pairs[:, 1]
        uk, inv = np.unique(key, return_inverse=True)
        faces = np.column_stack([uk // n_cells, uk % n_cells])
        trans = np.bincount(inv, weights=weights)
    else:
        faces = np.zeros((0, 2), dtype=np.int64)
        trans = np.zeros(0)

    # nearest live cell for every lattice position
    if live.all():
        nearest = lookup.copy()
    else:
        _, (ni, nj) = ndimage.distance_transform_edt(~live, return_indices=True)
        nearest = lookup[ni, nj]

    # boundary faces go to the cell on the interior side of each piece
    nlx, nly = -(qy - py) / plen, (qx - px) / plen
    ox = mx + 1e-7 * h * nlx
    oy = my + 1e-7 * h * nly
    bi = np.clip(np.floor((ox - x0) / h).astype(np.int64), 0, nx - 1)
    bj = np.clip(np.floor((oy - y0) / h).astype(np.int64), 0, ny - 1)
    bcell = nearest[bi, bj]

    return Grid(domain=d, h=float(h), origin=(float(x0), float(y0)), shape=(nx, ny),
                vertices=verts, lattice=lattice, centers=np.column_stack([cx, cy]),
                measure=measure, faces=faces, trans=trans, bface_cell=bcell,
                bface_length=plen, bface_mid=np.column_stack([mx, my]),
                lookup=lookup, nearest=nearest)


def grid_components(g: Grid) -> int:
    if len(g.faces) == 0:
        return g.n_cells
    adj = coo_matrix((np.ones(len(g.faces)), (g.faces[:, 0], g.faces[:, 1])),
                     shape=(g.n_cells, g.n_cells))
    n, _ = connected_components(adj, directed=False)
    return int(n)


def bundled_domains() -> list[str]:
    """Names of the domain files shipped with the package."""
    from importlib import resources
    root = resources.files("rbmlab") / "domains"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def bundled_domain(name: str) -> DomainSpec:
    from importlib import resources
    res = resources.files("rbmlab") / "domains" / f"{name}.yaml"
    if not res.is_file():
        raise DomainError(f"no bundled domain {name!r}; available: {bundled_domains()}")
    return build_domain(res.read_text())
