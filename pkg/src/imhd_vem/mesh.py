"""Polygonal meshes: topology, element geometry, regularity checks, I/O and
the mesh families used by the numerical experiments."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import Voronoi

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    """Raised for malformed mesh input (parse or topology problems)."""


def _signed_area(xy: np.ndarray) -> float:
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True)
class ElementGeometry:
    """Geometric data of one polygonal cell.

    Edge arrays are ordered like the cell's vertex loop: edge ``i`` runs from
    local vertex ``i`` to local vertex ``i + 1``.
    """

    cell: int
    vertices: np.ndarray  # (nv, 2), counter-clockwise
    centroid: np.ndarray
    diameter: float
    area: float
    edge_start: np.ndarray  # (nv, 2)
    edge_end: np.ndarray
    edge_length: np.ndarray  # (nv,)
    normals: np.ndarray  # unit outward, (nv, 2)
    tangents: np.ndarray  # unit, start -> end

    @property
    def n_edges(self) -> int:
        return len(self.vertices)

    @property
    def perimeter(self) -> float:
        return float(self.edge_length.sum())


def polygon_geometry(xy: np.ndarray, cell: int = -1) -> ElementGeometry:
    xy = np.asarray(xy, dtype=float)
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    diff = xy[:, None, :] - xy[None, :, :]
    diameter = float(np.sqrt((diff**2).sum(-1)).max())
    start = xy
    end = np.roll(xy, -1, axis=0)
    vec = end - start
    length = np.hypot(vec[:, 0], vec[:, 1])
    tangents = vec / length[:, None]
    normals = np.column_stack([tangents[:, 1], -tangents[:, 0]])
    return ElementGeometry(
        cell=cell,
        vertices=xy,
        centroid=np.array([cx, cy]),
        diameter=diameter,
        area=float(area),
        edge_start=start,
        edge_end=end,
        edge_length=length,
        normals=normals,
        tangents=tangents,
    )


@dataclass
class Mesh:
    """Conforming polygonal mesh.

    ``edges`` holds each undirected edge once as ``(lo, hi)`` vertex indices;
    ``edge_cells`` lists the adjacent cells (second entry -1 on the boundary).
    ``cell_edges[c][i]`` is the global edge of local edge ``i`` of cell ``c``.
    """

    vertices: np.ndarray
    cells: list[np.ndarray]
    edges: np.ndarray = field(init=False)
    edge_cells: np.ndarray = field(init=False)
    cell_edges: list[np.ndarray] = field(init=False)
    boundary_edges: np.ndarray = field(init=False)
    boundary_vertices: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.cells = [np.asarray(c, dtype=int) for c in self.cells]
        self._validate_cells()
        self._build_topology()

    def _validate_cells(self):
        nv = len(self.vertices)
        for ci, cell in enumerate(self.cells):
            if len(cell) < 3:
                raise MeshError(f"cell {ci} has fewer than 3 vertices")
            if cell.min() < 0 or cell.max() >= nv:
                raise MeshError(f"cell {ci} references a missing vertex")
            if len(set(cell.tolist())) != len(cell):
                raise MeshError(f"cell {ci} repeats a vertex in its loop")
            if _signed_area(self.vertices[cell]) <= 0.0:
                raise MeshError(f"cell {ci} is not counter-clockwise")

    def _build_topology(self):
        index: dict[tuple[int, int], int] = {}
        edges: list[tuple[int, int]] = []
        owners: list[list[int]] = []
        cell_edges = []
        for ci, cell in enumerate(self.cells):
            loc = np.empty(len(cell), dtype=int)
            for i, a in enumerate(cell):
                b = cell[(i + 1) % len(cell)]
                key = (min(a, b), max(a, b))
                e = index.get(key)
                if e is None:
                    e = len(edges)
                    index[key] = e
                    edges.append(key)
                    owners.append([])
                owners[e].append(ci)
                loc[i] = e
            cell_edges.append(loc)
        edge_cells = np.full((len(edges), 2), -1, dtype=int)
        for e, own in enumerate(owners):
            if len(own) > 2:
                raise MeshError(f"edge {edges[e]} is shared by {len(own)} cells")
            edge_cells[e, : len(own)] = own
        self.edges = np.array(edges, dtype=int).reshape(-1, 2)
        self.edge_cells = edge_cells
        self.cell_edges = cell_edges
        self.boundary_edges = edge_cells[:, 1] < 0
        bv = np.zeros(len(self.vertices), dtype=bool)
        bv[self.edges[self.boundary_edges].ravel()] = True
        self.boundary_vertices = bv
        used = np.zeros(len(self.vertices), dtype=bool)
        for cell in self.cells:
            used[cell] = True
        if not used.all():
            raise MeshError("mesh contains vertices not used by any cell")

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def cell_areas(self) -> np.ndarray:
        return np.array([_signed_area(self.vertices[c]) for c in self.cells])

    def geometry(self, cell: int) -> ElementGeometry:
        return element_geometry(self, cell)

    def to_json(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "cells": [c.tolist() for c in self.cells],
        }


def element_geometry(mesh: Mesh, cell: int) -> ElementGeometry:
    if not 0 <= cell < mesh.n_cells:
        raise IndexError(f"cell index {cell} out of range")
    return polygon_geometry(mesh.vertices[mesh.cells[cell]], cell)


# --------------------------------------------------------------------- I/O


def load_mesh(path) -> Mesh:
    """Read a mesh from the JSON format ``{"vertices": [...], "cells": [...]}``.

    Edges and boundary flags are always rebuilt from the cell loops.
    """
    try:
        data = json.loads(Path(path).read_text())
        vertices = np.asarray(data["vertices"], dtype=float)
        cells = [list(map(int, c)) for c in data["cells"]]
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MeshError(f"cannot parse mesh file {path}: {exc}") from exc
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertices must be a list of [x, y] pairs")
    return Mesh(vertices, cells)


def save_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(json.dumps(mesh.to_json()))


# -------------------------------------------------------------- regularity


@dataclass
class RegularityReport:
    edge_ratio: np.ndarray  # shortest edge / diameter, per cell
    star_ratio: np.ndarray  # inscribed-ball radius of the kernel / diameter
    convex: np.ndarray
    alpha_e: float
    alpha_s: float

    @property
    def min_edge_ratio(self) -> float:
        return float(self.edge_ratio.min())

    @property
    def min_star_ratio(self) -> float:
        return float(self.star_ratio.min())

    @property
    def flagged(self) -> np.ndarray:
        bad = (self.edge_ratio < self.alpha_e) | (self.star_ratio < self.alpha_s)
        return np.flatnonzero(bad)

    @property
    def ok(self) -> bool:
        return len(self.flagged) == 0


def is_convex(xy: np.ndarray, tol: float = 1e-12) -> bool:
    d1 = np.roll(xy, -1, axis=0) - xy
    d2 = np.roll(d1, -1, axis=0)
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    return bool((cross >= -tol * np.abs(d1).max() ** 2).all())


def kernel_inradius(xy: np.ndarray) -> float:
    """Radius of the largest ball inside the polygon kernel (0 if empty).

    The kernel of a polygon is the intersection of the inner half-planes of
    its edge lines; a polygon is star-shaped with respect to any ball inside
    it. Solved as a Chebyshev-centre LP.
    """
    g = polygon_geometry(xy)
    n = g.normals
    b = (n * g.edge_start).sum(axis=1)
    a_ub = np.column_stack([n, np.ones(len(n))])
    res = linprog(
        c=[0.0, 0.0, -1.0],
        A_ub=a_ub,
        b_ub=b,
        bounds=[(None, None), (None, None), (0.0, None)],
        method="highs",
    )
    if not res.success:
        return 0.0
    return float(max(res.x[2], 0.0))


def check_regularity(mesh: Mesh, alpha_e: float = 0.0, alpha_s: float = 0.0) -> RegularityReport:
    er = np.empty(mesh.n_cells)
    sr = np.empty(mesh.n_cells)
    cv = np.empty(mesh.n_cells, dtype=bool)
    for c in range(mesh.n_cells):
        g = mesh.geometry(c)
        er[c] = g.edge_length.min() / g.diameter
        sr[c] = kernel_inradius(g.vertices) / g.diameter
        cv[c] = is_convex(g.vertices)
    rep = RegularityReport(er, sr, cv, alpha_e, alpha_s)
    if not rep.ok:
        logger.info("%d cells violate regularity thresholds", len(rep.flagged))
    return rep


def average_mesh_size(mesh: Mesh) -> float:
    return float(np.mean([mesh.geometry(c).diameter for c in range(mesh.n_cells)]))


# -------------------------------------------------------------- generators


def _merge_vertices(points: np.ndarray, cells: list[list[int]], tol: float):
    """Merge coincident points and drop resulting repeated loop entries."""
    key = np.round(points / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    new_pts = points[first]
    new_cells = []
    for cell in cells:
        loop = [int(inverse[i]) for i in cell]
        out = []
        for v in loop:
            if not out or out[-1] != v:
                out.append(v)
        while len(out) > 1 and out[0] == out[-1]:
            out.pop()
        new_cells.append(out)
    # renumber to drop unused points
    used = sorted({v for c in new_cells for v in c})
    remap = {v: i for i, v in enumerate(used)}
    return new_pts[used], [[remap[v] for v in c] for c in new_cells]


def structured_quads(nx: int, ny: int, x0=0.0, x1=1.0, y0=0.0, y1=1.0) -> Mesh:
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    cells = [
        [vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)]
        for j in range(ny)
        for i in range(nx)
    ]
    return Mesh(verts, cells)


def generate_remapped_square(n_per_side: int, amplitude: float = 0.1) -> Mesh:
    """Uniform n x n grid pushed through a smooth boundary-preserving map."""
    if n_per_side < 1:
        raise ValueError("n_per_side must be >= 1")
    base = structured_quads(n_per_side, n_per_side)
    x, y = base.vertices[:, 0], base.vertices[:, 1]
    bump = amplitude * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
    verts = np.column_stack([x + bump, y + bump])
    # keep the boundary exactly on the unit square
    for j in range(2):
        col = verts[:, j]
        on0 = np.isclose(base.vertices[:, j], 0.0)
        on1 = np.isclose(base.vertices[:, j], 1.0)
        col[on0] = 0.0
        col[on1] = 1.0
    return Mesh(verts, base.cells)


def generate_nonconvex(n_per_side: int, depth: float = 0.3) -> Mesh:
    """n x n tiling whose interior horizontal edges are bent downwards.

    The midpoint of every interior horizontal grid edge is moved down by
    ``depth`` times the tile size, so each tile below such an edge gets a
    re-entrant vertex (concave hexagon or pentagon) and each tile above it
    gets a matching bump.
    """
    n = int(n_per_side)
    if n < 1:
        raise ValueError("n_per_side must be >= 1")
    h = 1.0 / n
    verts: list[tuple[float, float]] = []

    def corner(i, j):
        return j * (n + 1) + i

    for j in range(n + 1):
        for i in range(n + 1):
            verts.append((i * h, j * h))
    mid = {}
    for j in range(1, n):
        for i in range(n):
            mid[(i, j)] = len(verts)
            verts.append(((i + 0.5) * h, j * h - depth * h))
    cells = []
    for j in range(n):
        for i in range(n):
            loop = [corner(i, j)]
            if j > 0:
                loop.append(mid[(i, j)])
            loop += [corner(i + 1, j), corner(i + 1, j + 1)]
            if j + 1 < n:
                loop.append(mid[(i, j + 1)])
            loop.append(corner(i, j + 1))
            cells.append(loop)
    return Mesh(np.array(verts), cells)


def generate_voronoi(n_cells: int, rng_seed: int = 0, lloyd_iters: int = 0) -> Mesh:
    """Voronoi tessellation of the unit square from seeded random points.

    Seeds are reflected across the four sides so that the Voronoi cells of the
    original seeds are exactly clipped to the square. ``lloyd_iters`` steps
    of Lloyd relaxation move each seed to its cell centroid.
    """
    if n_cells < 1:
        raise ValueError("n_cells must be >= 1")
    if n_cells == 1:
        return structured_quads(1, 1)
    rng = np.random.default_rng(rng_seed)
    pts = rng.random((n_cells, 2))
    for attempt in range(10):
        d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        if d.min() > 1e-8:
            break
        logger.warning("coincident Voronoi seeds; perturbing (attempt %d)", attempt + 1)
        pts = np.clip(pts + 1e-6 * rng.standard_normal(pts.shape), 1e-6, 1 - 1e-6)
    for _ in range(lloyd_iters):
        polys = _clipped_voronoi(pts)
        pts = np.array([polygon_geometry(p).centroid for p in polys])
    polys = _clipped_voronoi(pts)
    allpts = np.vstack(polys)
    cells, off = [], 0
    for p in polys:
        cells.append(list(range(off, off + len(p))))
        off += len(p)
    verts, cells = _merge_vertices(allpts, cells, 1e-10)
    verts = np.where(np.abs(verts) < 1e-12, 0.0, verts)
    verts = np.where(np.abs(verts - 1.0) < 1e-12, 1.0, verts)
    return Mesh(verts, cells)


def _clipped_voronoi(pts: np.ndarray) -> list[np.ndarray]:
    mirrored = [pts]
    for axis in range(2):
        for wall in (0.0, 1.0):
            m = pts.copy()
            m[:, axis] = 2 * wall - m[:, axis]
            mirrored.append(m)
    vor = Voronoi(np.vstack(mirrored))
    polys = []
    for i in range(len(pts)):
        region = vor.regions[vor.point_region[i]]
        xy = np.clip(vor.vertices[region], 0.0, 1.0)
        # order counter-clockwise around the seed
        ang = np.arctan2(xy[:, 1] - pts[i, 1], xy[:, 0] - pts[i, 0])
        xy = xy[np.argsort(ang)]
        keep = np.ones(len(xy), dtype=bool)
        for j in range(len(xy)):
            if np.linalg.norm(xy[j] - xy[j - 1]) < 1e-12:
                keep[j] = False
        polys.append(xy[keep])
    return polys


def generate_lshape_tri(level: int = 0) -> Mesh:
    """Uniform triangulation of [-0.5, 0.5]^2 minus [0, 0.5] x (-0.5, 0].

    Level 0 uses a 0.125 grid (96 triangles); each level halves the spacing
    (four times as many triangles).
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    m = 8 * 2**level
    h = 1.0 / m
    vid: dict[tuple[int, int], int] = {}
    verts = []
    cells = []

    def v(i, j):
        key = (i, j)
        if key not in vid:
            vid[key] = len(verts)
            verts.append((-0.5 + i * h, -0.5 + j * h))
        return vid[key]

    half = m // 2
    for j in range(m):
        for i in range(m):
            if i >= half and j < half:
                continue
            a, b, c, d = v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1)
            cells.append([a, b, c])
            cells.append([a, c, d])
    return Mesh(np.array(verts), cells)


def generate_cylinder_channel(
    n_theta: int = 48,
    n_radial: int = 12,
    length: float = 4.0,
    radius: float = 0.5,
    grading: float = 1.15,
) -> Mesh:
    """Quadrilateral O-grid of the square [0, L]^2 with a polygonal hole.

    The hole is a regular ``n_theta``-gon inscribed in the circle of the given
    radius centred at (L/2, L/2). Rings are blended between the polygon and
    the outer square with geometric grading towards the cylinder.
    """
    if n_theta % 4:
        raise ValueError("n_theta must be divisible by 4")
    c = length / 2
    theta = 2 * np.pi * np.arange(n_theta) / n_theta + np.pi / 4
    inner = np.column_stack([c + radius * np.cos(theta), c + radius * np.sin(theta)])
    # matching points on the square boundary, same count per side
    per = n_theta // 4
    s = np.linspace(-1.0, 1.0, per + 1)[:-1]
    sides = [
        np.column_stack([np.ones(per), s]),
        np.column_stack([-s, np.ones(per)]),
        np.column_stack([-np.ones(per), -s]),
        np.column_stack([s, -np.ones(per)]),
    ]
    outer_unit = np.vstack(sides)
    # rotate start so that the first outer point is the corner (1, 1)
    k0 = int(np.argmin(np.hypot(outer_unit[:, 0] - 1, outer_unit[:, 1] - 1)))
    outer_unit = np.roll(outer_unit, -k0, axis=0)
    outer = c + c * outer_unit
    w = grading ** np.arange(n_radial)
    t = np.concatenate([[0.0], np.cumsum(w)]) / w.sum()
    rings = [(1 - ti) * inner + ti * outer for ti in t]
    verts = np.vstack(rings)

    def vid(r, k):
        return r * n_theta + (k % n_theta)

    cells = []
    for r in range(n_radial):
        for k in range(n_theta):
            cells.append([vid(r, k), vid(r + 1, k), vid(r + 1, k + 1), vid(r, k + 1)])
    mesh_cells = []
    for cell in cells:
        if _signed_area(verts[cell]) < 0:
            cell = cell[::-1]
        mesh_cells.append(cell)
    return Mesh(verts, mesh_cells)


def generate(family: str, n: int, seed: int = 0, lloyd_iters: int = 0) -> Mesh:
    """Dispatch to a generator by family name.

    ``n`` is the cell count for ``voronoi``, the tiles per side for
    ``remapped``/``nonconvex`` and the refinement level for ``lshape``.
    """
    if family == "voronoi":
        return generate_voronoi(n, seed, lloyd_iters)
    if family == "remapped":
        return generate_remapped_square(n)
    if family == "nonconvex":
        return generate_nonconvex(n)
    if family == "lshape":
        return generate_lshape_tri(n)
    if family == "cylinder":
        return generate_cylinder_channel()
    raise ValueError(f"unknown mesh family {family!r}")


def family_sizes(family: str, cell_counts) -> list[int]:
    """Translate target cell counts into generator arguments."""
    if family == "voronoi":
        return list(cell_counts)
    if family in ("remapped", "nonconvex"):
        out = []
        for n in cell_counts:
            r = int(round(math.sqrt(n)))
            if r * r != n:
                raise ValueError(f"{family} meshes need square cell counts, got {n}")
            out.append(r)
        return out
    raise ValueError(f"no cell-count mapping for family {family!r}")
