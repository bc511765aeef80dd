"""Scaled monomials, exact derivative maps, the gradient / complement split of
vector polynomials, and quadrature on polygons and edges."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.special import roots_jacobi

from .mesh import ElementGeometry

logger = logging.getLogger(__name__)


def dim_poly(k: int) -> int:
    """Dimension of P_k in two variables (0 for k < 0)."""
    return (k + 1) * (k + 2) // 2 if k >= 0 else 0


@lru_cache(maxsize=None)
def exponents(k: int) -> np.ndarray:
    """Multi-indices (a, b) ordered by total degree, then by b."""
    out = [(d - i, i) for d in range(k + 1) for i in range(d + 1)]
    return np.array(out, dtype=int).reshape(-1, 2)


def exp_index(a: int, b: int) -> int:
    d = a + b
    return d * (d + 1) // 2 + b


@dataclass(frozen=True)
class MonomialBasis:
    """m_s(x) = ((x - x_E) / h_E)^s for |s| <= k."""

    center: np.ndarray
    h: float
    k: int

    @classmethod
    def on(cls, geom: ElementGeometry, k: int) -> "MonomialBasis":
        return cls(np.asarray(geom.centroid, float), float(geom.diameter), int(k))

    @property
    def dim(self) -> int:
        return dim_poly(self.k)

    @property
    def exps(self) -> np.ndarray:
        return exponents(self.k)

    def scaled(self, pts) -> np.ndarray:
        return (np.atleast_2d(np.asarray(pts, float)) - self.center) / self.h

    def eval(self, pts) -> np.ndarray:
        """Values at points, shape (npts, dim)."""
        return eval_scaled(self.scaled(pts), self.k)

    def grad(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """x and y derivatives at points, each (npts, dim)."""
        xi = self.scaled(pts)
        v = eval_scaled(xi, max(self.k - 1, 0))
        e = self.exps
        gx = np.zeros((len(xi), self.dim))
        gy = np.zeros((len(xi), self.dim))
        for j, (a, b) in enumerate(e):
            if a > 0:
                gx[:, j] = a * v[:, exp_index(a - 1, b)] / self.h
            if b > 0:
                gy[:, j] = b * v[:, exp_index(a, b - 1)] / self.h
        return gx, gy


def eval_scaled(xi: np.ndarray, k: int) -> np.ndarray:
    """All monomials up to degree k at already-scaled points."""
    e = exponents(k)
    px = xi[:, :1] ** np.arange(k + 1)
    py = xi[:, 1:2] ** np.arange(k + 1)
    return px[:, e[:, 0]] * py[:, e[:, 1]]


def monomial_eval(basis: MonomialBasis, index, point) -> float:
    a, b = index
    if a + b > basis.k:
        raise ValueError("multi-index exceeds basis degree")
    xi = (np.asarray(point, float) - basis.center) / basis.h
    return float(xi[0] ** a * xi[1] ** b)


# ------------------------------------------------------------ derivatives


@lru_cache(maxsize=None)
def _dx_unit(k: int) -> np.ndarray:
    n0, n1 = dim_poly(k - 1), dim_poly(k)
    d = np.zeros((n0, n1))
    for j, (a, b) in enumerate(exponents(k)):
        if a > 0:
            d[exp_index(a - 1, b), j] = a
    return d


@lru_cache(maxsize=None)
def _dy_unit(k: int) -> np.ndarray:
    n0, n1 = dim_poly(k - 1), dim_poly(k)
    d = np.zeros((n0, n1))
    for j, (a, b) in enumerate(exponents(k)):
        if b > 0:
            d[exp_index(a, b - 1), j] = b
    return d


def embed(k_from: int, k_to: int) -> np.ndarray:
    """Inclusion M_{k_from} -> M_{k_to} (or truncation if k_to < k_from)."""
    out = np.zeros((dim_poly(k_to), dim_poly(k_from)))
    n = min(dim_poly(k_to), dim_poly(k_from))
    out[:n, :n] = np.eye(n)
    return out


@dataclass(frozen=True)
class DerivMaps:
    """Exact coefficient maps for scaled monomials of degree k.

    ``dx``, ``dy``: M_k -> M_{k-1}; ``lap``: M_k -> M_{k-2};
    ``div``, ``rot``: [M_k]^2 (component blocks) -> M_{k-1}.
    """

    k: int
    dx: np.ndarray
    dy: np.ndarray
    lap: np.ndarray
    div: np.ndarray
    rot: np.ndarray


def deriv_maps(basis: MonomialBasis) -> DerivMaps:
    k, h = basis.k, basis.h
    dx = _dx_unit(k) / h
    dy = _dy_unit(k) / h
    if k >= 1:
        lap = (_dx_unit(k - 1) @ _dx_unit(k) + _dy_unit(k - 1) @ _dy_unit(k)) / h**2
    else:
        lap = np.zeros((0, 1))
    div = np.hstack([dx, dy])
    rot = np.hstack([-dy, dx])
    return DerivMaps(k, dx, dy, lap, div, rot)


def dx_matrix(k: int, h: float) -> np.ndarray:
    return _dx_unit(k) / h


def dy_matrix(k: int, h: float) -> np.ndarray:
    return _dy_unit(k) / h


# ------------------------------------------------------------- quadrature


@dataclass(frozen=True)
class Quadrature:
    points: np.ndarray  # (n, 2) physical points, or (n,) parameters
    weights: np.ndarray
    degree: int

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.weights, values, axes=(0, 0))


@lru_cache(maxsize=None)
def _collapsed_ref(degree: int):
    """Collapsed Gauss-Jacobi rule on (u, v) in [0, 1]^2 for the Duffy map
    x = A + u (B - A) + u v (C - B), weight u du dv (reference area 1/2)."""
    n = max(1, math.ceil((degree + 1) / 2))
    tu, wu = roots_jacobi(n, 0.0, 1.0)
    u = (tu + 1) / 2
    wu = wu / 4
    tv, wv = npleg.leggauss(n)
    v = (tv + 1) / 2
    wv = wv / 2
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wu, wv)
    return U.ravel(), V.ravel(), W.ravel()


def _graded_u(degree: int, levels: int, ratio: float):
    """1D rule for weight u on [0, 1], geometrically graded towards u = 0.

    Gauss-Jacobi on the innermost layer and Gauss-Legendre on the others;
    every layer is polynomially exact, and the layers resolve integrands that
    are singular at u = 0.
    """
    n = max(2, math.ceil((degree + 2) / 2)) + 6
    t, w = npleg.leggauss(n)
    breaks = [0.0] + [ratio ** (levels - i) for i in range(levels)] + [1.0]
    us, ws = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        if a == 0.0:
            tj, wj = roots_jacobi(n, 0.0, 1.0)
            uu = a + (b - a) * (tj + 1) / 2
            us.append(uu)
            ws.append(wj * (b - a) ** 2 / 4)
        else:
            uu = a + (b - a) * (t + 1) / 2
            us.append(uu)
            ws.append(w * (b - a) / 2 * uu)
    return np.concatenate(us), np.concatenate(ws)


def triangle_quadrature(A, B, C, degree: int, graded_levels: int = 0, ratio: float = 0.2):
    """Points and weights on triangle ABC; the collapse (and grading) is at A."""
    A, B, C = (np.asarray(p, float) for p in (A, B, C))
    area = 0.5 * abs((B[0] - A[0]) * (C[1] - A[1]) - (B[1] - A[1]) * (C[0] - A[0]))
    if graded_levels > 0:
        u, wu = _graded_u(degree, graded_levels, ratio)
        nv = max(1, math.ceil((degree + 1) / 2)) + 8
        tv, wv = npleg.leggauss(nv)
        v, wv = (tv + 1) / 2, wv / 2
        U, V = np.meshgrid(u, v, indexing="ij")
        W = np.outer(wu, wv)
        U, V, W = U.ravel(), V.ravel(), W.ravel()
    else:
        U, V, W = _collapsed_ref(degree)
    pts = A + U[:, None] * (B - A) + (U * V)[:, None] * (C - B)
    return pts, 2.0 * area * W


def _tri_area(a, b, c) -> float:
    return 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def ear_clip(xy: np.ndarray) -> list[tuple[int, int, int]]:
    """Triangulate a simple counter-clockwise polygon by ear clipping."""
    idx = list(range(len(xy)))
    tris = []
    guard = 0
    while len(idx) > 3 and guard < 10 * len(xy) ** 2:
        guard += 1
        m = len(idx)
        for t in range(m):
            i0, i1, i2 = idx[t - 1], idx[t], idx[(t + 1) % m]
            a, b, c = xy[i0], xy[i1], xy[i2]
            if _tri_area(a, b, c) <= 1e-15 * max(1.0, np.abs(xy).max()) ** 2:
                continue
            inside = False
            for j in idx:
                if j in (i0, i1, i2):
                    continue
                p = xy[j]
                if (
                    _tri_area(a, b, p) >= 0
                    and _tri_area(b, c, p) >= 0
                    and _tri_area(c, a, p) >= 0
                ):
                    inside = True
                    break
            if not inside:
                tris.append((i0, i1, i2))
                idx.pop(t)
                break
        else:
            raise ValueError("ear clipping failed; polygon is not simple")
    tris.append(tuple(idx))
    return tris


def polygon_triangles(geom: ElementGeometry, apex=None) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Sub-triangles of the cell.

    Default: fan from the centroid. With ``apex`` given as a local vertex
    index, fan from that vertex (so the vertex is the collapse point of
    every sub-triangle touching it).
    """
    xy = geom.vertices
    n = len(xy)
    if apex is not None:
        tris = [(xy[apex], xy[(apex + i) % n], xy[(apex + i + 1) % n]) for i in range(1, n - 1)]
        if all(_tri_area(*t) > 0 for t in tris):
            return tris
        logger.info("vertex fan invalid on cell %d; using ear clipping", geom.cell)
    else:
        c = geom.centroid
        tris = [(c, xy[i], xy[(i + 1) % n]) for i in range(n)]
        scale = geom.diameter**2
        if all(_tri_area(*t) > 1e-14 * scale for t in tris):
            return tris
        logger.info("centroid fan invalid on cell %d; using ear clipping", geom.cell)
    return [(xy[i], xy[j], xy[k]) for i, j, k in ear_clip(xy)]


def polygon_quadrature(
    geom: ElementGeometry,
    degree: int,
    singular_vertex: int | None = None,
    graded_levels: int = 8,
) -> Quadrature:
    """Quadrature on a polygon exact for polynomials of the given degree.

    ``singular_vertex`` (local vertex index) switches to a vertex fan with
    geometric grading towards that vertex for integrands singular there.
    """
    if degree < 0:
        raise ValueError("degree must be >= 0")
    pts, wts = [], []
    if singular_vertex is None:
        for A, B, C in polygon_triangles(geom):
            p, w = triangle_quadrature(A, B, C, degree)
            pts.append(p)
            wts.append(w)
    else:
        s = geom.vertices[singular_vertex]
        for A, B, C in polygon_triangles(geom, apex=singular_vertex):
            if np.allclose(A, s):
                p, w = triangle_quadrature(A, B, C, degree, graded_levels)
            else:
                p, w = triangle_quadrature(A, B, C, degree)
            pts.append(p)
            wts.append(w)
    return Quadrature(np.vstack(pts), np.concatenate(wts), degree)


@lru_cache(maxsize=None)
def gauss_lobatto(n: int) -> tuple[np.ndarray, np.ndarray]:
    """n-point Gauss-Lobatto nodes and weights on [-1, 1]."""
    if n < 2:
        raise ValueError("Gauss-Lobatto needs at least 2 points")
    pn1 = npleg.Legendre.basis(n - 1)
    inner = np.sort(pn1.deriv().roots().real) if n > 2 else np.array([])
    x = np.concatenate([[-1.0], inner, [1.0]])
    w = 2.0 / (n * (n - 1) * pn1(x) ** 2)
    return x, w


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    return npleg.leggauss(n)


def edge_quadrature(start, end, kind: str = "gauss", npoints: int = 2) -> Quadrature:
    """Rule on the segment start -> end; ``points`` are physical 2D points.

    The reference parameters in [0, 1] are not stored; recover them with
    ``edge_params``.
    """
    if kind == "gauss":
        if npoints < 1:
            raise ValueError("need at least one Gauss point")
        t, w = gauss_legendre(npoints)
        deg = 2 * npoints - 1
    elif kind == "gauss_lobatto":
        t, w = gauss_lobatto(npoints)
        deg = 2 * npoints - 3
    else:
        raise ValueError(f"unknown edge rule {kind!r}")
    start = np.asarray(start, float)
    end = np.asarray(end, float)
    s = (t + 1) / 2
    length = float(np.hypot(*(end - start)))
    pts = start + s[:, None] * (end - start)
    return Quadrature(pts, w * length / 2, deg)


def edge_params(kind: str, npoints: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference parameters in [0, 1] and weights summing to 1."""
    t, w = gauss_lobatto(npoints) if kind == "gauss_lobatto" else gauss_legendre(npoints)
    return (t + 1) / 2, w / 2


# ------------------------------------------------------------ mass / split


def monomial_moments(geom: ElementGeometry, deg: int, quad: Quadrature | None = None) -> np.ndarray:
    """Integrals of all scaled monomials of degree <= deg over the cell."""
    if quad is None:
        quad = polygon_quadrature(geom, deg)
    basis = MonomialBasis.on(geom, deg)
    return quad.weights @ basis.eval(quad.points)


@lru_cache(maxsize=None)
def _product_index(k: int, l: int) -> np.ndarray:
    ek, el = exponents(k), exponents(l)
    s = ek[:, None, :] + el[None, :, :]
    d = s.sum(-1)
    return d * (d + 1) // 2 + s[..., 1]


def gram_from_moments(moments: np.ndarray, k: int, l: int | None = None) -> np.ndarray:
    """(m_i, m_j)_E for m_i in M_k, m_j in M_l from the moment vector."""
    l = k if l is None else l
    return moments[_product_index(k, l)]


def mass_matrix(geom: ElementGeometry, k: int) -> np.ndarray:
    return gram_from_moments(monomial_moments(geom, 2 * k), k)


@dataclass(frozen=True)
class GradientSplit:
    """Bases of G_k = grad P_{k+1} and its L2-orthogonal complement in [P_k]^2.

    Columns are coefficient vectors in [M_k]^2 (x-block then y-block). The
    complement basis satisfies (g_i, g_j)_E = |E| delta_ij.
    """

    k: int
    grad: np.ndarray
    perp: np.ndarray


def grad_basis(k: int, h: float) -> np.ndarray:
    """Coefficients of grad m_s, 1 <= |s| <= k+1, in [M_k]^2."""
    dx, dy = dx_matrix(k + 1, h), dy_matrix(k + 1, h)
    return np.vstack([dx[:, 1:], dy[:, 1:]])


def rotated_seeds(k: int) -> np.ndarray:
    """x^perp * m_t for m_t in M_{k-1} as coefficients in [M_k]^2."""
    n = dim_poly(k)
    e = exponents(k - 1) if k >= 1 else np.zeros((0, 2), int)
    out = np.zeros((2 * n, len(e)))
    for j, (a, b) in enumerate(e):
        out[exp_index(a, b + 1), j] = 1.0
        out[n + exp_index(a + 1, b), j] = -1.0
    return out


def vector_mass(H: np.ndarray) -> np.ndarray:
    n = H.shape[0]
    Hv = np.zeros((2 * n, 2 * n))
    Hv[:n, :n] = H
    Hv[n:, n:] = H
    return Hv


def gperp_basis(geom: ElementGeometry, k: int, H: np.ndarray | None = None) -> GradientSplit:
    if k < 0:
        raise ValueError("k must be >= 0")
    if H is None:
        H = mass_matrix(geom, k)
    G = grad_basis(k, geom.diameter)
    if k == 0:
        return GradientSplit(0, G, np.zeros((2, 0)))
    Hv = vector_mass(H)
    S = rotated_seeds(k)
    GtHG = G.T @ Hv @ G
    cond = np.linalg.cond(GtHG)
    if not np.isfinite(cond) or cond > 1e14:
        raise np.linalg.LinAlgError(f"gradient Gram matrix is singular (cond {cond:.2e})")
    P = S - G @ np.linalg.solve(GtHG, G.T @ Hv @ S)
    return GradientSplit(k, G, orthonormalize(P, Hv, geom.area))


def orthonormalize(P: np.ndarray, Hv: np.ndarray, area: float) -> np.ndarray:
    """Columns of P made orthonormal for (1/area)(.,.)_E."""
    M = P.T @ Hv @ P / area
    L = np.linalg.cholesky(0.5 * (M + M.T))
    return np.linalg.solve(L, P.T).T


def graded_edge_params(npoints: int, levels: int = 20, ratio: float = 0.3):
    """Gauss rule on [0, 1] refined geometrically towards t = 0.

    For edge integrands with an integrable singularity at the start point.
    """
    t, w = gauss_legendre(npoints)
    breaks = [0.0] + [ratio ** (levels - i) for i in range(levels)] + [1.0]
    ts, ws = [], []
    for a, b in zip(breaks[:-1], breaks[1:]):
        ts.append(a + (b - a) * (t + 1) / 2)
        ws.append(w * (b - a) / 2)
    return np.concatenate(ts), np.concatenate(ws)
