"""Shared fixtures for the element and system tests: random cells and
random polynomial fields in plain (unscaled) monomials."""

import numpy as np

from imhd_vem import mesh as M
from imhd_vem.polybasis import exponents


def random_cells(count, seed=0):
    """Cells drawn from every mesh family (geometries)."""
    meshes = [
        M.generate_voronoi(40, 3),
        M.generate_remapped_square(5),
        M.generate_nonconvex(4),
        M.generate_lshape_tri(0),
        M.generate_voronoi(12, 7, 2),
    ]
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        m = meshes[i % len(meshes)]
        out.append(m.geometry(int(rng.integers(m.n_cells))))
    return out


class Poly:
    """Scalar polynomial sum c_ab x^a y^b with analytic derivatives."""

    def __init__(self, coeffs, k):
        self.k = k
        self.c = np.asarray(coeffs, float)
        self.exps = exponents(k)

    @classmethod
    def random(cls, k, rng):
        return cls(rng.standard_normal(len(exponents(k))), k)

    def __call__(self, x):
        x = np.atleast_2d(x)
        return sum(c * x[:, 0] ** a * x[:, 1] ** b for c, (a, b) in zip(self.c, self.exps))

    def dx(self, x):
        x = np.atleast_2d(x)
        return sum(c * a * x[:, 0] ** max(a - 1, 0) * x[:, 1] ** b for c, (a, b) in zip(self.c, self.exps))

    def dy(self, x):
        x = np.atleast_2d(x)
        return sum(c * b * x[:, 0] ** a * x[:, 1] ** max(b - 1, 0) for c, (a, b) in zip(self.c, self.exps))


class VecPoly:
    def __init__(self, p1, p2):
        self.p = (p1, p2)

    @classmethod
    def random(cls, k, rng):
        return cls(Poly.random(k, rng), Poly.random(k, rng))

    def __call__(self, x):
        return np.column_stack([self.p[0](x), self.p[1](x)])

    def grad(self, x):
        """(n, 2, 2) with [q, c, d] = d_d u_c."""
        return np.stack([np.column_stack([p.dx(x), p.dy(x)]) for p in self.p], axis=1)

    def div(self, x):
        return self.p[0].dx(x) + self.p[1].dy(x)


def dense_quadrature(geom, degree):
    """Independent oracle rule: scipy-free tensor Gauss on a fan of triangles
    with apex at the first vertex (valid for star-shaped cells w.r.t. it)
    falling back to the library rule for nonconvex cells."""
    from imhd_vem.polybasis import polygon_quadrature

    xy = geom.vertices
    d = xy[1:] - xy[0]
    cross = d[:-1, 0] * d[1:, 1] - d[:-1, 1] * d[1:, 0]
    if (cross <= 0).any():
        return polygon_quadrature(geom, degree)
    n = degree // 2 + 2
    t, w = np.polynomial.legendre.leggauss(n)
    s = (t + 1) / 2
    w = w / 2
    pts, wts = [], []
    for i in range(1, len(xy) - 1):
        a, b, c = xy[0], xy[i], xy[i + 1]
        area = 0.5 * abs((b - a)[0] * (c - a)[1] - (b - a)[1] * (c - a)[0])
        # collapsed square (u, v) -> a + u (b - a) + u v (c - b)
        U, V = np.meshgrid(s, s, indexing="ij")
        W = np.outer(w, w) * U * 2 * area
        P = a + U.ravel()[:, None] * (b - a) + (U * V).ravel()[:, None] * (c - b)
        pts.append(P)
        wts.append(W.ravel())
    from imhd_vem.polybasis import Quadrature

    return Quadrature(np.vstack(pts), np.concatenate(wts), degree)
