"""Local H(div) current-density element of order k >= 1.

Local DOF ordering (``HdivDofLayout``):

* edge ``i`` (local orientation, outward normal): ``k + 1`` moments
  ``(1/h_e) int_e K.n Lhat_j ds`` against orthonormal Legendre polynomials
  ``Lhat_j`` on the unit parameter interval, so ``K.n = sum_j dof_j Lhat_j``;
* gradient moments ``(h_E/|E|)(K, grad m_s)`` for ``1 <= |s| <= k``;
* complement moments ``(1/|E|)(K, g_j)`` against an orthonormal basis of the
  L2 complement of gradients in ``[P_k]^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as npleg

from .mesh import ElementGeometry
from .polybasis import (
    MonomialBasis,
    Quadrature,
    dim_poly,
    edge_params,
    gperp_basis,
    gram_from_moments,
    monomial_moments,
    polygon_quadrature,
    vector_mass,
)


def hdiv_ndof(n_edges: int, k: int) -> int:
    return n_edges * (k + 1) + dim_poly(k) - 1 + k * (k + 1) // 2


def edge_legendre(k: int, t: np.ndarray) -> np.ndarray:
    """Orthonormal Legendre values on [0, 1]: shape (len(t), k + 1)."""
    V = npleg.legvander(2 * np.asarray(t) - 1, k)
    return V * np.sqrt(2 * np.arange(k + 1) + 1)


def reversal_signs(k: int) -> np.ndarray:
    """Factor mapping globally oriented edge moments to a reversed local edge."""
    return np.array([(-1.0) ** (j + 1) for j in range(k + 1)])


@dataclass(frozen=True)
class HdivDofLayout:
    k: int
    n_edges: int

    @property
    def n_edge_dofs(self) -> int:
        return self.n_edges * (self.k + 1)

    @property
    def n_grad(self) -> int:
        return dim_poly(self.k) - 1

    @property
    def n_perp(self) -> int:
        return self.k * (self.k + 1) // 2

    @property
    def grad_offset(self) -> int:
        return self.n_edge_dofs

    @property
    def perp_offset(self) -> int:
        return self.n_edge_dofs + self.n_grad

    @property
    def ndof(self) -> int:
        return self.perp_offset + self.n_perp


class HdivElement:
    """Projector, divergence and local matrices of the current space."""

    def __init__(self, geom: ElementGeometry, k: int):
        if k < 1:
            raise ValueError("current order must be >= 1")
        self.geom = geom
        self.k = k
        self.layout = HdivDofLayout(k, geom.n_edges)
        self.ndof = self.layout.ndof
        self.h = geom.diameter
        self.area = geom.area
        self.nk = dim_poly(k)
        self._moments = monomial_moments(geom, 2 * k + 2)
        self.H = gram_from_moments(self._moments, k)
        self.Hv = vector_mass(self.H)
        split = gperp_basis(geom, k, self.H)
        self.grad = split.grad  # (2nk, n_{k+1}-1)
        self.perp = split.perp
        self._build_boundary()
        self.Pdiv = self._div_projector()
        self.P0 = self._pi0()
        self.Dmat = self._dof_matrix()

    def _build_boundary(self):
        k, g = self.k, self.geom
        nq = k + 2
        t, w = edge_params("gauss", nq)
        Lh = edge_legendre(k, t)
        ne = g.n_edges
        pts = np.empty((ne * nq, 2))
        wts = np.empty(ne * nq)
        Tn = np.zeros((ne * nq, self.ndof))
        for i in range(ne):
            sl = slice(i * nq, (i + 1) * nq)
            a, b = g.edge_start[i], g.edge_end[i]
            pts[sl] = a + t[:, None] * (b - a)
            wts[sl] = w * g.edge_length[i]
            Tn[sl, i * (k + 1) : (i + 1) * (k + 1)] = Lh
        self.bpts, self.bw, self.Tn = pts, wts, Tn
        self.edge_t, self.edge_w, self.edge_L = t, w, Lh
        self.bm = MonomialBasis.on(g, k + 1).eval(pts)

    def _flux_moments(self, nmono: int) -> np.ndarray:
        return (self.bm[:, :nmono] * self.bw[:, None]).T @ self.Tn

    def _div_projector(self) -> np.ndarray:
        lay = self.layout
        R = self._flux_moments(self.nk)
        for s in range(1, self.nk):
            R[s, lay.grad_offset + s - 1] -= self.area / self.h
        self.divmom = R  # (div K, m_s) for m_s in M_k
        return np.linalg.solve(self.H, R)

    def _pi0(self) -> np.ndarray:
        lay = self.layout
        nk1p = dim_poly(self.k + 1)
        F = np.zeros((2 * self.nk, self.ndof))
        for s in range(1, self.nk):
            F[s - 1, lay.grad_offset + s - 1] = self.area / self.h
        Hmix = gram_from_moments(self._moments, self.k + 1, self.k)
        divm = Hmix @ self.Pdiv
        flux = self._flux_moments(nk1p)
        F[self.nk - 1 : nk1p - 1] = (-divm + flux)[self.nk :]
        for j in range(lay.n_perp):
            F[nk1p - 1 + j, lay.perp_offset + j] = self.area
        Q = np.hstack([self.grad, self.perp])
        Y = np.linalg.solve(Q.T, F)
        return np.linalg.solve(self.Hv, Y)

    def _dof_matrix(self) -> np.ndarray:
        k, nk, g = self.k, self.nk, self.geom
        lay = self.layout
        D = np.zeros((self.ndof, 2 * nk))
        nq = len(self.edge_t)
        basis = MonomialBasis.on(g, k)
        for i in range(g.n_edges):
            m = basis.eval(self.bpts[i * nq : (i + 1) * nq])
            wl = self.edge_L * self.edge_w[:, None]  # (nq, k+1)
            for c in range(2):
                D[i * (k + 1) : (i + 1) * (k + 1), c * nk : (c + 1) * nk] = g.normals[i, c] * wl.T @ m
        HG = self.Hv @ self.grad[:, : lay.n_grad]
        D[lay.grad_offset : lay.perp_offset] = (self.h / self.area) * HG.T
        D[lay.perp_offset :] = (self.Hv @ self.perp).T / self.area
        return D

    def mass(self, Sc: float = 1.0) -> np.ndarray:
        P = self.P0
        R = np.eye(self.ndof) - self.Dmat @ P
        A = P.T @ self.Hv @ P + self.area * R.T @ R
        return Sc * 0.5 * (A + A.T)

    def bpsi(self, Sc: float = 1.0) -> np.ndarray:
        return Sc * self.divmom

    def values(self, pts: np.ndarray) -> np.ndarray:
        m = MonomialBasis.on(self.geom, self.k).eval(pts)
        nk = self.nk
        return np.stack([m @ self.P0[:nk], m @ self.P0[nk:]], axis=1)

    def load(self, gfun, Sc: float = 1.0, quad: Quadrature | None = None) -> np.ndarray:
        if quad is None:
            quad = polygon_quadrature(self.geom, 2 * self.k + 2)
        U = self.values(quad.points)
        gv = np.asarray(gfun(quad.points), float).reshape(-1, 2)
        return Sc * np.einsum("q,qc,qci->i", quad.weights, gv, U)

    def div_coeffs(self, dofs: np.ndarray) -> np.ndarray:
        return self.Pdiv @ dofs

    def interpolate(self, field, quad_degree: int | None = None) -> np.ndarray:
        k, g, lay = self.k, self.geom, self.layout
        deg = quad_degree or 2 * k + 6
        out = np.zeros(self.ndof)
        t, w = edge_params("gauss", deg // 2 + 2)
        Lh = edge_legendre(k, t)
        for i in range(g.n_edges):
            a, b = g.edge_start[i], g.edge_end[i]
            p = a + t[:, None] * (b - a)
            kn = np.asarray(field(p), float).reshape(-1, 2) @ g.normals[i]
            out[i * (k + 1) : (i + 1) * (k + 1)] = (w * kn) @ Lh
        quad = polygon_quadrature(g, deg)
        fv = np.asarray(field(quad.points), float).reshape(-1, 2)
        m = MonomialBasis.on(g, k).eval(quad.points)
        mom = np.concatenate([quad.weights @ (fv[:, :1] * m), quad.weights @ (fv[:, 1:] * m)])
        out[lay.grad_offset : lay.perp_offset] = (self.h / self.area) * (
            self.grad[:, : lay.n_grad].T @ mom
        )
        out[lay.perp_offset :] = self.perp.T @ mom / self.area
        return out


def hdiv_interpolate(geom: ElementGeometry, k2: int, field) -> np.ndarray:
    return HdivElement(geom, k2).interpolate(field)


def div_coeffs_hdiv(geom: ElementGeometry, k2: int, dofs) -> np.ndarray:
    return HdivElement(geom, k2).div_coeffs(np.asarray(dofs, float))


def pi0_k2_matrix(geom: ElementGeometry, k2: int) -> np.ndarray:
    return HdivElement(geom, k2).P0


def local_mass(geom: ElementGeometry, k2: int, Sc: float) -> np.ndarray:
    return HdivElement(geom, k2).mass(Sc)


def local_bpsi(geom: ElementGeometry, k2: int, Sc: float) -> np.ndarray:
    return HdivElement(geom, k2).bpsi(Sc)


def local_load_g(geom: ElementGeometry, k2: int, Sc: float, g) -> np.ndarray:
    return HdivElement(geom, k2).load(g, Sc)
