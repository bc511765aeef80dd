"""Local enhanced divergence-free velocity element of order k >= 2.

Local DOF ordering (``VelocityDofLayout``):

* boundary nodes: vertex ``i`` is node ``i*k``; the interior Gauss-Lobatto
  nodes ``j = 0..k-2`` of edge ``i`` (local direction) are nodes ``i*k+1+j``.
  Node ``n``, component ``c`` is DOF ``2n + c``;
* interior moments ``(1/|E|)(v, h_j)`` against an orthonormal basis of the
  complement of gradients in ``[P_{k-2}]^2``;
* divergence moments ``(h_E/|E|)(div v, m_t)`` for ``m_t`` in ``M_{k-1}``
  without ``m_0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .mesh import ElementGeometry
from .polybasis import (
    MonomialBasis,
    Quadrature,
    dim_poly,
    dx_matrix,
    dy_matrix,
    edge_params,
    gperp_basis,
    grad_basis,
    gram_from_moments,
    monomial_moments,
    orthonormalize,
    polygon_quadrature,
    vector_mass,
)


def lagrange_matrix(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """L[q, j] = l_j(x_q) for the Lagrange basis on ``nodes``."""
    n = len(nodes)
    L = np.ones((len(x), n))
    for j in range(n):
        for m in range(n):
            if m != j:
                L[:, j] *= (x - nodes[m]) / (nodes[j] - nodes[m])
    return L


def velocity_ndof(n_edges: int, k: int) -> int:
    return 2 * n_edges * k + (k - 1) * (k - 2) // 2 + k * (k + 1) // 2 - 1


@dataclass(frozen=True)
class VelocityDofLayout:
    k: int
    n_edges: int

    @property
    def n_nodes(self) -> int:
        return self.n_edges * self.k

    @property
    def n_moment(self) -> int:
        return (self.k - 1) * (self.k - 2) // 2

    @property
    def n_div(self) -> int:
        return dim_poly(self.k - 1) - 1

    @property
    def moment_offset(self) -> int:
        return 2 * self.n_nodes

    @property
    def div_offset(self) -> int:
        return 2 * self.n_nodes + self.n_moment

    @property
    def ndof(self) -> int:
        return self.div_offset + self.n_div

    def node_of(self, edge: int, j: int) -> int:
        """Local node index of interior node j on local edge ``edge``."""
        return edge * self.k + 1 + j


class VelocityElement:
    """Projectors and local matrices of the velocity space on one cell."""

    def __init__(self, geom: ElementGeometry, k: int):
        if k < 2:
            raise ValueError("velocity order must be >= 2")
        self.geom = geom
        self.k = k
        self.layout = VelocityDofLayout(k, geom.n_edges)
        self.h = geom.diameter
        self.area = geom.area
        self.ndof = self.layout.ndof
        self.nk = dim_poly(k)
        self.nk1 = dim_poly(k - 1)
        self.nk2 = dim_poly(k - 2)
        self._moments = monomial_moments(geom, 2 * k + 2)
        self.H = gram_from_moments(self._moments, k)
        self.H1 = gram_from_moments(self._moments, k - 1)
        self.Hv = vector_mass(self.H)
        self._build_nodes()
        self._build_boundary()
        self._build_split()
        self.Pdiv = self._div_projector()
        self.Ylow = self._low_moments()
        self.Pnabla = self._pi_nabla()
        self.P0 = self._pi0()
        self.PG = self._pi0_grad()
        self.Dmat = self._dof_matrix()

    # -- geometry helpers ----------------------------------------------

    def _build_nodes(self):
        k, g = self.k, self.geom
        s, _ = edge_params("gauss_lobatto", k + 1)
        self.gl_params = s
        nodes = np.empty((self.layout.n_nodes, 2))
        for i in range(g.n_edges):
            a, b = g.edge_start[i], g.edge_end[i]
            nodes[i * k] = a
            for j in range(k - 1):
                nodes[i * k + 1 + j] = a + s[1 + j] * (b - a)
        self.nodes = nodes

    def _build_boundary(self):
        """Gauss points on every edge and trace matrices Tx, Ty so that the
        trace values there are Tx @ dofs and Ty @ dofs."""
        k, g = self.k, self.geom
        nq = k + 2
        t, w = edge_params("gauss", nq)
        L = lagrange_matrix(self.gl_params, t)
        ne = g.n_edges
        pts = np.empty((ne * nq, 2))
        wts = np.empty(ne * nq)
        nrm = np.empty((ne * nq, 2))
        Tx = np.zeros((ne * nq, self.ndof))
        Ty = np.zeros((ne * nq, self.ndof))
        for i in range(ne):
            sl = slice(i * nq, (i + 1) * nq)
            a, b = g.edge_start[i], g.edge_end[i]
            pts[sl] = a + t[:, None] * (b - a)
            wts[sl] = w * g.edge_length[i]
            nrm[sl] = g.normals[i]
            node_ids = [(i * k + j) % self.layout.n_nodes for j in range(k + 1)]
            for j, n in enumerate(node_ids):
                Tx[sl, 2 * n] += L[:, j]
                Ty[sl, 2 * n + 1] += L[:, j]
        self.bpts, self.bw, self.bn = pts, wts, nrm
        self.Tx, self.Ty = Tx, Ty
        self.Tn = nrm[:, :1] * Tx + nrm[:, 1:] * Ty
        self.bm = MonomialBasis.on(g, k + 1).eval(pts)  # boundary monomials up to k+1

    def _build_split(self):
        k = self.k
        Hlow = gram_from_moments(self._moments, k - 2)
        self.Hv_low = vector_mass(Hlow)
        split = gperp_basis(self.geom, k - 2, Hlow)
        self.hperp = split.perp  # (2 nk2, n_moment) in [M_{k-2}]^2
        self.grad_low = split.grad
        # complement of G_{k-2}^perp inside G_k^perp (enhancement directions)
        top = gperp_basis(self.geom, k, self.H).perp
        emb = self._embed_low()
        hk = emb @ self.hperp
        cross = hk.T @ self.Hv @ top
        if cross.size:
            _, sv, vt = np.linalg.svd(cross)
            null = vt[len(sv[sv > 1e-12 * max(1.0, sv.max())]):].T
            w2 = top @ null
        else:
            w2 = top
        self.w2 = orthonormalize(w2, self.Hv, self.area)

    def _embed_low(self) -> np.ndarray:
        """[M_{k-2}]^2 -> [M_k]^2 coefficient embedding."""
        E = np.zeros((2 * self.nk, 2 * self.nk2))
        for c in range(2):
            E[c * self.nk : c * self.nk + self.nk2, c * self.nk2 : (c + 1) * self.nk2] = np.eye(self.nk2)
        return E

    # -- projectors ----------------------------------------------------

    def _flux_moments(self, nmono: int) -> np.ndarray:
        """Rows t: boundary integral of (v.n) m_t for the first nmono monomials."""
        return (self.bm[:, :nmono] * self.bw[:, None]).T @ self.Tn

    def _div_projector(self) -> np.ndarray:
        lay = self.layout
        R = np.zeros((self.nk1, self.ndof))
        R[0] = self._flux_moments(1)[0]
        for t in range(1, self.nk1):
            R[t, lay.div_offset + t - 1] = self.area / self.h
        self.Bq = R
        return np.linalg.solve(self.H1, R)

    def _grad_moments(self, nmono: int, div_moments: np.ndarray) -> np.ndarray:
        """(v, grad m_t) for t = 1..nmono-1 by integration by parts."""
        return -div_moments[1:nmono] + self._flux_moments(nmono)[1:]

    def _low_moments(self) -> np.ndarray:
        """Moments of v against the component-blocked basis of [M_{k-2}]^2."""
        lay = self.layout
        ng = self.nk1  # gradients of M_{k-1} \ {m_0}
        divm = self.Bq  # (div v, m_t) for t < nk1
        F = np.zeros((2 * self.nk2, self.ndof))
        F[: ng - 1] = self._grad_moments(ng, divm)
        for j in range(lay.n_moment):
            F[ng - 1 + j, lay.moment_offset + j] = self.area
        Q = np.hstack([self.grad_low, self.hperp])
        return np.linalg.solve(Q.T, F)

    def _stiffness_gram(self) -> np.ndarray:
        dx, dy = dx_matrix(self.k, self.h), dy_matrix(self.k, self.h)
        G = dx.T @ self.H1 @ dx + dy.T @ self.H1 @ dy
        return vector_mass(G)

    def _pi_nabla(self) -> np.ndarray:
        k, nk, nk2 = self.k, self.nk, self.nk2
        Gv = self._stiffness_gram()
        self.Gv = Gv
        lap = (dx_matrix(k - 1, self.h) @ dx_matrix(k, self.h)
               + dy_matrix(k - 1, self.h) @ dy_matrix(k, self.h))  # (nk2, nk)
        Bm = np.zeros((2 * nk, self.ndof))
        bx, by = MonomialBasis.on(self.geom, k).grad(self.bpts)
        dn = bx * self.bn[:, :1] + by * self.bn[:, 1:]  # normal derivative of m_s
        for c, T in enumerate((self.Tx, self.Ty)):
            Yc = self.Ylow[c * nk2 : (c + 1) * nk2]
            Bm[c * nk : (c + 1) * nk] = -lap.T @ Yc + (dn * self.bw[:, None]).T @ T
        lhs = Gv.copy()
        perim = self.bw.sum()
        mb = self.bm[:, :nk]
        for c, T in enumerate((self.Tx, self.Ty)):
            r = c * nk
            lhs[r] = 0.0
            lhs[r, c * nk : (c + 1) * nk] = self.bw @ mb / perim
            Bm[r] = self.bw @ T / perim
        return np.linalg.solve(lhs, Bm)

    def _pi0(self) -> np.ndarray:
        k, nk = self.k, self.nk
        nk1p = dim_poly(k + 1)
        lay = self.layout
        Hmix = gram_from_moments(self._moments, k + 1, k - 1)  # (n_{k+1}, n_{k-1})
        divm = Hmix @ self.Pdiv
        Qg = grad_basis(k, self.h)
        Qh = self._embed_low() @ self.hperp
        Q = np.hstack([Qg, Qh, self.w2])
        F = np.zeros((2 * nk, self.ndof))
        F[: nk1p - 1] = self._grad_moments(nk1p, divm)
        r = nk1p - 1
        for j in range(lay.n_moment):
            F[r + j, lay.moment_offset + j] = self.area
        r += lay.n_moment
        F[r:] = self.w2.T @ self.Hv @ self.Pnabla
        Y = np.linalg.solve(Q.T, F)
        return np.linalg.solve(self.Hv, Y)

    def _pi0_grad(self) -> np.ndarray:
        """Coefficients of Pi0_{k-1} grad v; block (2c + d) holds d_d v_c."""
        k, nk1, nk2 = self.k, self.nk1, self.nk2
        D = (dx_matrix(k - 1, self.h), dy_matrix(k - 1, self.h))
        bmk1 = self.bm[:, :nk1]
        out = np.zeros((4 * nk1, self.ndof))
        for c, T in enumerate((self.Tx, self.Ty)):
            Yc = self.Ylow[c * nk2 : (c + 1) * nk2]
            for d in range(2):
                rhs = -D[d].T @ Yc + (bmk1 * (self.bw * self.bn[:, d])[:, None]).T @ T
                out[(2 * c + d) * nk1 : (2 * c + d + 1) * nk1] = np.linalg.solve(self.H1, rhs)
        return out

    def _dof_matrix(self) -> np.ndarray:
        """DOF values of the vector monomials m_s e_c (columns)."""
        k, nk = self.k, self.nk
        lay = self.layout
        D = np.zeros((self.ndof, 2 * nk))
        vals = MonomialBasis.on(self.geom, k).eval(self.nodes)
        for c in range(2):
            D[c : 2 * lay.n_nodes : 2, c * nk : (c + 1) * nk] = vals
        emb = self._embed_low()
        D[lay.moment_offset : lay.div_offset] = (self.Hv @ emb @ self.hperp).T / self.area
        dx, dy = dx_matrix(k, self.h), dy_matrix(k, self.h)
        divmap = np.hstack([dx, dy])  # (nk1, 2nk)
        D[lay.div_offset :] = (self.h / self.area) * (self.H1 @ divmap)[1:]
        return D

    # -- local forms ---------------------------------------------------

    @cached_property
    def stabilization_scale(self) -> float:
        cons = self.Pnabla.T @ self.Gv @ self.Pnabla
        return max(1.0, np.trace(cons) / self.ndof)

    def stiffness(self, nu: float = 1.0) -> np.ndarray:
        P = self.Pnabla
        cons = P.T @ self.Gv @ P
        R = np.eye(self.ndof) - self.Dmat @ P
        A = cons + self.stabilization_scale * R.T @ R
        return nu * 0.5 * (A + A.T)

    def values(self, pts: np.ndarray) -> np.ndarray:
        """Pi0 of every basis function at points: shape (npts, 2, ndof)."""
        m = MonomialBasis.on(self.geom, self.k).eval(pts)
        nk = self.nk
        return np.stack([m @ self.P0[:nk], m @ self.P0[nk:]], axis=1)

    def gradients(self, pts: np.ndarray) -> np.ndarray:
        """Pi0_{k-1} grad of every basis function: shape (npts, 2, 2, ndof),
        index [q, c, d, i] = d_d v_c."""
        m = MonomialBasis.on(self.geom, self.k - 1).eval(pts)
        n = self.nk1
        out = np.empty((len(pts), 2, 2, self.ndof))
        for c in range(2):
            for d in range(2):
                out[:, c, d] = m @ self.PG[(2 * c + d) * n : (2 * c + d + 1) * n]
        return out

    def load(self, f, quad: Quadrature | None = None) -> np.ndarray:
        if quad is None:
            quad = polygon_quadrature(self.geom, 2 * self.k + 2)
        U = self.values(quad.points)
        fv = np.asarray(f(quad.points), float).reshape(len(quad.weights), 2)
        return np.einsum("q,qc,qci->i", quad.weights, fv, U)

    def div_coeffs(self, dofs: np.ndarray) -> np.ndarray:
        return self.Pdiv @ dofs

    # -- interpolation -------------------------------------------------

    def interpolate(self, field, quad_degree: int | None = None) -> np.ndarray:
        """DOFs of a smooth vector field (callable on (n, 2) point arrays)."""
        k, g, lay = self.k, self.geom, self.layout
        deg = quad_degree or 2 * k + 6
        out = np.zeros(self.ndof)
        out[: 2 * lay.n_nodes] = np.asarray(field(self.nodes), float).reshape(-1)
        quad = polygon_quadrature(g, deg)
        fv = np.asarray(field(quad.points), float).reshape(-1, 2)
        mlow = MonomialBasis.on(g, k - 2).eval(quad.points)
        nk2 = self.nk2
        if lay.n_moment:
            hv = np.stack([mlow @ self.hperp[:nk2], mlow @ self.hperp[nk2:]], axis=1)
            out[lay.moment_offset : lay.div_offset] = (
                np.einsum("q,qc,qcj->j", quad.weights, fv, hv) / self.area
            )
        # (div v, m_t) = -(v, grad m_t) + boundary flux moment
        basis = MonomialBasis.on(g, k - 1)
        gx, gy = basis.grad(quad.points)
        vol = quad.weights @ (fv[:, :1] * gx + fv[:, 1:] * gy)
        nq = deg // 2 + 2
        t, w = edge_params("gauss", nq)
        flux = np.zeros(self.nk1)
        for i in range(g.n_edges):
            a, b = g.edge_start[i], g.edge_end[i]
            p = a + t[:, None] * (b - a)
            vn = np.asarray(field(p), float).reshape(-1, 2) @ g.normals[i]
            flux += (w * g.edge_length[i] * vn) @ basis.eval(p)
        out[lay.div_offset :] = (self.h / self.area) * (flux - vol)[1:]
        return out


def vel_interpolate(geom: ElementGeometry, k1: int, field) -> np.ndarray:
    return VelocityElement(geom, k1).interpolate(field)


def pi_nabla_matrix(geom: ElementGeometry, k1: int) -> np.ndarray:
    return VelocityElement(geom, k1).Pnabla


def pi0_matrix(geom: ElementGeometry, k1: int) -> np.ndarray:
    return VelocityElement(geom, k1).P0


def pi0_grad_matrix(geom: ElementGeometry, k1: int) -> np.ndarray:
    return VelocityElement(geom, k1).PG


def div_coeffs(geom: ElementGeometry, k1: int, dofs) -> np.ndarray:
    return VelocityElement(geom, k1).div_coeffs(np.asarray(dofs, float))


def local_stiffness(geom: ElementGeometry, k1: int, nu: float) -> np.ndarray:
    return VelocityElement(geom, k1).stiffness(nu)


def local_load_f(geom: ElementGeometry, k1: int, f) -> np.ndarray:
    return VelocityElement(geom, k1).load(f)


def local_trilinear(U: np.ndarray, G: np.ndarray, wq: np.ndarray, w_dofs: np.ndarray, mode: str = "oseen"):
    """Convection contributions from precomputed point values.

    ``U``: (nq, 2, n) values of Pi0 phi_i, ``G``: (nq, 2, 2, n) values of
    Pi0 grad phi_i, ``wq``: quadrature weights. Returns

    * ``oseen``: matrix C with C[i, j] = c(w; phi_j, phi_i),
    * ``stokes_rhs``: vector c(w; w, phi_i),
    * ``newton``: pair (C, N) with N[i, j] = c(phi_j; w, phi_i).
    """
    W = U @ w_dofs  # (nq, 2)
    T1 = np.einsum("q,qd,qcdj,qci->ij", wq, W, G, U, optimize=True)
    C = 0.5 * (T1 - T1.T)
    if mode == "oseen":
        return C
    if mode == "stokes_rhs":
        return C @ w_dofs
    if mode == "newton":
        Gw = G @ w_dofs  # (nq, 2, 2)
        # 1/2 (phi_j . grad w, phi_i) - 1/2 (phi_j . grad phi_i, w)
        N1 = np.einsum("q,qdj,qcd,qci->ij", wq, U, Gw, U, optimize=True)
        N2 = np.einsum("q,qdj,qcdi,qc->ij", wq, U, G, W, optimize=True)
        return C, 0.5 * (N1 - N2)
    raise ValueError(f"unknown trilinear mode {mode!r}")
