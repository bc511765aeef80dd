"""Global DOF numbering, assembly of the coupled saddle-point system, boundary
conditions, the sparse direct solve and the nonlinear iteration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .hdiv_space import HdivElement, edge_legendre, reversal_signs
from .mesh import Mesh
from .polybasis import dim_poly, edge_params, graded_edge_params, polygon_quadrature
from .velocity_space import VelocityElement

logger = logging.getLogger(__name__)

SCHEMES = ("stokes", "oseen", "newton")


class LinearSolveError(RuntimeError):
    pass


class NonlinearSolveError(RuntimeError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


class FluxError(ValueError):
    """Dirichlet velocity data with a nonzero net boundary flux."""


@dataclass(frozen=True)
class MethodOrder:
    k1: int = 2
    k2: int = 1

    def __post_init__(self):
        if self.k1 < 2:
            raise ValueError(f"velocity order k1 must be >= 2 (got {self.k1})")
        if self.k2 < 1:
            raise ValueError(f"current order k2 must be >= 1 (got {self.k2})")


@dataclass
class ProblemParameters:
    """Physics and data.

    ``B3`` is the out-of-plane applied field (constant or callable on points).
    ``u_trace`` gives Dirichlet velocity data (None: homogeneous) and
    ``J_boundary`` a field whose normal moments are imposed on boundary edges
    (None: J.n = 0). ``convection=False`` drops the trilinear term.
    ``singular_point`` marks a vertex where loads are singular; cells touching
    it get graded quadrature.
    """

    nu: float = 1.0
    Sc: float = 1.0
    B3: float | Callable = 1.0
    f: Callable | None = None
    g: Callable | None = None
    u_trace: Callable | None = None
    J_boundary: Callable | None = None
    convection: bool = True
    singular_point: tuple[float, float] | None = None

    def b3_at(self, pts: np.ndarray) -> np.ndarray:
        if callable(self.B3):
            return np.asarray(self.B3(pts), float).reshape(len(pts))
        return np.full(len(pts), float(self.B3))


# ------------------------------------------------------------------ DOFs


@dataclass
class DofMap:
    """Global numbering of the four unknowns plus two mean multipliers."""

    k1: int
    k2: int
    n_u: int
    n_p: int
    n_J: int
    n_phi: int
    vel: list[np.ndarray]
    pres: list[np.ndarray]
    cur: list[np.ndarray]
    cur_sign: list[np.ndarray]
    pot: list[np.ndarray]
    vel_node_xy: np.ndarray  # coordinates of the shared velocity nodes
    vel_boundary: np.ndarray  # bool mask over velocity DOFs
    cur_boundary: np.ndarray  # bool mask over current DOFs
    n_vel_nodes: int = 0

    @property
    def off_p(self) -> int:
        return self.n_u

    @property
    def off_J(self) -> int:
        return self.n_u + self.n_p

    @property
    def off_phi(self) -> int:
        return self.n_u + self.n_p + self.n_J

    @property
    def off_lam(self) -> int:
        return self.off_phi + self.n_phi

    @property
    def size(self) -> int:
        return self.off_lam + 2


def build_dof_map(mesh: Mesh, k1: int, k2: int) -> DofMap:
    nv, ne = mesh.n_vertices, mesh.n_edges
    s, _ = edge_params("gauss_lobatto", k1 + 1)
    n_nodes = nv + ne * (k1 - 1)
    xy = np.empty((n_nodes, 2))
    xy[:nv] = mesh.vertices
    for e, (lo, hi) in enumerate(mesh.edges):
        a, b = mesh.vertices[lo], mesh.vertices[hi]
        for j in range(k1 - 1):
            xy[nv + e * (k1 - 1) + j] = a + s[1 + j] * (b - a)
    node_bnd = np.zeros(n_nodes, dtype=bool)
    node_bnd[:nv] = mesh.boundary_vertices
    for e in np.flatnonzero(mesh.boundary_edges):
        node_bnd[nv + e * (k1 - 1) : nv + (e + 1) * (k1 - 1)] = True

    n_int_v = (k1 - 1) * (k1 - 2) // 2 + dim_poly(k1 - 1) - 1
    n_int_J = dim_poly(k2) - 1 + k2 * (k2 + 1) // 2
    vel, cur, sgn = [], [], []
    off_v = 2 * n_nodes
    off_j = ne * (k2 + 1)
    rev = reversal_signs(k2)
    for c, cell in enumerate(mesh.cells):
        ce = mesh.cell_edges[c]
        nl = len(cell)
        nodes = np.empty(nl * k1, dtype=int)
        jd = np.empty(nl * (k2 + 1), dtype=int)
        js = np.ones(nl * (k2 + 1))
        for i in range(nl):
            e = ce[i]
            forward = cell[i] == mesh.edges[e, 0]
            nodes[i * k1] = cell[i]
            for j in range(k1 - 1):
                jg = j if forward else k1 - 2 - j
                nodes[i * k1 + 1 + j] = nv + e * (k1 - 1) + jg
            jd[i * (k2 + 1) : (i + 1) * (k2 + 1)] = e * (k2 + 1) + np.arange(k2 + 1)
            if not forward:
                js[i * (k2 + 1) : (i + 1) * (k2 + 1)] = rev
        vdofs = np.empty(2 * len(nodes) + n_int_v, dtype=int)
        vdofs[0 : 2 * len(nodes) : 2] = 2 * nodes
        vdofs[1 : 2 * len(nodes) : 2] = 2 * nodes + 1
        vdofs[2 * len(nodes) :] = off_v + np.arange(n_int_v)
        off_v += n_int_v
        vel.append(vdofs)
        cur.append(np.concatenate([jd, off_j + np.arange(n_int_J)]))
        sgn.append(np.concatenate([js, np.ones(n_int_J)]))
        off_j += n_int_J
    n_u, n_J = off_v, off_j
    np1, np2 = dim_poly(k1 - 1), dim_poly(k2)
    pres = [c * np1 + np.arange(np1) for c in range(mesh.n_cells)]
    pot = [c * np2 + np.arange(np2) for c in range(mesh.n_cells)]
    vb = np.zeros(n_u, dtype=bool)
    vb[: 2 * n_nodes] = np.repeat(node_bnd, 2)
    jb = np.zeros(n_J, dtype=bool)
    for e in np.flatnonzero(mesh.boundary_edges):
        jb[e * (k2 + 1) : (e + 1) * (k2 + 1)] = True
    return DofMap(
        k1, k2, n_u, mesh.n_cells * np1, n_J, mesh.n_cells * np2,
        vel, pres, cur, sgn, pot, xy, vb, jb, n_nodes,
    )


# ------------------------------------------------------------- assembly


@dataclass
class _Group:
    """Cells sharing local sizes, stacked for batched convection assembly."""

    cells: np.ndarray
    idx: np.ndarray  # (nc, n) global velocity indices
    wq: np.ndarray  # (nc, nq)
    U: np.ndarray  # (nc, nq, 2, n)
    G: np.ndarray  # (nc, nq, 2, 2, n)


@dataclass
class GlobalSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    fixed: np.ndarray  # bool mask over all unknowns
    fixed_values: np.ndarray
    dofmap: DofMap


@dataclass
class SolutionState:
    u: np.ndarray
    p: np.ndarray
    J: np.ndarray
    phi: np.ndarray
    multipliers: np.ndarray
    dofmap: DofMap
    iterations: int = 0
    history: list[float] = field(default_factory=list)
    residual: float = 0.0
    converged: bool = True

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.u, self.p, self.J, self.phi, self.multipliers])


def _coo(rows, cols, vals, shape):
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape)


class Discretization:
    """Per-cell elements, static global blocks and load vectors."""

    def __init__(self, mesh: Mesh, params: ProblemParameters, orders: MethodOrder):
        self.mesh = mesh
        self.params = params
        self.orders = orders
        k1, k2 = orders.k1, orders.k2
        self.dofmap = dm = build_dof_map(mesh, k1, k2)
        self.vel_el: list[VelocityElement] = []
        self.cur_el: list[HdivElement] = []
        deg = max(3 * k1 - 1, 2 * k1 + 2, 2 * k2 + 2, k1 + k2)
        if callable(params.B3):
            deg += 2
        self.quad_degree = deg
        N = dm.size
        rows, cols, vals = [], [], []
        Mrows, Mcols, Mvals = [], [], []
        F = np.zeros(N)
        wp = np.zeros(dm.n_p)
        wphi = np.zeros(dm.n_phi)
        groups: dict[tuple[int, int], list] = {}
        self.div_u_blocks = []

        def add(r, c, M):
            rows.append(np.repeat(r, len(c)))
            cols.append(np.tile(c, len(r)))
            vals.append(np.asarray(M).ravel())

        for ci in range(mesh.n_cells):
            geom = mesh.geometry(ci)
            ve = VelocityElement(geom, k1)
            he = HdivElement(geom, k2)
            self.vel_el.append(ve)
            self.cur_el.append(he)
            iu = dm.vel[ci]
            ip = dm.off_p + dm.pres[ci]
            iJ = dm.off_J + dm.cur[ci]
            sJ = dm.cur_sign[ci]
            iphi = dm.off_phi + dm.pot[ci]
            quad = self._cell_quadrature(geom)
            U = ve.values(quad.points)
            UK = he.values(quad.points) * sJ  # orientation applied
            A = ve.stiffness(params.nu)
            Bq = ve.Bq
            AK = params.Sc * (sJ[:, None] * he.mass(1.0) * sJ[None, :])
            Bpsi = params.Sc * he.divmom * sJ[None, :]
            b3 = params.b3_at(quad.points)
            wb = quad.weights * b3 * params.Sc
            # d(K, v) = Sc (B3 (K2 v1 - K1 v2))
            D = np.einsum("q,qi,qj->ij", wb, U[:, 0], UK[:, 1]) - np.einsum(
                "q,qi,qj->ij", wb, U[:, 1], UK[:, 0]
            )
            add(iu, iu, A)
            add(iu, ip, -Bq.T)
            add(ip, iu, -Bq)
            add(iu, iJ, -D)
            add(iJ, iu, D.T)
            add(iJ, iJ, AK)
            add(iJ, iphi, -Bpsi.T)
            add(iphi, iJ, -Bpsi)
            M0 = ve.P0.T @ ve.Hv @ ve.P0
            Mrows.append(np.repeat(iu, len(iu)))
            Mcols.append(np.tile(iu, len(iu)))
            Mvals.append(M0.ravel())
            if params.f is not None:
                fv = np.asarray(params.f(quad.points), float).reshape(-1, 2)
                F[iu] += np.einsum("q,qc,qci->i", quad.weights, fv, U)
            if params.g is not None:
                gv = np.asarray(params.g(quad.points), float).reshape(-1, 2)
                F[iJ] += params.Sc * np.einsum("q,qc,qci->i", quad.weights, gv, UK)
            wp[dm.pres[ci]] = ve._moments[: dim_poly(k1 - 1)]
            wphi[dm.pot[ci]] = he._moments[: dim_poly(k2)]
            if params.convection:
                key = (ve.ndof, len(quad.weights))
                groups.setdefault(key, []).append((ci, iu, quad.weights, U, ve.gradients(quad.points)))

        lam_p, lam_phi = dm.off_lam, dm.off_lam + 1
        ip_all = dm.off_p + np.arange(dm.n_p)
        iphi_all = dm.off_phi + np.arange(dm.n_phi)
        for r_idx, lam, w in ((ip_all, lam_p, wp), (iphi_all, lam_phi, wphi)):
            rows += [r_idx, np.full(len(r_idx), lam)]
            cols += [np.full(len(r_idx), lam), r_idx]
            vals += [w, w]
        self.static = _coo(rows, cols, vals, (N, N)).tocsr()
        self.load = F
        self.w_p, self.w_phi = wp, wphi
        self.vel_mass = _coo(Mrows, Mcols, Mvals, (dm.n_u, dm.n_u)).tocsr()
        self.groups = [
            _Group(
                np.array([g[0] for g in gl]),
                np.stack([g[1] for g in gl]),
                np.stack([g[2] for g in gl]),
                np.stack([g[3] for g in gl]),
                np.stack([g[4] for g in gl]),
            )
            for gl in groups.values()
        ]
        self.fixed, self.fixed_values = self._boundary_values()

    def _cell_quadrature(self, geom):
        sp_ = self.params.singular_point
        if sp_ is not None:
            d = np.hypot(*(geom.vertices - np.asarray(sp_)).T)
            i = int(np.argmin(d))
            if d[i] < 1e-12 * geom.diameter:
                return polygon_quadrature(geom, self.quad_degree, singular_vertex=i, graded_levels=12)
        return polygon_quadrature(geom, self.quad_degree)

    # -- boundary data --------------------------------------------------

    def _boundary_values(self):
        dm, mesh, params = self.dofmap, self.mesh, self.params
        k2 = self.orders.k2
        fixed = np.zeros(dm.size, dtype=bool)
        vals = np.zeros(dm.size)
        fixed[: dm.n_u] = dm.vel_boundary
        if params.u_trace is not None:
            nodes = np.flatnonzero(dm.vel_boundary[0::2][: dm.n_vel_nodes])
            tr = np.asarray(params.u_trace(dm.vel_node_xy[nodes]), float).reshape(-1, 2)
            vals[2 * nodes] = tr[:, 0]
            vals[2 * nodes + 1] = tr[:, 1]
        jmask = np.zeros(dm.size, dtype=bool)
        jmask[dm.off_J : dm.off_J + dm.n_J] = dm.cur_boundary
        fixed |= jmask
        if params.J_boundary is not None:
            for e in np.flatnonzero(mesh.boundary_edges):
                mom = boundary_normal_moments(
                    mesh, e, k2, params.J_boundary, params.singular_point
                )
                vals[dm.off_J + e * (k2 + 1) : dm.off_J + (e + 1) * (k2 + 1)] = mom
        return fixed, vals

    def boundary_flux(self, npoints: int = 8) -> tuple[float, float]:
        """Net flux and total absolute flux of the Dirichlet velocity data."""
        mesh, tr = self.mesh, self.params.u_trace
        if tr is None:
            return 0.0, 0.0
        net, tot = 0.0, 0.0
        for e in np.flatnonzero(mesh.boundary_edges):
            c = mesh.edge_cells[e, 0]
            geom = mesh.geometry(c)
            i = int(np.flatnonzero(mesh.cell_edges[c] == e)[0])
            t, w = _edge_rule(mesh, e, npoints, self.params.singular_point, geom.edge_start[i])
            a, b = geom.edge_start[i], geom.edge_end[i]
            pts = _edge_points(a, b, t)
            un = np.asarray(tr(pts), float).reshape(-1, 2) @ geom.normals[i]
            net += geom.edge_length[i] * (w @ un)
            tot += geom.edge_length[i] * (w @ np.abs(un))
        return net, tot

    # -- convection ------------------------------------------------------

    def convection(self, w: np.ndarray, mode: str):
        """Global convection matrices at the frozen velocity ``w``.

        Returns (C, N) where N is the Newton derivative block (None unless
        ``mode == 'newton'``)."""
        n = self.dofmap.n_u
        Cr, Cc, Cv, Nv = [], [], [], []
        for g in self.groups:
            wl = w[g.idx]  # (nc, n)
            W = np.einsum("eqci,ei->eqc", g.U, wl)
            conv = np.einsum("eqd,eqcdj->eqcj", W, g.G)  # (w.grad) phi_j
            T1 = np.einsum("eq,eqci,eqcj->eij", g.wq, g.U, conv)
            C = 0.5 * (T1 - T1.transpose(0, 2, 1))
            nc, nd = g.idx.shape
            Cr.append(np.repeat(g.idx, nd, axis=1).ravel())
            Cc.append(np.tile(g.idx, (1, nd)).ravel())
            Cv.append(C.ravel())
            if mode == "newton":
                Gw = np.einsum("eqcdi,ei->eqcd", g.G, wl)
                N1 = np.einsum("eq,eqdj,eqcd,eqci->eij", g.wq, g.U, Gw, g.U, optimize=True)
                N2 = np.einsum("eq,eqdj,eqcdi,eqc->eij", g.wq, g.U, g.G, W, optimize=True)
                Nv.append((0.5 * (N1 - N2)).ravel())
        if not Cr:
            return sp.csr_matrix((n, n)), (sp.csr_matrix((n, n)) if mode == "newton" else None)
        rows, cols = np.concatenate(Cr), np.concatenate(Cc)
        C = sp.coo_matrix((np.concatenate(Cv), (rows, cols)), shape=(n, n)).tocsr()
        N = None
        if mode == "newton":
            N = sp.coo_matrix((np.concatenate(Nv), (rows, cols)), shape=(n, n)).tocsr()
        return C, N

    def velocity_l2(self, v: np.ndarray) -> float:
        """L2 norm of the cellwise Pi0 projection of a velocity DOF vector."""
        return float(np.sqrt(max(v @ (self.vel_mass @ v), 0.0)))


def _edge_rule(mesh, e, npoints, singular_point, start):
    """Parameters/weights on [0, 1] for edge ``e`` traversed from ``start``;
    graded towards an endpoint that coincides with ``singular_point``."""
    if singular_point is not None:
        lo, hi = mesh.edges[e]
        a, b = mesh.vertices[lo], mesh.vertices[hi]
        end = b if np.allclose(start, a) else a
        s = np.asarray(singular_point, float)
        scale = np.hypot(*(b - a))
        if np.hypot(*(start - s)) < 1e-12 * scale:
            return graded_edge_params(npoints)
        if np.hypot(*(end - s)) < 1e-12 * scale:
            t, w = graded_edge_params(npoints)
            return 1.0 - t, w
    return edge_params("gauss", npoints)


def _edge_points(a, b, t):
    # measured from the nearer endpoint so graded points never round onto it
    t = t[:, None]
    return np.where(t <= 0.5, a + t * (b - a), b - (1.0 - t) * (b - a))


def boundary_normal_moments(mesh: Mesh, e: int, k2: int, field, singular_point=None, npoints: int = 10):
    """Globally oriented normal moments of ``field`` on edge ``e``."""
    lo, hi = mesh.edges[e]
    a, b = mesh.vertices[lo], mesh.vertices[hi]
    t, w = _edge_rule(mesh, e, npoints, singular_point, a)
    tang = (b - a) / np.hypot(*(b - a))
    n = np.array([tang[1], -tang[0]])
    pts = _edge_points(a, b, t)
    kn = np.asarray(field(pts), float).reshape(-1, 2) @ n
    return (w * kn) @ edge_legendre(k2, t)


def assemble(
    mesh: Mesh,
    params: ProblemParameters,
    orders: MethodOrder,
    w_state: SolutionState | None = None,
    mode: str = "oseen",
    disc: Discretization | None = None,
) -> GlobalSystem:
    """Assemble the linearized system around ``w_state`` (None: no convection)."""
    if mode not in SCHEMES:
        raise ValueError(f"unknown scheme {mode!r}")
    if disc is None:
        disc = Discretization(mesh, params, orders)
    dm = disc.dofmap
    K = disc.static
    rhs = disc.load.copy()
    if w_state is not None and params.convection:
        w = w_state.u
        if len(w) != dm.n_u:
            raise ValueError("state dimension does not match the DOF map")
        C, N = disc.convection(w, mode)
        if mode == "stokes":
            rhs[: dm.n_u] -= C @ w
        else:
            blk = C if mode == "oseen" else C + N
            if mode == "newton":
                rhs[: dm.n_u] += N @ w
            pad = sp.csr_matrix((dm.size - dm.n_u, dm.size - dm.n_u))
            K = K + sp.block_diag([blk, pad], format="csr")
    return GlobalSystem(K.tocsr(), rhs, disc.fixed, disc.fixed_values, dm)


def apply_dirichlet_velocity(disc: Discretization, trace=None, rel_tol: float = 1e-4) -> Discretization:
    """Set the velocity Dirichlet data (and check its net flux)."""
    if trace is not None:
        disc.params.u_trace = trace
        disc.fixed, disc.fixed_values = disc._boundary_values()
    net, tot = disc.boundary_flux()
    if abs(net) > rel_tol * max(tot, 1e-300) and abs(net) > 1e-14:
        raise FluxError(f"Dirichlet velocity has net boundary flux {net:.3e} (total {tot:.3e})")
    return disc


def linear_solve(system: GlobalSystem, tol: float = 1e-11, refine: int = 3) -> SolutionState:
    """Reduce the fixed DOFs and factorize the rest with SuperLU.

    The two mean-value constraint rows are dense and roughly double the LU
    fill.  Constant pressures and potentials lie in the kernel of every other
    free row, so the factorization drops those two rows, pins one
    coefficient of each field instead, and afterwards shifts both fields to
    zero mean.  The result is the solution of the bordered system.
    """
    K, b = system.matrix.tocsr(), system.rhs
    dm = system.dofmap
    fixed, xfix = system.fixed, system.fixed_values
    free = ~fixed
    lam = np.array([dm.off_lam, dm.off_lam + 1])
    pins = np.array([dm.off_p, dm.off_phi])
    rows = free.copy()
    rows[lam] = False
    cols = free.copy()
    cols[pins] = False
    Kr = K[rows][:, cols].tocsc()
    br = b[rows] - K[rows][:, fixed] @ xfix[fixed]
    try:
        lu = splu(Kr)
    except RuntimeError as exc:
        raise LinearSolveError(f"sparse factorization failed: {exc}") from exc
    x = lu.solve(br)
    nb = max(np.linalg.norm(br), 1e-300)
    # Refinement is always applied once: it restores the single-entry
    # divergence rows to componentwise round-off, which the normwise
    # residual alone does not guarantee.
    for i in range(max(refine, 1)):
        x_new = x + lu.solve(br - Kr @ x)
        res_new = np.linalg.norm(br - Kr @ x_new) / nb
        if i > 0 and res_new >= res:
            break
        x, res = x_new, res_new
    full = np.where(fixed, xfix, 0.0)
    full[cols] = x
    for lo, hi, nloc, ll in (
        (dm.off_p, dm.off_J, dm.n_p // max(len(dm.pres), 1), dm.off_lam),
        (dm.off_phi, dm.off_lam, dm.n_phi // max(len(dm.pot), 1), dm.off_lam + 1),
    ):
        ones = np.zeros(dm.size)
        ones[lo:hi:nloc] = 1.0
        wrow = K[ll].toarray().ravel()
        full -= (wrow @ full) / (wrow @ ones) * ones
    bf = b[free] - K[free][:, fixed] @ xfix[fixed]
    res = np.linalg.norm(bf - K[free][:, free] @ full[free]) / max(np.linalg.norm(bf), 1e-300)
    if not np.isfinite(res) or res > tol:
        raise LinearSolveError(f"relative residual {res:.3e} exceeds {tol:.1e}")
    return SolutionState(
        u=full[: dm.n_u],
        p=full[dm.off_p : dm.off_J],
        J=full[dm.off_J : dm.off_phi],
        phi=full[dm.off_phi : dm.off_lam],
        multipliers=full[dm.off_lam :],
        dofmap=dm,
        residual=float(res),
    )


def nonlinear_solve(
    mesh: Mesh,
    params: ProblemParameters,
    orders: MethodOrder,
    scheme: str = "oseen",
    tol: float = 1e-6,
    max_iters: int = 50,
    disc: Discretization | None = None,
) -> SolutionState:
    """Fixed-point iteration from the convection-free solution.

    Stops when the L2 norm of Pi0 of the velocity update is below ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if disc is None:
        disc = Discretization(mesh, params, orders)
    state = linear_solve(assemble(mesh, params, orders, None, scheme, disc))
    history: list[float] = []
    for it in range(1, max_iters + 1):
        new = linear_solve(assemble(mesh, params, orders, state, scheme, disc))
        step = disc.velocity_l2(new.u - state.u)
        history.append(step)
        logger.debug("%s iteration %d: step %.3e", scheme, it, step)
        state = new
        if step <= tol:
            state.iterations = it
            state.history = history
            return state
    raise NonlinearSolveError(
        f"{scheme} iteration did not converge in {max_iters} steps (last step {history[-1]:.3e})",
        history,
    )
