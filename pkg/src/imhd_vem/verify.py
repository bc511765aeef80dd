"""Manufactured solutions, computable error norms, convergence studies,
conservation tables and the channel-with-cylinder demo."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from . import mesh as meshmod
from .mesh import Mesh
from .polybasis import MonomialBasis, dim_poly, polygon_quadrature
from .system import (
    Discretization,
    MethodOrder,
    NonlinearSolveError,
    LinearSolveError,
    ProblemParameters,
    SolutionState,
    apply_dirichlet_velocity,
    nonlinear_solve,
)

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    "family", "N_t", "h", "err_u_H1", "rate_u", "err_p_L2", "rate_p",
    "err_J_L2", "rate_J", "err_phi_L2", "rate_phi", "div_u", "div_J", "iters",
]


# ------------------------------------------------------------- problems


def _zeros2(pts):
    return np.zeros((len(pts), 2))


def _zeros1(pts):
    return np.zeros(len(pts))


def _zeros22(pts):
    return np.zeros((len(pts), 2, 2))


@dataclass
class ManufacturedProblem:
    """Exact fields with the derivatives needed for loads and error norms.

    ``grad_u`` returns shape (n, 2, 2) with [q, c, d] = d_d u_c.
    """

    name: str
    u: Callable
    grad_u: Callable
    lap_u: Callable | None
    p: Callable
    grad_p: Callable
    J: Callable
    phi: Callable
    grad_phi: Callable
    nu: float = 1.0
    Sc: float = 1.0
    B3: float = 1.0
    singular_point: tuple[float, float] | None = None
    parameters: dict = field(default_factory=dict)
    stokes_identity: bool = False  # -lap u = -grad p (so lap u is not coded)

    def f(self, pts, convection: bool = True):
        pts = np.atleast_2d(pts)
        u, G = self.u(pts), self.grad_u(pts)
        conv = np.einsum("qd,qcd->qc", u, G) if convection else 0.0
        gp = self.grad_p(pts)
        if self.stokes_identity:
            visc = -gp  # -lap u = -grad p
        else:
            visc = -self.lap_u(pts)
        J = self.J(pts)
        jxb = self.B3 * np.column_stack([J[:, 1], -J[:, 0]])
        return self.nu * visc + conv + gp - self.Sc * jxb

    def g(self, pts):
        pts = np.atleast_2d(pts)
        u = self.u(pts)
        uxb = self.B3 * np.column_stack([u[:, 1], -u[:, 0]])
        return self.J(pts) + self.grad_phi(pts) - uxb

    def parameters_for_solver(self, convection: bool = True) -> ProblemParameters:
        return ProblemParameters(
            nu=self.nu, Sc=self.Sc, B3=self.B3,
            f=self.f if convection else (lambda pts: self.f(pts, convection=False)), g=self.g,
            u_trace=self.u, J_boundary=self.J, convection=convection,
            singular_point=self.singular_point,
        )


def smooth_problem(nu=1.0, Sc=1.0, B3=1.0) -> ManufacturedProblem:
    pi = np.pi

    def u(p):
        x, y = p[:, 0], p[:, 1]
        return np.column_stack([
            -0.5 * np.cos(x) ** 2 * np.cos(y) * np.sin(y),
            0.5 * np.cos(y) ** 2 * np.cos(x) * np.sin(x),
        ])

    def grad_u(p):
        x, y = p[:, 0], p[:, 1]
        cx, sx, cy, sy = np.cos(x), np.sin(x), np.cos(y), np.sin(y)
        G = np.empty((len(p), 2, 2))
        G[:, 0, 0] = cx * sx * cy * sy
        G[:, 0, 1] = -0.5 * cx**2 * (cy**2 - sy**2)
        G[:, 1, 0] = 0.5 * cy**2 * (cx**2 - sx**2)
        G[:, 1, 1] = -cy * sy * cx * sx
        return G

    def lap_u(p):
        x, y = p[:, 0], p[:, 1]
        cx, sx, cy, sy = np.cos(x), np.sin(x), np.cos(y), np.sin(y)
        # u1 = -1/4 cos^2 x sin 2y; d2/dx2 cos^2 x = -2 cos 2x
        l1 = -0.25 * (-2 * np.cos(2 * x)) * np.sin(2 * y) - 0.25 * cx**2 * (-4 * np.sin(2 * y))
        l2 = 0.25 * (-2 * np.cos(2 * y)) * np.sin(2 * x) + 0.25 * cy**2 * (-4 * np.sin(2 * x))
        return np.column_stack([l1, l2])

    def p(q):
        return np.sin(2 * pi * q[:, 0]) * np.sin(2 * pi * q[:, 1])

    def grad_p(q):
        x, y = q[:, 0], q[:, 1]
        return 2 * pi * np.column_stack([
            np.cos(2 * pi * x) * np.sin(2 * pi * y),
            np.sin(2 * pi * x) * np.cos(2 * pi * y),
        ])

    def J(q):
        x, y = q[:, 0], q[:, 1]
        return np.column_stack([
            np.sin(pi * x) * np.cos(pi * y),
            -np.sin(pi * y) * np.cos(pi * x),
        ])

    def phi(q):
        return np.sin(q[:, 0]) - np.sin(q[:, 1])

    def grad_phi(q):
        return np.column_stack([np.cos(q[:, 0]), -np.cos(q[:, 1])])

    return ManufacturedProblem("smooth", u, grad_u, lap_u, p, grad_p, J, phi, grad_phi, nu, Sc, B3)


def robustness_problem(s1: float = 0.0, s2: float = 1.0, nu=1.0, Sc=1.0, B3=1.0) -> ManufacturedProblem:
    """Zero velocity and current with polynomial pressure and potential."""

    def p(q):
        x = q[:, 0]
        return s1 * (x**3 + 2 * x**2 - 11.0 / 12.0)

    def grad_p(q):
        x = q[:, 0]
        return np.column_stack([s1 * (3 * x**2 + 4 * x), np.zeros_like(x)])

    def phi(q):
        x = q[:, 0]
        return s2 * (x**2 + x - 5.0 / 6.0)

    def grad_phi(q):
        x = q[:, 0]
        return np.column_stack([s2 * (2 * x + 1), np.zeros_like(x)])

    return ManufacturedProblem(
        "robustness", _zeros2, _zeros22, _zeros2, p, grad_p, _zeros2, phi, grad_phi,
        nu, Sc, B3, parameters={"s1": s1, "s2": s2},
    )


def lshape_exponent(mu: float = 1.5 * np.pi) -> float:
    """Smallest positive root of sin(e mu) + e sin(mu) = 0."""
    fun = lambda e: np.sin(e * mu) + e * np.sin(mu)
    # bracket the first sign change after 0
    grid = np.linspace(1e-3, 1.0, 2000)
    vals = fun(grid)
    i = int(np.flatnonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0])
    return brentq(fun, grid[i], grid[i + 1], xtol=1e-15, rtol=1e-15)


def lshape_problem(nu=1.0, Sc=1.0, B3=1.0) -> ManufacturedProblem:
    """Corner-singular Stokes velocity/pressure plus a harmonic-gradient current
    on the L-shaped domain with the re-entrant corner at the origin."""
    mu = 1.5 * np.pi
    eps = lshape_exponent(mu)
    a, b = 1 + eps, 1 - eps
    A, C = np.cos(eps * mu) / a, np.cos(eps * mu) / b

    def theta_d(t, n):
        """n-th derivative of the angular profile."""
        s = n * np.pi / 2
        return (
            A * a**n * np.sin(a * t + s) - a**n * np.cos(a * t + s)
            - C * b**n * np.sin(b * t + s) + b**n * np.cos(b * t + s)
        )

    def polar(q):
        x, y = q[:, 0], q[:, 1]
        r = np.hypot(x, y)
        t = np.mod(np.arctan2(y, x), 2 * np.pi)
        return r, t

    def profiles(t):
        T0, T1, T2 = theta_d(t, 0), theta_d(t, 1), theta_d(t, 2)
        ct, st = np.cos(t), np.sin(t)
        U1 = a * st * T0 + ct * T1
        U2 = -a * ct * T0 + st * T1
        dU1 = a * ct * T0 + eps * st * T1 + ct * T2
        dU2 = a * st * T0 - eps * ct * T1 + st * T2
        return U1, U2, dU1, dU2

    def u(q):
        r, t = polar(q)
        U1, U2, _, _ = profiles(t)
        return np.column_stack([r**eps * U1, r**eps * U2])

    def grad_u(q):
        r, t = polar(q)
        U1, U2, dU1, dU2 = profiles(t)
        ct, st = np.cos(t), np.sin(t)
        re = r ** (eps - 1)
        G = np.empty((len(q), 2, 2))
        for c, (U, dU) in enumerate(((U1, dU1), (U2, dU2))):
            G[:, c, 0] = re * (eps * ct * U - st * dU)
            G[:, c, 1] = re * (eps * st * U + ct * dU)
        return G

    def pressure_profile(t):
        P = -(a**2 * theta_d(t, 1) + theta_d(t, 3)) / b
        dP = -(a**2 * theta_d(t, 2) + theta_d(t, 4)) / b
        return P, dP

    def p(q):
        r, t = polar(q)
        return r ** (eps - 1) * pressure_profile(t)[0]

    def grad_p(q):
        r, t = polar(q)
        P, dP = pressure_profile(t)
        ct, st = np.cos(t), np.sin(t)
        re = r ** (eps - 2)
        return np.column_stack([
            re * ((eps - 1) * ct * P - st * dP),
            re * ((eps - 1) * st * P + ct * dP),
        ])

    def J(q):
        r, t = polar(q)
        rr = 3 * np.cbrt(r)
        return np.column_stack([-2 * np.sin(t / 3) / rr, 2 * np.cos(t / 3) / rr])

    return ManufacturedProblem(
        "lshape", u, grad_u, None, p, grad_p, J, _zeros1, _zeros2, nu, Sc, B3,
        singular_point=(0.0, 0.0), parameters={"eps": eps}, stokes_identity=True,
    )


def polynomial_problem(k1: int, k2: int, seed: int = 0, nu=1.0, Sc=1.0, B3=1.0) -> ManufacturedProblem:
    """Random divergence-free polynomial u (degree k1), J (degree k2) with
    polynomial p (degree k1-1) and phi (degree k2), for patch tests."""
    rng = np.random.default_rng(seed)
    cs = rng.standard_normal(dim_poly(k1 + 1))  # stream function for u
    cx = rng.standard_normal(dim_poly(k2 + 1))  # stream function for J
    cp = rng.standard_normal(dim_poly(k1 - 1))
    cf = rng.standard_normal(dim_poly(k2))
    basis_cache = {}

    def mb(k):
        if k not in basis_cache:
            basis_cache[k] = MonomialBasis(np.zeros(2), 1.0, k)
        return basis_cache[k]

    from .polybasis import dx_matrix, dy_matrix

    def curl_coeffs(c, k):
        # (d_y s, -d_x s) for s of degree k
        return dy_matrix(k, 1.0) @ c, -(dx_matrix(k, 1.0) @ c)

    u1c, u2c = curl_coeffs(cs, k1 + 1)
    J1c, J2c = curl_coeffs(cx, k2 + 1)

    def vec(c1, c2, k):
        return lambda q: np.column_stack([mb(k).eval(q) @ c1, mb(k).eval(q) @ c2])

    def grad_of(c, k):
        return dx_matrix(k, 1.0) @ c, dy_matrix(k, 1.0) @ c

    def lap_of(c, k):
        return dx_matrix(k - 1, 1.0) @ dx_matrix(k, 1.0) @ c + dy_matrix(k - 1, 1.0) @ dy_matrix(k, 1.0) @ c

    u = vec(u1c, u2c, k1)

    def grad_u(q):
        G = np.empty((len(q), 2, 2))
        m = mb(k1 - 1).eval(q)
        for c, uc in enumerate((u1c, u2c)):
            gx, gy = grad_of(uc, k1)
            G[:, c, 0] = m @ gx
            G[:, c, 1] = m @ gy
        return G

    def lap_u(q):
        m = mb(max(k1 - 2, 0)).eval(q)
        return np.column_stack([m @ lap_of(u1c, k1), m @ lap_of(u2c, k1)])

    def p(q):
        return mb(k1 - 1).eval(q) @ cp

    def grad_p(q):
        gx, gy = grad_of(cp, k1 - 1)
        m = mb(max(k1 - 2, 0)).eval(q)
        return np.column_stack([m @ gx, m @ gy])

    J = vec(J1c, J2c, k2)

    def phi(q):
        return mb(k2).eval(q) @ cf

    def grad_phi(q):
        gx, gy = grad_of(cf, k2)
        m = mb(max(k2 - 1, 0)).eval(q)
        return np.column_stack([m @ gx, m @ gy])

    return ManufacturedProblem(
        "polynomial", u, grad_u, lap_u, p, grad_p, J, phi, grad_phi, nu, Sc, B3,
        parameters={"k1": k1, "k2": k2, "seed": seed},
    )


def builtin_problem(name: str, **kw) -> ManufacturedProblem:
    if name == "smooth":
        return smooth_problem(**kw)
    if name == "robustness":
        return robustness_problem(**kw)
    if name == "lshape":
        return lshape_problem(**kw)
    raise ValueError(f"unknown problem {name!r}")


# -------------------------------------------------- residual invariants


def _fd_grad(fun, pts, h):
    """Fourth-order central differences of a field; returns (n, ..., 2)."""
    out = []
    h = np.broadcast_to(np.asarray(h, float), (len(pts),))
    hh = h.reshape((-1,) + (1,) * (np.ndim(fun(pts[:1])) - 1))
    for d in range(2):
        e = np.zeros((len(pts), 2))
        e[:, d] = h
        val = (-fun(pts + 2 * e) + 8 * fun(pts + e) - 8 * fun(pts - e) + fun(pts - 2 * e)) / (12 * hh)
        out.append(val)
    return np.stack(out, axis=-1)


def _fd_lap(fun, pts, h):
    total = 0.0
    h = np.broadcast_to(np.asarray(h, float), (len(pts),))
    hh = h.reshape((-1,) + (1,) * (np.ndim(fun(pts[:1])) - 1))
    for d in range(2):
        e = np.zeros((len(pts), 2))
        e[:, d] = h
        total = total + (
            -fun(pts + 2 * e) + 16 * fun(pts + e) - 30 * fun(pts) + 16 * fun(pts - e) - fun(pts - 2 * e)
        ) / (12 * hh**2)
    return total


def sample_points(problem: ManufacturedProblem, n: int = 1000, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if problem.name == "lshape":
        pts = []
        while len(pts) < n:
            q = rng.uniform(-0.5, 0.5, size=(4 * n, 2))
            keep = ~((q[:, 0] > 0) & (q[:, 1] < 0)) & (np.hypot(q[:, 0], q[:, 1]) > 0.05)
            # stay clear of the cut in the angle coordinate
            keep &= ~((q[:, 0] > 0) & (np.abs(q[:, 1]) < 0.01))
            pts.extend(q[keep])
        return np.array(pts[:n])
    return rng.uniform(0.02, 0.98, size=(n, 2))


def manufactured_residual(problem: ManufacturedProblem, n: int = 1000, seed: int = 0, h: float = 1e-3) -> dict:
    """Relative residuals of the PDEs with finite-difference derivatives of
    the exact fields, compared with the analytic loads."""
    pts = sample_points(problem, n, seed)
    if problem.singular_point is not None:
        # shrink the step near the singularity, where derivatives blow up
        r = np.hypot(*(pts - np.asarray(problem.singular_point)).T)
        h = np.minimum(h, 0.005 * r)
    nu, Sc, B3 = problem.nu, problem.Sc, problem.B3
    u = problem.u(pts)
    gu = _fd_grad(problem.u, pts, h)  # (n, 2, 2) [q, c, d]
    lap = _fd_lap(problem.u, pts, h)
    gp = _fd_grad(problem.p, pts, h)
    gphi = _fd_grad(problem.phi, pts, h)
    J = problem.J(pts)
    conv = np.einsum("qd,qcd->qc", u, gu)
    jxb = B3 * np.column_stack([J[:, 1], -J[:, 0]])
    uxb = B3 * np.column_stack([u[:, 1], -u[:, 0]])
    f_fd = -nu * lap + conv + gp - Sc * jxb
    g_fd = J + gphi - uxb
    f_an, g_an = problem.f(pts), problem.g(pts)
    scale_f = max(1.0, np.abs(f_an).max())
    scale_g = max(1.0, np.abs(g_an).max())
    div_u = np.einsum("qcc->q", gu)
    div_J = np.einsum("qcc->q", _fd_grad(problem.J, pts, h))
    return {
        "f": float(np.abs(f_fd - f_an).max() / scale_f),
        "g": float(np.abs(g_fd - g_an).max() / scale_g),
        "div_u": float(np.abs(div_u).max() / max(1.0, np.abs(gu).max())),
        "div_J": float(np.abs(div_J).max() / max(1.0, np.abs(J).max())),
        "grad_u": float(np.abs(gu - problem.grad_u(pts)).max() / max(1.0, np.abs(gu).max())),
        "grad_p": float(np.abs(gp - problem.grad_p(pts)).max() / max(1.0, np.abs(gp).max())),
    }


# -------------------------------------------------------------- errors


@dataclass
class ErrorRecord:
    family: str
    N_t: int
    h: float
    err_u_H1: float
    err_p_L2: float
    err_J_L2: float
    err_phi_L2: float
    div_u: float
    div_J: float
    iters: int
    ndof: int = 0
    seconds: float = 0.0
    status: str = "ok"


def _cell_quad(geom, degree, singular_point):
    if singular_point is not None:
        d = np.hypot(*(geom.vertices - np.asarray(singular_point)).T)
        i = int(np.argmin(d))
        if d[i] < 1e-12 * geom.diameter:
            return polygon_quadrature(geom, degree, singular_vertex=i, graded_levels=16)
    return polygon_quadrature(geom, degree)


def divergence_norms(disc: Discretization, state: SolutionState) -> tuple[float, float]:
    dm = disc.dofmap
    su = sJ = 0.0
    for c in range(disc.mesh.n_cells):
        ve, he = disc.vel_el[c], disc.cur_el[c]
        d = ve.Pdiv @ state.u[dm.vel[c]]
        su += d @ ve.H1 @ d
        dj = he.Pdiv @ (dm.cur_sign[c] * state.J[dm.cur[c]])
        sJ += dj @ he.H @ dj
    return math.sqrt(max(su, 0.0)), math.sqrt(max(sJ, 0.0))


def error_norms(
    mesh: Mesh,
    orders: MethodOrder,
    state: SolutionState,
    exact: ManufacturedProblem,
    disc: Discretization | None = None,
) -> ErrorRecord:
    """Computable errors: |u - Pi^nabla u_h|_1, ||J - Pi0 J_h||, and the
    mean-free L2 errors of the (polynomial) pressure and potential."""
    if disc is None:
        disc = Discretization(mesh, exact.parameters_for_solver(), orders)
    dm = disc.dofmap
    k1, k2 = orders.k1, orders.k2
    eu = eJ = 0.0
    wts, ep, ephi = [], [], []
    for c in range(mesh.n_cells):
        geom = mesh.geometry(c)
        ve, he = disc.vel_el[c], disc.cur_el[c]
        quad = _cell_quad(geom, 2 * max(k1, k2) + 4, exact.singular_point)
        x, w = quad.points, quad.weights
        a = ve.Pnabla @ state.u[dm.vel[c]]
        gx, gy = MonomialBasis.on(geom, k1).grad(x)
        nk = ve.nk
        Gh = np.empty((len(x), 2, 2))
        for comp in range(2):
            Gh[:, comp, 0] = gx @ a[comp * nk : (comp + 1) * nk]
            Gh[:, comp, 1] = gy @ a[comp * nk : (comp + 1) * nk]
        eu += w @ ((exact.grad_u(x) - Gh) ** 2).sum(axis=(1, 2))
        Jh = he.values(x) @ (dm.cur_sign[c] * state.J[dm.cur[c]])
        eJ += w @ ((exact.J(x) - Jh) ** 2).sum(axis=1)
        ph = MonomialBasis.on(geom, k1 - 1).eval(x) @ state.p[dm.pres[c]]
        ep.append(exact.p(x) - ph)
        fh = MonomialBasis.on(geom, k2).eval(x) @ state.phi[dm.pot[c]]
        ephi.append(exact.phi(x) - fh)
        wts.append(w)
    w, ep, ephi = np.concatenate(wts), np.concatenate(ep), np.concatenate(ephi)
    # two passes: the mean is removed before squaring to avoid cancellation
    err_p = math.sqrt(w @ (ep - (w @ ep) / w.sum()) ** 2)
    err_phi = math.sqrt(w @ (ephi - (w @ ephi) / w.sum()) ** 2)
    du, dJ = divergence_norms(disc, state)
    return ErrorRecord(
        family="", N_t=mesh.n_cells, h=meshmod.average_mesh_size(mesh),
        err_u_H1=math.sqrt(eu), err_p_L2=err_p, err_J_L2=math.sqrt(eJ),
        err_phi_L2=err_phi, div_u=du, div_J=dJ, iters=state.iterations,
        ndof=dm.size,
    )


# -------------------------------------------------------------- studies


def rates(errors, hs) -> list[float]:
    out = [float("nan")]
    for i in range(1, len(errors)):
        e0, e1 = errors[i - 1], errors[i]
        if e0 > 0 and e1 > 0 and hs[i - 1] != hs[i]:
            out.append(math.log(e0 / e1) / math.log(hs[i - 1] / hs[i]))
        else:
            out.append(float("nan"))
    return out


@dataclass
class ConvergenceTable:
    records: list[ErrorRecord]

    def rate(self, key: str) -> list[float]:
        ok = [r for r in self.records if r.status == "ok"]
        return rates([getattr(r, key) for r in ok], [r.h for r in ok])

    def rows(self) -> list[dict]:
        ok = [r for r in self.records if r.status == "ok"]
        rr = {k: self.rate(k) for k in ("err_u_H1", "err_p_L2", "err_J_L2", "err_phi_L2")}
        out = []
        for i, r in enumerate(ok):
            out.append({
                "family": r.family, "N_t": r.N_t, "h": r.h,
                "err_u_H1": r.err_u_H1, "rate_u": rr["err_u_H1"][i],
                "err_p_L2": r.err_p_L2, "rate_p": rr["err_p_L2"][i],
                "err_J_L2": r.err_J_L2, "rate_J": rr["err_J_L2"][i],
                "err_phi_L2": r.err_phi_L2, "rate_phi": rr["err_phi_L2"][i],
                "div_u": r.div_u, "div_J": r.div_J, "iters": r.iters,
            })
        for r in self.records:
            if r.status != "ok":
                out.append({"family": r.family, "N_t": r.N_t, "iters": r.iters, **{
                    k: float("nan") for k in CSV_COLUMNS if k not in ("family", "N_t", "iters")
                }})
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            wr.writeheader()
            for row in self.rows():
                wr.writerow(row)

    def format(self) -> str:
        head = f"{'N_t':>6} {'h':>9} {'|u|_1':>10} {'r':>5} {'p':>10} {'r':>5} {'J':>10} {'r':>5} {'phi':>10} {'r':>5} {'div u':>9} {'div J':>9} {'it':>3}"
        lines = [head]
        for r in self.rows():
            lines.append(
                f"{r['N_t']:>6} {r['h']:9.3e} {r['err_u_H1']:10.3e} {r['rate_u']:5.2f} "
                f"{r['err_p_L2']:10.3e} {r['rate_p']:5.2f} {r['err_J_L2']:10.3e} {r['rate_J']:5.2f} "
                f"{r['err_phi_L2']:10.3e} {r['rate_phi']:5.2f} {r['div_u']:9.2e} {r['div_J']:9.2e} {r['iters']:>3}"
            )
        return "\n".join(lines)


def make_mesh(family: str, size: int, seed: int = 0) -> Mesh:
    """``size`` is the cell count for square families and the level for lshape."""
    if family == "lshape":
        return meshmod.generate_lshape_tri(size)
    (n,) = meshmod.family_sizes(family, [size])
    return meshmod.generate(family, n, seed)


def solve_problem(mesh: Mesh, problem: ManufacturedProblem, orders: MethodOrder,
                  scheme: str = "oseen", tol: float = 1e-6, max_iters: int = 50,
                  convection: bool = True):
    params = problem.parameters_for_solver(convection)
    disc = Discretization(mesh, params, orders)
    state = nonlinear_solve(mesh, params, orders, scheme, tol, max_iters, disc)
    return state, disc


def _study_row(problem, family, size, orders, scheme, tol, max_iters, seed) -> ErrorRecord:
    mesh = make_mesh(family, size, seed)
    t0 = time.perf_counter()
    try:
        state, disc = solve_problem(mesh, problem, orders, scheme, tol, max_iters)
        rec = error_norms(mesh, orders, state, problem, disc)
    except (NonlinearSolveError, LinearSolveError) as exc:
        logger.error("solve failed on %s N_t=%d: %s", family, mesh.n_cells, exc)
        rec = ErrorRecord(family, mesh.n_cells, meshmod.average_mesh_size(mesh),
                          *([float("nan")] * 6), iters=-1, status=str(exc))
    rec.family = family
    rec.seconds = time.perf_counter() - t0
    logger.info("%s N_t=%d done in %.1fs", family, mesh.n_cells, rec.seconds)
    return rec


def convergence_study(
    problem: ManufacturedProblem,
    family: str,
    sizes,
    orders: MethodOrder,
    scheme: str = "oseen",
    tol: float = 1e-6,
    max_iters: int = 50,
    seed: int = 0,
    csv_path=None,
    workers: int = 1,
) -> ConvergenceTable:
    """Solve on each mesh of a family and tabulate errors and rates.

    ``workers > 1`` solves the meshes in separate processes; the problem
    must then be picklable (module-level callables).
    """
    if len(sizes) < 2:
        raise ValueError("a study needs at least two meshes")
    args = [(problem, family, s, orders, scheme, tol, max_iters, seed) for s in sizes]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_study_row, *zip(*args)))
    else:
        records = [_study_row(*a) for a in args]
    table = ConvergenceTable(records)
    if csv_path is not None:
        table.write_csv(csv_path)
    return table


def conservation_report(tables: dict[str, ConvergenceTable]) -> str:
    lines = []
    for fam, tab in tables.items():
        ok = [r for r in tab.records if r.status == "ok"]
        lines.append(f"{fam:>10} N_t    " + " ".join(f"{r.N_t:>11d}" for r in ok))
        lines.append(f"{'':>10} div u  " + " ".join(f"{r.div_u:11.4e}" for r in ok))
        lines.append(f"{'':>10} div J  " + " ".join(f"{r.div_J:11.4e}" for r in ok))
    return "\n".join(lines)


# -------------------------------------------------------------- sampling


def locate_points(mesh: Mesh, pts: np.ndarray) -> np.ndarray:
    """Index of a cell containing each point (-1 if outside)."""
    owner = np.full(len(pts), -1, dtype=int)
    for c, cell in enumerate(mesh.cells):
        xy = mesh.vertices[cell]
        lo, hi = xy.min(0), xy.max(0)
        cand = np.flatnonzero(
            (owner < 0) & (pts[:, 0] >= lo[0]) & (pts[:, 0] <= hi[0])
            & (pts[:, 1] >= lo[1]) & (pts[:, 1] <= hi[1])
        )
        if len(cand) == 0:
            continue
        q = pts[cand]
        inside = np.zeros(len(q), dtype=bool)
        x0, y0 = xy[:, 0], xy[:, 1]
        x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
        for i in range(len(xy)):
            crosses = (y0[i] > q[:, 1]) != (y1[i] > q[:, 1])
            with np.errstate(divide="ignore", invalid="ignore"):
                xc = x0[i] + (q[:, 1] - y0[i]) * (x1[i] - x0[i]) / (y1[i] - y0[i])
            inside ^= crosses & (q[:, 0] < xc)
        owner[cand[inside]] = c
    return owner


def sample_velocity(disc: Discretization, state: SolutionState, pts: np.ndarray) -> np.ndarray:
    """Pi0 u_h at points (NaN outside the mesh)."""
    owner = locate_points(disc.mesh, pts)
    out = np.full((len(pts), 2), np.nan)
    dm = disc.dofmap
    for c in np.unique(owner[owner >= 0]):
        sel = owner == c
        out[sel] = disc.vel_el[c].values(pts[sel]) @ state.u[dm.vel[c]]
    return out


# ------------------------------------------------------------- cylinder


@dataclass
class CylinderConfig:
    nu_values: tuple = (1.0, 0.01)
    Sc: float = 1.0
    B3: float = 1.0
    k1: int = 2
    k2: int = 1
    u_max: float = 1.0
    n_theta: int = 48
    n_radial: int = 12
    grid: int = 41
    scheme: str = "oseen"
    tol: float = 1e-6
    max_iters: int = 100


def cylinder_demo(config: CylinderConfig | None = None, out_dir=None) -> dict:
    """Flow past a cylinder in a square channel with parabolic in/outflow.

    Returns per-viscosity indicators: top/bottom speed symmetry and the
    minimum streamwise velocity on the wake centreline, which flags
    recirculation when it is below -2% of the inflow peak.
    """
    cfg = config or CylinderConfig()
    L = 4.0
    mesh = meshmod.generate_cylinder_channel(cfg.n_theta, cfg.n_radial, length=L)
    centre = np.array([L / 2, L / 2])

    def trace(pts):
        x, y = pts[:, 0], pts[:, 1]
        on_side = (np.abs(x) < 1e-12) | (np.abs(x - L) < 1e-12)
        prof = 4 * cfg.u_max * y * (L - y) / L**2
        return np.column_stack([np.where(on_side, prof, 0.0), np.zeros_like(x)])

    orders = MethodOrder(cfg.k1, cfg.k2)
    xs = np.linspace(0, L, cfg.grid)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    pts = pts[np.hypot(*(pts - centre).T) > 0.5 + 1e-9]
    results = {}
    for nu in cfg.nu_values:
        params = ProblemParameters(nu=nu, Sc=cfg.Sc, B3=cfg.B3, u_trace=trace)
        disc = Discretization(mesh, params, orders)
        apply_dirichlet_velocity(disc)
        state = nonlinear_solve(mesh, params, orders, cfg.scheme, cfg.tol, cfg.max_iters, disc)
        vel = sample_velocity(disc, state, pts)
        speed = np.hypot(vel[:, 0], vel[:, 1])
        # symmetry about y = L/2: compare each sample with its mirror
        mirror = np.column_stack([pts[:, 0], L - pts[:, 1]])
        vm = sample_velocity(disc, state, mirror)
        sm = np.hypot(vm[:, 0], vm[:, 1])
        ok = np.isfinite(speed) & np.isfinite(sm)
        sym = float(np.abs(speed[ok] - sm[ok]).max() / speed[ok].max())
        wake = np.column_stack([np.linspace(L / 2 + 0.52, L / 2 + 1.5, 50), np.full(50, L / 2)])
        wu = sample_velocity(disc, state, wake)[:, 0]
        du, dJ = divergence_norms(disc, state)
        results[nu] = {
            "symmetry_defect": sym,
            "min_wake_u1": float(np.nanmin(wu)),
            # a reversed flow below 2% of the inflow peak is discretization noise
            "recirculation": bool(np.nanmin(wu) < -0.02 * cfg.u_max),
            "iterations": state.iterations,
            "div_u": du,
            "div_J": dJ,
        }
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            with open(out / f"cylinder_nu{nu:g}.csv", "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["x", "y", "u1", "u2", "|u|"])
                for p, v, s in zip(pts, vel, speed):
                    wr.writerow([f"{p[0]:.6g}", f"{p[1]:.6g}", f"{v[0]:.6e}", f"{v[1]:.6e}", f"{s:.6e}"])
    return results
