import numpy as np
import pytest

from helpers import Poly, VecPoly, dense_quadrature, random_cells
from imhd_vem.mesh import polygon_geometry
from imhd_vem.polybasis import MonomialBasis
from imhd_vem.velocity_space import (
    VelocityElement,
    div_coeffs,
    lagrange_matrix,
    local_stiffness,
    local_trilinear,
    pi0_grad_matrix,
    pi0_matrix,
    pi_nabla_matrix,
    vel_interpolate,
    velocity_ndof,
)

SQUARE = polygon_geometry(np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]]))
PENTAGON = polygon_geometry(np.array([[0, 0], [1, 0.1], [1.2, 0.8], [0.5, 1.3], [-0.2, 0.7]]))
CELLS50 = random_cells(50, seed=1)
CELLS10 = random_cells(10, seed=2)


def rel(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)


def poly_values(geom, k, coeffs, pts):
    m = MonomialBasis.on(geom, k).eval(pts)
    n = m.shape[1]
    return np.column_stack([m @ coeffs[:n], m @ coeffs[n:]])


@pytest.mark.parametrize("k,count", [(2, 18), (3, 30), (4, 44)])
def test_dof_counts_on_square(k, count):
    assert VelocityElement(SQUARE, k).ndof == count
    assert velocity_ndof(4, k) == count


def test_dof_count_formula_triangle():
    tri = polygon_geometry(np.array([[0, 0], [1, 0], [0, 1.0]]))
    # 2 * 3 * 2 boundary values + 0 moments + 2 divergence moments
    assert VelocityElement(tri, 2).ndof == 14


def test_order_validation():
    with pytest.raises(ValueError):
        VelocityElement(SQUARE, 1)


def test_lagrange_matrix_is_identity_at_nodes():
    x = np.array([0.0, 0.3, 1.0])
    assert np.allclose(lagrange_matrix(x, x), np.eye(3))


@pytest.mark.parametrize("k", [2, 3])
def test_projectors_reproduce_polynomials(k):
    rng = np.random.default_rng(k)
    worst = 0.0
    for geom in CELLS50:
        el = VelocityElement(geom, k)
        v = VecPoly.random(k, rng)
        dofs = el.interpolate(v)
        pts = geom.centroid + 0.3 * geom.diameter * rng.uniform(-1, 1, (20, 2))
        exact = v(pts)
        worst = max(worst, rel(poly_values(geom, k, el.Pnabla @ dofs, pts), exact))
        worst = max(worst, rel(poly_values(geom, k, el.P0 @ dofs, pts), exact))
        G = el.gradients(pts) @ dofs
        worst = max(worst, rel(G, v.grad(pts)))
    assert worst <= 1e-10


def test_function_wrappers_match_element():
    el = VelocityElement(PENTAGON, 2)
    assert np.array_equal(pi_nabla_matrix(PENTAGON, 2), el.Pnabla)
    assert np.array_equal(pi0_matrix(PENTAGON, 2), el.P0)
    assert np.array_equal(pi0_grad_matrix(PENTAGON, 2), el.PG)
    assert np.allclose(local_stiffness(PENTAGON, 2, 3.0), 3.0 * el.stiffness(1.0))
    v = VecPoly.random(2, np.random.default_rng(0))
    d = vel_interpolate(PENTAGON, 2, v)
    assert np.allclose(div_coeffs(PENTAGON, 2, d), el.div_coeffs(d))


@pytest.mark.parametrize("k", [2, 3])
def test_divergence_coefficients(k):
    rng = np.random.default_rng(10 + k)
    for geom in CELLS10:
        el = VelocityElement(geom, k)
        v = VecPoly.random(k, rng)
        c = el.div_coeffs(el.interpolate(v))
        pts = geom.centroid + 0.3 * geom.diameter * rng.uniform(-1, 1, (10, 2))
        got = MonomialBasis.on(geom, k - 1).eval(pts) @ c
        assert rel(got, v.div(pts)) <= 1e-10


@pytest.mark.parametrize("k", [2, 3])
def test_local_matrices_match_dense_oracle(k):
    rng = np.random.default_rng(20 + k)
    for geom in CELLS10:
        el = VelocityElement(geom, k)
        q = dense_quadrature(geom, 3 * k + 2)
        v, w, z = (VecPoly.random(k, rng) for _ in range(3))
        dv, dw, dz = (el.interpolate(f) for f in (v, w, z))
        # stiffness: stabilization vanishes on polynomials
        Gv, Gw = v.grad(q.points), w.grad(q.points)
        ref = q.weights @ np.einsum("qcd,qcd->q", Gv, Gw)
        got = dv @ el.stiffness(2.5) @ dw
        # tolerances are relative to the Cauchy-Schwarz bound of each form
        nv = np.sqrt(q.weights @ (Gv**2).sum((1, 2)))
        nw = np.sqrt(q.weights @ (Gw**2).sum((1, 2)))
        assert abs(got - 2.5 * ref) <= 1e-11 * 2.5 * nv * nw
        # divergence block: (Bq v)_s = (div v, m_s)
        ms = MonomialBasis.on(geom, k - 1).eval(q.points)
        ref_b = (q.weights * v.div(q.points)) @ ms
        nm = np.sqrt(q.weights @ ms**2)
        assert (np.abs(el.Bq @ dv - ref_b) <= 1e-11 * nv * nm).all()
        # convection c(w; v, z) = 1/2 [(w.grad v, z) - (w.grad z, v)]
        quad = dense_quadrature(geom, 3 * k)
        U, G = el.values(quad.points), el.gradients(quad.points)
        C = local_trilinear(U, G, quad.weights, dw)
        W = w(q.points)
        ref_c = 0.5 * q.weights @ (
            np.einsum("qd,qcd,qc->q", W, v.grad(q.points), z(q.points))
            - np.einsum("qd,qcd,qc->q", W, z.grad(q.points), v(q.points))
        )
        Z, V = z(q.points), v(q.points)
        scale = np.abs(W).max() * (
            nv * np.sqrt(q.weights @ (Z**2).sum(1))
            + np.sqrt(q.weights @ (z.grad(q.points) ** 2).sum((1, 2))) * np.sqrt(q.weights @ (V**2).sum(1))
        )
        assert abs(dz @ C @ dv - ref_c) <= 1e-11 * scale


def test_stiffness_symmetric_psd_with_constant_kernel():
    for k in (2, 3):
        A = VelocityElement(PENTAGON, k).stiffness(1.0)
        assert np.allclose(A, A.T, atol=1e-14)
        ev = np.linalg.eigvalsh(A)
        assert ev.min() > -1e-10
        assert (ev < 1e-9 * ev.max()).sum() == 2


def test_trilinear_skew_and_newton_block():
    rng = np.random.default_rng(5)
    el = VelocityElement(PENTAGON, 3)
    q = dense_quadrature(PENTAGON, 8)
    U, G = el.values(q.points), el.gradients(q.points)
    w, d, v = (rng.standard_normal(el.ndof) for _ in range(3))
    C, N = local_trilinear(U, G, q.weights, w, "newton")
    assert abs(v @ C @ v) <= 1e-13 * np.abs(C).max() * (v @ v)
    # C is linear in w, so the Newton block satisfies N d = C(d) w
    Cd = local_trilinear(U, G, q.weights, d, "oseen")
    assert np.allclose(N @ d, Cd @ w, atol=1e-12 * np.abs(Cd).max())
    assert np.allclose(local_trilinear(U, G, q.weights, w, "stokes_rhs"), C @ w)
    with pytest.raises(ValueError):
        local_trilinear(U, G, q.weights, w, "bogus")


def test_interpolation_nodal_values():
    v = VecPoly(Poly([1.0, 2.0, 0, 0, 0, 0], 2), Poly([0, 0, 1.0, 0, 0, 0], 2))
    el = VelocityElement(SQUARE, 2)
    d = el.interpolate(v)
    assert np.allclose(d[: 2 * len(el.nodes)].reshape(-1, 2), v(el.nodes))
