import numpy as np
import pytest

from helpers import VecPoly, dense_quadrature, random_cells
from imhd_vem import mesh as M
from imhd_vem.hdiv_space import (
    HdivElement,
    div_coeffs_hdiv,
    edge_legendre,
    hdiv_interpolate,
    hdiv_ndof,
    local_bpsi,
    local_load_g,
    local_mass,
    pi0_k2_matrix,
    reversal_signs,
)
from imhd_vem.mesh import polygon_geometry
from imhd_vem.polybasis import MonomialBasis
from imhd_vem.system import build_dof_map

SQUARE = polygon_geometry(np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]]))
PENTAGON = polygon_geometry(np.array([[0, 0], [1, 0.1], [1.2, 0.8], [0.5, 1.3], [-0.2, 0.7]]))
CELLS50 = random_cells(50, seed=3)
CELLS10 = random_cells(10, seed=4)


def smooth_field(x):
    return np.column_stack([np.sin(2 * x[:, 0] + x[:, 1]), np.exp(x[:, 0]) * np.cos(3 * x[:, 1])])


def smooth_div(x):
    return 2 * np.cos(2 * x[:, 0] + x[:, 1]) - 3 * np.exp(x[:, 0]) * np.sin(3 * x[:, 1])


@pytest.mark.parametrize("k,count", [(1, 11), (2, 20), (3, 31)])
def test_dof_counts_on_square(k, count):
    assert HdivElement(SQUARE, k).ndof == count
    assert hdiv_ndof(4, k) == count


def test_order_validation():
    with pytest.raises(ValueError):
        HdivElement(SQUARE, 0)


def test_edge_legendre_orthonormal():
    t, w = np.polynomial.legendre.leggauss(8)
    t, w = (t + 1) / 2, w / 2
    L = edge_legendre(4, t)
    assert np.allclose((L * w[:, None]).T @ L, np.eye(5), atol=1e-14)


def test_reversal_signs_match_reversed_moments():
    # a reversed edge has parameter 1 - t and the opposite normal
    t, w = np.polynomial.legendre.leggauss(10)
    t, w = (t + 1) / 2, w / 2
    f = np.cos(3 * t) + t**2
    fwd = (w * f) @ edge_legendre(3, t)
    rev = (w * -f[::-1]) @ edge_legendre(3, t)
    assert np.allclose(rev, reversal_signs(3) * fwd, atol=1e-14)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_pi0_reproduces_polynomials(k):
    rng = np.random.default_rng(k)
    worst = 0.0
    for geom in CELLS50:
        el = HdivElement(geom, k)
        K = VecPoly.random(k, rng)
        pts = geom.centroid + 0.3 * geom.diameter * rng.uniform(-1, 1, (20, 2))
        got = el.values(pts) @ el.interpolate(K)
        ex = K(pts)
        worst = max(worst, np.abs(got - ex).max() / np.abs(ex).max())
    assert worst <= 1e-10


@pytest.mark.parametrize("k", [1, 2])
def test_divergence_commutes_with_interpolation(k):
    # (div K_I, m_s) = (div K, m_s) for any smooth K
    for geom in CELLS10:
        el = HdivElement(geom, k)
        q = dense_quadrature(geom, 14)
        m = MonomialBasis.on(geom, k).eval(q.points)
        ref = (q.weights * smooth_div(q.points)) @ m
        got = el.divmom @ el.interpolate(smooth_field, 16)
        scale = np.sqrt(q.weights @ smooth_div(q.points) ** 2) * np.sqrt(q.weights @ m**2)
        assert (np.abs(got - ref) <= 1e-9 * scale).all()


@pytest.mark.parametrize("k", [1, 2])
def test_local_matrices_match_dense_oracle(k):
    rng = np.random.default_rng(30 + k)
    for geom in CELLS10:
        el = HdivElement(geom, k)
        q = dense_quadrature(geom, 2 * k + 4)
        K, L = VecPoly.random(k, rng), VecPoly.random(k, rng)
        dK, dL = el.interpolate(K), el.interpolate(L)
        Kq, Lq = K(q.points), L(q.points)
        ref = q.weights @ (Kq * Lq).sum(1)
        nK = np.sqrt(q.weights @ (Kq**2).sum(1))
        nL = np.sqrt(q.weights @ (Lq**2).sum(1))
        assert abs(dK @ el.mass(2.0) @ dL - 2.0 * ref) <= 1e-11 * 2.0 * nK * nL
        m = MonomialBasis.on(geom, k).eval(q.points)
        ref_b = (q.weights * K.div(q.points)) @ m
        nd = np.sqrt(q.weights @ K.div(q.points) ** 2) + nK / geom.diameter
        nm = np.sqrt(q.weights @ m**2)
        assert (np.abs(el.bpsi(3.0) @ dK - 3.0 * ref_b) <= 1e-11 * 3.0 * nd * nm).all()


def test_mass_spd_and_wrappers():
    el = HdivElement(PENTAGON, 2)
    Mm = el.mass(1.0)
    assert np.allclose(Mm, Mm.T)
    assert np.linalg.eigvalsh(Mm).min() > 0
    assert np.allclose(local_mass(PENTAGON, 2, 2.0), 2.0 * Mm)
    assert np.allclose(local_bpsi(PENTAGON, 2, 1.0), el.divmom)
    assert np.array_equal(pi0_k2_matrix(PENTAGON, 2), el.P0)
    d = hdiv_interpolate(PENTAGON, 2, smooth_field)
    assert np.allclose(div_coeffs_hdiv(PENTAGON, 2, d), el.div_coeffs(d))
    # load against a polynomial equals the mass product
    K = VecPoly.random(2, np.random.default_rng(1))
    b = local_load_g(PENTAGON, 2, 1.0, K)
    assert np.allclose(b, el.P0.T @ el.Hv @ el.P0 @ el.interpolate(K), atol=1e-12 * np.abs(b).max())


def test_normal_continuity_of_global_interpolant():
    mesh = M.generate_voronoi(15, 2)
    k2 = 2
    dm = build_dof_map(mesh, 2, k2)
    glob = {}
    for c in range(mesh.n_cells):
        loc = HdivElement(mesh.geometry(c), k2).interpolate(smooth_field)
        for gi, s, val in zip(dm.cur[c], dm.cur_sign[c], loc):
            if gi < mesh.n_edges * (k2 + 1):
                glob.setdefault(gi, []).append(s * val)
    shared = [v for v in glob.values() if len(v) == 2]
    assert len(shared) == (~mesh.boundary_edges).sum() * (k2 + 1)
    assert max(abs(a - b) for a, b in shared) <= 1e-12
