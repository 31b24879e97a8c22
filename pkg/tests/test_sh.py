import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from noddish.errors import InvalidArgumentError
from noddish.sh import (SphericalGrid, assoc_legendre, cart2sphere, eval_sh,
                        fibonacci_sphere, make_hemisphere_grid, n_coeffs,
                        order_from_length, sh_expand_on_grid, sh_index,
                        sh_order_degree, sphere2cart)

from oracles import scipy_real_sh

unit_vectors = st.tuples(*[st.floats(-1, 1) for _ in range(3)]).filter(
    lambda v: np.linalg.norm(v) > 0.1).map(lambda v: np.array(v) / np.linalg.norm(v))


def test_coefficient_counts():
    assert [n_coeffs(o) for o in (0, 2, 4, 6, 8)] == [1, 6, 15, 28, 45]
    for o in range(0, 17, 2):
        assert order_from_length(n_coeffs(o)) == o


def test_flat_index_is_bijection():
    ls, ms = sh_order_degree(8)
    idx = [sh_index(l, m) for l, m in zip(ls, ms)]
    assert idx == list(range(45))
    assert sh_index(2, -2) == 1 and sh_index(2, 2) == 5 and sh_index(4, 0) == 10


@pytest.mark.parametrize("bad", [(1, 0), (2, 3), (-2, 0)])
def test_flat_index_rejects_invalid(bad):
    with pytest.raises(InvalidArgumentError):
        sh_index(*bad)


@pytest.mark.parametrize("order", [1, 3, 18, -2, 2.5])
def test_order_validation(order):
    with pytest.raises(InvalidArgumentError):
        eval_sh(order, np.array([[0.0, 0.0, 1.0]]))


def test_rejects_non_unit_directions():
    with pytest.raises(InvalidArgumentError):
        eval_sh(2, np.array([[0.0, 0.0, 1.1]]))
    with pytest.raises(InvalidArgumentError):
        eval_sh(2, np.zeros((0, 3)))


def test_known_values_at_pole():
    Y = eval_sh(2, np.array([[0.0, 0.0, 1.0]]))[0]
    assert Y[0] == 0.5 / np.sqrt(np.pi)
    assert Y[sh_index(2, 0)] == pytest.approx(np.sqrt(5 / (4 * np.pi)), abs=1e-15)
    assert Y[sh_index(2, 0)] == pytest.approx(0.6307831305050401, abs=1e-15)
    assert np.allclose(np.delete(Y, [0, 3]), 0.0, atol=1e-15)


def test_matches_scipy_legendre_with_phase_removed(rng):
    dirs = fibonacci_sphere(300)
    theta, phi = cart2sphere(dirs)
    Y = eval_sh(12, dirs)
    ls, ms = sh_order_degree(12)
    for j, (l, m) in enumerate(zip(ls, ms)):
        np.testing.assert_allclose(Y[:, j], scipy_real_sh(l, m, theta, phi), atol=1e-12)


def test_legendre_recurrence_against_closed_forms():
    x = np.linspace(-1, 1, 11)
    P = assoc_legendre(4, x)
    np.testing.assert_allclose(P[2, 0], 0.5 * (3 * x ** 2 - 1), atol=1e-15)
    np.testing.assert_allclose(P[2, 2], 3 * (1 - x ** 2), atol=1e-15)
    np.testing.assert_allclose(P[4, 4], 105 * (1 - x ** 2) ** 2, atol=1e-12)


def test_orthonormal_under_dense_quadrature():
    # equal-area Fibonacci points approximate the surface integral
    pts = fibonacci_sphere(40000)
    Y = eval_sh(8, pts)
    gram = Y.T @ Y * (4 * np.pi / len(pts))
    np.testing.assert_allclose(gram, np.eye(45), atol=2e-4)


@given(unit_vectors)
def test_antipodal_symmetry(u):
    Y = eval_sh(8, np.vstack([u, -u]))
    np.testing.assert_allclose(Y[0], Y[1], atol=1e-12)


@given(unit_vectors, unit_vectors)
def test_addition_theorem(u, v):
    # sum_m Y_lm(u) Y_lm(v) = (2l+1)/(4 pi) P_l(u.v) for each band
    from scipy.special import eval_legendre
    Yu = eval_sh(8, u[None])[0]
    Yv = eval_sh(8, v[None])[0]
    ls, _ = sh_order_degree(8)
    for l in range(0, 9, 2):
        band = ls == l
        lhs = Yu[band] @ Yv[band]
        rhs = (2 * l + 1) / (4 * np.pi) * eval_legendre(l, np.clip(u @ v, -1, 1))
        assert lhs == pytest.approx(rhs, abs=1e-12)


def test_rotation_preserves_band_energy(rng):
    c = rng.normal(size=45)
    R = Rotation.from_euler("zyz", [0.3, 1.1, -0.7]).as_matrix()
    pts = fibonacci_sphere(6000)
    f_rot = eval_sh(8, pts @ R) @ c          # f(R^T u)
    c_rot = np.linalg.lstsq(eval_sh(8, pts), f_rot, rcond=None)[0]
    ls, _ = sh_order_degree(8)
    for l in range(0, 9, 2):
        band = ls == l
        assert np.linalg.norm(c_rot[band]) == pytest.approx(np.linalg.norm(c[band]), rel=1e-8)


def test_coordinate_round_trip(rng):
    v = rng.normal(size=(50, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    np.testing.assert_allclose(sphere2cart(*cart2sphere(v)), v, atol=1e-14)
    _, phi = cart2sphere(v)
    assert phi.min() >= 0 and phi.max() < 2 * np.pi


class TestHemisphereGrid:
    def test_default_grid(self):
        g = make_hemisphere_grid()
        d = g.directions
        assert len(g) == 181 and d.shape == (181, 3)
        assert (d[:, 2] >= 0).all()
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
        # exhaustive pairwise check under the antipodal metric
        cos = np.abs(d @ d.T)
        np.fill_diagonal(cos, 0.0)
        assert np.rad2deg(np.arccos(cos.max())) > 5.0

    def test_deterministic(self):
        a = make_hemisphere_grid.__wrapped__(181).directions
        b = make_hemisphere_grid.__wrapped__(181).directions
        assert a.tobytes() == b.tobytes()

    def test_read_only(self):
        with pytest.raises(ValueError):
            make_hemisphere_grid(181).directions[0, 0] = 1.0

    def test_rejects_tiny_grid(self):
        with pytest.raises(InvalidArgumentError):
            make_hemisphere_grid(5)

    def test_neighbors_are_nearest(self):
        g = make_hemisphere_grid(500)
        nb = g.neighbors(6)
        d = g.directions
        cos = np.abs(d @ d.T)
        np.fill_diagonal(cos, -1)
        for i in range(0, 500, 37):
            expect = np.sort(cos[i])[::-1][:6]
            np.testing.assert_allclose(np.sort(cos[i, nb[i]])[::-1], expect)

    def test_covers_hemisphere(self):
        d = make_hemisphere_grid(181).directions
        probe = fibonacci_sphere(5000)
        gap = np.rad2deg(np.arccos(np.abs(probe @ d.T).max(axis=1))).max()
        assert gap < 12.0


def test_expand_accepts_grid_or_array(rng):
    c = rng.normal(size=15)
    g = make_hemisphere_grid(50)
    np.testing.assert_allclose(sh_expand_on_grid(c, g), sh_expand_on_grid(c, g.directions))
    with pytest.raises(InvalidArgumentError):
        sh_expand_on_grid(np.ones(7), g)


def test_custom_grid_validates():
    with pytest.raises(InvalidArgumentError):
        SphericalGrid(np.array([[1.0, 1.0, 0.0]]))


def test_smallest_grid_and_isotropic_expansion():
    g = make_hemisphere_grid.__wrapped__(12)
    assert len(g) == 12
    assert g.directions.tobytes() == make_hemisphere_grid.__wrapped__(12).directions.tobytes()
    iso = np.zeros(45)
    iso[0] = 1 / np.sqrt(4 * np.pi)
    np.testing.assert_allclose(sh_expand_on_grid(iso, g), 1 / (4 * np.pi), rtol=1e-14)
    assert (sh_expand_on_grid(np.zeros(45), g) == 0).all()
