import numpy as np
import pytest
from hypothesis import given, strategies as st

from noddish.errors import InvalidArgumentError
from noddish.kernels import (SERIES_THRESHOLD, DiffusivitySet, VolumeFractions,
                             forecast_basis, isotropic_coeffs, noddish_basis,
                             noddish_kernel_table, phi_l, psi_l)
from noddish.scheme import AcquisitionScheme
from noddish.sh import eval_sh, fibonacci_sphere

from oracles import quad_phi, quad_psi

LS = (0, 2, 4, 6, 8)


@pytest.mark.parametrize("l", LS)
def test_phi_psi_against_quadrature(l):
    xs = np.linspace(0.0, 30.0, 200)
    phi = phi_l(l, xs)
    psi = psi_l(l, xs)
    ref_phi = np.array([quad_phi(l, x) for x in xs])
    ref_psi = np.array([quad_psi(l, x) for x in xs])
    assert np.abs(phi - ref_phi).max() <= 1e-10
    assert np.abs(psi - ref_psi).max() <= 1e-10


@pytest.mark.parametrize("l", LS)
def test_limits_at_zero(l):
    assert phi_l(l, 0.0) == 2.0 / (l + 1)
    assert psi_l(l, 0.0) == (2.0 if l == 0 else 0.0)


@pytest.mark.parametrize("l", LS)
def test_continuous_across_series_switch(l):
    below = np.nextafter(SERIES_THRESHOLD, 0)
    assert phi_l(l, below) == pytest.approx(phi_l(l, SERIES_THRESHOLD), rel=1e-13)


def test_small_xi_has_no_cancellation():
    # closed forms divide by xi^4.5; the series keeps full accuracy near 0
    for xi in (1e-12, 1e-8, 1e-5, 1e-3):
        assert phi_l(8, xi) == pytest.approx(quad_phi(8, xi), rel=1e-13)


def test_frozen_spherical_mean_value():
    # 1/2 Psi_0(1.7): quadrature gives 0.63539069040215...
    assert 0.5 * psi_l(0, 1.7) == pytest.approx(0.6353906904021527, abs=1e-14)
    assert 0.5 * quad_psi(0, 1.7) == pytest.approx(0.6353906904021527, abs=1e-14)


@given(st.floats(0.0, 60.0))
def test_psi_decreases_in_magnitude_bound(xi):
    # |Psi_l| <= Psi_0 since |P_l| <= 1 and the weight is positive
    p0 = psi_l(0, xi)
    for l in LS[1:]:
        assert abs(psi_l(l, xi)) <= p0 + 1e-15


def test_vectorized_shapes():
    x = np.linspace(0, 5, 12).reshape(3, 4)
    assert phi_l(4, x).shape == (3, 4)
    assert isinstance(phi_l(4, 2.0), float)


@pytest.mark.parametrize("args", [(3, 1.0), (10, 1.0), (2, -1.0), (2, np.nan)])
def test_kernel_argument_errors(args):
    with pytest.raises(InvalidArgumentError):
        psi_l(*args)


def test_forecast_isotropic_reduction(hcp):
    for lam in (0.5e-3, 1.7e-3, 3e-3):
        M = forecast_basis(hcp, DiffusivitySet(lam, lam), 8)
        pred = M.values @ isotropic_coeffs(8)
        assert np.abs(pred - np.exp(-hcp.bvals * lam)).max() <= 1e-12


def test_b0_rows(hcp):
    for M in (forecast_basis(hcp, DiffusivitySet(), 8),
              noddish_basis(hcp, DiffusivitySet(), VolumeFractions(0.5, 0.3, 0.2), 8)):
        rows = M.values[hcp.b0_mask]
        assert (rows[:, 0] == np.sqrt(4 * np.pi)).all()
        assert (rows[:, 1:] == 0).all()
        assert M.predict(isotropic_coeffs(8))[hcp.b0_mask] == pytest.approx(1.0, abs=1e-15)


def _quadrature_signal(scheme, coeffs, response):
    """E(u) = int rho(v) K(u.v) dv on a dense equal-area point set."""
    V = fibonacci_sphere(40000)
    rho = eval_sh(8, V) @ coeffs
    cos2 = (scheme.directions @ V.T) ** 2
    K = response(scheme.bvals[:, None], cos2)
    return (K * rho).sum(axis=1) * (4 * np.pi / len(V))


def _scheme():
    rng = np.random.default_rng(3)
    d = rng.normal(size=(60, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    b = np.repeat([500.0, 1500.0, 3000.0], 20)
    return AcquisitionScheme.from_bvals_bvecs(b, d)


def test_noddish_basis_matches_brute_force_convolution(rng):
    scheme = _scheme()
    c = isotropic_coeffs(8)
    c[1:] = rng.normal(0, 0.05, 44)
    fr = VolumeFractions(0.55, 0.3, 0.15)
    diff = DiffusivitySet()
    lpar, lperp = diff.lambda_par, fr.tortuous_perp(diff.lambda_par)

    def response(b, cos2):
        return (fr.nu_ic * np.exp(-b * lpar * cos2)
                + fr.nu_ec * np.exp(-b * (lperp + (lpar - lperp) * cos2)))

    expected = _quadrature_signal(scheme, c, response) + fr.nu_csf * np.exp(-scheme.bvals * 3e-3)
    M = noddish_basis(scheme, diff, fr, 8)
    assert np.abs(M.values @ c - expected).max() < 1e-6


def test_forecast_basis_matches_brute_force_convolution(rng):
    scheme = _scheme()
    c = isotropic_coeffs(8)
    c[1:] = rng.normal(0, 0.05, 44)
    diff = DiffusivitySet(2.1e-3, 0.4e-3)

    def response(b, cos2):
        return np.exp(-b * (diff.lambda_perp + (diff.lambda_par - diff.lambda_perp) * cos2))

    M = forecast_basis(scheme, diff, 8)
    assert np.abs(M.values @ c - _quadrature_signal(scheme, c, response)).max() < 1e-6


def test_noddish_with_only_ec_equals_forecast(hcp):
    # nu_ic = 0 makes lperp = lpar: an isotropic zeppelin equals FORECAST at lperp = lpar
    fr = VolumeFractions(0.0, 1.0, 0.0)
    a = noddish_basis(hcp, DiffusivitySet(), fr, 8).values
    b = forecast_basis(hcp, DiffusivitySet(1.7e-3, 1.7e-3), 8).values
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_tortuosity():
    fr = VolumeFractions(0.6, 0.3, 0.1)
    assert fr.tortuous_perp(1.7e-3) == pytest.approx(1.7e-3 / 3)
    assert VolumeFractions(0.0, 0.0, 1.0).tortuous_perp(1.7e-3) == 0.0
    assert VolumeFractions(0.0, 1.0, 0.0).tortuous_perp(1.7e-3) == 1.7e-3


def test_kernel_table_csf_term():
    radial, csf = noddish_kernel_table(np.array([0.0, 1000.0]), DiffusivitySet(),
                                       VolumeFractions(0.0, 0.0, 1.0), 2)
    assert np.all(radial == 0)
    np.testing.assert_allclose(csf, np.sqrt(4 * np.pi) * np.exp([0.0, -3.0]))


@pytest.mark.parametrize("vals", [(0.5, 0.5, 0.1), (1.2, -0.2, 0.0), (0.3, 0.3, 0.3)])
def test_fraction_validation(vals):
    with pytest.raises(InvalidArgumentError):
        VolumeFractions(*vals)


@pytest.mark.parametrize("vals", [(1e-3, 2e-3), (5e-3, 1e-3), (1e-3, -1e-4)])
def test_diffusivity_validation(vals):
    with pytest.raises(InvalidArgumentError):
        DiffusivitySet(*vals)


def test_basis_order_validation(hcp):
    with pytest.raises(InvalidArgumentError):
        forecast_basis(hcp, DiffusivitySet(), 10)
    with pytest.raises(InvalidArgumentError):
        noddish_basis(hcp, DiffusivitySet(), (0.5, 0.5, 0.0))


def test_reference_values():
    assert phi_l(0, 1.0) == pytest.approx(1.4936483, abs=1e-7)
    for xi in (0.0, 0.3, 1.7, 25.0):
        assert psi_l(0, xi) == phi_l(0, xi)
    assert psi_l(4, 10.0) == pytest.approx(quad_psi(4, 10.0), abs=1e-10)
    assert phi_l(8, 25.0) == pytest.approx(quad_phi(8, 25.0), abs=1e-10)


def test_delta_fodf_along_gradient():
    # order-8 truncation of a delta along z; the exact delta would give exp(-1.7)
    scheme = AcquisitionScheme.from_bvals_bvecs([1000.0], [[0, 0, 1.0]])
    z = np.array([[0, 0, 1.0]])
    c = eval_sh(8, z)[0] / np.sqrt(4 * np.pi) / eval_sh(0, z)[0, 0]
    val = forecast_basis(scheme, DiffusivitySet(1.7e-3, 0.1e-3), 8).values @ c
    assert val[0] == pytest.approx(0.1826835, abs=5e-4)


def test_pure_csf_prediction():
    scheme = AcquisitionScheme.from_bvals_bvecs([1000.0], [[1.0, 0, 0]])
    M = noddish_basis(scheme, DiffusivitySet(), VolumeFractions(0.0, 0.0, 1.0), 8)
    assert M.predict(isotropic_coeffs(8))[0] == pytest.approx(np.exp(-3.0), rel=1e-14)


def test_pure_stick_equals_forecast_with_zero_perp(hcp):
    a = noddish_basis(hcp, DiffusivitySet(), VolumeFractions(1.0, 0.0, 0.0), 8).values
    b = forecast_basis(hcp, DiffusivitySet(1.7e-3, 0.0), 8).values
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_noddish_is_weighted_sum_of_forecast_bases(hcp):
    fr = VolumeFractions(0.7, 0.3, 0.0)
    assert fr.tortuous_perp(1.7e-3) == pytest.approx(0.51e-3)
    a = noddish_basis(hcp, DiffusivitySet(), fr, 8).values
    b = (0.7 * forecast_basis(hcp, DiffusivitySet(1.7e-3, 0.0), 8).values
         + 0.3 * forecast_basis(hcp, DiffusivitySet(1.7e-3, 0.51e-3), 8).values)
    np.testing.assert_allclose(a, b, atol=1e-14)
