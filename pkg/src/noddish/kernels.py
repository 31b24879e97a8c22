"""Analytic Funk-Hecke kernels and the FORECAST / NODDI-SH signal bases.

For an axially symmetric Gaussian response the spherical convolution with
``Y_l^m`` reduces to ``2 pi exp(-b lambda_perp) Psi_l(b (lambda_par -
lambda_perp)) Y_l^m(u)`` where

    Phi_l(xi) = int_{-1}^{1} t^l exp(-xi t^2) dt
    Psi_l(xi) = int_{-1}^{1} P_l(t) exp(-xi t^2) dt
"""
from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy.special import erf

from .errors import InvalidArgumentError
from .sh import eval_sh, n_coeffs, sh_order_degree

MAX_KERNEL_ORDER = 8
LAMBDA_CSF = 3.0e-3
MAX_DIFFUSIVITY = 4.0e-3

# Below this xi the closed forms lose digits to cancellation (the numerator
# of Phi_8 shrinks like xi^4.5); the power series is used instead.
SERIES_THRESHOLD = 1.0
_SERIES_TERMS = 32

# Legendre polynomial coefficients of t^0, t^2, ..., t^l, each over a divisor.
_LEGENDRE = {
    0: ((1,), 1),
    2: ((-1, 3), 2),
    4: ((3, -30, 35), 8),
    6: ((-5, 105, -315, 231), 16),
    8: ((35, -1260, 6930, -12012, 6435), 128),
}

FORECAST = "FORECAST"
NODDI_SH = "NODDI-SH"


def _check_l(l):
    if l not in _LEGENDRE:
        raise InvalidArgumentError(f"kernel order must be one of 0, 2, 4, 6, 8; got {l!r}")


def _as_xi(xi):
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)) or (xi < 0).any():
        raise InvalidArgumentError("xi must be finite and non-negative")
    return xi


def _phi_series(l, xi):
    k = np.arange(_SERIES_TERMS)
    coef = np.array([(-1.0) ** j / factorial(j) * 2.0 / (l + 2 * j + 1) for j in k])
    powers = xi[..., None] ** k
    return powers @ coef


def _phi_closed(l, xi):
    s = np.sqrt(xi)
    e = np.exp(-xi)
    erf_term = np.sqrt(np.pi) * erf(s)
    if l == 0:
        return erf_term / s
    if l == 2:
        return (erf_term - 2 * e * s) / (2 * xi ** 1.5)
    if l == 4:
        return (3 * erf_term - 2 * e * s * (2 * xi + 3)) / (4 * xi ** 2.5)
    if l == 6:
        return (15 * erf_term - 2 * e * s * (4 * xi ** 2 + 10 * xi + 15)) / (8 * xi ** 3.5)
    return (105 * erf_term
            - 2 * e * s * (8 * xi ** 3 + 28 * xi ** 2 + 70 * xi + 105)) / (16 * xi ** 4.5)


def phi_l(l, xi):
    """``int_{-1}^{1} t^l exp(-xi t^2) dt`` for even ``l <= 8``.

    Vectorized over ``xi``. Uses the closed form for ``xi >= 1`` and the
    Taylor series of the integrand otherwise; ``phi_l(l, 0) == 2 / (l + 1)``.
    """
    _check_l(l)
    xi = _as_xi(xi)
    small = xi < SERIES_THRESHOLD
    out = np.empty(xi.shape)
    if small.any():
        out[small] = _phi_series(l, xi[small])
    if (~small).any():
        out[~small] = _phi_closed(l, xi[~small])
    return out if out.ndim else float(out)


def psi_l(l, xi):
    """``int_{-1}^{1} P_l(t) exp(-xi t^2) dt``, the Legendre-weighted kernel."""
    _check_l(l)
    xi = _as_xi(xi)
    coeffs, div = _LEGENDRE[l]
    total = np.zeros(xi.shape)
    for k, a in enumerate(coeffs):
        total = total + a * np.asarray(phi_l(2 * k, xi))
    total = total / div
    return total if total.ndim else float(total)


@dataclass(frozen=True)
class DiffusivitySet:
    """Compartment diffusivities in mm^2/s."""

    lambda_par: float = 1.7e-3
    lambda_perp: float = 0.1e-3
    lambda_csf: float = LAMBDA_CSF

    def __post_init__(self):
        if not 0 <= self.lambda_perp <= self.lambda_par <= MAX_DIFFUSIVITY:
            raise InvalidArgumentError(
                "diffusivities must satisfy 0 <= lambda_perp <= lambda_par <= 4e-3, got "
                f"lambda_par={self.lambda_par}, lambda_perp={self.lambda_perp}")
        if not self.lambda_csf > 0:
            raise InvalidArgumentError("lambda_csf must be positive")


@dataclass(frozen=True)
class VolumeFractions:
    """Intra-cellular, extra-cellular and CSF volume fractions."""

    nu_ic: float
    nu_ec: float
    nu_csf: float

    def __post_init__(self):
        vals = (self.nu_ic, self.nu_ec, self.nu_csf)
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise InvalidArgumentError(f"volume fractions must lie in [0, 1], got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise InvalidArgumentError(f"volume fractions must sum to 1, got {sum(vals)!r}")

    def tortuous_perp(self, lambda_par):
        """Extra-cellular perpendicular diffusivity from the tortuosity rule."""
        tissue = self.nu_ic + self.nu_ec
        if tissue <= 0:
            return 0.0
        return min(lambda_par, lambda_par * self.nu_ec / tissue)

    def as_tuple(self):
        return (self.nu_ic, self.nu_ec, self.nu_csf)


@dataclass(frozen=True, eq=False)
class SignalBasisMatrix:
    """Linear map from fODF SH coefficients to predicted signal samples."""

    values: np.ndarray
    model: str
    order: int
    diffusivities: DiffusivitySet
    fractions: VolumeFractions = None

    def predict(self, coeffs):
        return self.values @ np.asarray(getattr(coeffs, "coeffs", coeffs), dtype=float)


def _check_basis_order(order):
    if order not in (0, 2, 4, 6, 8):
        raise InvalidArgumentError(f"basis order must be even and <= {MAX_KERNEL_ORDER}, got {order!r}")


def _dw_sh(scheme, order):
    """SH matrix at the scheme's directions, zero rows at b=0."""
    dw = ~scheme.b0_mask
    Y = np.zeros((len(scheme), n_coeffs(order)))
    if dw.any():
        Y[dw] = eval_sh(order, scheme.directions[dw])
    return Y, dw


def _kernel_table(order, xi):
    """``Psi_l(xi)`` expanded to one column per ``(l, m)``."""
    ls, _ = sh_order_degree(order)
    per_l = {l: np.asarray(psi_l(l, xi)) for l in range(0, order + 1, 2)}
    return np.stack([per_l[l] for l in ls], axis=-1)


def _finish_b0_rows(values, dw):
    values[~dw] = 0.0
    values[~dw, 0] = np.sqrt(4 * np.pi)
    return values


def forecast_basis(scheme, diff, order=8):
    """FORECAST basis: ``2 pi exp(-b lperp) Psi_l(b (lpar - lperp)) Y_l^m(u)``.

    Rows at b=0 keep only the isotropic column, equal to ``sqrt(4 pi)``.
    """
    _check_basis_order(order)
    if diff.lambda_perp > diff.lambda_par:
        raise InvalidArgumentError("lambda_perp must not exceed lambda_par")
    b = scheme.bvals
    Y, dw = _dw_sh(scheme, order)
    kern = _kernel_table(order, b * (diff.lambda_par - diff.lambda_perp))
    values = 2 * np.pi * np.exp(-b * diff.lambda_perp)[:, None] * kern * Y
    values = _finish_b0_rows(values, dw)
    values.setflags(write=False)
    return SignalBasisMatrix(values, FORECAST, order, diff)


def noddish_kernel_table(bvals, diff, fractions, order=8):
    """Per-sample, per-column radial weights of the NODDI-SH basis.

    The returned array multiplies ``Y_l^m(u)`` entrywise; the CSF term for
    the isotropic column is included as a separate additive array.
    """
    b = np.asarray(bvals, dtype=float)
    lpar = diff.lambda_par
    lperp = fractions.tortuous_perp(lpar)
    radial = 2 * np.pi * (
        fractions.nu_ic * _kernel_table(order, b * lpar)
        + fractions.nu_ec * np.exp(-b * lperp)[:, None] * _kernel_table(order, b * (lpar - lperp)))
    csf = np.sqrt(4 * np.pi) * fractions.nu_csf * np.exp(-b * diff.lambda_csf)
    return radial, csf


def noddish_basis(scheme, diff, fractions, order=8):
    """NODDI-SH basis for one set of volume fractions.

    The extra-cellular perpendicular diffusivity follows the tortuosity rule
    ``lambda_par * nu_ec / (nu_ec + nu_ic)``; ``diff.lambda_perp`` is unused.
    """
    _check_basis_order(order)
    if not isinstance(fractions, VolumeFractions):
        raise InvalidArgumentError("fractions must be a VolumeFractions instance")
    Y, dw = _dw_sh(scheme, order)
    radial, csf = noddish_kernel_table(scheme.bvals, diff, fractions, order)
    values = radial * Y
    # the CSF term integrates Y_0^0 against 1: only the isotropic column
    values[:, 0] += csf
    values = _finish_b0_rows(values, dw)
    values.setflags(write=False)
    return SignalBasisMatrix(values, NODDI_SH, order, diff, fractions)


def isotropic_coeffs(order=8):
    """Coefficients of the uniform fODF, ``c_00 = 1 / sqrt(4 pi)``."""
    c = np.zeros(n_coeffs(order))
    c[0] = 1.0 / np.sqrt(4 * np.pi)
    return c
