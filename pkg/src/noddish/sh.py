"""Real symmetric spherical harmonics and deterministic point sets.

Coefficients are stored band by band (even ``l`` ascending) and, inside a
band, ``m`` runs from ``-l`` to ``l``; the flat index of ``(l, m)`` is
``l * (l + 1) / 2 + m``.
"""
from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np

from .errors import InvalidArgumentError

MAX_SH_ORDER = 16
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
_UNIT_TOL = 1e-10


def n_coeffs(order):
    """Number of real symmetric SH coefficients up to even ``order``."""
    _check_order(order)
    return (order + 1) * (order + 2) // 2


def sh_index(l, m):
    """Flat coefficient index of the even-band harmonic ``(l, m)``."""
    if l < 0 or l % 2 or abs(m) > l:
        raise InvalidArgumentError(f"invalid SH index l={l}, m={m}")
    return l * (l + 1) // 2 + m


@lru_cache(maxsize=None)
def sh_order_degree(order):
    """Return the ``(l, m)`` arrays for every column of an order-``order`` basis."""
    _check_order(order)
    ls, ms = [], []
    for l in range(0, order + 1, 2):
        for m in range(-l, l + 1):
            ls.append(l)
            ms.append(m)
    l_arr = np.array(ls)
    m_arr = np.array(ms)
    l_arr.setflags(write=False)
    m_arr.setflags(write=False)
    return l_arr, m_arr


def _check_order(order):
    if int(order) != order or order < 0 or order % 2 or order > MAX_SH_ORDER:
        raise InvalidArgumentError(
            f"SH order must be an even integer in [0, {MAX_SH_ORDER}], got {order!r}")


def as_unit_directions(dirs, tol=_UNIT_TOL):
    """Validate an ``(n, 3)`` array of unit vectors and return it as float64."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    if dirs.ndim != 2 or dirs.shape[1] != 3 or dirs.shape[0] == 0:
        raise InvalidArgumentError(
            f"directions must have shape (n, 3) with n >= 1, got {dirs.shape}")
    norms = np.linalg.norm(dirs, axis=1)
    bad = np.abs(norms - 1.0) > tol
    if bad.any():
        i = int(np.argmax(bad))
        raise InvalidArgumentError(
            f"direction {i} is not a unit vector (norm {norms[i]:.12g})")
    return dirs


def cart2sphere(dirs):
    """Polar angle from +z and azimuth from +x, azimuth wrapped to [0, 2pi)."""
    dirs = np.asarray(dirs, dtype=float)
    theta = np.arctan2(np.hypot(dirs[..., 0], dirs[..., 1]), dirs[..., 2])
    phi = np.mod(np.arctan2(dirs[..., 1], dirs[..., 0]), 2 * np.pi)
    return theta, phi


def sphere2cart(theta, phi):
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def assoc_legendre(order, x, sin_theta=None):
    """Associated Legendre functions ``P_l^m(x)`` for ``0 <= m <= l <= order``.

    No Condon-Shortley phase. Uses the three-term recurrence in ``l`` at fixed
    ``m``, seeded by ``P_m^m = (2m-1)!! (1-x^2)^(m/2)``. Passing
    ``sin_theta = sqrt(1 - x^2)`` computed from Cartesian components avoids
    the cancellation in ``1 - x^2`` near the poles.

    Returns
    -------
    P : ndarray, shape (order + 1, order + 1, len(x))
        ``P[l, m]``; entries with ``m > l`` are zero.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    P = np.zeros((order + 1, order + 1) + x.shape)
    if sin_theta is None:
        somx2 = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    else:
        somx2 = np.atleast_1d(np.asarray(sin_theta, dtype=float))
    pmm = np.ones_like(x)
    for m in range(order + 1):
        if m > 0:
            pmm = pmm * (2 * m - 1) * somx2
        P[m, m] = pmm
        if m + 1 <= order:
            P[m + 1, m] = x * (2 * m + 1) * pmm
        for l in range(m + 2, order + 1):
            P[l, m] = ((2 * l - 1) * x * P[l - 1, m]
                       - (l + m - 1) * P[l - 2, m]) / (l - m)
    return P


def _sh_norm(l, m):
    return np.sqrt((2 * l + 1) * factorial(l - m) / (4 * np.pi * factorial(l + m)))


def eval_sh(order, dirs):
    """Sample the real symmetric SH basis at a set of directions.

    ``m < 0`` columns hold ``sqrt(2) N P_l^|m|(cos t) cos(|m| p)``, ``m = 0``
    columns ``N P_l^0(cos t)``, and ``m > 0`` columns
    ``sqrt(2) N P_l^m(cos t) sin(m p)``, with
    ``N = sqrt((2l+1)(l-|m|)! / (4 pi (l+|m|)!))``.

    Parameters
    ----------
    order : int
        Even maximum order, at most 16.
    dirs : array_like, shape (n, 3)
        Unit vectors.

    Returns
    -------
    Y : ndarray, shape (n, (order + 1) * (order + 2) / 2)
    """
    _check_order(order)
    dirs = as_unit_directions(dirs)
    _, phi = cart2sphere(dirs)
    P = assoc_legendre(order, dirs[:, 2], np.hypot(dirs[:, 0], dirs[:, 1]))
    ls, ms = sh_order_degree(order)
    Y = np.empty((dirs.shape[0], ls.size))
    for j, (l, m) in enumerate(zip(ls, ms)):
        am = abs(m)
        base = _sh_norm(l, am) * P[l, am]
        if m < 0:
            Y[:, j] = np.sqrt(2.0) * base * np.cos(am * phi)
        elif m == 0:
            Y[:, j] = base
        else:
            Y[:, j] = np.sqrt(2.0) * base * np.sin(m * phi)
    # exact constant for the isotropic column
    Y[:, 0] = 0.5 / np.sqrt(np.pi)
    return Y


@dataclass(frozen=True, eq=False)
class SphericalGrid:
    """A set of hemisphere directions used for constraints and peak search."""

    directions: np.ndarray

    def __post_init__(self):
        d = as_unit_directions(self.directions)
        d = np.array(d, copy=True)
        d.setflags(write=False)
        object.__setattr__(self, "directions", d)

    @property
    def count(self):
        return self.directions.shape[0]

    def __len__(self):
        return self.count

    def sh_matrix(self, order):
        """The cached SH basis sampled on this grid."""
        return _grid_sh(self, order)

    def neighbors(self, k=8):
        """Indices of the ``k`` nearest grid points under the antipodal metric."""
        return _grid_neighbors(self, k)


@lru_cache(maxsize=64)
def _grid_sh(grid, order):
    Y = eval_sh(order, grid.directions)
    Y.setflags(write=False)
    return Y


@lru_cache(maxsize=16)
def _grid_neighbors(grid, k):
    d = grid.directions
    cosang = np.abs(d @ d.T)
    np.fill_diagonal(cosang, -np.inf)
    part = np.argpartition(-cosang, k, axis=1)[:, :k]
    order = np.argsort(-np.take_along_axis(cosang, part, axis=1), axis=1, kind="stable")
    idx = np.take_along_axis(part, order, axis=1)
    idx.setflags(write=False)
    return idx


def fibonacci_sphere(count):
    """Quasi-uniform full-sphere Fibonacci lattice of ``count`` points."""
    i = np.arange(count, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / count
    r = np.sqrt(1.0 - z * z)
    phi = np.mod(i * GOLDEN_ANGLE, 2 * np.pi)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


@lru_cache(maxsize=16)
def make_hemisphere_grid(count=181):
    """Deterministic Fibonacci-spiral grid of ``count`` directions with z > 0.

    Heights are placed at ``1 - (i + 1/2) / count`` so no point lies on the
    equator and no pair can be antipodal.
    """
    if int(count) != count or count < 12:
        raise InvalidArgumentError(f"grid count must be an integer >= 12, got {count!r}")
    count = int(count)
    i = np.arange(count, dtype=float)
    z = 1.0 - (i + 0.5) / count
    r = np.sqrt(1.0 - z * z)
    phi = np.mod(i * GOLDEN_ANGLE, 2 * np.pi)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return SphericalGrid(dirs)


def sh_expand_on_grid(coeffs, grid):
    """Evaluate the SH series ``sum_j c_j Y_j`` at every direction of ``grid``.

    ``coeffs`` may be a plain vector or any object with a ``coeffs`` attribute.
    ``grid`` may be a :class:`SphericalGrid` or an ``(n, 3)`` array.
    """
    c = np.asarray(getattr(coeffs, "coeffs", coeffs), dtype=float)
    if c.ndim != 1:
        raise InvalidArgumentError("coefficients must be a 1-D vector")
    order = _order_from_length(c.size)
    if isinstance(grid, SphericalGrid):
        Y = grid.sh_matrix(order)
    else:
        Y = eval_sh(order, grid)
    return Y @ c


def _order_from_length(n):
    for order in range(0, MAX_SH_ORDER + 1, 2):
        if (order + 1) * (order + 2) // 2 == n:
            return order
    raise InvalidArgumentError(f"{n} is not a valid real symmetric SH coefficient count")


def order_from_length(n):
    """Inverse of :func:`n_coeffs`."""
    return _order_from_length(n)
