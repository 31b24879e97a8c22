"""Constrained fODF estimation, peak extraction and angular error."""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError
from .qp import DEFAULT_TOL, LeastSquaresQP
from .sh import (SphericalGrid, as_unit_directions, eval_sh, make_hemisphere_grid,
                 n_coeffs, order_from_length)

C00 = 1.0 / np.sqrt(4 * np.pi)
CONSTRAINT_GRID_SIZE = 181
SEARCH_GRID_SIZE = 3000
FEASIBILITY_TOL = 1e-8


@dataclass(frozen=True)
class FodfCoefficients:
    """SH coefficients of a unit-mass fODF (``c_00 = 1/sqrt(4 pi)``)."""

    coeffs: np.ndarray
    order: int

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 1 or c.size != n_coeffs(self.order):
            raise InvalidArgumentError(
                f"expected {n_coeffs(self.order)} coefficients for order {self.order}, got {c.shape}")
        if abs(c[0] - C00) > 1e-10:
            raise InvalidArgumentError(f"c_00 must equal 1/sqrt(4 pi), got {c[0]!r}")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def from_vector(cls, c):
        c = np.asarray(c, dtype=float)
        return cls(c, order_from_length(c.size))


@dataclass(frozen=True)
class QpSolution:
    coeffs: FodfCoefficients
    residual_norm: float
    kkt_residual: float
    iterations: int
    converged: bool


class FodfFitter:
    """Positivity-constrained fODF fit for a fixed signal basis.

    ``c_00`` is eliminated by substitution, leaving
    ``min ||(E - M_0 c_00) - M_r x||^2  s.t.  Y_r x >= -Y_0 c_00`` on the
    constraint grid, where the ``_0``/``_r`` subscripts split off the
    isotropic column.
    """

    def __init__(self, basis_values, constraint_grid=None, tol=DEFAULT_TOL,
                 max_iter=1000):
        M = np.asarray(getattr(basis_values, "values", basis_values), dtype=float)
        self.order = order_from_length(M.shape[1])
        grid = constraint_grid if constraint_grid is not None else make_hemisphere_grid(CONSTRAINT_GRID_SIZE)
        if isinstance(grid, SphericalGrid):
            Y = grid.sh_matrix(self.order)
        else:
            Y = eval_sh(self.order, grid)
        if Y.shape[0] == 0:
            raise InvalidArgumentError("constraint grid is empty")
        self.M = M
        self.Y = Y
        self.offset = M[:, 0] * C00
        self.qp = LeastSquaresQP(M[:, 1:], Y[:, 1:], -Y[:, 0] * C00, tol=tol,
                                 max_iter=max_iter)

    def fit(self, signal):
        signal = np.asarray(signal, dtype=float)
        if signal.shape != (self.M.shape[0],):
            raise InvalidArgumentError(
                f"signal length {signal.shape} does not match basis rows {self.M.shape[0]}")
        res = self.qp.solve(signal - self.offset)
        c = np.concatenate([[C00], res.x])
        resid = float(np.linalg.norm(signal - self.M @ c))
        return QpSolution(FodfCoefficients(c, self.order), resid, res.kkt_residual,
                          res.iterations, res.converged)


def fit_fodf(signal, basis, constraint_grid=None, tol=DEFAULT_TOL):
    """Solve ``min ||E - M c||^2`` with ``Y c >= 0`` on the grid and fixed ``c_00``."""
    return FodfFitter(basis, constraint_grid, tol).fit(signal)


class PeakSet(NamedTuple):
    directions: np.ndarray
    amplitudes: np.ndarray

    def __len__(self):
        return self.amplitudes.size


def _empty_peaks():
    return PeakSet(np.zeros((0, 3)), np.zeros(0))


def _tangent_basis(d):
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return e1, e2


def _refine(d, values, nbr_dirs, coeffs, order):
    """Quadratic fit in the tangent plane; falls back to the grid point."""
    e1, e2 = _tangent_basis(d)
    pts = np.vstack([d, nbr_dirs])
    x = pts @ e1
    y = pts @ e2
    design = np.stack([np.ones_like(x), x, y, x * x, x * y, y * y], axis=1)
    sol, *_ = np.linalg.lstsq(design, values, rcond=None)
    _, b, c, dxx, dxy, dyy = sol
    hess = np.array([[2 * dxx, dxy], [dxy, 2 * dyy]])
    if np.linalg.det(hess) <= 0 or hess[0, 0] >= 0:
        return d, values[0]
    off = np.linalg.solve(hess, -np.array([b, c]))
    if np.hypot(*off) > np.hypot(x[1:], y[1:]).max():
        return d, values[0]
    new = d + off[0] * e1 + off[1] * e2
    new /= np.linalg.norm(new)
    amp = float((eval_sh(order, new[None, :]) @ coeffs)[0])
    if amp < values[0]:
        return d, values[0]
    return new, amp


def extract_peaks(coeffs, search_grid=None, rel_threshold=0.5, min_sep_deg=25.0,
                  max_peaks=5, neighbors=8):
    """Local maxima of the fODF, filtered by amplitude and separation.

    Parameters
    ----------
    coeffs : FodfCoefficients or array_like
    search_grid : SphericalGrid, optional
        Defaults to a 3000-point hemisphere grid.
    rel_threshold : float
        Peaks below ``rel_threshold * max`` are discarded.
    min_sep_deg : float
        Minimum axis-to-axis angle between kept peaks.
    max_peaks : int

    Returns
    -------
    PeakSet
        Directions (z >= 0 hemisphere) and amplitudes, descending.
    """
    if not 0 < rel_threshold < 1:
        raise InvalidArgumentError("rel_threshold must lie in (0, 1)")
    if min_sep_deg <= 0:
        raise InvalidArgumentError("min_sep_deg must be positive")
    c = np.asarray(getattr(coeffs, "coeffs", coeffs), dtype=float)
    order = order_from_length(c.size)
    grid = search_grid if search_grid is not None else make_hemisphere_grid(SEARCH_GRID_SIZE)
    vals = grid.sh_matrix(order) @ c
    vmax, vmin = vals.max(), vals.min()
    if vmax <= 0 or vmax - vmin <= 1e-8 * abs(vmax):
        return _empty_peaks()
    nbr = grid.neighbors(neighbors)
    is_max = vals >= vals[nbr].max(axis=1)
    cand = np.flatnonzero(is_max & (vals >= rel_threshold * vmax))
    cand = cand[np.argsort(-vals[cand], kind="stable")]
    dirs = grid.directions
    cos_sep = np.cos(np.deg2rad(min_sep_deg))
    refined = []
    for i in cand:
        nd = dirs[nbr[i]]
        nd = nd * np.sign(nd @ dirs[i])[:, None]
        refined.append(_refine(dirs[i], np.concatenate([[vals[i]], vals[nbr[i]]]), nd, c, order))
    refined.sort(key=lambda t: -t[1])
    top = max((a for _, a in refined), default=vmax)
    kept_d, kept_a = [], []
    for d, a in refined:
        if a < rel_threshold * top:
            continue
        if any(abs(d @ k) > cos_sep for k in kept_d):
            continue
        kept_d.append(d if d[2] >= 0 else -d)
        kept_a.append(a)
        if len(kept_d) == max_peaks:
            break
    if not kept_d:
        return _empty_peaks()
    return PeakSet(np.array(kept_d), np.array(kept_a))


class AngularError(NamedTuple):
    degrees: float
    no_peaks: bool


def axis_angle_deg(a, b):
    """Angle between two axes in degrees, in [0, 90]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cos = np.abs(a @ b.T) / (np.linalg.norm(a, axis=-1)[..., None] * np.linalg.norm(b, axis=-1))
    return np.rad2deg(np.arccos(np.clip(cos, 0.0, 1.0)))


def angular_error(peaks, ground_truth):
    """Mean over ground-truth axes of the angle to the closest peak.

    An empty peak set scores 90 degrees and sets ``no_peaks``.
    """
    gt = as_unit_directions(ground_truth, tol=1e-6)
    dirs = getattr(peaks, "directions", peaks)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    if dirs.shape[0] == 0:
        return AngularError(90.0, True)
    ang = axis_angle_deg(gt, dirs)
    return AngularError(float(ang.min(axis=1).mean()), False)
