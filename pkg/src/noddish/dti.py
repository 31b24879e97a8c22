"""Diffusion tensor fit and single-fiber response estimation."""
import warnings
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError
from .kernels import DiffusivitySet, MAX_DIFFUSIVITY

DEFAULT_FA_THRESHOLD = 0.8
_MIN_SIGNAL = 1e-8


class TensorFit(NamedTuple):
    evals: np.ndarray   # (..., 3) descending
    evecs: np.ndarray   # (..., 3, 3) columns match evals
    s0: np.ndarray

    @property
    def fa(self):
        return fractional_anisotropy(self.evals)


class ResponseEstimate(NamedTuple):
    diffusivities: DiffusivitySet
    n_voxels: int
    fallback: bool


def design_matrix(bvals, bvecs):
    """Log-linear design with columns ``Dxx, Dyy, Dzz, Dxy, Dxz, Dyz, log S0``."""
    b = np.asarray(bvals, dtype=float)
    g = np.asarray(bvecs, dtype=float)
    x, y, z = g[:, 0], g[:, 1], g[:, 2]
    return np.stack([-b * x * x, -b * y * y, -b * z * z,
                     -2 * b * x * y, -2 * b * x * z, -2 * b * y * z,
                     np.ones_like(b)], axis=1)


def fit_tensor(signal, scheme, shell=None):
    """Weighted log-linear tensor fit.

    Uses the b=0 samples and a single diffusion-weighted shell (by default the
    lowest). Weights are the squared signal predicted by an ordinary
    log-linear fit.

    Parameters
    ----------
    signal : ndarray, shape (..., n_samples)
    scheme : AcquisitionScheme
    shell : int, optional
        Index into ``scheme.shell_bvals``; defaults to the lowest b>0 shell.

    Returns
    -------
    TensorFit
    """
    signal = np.asarray(signal, dtype=float)
    if signal.shape[-1] != len(scheme):
        raise InvalidArgumentError(
            f"signal has {signal.shape[-1]} samples, scheme has {len(scheme)}")
    dw_shells = np.flatnonzero(scheme.shell_bvals > 0)
    if dw_shells.size == 0:
        raise InvalidArgumentError("tensor fit needs at least one diffusion-weighted shell")
    shell = int(dw_shells[0]) if shell is None else int(shell)
    sel = (scheme.shell_ids == shell) | scheme.b0_mask
    if np.count_nonzero(scheme.shell_ids == shell) < 6:
        raise InvalidArgumentError("tensor fit needs at least 6 directions on the shell")
    X = design_matrix(scheme.bvals[sel], scheme.directions[sel])
    lead = signal.shape[:-1]
    S = np.clip(signal[..., sel].reshape(-1, X.shape[0]), _MIN_SIGNAL, None)
    logS = np.log(S)
    ols = np.linalg.lstsq(X, logS.T, rcond=None)[0].T
    w = np.exp(2 * (ols @ X.T))
    XtW = X.T[None, :, :] * w[:, None, :]
    normal = XtW @ X
    rhs = (XtW @ logS[..., None])[..., 0]
    coef = np.linalg.solve(normal, rhs[..., None])[..., 0]
    D = np.empty((coef.shape[0], 3, 3))
    D[:, 0, 0], D[:, 1, 1], D[:, 2, 2] = coef[:, 0], coef[:, 1], coef[:, 2]
    D[:, 0, 1] = D[:, 1, 0] = coef[:, 3]
    D[:, 0, 2] = D[:, 2, 0] = coef[:, 4]
    D[:, 1, 2] = D[:, 2, 1] = coef[:, 5]
    evals, evecs = np.linalg.eigh(D)
    evals, evecs = evals[:, ::-1], evecs[:, :, ::-1]
    return TensorFit(evals.reshape(lead + (3,)), evecs.reshape(lead + (3, 3)),
                     np.exp(coef[:, 6]).reshape(lead))


def fractional_anisotropy(evals):
    """FA of eigenvalue triples along the last axis; 0 for an all-zero tensor."""
    ev = np.asarray(evals, dtype=float)
    md = ev.mean(axis=-1, keepdims=True)
    num = np.sqrt(((ev - md) ** 2).sum(axis=-1))
    den = np.sqrt((ev ** 2).sum(axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.sqrt(1.5) * num / den
    return np.where(den > 0, fa, 0.0)


def estimate_response(signal, scheme, fa_threshold=DEFAULT_FA_THRESHOLD, mask=None):
    """Average tensor eigenvalues over voxels with FA above ``fa_threshold``.

    ``lambda_par`` is the mean largest eigenvalue, ``lambda_perp`` the mean of
    the two smaller ones. If no voxel qualifies, the defaults
    ``(1.7e-3, 0.1e-3)`` are returned with a warning.
    """
    if not 0 <= fa_threshold < 1:
        raise InvalidArgumentError(f"fa_threshold must lie in [0, 1), got {fa_threshold!r}")
    signal = np.asarray(signal, dtype=float)
    flat = signal.reshape(-1, signal.shape[-1])
    keep = np.ones(flat.shape[0], dtype=bool)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool).reshape(-1)
    fit = fit_tensor(flat[keep], scheme)
    ev = fit.evals
    ok = ((fit.fa > fa_threshold) & np.all(np.isfinite(ev), axis=1) & (ev[:, 2] >= 0)
          & (ev[:, 0] <= MAX_DIFFUSIVITY))
    if not ok.any():
        warnings.warn(f"no voxel has FA > {fa_threshold}; using default diffusivities",
                      RuntimeWarning, stacklevel=2)
        return ResponseEstimate(DiffusivitySet(), 0, True)
    lpar = float(ev[ok, 0].mean())
    lperp = float(ev[ok, 1:].mean())
    return ResponseEstimate(DiffusivitySet(lpar, min(lperp, lpar)), int(ok.sum()), False)
