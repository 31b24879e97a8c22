"""Voxel-wise fitting of NODDI-SH and FORECAST over whole volumes.

The voxel-independent steps (b=0 normalization, shell means, dictionary
matching) run vectorized in the calling process; the per-voxel QP fits and
peak searches are optionally spread over a process pool. Each voxel's result
depends only on its own data, so the output does not depend on the number of
workers.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import InvalidArgumentError
from .fodf import (CONSTRAINT_GRID_SIZE, SEARCH_GRID_SIZE, FodfFitter, PeakSet,
                   extract_peaks)
from .kernels import (FORECAST, NODDI_SH, DiffusivitySet, VolumeFractions,
                      forecast_basis, noddish_basis)
from .qp import DEFAULT_TOL
from .sh import make_hemisphere_grid, n_coeffs
from .smt import (DictionaryConfig, FractionMatcher, ShellMeans, build_dictionary,
                  estimate_forecast_diffusivities, shell_means)

MODELS = (NODDI_SH, FORECAST)


@dataclass(frozen=True)
class FitConfig:
    """Settings shared by every voxel of a fit."""

    model: str = NODDI_SH
    order: int = 8
    grid_size: int = CONSTRAINT_GRID_SIZE
    search_grid_size: int = SEARCH_GRID_SIZE
    tol: float = DEFAULT_TOL
    max_iter: int = 1000
    diffusivities: DiffusivitySet = field(default_factory=DiffusivitySet)
    dictionary: DictionaryConfig = field(default_factory=DictionaryConfig)
    fractions_only: bool = False
    peaks: bool = True
    rel_threshold: float = 0.5
    min_sep_deg: float = 25.0
    max_peaks: int = 5
    workers: int = 1
    chunk_size: int = 256

    def __post_init__(self):
        if self.model not in MODELS:
            raise InvalidArgumentError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.fractions_only and self.model != NODDI_SH:
            raise InvalidArgumentError("fractions-only mode applies to NODDI-SH")
        if self.workers < 1 or self.chunk_size < 1:
            raise InvalidArgumentError("workers and chunk_size must be positive")
        if self.tol <= 0:
            raise InvalidArgumentError("tol must be positive")


@dataclass
class FitReport:
    """Per-voxel fit outputs; rows follow the input voxel order.

    ``fractions`` is NaN for FORECAST fits, ``lambda_par`` / ``lambda_perp``
    hold the fitted (FORECAST) or fixed (NODDI-SH) diffusivities, and
    ``mse`` is evaluated on every sample of the evaluation scheme.
    """

    fractions: np.ndarray        # (n, 3) nu_ic, nu_ec, nu_csf
    dictionary_index: np.ndarray
    lambda_par: np.ndarray
    lambda_perp: np.ndarray
    coeffs: np.ndarray           # (n, R)
    mse: np.ndarray
    mse_fit: np.ndarray
    converged: np.ndarray
    kkt_residual: np.ndarray
    peaks: List[PeakSet]
    skipped: np.ndarray
    unnormalized: np.ndarray

    @property
    def peak_count(self):
        return np.array([len(p) for p in self.peaks], dtype=int)

    def __len__(self):
        return self.mse.size


def subsample_scheme(scheme, directions_per_shell, max_b=np.inf):
    """Keep the first ``directions_per_shell`` samples of every shell up to ``max_b``.

    All b=0 samples are kept. Returns the new scheme and the indices of its
    samples in the original scheme.
    """
    n = int(directions_per_shell)
    if n != directions_per_shell or n < 1:
        raise InvalidArgumentError(f"directions_per_shell must be a positive integer, got {directions_per_shell!r}")
    keep = []
    for k, b in enumerate(scheme.shell_bvals):
        idx = scheme.shell_indices(k)
        if b == 0:
            keep.append(idx)
        elif b <= max_b + 1e-9:
            if n > idx.size:
                raise InvalidArgumentError(
                    f"requested {n} directions but shell b={b:g} has only {idx.size}")
            keep.append(idx[:n])
    index = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=int)
    if not (scheme.bvals[index] > 0).any():
        raise InvalidArgumentError(f"no diffusion-weighted shell at or below b={max_b:g}")
    return scheme.subset(index), index


def normalize_signal(signal, scheme):
    """Divide each voxel by its mean b=0 value.

    Returns the normalized signal and a mask of voxels that could not be
    normalized (no b=0 samples or a non-positive / non-finite mean).
    """
    signal = np.asarray(signal, dtype=float)
    b0 = scheme.b0_mask
    if not b0.any():
        return signal.copy(), np.zeros(signal.shape[:-1], dtype=bool)
    s0 = signal[..., b0].mean(axis=-1)
    bad = ~(np.isfinite(s0) & (s0 > 0))
    out = signal / np.where(bad, 1.0, s0)[..., None]
    out[bad] = np.nan
    return out, bad


class _VoxelFitter:
    """Per-process cache of bases and QP factorizations."""

    def __init__(self, fit_scheme, eval_scheme, config):
        self.fit_scheme = fit_scheme
        self.eval_scheme = eval_scheme
        self.config = config
        self.grid = make_hemisphere_grid(config.grid_size)
        self.search = make_hemisphere_grid(config.search_grid_size)
        self._cache = {}

    def _noddish(self, key, fractions):
        hit = self._cache.get(key)
        if hit is None:
            cfg = self.config
            fit_b = noddish_basis(self.fit_scheme, cfg.diffusivities, fractions, cfg.order)
            eval_b = noddish_basis(self.eval_scheme, cfg.diffusivities, fractions, cfg.order)
            hit = (FodfFitter(fit_b, self.grid, cfg.tol, cfg.max_iter), eval_b.values)
            self._cache[key] = hit
        return hit

    def _forecast(self, lpar, lperp):
        cfg = self.config
        diff = DiffusivitySet(lpar, lperp, cfg.diffusivities.lambda_csf)
        fit_b = forecast_basis(self.fit_scheme, diff, cfg.order)
        eval_b = forecast_basis(self.eval_scheme, diff, cfg.order)
        return FodfFitter(fit_b, self.grid, cfg.tol, cfg.max_iter), eval_b.values

    def fit(self, signal_fit, signal_eval, key, fractions, lpar, lperp):
        cfg = self.config
        if cfg.model == NODDI_SH:
            fitter, eval_values = self._noddish(key, fractions)
        else:
            fitter, eval_values = self._forecast(lpar, lperp)
        sol = fitter.fit(signal_fit)
        c = sol.coeffs.coeffs
        mse = float(np.mean((signal_eval - eval_values @ c) ** 2))
        mse_fit = sol.residual_norm ** 2 / signal_fit.size
        peaks = None
        if cfg.peaks:
            peaks = extract_peaks(sol.coeffs, self.search, cfg.rel_threshold,
                                  cfg.min_sep_deg, cfg.max_peaks)
        return c, mse, mse_fit, sol.converged, sol.kkt_residual, peaks


_WORKER = None


def _init_worker(fit_scheme, eval_scheme, config):
    global _WORKER
    _WORKER = _VoxelFitter(fit_scheme, eval_scheme, config)


def _run_chunk(args):
    sig_fit, sig_eval, keys, fracs, lpars, lperps = args
    out = []
    for i in range(sig_fit.shape[0]):
        fr = None if fracs is None else VolumeFractions(*fracs[i])
        out.append(_WORKER.fit(sig_fit[i], sig_eval[i], int(keys[i]), fr,
                               float(lpars[i]), float(lperps[i])))
    return out


def fit_voxels(signals, scheme, config=None, fit_indices=None, mask=None):
    """Fit every voxel of an ``(n_voxels, n_samples)`` signal array.

    Parameters
    ----------
    signals : ndarray, shape (n_voxels, n_samples)
        Raw (un-normalized) signal over the full ``scheme``.
    scheme : AcquisitionScheme
    config : FitConfig, optional
    fit_indices : array_like of int, optional
        Samples used for fitting (see :func:`subsample_scheme`). The MSE is
        still evaluated on all samples.
    mask : array_like of bool, optional
        Voxels to fit; others are reported as skipped.

    Returns
    -------
    FitReport
    """
    config = config or FitConfig()
    signals = np.asarray(signals, dtype=float)
    if signals.ndim != 2 or signals.shape[1] != len(scheme):
        raise InvalidArgumentError(
            f"signals must have shape (n_voxels, {len(scheme)}), got {signals.shape}")
    nvox = signals.shape[0]
    if fit_indices is None:
        fit_idx = np.arange(len(scheme))
        fit_scheme = scheme
    else:
        fit_idx = np.asarray(fit_indices, dtype=int)
        fit_scheme = scheme.subset(fit_idx)

    norm_full, bad = normalize_signal(signals, scheme)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if mask.size != nvox:
            raise InvalidArgumentError("mask size does not match the number of voxels")
        bad = bad | ~mask
    norm_fit = norm_full[:, fit_idx]
    ok = np.flatnonzero(~bad)

    R = n_coeffs(config.order)
    fractions = np.full((nvox, 3), np.nan)
    dict_index = np.full(nvox, -1, dtype=int)
    lpar = np.full(nvox, np.nan)
    lperp = np.full(nvox, np.nan)
    coeffs = np.full((nvox, R), np.nan)
    mse = np.full(nvox, np.nan)
    mse_fit = np.full(nvox, np.nan)
    converged = np.zeros(nvox, dtype=bool)
    kkt = np.full(nvox, np.nan)
    peaks = [PeakSet(np.zeros((0, 3)), np.zeros(0)) for _ in range(nvox)]
    unnorm = np.zeros(nvox, dtype=bool)

    means = shell_means(norm_fit[ok], fit_scheme) if ok.size else None
    if ok.size:
        b0 = fit_scheme.shell_bvals == 0
        if b0.any():
            unnorm[ok] = np.abs(means.means[:, b0][:, 0] - 1.0) > 0.5
    if config.model == NODDI_SH and ok.size:
        dictionary = build_dictionary(config.dictionary)
        matcher = FractionMatcher(dictionary, config.diffusivities, fit_scheme.shell_bvals)
        idx, _ = matcher.match(means.means)
        dict_index[ok] = idx
        fractions[ok] = dictionary.fractions[idx]
        lpar[ok] = config.diffusivities.lambda_par
        lperp[ok] = [dictionary.entries[k].tortuous_perp(config.diffusivities.lambda_par)
                     for k in idx]
    elif ok.size:
        for j, v in enumerate(ok):
            est = estimate_forecast_diffusivities(
                ShellMeans(means.bvals, means.means[j], means.counts))
            lpar[v], lperp[v] = est.lambda_par, est.lambda_perp

    if config.fractions_only or not ok.size:
        return FitReport(fractions, dict_index, lpar, lperp, coeffs, mse, mse_fit, converged,
                         kkt, peaks, bad, unnorm)

    # group voxels sharing a basis so each worker reuses its factorizations
    order = ok[np.argsort(dict_index[ok], kind="stable")] if config.model == NODDI_SH else ok
    fr_arr = dictionary.fractions if config.model == NODDI_SH else None
    chunks = []
    for start in range(0, order.size, config.chunk_size):
        sel = order[start:start + config.chunk_size]
        chunks.append((sel, (norm_fit[sel], norm_full[sel], dict_index[sel],
                             None if fr_arr is None else fr_arr[dict_index[sel]],
                             lpar[sel], lperp[sel])))
    if config.workers == 1:
        _init_worker(fit_scheme, scheme, config)
        results = [_run_chunk(args) for _, args in chunks]
    else:
        with ProcessPoolExecutor(config.workers, initializer=_init_worker,
                                 initargs=(fit_scheme, scheme, config)) as pool:
            results = list(pool.map(_run_chunk, [args for _, args in chunks]))
    for (sel, _), res in zip(chunks, results):
        for v, (c, m, mf, conv, k, pk) in zip(sel, res):
            coeffs[v] = c
            mse[v] = m
            mse_fit[v] = mf
            converged[v] = conv
            kkt[v] = k
            if pk is not None:
                peaks[v] = pk
    return FitReport(fractions, dict_index, lpar, lperp, coeffs, mse, mse_fit, converged, kkt,
                     peaks, bad, unnorm)


def fit_volume(volume, scheme, config=None, fit_indices=None, mask=None):
    """Fit a :class:`~noddish.io.VolumeContainer`; see :func:`fit_voxels`."""
    data = volume.voxels() if hasattr(volume, "voxels") else np.asarray(volume).reshape(-1, len(scheme))
    return fit_voxels(data.astype(float), scheme, config, fit_indices, mask)
