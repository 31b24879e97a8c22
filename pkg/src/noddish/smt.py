"""Spherical-mean estimation of volume fractions and FORECAST diffusivities.

The per-shell mean of the signal only depends on the isotropic column of the
signal basis, so it is independent of the fiber orientation distribution.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import InvalidArgumentError
from .kernels import DiffusivitySet, MAX_DIFFUSIVITY, VolumeFractions, psi_l

DEFAULT_CSF_LEVELS = 16
# Calibrated so that the default dictionary has exactly 383 entries; any K in
# [47.679, 47.812] gives that count, this is the midpoint.
DEFAULT_SPLIT_CONSTANT = 47.75


@dataclass(frozen=True)
class ShellMeans:
    """Arithmetic mean of the normalized signal on every shell."""

    bvals: np.ndarray
    means: np.ndarray
    counts: np.ndarray
    unnormalized: bool = False

    @property
    def dw(self):
        """Mask selecting the diffusion-weighted shells."""
        return self.bvals > 0


def shell_means(signal, scheme):
    """Per-shell means of a normalized signal, shells in ascending b.

    ``signal`` may carry leading voxel axes; the last axis runs over samples.
    ``unnormalized`` is set when the b=0 mean is more than 0.5 away from 1.
    """
    signal = np.asarray(signal, dtype=float)
    if signal.shape[-1] != len(scheme):
        raise InvalidArgumentError(
            f"signal has {signal.shape[-1]} samples, scheme has {len(scheme)}")
    counts = np.bincount(scheme.shell_ids, minlength=scheme.n_shells)
    if (counts == 0).any():
        raise InvalidArgumentError("scheme has an empty shell")
    onehot = np.zeros((len(scheme), scheme.n_shells))
    onehot[np.arange(len(scheme)), scheme.shell_ids] = 1.0 / counts[scheme.shell_ids]
    means = signal @ onehot
    flag = False
    if (scheme.shell_bvals == 0).any():
        b0 = means[..., scheme.shell_bvals == 0][..., 0]
        flag = bool(np.any(np.abs(b0 - 1.0) > 0.5))
    return ShellMeans(scheme.shell_bvals.copy(), means, counts, flag)


def predict_mean(fractions, diff, b):
    """Model spherical mean at b-value(s) ``b``.

    ``nu_csf e^{-b l_csf} + 1/2 [nu_ic Psi_0(b l_par)
    + nu_ec e^{-b l_perp} Psi_0(b (l_par - l_perp))]`` with tortuous
    ``l_perp``.
    """
    b = np.asarray(b, dtype=float)
    if (b < 0).any():
        raise InvalidArgumentError("b-values must be non-negative")
    lpar = diff.lambda_par
    lperp = fractions.tortuous_perp(lpar)
    out = (fractions.nu_csf * np.exp(-b * diff.lambda_csf)
           + 0.5 * (fractions.nu_ic * psi_l(0, b * lpar)
                    + fractions.nu_ec * np.exp(-b * lperp) * psi_l(0, b * (lpar - lperp))))
    return out if np.ndim(out) else float(out)


def forecast_mean(lambda_par, lambda_perp, b):
    """FORECAST spherical mean ``1/2 e^{-b l_perp} Psi_0(b (l_par - l_perp))``.

    Broadcasts over all three arguments.
    """
    lpar, lperp, b = np.broadcast_arrays(np.asarray(lambda_par, dtype=float),
                                         np.asarray(lambda_perp, dtype=float),
                                         np.asarray(b, dtype=float))
    return 0.5 * np.exp(-b * lperp) * psi_l(0, b * (lpar - lperp))


@dataclass(frozen=True)
class DictionaryConfig:
    """Construction parameters of the volume-fraction dictionary.

    ``csf_levels`` values of ``nu_csf`` are spaced evenly on [0, 1]; a level
    gets ``max(1, round((1 - nu_csf) * split_constant))`` evenly spaced
    ``nu_ic`` values on [0, 1 - nu_csf].
    """

    csf_levels: int = DEFAULT_CSF_LEVELS
    split_constant: float = DEFAULT_SPLIT_CONSTANT


@dataclass(frozen=True, eq=False)
class FractionDictionary:
    entries: tuple
    fractions: np.ndarray  # (n_entries, 3): nu_ic, nu_ec, nu_csf
    config: DictionaryConfig = field(default_factory=DictionaryConfig)

    def __len__(self):
        return len(self.entries)

    def predicted_means(self, bvals, diff):
        """Model shell means for every entry, shape ``(n_entries, len(bvals))``."""
        bvals = np.asarray(bvals, dtype=float)
        return _dictionary_means(self.fractions, diff, bvals)


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def build_dictionary(config=None):
    """Non-uniform simplex sampling with fewer splits at high CSF fraction.

    Entries are ordered by ascending ``nu_csf`` then ascending ``nu_ic``.
    """
    config = config or DictionaryConfig()
    if config.csf_levels < 1 or config.split_constant < 0:
        raise InvalidArgumentError("dictionary config would produce no entries")
    if config.csf_levels == 1:
        csf = np.array([0.0])
    else:
        csf = np.linspace(0.0, 1.0, config.csf_levels)
    rows = []
    for nu_csf in csf:
        tissue = 1.0 - nu_csf
        n = max(1, _round_half_up(tissue * config.split_constant))
        ic = np.linspace(0.0, tissue, n) if n > 1 else np.array([0.0])
        for nu_ic in ic:
            nu_ec = max(tissue - nu_ic, 0.0)
            rows.append((float(nu_ic), float(nu_ec), float(nu_csf)))
    if not rows:
        raise InvalidArgumentError("dictionary config would produce no entries")
    entries = tuple(VolumeFractions(*r) for r in rows)
    arr = np.array(rows)
    arr.setflags(write=False)
    return FractionDictionary(entries, arr, config)


def _dictionary_means(fr, diff, bvals):
    nu_ic, nu_ec, nu_csf = fr[:, 0:1], fr[:, 1:2], fr[:, 2:3]
    lpar = diff.lambda_par
    tissue = nu_ic + nu_ec
    lperp = np.where(tissue > 0, lpar * nu_ec / np.where(tissue > 0, tissue, 1.0), 0.0)
    lperp = np.minimum(lperp, lpar)
    b = bvals[None, :]
    return (nu_csf * np.exp(-b * diff.lambda_csf)
            + 0.5 * (nu_ic * psi_l(0, b * lpar)
                     + nu_ec * np.exp(-b * lperp) * psi_l(0, b * (lpar - lperp))))


@dataclass(frozen=True)
class FractionEstimate:
    fractions: VolumeFractions
    index: int
    residual: float
    single_shell: bool = False


_MATCH_CHUNK = 2048


class FractionMatcher:
    """Exhaustive dictionary search against observed shell means.

    Precomputes the dictionary's predicted means for a fixed set of shell
    b-values so that many voxels can be matched at once.
    """

    def __init__(self, dictionary, diff, bvals):
        if len(dictionary) == 0:
            raise InvalidArgumentError("empty dictionary")
        self.dictionary = dictionary
        self.diff = diff
        self.bvals = np.asarray(bvals, dtype=float)
        self.dw = self.bvals > 0
        self.table = dictionary.predicted_means(self.bvals[self.dw], diff)

    def match(self, means):
        """Best entry index and residual for one or many voxels.

        ``means`` has shape ``(..., n_shells)`` matching ``bvals``. The
        residual is the sum of squared differences over the b>0 shells; ties
        resolve to the lowest index.
        """
        obs = np.asarray(means, dtype=float)[..., self.dw]
        flat = obs.reshape(-1, obs.shape[-1])
        idx = np.empty(flat.shape[0], dtype=int)
        resid = np.empty(flat.shape[0])
        for start in range(0, flat.shape[0], _MATCH_CHUNK):
            chunk = flat[start:start + _MATCH_CHUNK]
            r = ((self.table[None, :, :] - chunk[:, None, :]) ** 2).sum(axis=-1)
            best = np.argmin(r, axis=1)
            idx[start:start + _MATCH_CHUNK] = best
            resid[start:start + _MATCH_CHUNK] = r[np.arange(best.size), best]
        return idx.reshape(obs.shape[:-1]), resid.reshape(obs.shape[:-1])


def estimate_fractions(means, dictionary, diff=None):
    """Dictionary entry whose predicted shell means best match ``means``.

    Parameters
    ----------
    means : ShellMeans
        Observed means of a single voxel.
    dictionary : FractionDictionary
    diff : DiffusivitySet, optional
        Defaults to ``lambda_par = 1.7e-3``.

    Returns
    -------
    FractionEstimate
        ``single_shell`` flags data with fewer than two b>0 shells.
    """
    if len(dictionary) == 0:
        raise InvalidArgumentError("empty dictionary")
    diff = diff or DiffusivitySet()
    table = dictionary.predicted_means(means.bvals[means.dw], diff)
    obs = np.asarray(means.means, dtype=float)[means.dw]
    resid = ((table - obs[None, :]) ** 2).sum(axis=1)
    k = int(np.argmin(resid))
    return FractionEstimate(dictionary.entries[k], k, float(resid[k]),
                            single_shell=int(means.dw.sum()) < 2)


@dataclass(frozen=True)
class ForecastDiffusivities:
    lambda_par: float
    lambda_perp: float
    residual: float
    degenerate: bool = False


LAMBDA_PAR_RANGE = (0.1e-3, MAX_DIFFUSIVITY)
_MAX_MOVES = 64


def estimate_forecast_diffusivities(means, grid=50, refine_iters=20):
    """Fit ``(lambda_par, lambda_perp)`` to the shell means.

    A ``grid x grid`` search over ``lambda_par`` in [1e-4, 4e-3] and the
    ratio ``lambda_perp / lambda_par`` in [0, 1] is followed by ``refine_iters`` rounds
    of a bounded 3x3 pattern search; each round moves while the residual
    improves and then halves the step. A bounded L-BFGS-B run polishes the
    result.
    """
    b = np.asarray(means.bvals, dtype=float)
    dw = b > 0
    b = b[dw]
    obs = np.asarray(means.means, dtype=float)[dw]
    if b.size == 0 or np.all(obs >= 1.0 - 1e-12):
        return ForecastDiffusivities(0.0, 0.0, float(((obs - 1.0) ** 2).sum()), True)

    lo, hi = LAMBDA_PAR_RANGE

    def cost(lpar, lperp):
        lpar = np.asarray(lpar, dtype=float)
        lperp = np.asarray(lperp, dtype=float)
        pred = forecast_mean(lpar[..., None], lperp[..., None], b)
        return ((pred - obs) ** 2).sum(axis=-1)

    # search in (lambda_par, lambda_perp / lambda_par) so the constraint
    # lambda_perp <= lambda_par is a fixed box edge
    par_axis = np.linspace(lo, hi, grid)
    frac_axis = np.linspace(0.0, 1.0, grid)
    P, F = np.meshgrid(par_axis, frac_axis, indexing="ij")
    C = cost(P, P * F)
    i, j = np.unravel_index(int(np.argmin(C)), C.shape)
    lpar, frac = P[i, j], F[i, j]
    best = C[i, j]

    step = np.array([(hi - lo) / (grid - 1), 1.0 / (grid - 1)])
    offsets = np.array([(a, c) for a in (-1, 0, 1) for c in (-1, 0, 1)], dtype=float)
    for _ in range(refine_iters):
        for _ in range(_MAX_MOVES):
            cand = np.array([lpar, frac]) + offsets * step
            cand[:, 0] = np.clip(cand[:, 0], lo, hi)
            cand[:, 1] = np.clip(cand[:, 1], 0.0, 1.0)
            vals = cost(cand[:, 0], cand[:, 0] * cand[:, 1])
            k = int(np.argmin(vals))
            if not vals[k] < best:
                break
            best = vals[k]
            lpar, frac = cand[k]
        step = step / 2
    # the pattern search stalls in the curved valley near isotropy; polish
    # with a bounded quasi-Newton step in rescaled coordinates
    scale = 1e3
    polish = minimize(lambda v: cost(v[0] / scale, v[0] / scale * v[1]) * 1e6,
                      [lpar * scale, frac], method="L-BFGS-B",
                      bounds=[(lo * scale, hi * scale), (0.0, 1.0)],
                      options={"ftol": 1e-30, "gtol": 1e-14, "maxiter": 500})
    p_lpar, p_frac = polish.x[0] / scale, polish.x[1]
    p_cost = float(cost(p_lpar, p_lpar * p_frac))
    if p_cost < best:
        lpar, frac, best = p_lpar, p_frac, p_cost
    lperp = lpar * frac
    return ForecastDiffusivities(float(lpar), float(lperp), float(best))
