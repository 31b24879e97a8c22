"""Synthetic fanning and crossing phantoms built from Kent-distributed sticks.

Each voxel draws ``M`` fiber axes from one or two Kent distributions and
averages a stick (intra-cellular) plus a zeppelin (extra-cellular) response
over them; an optional free-water term and Rician noise complete the signal.
"""
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import gammaln, ive, logsumexp

from .errors import InvalidArgumentError, NumericError
from .kernels import DiffusivitySet, VolumeFractions
from .sh import as_unit_directions

SERIES_RTOL = 1e-15
SERIES_MAX_TERMS = 200
MIN_ACCEPTANCE = 1e-6
DEFAULT_DIRECTIONS = 100

KAPPAS = (128.0, 32.0, 4.0)
BETA_RATIOS = (0.0, 0.25, 0.5)
IN_PLANE_ROTATIONS_DEG = (0.0, 60.0, 120.0)
NU_IC_LEVELS = tuple(np.round(np.linspace(0.6, 1.0, 9), 10))
CROSSING_ANGLES_DEG = (90.0, 60.0, 45.0)
N_ORIENTATIONS = 11


def make_rng(seed):
    """Counter-based generator (Philox) for a non-negative 64-bit seed."""
    if int(seed) != seed or not 0 <= seed < 2 ** 64:
        raise InvalidArgumentError(f"seed must be an integer in [0, 2**64), got {seed!r}")
    return np.random.Generator(np.random.Philox(int(seed)))


def voxel_seed(root_seed, index):
    """Per-voxel seed, ``root_seed XOR index``."""
    return (int(root_seed) ^ int(index)) & (2 ** 64 - 1)


@dataclass(frozen=True, eq=False)
class KentParams:
    """Five-parameter Kent (FB5) distribution on the sphere.

    ``beta`` is restricted to ``[0, kappa / 2]`` so the density has a single
    mode at ``mu``.
    """

    kappa: float
    beta: float
    mu: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.kappa) or self.kappa < 0:
            raise InvalidArgumentError(f"kappa must be finite and >= 0, got {self.kappa!r}")
        if not 0 <= self.beta <= self.kappa / 2:
            raise InvalidArgumentError(
                f"beta must lie in [0, kappa/2] = [0, {self.kappa / 2}], got {self.beta!r}")
        frame = np.array([self.mu, self.gamma1, self.gamma2], dtype=float)
        if frame.shape != (3, 3):
            raise InvalidArgumentError("mu, gamma1 and gamma2 must be 3-vectors")
        if np.abs(frame @ frame.T - np.eye(3)).max() > 1e-10:
            raise InvalidArgumentError("mu, gamma1 and gamma2 must be mutually orthonormal")
        for name, row in zip(("mu", "gamma1", "gamma2"), frame):
            row = row.copy()
            row.setflags(write=False)
            object.__setattr__(self, name, row)

    @classmethod
    def from_axis(cls, kappa, beta, mu, rotation_deg=0.0):
        """Build the frame from ``mu`` and an in-plane rotation of the dispersion axes."""
        mu = _unit(mu)
        e1, e2 = perpendicular_frame(mu)
        psi = np.deg2rad(rotation_deg)
        g1 = np.cos(psi) * e1 + np.sin(psi) * e2
        g2 = np.cross(mu, g1)
        return cls(float(kappa), float(beta), mu, g1, g2)


def _unit(v):
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if v.shape != (3,) or not norm > 0:
        raise InvalidArgumentError(f"expected a non-zero 3-vector, got {v!r}")
    return v / norm


def perpendicular_frame(mu):
    """Deterministic orthonormal pair ``(e1, e2)`` with ``e1 x e2 = mu``."""
    mu = _unit(mu)
    helper = np.array([0.0, 0.0, 1.0]) if abs(mu[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = helper - (helper @ mu) * mu
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(mu, e1)
    return e1, e2


def kent_log_normalizer(kappa, beta):
    """``log c(kappa, beta)`` from the Bessel series.

    ``c = 2 pi sum_j Gamma(j + 1/2) / Gamma(j + 1) beta^(2j) (2/kappa)^(2j + 1/2)
    I_(2j + 1/2)(kappa)``, summed in log space and truncated once a term drops
    below ``1e-15`` of the partial sum.
    """
    if kappa < 0 or beta < 0:
        raise InvalidArgumentError("kappa and beta must be non-negative")
    if kappa == 0:
        if beta > 0:
            raise InvalidArgumentError("beta must be 0 when kappa is 0")
        return float(np.log(4 * np.pi))
    logs = []
    for j in range(SERIES_MAX_TERMS):
        nu = 2 * j + 0.5
        bessel = ive(nu, kappa)
        if bessel <= 0:
            # underflow: remaining terms are negligible
            if logs:
                break
            raise NumericError(f"Bessel underflow at kappa={kappa}")
        term = (gammaln(j + 0.5) - gammaln(j + 1.0) + nu * np.log(2.0 / kappa)
                + np.log(bessel) + kappa)
        if j > 0:
            if beta == 0:
                break
            term += 2 * j * np.log(beta)
        logs.append(term)
        if j > 0 and term - logsumexp(logs) < np.log(SERIES_RTOL):
            break
    else:
        raise NumericError(
            f"Kent normalizer series did not converge in {SERIES_MAX_TERMS} terms "
            f"(kappa={kappa}, beta={beta})")
    return float(np.log(2 * np.pi) + logsumexp(logs))


def kent_pdf(p, u):
    """Kent density (per steradian) at unit vector(s) ``u``."""
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    u = as_unit_directions(u, tol=1e-8)
    expo = (p.kappa * (u @ p.mu)
            + p.beta * ((u @ p.gamma1) ** 2 - (u @ p.gamma2) ** 2))
    out = np.exp(expo - kent_log_normalizer(p.kappa, p.beta))
    return float(out[0]) if single else out


def _log_acceptance(p, method):
    logc = kent_log_normalizer(p.kappa, p.beta)
    if method == "uniform":
        # envelope exp(kappa): the exponent peaks at u = mu when beta <= kappa/2
        return logc - np.log(4 * np.pi) - p.kappa
    lam = p.kappa - 2 * p.beta
    if lam > 0:
        # log of int_{-1}^{1} e^{lam t} dt, stable for large lam
        log_mass = lam + np.log1p(-np.exp(-2 * lam)) - np.log(lam)
    else:
        log_mass = np.log(2.0)
    return logc - np.log(2 * np.pi) - log_mass - 2 * p.beta


def sample_kent(p, n, seed=0, method="tangent", rng=None):
    """Draw ``n`` independent unit vectors from a Kent distribution.

    Parameters
    ----------
    p : KentParams
    n : int
    seed : int
        Ignored when ``rng`` is given.
    method : {"tangent", "uniform"}
        ``"tangent"`` proposes ``t = mu.u`` from a truncated exponential with
        rate ``kappa - 2 beta`` and a uniform azimuth, accepting with
        probability ``exp(-beta (1 - t)^2 - 2 beta (1 - t^2) sin^2 phi)``.
        ``"uniform"`` proposes uniformly on the sphere under the envelope
        ``exp(kappa) / c``. Both are exact.
    rng : numpy.random.Generator, optional

    Returns
    -------
    ndarray, shape (n, 3)
    """
    if int(n) != n or n < 1:
        raise InvalidArgumentError(f"sample count must be a positive integer, got {n!r}")
    if method not in ("tangent", "uniform"):
        raise InvalidArgumentError(f"unknown sampling method {method!r}")
    n = int(n)
    log_acc = _log_acceptance(p, method)
    if log_acc < np.log(MIN_ACCEPTANCE):
        raise NumericError(
            f"rejection acceptance {np.exp(log_acc):.3g} is below {MIN_ACCEPTANCE:g} "
            f"(kappa={p.kappa}, beta={p.beta}, method={method})")
    rng = rng if rng is not None else make_rng(seed)
    acc = min(1.0, float(np.exp(log_acc)))
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        batch = int(1.2 * (n - filled) / acc) + 16
        if method == "uniform":
            cand = _uniform_batch(rng, batch)
            t = cand @ p.mu
            logr = (p.kappa * t + p.beta * ((cand @ p.gamma1) ** 2 - (cand @ p.gamma2) ** 2)
                    - p.kappa)
        else:
            cand, logr = _tangent_batch(rng, batch, p)
        keep = cand[np.log(rng.random(batch)) < logr]
        take = min(keep.shape[0], n - filled)
        out[filled:filled + take] = keep[:take]
        filled += take
    return out


def _uniform_batch(rng, n):
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    s = np.sqrt(np.clip(1 - z * z, 0.0, None))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def _tangent_batch(rng, n, p):
    lam = p.kappa - 2 * p.beta
    v = rng.random(n)
    if lam > 1e-12:
        t = 1.0 + np.log(v + (1.0 - v) * np.exp(-2 * lam)) / lam
    else:
        t = 2 * v - 1
    t = np.clip(t, -1.0, 1.0)
    phi = rng.uniform(0.0, 2 * np.pi, n)
    s2 = 1.0 - t * t
    s = np.sqrt(s2)
    sp = np.sin(phi)
    logr = -p.beta * (1.0 - t) ** 2 - 2 * p.beta * s2 * sp * sp
    cand = (t[:, None] * p.mu + (s * np.cos(phi))[:, None] * p.gamma1
            + (s * sp)[:, None] * p.gamma2)
    return cand, logr


def canonical_axes(dirs):
    """Flip vectors into the ``z >= 0`` hemisphere."""
    dirs = np.array(dirs, dtype=float)
    flip = (dirs[:, 2] < 0) | ((dirs[:, 2] == 0) & ((dirs[:, 1] < 0) | ((dirs[:, 1] == 0) & (dirs[:, 0] < 0))))
    dirs[flip] *= -1
    return dirs


@dataclass(frozen=True, eq=False)
class PhantomVoxelSpec:
    """One synthetic voxel: fiber populations, fractions, noise level and seed."""

    populations: Sequence[KentParams]
    fractions: VolumeFractions
    directions_per_population: int = DEFAULT_DIRECTIONS
    snr: float = np.inf
    seed: int = 0
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        pops = tuple(self.populations)
        if len(pops) not in (1, 2) or not all(isinstance(q, KentParams) for q in pops):
            raise InvalidArgumentError("a voxel needs one or two KentParams populations")
        object.__setattr__(self, "populations", pops)
        m = self.directions_per_population
        if int(m) != m or m < 1:
            raise InvalidArgumentError(f"M must be a positive integer, got {m!r}")
        if len(pops) == 2 and m % 2:
            raise InvalidArgumentError(f"M must be even for two populations, got {m}")
        if not isinstance(self.fractions, VolumeFractions):
            raise InvalidArgumentError("fractions must be a VolumeFractions instance")
        if not self.snr > 0:
            raise InvalidArgumentError(f"snr must be positive, got {self.snr!r}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2 ** 64:
            raise InvalidArgumentError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")


class GroundTruth(NamedTuple):
    directions: np.ndarray   # (M, 3) sampled fiber axes, z >= 0
    means: np.ndarray        # (n_populations, 3) Kent mean axes, z >= 0
    fractions: VolumeFractions


def stick_zeppelin_signal(scheme, axes, fractions, diff):
    """Mean stick + zeppelin + free-water signal over a set of fiber axes.

    The zeppelin's perpendicular diffusivity follows the tortuosity rule.
    """
    axes = np.asarray(axes, dtype=float).reshape(-1, 3)
    b = scheme.bvals
    lpar = diff.lambda_par
    lperp = fractions.tortuous_perp(lpar)
    cos2 = (scheme.directions @ axes.T) ** 2
    stick = np.exp(-b[:, None] * lpar * cos2).mean(axis=1)
    zep = (np.exp(-b * lperp)[:, None] * np.exp(-b[:, None] * (lpar - lperp) * cos2)).mean(axis=1)
    out = (fractions.nu_ic * stick + fractions.nu_ec * zep
           + fractions.nu_csf * np.exp(-b * diff.lambda_csf))
    out[scheme.b0_mask] = 1.0
    return out


def synth_signal(spec, scheme, diff=None, method="tangent"):
    """Noisy (or noiseless) signal of one phantom voxel and its ground truth.

    With two populations each contributes ``M / 2`` axes. Noise, when
    ``spec.snr`` is finite, is Rician with ``sigma = 1 / snr`` and uses the
    same generator, after the Kent draws.
    """
    diff = diff or DiffusivitySet()
    rng = make_rng(spec.seed)
    per = spec.directions_per_population // len(spec.populations)
    axes = np.vstack([sample_kent(p, per, method=method, rng=rng) for p in spec.populations])
    axes = canonical_axes(axes)
    signal = stick_zeppelin_signal(scheme, axes, spec.fractions, diff)
    if np.isfinite(spec.snr):
        signal = add_rician_noise(signal, spec.snr, rng=rng)
    means = canonical_axes(np.array([p.mu for p in spec.populations]))
    return signal, GroundTruth(axes, means, spec.fractions)


def add_rician_noise(signal, snr, seed=0, rng=None):
    """``sqrt((E + n1)^2 + n2^2)`` with Gaussian ``n1, n2`` of std ``1/snr``.

    ``snr=inf`` returns an unchanged copy.
    """
    signal = np.array(signal, dtype=float)
    if not snr > 0:
        raise InvalidArgumentError(f"snr must be positive, got {snr!r}")
    if np.isinf(snr):
        return signal
    rng = rng if rng is not None else make_rng(seed)
    sigma = 1.0 / snr
    n1 = rng.normal(0.0, sigma, signal.shape)
    n2 = rng.normal(0.0, sigma, signal.shape)
    return np.hypot(signal + n1, n2)


def spread_orientations(count=N_ORIENTATIONS, iterations=2000, step=0.05):
    """``count`` axes spread over the hemisphere by antipodal electrostatic repulsion.

    Deterministic: starts from a Fibonacci hemisphere and runs a fixed number
    of projected gradient steps. Returned axes have ``z >= 0``.
    """
    if int(count) != count or count < 1:
        raise InvalidArgumentError(f"orientation count must be a positive integer, got {count!r}")
    count = int(count)
    i = np.arange(count, dtype=float)
    z = 1.0 - (i + 0.5) / count
    r = np.sqrt(1 - z * z)
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    u = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if count == 1:
        return np.array([[0.0, 0.0, 1.0]])
    for _ in range(iterations):
        force = np.zeros_like(u)
        for sign in (1.0, -1.0):
            d = u[:, None, :] - sign * u[None, :, :]
            dist = np.linalg.norm(d, axis=-1)
            np.fill_diagonal(dist, np.inf)
            force += (d / dist[..., None] ** 3).sum(axis=1)
        force -= (force * u).sum(axis=1, keepdims=True) * u
        scale = np.abs(force).max()
        u = u + step * force / scale
        u /= np.linalg.norm(u, axis=1, keepdims=True)
    return canonical_axes(u)


def _rotate_about(v, axis, angle):
    axis = _unit(axis)
    return (v * np.cos(angle) + np.cross(axis, v) * np.sin(angle)
            + axis * (axis @ v) * (1 - np.cos(angle)))


def crossing_pair(center, angle_deg, rotation_deg=0.0):
    """Two unit axes at ``angle_deg`` apart, symmetric about ``center``.

    The pair lies in the plane spanned by ``center`` and the first
    perpendicular frame vector rotated by ``rotation_deg``.
    """
    center = _unit(center)
    e1, e2 = perpendicular_frame(center)
    psi = np.deg2rad(rotation_deg)
    normal = np.cos(psi) * e2 - np.sin(psi) * e1
    half = np.deg2rad(angle_deg) / 2
    return _rotate_about(center, normal, half), _rotate_about(center, normal, -half)


class SweepVoxel(NamedTuple):
    spec: PhantomVoxelSpec
    condition: dict


def fanning_sweep(kappas=KAPPAS, beta_ratios=BETA_RATIOS, rotations_deg=IN_PLANE_ROTATIONS_DEG,
                  n_orientations=N_ORIENTATIONS, nu_ic_levels=NU_IC_LEVELS, draws=10,
                  snr=20.0, root_seed=0, directions=DEFAULT_DIRECTIONS):
    """Single-population dispersion sweep; one voxel per parameter combination and draw.

    With the defaults this is 3 x 3 x 3 x 11 x 9 x 10 = 26730 voxels.
    """
    orients = spread_orientations(n_orientations)
    voxels = []
    for kappa in kappas:
        for ratio in beta_ratios:
            for rot in rotations_deg:
                for o, mu in enumerate(orients):
                    kp = KentParams.from_axis(kappa, ratio * kappa, mu, rot)
                    for nu_ic in nu_ic_levels:
                        fr = VolumeFractions(float(nu_ic), float(1.0 - nu_ic), 0.0)
                        for draw in range(draws):
                            idx = len(voxels)
                            cond = dict(kappa=float(kappa), beta=float(ratio * kappa),
                                        rotation=float(rot), orientation=o,
                                        nu_ic=float(nu_ic), draw=draw)
                            voxels.append(SweepVoxel(
                                PhantomVoxelSpec((kp,), fr, directions, snr,
                                                 voxel_seed(root_seed, idx)), cond))
    return voxels


def crossing_sweep(angles_deg=CROSSING_ANGLES_DEG, n_orientations=N_ORIENTATIONS,
                   nu_ic_levels=NU_IC_LEVELS, draws=10, kappa=128.0, snr=20.0,
                   root_seed=0, directions=DEFAULT_DIRECTIONS):
    """Two-population crossing sweep; 3 x 11 x 9 x 10 = 2970 voxels by default."""
    orients = spread_orientations(n_orientations)
    voxels = []
    for angle in angles_deg:
        for o, center in enumerate(orients):
            a, b = crossing_pair(center, angle)
            pops = (KentParams.from_axis(kappa, 0.0, a), KentParams.from_axis(kappa, 0.0, b))
            for nu_ic in nu_ic_levels:
                fr = VolumeFractions(float(nu_ic), float(1.0 - nu_ic), 0.0)
                for draw in range(draws):
                    idx = len(voxels)
                    cond = dict(angle=float(angle), orientation=o, nu_ic=float(nu_ic), draw=draw)
                    voxels.append(SweepVoxel(
                        PhantomVoxelSpec(pops, fr, directions, snr,
                                         voxel_seed(root_seed, idx)), cond))
    return voxels


def synth_sweep(voxels, scheme, diff=None, method="tangent"):
    """Signals ``(n_voxels, n_samples)`` and ground truths for a sweep."""
    diff = diff or DiffusivitySet()
    signals = np.empty((len(voxels), len(scheme)))
    truths = []
    for i, v in enumerate(voxels):
        spec = v.spec if isinstance(v, SweepVoxel) else v
        signals[i], gt = synth_signal(spec, scheme, diff, method)
        truths.append(gt)
    return signals, truths
