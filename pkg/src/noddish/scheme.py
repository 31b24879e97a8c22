"""Acquisition schemes: gradient directions, b-values and shell structure."""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .sh import GOLDEN_ANGLE

B0_THRESHOLD = 50.0
SHELL_TOLERANCE = 50.0
HCP_TAU = 0.0396


def cluster_shells(bvals, b0_threshold=B0_THRESHOLD, tol=SHELL_TOLERANCE):
    """Group b-values into shells.

    Values below ``b0_threshold`` form the b=0 shell. The remaining values are
    sorted and a new shell opens whenever a value lies more than ``tol`` above
    the smallest value of the current shell.

    Returns
    -------
    shell_ids : ndarray of int
        Shell label per sample; labels follow ascending b.
    nominal : ndarray
        Nominal b-value per shell (0 for the b=0 shell, otherwise the mean).
    """
    bvals = np.asarray(bvals, dtype=float)
    shell_ids = np.full(bvals.shape, -1, dtype=int)
    nominal = []
    is_b0 = bvals < b0_threshold
    if is_b0.any():
        shell_ids[is_b0] = 0
        nominal.append(0.0)
    order = np.argsort(bvals, kind="stable")
    start = None
    for i in order:
        if is_b0[i]:
            continue
        if start is None or bvals[i] - start > tol:
            start = bvals[i]
            nominal.append(None)
        shell_ids[i] = len(nominal) - 1
    nominal = np.array(
        [0.0 if b is not None else bvals[shell_ids == k].mean()
         for k, b in enumerate(nominal)])
    return shell_ids, nominal


@dataclass(frozen=True, eq=False)
class AcquisitionScheme:
    """Per-sample gradient directions and b-values.

    Attributes
    ----------
    directions : ndarray, shape (n, 3)
        Unit gradient directions; rows at b=0 are zero vectors.
    bvals : ndarray, shape (n,)
        b-values in s/mm^2.
    shell_ids : ndarray of int, shape (n,)
        Shell label per sample, shells ordered by ascending b.
    shell_bvals : ndarray
        Nominal b-value of each shell.
    tau : float
        Effective diffusion time in seconds.
    """

    directions: np.ndarray
    bvals: np.ndarray
    shell_ids: np.ndarray
    shell_bvals: np.ndarray
    tau: float = HCP_TAU

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=float)
        b = np.asarray(self.bvals, dtype=float)
        s = np.asarray(self.shell_ids, dtype=int)
        nb = np.asarray(self.shell_bvals, dtype=float)
        if d.ndim != 2 or d.shape[1] != 3:
            raise InvalidArgumentError(f"directions must be (n, 3), got {d.shape}")
        if not (d.shape[0] == b.shape[0] == s.shape[0]) or d.shape[0] == 0:
            raise InvalidArgumentError("directions, bvals and shell_ids must have equal non-zero length")
        if (b < 0).any():
            raise InvalidArgumentError("b-values must be non-negative")
        if s.min() < 0 or s.max() >= nb.size:
            raise InvalidArgumentError("shell ids out of range")
        for k in range(nb.size):
            members = s == k
            if not members.any():
                raise InvalidArgumentError(f"shell {k} has no samples")
            if np.abs(b[members] - nb[k]).max() > SHELL_TOLERANCE:
                raise InvalidArgumentError(f"shell {k} b-values stray more than "
                                           f"{SHELL_TOLERANCE} s/mm^2 from {nb[k]}")
        dw = nb[s] > 0
        norms = np.linalg.norm(d[dw], axis=1)
        if dw.any() and np.abs(norms - 1.0).max() > 1e-10:
            raise InvalidArgumentError("diffusion-weighted directions must be unit vectors")
        if self.tau <= 0:
            raise InvalidArgumentError("diffusion time must be positive")
        for name, arr in (("directions", d), ("bvals", b), ("shell_ids", s),
                          ("shell_bvals", nb)):
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_bvals_bvecs(cls, bvals, bvecs, tau=HCP_TAU,
                         b0_threshold=B0_THRESHOLD, tol=SHELL_TOLERANCE):
        """Build a scheme, clustering shells and normalizing directions.

        ``bvecs`` may be ``(n, 3)`` or ``(3, n)``. Directions at b=0 are
        replaced by zero vectors; the others are renormalized.
        """
        bvals = np.asarray(bvals, dtype=float).ravel()
        bvecs = np.asarray(bvecs, dtype=float)
        if bvecs.ndim == 2 and bvecs.shape[0] == 3 and bvecs.shape[1] != 3:
            bvecs = bvecs.T
        if bvecs.shape != (bvals.size, 3):
            raise InvalidArgumentError(
                f"bvecs shape {bvecs.shape} does not match {bvals.size} b-values")
        shell_ids, nominal = cluster_shells(bvals, b0_threshold, tol)
        dirs = np.zeros_like(bvecs)
        dw = nominal[shell_ids] > 0
        norms = np.linalg.norm(bvecs[dw], axis=1)
        if (norms == 0).any():
            raise InvalidArgumentError("zero gradient direction at b > 0")
        dirs[dw] = bvecs[dw] / norms[:, None]
        b = np.where(dw, bvals, 0.0)
        return cls(dirs, b, shell_ids, nominal, tau)

    def __len__(self):
        return self.bvals.size

    @property
    def n_shells(self):
        return self.shell_bvals.size

    @property
    def b0_mask(self):
        return self.shell_bvals[self.shell_ids] == 0

    @property
    def dw_shells(self):
        """Indices of the diffusion-weighted shells."""
        return np.flatnonzero(self.shell_bvals > 0)

    def shell_indices(self, k):
        return np.flatnonzero(self.shell_ids == k)

    def subset(self, indices):
        """A new scheme holding the given samples, in the given order."""
        indices = np.asarray(indices, dtype=int)
        return AcquisitionScheme.from_bvals_bvecs(
            self.bvals[indices], self.directions[indices], self.tau)

    def qvals(self):
        """q in 1/mm from ``b = 4 pi^2 tau q^2``."""
        return np.sqrt(self.bvals / (4 * np.pi ** 2 * self.tau))


def farthest_point_order(candidates, count, start=0):
    """Greedy farthest-point selection under the antipodal metric.

    Every prefix of the returned index list is itself a well-spread set,
    which is the property subsampling relies on.
    """
    c = np.asarray(candidates, dtype=float)
    chosen = [start]
    best = np.abs(c @ c[start])
    for _ in range(count - 1):
        i = int(np.argmin(best))
        chosen.append(i)
        best = np.maximum(best, np.abs(c @ c[i]))
    return np.array(chosen)


def _rotation_z_y(alpha, beta):
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    return rz @ ry


def incremental_shell_directions(count, shell_index=0, n_candidates=4000):
    """Deterministic ``count`` hemisphere directions with well-spread prefixes."""
    i = np.arange(n_candidates, dtype=float)
    z = 1.0 - (i + 0.5) / n_candidates
    r = np.sqrt(1.0 - z * z)
    phi = i * GOLDEN_ANGLE
    cand = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    rot = _rotation_z_y(0.7 * shell_index + 0.3, 0.45 * shell_index)
    cand = cand @ rot.T
    cand[cand[:, 2] < 0] *= -1
    idx = farthest_point_order(cand, count, start=0)
    dirs = cand[idx]
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def hcp_like_scheme(n_b0=18, shells=(1000.0, 2000.0, 3000.0), per_shell=90, tau=HCP_TAU):
    """An HCP-style multi-shell scheme: ``n_b0`` b=0 volumes first, then shells.

    Each shell gets its own incrementally ordered direction set, so keeping
    the first N samples of a shell keeps a near-uniform subset.
    """
    bvals = [np.zeros(n_b0)]
    dirs = [np.zeros((n_b0, 3))]
    for k, b in enumerate(shells):
        bvals.append(np.full(per_shell, float(b)))
        dirs.append(incremental_shell_directions(per_shell, shell_index=k))
    return AcquisitionScheme.from_bvals_bvecs(
        np.concatenate(bvals), np.concatenate(dirs), tau)
