"""Least-squares QP with linear inequality constraints.

Solves ``min 1/2 ||A x - r||^2  s.t.  G x >= h`` with the dual active-set
method of Goldfarb and Idnani. The Hessian ``A^T A`` is factored once
as ``L L^T`` and the problem is solved in whitened coordinates ``y = L^T x``,
where it becomes the Euclidean projection of ``L^{-1} A^T r`` onto a
polyhedron. The factorization depends only on ``A`` and ``G`` and is reused
across right-hand sides.
"""
from dataclasses import dataclass

import numba
import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .errors import SolverError

_OPTIMAL, _MAX_ITER, _INFEASIBLE = 0, 1, 2

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 1000


@dataclass
class QPResult:
    x: np.ndarray
    multipliers: np.ndarray
    active: np.ndarray
    iterations: int
    converged: bool
    kkt_residual: float
    regularized: bool = False


class LeastSquaresQP:
    """Reusable solver for a fixed design ``A`` and constraint set ``(G, h)``.

    Parameters
    ----------
    A : ndarray, shape (n_rows, n)
    G : ndarray, shape (m, n)
    h : ndarray, shape (m,)
    tol : float
        Bound on the scaled KKT residual for a solution to count as converged.
    max_iter : int
        Active-set iteration cap.
    """

    def __init__(self, A, G, h, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        A = np.asarray(A, dtype=float)
        G = np.asarray(G, dtype=float)
        h = np.asarray(h, dtype=float)
        if A.ndim != 2 or G.ndim != 2 or G.shape[1] != A.shape[1] or h.shape != (G.shape[0],):
            raise SolverError(f"inconsistent QP shapes: A {A.shape}, G {G.shape}, h {h.shape}")
        if tol <= 0:
            raise SolverError("tolerance must be positive")
        self.A, self.G, self.h = A, G, h
        self.tol = tol
        self.max_iter = max_iter
        n = A.shape[1]
        H = A.T @ A
        self.regularized = False
        L = _safe_cholesky(H)
        if L is None:
            scale = max(np.trace(H) / max(n, 1), 1.0)
            for ridge in (1e-12, 1e-10, 1e-8):
                L = _safe_cholesky(H + ridge * scale * np.eye(n))
                if L is not None:
                    self.regularized = True
                    H = H + ridge * scale * np.eye(n)
                    break
            else:
                raise SolverError(
                    f"normal matrix is numerically singular (n={n}, rank "
                    f"{np.linalg.matrix_rank(A)} of design {A.shape})")
        self.H = H
        # x = Linv_T @ y
        self.Linv_T = solve_triangular(L, np.eye(n), lower=True).T
        self.B = self.Linv_T.T @ A.T  # w = -B r
        self.Gt = G @ self.Linv_T
        self._row_norms = np.linalg.norm(self.Gt, axis=1)

    def solve(self, r):
        """Minimize ``1/2 ||A x - r||^2`` subject to ``G x >= h``.

        Dual active-set iterations (Goldfarb-Idnani) from the unconstrained
        minimizer: the most violated constraint is added at each outer step,
        dropping active constraints whose multipliers would turn negative.
        A result with ``converged=False`` carries the last iterate.
        """
        r = np.asarray(r, dtype=float)
        if r.shape != (self.A.shape[0],):
            raise SolverError(f"right-hand side has shape {r.shape}, expected ({self.A.shape[0]},)")
        y0 = self.B @ r
        feas_tol = 1e-13 * max(1.0, float(np.abs(self.h).max(initial=0.0)))
        y, active, u, it, status = _dual_active_set(
            self.Gt, self.h, self._row_norms, y0, self.max_iter, feas_tol)
        if status == _INFEASIBLE:
            raise SolverError("constraints are infeasible")
        x = self.Linv_T @ y
        multipliers = np.zeros(self.G.shape[0])
        multipliers[active] = np.maximum(u, 0.0)
        kkt = self.kkt_residual(x, multipliers, r)
        return QPResult(x, multipliers, np.sort(active), int(it),
                        status == _OPTIMAL and kkt <= self.tol, kkt, self.regularized)

    def kkt_residual(self, x, multipliers, r):
        """Largest scaled violation of stationarity, feasibility, sign and complementarity."""
        g = self.A.T @ r
        scale = 1.0 + np.abs(g).max()
        grad = self.H @ x - g
        slack = self.G @ x - self.h
        stationarity = np.abs(grad - self.G.T @ multipliers).max() / scale
        primal = max(0.0, -slack.min())
        dual = max(0.0, -multipliers.min()) / scale
        compl = np.abs(multipliers * slack).max() / scale
        return float(max(stationarity, primal, dual, compl))


def _safe_cholesky(H):
    try:
        return cholesky(H, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        return None


@numba.njit(cache=True)
def _givens(a, b):
    if b == 0.0:
        return 1.0, 0.0
    rho = np.hypot(a, b)
    return a / rho, b / rho


@numba.njit(cache=True)
def _rotate_cols(Q, i, k, c, s):
    # columns i, k of Q <- rotated pair
    for row in range(Q.shape[0]):
        qi = Q[row, i]
        qk = Q[row, k]
        Q[row, i] = c * qi + s * qk
        Q[row, k] = -s * qi + c * qk


@numba.njit(cache=True)
def _dual_active_set(Gt, h, norms, y0, max_iter, feas_tol):
    """Goldfarb-Idnani iterations for ``min 1/2 ||y - y0||^2, Gt y >= h``.

    The active normals are kept as ``N = Q R`` with ``Q`` orthogonal, so the
    step direction is the component of a new normal orthogonal to ``N``.
    """
    n = Gt.shape[1]
    m = Gt.shape[0]
    y = y0.copy()
    Q = np.eye(n)
    R = np.zeros((n, n))
    active = np.empty(n, dtype=np.int64)
    u = np.zeros(n + 1)
    k = 0
    it = 0
    status = 1
    slack = np.empty(m)
    while it < max_iter:
        worst = 0.0
        q = -1
        smin = np.inf
        for i in range(m):
            s = -h[i]
            for c in range(n):
                s += Gt[i, c] * y[c]
            slack[i] = s
            if s < smin:
                smin = s
            ratio = s / norms[i]
            if ratio < worst:
                worst = ratio
                q = i
        if smin >= -feas_tol or q < 0:
            status = 0
            break
        npl = Gt[q]
        u_q = 0.0
        while it < max_iter:
            it += 1
            d = Q.T @ npl
            z = np.zeros(n)
            for c in range(k, n):
                z += d[c] * Q[:, c]
            coef = np.zeros(k)
            for i in range(k - 1, -1, -1):
                acc = d[i]
                for c in range(i + 1, k):
                    acc -= R[i, c] * coef[c]
                coef[i] = acc / R[i, i]
            t1 = np.inf
            j = -1
            cmax = 0.0
            for i in range(k):
                if abs(coef[i]) > cmax:
                    cmax = abs(coef[i])
            for i in range(k):
                if coef[i] > 1e-12 * cmax:
                    ratio = u[i] / coef[i]
                    if ratio < t1:
                        t1 = ratio
                        j = i
            zz = z @ z
            t2 = np.inf
            if zz > 1e-20 * (npl @ npl):
                t2 = -(npl @ y - h[q]) / zz
            if not np.isfinite(t1) and not np.isfinite(t2):
                return y, active[:k].copy(), u[:k].copy(), it, 2
            t = min(t1, t2)
            if np.isfinite(t2):
                y += t * z
            for i in range(k):
                u[i] -= t * coef[i]
            u_q += t
            if t2 <= t1:
                # append q: rotate d[k:] onto its first entry
                for i in range(n - 1, k, -1):
                    c, s = _givens(d[i - 1], d[i])
                    d[i - 1] = c * d[i - 1] + s * d[i]
                    d[i] = 0.0
                    _rotate_cols(Q, i - 1, i, c, s)
                for i in range(k + 1):
                    R[i, k] = d[i]
                active[k] = q
                u[k] = u_q
                k += 1
                break
            # drop constraint j and restore the triangular factor
            for c in range(j, k - 1):
                for i in range(n):
                    R[i, c] = R[i, c + 1]
                active[c] = active[c + 1]
                u[c] = u[c + 1]
            for i in range(n):
                R[i, k - 1] = 0.0
            k -= 1
            for i in range(j, k):
                c, s = _givens(R[i, i], R[i + 1, i])
                for col in range(i, k):
                    a = R[i, col]
                    b = R[i + 1, col]
                    R[i, col] = c * a + s * b
                    R[i + 1, col] = -s * a + c * b
                R[i + 1, i] = 0.0
                _rotate_cols(Q, i, i + 1, c, s)
    return y, active[:k].copy(), u[:k].copy(), it, status
