"""LASSO paths by warm-started coordinate descent and a cross-validated selector.

Problem solved for each lambda, after scaling every column to mean square 1::

    minimize  1/(2 n) ||y - X b||^2 + lambda ||b||_1

Coordinate descent runs first (a bounded number of sweeps per lambda). Each
lambda is then finished by a feature-sign active-set search, which solves
the KKT system on the current support exactly and repairs the support until
all KKT conditions hold. On strongly collinear designs plain coordinate
descent needs thousands of sweeps per lambda; the finisher needs a handful
of small linear solves. When the support is collinear (more columns than
rows, as can happen inside a CV fold) the KKT system has no unique solution
and the solver falls back to coordinate descent run to KKT tolerance.

Along the path, the solution on a fixed sign pattern is affine in lambda.
After each exact solve the affine form is kept, and the next grid point is
read off it when the signs and the inactive gradients still satisfy the KKT
conditions; only otherwise is the solver run again.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import ConvergenceError, SelectorError

MAX_CD_SWEEPS = 8
MAX_FS_ITER = 500
MAX_FALLBACK_SWEEPS = 20_000
KKT_TOL = 1e-10


@njit(cache=True, nogil=True)
def _soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True, nogil=True)
def _objective(G, c, lam, x):
    q = x.shape[0]
    quad = 0.0
    lin = 0.0
    l1 = 0.0
    for j in range(q):
        if x[j] != 0.0:
            s = 0.0
            for k in range(q):
                s += G[j, k] * x[k]
            quad += x[j] * s
            lin += c[j] * x[j]
            l1 += abs(x[j])
    return 0.5 * quad - lin + lam * l1


@njit(cache=True, nogil=True)
def _cd_sweep(G, c, lam, x):
    q = x.shape[0]
    change = 0.0
    for j in range(q):
        s = c[j]
        for k in range(q):
            if k != j:
                s -= G[j, k] * x[k]
        new = _soft(s, lam) / G[j, j] if G[j, j] > 0.0 else 0.0
        d = abs(new - x[j])
        if d > change:
            change = d
        x[j] = new
    return change


@njit(cache=True, nogil=True)
def _kkt(G, c, lam, x):
    q = x.shape[0]
    worst = 0.0
    for j in range(q):
        g = c[j]
        for k in range(q):
            g -= G[j, k] * x[k]
        if x[j] > 0.0:
            d = abs(g - lam)
        elif x[j] < 0.0:
            d = abs(g + lam)
        else:
            d = abs(g) - lam
        if d > worst:
            worst = d
    return worst


@njit(cache=True, nogil=True)
def _cd_until_kkt(G, c, lam, x, max_sweeps, tol):
    """Plain coordinate descent until the KKT conditions hold; False on budget exhaustion."""
    for sweep in range(max_sweeps):
        _cd_sweep(G, c, lam, x)
        if sweep % 16 == 15 and _kkt(G, c, lam, x) <= tol:
            return True
    return _kkt(G, c, lam, x) <= tol


@njit(cache=True, nogil=True)
def _chol_solve(A, rhs, na, L, out):
    """Solve A[:na,:na] out = rhs[:na] by Cholesky; False if A is not PD."""
    for i in range(na):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    for i in range(na):
        s = rhs[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]
    for i in range(na - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, na):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]
    return True


@njit(cache=True, nogil=True)
def _feature_sign(G, c, lam, x, max_iter, tol, theta, active, grad, idx, gaa, rhs, chol, xhat, trial):
    """Finish ``x`` in place to the exact minimizer; return iterations or -1."""
    q = x.shape[0]
    for j in range(q):
        if x[j] != 0.0:
            theta[j] = 1.0 if x[j] > 0 else -1.0
            active[j] = True
        else:
            theta[j] = 0.0
            active[j] = False
    for it in range(max_iter):
        for j in range(q):
            s = c[j]
            for k in range(q):
                s -= G[j, k] * x[k]
            grad[j] = s
        worst = 0.0
        for j in range(q):
            if x[j] != 0.0:
                d = abs(grad[j] - lam * theta[j])
                if d > worst:
                    worst = d
        if worst <= tol:
            jmax = -1
            best = lam + tol
            for j in range(q):
                if x[j] == 0.0 and abs(grad[j]) > best:
                    best = abs(grad[j])
                    jmax = j
            if jmax < 0:
                return it
            theta[jmax] = 1.0 if grad[jmax] > 0 else -1.0
            active[jmax] = True
        na = 0
        for j in range(q):
            if active[j]:
                idx[na] = j
                na += 1
        for a in range(na):
            rhs[a] = c[idx[a]] - lam * theta[idx[a]]
            for b in range(na):
                gaa[a, b] = G[idx[a], idx[b]]
        if not _chol_solve(gaa, rhs, na, chol, xhat):
            # collinear support (rank-deficient columns): no unique KKT solve
            return -2
        crossing = False
        for a in range(na):
            if x[idx[a]] * xhat[a] < 0.0:
                crossing = True
        if not crossing:
            # the sign pattern holds on the whole segment, so tau = 1 is optimal
            for a in range(na):
                x[idx[a]] = xhat[a]
        else:
            f0 = _objective(G, c, lam, x)
            for j in range(q):
                trial[j] = x[j]
            for a in range(na):
                trial[idx[a]] = xhat[a]
            best_f = _objective(G, c, lam, trial)
            best_tau = 1.0
            best_zero = -1
            for a in range(na):
                j = idx[a]
                if x[j] * xhat[a] < 0.0:
                    tau = x[j] / (x[j] - xhat[a])
                    for b in range(na):
                        trial[idx[b]] = x[idx[b]] + tau * (xhat[b] - x[idx[b]])
                    trial[j] = 0.0
                    f = _objective(G, c, lam, trial)
                    if f < best_f:
                        best_f = f
                        best_tau = tau
                        best_zero = j
            if best_f < f0 or best_zero >= 0:
                for a in range(na):
                    x[idx[a]] = x[idx[a]] + best_tau * (xhat[a] - x[idx[a]])
                if best_zero >= 0:
                    x[best_zero] = 0.0
            else:
                # no descent along the feature-sign direction: fall back to a sweep
                _cd_sweep(G, c, lam, x)
        for j in range(q):
            if x[j] != 0.0:
                theta[j] = 1.0 if x[j] > 0 else -1.0
                active[j] = True
            else:
                theta[j] = 0.0
                active[j] = False
    return -1


@njit(cache=True, nogil=True)
def _solve_path(G, c, lambdas, upto, out, max_cd, max_fs, tol, max_fallback=MAX_FALLBACK_SWEEPS):
    """Warm-started path for lambdas[0..upto]; returns -1 or the failing index.

    After every exact solve the solution on its support is stored in affine
    form x_A(lam) = u - lam v together with the inactive gradients
    alpha + lam beta; a later lambda whose sign pattern and KKT bounds still
    hold is then read off directly.
    """
    q = c.shape[0]
    x = np.zeros(q)
    theta = np.zeros(q)
    active = np.zeros(q, dtype=np.bool_)
    grad = np.empty(q)
    idx = np.empty(q, dtype=np.int64)
    gaa = np.empty((q, q))
    rhs = np.empty(q)
    chol = np.empty((q, q))
    xhat = np.empty(q)
    trial = np.empty(q)
    u = np.empty(q)
    v = np.empty(q)
    alpha = np.empty(q)
    beta = np.empty(q)
    sup = np.empty(q, dtype=np.int64)
    sgn = np.empty(q)
    nsup = -1
    for i in range(upto + 1):
        lam = lambdas[i]
        if nsup >= 0:
            ok = True
            for a in range(nsup):
                if (u[a] - lam * v[a]) * sgn[a] <= 0.0:
                    ok = False
                    break
            if ok:
                for j in range(q):
                    if not active[j] and abs(alpha[j] + lam * beta[j]) > lam + tol:
                        ok = False
                        break
            if ok:
                for j in range(q):
                    x[j] = 0.0
                for a in range(nsup):
                    x[sup[a]] = u[a] - lam * v[a]
                for j in range(q):
                    out[i, j] = x[j]
                continue
        for sweep in range(max_cd):
            if _cd_sweep(G, c, lam, x) < tol:
                break
        status = _feature_sign(G, c, lam, x, max_fs, tol, theta, active, grad, idx, gaa, rhs, chol, xhat, trial)
        if status == -2:
            if not _cd_until_kkt(G, c, lam, x, max_fallback, tol):
                return i
        elif status < 0:
            return i
        for j in range(q):
            out[i, j] = x[j]
        # cache the affine form on the final support
        nsup = 0
        for j in range(q):
            active[j] = x[j] != 0.0
            if active[j]:
                sup[nsup] = j
                sgn[nsup] = 1.0 if x[j] > 0 else -1.0
                nsup += 1
        for a in range(nsup):
            rhs[a] = c[sup[a]]
            for b in range(nsup):
                gaa[a, b] = G[sup[a], sup[b]]
        if not _chol_solve(gaa, rhs, nsup, chol, u):
            nsup = -1
            continue
        for a in range(nsup):
            rhs[a] = sgn[a]
        _chol_solve(gaa, rhs, nsup, chol, v)
        for j in range(q):
            if not active[j]:
                s = c[j]
                t = 0.0
                for a in range(nsup):
                    s -= G[j, sup[a]] * u[a]
                    t += G[j, sup[a]] * v[a]
                alpha[j] = s
                beta[j] = t
    return -1


@njit(cache=True, nogil=True)
def _standardized(gram, cross, m):
    """Scale to mean-square-one columns: returns (G, c, scale)."""
    q = cross.shape[0]
    scale = np.empty(q)
    for j in range(q):
        # an all-zero column (possible inside a CV fold) keeps coefficient 0
        scale[j] = np.sqrt(gram[j, j] / m) if gram[j, j] > 0.0 else 1.0
    G = np.empty((q, q))
    c = np.empty(q)
    for j in range(q):
        c[j] = cross[j] / (scale[j] * m)
        for k in range(q):
            G[j, k] = gram[j, k] / (scale[j] * scale[k] * m)
    return G, c, scale


@njit(cache=True, nogil=True)
def _cv_select_batch(xt, ys, fold_of, n_folds, n_lambda, ratio, max_cd, max_fs, tol, masks, status):
    n, q = xt.shape
    gram_full = xt.T @ xt
    ratios = np.empty(n_lambda)
    for i in range(n_lambda):
        ratios[i] = ratio ** (i / (n_lambda - 1)) if n_lambda > 1 else 1.0
    path = np.empty((n_lambda, q))
    for b in range(ys.shape[0]):
        y = ys[b]
        cross_full = xt.T @ y
        G, c, scale = _standardized(gram_full, cross_full, n)
        lmax = 0.0
        for j in range(q):
            if abs(c[j]) > lmax:
                lmax = abs(c[j])
        status[b] = -1
        masks[b] = 0
        if lmax <= 1e-14 * (1.0 + np.sqrt(y @ y)):
            continue
        lambdas = lmax * ratios
        err = np.zeros(n_lambda)
        for f in range(n_folds):
            m = 0
            for i in range(n):
                if fold_of[b, i] == f:
                    m += 1
            test = np.empty(m, dtype=np.int64)
            m = 0
            for i in range(n):
                if fold_of[b, i] == f:
                    test[m] = i
                    m += 1
            gram_tr = gram_full.copy()
            cross_tr = cross_full.copy()
            for i in test:
                for j in range(q):
                    cross_tr[j] -= xt[i, j] * y[i]
                    for k in range(q):
                        gram_tr[j, k] -= xt[i, j] * xt[i, k]
            Gf, cf, sf = _standardized(gram_tr, cross_tr, n - m)
            bad = _solve_path(Gf, cf, lambdas, n_lambda - 1, path, max_cd, max_fs, tol)
            if bad >= 0:
                status[b] = bad
                break
            for l in range(n_lambda):
                for i in test:
                    pred = 0.0
                    for j in range(q):
                        pred += xt[i, j] * path[l, j] / sf[j]
                    r = y[i] - pred
                    err[l] += r * r
        if status[b] >= 0:
            continue
        best = 0
        for l in range(1, n_lambda):
            if err[l] < err[best]:
                best = l
        bad = _solve_path(G, c, lambdas, best, path, max_cd, max_fs, tol)
        if bad >= 0:
            status[b] = bad
            continue
        mask = 0
        for j in range(q):
            if path[best, j] != 0.0:
                mask |= 1 << j
        masks[b] = mask


def lambda_grid(lmax: float, n_lambda: int = 100, ratio: float = 1e-3) -> np.ndarray:
    """``n_lambda`` log-spaced values from ``lmax`` down to ``lmax * ratio``."""
    if n_lambda == 1:
        return np.array([lmax])
    return lmax * ratio ** (np.arange(n_lambda) / (n_lambda - 1))


def lambda_max(xt, yt) -> float:
    xt = np.asarray(xt, dtype=np.float64)
    yt = np.asarray(yt, dtype=np.float64)
    n = xt.shape[0]
    scale = np.sqrt(np.sum(xt**2, axis=0) / n)
    return float(np.max(np.abs(xt.T @ yt) / scale) / n)


def lasso_path(xt, yt, lambdas, max_cd_sweeps=MAX_CD_SWEEPS, max_fs_iter=MAX_FS_ITER, tol=KKT_TOL):
    """LASSO coefficients (on the original column scale) along a descending grid.

    Columns of ``xt`` are scaled internally to mean square one; the penalty
    applies to the scaled coefficients. Returns an array of shape
    ``(len(lambdas), xt.shape[1])``.

    Raises
    ------
    ConvergenceError
        If the solver exhausts its iteration budget; ``lambda_index`` names
        the offending grid point.
    """
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    if xt.shape[0] == 1 and np.ndim(yt) == 1 and len(yt) != 1:
        xt = xt.T
    yt = np.asarray(yt, dtype=np.float64)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    n, q = xt.shape
    if yt.shape != (n,):
        raise SelectorError(f"response has shape {yt.shape}, expected ({n},)")
    if lambdas.ndim != 1 or lambdas.size == 0 or np.any(lambdas <= 0):
        raise SelectorError("lambdas must be a nonempty vector of positive values")
    if np.any(np.diff(lambdas) >= 0):
        raise SelectorError("lambdas must be strictly descending")
    if np.any(np.sum(xt**2, axis=0) == 0):
        raise SelectorError("xt has an all-zero column")
    G, c, scale = _standardized(xt.T @ xt, xt.T @ yt, n)
    tol = tol * max(1.0, float(np.max(np.abs(c))))
    out = np.zeros((lambdas.size, q))
    bad = _solve_path(G, c, lambdas, lambdas.size - 1, out, max_cd_sweeps, max_fs_iter, tol)
    if bad >= 0:
        raise ConvergenceError(f"lasso did not converge at lambda index {bad}", lambda_index=bad)
    return out / scale


def kkt_residual(xt, yt, coef, lam) -> float:
    """Largest violation of the LASSO optimality conditions (scaled problem)."""
    xt = np.asarray(xt, dtype=np.float64)
    n = xt.shape[0]
    scale = np.sqrt(np.sum(xt**2, axis=0) / n)
    b = np.asarray(coef) * scale
    g = (xt / scale).T @ (np.asarray(yt) - xt @ np.asarray(coef)) / n
    viol = np.where(b != 0, np.abs(g - lam * np.sign(b)), np.maximum(np.abs(g) - lam, 0.0))
    return float(viol.max())


def fold_assignment(uniforms: np.ndarray, folds: int) -> np.ndarray:
    """Fold ids from a random permutation: row-wise argsort, then round robin."""
    uniforms = np.atleast_2d(uniforms)
    perm = np.argsort(uniforms, axis=1, kind="stable")
    fold_of = np.empty_like(perm)
    rows = np.arange(perm.shape[0])[:, None]
    fold_of[rows, perm] = np.arange(perm.shape[1]) % folds
    return fold_of


def cv_select_supports(xt, ys, fold_of, folds, n_lambda=100, ratio=1e-3, tol=KKT_TOL):
    """Support bitmasks (over the columns of ``xt``) chosen by K-fold CV, one per row of ``ys``."""
    xt = np.ascontiguousarray(xt, dtype=np.float64)
    ys = np.ascontiguousarray(np.atleast_2d(ys), dtype=np.float64)
    fold_of = np.ascontiguousarray(fold_of, dtype=np.int64)
    masks = np.zeros(ys.shape[0], dtype=np.int64)
    status = np.full(ys.shape[0], -1, dtype=np.int64)
    scale = max(1.0, float(np.max(np.abs(xt.T @ ys.T)) / xt.shape[0])) if ys.size else 1.0
    _cv_select_batch(xt, ys, fold_of, folds, n_lambda, ratio, MAX_CD_SWEEPS, MAX_FS_ITER, tol * scale, masks, status)
    bad = np.flatnonzero(status >= 0)
    if bad.size:
        i = int(bad[0])
        raise ConvergenceError(
            f"lasso did not converge at lambda index {status[i]} (replication {i})",
            lambda_index=int(status[i]),
        )
    return masks
