"""Exact coverage probabilities for selection between two nested models.

The data are reduced to the standardized estimator of the second
coefficient (mean zeta) and the correlation rho between the two
coefficient estimators in the larger model. Coverage of the interval
beta_hat_{1.M} +- K sigma_hat_{1.M} after selecting M by a t-test at
threshold C is a one-dimensional Gaussian integral for fixed sigma_hat;
with estimated variance, it is further averaged over t = sigma_hat / sigma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy import optimize, special, stats

from .constants import KConstant, KKind, k_naive, k_planar, k_scheffe
from .design import NestedScenario, check_dof, nested_design, nested_universe
from .errors import DesignError, QuadratureError

INNER_NODES = 48
MAX_INNER_NODES = 768
OUTER_NODES = 200
TAIL_MASS = 1e-12
TOL = 1e-9
GRID_POINTS = 601
REFINE_BASINS = 4
ZETA_AT_INFINITY = 40.0


class Target(str, Enum):
    SELECTED = "selected"
    FULL = "full"


@dataclass(frozen=True)
class CoverageValue:
    value: float
    abs_err: float
    target: Target


def delta(x, c):
    """Phi(x + c) - Phi(x - c), evaluated on the tail side for accuracy."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = special.ndtr(c - x) - special.ndtr(-c - x)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# quadrature


@lru_cache(maxsize=None)
def _gauss_legendre(nodes):
    return np.polynomial.legendre.leggauss(nodes)


def _t_rule(r, nodes=OUTER_NODES):
    """Nodes and weights for E[g(t)] with t = sqrt(chi2_r / r)."""
    if r == math.inf:
        return np.ones(1), np.ones(1), 0.0
    lo = math.sqrt(stats.chi2.ppf(TAIL_MASS / 2, r) / r)
    hi = math.sqrt(stats.chi2.isf(TAIL_MASS / 2, r) / r)
    x, w = _gauss_legendre(nodes)
    t = (lo + hi) / 2 + (hi - lo) / 2 * x
    dens = 2 * r * t * stats.chi2.pdf(r * t * t, r)
    w = (hi - lo) / 2 * w * dens
    # quadrature error of the density itself, plus the discarded tails
    return t, w, abs(w.sum() - (1 - TAIL_MASS)) + TAIL_MASS


def _t_upper(r):
    if r == math.inf:
        return 1.0
    return math.sqrt(stats.chi2.isf(TAIL_MASS / 2, r) / r)


def _inner(rho, zeta, t, k, c, nodes):
    """int_{-tK}^{tK} (1 - Delta((zeta + rho z)/s, tC/s)) phi(z) dz.

    ``zeta`` has shape (nz, 1) and ``t`` shape (1, nt). The integrand has
    steep transitions where (zeta + rho z) = +-tC, so the interval is split
    there and each piece gets its own Gauss-Legendre rule.
    """
    s = math.sqrt(1 - rho * rho)
    lo, hi = -t * k, t * k
    lo, hi = np.broadcast_arrays(lo, hi)
    if rho != 0:
        with np.errstate(over="ignore"):
            b1 = (t * c - zeta) / rho
            b2 = (-t * c - zeta) / rho
        b1, b2 = np.minimum(b1, b2), np.maximum(b1, b2)
        cuts = [lo, np.clip(b1, lo, hi), np.clip(b2, lo, hi), hi]
    else:
        cuts = [lo, hi]
    cuts = np.broadcast_arrays(*cuts)
    x, w = _gauss_legendre(nodes)
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        half = ((b - a) / 2)[..., None]
        z = ((a + b) / 2)[..., None] + half * x
        u = (zeta[..., None] + rho * z) / s
        f = (1 - delta(u, (t * c)[..., None] / s)) * np.exp(-z * z / 2) / math.sqrt(2 * math.pi)
        total = total + (half * w * f).sum(axis=-1)
    return total


def _inner_checked(rho, zeta, t, k, c, nodes=INNER_NODES, tol=TOL):
    coarse = _inner(rho, zeta, t, k, c, nodes)
    while True:
        fine = _inner(rho, zeta, t, k, c, 2 * nodes)
        err = float(np.max(np.abs(fine - coarse)))
        if err <= tol:
            return fine, err
        nodes *= 2
        if 2 * nodes > MAX_INNER_NODES:
            raise QuadratureError(f"inner integral did not reach {tol}", achieved=err)
        coarse = fine


def _terms(rho, zeta, k, c, r, checked=True, outer_nodes=OUTER_NODES):
    """Selected-model and full-model coverage for an array of zeta values."""
    zeta = np.atleast_1d(np.asarray(zeta, dtype=np.float64))[:, None]
    t, w, outer_err = _t_rule(r, outer_nodes)
    t = t[None, :]
    s = math.sqrt(1 - rho * rho)
    if checked:
        inner, err = _inner_checked(rho, zeta, t, k, c)
    else:
        inner, err = _inner(rho, zeta, t, k, c, 2 * INNER_NODES), 0.0
    pick2 = delta(zeta, t * c)
    d0 = delta(0.0, t * k)
    sel = d0 * pick2 + inner
    corr = (delta(rho * zeta / s, t * k) - d0) * pick2
    return (sel * w).sum(axis=1), ((sel + corr) * w).sum(axis=1), float(err + outer_err)


def _validate(rho, k, c):
    if not -1 < rho < 1:
        raise DesignError(f"|rho| must be < 1, got {rho}")
    if not k > 0:
        raise DesignError(f"K must be positive, got {k}")
    if not c > 0:
        raise DesignError(f"threshold C must be positive, got {c}")


def _coverage(scn: NestedScenario, k, target: Target) -> CoverageValue:
    k = float(k)
    _validate(scn.rho, k, scn.c_threshold)
    sel, full, err = _terms(scn.rho, scn.zeta, k, scn.c_threshold, scn.r)
    if scn.r != math.inf:
        # order-halving estimate for the outer rule
        sel2, full2, _ = _terms(scn.rho, scn.zeta, k, scn.c_threshold, scn.r, outer_nodes=OUTER_NODES // 2)
        err += float(max(abs(sel2[0] - sel[0]), abs(full2[0] - full[0])))
    value = float((sel if target == Target.SELECTED else full)[0])
    return CoverageValue(min(1.0, max(0.0, value)), err, target)


def coverage_selected(scn: NestedScenario, k) -> CoverageValue:
    """P(beta_{1.M_hat} in beta_hat_{1.M_hat} +- K sigma_hat_{1.M_hat})."""
    return _coverage(scn, k, Target.SELECTED)


def coverage_full(scn: NestedScenario, k) -> CoverageValue:
    """P(beta_{1.M2} in beta_hat_{1.M_hat} +- K sigma_hat_{1.M_hat})."""
    return _coverage(scn, k, Target.FULL)


def coverage_curve(rho, zeta, c_threshold, k, r=math.inf, target=Target.SELECTED) -> np.ndarray:
    """Coverage at each value of ``zeta`` (no per-point error estimate)."""
    _validate(rho, float(k), c_threshold)
    r = check_dof(r)
    zeta = np.asarray(zeta, dtype=np.float64)
    out = []
    for chunk in np.array_split(zeta, max(1, zeta.size // 64)):
        sel, full, _ = _terms(rho, chunk, float(k), c_threshold, r, checked=False)
        out.append(sel if Target(target) == Target.SELECTED else full)
    return np.clip(np.concatenate(out), 0.0, 1.0)


def zeta_grid(c_threshold, k, r=math.inf, points=GRID_POINTS) -> np.ndarray:
    """Search grid on zeta >= 0 beyond which both zeta-dependent terms vanish."""
    return np.linspace(0.0, (c_threshold + k) * _t_upper(r) + 8.0, points)


def min_coverage(rho, c_threshold, k, r=math.inf, target=Target.SELECTED, points=GRID_POINTS):
    """Minimum over zeta of the coverage probability.

    Coverage is even in zeta, so only zeta >= 0 is searched: a grid pass,
    then bounded Brent (golden-section with parabolic steps) refinement
    around each of the lowest few local minima of the grid.

    Returns
    -------
    (zeta_star, value)
    """
    target = Target(target)
    k = float(k)
    r = check_dof(r)
    _validate(rho, k, c_threshold)
    grid = zeta_grid(c_threshold, k, r, points)
    values = coverage_curve(rho, grid, c_threshold, k, r, target)
    padded = np.concatenate([[np.inf], values, [np.inf]])
    local = np.flatnonzero((padded[1:-1] <= padded[:-2]) & (padded[1:-1] <= padded[2:]))
    local = local[np.argsort(values[local], kind="stable")][:REFINE_BASINS]

    def f(z):
        return float(coverage_curve(rho, [z], c_threshold, k, r, target)[0])

    best_z, best = float(grid[local[0]]), float(values[local[0]])
    for i in local:
        a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        res = optimize.minimize_scalar(f, bounds=(a, b), method="bounded", options={"xatol": 1e-9})
        if res.fun < best:
            best_z, best = float(res.x), float(res.fun)
    return best_z, best


def k_star_nested(rho, c_threshold, alpha=0.05, r=math.inf) -> KConstant:
    """Smallest K whose minimal coverage of beta_{1.M_hat} reaches 1 - alpha."""
    r = check_dof(r)
    level = 1 - alpha
    lo, hi = 1e-6, k_scheffe(alpha, 2, r).value

    def gap(k):
        return min_coverage(rho, c_threshold, k, r, Target.SELECTED)[1] - level

    g_lo, g_hi = gap(lo), gap(hi)
    if not (g_lo < 0 < g_hi):
        raise QuadratureError(f"K_* not bracketed in [{lo}, {hi}]: gaps {g_lo:.3g}, {g_hi:.3g}")
    value = optimize.brentq(gap, lo, hi, xtol=1e-10)
    return KConstant(KKind.OPTIMAL, value, alpha, r)


# ---------------------------------------------------------------------------
# constants of the two-model setting


def nested_constants(rho, alpha=0.05, r=math.inf) -> dict:
    """K_N, K_P1, K_P and K_S for the universe {{1}, {1,2}} at correlation rho.

    K_P and K_P1 are computed by quadrature (the column space is a plane).
    """
    r = check_dof(r)
    design = nested_design(rho)
    universe = nested_universe()
    return {
        KKind.NAIVE: k_naive(alpha, r),
        KKind.POSI1: k_planar(design, universe, alpha, r, protected_only=True),
        KKind.POSI: k_planar(design, universe, alpha, r),
        KKind.SCHEFFE: k_scheffe(alpha, 2, r),
    }
