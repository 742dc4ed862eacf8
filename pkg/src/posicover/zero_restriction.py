"""Zero-restricted intervals for selection between two models.

With candidate models M0 (without the protected column) and M1 (with it),
the target is b_M = beta_{1.M1} if M1 is selected and 0 otherwise. The
interval is the textbook one from M1 when M1 is selected and the single
point {0} when M0 is selected. It covers whenever the M1 interval covers or
M0 is selected, so its coverage is at least that of the textbook interval,
whatever the selector does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .constants import KConstant
from .design import Design, ModelId, SubmodelFit
from .errors import DesignError, SelectorError
from .montecarlo import BLOCK, CoverageEstimate, _generator
from .nested import Target


@dataclass(frozen=True)
class ZeroRestrictedInterval:
    point_zero: bool
    center: float = 0.0
    halfwidth: float = 0.0

    def __post_init__(self):
        if not self.point_zero and not self.halfwidth > 0:
            raise ValueError("a standard interval needs a positive half-width")

    @classmethod
    def standard(cls, center, halfwidth):
        return cls(False, float(center), float(halfwidth))

    @classmethod
    def zero(cls):
        return cls(True)

    @property
    def lower(self):
        return 0.0 if self.point_zero else self.center - self.halfwidth

    @property
    def upper(self):
        return 0.0 if self.point_zero else self.center + self.halfwidth

    def contains(self, value) -> bool:
        if self.point_zero:
            return value == 0
        return abs(value - self.center) <= self.halfwidth


def zero_restriction_interval(fit1: SubmodelFit, selected: ModelId, k_n, m0: ModelId | None = None, protected: int = 1):
    """Interval for b_{M_hat} given the fit of M1 and the selected model.

    ``m0`` pins down the second candidate; without it any model lacking the
    protected column is taken to be M0.
    """
    if selected == fit1.model:
        return ZeroRestrictedInterval.standard(fit1.coefficient(protected), float(k_n) * fit1.std_error(protected))
    if (m0 is not None and selected == m0) or (m0 is None and protected not in selected):
        return ZeroRestrictedInterval.zero()
    raise SelectorError(f"selected model {selected} is neither M1={fit1.model} nor M0={m0}")


# ---------------------------------------------------------------------------
# selectors for the validity check


@dataclass(frozen=True)
class ThresholdRule:
    """Select M1 iff (|v'y| / (sigma_hat ||v||) > threshold) xor ``flip``."""

    v: tuple
    threshold: float
    flip: bool = False
    name: str = "threshold"

    def __call__(self, Y, sigma_hat):
        v = np.asarray(self.v)
        stat = np.abs(Y @ v) / (sigma_hat * np.linalg.norm(v))
        return (stat > self.threshold) ^ self.flip


@dataclass(frozen=True)
class ConstantRule:
    pick_m1: bool
    name: str = "constant"

    def __call__(self, Y, sigma_hat):
        return np.full(np.atleast_2d(Y).shape[0], self.pick_m1)


def t_statistic_rule(design: Design, m1: ModelId, threshold=3.0, protected=1) -> ThresholdRule:
    """Select M1 when |beta_hat_{1.M1}| / sigma_hat_{1.M1} exceeds ``threshold``."""
    f = design.factor(m1)
    return ThresholdRule(tuple(f.pinv[m1.position(protected)]), float(threshold), False, f"t>{threshold:g}")


def random_threshold_rules(n: int, count: int, seed: int) -> list[ThresholdRule]:
    """Seeded threshold rules on random linear statistics of y."""
    rng = _generator(seed, 0x5E1)
    rules = []
    for i in range(count):
        v = rng.standard_normal(n)
        rules.append(ThresholdRule(tuple(v), float(rng.uniform(0.0, 3.0)), bool(rng.random() < 0.5), f"rule{i}"))
    return rules


# ---------------------------------------------------------------------------
# simulation


def zero_restriction_events(design, m0, m1, rule, beta, sigma=1.0, k_n=None, r=math.inf, replications=10_000, seed=0, key=(0,)):
    """Per-replication indicators (covered, M1-interval covers, M1 selected).

    ``r`` finite uses the full-model residual variance, which needs r = n - p.
    ``k_n`` defaults to the naive constant at alpha = 0.05.
    """
    protected = design.protected
    if protected not in m1 or protected in m0:
        raise DesignError("M1 must contain the protected column and M0 must not")
    if r != math.inf and r != design.n - design.p:
        raise DesignError(f"r={r} does not match n-p={design.n - design.p}")
    if isinstance(k_n, KConstant) and k_n.r != r:
        raise DesignError("constant and variance mode disagree on r")
    f1 = design.factor(m1)
    design.factor(m0)
    row = f1.pinv[m1.position(protected)]
    scale = math.sqrt(f1.inv_diag[m1.position(protected)])
    beta = np.asarray(beta, dtype=np.float64)
    mu = design.x @ beta
    b1 = row @ mu
    qf = design.factor(design.full_model).q if r != math.inf else None
    if k_n is None:
        from .constants import k_naive

        k_n = k_naive(0.05, r)
    k = float(k_n)
    cover, in_i1, pick = (np.empty(replications, dtype=bool) for _ in range(3))
    for b, start in enumerate(range(0, replications, BLOCK)):
        size = min(BLOCK, replications - start)
        rng = _generator(seed, *key, b)
        y = mu + sigma * rng.standard_normal((size, design.n))
        if qf is None:
            sigma_hat = np.full(size, float(sigma))
        else:
            resid = y - (y @ qf) @ qf.T
            sigma_hat = np.sqrt(np.einsum("ij,ij->i", resid, resid) / r)
        sel = np.asarray(rule(y, sigma_hat), dtype=bool)
        if sel.shape != (size,):
            raise SelectorError(f"rule returned shape {sel.shape}, expected ({size},)")
        hit = np.abs(y @ row - b1) <= k * sigma_hat * scale
        sl = slice(start, start + size)
        in_i1[sl] = hit
        pick[sl] = sel
        # selected M1: the M1 interval must cover b_M1; selected M0: {0} covers b_M0 = 0
        cover[sl] = np.where(sel, hit, True)
    return cover, in_i1, pick


def validate_zero_restriction(design, m0, m1, rule, beta, sigma=1.0, alpha=0.05, k_n=None, r=math.inf,
                              replications=100_000, seed=0, key=(0,)) -> CoverageEstimate:
    """Monte Carlo coverage of b_{M_hat} by the zero-restricted interval."""
    from .constants import k_naive

    if k_n is None:
        k_n = k_naive(alpha, r)
    cover, _, _ = zero_restriction_events(design, m0, m1, rule, beta, sigma, k_n, r, replications, seed, key)
    return CoverageEstimate.from_count(int(cover.sum()), replications, beta, Target.SELECTED)
