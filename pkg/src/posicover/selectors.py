"""Model selection procedures.

Every selector works on a batch of responses at once: ``engine.select(Y,
sigma_hat, rng)`` returns one model bitmask per row of ``Y``. The
single-response functions (``select_nested`` and friends) are thin wrappers
around the same engines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import lasso
from .design import (
    Design,
    ModelId,
    coefficient_rows,
    nested_universe,
    protected_universe,
    sort_universe,
)
from .errors import DesignError, SelectorError

KINDS = ("nested", "stepwise", "lasso-cv", "spar-variant", "fixed", "custom")


@dataclass(frozen=True)
class SelectorSpec:
    """A parameterized model selection procedure.

    ``rule`` (custom selectors only) is called as ``rule(design, Y, sigma_hat,
    rng)`` and must return one bitmask or ``ModelId`` per row of ``Y``.
    """

    kind: str
    c_threshold: float | None = None
    penalty: float | None = None
    folds: int = 10
    n_lambda: int = 100
    model: ModelId | None = None
    rule: Callable | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SelectorError(f"unknown selector kind {self.kind!r}")
        if self.kind == "nested" and not (self.c_threshold and self.c_threshold > 0):
            raise SelectorError("nested selector needs a positive c_threshold")
        if self.kind == "stepwise" and (self.penalty is None or self.penalty < 0):
            raise SelectorError("stepwise selector needs a nonnegative penalty")
        if self.kind == "lasso-cv" and (self.folds < 2 or self.n_lambda < 1):
            raise SelectorError("lasso-cv needs folds >= 2 and n_lambda >= 1")
        if self.kind == "fixed" and self.model is None:
            raise SelectorError("fixed selector needs a model")
        if self.kind == "custom" and self.rule is None:
            raise SelectorError("custom selector needs a rule")

    @classmethod
    def nested(cls, c_threshold):
        return cls("nested", c_threshold=float(c_threshold))

    @classmethod
    def stepwise(cls, penalty, name=None):
        return cls("stepwise", penalty=float(penalty), name=name)

    @classmethod
    def aic(cls):
        return cls.stepwise(2.0, name="aic")

    @classmethod
    def bic(cls, n):
        return cls.stepwise(math.log(n), name="bic")

    @classmethod
    def lasso_cv(cls, folds=10, n_lambda=100):
        return cls("lasso-cv", folds=int(folds), n_lambda=int(n_lambda))

    @classmethod
    def spar_variant(cls):
        return cls("spar-variant")

    @classmethod
    def fixed(cls, model):
        return cls("fixed", model=model)

    @classmethod
    def custom(cls, rule, name="custom"):
        return cls("custom", rule=rule, name=name)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return self.to_string()

    def to_string(self) -> str:
        if self.kind == "nested":
            return f"nested:{self.c_threshold!r}"
        if self.kind == "stepwise":
            if self.name == "aic":
                return "aic"
            if self.name == "bic":
                return f"bic:{self.penalty!r}"
            return f"stepwise:{self.penalty!r}"
        if self.kind == "lasso-cv":
            return f"lasso-cv:{self.folds}:{self.n_lambda}"
        if self.kind == "spar-variant":
            return "spar-variant"
        if self.kind == "fixed":
            return "fixed:" + ",".join(map(str, self.model.members))
        raise SelectorError("custom selectors cannot be serialized")

    @classmethod
    def parse(cls, text: str, n: int | None = None) -> "SelectorSpec":
        """Inverse of ``to_string``; also accepts ``aic``, ``bic`` and ``lasso``."""
        head, _, rest = text.strip().lower().partition(":")
        try:
            if head == "aic":
                return cls.aic()
            if head == "bic":
                if rest:
                    return cls.stepwise(float(rest), name="bic")
                if n is None:
                    raise SelectorError("bic needs the sample size")
                return cls.bic(n)
            if head == "stepwise":
                return cls.stepwise(float(rest))
            if head == "nested":
                from .util import parse_number

                return cls.nested(parse_number(rest))
            if head in ("lasso", "lasso-cv"):
                parts = [int(v) for v in rest.split(":") if v]
                return cls.lasso_cv(*parts)
            if head in ("spar", "spar-variant"):
                return cls.spar_variant()
            if head == "fixed":
                return cls.fixed(ModelId(tuple(int(v) for v in rest.split(","))))
        except ValueError as exc:
            raise SelectorError(f"cannot parse selector {text!r}: {exc}") from None
        raise SelectorError(f"unknown selector {text!r}")


# ---------------------------------------------------------------------------
# engines


class _Engine:
    needs_rng = False

    def __init__(self, design: Design, spec: SelectorSpec):
        self.design = design
        self.spec = spec
        self.universe = protected_universe(design)

    def select(self, Y, sigma_hat, rng=None) -> np.ndarray:
        raise NotImplementedError


class _NestedEngine(_Engine):
    def __init__(self, design, spec):
        super().__init__(design, spec)
        if design.p != 2 or design.protected != 1:
            raise SelectorError("nested selector needs a two-column design protecting column 1")
        self.universe = nested_universe()
        f = design.factor(ModelId.of(1, 2))
        self.row = f.pinv[1]
        self.scale = math.sqrt(f.inv_diag[1])

    def select(self, Y, sigma_hat, rng=None):
        stat = np.abs(Y @ self.row) / (np.asarray(sigma_hat) * self.scale)
        return np.where(stat > self.spec.c_threshold, 0b11, 0b01).astype(np.int64)


class _StepwiseEngine(_Engine):
    """Greedy add-or-drop search from the full model over a precomputed RSS table."""

    def __init__(self, design, spec):
        super().__init__(design, spec)
        full = design.full_model
        if design.p >= design.n:
            raise SelectorError("stepwise search needs p < n")
        design.factor(full)
        q, r = np.linalg.qr(design.x)
        self.q = q
        bases, sizes = [], []
        for m in self.universe:
            qm, _ = np.linalg.qr(r[:, m.index0])
            bases.append(qm)
            sizes.append(len(m))
        self.w = np.hstack(bases)
        self.sizes = np.array(sizes)
        self.starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        masks = np.array([m.mask for m in self.universe])
        self.masks = masks
        lookup = {int(mk): i for i, mk in enumerate(masks)}
        self.full_index = lookup[full.mask]
        others = [j for j in range(1, design.p + 1) if j != design.protected]
        # neighbours in the order drops-then-adds, each by column index
        nbr = np.empty((len(self.universe), len(others)), dtype=np.intp)
        for i, m in enumerate(self.universe):
            drops = [j for j in others if j in m]
            adds = [j for j in others if j not in m]
            nbr[i] = [lookup[int(masks[i]) ^ (1 << (j - 1))] for j in drops + adds]
        self.nbr = nbr

    def objective(self, Y):
        n = self.design.n
        Y = np.atleast_2d(Y)
        z = Y @ self.q
        resid = Y - z @ self.q.T
        rss_full = np.einsum("ij,ij->i", resid, resid)
        zz = np.einsum("ij,ij->i", z, z)
        ess = np.add.reduceat((z @ self.w) ** 2, self.starts, axis=1)
        rss = rss_full[:, None] + np.maximum(zz[:, None] - ess, 0.0)
        rss[:, self.full_index] = rss_full
        with np.errstate(divide="ignore"):
            return n * np.log(rss / n) + self.spec.penalty * self.sizes

    def select(self, Y, sigma_hat=None, rng=None):
        obj = self.objective(Y)
        rows = np.arange(obj.shape[0])
        cur = np.full(obj.shape[0], self.full_index)
        live = rows
        while live.size:
            cand = self.nbr[cur[live]]
            cand_obj = obj[live[:, None], cand]
            j = np.argmin(cand_obj, axis=1)
            best = cand_obj[np.arange(live.size), j]
            move = best < obj[live, cur[live]]
            cur[live[move]] = cand[move, j[move]]
            live = live[move]
        return self.masks[cur]


class _LassoEngine(_Engine):
    needs_rng = True

    def __init__(self, design, spec):
        super().__init__(design, spec)
        if design.n < spec.folds:
            raise SelectorError(f"{design.n} rows cannot be split into {spec.folds} folds")
        j = design.protected - 1
        self.first = design.x[:, j]
        self.others = np.array([k for k in range(design.p) if k != j])
        self.xt = np.ascontiguousarray(design.x[:, self.others])
        self.bits = (1 << self.others).astype(np.int64)

    def residualize(self, Y):
        x1 = self.first
        return Y - np.outer(Y @ x1 / (x1 @ x1), x1)

    def select(self, Y, sigma_hat=None, rng=None):
        if rng is None:
            raise SelectorError("lasso-cv needs a random generator for the fold split")
        Y = np.atleast_2d(Y)
        fold_of = lasso.fold_assignment(rng.random(Y.shape), self.spec.folds)
        support = lasso.cv_select_supports(
            self.xt, self.residualize(Y), fold_of, self.spec.folds, self.spec.n_lambda
        )
        masks = np.full(Y.shape[0], 1 << (self.design.protected - 1), dtype=np.int64)
        for k, bit in enumerate(self.bits):
            masks |= np.where(support >> k & 1, bit, 0)
        return masks


class _SparEngine(_Engine):
    def __init__(self, design, spec, universe=None):
        super().__init__(design, spec)
        if universe is not None:
            universe = sort_universe(universe)
            if any(design.protected not in m for m in universe):
                raise SelectorError("every model must contain the protected column")
            self.universe = universe
        rows, _ = coefficient_rows(design, self.universe, protected_only=True)
        self.dirs = rows / np.linalg.norm(rows, axis=1)[:, None]
        self.masks = np.array([m.mask for m in self.universe], dtype=np.int64)

    def select(self, Y, sigma_hat=None, rng=None):
        # |beta_hat_1M| / sigma_hat_1M = |u_M' y| / sigma_hat; sigma_hat cancels
        return self.masks[np.argmax(np.abs(np.atleast_2d(Y) @ self.dirs.T), axis=1)]


class _FixedEngine(_Engine):
    def __init__(self, design, spec):
        super().__init__(design, spec)
        design.factor(spec.model)
        self.universe = [spec.model]

    def select(self, Y, sigma_hat=None, rng=None):
        return np.full(np.atleast_2d(Y).shape[0], self.spec.model.mask, dtype=np.int64)


class _CustomEngine(_Engine):
    needs_rng = True

    def select(self, Y, sigma_hat=None, rng=None):
        out = self.spec.rule(self.design, np.atleast_2d(Y), sigma_hat, rng)
        return np.array([m.mask if isinstance(m, ModelId) else int(m) for m in out], dtype=np.int64)


def make_engine(design: Design, spec: SelectorSpec, universe: Sequence[ModelId] | None = None) -> _Engine:
    if spec.kind == "nested":
        return _NestedEngine(design, spec)
    if spec.kind == "stepwise":
        return _StepwiseEngine(design, spec)
    if spec.kind == "lasso-cv":
        return _LassoEngine(design, spec)
    if spec.kind == "spar-variant":
        return _SparEngine(design, spec, universe)
    if spec.kind == "fixed":
        return _FixedEngine(design, spec)
    return _CustomEngine(design, spec)


def check_protected(design: Design, masks: np.ndarray):
    bit = 1 << (design.protected - 1)
    bad = np.flatnonzero((masks & bit) == 0)
    if bad.size:
        raise SelectorError(
            f"selector returned {ModelId.from_mask(int(masks[bad[0]])) if masks[bad[0]] else '{}'} "
            f"without the protected column (replication {int(bad[0])})"
        )


# ---------------------------------------------------------------------------
# single-response API


def _one(engine, y, sigma_hat, rng=None) -> ModelId:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (engine.design.n,):
        raise DesignError(f"response has shape {y.shape}, expected ({engine.design.n},)")
    mask = engine.select(y[None, :], np.atleast_1d(float(sigma_hat)), rng)[0]
    return ModelId.from_mask(int(mask))


def select_nested(design: Design, y, sigma_hat: float, c_threshold: float) -> ModelId:
    """M2 = {1, 2} when |t_2| in the larger model exceeds ``c_threshold``, else M1 = {1}."""
    return _one(_NestedEngine(design, SelectorSpec.nested(c_threshold)), y, sigma_hat)


def select_stepwise(design: Design, y, sigma_hat: float, penalty: float) -> ModelId:
    """Greedy bidirectional search from the full model on n log(RSS/n) + penalty |M|.

    The protected column is never dropped. ``sigma_hat`` is accepted for a
    uniform signature and does not enter the criterion.
    """
    return _one(_StepwiseEngine(design, SelectorSpec.stepwise(penalty)), y, sigma_hat)


def select_lasso_cv(design: Design, y, folds: int = 10, seed: int = 0, n_lambda: int = 100) -> ModelId:
    """Protected column plus the LASSO support chosen by K-fold cross-validation.

    The response is residualized on the protected column, the protected
    column is removed from the regressors and no intercept is fitted.
    """
    engine = _LassoEngine(design, SelectorSpec.lasso_cv(folds, n_lambda))
    return _one(engine, y, 1.0, np.random.default_rng(seed))


def select_spar_variant(design: Design, y, sigma_hat: float, universe: Sequence[ModelId]) -> ModelId:
    """Model maximizing |beta_hat_{1.M}| / sigma_hat_{1.M}; ties go to the smaller model."""
    return _one(_SparEngine(design, SelectorSpec.spar_variant(), universe), y, sigma_hat)


def stepwise_objective(design: Design, y, m: ModelId, penalty: float) -> float:
    """n log(RSS_M / n) + penalty |M| for a single model (reference path)."""
    f = design.factor(m)
    y = np.asarray(y, dtype=np.float64)
    resid = y - f.q @ (f.q.T @ y)
    return design.n * math.log(float(resid @ resid) / design.n) + penalty * len(m)
