"""Design matrices, candidate models and least-squares geometry.

Column indices are 1-based everywhere a user sees them (``ModelId``,
``Design.protected``, CSV labels) and 0-based inside numpy code.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DesignError, RankError

RANK_TOL = 1e-10


@dataclass(frozen=True, order=True)
class ModelId:
    """A candidate submodel, identified by its (1-based) column indices."""

    members: tuple[int, ...]

    def __post_init__(self):
        members = tuple(sorted({int(j) for j in self.members}))
        if not members:
            raise DesignError("a model needs at least one column")
        if members[0] < 1:
            raise DesignError(f"column indices are 1-based, got {members}")
        object.__setattr__(self, "members", members)

    @classmethod
    def of(cls, *columns: int) -> "ModelId":
        return cls(tuple(columns))

    @classmethod
    def from_mask(cls, mask: int) -> "ModelId":
        return cls(tuple(j + 1 for j in range(int(mask).bit_length()) if mask >> j & 1))

    @property
    def mask(self) -> int:
        return sum(1 << (j - 1) for j in self.members)

    @property
    def index0(self) -> np.ndarray:
        return np.asarray(self.members, dtype=np.intp) - 1

    def position(self, column: int) -> int:
        """Position of ``column`` inside the coefficient vector of this model."""
        return self.members.index(column)

    def __contains__(self, column) -> bool:
        return column in self.members

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __str__(self) -> str:
        return "{" + ",".join(map(str, self.members)) + "}"


def sort_universe(models: Iterable[ModelId]) -> list[ModelId]:
    """Order models by size, then lexicographically by members."""
    return sorted(set(models), key=lambda m: (len(m), m.members))


@dataclass(frozen=True)
class ModelFactor:
    """Thin QR factorization of ``X_M`` plus derived quantities."""

    model: ModelId
    q: np.ndarray
    r: np.ndarray
    pinv: np.ndarray  # |M| x n, rows give beta_hat_{j.M} = pinv[j] @ y
    inv_diag: np.ndarray  # diag of (X_M'X_M)^{-1}


@dataclass(frozen=True)
class SubmodelFit:
    model: ModelId
    beta_hat: np.ndarray
    sigma_hat_j: np.ndarray
    rss: float

    def coefficient(self, column: int) -> float:
        return float(self.beta_hat[self.model.position(column)])

    def std_error(self, column: int) -> float:
        return float(self.sigma_hat_j[self.model.position(column)])


@dataclass(frozen=True)
class NestedScenario:
    """The two nested model setting: M1 = {1} against M2 = {1, 2}.

    ``r`` is the residual degrees of freedom of the variance estimator;
    ``math.inf`` means the variance is known.
    """

    rho: float
    zeta: float
    c_threshold: float
    r: float = math.inf
    alpha: float = 0.05

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise DesignError(f"rho must lie in (-1, 1), got {self.rho}")
        if not self.c_threshold > 0:
            raise DesignError("c_threshold must be positive")
        check_dof(self.r)
        if not 0 < self.alpha < 1:
            raise DesignError("alpha must lie in (0, 1)")


def check_dof(r) -> float:
    if r is None or r == math.inf:
        return math.inf
    if float(r) != int(r) or int(r) < 1:
        raise DesignError(f"degrees of freedom must be a positive integer or inf, got {r}")
    return int(r)


class Design:
    """Fixed regressor matrix with a protected column.

    Model factorizations are computed on first use and cached; the regressor
    matrix itself is read-only.
    """

    def __init__(self, x, protected: int = 1, column_labels: Sequence[str] | None = None):
        x = np.array(x, dtype=np.float64, copy=True)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DesignError(f"design must be a nonempty 2-d array, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DesignError("design contains non-finite entries")
        x.setflags(write=False)
        self.x = x
        self.n, self.p = x.shape
        if not 1 <= protected <= self.p:
            raise DesignError(f"protected column {protected} outside 1..{self.p}")
        self.protected = int(protected)
        if column_labels is not None:
            column_labels = [str(s) for s in column_labels]
            if len(column_labels) != self.p:
                raise DesignError("column_labels length does not match the number of columns")
        self.column_labels = column_labels
        self._factors: dict[int, ModelFactor] = {}
        self._basis = None

    def __repr__(self):
        return f"Design(n={self.n}, p={self.p}, protected={self.protected})"

    @property
    def gram(self) -> np.ndarray:
        return self.x.T @ self.x

    @property
    def basis(self) -> np.ndarray:
        """Orthonormal basis (n x s) of the column space of ``x``."""
        if self._basis is None:
            u, sv, _ = np.linalg.svd(self.x, full_matrices=False)
            s = int(np.sum(sv > RANK_TOL * sv[0]))
            self._basis = np.ascontiguousarray(u[:, :s])
        return self._basis

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def full_model(self) -> ModelId:
        return ModelId(tuple(range(1, self.p + 1)))

    def factor(self, m: ModelId) -> ModelFactor:
        """Register ``m`` (checking full column rank) and return its factorization."""
        cached = self._factors.get(m.mask)
        if cached is not None:
            return cached
        if m.members[-1] > self.p:
            raise DesignError(f"model {m} uses columns beyond p={self.p}")
        if len(m) > self.n:
            raise RankError(f"model {m} has more columns than observations (n={self.n})")
        xm = self.x[:, m.index0]
        q, r = np.linalg.qr(xm)
        d = np.abs(np.diag(r))
        if d.max() == 0 or d.min() < RANK_TOL * d.max():
            raise RankError(f"model {m} is rank deficient")
        rinv = solve_triangular(r, np.eye(len(m)))
        pinv = rinv @ q.T
        inv_diag = np.sum(rinv**2, axis=1)
        for a in (q, r, pinv, inv_diag):
            a.setflags(write=False)
        f = ModelFactor(m, q, r, pinv, inv_diag)
        self._factors[m.mask] = f
        return f

    def with_x(self, x) -> "Design":
        """Same metadata, different regressor values (e.g. rotated by Q)."""
        return Design(x, protected=self.protected, column_labels=self.column_labels)


# ---------------------------------------------------------------------------
# universes


def protected_universe(design: Design) -> list[ModelId]:
    """All submodels that contain the protected column (2^(p-1) models)."""
    others = [j for j in range(1, design.p + 1) if j != design.protected]
    models = [
        ModelId((design.protected, *extra))
        for k in range(len(others) + 1)
        for extra in itertools.combinations(others, k)
    ]
    return sort_universe(models)


def all_subsets_universe(design: Design) -> list[ModelId]:
    """All nonempty submodels of full column rank."""
    out = []
    for k in range(1, min(design.p, design.n) + 1):
        for cols in itertools.combinations(range(1, design.p + 1), k):
            m = ModelId(cols)
            try:
                design.factor(m)
            except RankError:
                continue
            out.append(m)
    return out


def nested_universe() -> list[ModelId]:
    return [ModelId.of(1), ModelId.of(1, 2)]


# ---------------------------------------------------------------------------
# construction


def _embed(xp: np.ndarray, n: int, seed: int | None) -> np.ndarray:
    """Place a p x p coordinate matrix into n-space by an orthonormal map."""
    p = xp.shape[0]
    if n < p:
        raise DesignError(f"need n >= p, got n={n}, p={p}")
    if seed is None:
        return np.vstack([xp, np.zeros((n - p, xp.shape[1]))])
    g = np.random.default_rng(seed).standard_normal((n, p))
    u, r = np.linalg.qr(g)
    u = u * np.sign(np.diag(r))
    return u @ xp


def build_design_from_gram(gram, n: int, protected: int = 1, embedding_seed: int | None = None) -> Design:
    """Design whose Gram matrix is ``gram`` (Cholesky factor padded with zero rows)."""
    gram = np.asarray(gram, dtype=np.float64)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise DesignError("gram must be a square matrix")
    if not np.allclose(gram, gram.T, rtol=0, atol=1e-12 * max(1.0, np.abs(gram).max())):
        raise DesignError("gram not symmetric")
    p = gram.shape[0]
    if n < p:
        raise DesignError(f"need n >= p, got n={n}, p={p}")
    try:
        lower = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise DesignError("gram not positive definite") from None
    return Design(_embed(lower.T, n, embedding_seed), protected=protected)


def exchangeable_design(p: int, a: float, n: int, embedding_seed: int | None = None) -> Design:
    """Columns e_j + a * 1_p, orthonormally embedded into n-space.

    All Gram diagonal entries equal 1 + 2a + p a^2 and all off-diagonal
    entries equal 2a + p a^2.
    """
    if p < 2:
        raise DesignError("exchangeable design needs p >= 2")
    xp = np.eye(p) + a * np.ones((p, p))
    if abs(1 + p * a) < 1e-12:
        raise DesignError(f"a = {a} makes the exchangeable Gram singular")
    return Design(_embed(xp, n, embedding_seed))


def equicorrelated_design(p: int, c: float, n: int, embedding_seed: int | None = None) -> Design:
    """Unit-norm columns with every pairwise correlation equal to ``c``."""
    if p < 2:
        raise DesignError("equicorrelated design needs p >= 2")
    if not -1.0 / (p - 1) < c < 1:
        raise DesignError(f"c = {c} outside the positive-definite range (-1/(p-1), 1)")
    gram = (1 - c) * np.eye(p) + c * np.ones((p, p))
    lower = np.linalg.cholesky(gram)
    return Design(_embed(lower.T, n, embedding_seed))


def one_vs_rest_design(p: int, c: float, n: int, embedding_seed: int | None = None) -> Design:
    """Protected first column with correlation ``c`` to each of p-1 orthonormal columns.

    Column 1 is (sqrt(1 - (p-1)c^2), c, ..., c) in coordinates where columns
    2..p are the unit vectors e_2..e_p. Requires (p-1) c^2 < 1.
    """
    if p < 2:
        raise DesignError("one-vs-rest design needs p >= 2")
    rest = 1 - (p - 1) * c * c
    if not rest > 0:
        raise DesignError(f"c = {c} needs (p-1) c^2 < 1")
    xp = np.eye(p)
    xp[:, 0] = c
    xp[0, 0] = math.sqrt(rest)
    return Design(_embed(xp, n, embedding_seed))


def load_design_csv(path, protected: int = 1, check_full_rank: bool = True) -> Design:
    """Read a rectangular numeric CSV (optional single header row)."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [row for row in csv.reader(fh) if row and any(cell.strip() for cell in row)]
    except OSError as exc:
        raise DesignError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise DesignError(f"{path} is empty")

    def numeric(row):
        try:
            return [float(cell) for cell in row]
        except ValueError:
            return None

    labels = None
    if numeric(rows[0]) is None:
        labels = [cell.strip() for cell in rows[0]]
        rows = rows[1:]
    data = []
    width = len(labels) if labels is not None else len(rows[0]) if rows else 0
    for i, row in enumerate(rows, start=2 if labels is not None else 1):
        if len(row) != width:
            raise DesignError(f"{path}:{i}: ragged row ({len(row)} cells, expected {width})")
        values = numeric(row)
        if values is None:
            raise DesignError(f"{path}:{i}: non-numeric cell in {row}")
        data.append(values)
    if not data:
        raise DesignError(f"{path} has no data rows")
    design = Design(np.array(data), protected=protected, column_labels=labels)
    if design.n < design.p:
        raise DesignError(f"{path}: {design.n} rows but {design.p} columns")
    if check_full_rank:
        design.factor(design.full_model)
    return design


# ---------------------------------------------------------------------------
# least squares


def fit_submodel(design: Design, y, m: ModelId, sigma_hat: float) -> SubmodelFit:
    if not sigma_hat > 0:
        raise DesignError("sigma_hat must be positive")
    f = design.factor(m)
    y = np.asarray(y, dtype=np.float64)
    beta_hat = f.pinv @ y
    resid = y - design.x[:, m.index0] @ beta_hat
    return SubmodelFit(
        model=m,
        beta_hat=beta_hat,
        sigma_hat_j=sigma_hat * np.sqrt(f.inv_diag),
        rss=float(resid @ resid),
    )


def target_coefficients(design: Design, mu, m: ModelId) -> np.ndarray:
    """Coefficients of the orthogonal projection of ``mu`` onto span(X_M)."""
    return design.factor(m).pinv @ np.asarray(mu, dtype=np.float64)


def rho_two_model(design: Design) -> float:
    """Sign-flipped correlation of the two full-model coefficient estimators."""
    if design.p != 2:
        raise DesignError(f"rho is defined for two-column designs, got p={design.p}")
    design.factor(design.full_model)
    inv = np.linalg.inv(design.gram)
    return float(-inv[0, 1] / math.sqrt(inv[0, 0] * inv[1, 1]))


def nested_design(rho: float, n: int = 2) -> Design:
    """Two unit-norm columns whose correlation is ``rho``."""
    if not abs(rho) < 1:
        raise DesignError("rho must lie in (-1, 1)")
    return build_design_from_gram([[1.0, rho], [rho, 1.0]], n)


def coefficient_rows(design: Design, universe: Sequence[ModelId], protected_only: bool = False):
    """Rows a with beta_hat_{j.M} = a @ y, for (j, M) over the universe.

    Returns ``(rows, keys)`` where ``keys`` lists the matching (j, M) pairs.
    """
    rows, keys = [], []
    for m in universe:
        f = design.factor(m)
        if protected_only:
            if design.protected not in m:
                raise DesignError(f"model {m} lacks the protected column {design.protected}")
            pos = m.position(design.protected)
            rows.append(f.pinv[pos])
            keys.append((design.protected, m))
        else:
            rows.extend(f.pinv)
            keys.extend((j, m) for j in m)
    return np.array(rows), keys


@dataclass
class ProtectedTable:
    """Per-model quantities for the protected coefficient, indexed by bitmask.

    ``index[mask]`` is the row of model ``mask`` (or -1 when the mask is not
    in the universe).
    """

    design: Design
    universe: list[ModelId]
    coef: np.ndarray  # K x n
    scale: np.ndarray  # sqrt([(X_M'X_M)^{-1}]_{11})
    index: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, design: Design, universe: Sequence[ModelId] | None = None) -> "ProtectedTable":
        universe = sort_universe(universe if universe is not None else protected_universe(design))
        rows, _ = coefficient_rows(design, universe, protected_only=True)
        scale = np.sqrt(np.sum(rows**2, axis=1))
        index = np.full(1 << design.p, -1, dtype=np.intp)
        for i, m in enumerate(universe):
            index[m.mask] = i
        return cls(design, list(universe), rows, scale, index)

    def rows_for(self, masks: np.ndarray) -> np.ndarray:
        idx = self.index[masks]
        if np.any(idx < 0):
            bad = ModelId.from_mask(int(masks[np.argmax(idx < 0)]))
            raise DesignError(f"model {bad} is outside the registered universe")
        return idx
