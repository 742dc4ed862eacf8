import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import brute_force_lasso_cv
from posicover import lasso
from posicover.design import Design, ModelId, build_design_from_gram, equicorrelated_design, exchangeable_design
from posicover.errors import ConvergenceError, SelectorError
from posicover.selectors import (
    SelectorSpec,
    check_protected,
    make_engine,
    select_lasso_cv,
    select_nested,
    select_spar_variant,
    select_stepwise,
    stepwise_objective,
)


def rss(x, y, cols):
    b, *_ = np.linalg.lstsq(x[:, cols], y, rcond=None)
    r = y - x[:, cols] @ b
    return float(r @ r)


def crit(x, y, cols, pen):
    return len(y) * math.log(rss(x, y, cols) / len(y)) + pen * len(cols)


def greedy_oracle(x, y, pen):
    """Plain-loop greedy search from the full model, protecting column 0."""
    p = x.shape[1]
    cur = set(range(p))
    val = crit(x, y, sorted(cur), pen)
    while True:
        moves = [cur - {j} for j in range(1, p) if j in cur] + [cur | {j} for j in range(1, p) if j not in cur]
        vals = [crit(x, y, sorted(m), pen) for m in moves]
        i = int(np.argmin(vals))
        if vals[i] >= val:
            return tuple(sorted(j + 1 for j in cur)), val
        cur, val = moves[i], vals[i]


def exhaustive_oracle(x, y, pen):
    p = x.shape[1]
    best = None
    for k in range(p):
        for extra in itertools.combinations(range(1, p), k):
            v = crit(x, y, [0, *extra], pen)
            if best is None or v < best[1]:
                best = ((1, *(j + 1 for j in extra)), v)
    return best


class TestNested:
    def setup_method(self):
        self.d = build_design_from_gram([[1, 0.6], [0.6, 1]], 2)

    def test_zero_statistic_gives_small_model(self):
        y = self.d.x[:, 0] * 3.0
        assert select_nested(self.d, y, 1.0, math.sqrt(2)) == ModelId.of(1)

    def test_boundary_is_strict(self):
        f = self.d.factor(ModelId.of(1, 2))
        # y with beta_hat_2 = C * se exactly, built in the coefficient basis
        c = 1.5
        y = self.d.x @ np.array([0.0, c * math.sqrt(f.inv_diag[1])])
        stat = abs(f.pinv[1] @ y) / math.sqrt(f.inv_diag[1])
        assert select_nested(self.d, y, 1.0, stat) == ModelId.of(1)
        assert select_nested(self.d, y, 1.0, stat * (1 - 1e-12)) == ModelId.of(1, 2)

    def test_selection_frequency_at_zeta_zero(self):
        eng = make_engine(self.d, SelectorSpec.nested(math.sqrt(2)))
        y = np.random.default_rng(0).standard_normal((1_000_000, 2))
        freq = np.mean(eng.select(y, np.ones(len(y))) == 0b11)
        expect = 2 * stats.norm.sf(math.sqrt(2))
        assert abs(freq - expect) < 3 * math.sqrt(expect * (1 - expect) / 1e6)
        assert expect == pytest.approx(0.157, abs=1e-3)

    def test_needs_two_columns(self):
        with pytest.raises(SelectorError):
            make_engine(equicorrelated_design(3, 0.1, 4), SelectorSpec.nested(1.0))


class TestStepwise:
    def test_zero_penalty_gives_full_model(self):
        rng = np.random.default_rng(1)
        d = Design(rng.standard_normal((20, 6)))
        for _ in range(10):
            assert select_stepwise(d, rng.standard_normal(20), 1.0, 0.0) == d.full_model

    def test_strong_protected_signal_orthonormal(self):
        q, _ = np.linalg.qr(np.random.default_rng(2).standard_normal((30, 6)))
        d = Design(q)
        rng = np.random.default_rng(3)
        hits = 0
        for _ in range(200):
            y = 5 * q[:, 0] + 0.01 * rng.standard_normal(30)
            m = select_stepwise(d, y, 1.0, 2.0)
            assert m.members == exhaustive_oracle(q, y, 2.0)[0] or stepwise_objective(d, y, m, 2.0) >= exhaustive_oracle(q, y, 2.0)[1]
            hits += m == ModelId.of(1)
        # each noise column enters with probability P(chi2_1 > 2 + O(1/n)) ~ 0.16
        assert hits / 200 > 0.3

    def test_matches_greedy_oracle_and_bounds_exhaustive(self):
        rng = np.random.default_rng(4)
        equal = 0
        for trial in range(60):
            x = rng.standard_normal((15, 6)) + 0.5 * rng.standard_normal((15, 1))
            d = Design(x)
            y = x @ rng.normal(0, 0.6, 6) + rng.standard_normal(15)
            pen = 2.0 if trial % 2 else math.log(15)
            m = select_stepwise(d, y, 1.0, pen)
            g, gval = greedy_oracle(x, y, pen)
            assert m.members == g
            assert stepwise_objective(d, y, m, pen) == pytest.approx(gval, abs=1e-9)
            ex, exval = exhaustive_oracle(x, y, pen)
            assert gval >= exval - 1e-9
            equal += ex == g
        # greedy reaches the exhaustive optimum on most instances
        assert equal >= 40

    def test_bic_models_not_larger_than_aic_on_average(self):
        d = equicorrelated_design(8, 0.3, 30, embedding_seed=5)
        rng = np.random.default_rng(6)
        y = d.x @ rng.normal(0, 0.3, 8) + rng.standard_normal((500, 30))
        aic = make_engine(d, SelectorSpec.aic()).select(y, None)
        bic = make_engine(d, SelectorSpec.bic(30)).select(y, None)
        size = lambda m: np.array([bin(int(v)).count("1") for v in m])
        assert size(bic).mean() < size(aic).mean()

    def test_needs_p_less_than_n(self):
        with pytest.raises(SelectorError):
            make_engine(Design(np.eye(3)), SelectorSpec.aic())


class TestLassoPath:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.x = rng.standard_normal((40, 5)) * [1, 2, 0.5, 1, 3]
        self.y = self.x @ [1.0, 0, -0.5, 0, 0.2] + rng.standard_normal(40)

    def test_zero_above_lambda_max(self):
        lmax = lasso.lambda_max(self.x, self.y)
        out = lasso.lasso_path(self.x, self.y, [lmax * 1.5, lmax])
        np.testing.assert_array_equal(out, 0)
        assert np.any(lasso.lasso_path(self.x, self.y, [lmax * 0.99]) != 0)

    def test_small_lambda_approaches_least_squares(self):
        out = lasso.lasso_path(self.x, self.y, lasso.lambda_grid(lasso.lambda_max(self.x, self.y), 50, 1e-7))
        ls, *_ = np.linalg.lstsq(self.x, self.y, rcond=None)
        np.testing.assert_allclose(out[-1], ls, atol=1e-4)

    def test_soft_threshold_single_column(self):
        x = self.x[:, :1]
        n = len(self.y)
        s = math.sqrt(np.mean(x[:, 0] ** 2))
        z = (x[:, 0] / s) @ self.y / n
        for lam in (0.9 * abs(z), 0.3 * abs(z), 0.01 * abs(z)):
            out = lasso.lasso_path(x, self.y, [lam])[0, 0]
            assert out == pytest.approx(np.sign(z) * max(abs(z) - lam, 0) / s, abs=1e-10)

    def test_matches_sklearn_and_kkt(self):
        from sklearn.linear_model import Lasso

        lambdas = lasso.lambda_grid(lasso.lambda_max(self.x, self.y), 30, 1e-3)
        out = lasso.lasso_path(self.x, self.y, lambdas)
        s = np.sqrt(np.mean(self.x**2, axis=0))
        for lam, b in zip(lambdas, out):
            assert lasso.kkt_residual(self.x, self.y, b, lam) <= 1e-7
            ref = Lasso(alpha=lam, fit_intercept=False, tol=1e-14, max_iter=10**6).fit(self.x / s, self.y).coef_ / s
            np.testing.assert_allclose(b, ref, atol=1e-6)

    def test_ill_conditioned_path_converges(self):
        d = exchangeable_design(9, 10.0, 29, embedding_seed=1)
        y = np.random.default_rng(8).standard_normal(29)
        lambdas = lasso.lambda_grid(lasso.lambda_max(d.x, y))
        out = lasso.lasso_path(d.x, y, lambdas)
        assert max(lasso.kkt_residual(d.x, y, b, lam) for lam, b in zip(lambdas, out)) <= 1e-7

    def test_rejects_bad_grid(self):
        with pytest.raises(SelectorError):
            lasso.lasso_path(self.x, self.y, [0.1, 0.2])
        with pytest.raises(SelectorError):
            lasso.lasso_path(np.zeros((5, 2)), np.ones(5), [0.1])

    def test_iteration_budget(self):
        d = exchangeable_design(9, 10.0, 29, embedding_seed=1)
        y = np.random.default_rng(8).standard_normal(29)
        with pytest.raises(ConvergenceError) as info:
            lasso.lasso_path(d.x, y, lasso.lambda_grid(lasso.lambda_max(d.x, y)), max_cd_sweeps=1, max_fs_iter=1)
        assert info.value.lambda_index is not None


class TestLassoCV:
    def test_matches_per_fold_sklearn_oracle(self):
        rng = np.random.default_rng(9)
        for trial in range(4):
            xt = rng.standard_normal((30, 6))
            yt = xt @ np.array([1.0, 0.5, 0, 0, -0.3, 0]) + rng.standard_normal(30)
            fold_of = lasso.fold_assignment(rng.random(30), 10)
            mask = lasso.cv_select_supports(xt, yt, fold_of, 10)[0]
            support, _, _ = brute_force_lasso_cv(xt, yt, fold_of[0], 10)
            assert mask == sum(1 << int(j) for j in support)

    def test_fold_assignment_balanced(self):
        f = lasso.fold_assignment(np.random.default_rng(0).random((3, 30)), 10)
        for row in f:
            assert np.all(np.bincount(row, minlength=10) == 3)

    def test_y_in_span_of_protected(self):
        d = equicorrelated_design(5, 0.3, 20, embedding_seed=2)
        for seed in range(5):
            assert select_lasso_cv(d, 4.0 * d.x[:, 0], seed=seed) == ModelId.of(1)

    def test_deterministic(self):
        d = equicorrelated_design(5, 0.3, 20, embedding_seed=2)
        y = np.random.default_rng(3).standard_normal(20)
        assert select_lasso_cv(d, y, seed=11) == select_lasso_cv(d, y, seed=11)

    def test_strong_single_signal(self):
        q, _ = np.linalg.qr(np.random.default_rng(4).standard_normal((30, 5)))
        d = Design(q)
        eng = make_engine(d, SelectorSpec.lasso_cv())
        rng = np.random.default_rng(5)
        y = 10 * q[:, 1] + rng.standard_normal((1000, 30))
        masks = eng.select(y, None, rng)
        assert np.all(masks & 0b11 == 0b11)
        # the strong column always enters; noise columns may join it
        assert np.mean(masks & 0b10 > 0) >= 0.95

    def test_too_few_rows(self):
        with pytest.raises(SelectorError):
            make_engine(Design(np.eye(5)), SelectorSpec.lasso_cv(10))

    def test_needs_rng(self):
        d = equicorrelated_design(3, 0.3, 12)
        with pytest.raises(SelectorError):
            make_engine(d, SelectorSpec.lasso_cv()).select(np.ones((1, 12)), None)


class TestSpar:
    def test_singleton(self):
        d = equicorrelated_design(3, 0.3, 5)
        y = np.random.default_rng(0).standard_normal(5)
        assert select_spar_variant(d, y, 1.0, [ModelId.of(1, 3)]) == ModelId.of(1, 3)

    def test_direct_ratios(self):
        rng = np.random.default_rng(1)
        d = Design(rng.standard_normal((10, 2)))
        for _ in range(50):
            y = rng.standard_normal(10)
            sig = rng.uniform(0.5, 2)
            ratios = []
            for cols in ([0], [0, 1]):
                xm = d.x[:, cols]
                b = np.linalg.solve(xm.T @ xm, xm.T @ y)
                se = sig * math.sqrt(np.linalg.inv(xm.T @ xm)[0, 0])
                ratios.append(abs(b[0]) / se)
            expect = ModelId.of(1) if ratios[0] >= ratios[1] else ModelId.of(1, 2)
            assert select_spar_variant(d, y, sig, [ModelId.of(1), ModelId.of(1, 2)]) == expect

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(0, 1000))
    def test_scale_equivariant(self, scale, seed):
        d = equicorrelated_design(4, 0.4, 6, embedding_seed=3)
        y = np.random.default_rng(seed).standard_normal(6)
        universe = [ModelId((1, *e)) for k in range(4) for e in itertools.combinations((2, 3, 4), k)]
        assert select_spar_variant(d, y, 1.0, universe) == select_spar_variant(d, scale * y, scale, universe)

    def test_requires_protected_models(self):
        d = equicorrelated_design(3, 0.3, 5)
        with pytest.raises(SelectorError):
            make_engine(d, SelectorSpec.spar_variant(), [ModelId.of(2)])


SPECS = [SelectorSpec.aic(), SelectorSpec.bic(30), SelectorSpec.lasso_cv(5, 20), SelectorSpec.spar_variant()]


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(SPECS), st.integers(0, 10_000), st.floats(0.0, 3.0))
def test_selected_models_contain_protected_column(spec, seed, signal):
    d = equicorrelated_design(5, 0.3, 30, embedding_seed=1)
    rng = np.random.default_rng(seed)
    y = d.x @ (signal * rng.standard_normal(5)) + rng.standard_normal((8, 30))
    masks = make_engine(d, spec).select(y, np.ones(8), rng)
    check_protected(d, masks)
    assert np.all((masks > 0) & (masks < 1 << 5))


def test_check_protected_rejects():
    d = equicorrelated_design(3, 0.3, 5)
    with pytest.raises(SelectorError):
        check_protected(d, np.array([0b011, 0b110]))


@pytest.mark.parametrize("spec", [SelectorSpec.aic(), SelectorSpec.bic(30), SelectorSpec.stepwise(3.5),
                                  SelectorSpec.nested(math.sqrt(2)), SelectorSpec.lasso_cv(10, 100),
                                  SelectorSpec.spar_variant(), SelectorSpec.fixed(ModelId.of(1, 3))])
def test_spec_round_trip(spec):
    assert SelectorSpec.parse(spec.to_string()).to_string() == spec.to_string()


def test_parse_aliases():
    assert SelectorSpec.parse("bic", 30).penalty == pytest.approx(math.log(30))
    assert SelectorSpec.parse("lasso").folds == 10
    assert SelectorSpec.parse("nested:sqrt2").c_threshold == pytest.approx(math.sqrt(2))
    for bad in ("bogus", "stepwise:x", "bic"):
        with pytest.raises(SelectorError):
            SelectorSpec.parse(bad)
