import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import constant_psd, make_five_point, random_separate
from latecomb import estimators as est
from latecomb import model_selection as ms
from latecomb.datasets import CombinedDataset, combine_outcome, combine_treatment
from latecomb.errors import DegenerateFitError, ExhaustedSearchError, InputError, SingularSystemError
from latecomb.kernel_basis import FittedModel, KernelBasis, design_matrix
from latecomb.psd import ONE_EXPERIMENT, PsdEstimate, fit_psd_1e2rd, psd_objective


def exact_psd(dgp):
    basis = dgp.indicator_basis()
    return PsdEstimate(ONE_EXPERIMENT, FittedModel(basis, 2 * dgp.pi), FittedModel(basis, 1 - 2 * dgp.pi))


def support_model(dgp, values):
    return FittedModel(dgp.indicator_basis(), np.asarray(values, dtype=float))


def population_e(dgp, values):
    return float(np.sum(dgp.probs * values))


@pytest.fixture(scope="module")
def big_sample():
    dgp = make_five_point()
    data = dgp.sample(200_000, seed=17)
    return dgp, combine_treatment(data), combine_outcome(data)


class TestCriteriaExamples:
    def test_dls_zero_f_true_nu(self, big_sample):
        dgp, t, u = big_sample
        zero = support_model(dgp, np.zeros(5))
        fit = est.DlsFit(zero, support_model(dgp, dgp.nu), 0.0, 0.0)
        want = -3.0 * population_e(dgp, dgp.nu**2)
        assert ms.criterion_dls(fit, t, u) == pytest.approx(want, rel=0.03)

    def test_dwls_at_truth(self, big_sample):
        dgp, t, u = big_sample
        psd = exact_psd(dgp)
        fit = est.WeightedFit(support_model(dgp, dgp.mu), psd, est.DWLS, 0.0)
        want = -population_e(dgp, dgp.pi**2 * dgp.mu**2)
        assert ms.criterion_dwls(fit, psd, t, u) == pytest.approx(want, rel=0.03)

    def test_dwls_prefers_truth_over_shift(self, big_sample):
        dgp, t, u = big_sample
        psd = exact_psd(dgp)
        good = est.WeightedFit(support_model(dgp, dgp.mu), psd, est.DWLS, 0.0)
        bad = est.WeightedFit(support_model(dgp, dgp.mu + 0.5), psd, est.DWLS, 0.0)
        assert ms.criterion_dwls(good, psd, t, u) < ms.criterion_dwls(bad, psd, t, u)

    def test_iwls_prefers_truth_over_shift(self, big_sample):
        dgp, t, u = big_sample
        psd = exact_psd(dgp)
        good = est.WeightedFit(support_model(dgp, dgp.mu), psd, est.IWLS, 0.0, 0.05)
        bad = est.WeightedFit(support_model(dgp, dgp.mu + 0.5), psd, est.IWLS, 0.0, 0.05)
        assert ms.criterion_iwls(good, psd, t, u) < ms.criterion_iwls(bad, psd, t, u)

    def test_dls_prefers_truth_over_shift(self, big_sample):
        dgp, t, u = big_sample

        def crit(f_vals):
            # g at its population maximizer pi f - nu
            g = support_model(dgp, dgp.pi * f_vals - dgp.nu)
            return ms.criterion_dls(est.DlsFit(support_model(dgp, f_vals), g, 0.0, 0.0), t, u)

        assert crit(dgp.mu) < crit(dgp.mu + 0.5)
        assert crit(dgp.mu + 0.5) == pytest.approx(0.25 * population_e(dgp, dgp.pi**2), rel=0.1)

    def test_nu_criterion_at_truth(self, big_sample):
        dgp, _, u = big_sample
        # E[r (u - nu)^2] = mean of the two regimes' residual variances plus the between-regime term
        got = ms.criterion_nu(support_model(dgp, dgp.nu), u)
        m = dgp.m_y
        want = 0.25 + 0.5 * population_e(dgp, (m[1] - dgp.nu) ** 2 + (m[0] + dgp.nu) ** 2)
        assert got == pytest.approx(want, rel=0.02)


class TestCriteriaByHand:
    @pytest.fixture
    def pair(self):
        data = random_separate(np.random.default_rng(12), q=1, n_max=6, n_min=3)
        return combine_treatment(data), combine_outcome(data)

    def test_zero_models_score_zero(self, pair):
        t, u = pair
        basis = KernelBasis([[0.0], [1.0]], 1.0)
        zero = FittedModel(basis, np.zeros(2))
        assert ms.criterion_dls(est.DlsFit(zero, zero, 0.1, 0.1), t, u) == 0.0
        psd = constant_psd(basis, 0.2)
        assert ms.criterion_dwls(est.WeightedFit(zero, psd, est.DWLS, 0.1), psd, t, u) == 0.0

    def test_numerator_limits(self, pair):
        t, u = pair
        basis = KernelBasis([[0.0]], 1.0)
        zero = FittedModel(basis, [0.0])
        assert ms.criterion_nu(zero, u) == pytest.approx(np.mean(u.weights * u.values**2), rel=1e-14)
        interp = KernelBasis(u.x, 0.01)
        exact = FittedModel(interp, np.linalg.solve(design_matrix(interp, u.x), u.values))
        assert ms.criterion_nu(exact, u) == pytest.approx(0.0, abs=1e-20)

    def test_dls_formula(self, pair):
        t, u = pair
        basis = KernelBasis([[0.0], [1.0]], 1.0)
        fit = est.DlsFit(FittedModel(basis, [0.3, -0.2]), FittedModel(basis, [1.1, 0.4]), 0.1, 0.1)
        f, g = fit.f_model.predict, fit.g_model.predict
        want = (
            2 * sum(r * v * f(x[None])[0] * g(x[None])[0] for r, v, x in zip(t.weights, t.values, t.x)) / t.n
            - 2 * sum(r * v * g(x[None])[0] for r, v, x in zip(u.weights, u.values, u.x)) / u.n
            - sum(r * g(x[None])[0] ** 2 for r, x in zip(u.weights, u.x)) / u.n
        )
        assert ms.criterion_dls(fit, t, u) == pytest.approx(want, rel=1e-12, abs=1e-14)

    def test_iwls_formula_uses_trimmed_inverse(self, pair):
        t, u = pair
        basis = KernelBasis([[0.0]], 1e4)
        psd = constant_psd(basis, 0.1)
        fit = est.WeightedFit(FittedModel(basis, [0.7]), psd, est.IWLS, 0.0, 0.2)
        want = (0.49 * np.mean(t.weights * t.values) - 1.4 * np.mean(u.weights * u.values)) / 0.2
        assert ms.criterion_iwls(fit, psd, t, u) == pytest.approx(want, rel=1e-6)

    def test_rejects_sep_fit(self, pair):
        t, u = pair
        basis = KernelBasis([[0.0]], 1.0)
        psd = constant_psd(basis, 0.2)
        fit = est.WeightedFit(FittedModel(basis, [0.7]), psd, "sep", 0.0)
        with pytest.raises(InputError):
            ms.criterion_dwls(fit, psd, t, u)

    def test_sep_components(self, pair):
        t, u = pair
        basis = KernelBasis([[0.0], [0.5]], 1.0)
        psd = fit_psd_1e2rd(t, u, basis, 0.1)
        nu = est.fit_nu(u, basis, 0.1)
        obj = ms.criterion_psd(psd, t, u)
        assert obj == psd_objective(psd, t, u)
        got = ms.criterion_sep(nu, obj, u)
        resid = u.values - nu.predict(u.x)
        assert got[0] == pytest.approx(np.mean(u.weights * resid**2), rel=1e-12)
        assert got[1] == obj


def permuted(ds, perm):
    return CombinedDataset(ds.values[perm], ds.x[perm], ds.weights[perm], ds.kind)


def doubled(ds):
    return CombinedDataset(
        np.concatenate([ds.values] * 2), np.vstack([ds.x] * 2), np.concatenate([ds.weights] * 2), ds.kind
    )


class TestInvariance:
    @pytest.fixture
    def setup(self):
        data = random_separate(np.random.default_rng(3), q=2, n_max=50, n_min=20)
        t, u = combine_treatment(data), combine_outcome(data)
        basis = KernelBasis(np.random.default_rng(4).normal(size=(5, 2)), 1.5)
        psd = fit_psd_1e2rd(t, u, basis, 0.01)
        fits = {
            "dls": est.fit_dls(t, u, basis, basis, 0.1, 0.1),
            "dwls": est.fit_dwls(t, u, basis, psd, 0.1),
            "iwls": est.fit_iwls(t, u, basis, psd, 0.15, 0.1),
        }
        nu = est.fit_nu(u, basis, 0.1)

        def scores(tt, uu):
            return [
                ms.criterion_dls(fits["dls"], tt, uu),
                ms.criterion_dwls(fits["dwls"], psd, tt, uu),
                ms.criterion_iwls(fits["iwls"], psd, tt, uu),
                ms.criterion_nu(nu, uu),
                ms.criterion_psd(psd, tt, uu),
            ]

        return t, u, scores

    def test_row_order(self, setup):
        t, u, scores = setup
        rng = np.random.default_rng(0)
        base = scores(t, u)
        again = scores(permuted(t, rng.permutation(t.n)), permuted(u, rng.permutation(u.n)))
        np.testing.assert_allclose(again, base, rtol=1e-12, atol=1e-14)

    def test_duplication(self, setup):
        t, u, scores = setup
        np.testing.assert_allclose(scores(doubled(t), doubled(u)), scores(t, u), rtol=1e-12, atol=1e-14)


class TestSearchSpace:
    def test_validation(self):
        with pytest.raises(InputError):
            ms.SearchSpace(h_range=(0.0, 1.0))
        with pytest.raises(InputError):
            ms.SearchSpace(lam_range=(1.0, 0.5))
        with pytest.raises(InputError):
            ms.SearchSpace(budget=0)

    def test_pinned_range(self):
        space = ms.SearchSpace(h_range=(2.0, 2.0), lam_range=(0.3, 0.3), budget=4)
        assert all(c == (2.0, 0.3) for c in space.candidates())

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 60), st.integers(0, 2**31))
    def test_stratified_and_in_range(self, budget, seed):
        space = ms.SearchSpace(budget=budget, seed=seed)
        cands = space.candidates()
        assert len(cands) == budget
        h = np.array([c[0] for c in cands])
        lam = np.array([c[1] for c in cands])
        assert np.all((h >= 1.0) & (h <= 10.0))
        assert np.all((lam >= 1e-5) & (lam <= 1e5))
        h_bins = np.minimum(((h - 1.0) / 9.0 * budget).astype(int), budget - 1)
        lam_bins = np.minimum(((np.log10(lam) + 5) / 10 * budget).astype(int), budget - 1)
        assert sorted(h_bins) == list(range(budget))
        assert sorted(lam_bins) == list(range(budget))

    def test_seeded(self):
        assert ms.SearchSpace(seed=4).candidates() == ms.SearchSpace(seed=4).candidates()
        assert ms.SearchSpace(seed=4).candidates() != ms.SearchSpace(seed=5).candidates()


class TestRandomSearch:
    def test_budget_one(self):
        space = ms.SearchSpace(budget=1, seed=3)
        res = ms.random_search(lambda tr, h, lam: (h, lam), lambda fit, val: 1.0, space, None, None)
        assert res.best_params == space.candidates()[0] and len(res.trace) == 1

    def test_ties_go_to_first(self):
        space = ms.SearchSpace(budget=10, seed=1)
        res = ms.random_search(lambda tr, h, lam: None, lambda fit, val: 0.0, space, None, None)
        assert res.best_params == space.candidates()[0]

    def test_picks_minimum(self):
        space = ms.SearchSpace(budget=25, seed=2)
        res = ms.random_search(lambda tr, h, lam: (h, lam), lambda fit, val: (fit[0] - 5.0) ** 2, space, None, None)
        assert res.best_criterion == min(c for _, c in res.trace)
        assert res.best_fit == res.best_params
        assert all(res.best_criterion <= c for _, c in res.trace)

    def test_failures_score_inf(self):
        space = ms.SearchSpace(budget=8, seed=0)
        calls = []

        def fit_fn(train, h, lam):
            calls.append(h)
            if len(calls) % 2:
                raise SingularSystemError("singular")
            if len(calls) == 4:
                raise DegenerateFitError("degenerate")
            return h

        def crit(fit, val):
            return math.nan if fit > 9.5 else fit

        res = ms.random_search(fit_fn, crit, space, None, None)
        assert res.n_failed >= 5
        assert all(c == math.inf or math.isfinite(c) for _, c in res.trace)
        assert math.isfinite(res.best_criterion)

    def test_all_fail(self):
        def fit_fn(train, h, lam):
            raise SingularSystemError("always")

        with pytest.raises(ExhaustedSearchError):
            ms.random_search(fit_fn, lambda f, v: 0.0, ms.SearchSpace(budget=3), None, None)

    def test_unexpected_errors_propagate(self):
        def fit_fn(train, h, lam):
            raise InputError("bad")

        with pytest.raises(InputError):
            ms.random_search(fit_fn, lambda f, v: 0.0, ms.SearchSpace(budget=3), None, None)

    def test_deterministic_on_real_fits(self):
        data = random_separate(np.random.default_rng(9), q=2, n_max=40, n_min=20)
        t, u = combine_treatment(data), combine_outcome(data)
        centers = t.x[:5]

        def fit_fn(train, h, lam):
            return est.fit_dls(*train, KernelBasis(centers, h), KernelBasis(centers, h), lam, lam)

        def crit(fit, val):
            return ms.criterion_dls(fit, *val)

        space = ms.SearchSpace(budget=12, seed=7)
        a = ms.random_search(fit_fn, crit, space, (t, u), (t, u))
        b = ms.random_search(fit_fn, crit, space, (t, u), (t, u))
        assert a.best_params == b.best_params and a.trace == b.trace
