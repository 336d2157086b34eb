import itertools

import numpy as np
import pytest

from mixprod import (
    PANEL_COLUMNS,
    PanelData,
    RankDeficiencyError,
    SimConfig,
    classify,
    investment_regression,
    nearest_rank_percentile,
    productivity_growth_bias,
    quantile_regression,
    residualized_dispersion,
    share_dispersion,
    simulate_panel,
)

from conftest import make_one_type_model, make_two_type_model


def pooled_reference():
    """One-type model with weight-averaged elasticities of the
    two-type test model."""
    return make_one_type_model(
        beta_m=0.3405, beta_l=0.2245, beta_k=0.125,
        rho_omega=0.855, sigma_eta=0.125,
    )


def panel_from(n=5, T=4, seed=0, **overrides):
    rng = np.random.default_rng(seed)
    cols = {name: rng.standard_normal((n, T)) for name in PANEL_COLUMNS}
    cols.update(overrides)
    return PanelData(**cols)


class TestClassify:
    def test_argmax_with_low_index_ties(self):
        post = np.array([[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]])
        assert classify(post).tolist() == [1, 0, 0]

    def test_rejects_bad_rows(self):
        with pytest.raises(ValueError):
            classify(np.array([[0.7, 0.7]]))
        with pytest.raises(ValueError):
            classify(np.ones(4))


class TestGrowthBias:
    def test_decomposition_is_exact_identity(self, two_type_panel):
        res, model = two_type_panel
        report = productivity_growth_bias(
            res.panel, model, pooled_reference(), res.panel.types,
        )
        gap = report.growth_pooled - report.growth_typed - report.bias
        assert np.max(np.abs(gap)) < 1e-12

    def test_identical_models_have_zero_bias(self, small_panel):
        res, model = small_panel
        report = productivity_growth_bias(
            res.panel, model, model, np.zeros(res.panel.n_firms, dtype=int),
        )
        assert np.max(np.abs(report.bias)) < 1e-12
        assert report.mean_abs_bias_ratio[0] == pytest.approx(0.0)

    def test_sign_pattern_by_material_elasticity(self, two_type_panel):
        # relative to the pooled elasticities, the low-beta_m type's
        # measured growth is overstated by the pooled model when inputs
        # grow, and the high-beta_m type's is understated
        res, model = two_type_panel
        report = productivity_growth_bias(
            res.panel, model, pooled_reference(), res.panel.types,
        )
        assert report.mean_bias_ratio_pos_growth[0] < 0  # beta_m = 0.287
        assert report.mean_bias_ratio_pos_growth[1] > 0  # beta_m = 0.394

    def test_rejects_multi_type_pooled_model(self, small_panel):
        res, model = small_panel
        with pytest.raises(ValueError):
            productivity_growth_bias(
                res.panel, model, make_two_type_model(),
                np.zeros(res.panel.n_firms, dtype=int),
            )

    def test_report_rows(self, small_panel):
        res, model = small_panel
        report = productivity_growth_bias(
            res.panel, model, model, np.zeros(res.panel.n_firms, dtype=int),
        )
        rows = report.to_rows()
        assert ("type1", "beta_m", model.types[0].beta_m, "") in rows


class TestInvestmentRegression:
    def test_recovers_noiseless_coefficients(self):
        rng = np.random.default_rng(1)
        panel = panel_from(n=40, T=4, seed=2)
        omega = rng.standard_normal(160)
        y = (0.2 + 0.059 * omega + 0.03 * panel.k.ravel()
             - 0.01 * panel.k.ravel()**2)
        result = investment_regression(panel, omega, y)
        assert result.alpha_omega_ols == pytest.approx(0.059, abs=1e-10)
        for coef, _ in result.alpha_omega_quantiles.values():
            assert coef == pytest.approx(0.059, abs=1e-6)
        rows = result.to_rows("type1")
        assert rows[0][:3] == ("type1", "alpha_omega_ols",
                               result.alpha_omega_ols)

    def test_constant_capital_named_collinear(self):
        rng = np.random.default_rng(3)
        panel = panel_from(n=40, T=4, seed=4, k=np.ones((40, 4)))
        with pytest.raises(RankDeficiencyError, match="k"):
            investment_regression(
                panel, rng.standard_normal(160), rng.standard_normal(160),
            )

    def test_requires_enough_observations(self):
        panel = panel_from(n=5, T=4, seed=5)
        with pytest.raises(ValueError, match="observations"):
            investment_regression(
                panel, np.zeros(20), np.zeros(20),
            )


class TestQuantileRegression:
    @pytest.mark.parametrize("tau", [0.1, 0.25, 0.5, 0.75, 0.9])
    def test_subgradient_condition(self, tau):
        rng = np.random.default_rng(int(tau * 100))
        n, p = 200, 3
        X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
        y = X @ np.array([1.0, -0.5, 2.0]) + rng.standard_normal(n)
        coef, se = quantile_regression(X, y, tau)
        frac = np.mean(y - X @ coef < 0)
        assert tau - p / n <= frac <= tau + p / n
        assert np.all(np.isfinite(se)) and np.all(se > 0)

    def test_median_matches_ols_under_symmetric_noise(self):
        rng = np.random.default_rng(7)
        n = 4000
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        y = X @ np.array([0.3, 1.2]) + rng.standard_normal(n)
        coef, _ = quantile_regression(X, y, 0.5)
        ols = np.linalg.lstsq(X, y, rcond=None)[0]
        assert np.allclose(coef, ols, atol=0.06)

    @pytest.mark.parametrize("tau", [0.25, 0.5, 0.75])
    def test_tiny_instance_global_optimality(self, tau):
        # with p = 2 an optimal fit interpolates two observations, so
        # enumerating all pairs gives the exact global minimum
        rng = np.random.default_rng(11)
        X = np.column_stack([np.ones(7), rng.standard_normal(7)])
        y = rng.standard_normal(7)

        def loss(b):
            r = y - X @ b
            return np.sum(r * (tau - (r < 0)))

        best = np.inf
        for i, j in itertools.combinations(range(7), 2):
            sub = X[[i, j]]
            if abs(np.linalg.det(sub)) < 1e-12:
                continue
            best = min(best, loss(np.linalg.solve(sub, y[[i, j]])))
        coef, _ = quantile_regression(X, y, tau)
        assert loss(coef) <= best + 1e-9

    def test_rejects_bad_tau(self):
        X = np.ones((5, 1))
        with pytest.raises(ValueError):
            quantile_regression(X, np.zeros(5), 1.0)


class TestDispersion:
    def test_nearest_rank_percentile(self):
        vals = [3.0, 1.0, 2.0, 5.0, 4.0]
        assert nearest_rank_percentile(vals, 0.1) == 1.0
        assert nearest_rank_percentile(vals, 0.5) == 3.0
        assert nearest_rank_percentile(vals, 0.9) == 5.0
        assert nearest_rank_percentile([0.4, 1.0], 0.9) == 1.0
        with pytest.raises(ValueError):
            nearest_rank_percentile([], 0.5)

    def test_share_dispersion_hand_case(self):
        n = 10
        sm = np.tile(np.linspace(-1.0, -0.1, n)[:, None], (1, 4))
        panel = panel_from(n=n, T=4, seed=6, sm=sm, sl=sm.copy())
        out = share_dispersion(panel)
        # plant means run from -1.0 to -0.1; nearest-rank 90-10 uses
        # the 9th and 1st smallest
        assert out["sm"][0] == pytest.approx(-0.2 - (-1.0))
        # sl == sm makes the level cost share exactly one half
        assert out["sm_cost"][0] == pytest.approx(0.0, abs=1e-12)

    def test_share_dispersion_by_group(self):
        panel = panel_from(n=8, T=4, seed=9)
        groups = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        out = share_dispersion(panel, groups)
        assert set(out["sm"]) == {0, 1}
        with pytest.raises(ValueError):
            share_dispersion(panel, groups[:4])

    def test_residualized_dispersion_absorbs_quadratic_share(self):
        rng = np.random.default_rng(10)
        n = 30
        m = rng.standard_normal((n, 4))
        lt = rng.standard_normal((n, 4))
        k = rng.standard_normal((n, 4))
        sm = 0.5 - 0.2 * m + 0.1 * lt * k - 0.05 * k**2
        panel = panel_from(n=n, T=4, seed=12, m=m, ltilde=lt, k=k, sm=sm)
        out = residualized_dispersion(panel)
        assert out[0] == pytest.approx(0.0, abs=1e-10)

    def test_residualized_dispersion_drops_collinear_terms(self):
        rng = np.random.default_rng(13)
        m = rng.standard_normal((30, 4))
        panel = panel_from(n=30, T=4, seed=14, m=m, ltilde=m.copy())
        with pytest.warns(UserWarning, match="collinear"):
            residualized_dispersion(panel)

    def test_residualized_dispersion_needs_two_plants_per_group(self):
        panel = panel_from(n=3, T=4, seed=15)
        with pytest.raises(ValueError, match="fewer than 2"):
            residualized_dispersion(panel, np.array([0, 0, 1]))
