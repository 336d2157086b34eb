import numpy as np
import pytest

from mixprod import SimConfig, residual_roundtrip_check, simulate_panel

from conftest import make_one_type_model, make_two_type_model


class TestSimulatePanel:
    def test_deterministic_given_seed(self):
        model = make_two_type_model()
        cfg = SimConfig(n_firms=50, T=4, model=model, seed=9)
        a, b = simulate_panel(cfg), simulate_panel(cfg)
        assert np.array_equal(a.panel.y, b.panel.y)
        assert np.array_equal(a.panel.types, b.panel.types)

    def test_seed_changes_draws(self):
        model = make_one_type_model()
        a = simulate_panel(SimConfig(n_firms=50, T=4, model=model, seed=1))
        b = simulate_panel(SimConfig(n_firms=50, T=4, model=model, seed=2))
        assert not np.allclose(a.panel.y, b.panel.y)

    def test_rejects_short_horizon(self):
        with pytest.raises(ValueError):
            SimConfig(n_firms=10, T=3, model=make_one_type_model(), seed=0)

    def test_share_equations_hold_exactly(self):
        res = simulate_panel(
            SimConfig(n_firms=100, T=4, model=make_one_type_model(), seed=3)
        )
        tp = make_one_type_model().types[0]
        panel, eps = res.panel, res.shocks["eps"]
        # the log intermediate share carries the flexible-input shock
        assert np.allclose(
            panel.sm, np.log(tp.beta_m) + 0.5 * tp.sigma_eps**2 - eps,
            atol=1e-12,
        )
        # with the intermediate price normalized, the share identity
        # sm = m - y holds observation by observation
        assert np.allclose(panel.sm, panel.m - panel.y, atol=1e-10)
        # wage bill consistency: b = sl - sm + m
        assert np.allclose(panel.b, panel.sl - panel.sm + panel.m, atol=1e-12)

    def test_productivity_follows_ar1(self):
        res = simulate_panel(
            SimConfig(n_firms=100, T=5, model=make_one_type_model(T=5), seed=4)
        )
        tp = make_one_type_model(T=5).types[0]
        omega, eta = res.shocks["omega"], res.shocks["eta"]
        assert np.allclose(
            omega[:, 1:], tp.rho_omega * omega[:, :-1] + eta, atol=1e-12
        )

    def test_type_frequencies_match_weights(self):
        model = make_two_type_model()
        res = simulate_panel(SimConfig(n_firms=4000, T=4, model=model, seed=5))
        freq = np.bincount(res.panel.types, minlength=2) / 4000
        assert np.all(np.abs(freq - 0.5) < 0.03)

    def test_labels_can_be_suppressed(self):
        res = simulate_panel(SimConfig(
            n_firms=10, T=4, model=make_one_type_model(), seed=0,
            emit_labels=False,
        ))
        assert res.panel.types is None


class TestResidualRoundTrip:
    def test_recovered_shocks_match_drawn(self):
        model = make_two_type_model()
        res = simulate_panel(SimConfig(n_firms=200, T=4, model=model, seed=6))
        assert residual_roundtrip_check(res, model) < 1e-10
