import numpy as np
import pytest

from kpzlab.errors import ContractError, ResolutionError
from kpzlab.grid import GridSpec
from kpzlab.homog import (beta_scaling_fit, bridge_defect_integral, bulk_exponent,
                          decay_exponent, defect_ensemble, defect_norms, defect_weight,
                          homog_report)
from kpzlab.noise import calibrate_amplitude


@pytest.fixture(scope="module")
def desk():
    g = GridSpec(dim=3, n_per_side=32, box_length=16.0, dt=0.05)
    return g, calibrate_amplitude(g, 2.5)


class TestExponents:
    def test_defect_exponent_values(self):
        assert decay_exponent(2.5) == pytest.approx(0.1)
        assert bulk_exponent(2.5) == pytest.approx(0.2)

    def test_defect_exponent_monotone_in_kappa(self):
        # steeper decay for larger kappa
        assert decay_exponent(2.8) > decay_exponent(2.5) > decay_exponent(2.2)
        assert decay_exponent(2.8) == pytest.approx(0.5 - 1.0 / 2.8)
        assert decay_exponent(2.2) == pytest.approx(0.5 - 1.0 / 2.2)

    def test_weight_formula(self):
        lag, off, kappa = 3.0, 2.0, 2.5
        mu = 0.1
        expected = 4.0**-mu * (1.0 + 2.0 / 2.0)
        assert defect_weight(lag, off, kappa) == pytest.approx(expected, rel=1e-12)


class TestDefectEnsemble:
    def test_beta_zero_defect_vanishes(self, desk):
        g, m = desk
        ens = defect_ensemble(m, 0.0, [0.5, 1.0], [0, 2], replicas=2,
                              master_seed=1, proxy_lookback=0.5)
        for arr in ens.samples.values():
            assert np.abs(arr).max() < 1e-12

    def test_report_needs_three_lags(self, desk):
        g, m = desk
        ens = defect_ensemble(m, 0.0, [0.5, 1.0], [0], replicas=2,
                              master_seed=1, proxy_lookback=0.5)
        with pytest.raises(ContractError):
            homog_report(ens)

    def test_beta_scaling_needs_two_points(self):
        with pytest.raises(ContractError):
            beta_scaling_fit({0.1: 1.0})

    @pytest.mark.slow
    def test_defect_decays_and_mean_centered(self, desk):
        g, m = desk
        ens = defect_ensemble(m, 0.1, [1.0, 2.0, 4.0, 8.0], [0, 2], replicas=24,
                              master_seed=909, proxy_lookback=16.0)
        report = homog_report(ens)
        assert set(report) >= {"kappa", "mu_target", "slope_hat", "ci_lo", "ci_hi"}
        assert report["mu_target"] == pytest.approx(0.1)
        assert report["slope_hat"] <= -report["mu_target"] + 0.15
        assert np.isfinite(report["weighted_sup"])
        # defect is centered once the proxy is deep enough
        for key, arr in ens.samples.items():
            per_rep = arr.mean(axis=1)
            se = per_rep.std(ddof=1) / np.sqrt(per_rep.size)
            assert abs(per_rep.mean()) < 4 * se + 1e-12, key


@pytest.fixture(scope="module")
def quad():
    return GridSpec(dim=3, n_per_side=64, box_length=32.0, dt=0.05)


class TestBridgeIntegral:
    def test_deterministic(self, quad):
        a, _ = bridge_defect_integral(2.0, np.zeros(3), 2.5, quad, n_r=16)
        b, _ = bridge_defect_integral(2.0, np.zeros(3), 2.5, quad, n_r=16)
        assert a == b

    def test_small_time_bounded(self, quad):
        j1, _ = bridge_defect_integral(1.0, np.zeros(3), 2.5, quad, n_r=24)
        for t in (0.1, 0.3, 0.6):
            jt, _ = bridge_defect_integral(t, np.zeros(3), 2.5, quad, n_r=24)
            assert jt <= 10.0 * j1

    def test_offset_growth_controlled(self, quad):
        # J_t(x)/J_t(0) stays within factor 4 at |x|^2 = 1 + t
        t = 1.0
        x = np.array([np.sqrt(1.0 + t), 0.0, 0.0])
        j0, _ = bridge_defect_integral(t, np.zeros(3), 2.5, quad, n_r=24)
        jx, _ = bridge_defect_integral(t, x, 2.5, quad, n_r=24)
        assert jx / j0 <= 4.0

    def test_self_convergence_within_gate(self, quad):
        val, err = bridge_defect_integral(4.0, np.zeros(3), 2.5, quad, n_r=32)
        assert err / val < 0.05

    def test_refusal_on_coarse_resolution(self, quad):
        with pytest.raises(ResolutionError):
            bridge_defect_integral(4.0, np.zeros(3), 2.5, quad, n_r=8,
                                   max_self_error=1e-12)

    def test_box_guard(self):
        small = GridSpec(dim=3, n_per_side=32, box_length=16.0, dt=0.05)
        with pytest.raises(ContractError):
            bridge_defect_integral(16.0, np.zeros(3), 2.5, small)

    @pytest.mark.slow
    def test_decay_slope_moderate_range(self, quad):
        # acceptance fits t in [4, 64] on larger boxes; the same decay is
        # already visible over [4, 16] at this size
        from kpzlab.stats import loglog_slope
        ts = [4.0, 8.0, 16.0]
        vals = [bridge_defect_integral(t, np.zeros(3), 2.5, quad, n_r=32,
                                       _richardson=False)[0] for t in ts]
        fit = loglog_slope(ts, vals)
        assert fit.slope <= -bulk_exponent(2.5) + 0.1
