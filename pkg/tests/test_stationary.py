import numpy as np
import pytest
import scipy.fft as sfft

from kpzlab.errors import ContractError
from kpzlab.grid import GridSpec
from kpzlab.noise import calibrate_amplitude
from kpzlab.she import RunState, run_coupled
from kpzlab.stationary import (backward_field_check, default_probes, effective_variance,
                               estimate_stationary, stationarity_rate, transform)


@pytest.fixture(scope="module")
def desk():
    g = GridSpec(dim=3, n_per_side=32, box_length=16.0, dt=0.05)
    return g, calibrate_amplitude(g, 2.5)


class TestTransforms:
    def test_log_envelope(self):
        spec = transform("log")
        assert spec.envelope_ok()

    def test_identity_envelope(self):
        assert transform("identity").envelope_ok()

    def test_power_envelope(self):
        assert transform("power", power=2.0).envelope_ok()

    def test_unknown_rejected(self):
        with pytest.raises(ContractError):
            transform("sine")
        with pytest.raises(ContractError):
            transform("power", power=-1.0)

    def test_probe_spacing(self, desk):
        g, _ = desk
        probes = default_probes(g)
        assert len(probes) == 8
        for i, a in enumerate(probes):
            for b in probes[i + 1:]:
                d = np.sqrt(sum(((x - y) % g.n_per_side) ** 2 for x, y in zip(a, b))) * g.dx
                assert d >= g.box_length / 4.0


@pytest.fixture(scope="module")
def ensemble(desk):
    g, m = desk
    return estimate_stationary(m, beta=0.1, lookbacks=[0.5, 1.0, 2.0, 4.0],
                               replicas=48, master_seed=1001)


class TestStationaryEstimates:
    def test_beta_zero_degenerate(self, desk):
        g, m = desk
        ests, diffs = estimate_stationary(m, beta=0.0, lookbacks=[0.5, 1.0],
                                          replicas=4, master_seed=3)
        for est in ests.values():
            assert np.array_equal(est.samples, np.ones_like(est.samples))
            assert est.c_hat == 0.0
            nu, _ = effective_variance(transform("log"), est)
            assert nu == 1.0

    def test_mean_one(self, ensemble):
        ests, _ = ensemble
        for est in ests.values():
            assert abs(est.mean - 1.0) < 4 * est.mean_se

    def test_pathwise_rate_in_band(self, ensemble):
        _, diffs = ensemble
        fit = stationarity_rate(diffs)
        assert -0.275 <= fit.slope <= 0.025

    def test_spatial_stationarity_across_probes(self, ensemble):
        ests, _ = ensemble
        est = ests[4.0]
        per_probe = est.samples.mean(axis=0)
        se = est.samples.std(axis=0, ddof=1) / np.sqrt(est.samples.shape[0])
        grand = est.mean
        for mu, s in zip(per_probe, se):
            assert abs(mu - grand) < 4 * s

    def test_effective_variance_log_exact(self, ensemble):
        ests, _ = ensemble
        nu, se = effective_variance(transform("log"), ests[4.0])
        assert nu == pytest.approx(1.0, abs=1e-14)

    def test_effective_variance_identity_near_one(self, ensemble):
        ests, _ = ensemble
        nu, se = effective_variance(transform("identity"), ests[4.0])
        assert abs(nu - 1.0) < 4 * se

    def test_effective_variance_positive_samples_required(self, ensemble):
        ests, _ = ensemble
        est = ests[4.0]
        import dataclasses
        bad = dataclasses.replace(est, samples=est.samples - 2.0)
        with pytest.raises(ContractError):
            effective_variance(transform("log"), bad)

    def test_moment_estimates_stabilize(self, ensemble):
        # running estimates of Z^4 and Z^-4 agree between replica halves
        ests, _ = ensemble
        z = ests[4.0].samples.reshape(-1)
        for p in (4.0, -4.0):
            v = z**p
            a, b = v[: v.size // 2], v[v.size // 2:]
            sa = a.std(ddof=1) / np.sqrt(a.size)
            sb = b.std(ddof=1) / np.sqrt(b.size)
            assert abs(a.mean() - b.mean()) < 4 * np.hypot(sa, sb)

    def test_lookbacks_must_increase(self, desk):
        g, m = desk
        with pytest.raises(ContractError):
            estimate_stationary(m, 0.1, [2.0, 1.0], replicas=2, master_seed=1)


class TestLogMeanConstant:
    def test_c_negative_at_three_se(self, desk):
        g, m = desk
        ests, _ = estimate_stationary(m, beta=0.2, lookbacks=[8.0],
                                      replicas=64, master_seed=2002)
        est = ests[8.0]
        assert est.c_hat < 0
        assert est.c_hat / est.c_hat_se < -3.0

    def test_effective_variance_square_trend(self, desk):
        # nu for Phi(z) = z^2 is 2 E[Z^2]: decreasing toward Phi'(1) = 2 as
        # the coupling shrinks
        g, m = desk
        sq = transform("power", power=2.0)
        nus = []
        for i, beta in enumerate((0.2, 0.1, 0.05)):
            ests, _ = estimate_stationary(m, beta=beta, lookbacks=[8.0],
                                          replicas=48, master_seed=3003 + i)
            nu, se = effective_variance(sq, ests[8.0])
            nus.append((nu, se))
        vals = [n for n, _ in nus]
        assert vals[0] > vals[1] > vals[2]
        assert abs(vals[2] - 2.0) < 4 * nus[2][1] + 0.02


class TestSpatialDecorrelation:
    def test_log_field_covariance_dominated_by_power_law(self, desk):
        # cov(log Z(x), log Z(0)) below a fitted multiple of 1 ^ |x|^(2-k)
        g, m = desk
        reps, steps = 48, 80
        acc = np.zeros(g.shape)
        means = np.zeros(g.shape)
        fields = []
        for rep in range(reps):
            st = RunState(name="z", epsilon=1.0, beta_eff=0.1,
                          init_values=np.ones(g.shape), start_step=-steps)
            run_coupled(m, [st], 0, 4004, rep, snapshot_steps={0})
            fields.append(np.log(st.snapshots[0]))
        fields = np.array(fields)
        fields -= fields.mean(axis=0, keepdims=True)
        cov = np.zeros(g.shape)
        for f in fields:
            spec = sfft.rfftn(f)
            cov += sfft.irfftn(spec * np.conj(spec), s=g.shape, axes=(0, 1, 2))
        cov /= reps * g.n_sites
        radii_sites = [2, 4, 8, 16]
        vals = [cov[(r, 0, 0)] for r in radii_sites]
        assert vals[0] > vals[1] > vals[2] > 0
        # dominance: decay at least as fast as |x|^(2-kappa) up to slack 3x
        r1, r3 = radii_sites[0] * g.dx, radii_sites[2] * g.dx
        assert vals[2] / vals[0] < 3.0 * (r3 / r1) ** (2.0 - m.kappa)


class TestDuality:
    def test_refusal_below_minimum_samples(self, desk):
        g, m = desk
        with pytest.raises(ContractError, match="100"):
            backward_field_check(m, 0.1, 0.0, (0, 0, 0), [1.0], replicas=50, master_seed=1)

    @pytest.mark.slow
    def test_mass_vs_forward_distribution(self, desk):
        g, m = desk
        reports = backward_field_check(m, 0.1, 0.0, (0, 0, 0), [2.0],
                                       replicas=120, master_seed=5005)
        rep = reports[0]
        assert abs(rep.mass_mean - 1.0) < 4 * rep.mass_se
        assert abs(rep.forward_mean - 1.0) < 4 * rep.forward_se
        assert rep.ks_pvalue > 0.01

    def test_beta_zero_point_masses(self, desk):
        g, m = desk
        reports = backward_field_check(m, 0.0, 0.0, (0, 0, 0), [1.0],
                                       replicas=100, master_seed=6006)
        rep = reports[0]
        assert rep.mass_mean == pytest.approx(1.0, abs=1e-10)
        assert rep.forward_mean == pytest.approx(1.0, abs=1e-12)
