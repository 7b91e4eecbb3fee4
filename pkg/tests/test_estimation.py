import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_psd
from nskb.adaopkb import AlgoParams, StaticMaps, run_blocks
from nskb.design import DesignMatrix, Strategy, info_gain, optimal_design
from nskb.envs import make_env
from nskb.errors import InputError
from nskb.estimation import (
    DesignCache,
    RewardEstimates,
    RoundRecord,
    argmax_lowest,
    clamp_reward,
    gap_estimates,
    interval_estimates,
    ips_estimate_round,
)
from nskb.kernels import RBF, ActionSet, FeatureMap, cholesky_feature_map, kernel_feature_map


def rbf_map(rng, n, d=3, ls=0.5):
    return kernel_feature_map(RBF(ls), ActionSet.unit_sphere(n, d, rng))


def random_records(rng, phi, n_rounds, strategies):
    out = []
    for t in range(n_rounds):
        m = int(rng.integers(len(strategies)))
        x = int(strategies[m].sample(rng))
        out.append(RoundRecord(t, x, float(rng.uniform(-1, 1)), m, strategies[m]))
    return out


class TestIPSRound:
    def test_scalar_formula(self):
        phi = FeatureMap(np.ones((1, 1)), "scalar", 0.0)
        est = ips_estimate_round(phi, Strategy.point_mass(1, 0), 0, 0.5, sigma=1.0, T=10)
        np.testing.assert_allclose(est, [0.5 / 1.1], rtol=1e-14)

    def test_zero_reward_gives_zero_vector(self, rng):
        phi = rbf_map(rng, 6)
        est = ips_estimate_round(phi, Strategy.uniform(6), 2, 0.0, sigma=1.0, T=100)
        np.testing.assert_array_equal(est, np.zeros(6))

    def test_matches_explicit_inverse(self, rng):
        phi = rbf_map(rng, 7)
        P = Strategy(rng.dirichlet(np.ones(7)))
        F = phi.features
        S = (F.T * P.weights) @ F + 0.01 * np.eye(F.shape[1])
        want = F @ np.linalg.inv(S) @ F[3] * -0.4
        got = ips_estimate_round(phi, P, 3, -0.4, sigma=1.0, T=100)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)

    def test_rejects_reward_outside_unit_interval(self, rng):
        phi = rbf_map(rng, 3)
        with pytest.raises(InputError):
            ips_estimate_round(phi, Strategy.uniform(3), 0, 1.5, sigma=1.0, T=10)

    def test_cache_reuses_factorization(self, rng):
        phi = rbf_map(rng, 5)
        P = Strategy.uniform(5)
        cache = DesignCache(phi, 1.0, 100)
        assert cache.get(P) is cache.get(P)
        cache.clear()
        assert cache._store == {}


class TestIPSMoments:
    """Monte-Carlo moments of the per-round estimate under a fixed strategy."""

    @pytest.mark.parametrize("seed", range(3))
    def test_bias_and_variance_bounds(self, seed):
        rng = np.random.default_rng(seed)
        n, sigma, T, draws = 8, 1.0, 50, 100_000
        phi = rbf_map(rng, n, ls=0.6)
        P = Strategy(rng.dirichlet(np.ones(n)) * 0.8 + 0.2 / n)
        theta = rng.standard_normal(phi.dim)
        r = phi.features @ (theta / np.linalg.norm(theta))  # unit RKHS norm
        r *= min(1.0, 0.6 / np.abs(r).max())
        dm = DesignMatrix(phi.features, P.weights, sigma / T)
        cols = np.stack([dm.ips_column(a) for a in range(n)], axis=1)  # cols[x, a]
        xs = P.sample(rng, draws)
        ys = r[xs] + rng.uniform(-0.2, 0.2, draws)  # bounded noise, no clipping
        est = cols[:, xs] * ys
        mean, sd = est.mean(axis=1), est.std(axis=1, ddof=1)
        se = sd / math.sqrt(draws)
        norms = np.sqrt(dm.variances())
        assert np.all(np.abs(mean - r) <= math.sqrt(sigma / T) * norms + 3 * se)
        # stderr of the sample variance from the fourth central moment
        dev = est - mean[:, None]
        var_se = np.sqrt(np.maximum((dev**4).mean(axis=1) - sd**4, 0) / draws)
        assert np.all(sd**2 <= dm.variances() + 3 * var_se)

    def test_exact_expectation_oracle(self, rng):
        """The mean estimate equals phi(x)^T S^-1 (sum_a P_a phi(a) r_a) exactly."""
        n = 6
        phi = rbf_map(rng, n)
        P = Strategy(rng.dirichlet(np.ones(n)))
        r = rng.uniform(-1, 1, n)
        dm = DesignMatrix(phi.features, P.weights, 0.02)
        want = sum(P.weights[a] * dm.ips_column(a) * r[a] for a in range(n))
        F = phi.features
        S = (F.T * P.weights) @ F + 0.02 * np.eye(F.shape[1])
        np.testing.assert_allclose(want, F @ np.linalg.solve(S, F.T @ (P.weights * r)), atol=1e-10)


class TestIntervalEstimates:
    def test_single_round(self, rng):
        phi = rbf_map(rng, 5)
        P = Strategy.uniform(5)
        rec = RoundRecord(0, 2, 0.3, 0, P)
        got = interval_estimates([rec], phi, 1.0, 100)
        np.testing.assert_array_equal(got.values, ips_estimate_round(phi, P, 2, 0.3, 1.0, 100))
        assert got.interval == (0, 0)

    def test_identical_rounds(self, rng):
        phi = rbf_map(rng, 5)
        P = Strategy.uniform(5)
        recs = [RoundRecord(0, 1, -0.2, 0, P), RoundRecord(1, 1, -0.2, 0, P)]
        got = interval_estimates(recs, phi, 1.0, 100)
        np.testing.assert_allclose(got.values, ips_estimate_round(phi, P, 1, -0.2, 1.0, 100), rtol=1e-15)

    def test_matches_naive_resummation(self, rng):
        phi = rbf_map(rng, 6)
        strategies = [Strategy.uniform(6), Strategy(rng.dirichlet(np.ones(6)))]
        recs = random_records(rng, phi, 10, strategies)
        F = phi.features
        total = np.zeros(6)
        for r in recs:
            S = (F.T * r.strategy.weights) @ F + 0.01 * np.eye(F.shape[1])
            total += F @ np.linalg.solve(S, F[r.action_index]) * r.reward
        got = interval_estimates(recs, phi, 1.0, 100)
        np.testing.assert_allclose(got.values, total / 10, atol=1e-12)

    def test_empty_interval_rejected(self, rng):
        with pytest.raises(InputError):
            interval_estimates([], rbf_map(rng, 3), 1.0, 10)

    def test_record_rejects_large_reward(self):
        with pytest.raises(InputError):
            RoundRecord(0, 0, -1.01, 0, Strategy.uniform(2))


class TestGapEstimates:
    def test_two_actions(self):
        g = gap_estimates(RewardEstimates((0, 0), np.array([0.3, 0.1])))
        np.testing.assert_allclose(g.gaps, [0.0, 0.2])

    def test_constant_estimates(self):
        g = gap_estimates(RewardEstimates((0, 3), np.full(4, 0.7)))
        np.testing.assert_array_equal(g.gaps, np.zeros(4))

    def test_ties_at_max(self):
        g = gap_estimates(RewardEstimates((0, 0), np.array([0.5, -0.1, 0.5])))
        np.testing.assert_array_equal(g.gaps == 0, [True, False, True])

    def test_non_finite_rejected(self):
        with pytest.raises(InputError):
            gap_estimates(RewardEstimates((0, 0), np.array([0.1, np.nan])))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
    def test_nonnegative_with_exact_zero(self, vals):
        g = gap_estimates(RewardEstimates((0, 0), np.array(vals))).gaps
        assert np.all(g >= 0)
        assert g.min() == 0.0


class TestHelpers:
    @pytest.mark.parametrize("y, want, moved", [(0.5, 0.5, False), (1.2, 1.0, True), (-3.0, -1.0, True),
                                                (1.0, 1.0, False)])
    def test_clamp(self, y, want, moved):
        assert clamp_reward(y) == (want, moved)

    def test_argmax_lowest(self):
        assert argmax_lowest([0.1, 0.5, 0.5]) == 1
        assert argmax_lowest([0.1, 0.5 - 1e-13, 0.5], atol=1e-12) == 1
        assert argmax_lowest([0.1, 0.5 - 1e-13, 0.5]) == 2


class TestMagnitudeBound:
    @given(st.integers(0, 10_000), st.floats(0.05, 0.5), st.sampled_from([1.0, 10.0]))
    def test_per_round_estimate_bounded_by_gain_over_mu(self, seed, mu, sigma):
        rng = np.random.default_rng(seed)
        n, T = 6, 200
        phi = cholesky_feature_map(random_psd(rng, n) / n + 0.05 * np.eye(n))
        gain = info_gain(phi, T, sigma)
        Q = Strategy(rng.dirichlet(np.ones(n) * 0.3))
        P = Q.mix(gain.strategy, mu)
        dm = DesignMatrix(phi.features, P.weights, sigma / T)
        bound = gain.gamma / mu
        for x in range(n):
            assert np.max(np.abs(dm.ips_column(x))) <= bound * (1 + 1e-9)


class TestConcentration:
    def test_cumulative_block_estimates_concentrate(self):
        """Stationary OPKB with theory constants: per-block cumulative estimates
        stay within half the true gap plus the c0 mu_j / 4 allowance."""
        T, N, d, sigma, delta = 1700, 5, 5, 100.0, 0.05
        runs, ok = 200, 0
        for seed in range(runs):
            rng = np.random.default_rng(seed)
            env = make_env("gp-stationary", T, N, d, rng)
            phi = kernel_feature_map(RBF(0.2), env.actions)
            gain = info_gain(phi, T, sigma, tol=1e-4)
            p = AlgoParams.theory(T, N, gain.gamma, sigma=sigma, delta=delta)
            res = run_blocks(env, StaticMaps(phi, T, sigma, gain=gain), p, rng, adaptive=False)
            good = True
            for j, (_, start, end) in enumerate(res.epochs[0].blocks):
                if end - start + 1 < (2**j) * p.E:
                    break
                R_hat = res.estimates[: end + 1].mean(axis=0)
                R = env.rewards[: end + 1].mean(axis=0)
                gaps = R.max() - R
                if np.any(np.abs(R_hat - R) > 0.5 * gaps + p.c0 * p.mu(j) / 4):
                    good = False
            ok += good
        slack = 3 * math.sqrt(delta * (1 - delta) / runs)
        assert ok / runs >= 1 - delta - slack
