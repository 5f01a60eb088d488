import numpy as np
import pytest

from divdrop.errors import DegenerateSampler, RankDeficient, ShapeError
from divdrop.kernels import NeuronKernel
from divdrop.network import NetworkSpec
from divdrop.numerics import eigh, make_rng
from divdrop.samplers import (
    SamplerConfig,
    build_mask_bank,
    dpp_marginals,
    draw_dpp,
    draw_independent,
    draw_kdpp,
    draw_layer,
    kdpp_marginals,
    leverage_marginals,
    leverage_scores,
    sample_bernoulli,
    sample_dpp,
    sample_kdpp,
    sample_leverage,
)

from oracles import (
    dpp_probabilities,
    empirical,
    inclusion,
    kdpp_probabilities,
    random_psd,
    total_variation,
)


class TestConfig:
    def test_defaults(self):
        assert SamplerConfig("dpp").kernel_kind == "correlation"
        assert SamplerConfig("kdpp").kernel_kind == "covariance"
        assert SamplerConfig("bernoulli", kernel_kind="correlation").kernel_kind is None
        assert SamplerConfig("leverage").name == "leverage"

    @pytest.mark.parametrize("kw", [dict(kind="gibbs"), dict(kind="dpp", dropout_rate=0.0), dict(kind="dpp", ridge=-1),
                                    dict(kind="dpp", kernel_kind="rbf"), dict(kind="dpp", max_attempts=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)

    @pytest.mark.parametrize("p,n,k", [(0.5, 64, 32), (0.5, 5, 3), (0.2, 7, 6), (0.9, 3, 1), (0.99, 4, 1), (0.01, 4, 4)])
    def test_k_rounding(self, p, n, k):
        assert SamplerConfig("kdpp", dropout_rate=p).k_for(n) == k


class TestBernoulli:
    def test_near_zero_rate(self):
        m = sample_bernoulli(4, 1e-9, make_rng(0))
        assert m.kept.all()
        np.testing.assert_array_equal(m.marginals, np.full(4, 1 - 1e-9))

    def test_keep_frequency(self):
        kept = draw_independent(np.full(10, 0.5), make_rng(1), 100_000)
        np.testing.assert_allclose(kept.mean(axis=0), 0.5, atol=0.01)

    def test_marginals_constant(self):
        for s in range(5):
            m = sample_bernoulli(6, 0.3, make_rng(s))
            np.testing.assert_array_equal(m.marginals, np.full(6, 0.7))

    def test_never_empty(self):
        kept = draw_independent(np.full(2, 0.2), make_rng(2), 5000)
        assert kept.any(axis=1).all()

    def test_rejection_exhausted(self):
        with pytest.raises(DegenerateSampler):
            draw_independent(np.full(3, 1e-300), make_rng(3), 1, max_attempts=5)


class TestLeverage:
    def test_identity(self):
        np.testing.assert_allclose(leverage_scores(np.eye(5), 1.0), 0.5, atol=1e-15)

    def test_large_ridge(self):
        assert leverage_scores(np.eye(3), 1e12).max() < 1e-11

    def test_direct_inverse(self):
        C = random_psd(5, np.random.default_rng(4))
        for ridge in (0.1, 1.0, 7.0):
            direct = np.diag(C @ np.linalg.inv(C + ridge * np.eye(5)))
            np.testing.assert_allclose(leverage_scores(C, ridge), direct, atol=1e-10)

    def test_trace_identity(self):
        C = random_psd(8, np.random.default_rng(5))
        lam = np.linalg.eigvalsh(C)
        assert leverage_scores(C, 2.0).sum() == pytest.approx(np.sum(lam / (lam + 2.0)), abs=1e-10)

    def test_cluster_sampled_less(self):
        C = np.eye(6)
        C[:5, :5] = 1.0  # five duplicated neurons and one isolated
        s = leverage_scores(C, 1.0)
        assert np.all(s[:5] < s[5])
        np.testing.assert_allclose(s[:5], (5 / 6) / 5, atol=1e-12)

    def test_marginals_equal_clamped_scores(self):
        C = random_psd(6, np.random.default_rng(6), rank=2)
        m = sample_leverage(C, 1.0, make_rng(0))
        np.testing.assert_array_equal(m.marginals, np.clip(leverage_scores(C, 1.0), 1e-6, 1.0))

    def test_identity_is_uniform(self):
        kept = draw_layer(SamplerConfig("leverage"), 4, np.eye(4), make_rng(7), 40_000)[0]
        # conditioning on a non-empty mask lifts each marginal to 0.5 / (1 - 1/16)
        np.testing.assert_allclose(kept.mean(axis=0), 0.5 / (1 - 1 / 16), atol=0.01)

    def test_rescaled_mean(self):
        C = random_psd(10, np.random.default_rng(8), rank=3)
        m = leverage_marginals(C, 1.0, target_rate=0.5)
        assert m.mean() == pytest.approx(0.5, abs=0.02)

    def test_all_below_floor(self):
        with pytest.raises(DegenerateSampler):
            leverage_marginals(np.eye(3) * 1e-9, 1.0)

    def test_ridge_positive(self):
        with pytest.raises(ValueError):
            leverage_scores(np.eye(2), 0.0)


class TestDpp:
    def test_identity_two(self):
        probs = dpp_probabilities(np.eye(2), nonempty=False)
        assert all(p == pytest.approx(0.25) for p in probs.values())
        kept = draw_dpp(np.eye(2), make_rng(9), 60_000)
        emp = empirical(kept)
        for s in [(0,), (1,), (0, 1)]:
            assert emp[s] == pytest.approx(1 / 3, abs=0.01)

    def test_zero_eigenvalue(self):
        L = np.diag([0.0, 3.0])
        np.testing.assert_allclose(dpp_marginals(L), [0.0, 0.75])
        pre = draw_dpp(L, make_rng(10), 40_000, reject_empty=False)
        assert not pre[:, 0].any()
        assert pre[:, 1].mean() == pytest.approx(0.75, abs=0.01)

    def test_random_4x4_distribution(self):
        L = random_psd(4, np.random.default_rng(11))
        kept = draw_dpp(L, make_rng(12), 200_000)
        assert total_variation(empirical(kept), dpp_probabilities(L)) <= 0.01

    @pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
    def test_marginals_match_enumeration(self, n):
        L = random_psd(n, np.random.default_rng(100 + n), rank=max(1, n - 1))
        exact = inclusion(dpp_probabilities(L, nonempty=False), n)
        np.testing.assert_allclose(dpp_marginals(L), exact, atol=1e-10)

    def test_duplicated_pair_excluded(self):
        L = random_psd(5, np.random.default_rng(13))
        L[4, :] = L[3, :]
        L[:, 4] = L[:, 3]
        kept = draw_dpp(L, make_rng(14), 20_000)
        assert not np.any(kept[:, 3] & kept[:, 4])

    def test_accepts_spectrum_and_kernel(self):
        L = random_psd(4, np.random.default_rng(15))
        a = draw_dpp(L, make_rng(16), 50)
        b = draw_dpp(eigh(L), make_rng(16), 50)
        c = draw_dpp(NeuronKernel(1, "correlation", L), make_rng(16), 50)
        assert np.array_equal(a, b) and np.array_equal(a, c)

    def test_sample_dpp_mask(self):
        m = sample_dpp(np.eye(3), make_rng(0), layer=2)
        assert m.layer == 2 and m.kept.any()
        np.testing.assert_allclose(m.marginals, 0.5)

    def test_all_zero_kernel(self):
        with pytest.raises(DegenerateSampler):
            draw_dpp(np.zeros((3, 3)), make_rng(0), 2, max_attempts=3)

    def test_large_kernel_sizes(self):
        L = random_psd(64, np.random.default_rng(17), rank=20)
        kept = draw_dpp(L, make_rng(18), 2000)
        expected = dpp_marginals(L).sum()
        assert kept.sum(axis=1).mean() == pytest.approx(expected, rel=0.05)
        np.testing.assert_allclose(kept.mean(axis=0), dpp_marginals(L), atol=0.05)


class TestKdpp:
    def test_full_size(self):
        L = random_psd(4, np.random.default_rng(19))
        kept = draw_kdpp(L, 4, make_rng(20), 100)
        assert kept.all()
        np.testing.assert_allclose(kdpp_marginals(L, 4), 1.0, atol=1e-12)

    def test_diagonal_k1(self):
        L = np.diag([2.0, 3.0, 5.0])
        np.testing.assert_allclose(kdpp_marginals(L, 1), [0.2, 0.3, 0.5], atol=1e-14)
        kept = draw_kdpp(L, 1, make_rng(21), 100_000)
        np.testing.assert_allclose(kept.mean(axis=0), [0.2, 0.3, 0.5], atol=0.005)

    def test_random_5x5_k2(self):
        L = random_psd(5, np.random.default_rng(22))
        kept = draw_kdpp(L, 2, make_rng(23), 200_000)
        exact = kdpp_probabilities(L, 2)
        assert total_variation(empirical(kept), exact) <= 0.01
        np.testing.assert_allclose(kdpp_marginals(L, 2), inclusion(exact, 5), atol=1e-10)

    def test_cardinality_exhaustive(self):
        L = random_psd(12, np.random.default_rng(24), rank=8)
        for k in (1, 5, 8):
            kept = draw_kdpp(L, k, make_rng(k), 10_000)
            assert np.all(kept.sum(axis=1) == k)

    def test_rank_deficient(self):
        L = random_psd(6, np.random.default_rng(25), rank=2)
        with pytest.raises(RankDeficient):
            draw_kdpp(L, 3, make_rng(0), 1)
        with pytest.raises(RankDeficient):
            kdpp_marginals(L, 3)

    def test_marginals_sum_to_k(self):
        L = random_psd(30, np.random.default_rng(26), rank=25) * 1e4
        assert kdpp_marginals(L, 12).sum() == pytest.approx(12, abs=1e-9)

    def test_scale_invariance(self):
        L = random_psd(6, np.random.default_rng(27))
        np.testing.assert_allclose(kdpp_marginals(L, 3), kdpp_marginals(1e-6 * L, 3), atol=1e-12)

    def test_sample_kdpp_mask(self):
        m = sample_kdpp(np.eye(5), 2, make_rng(0))
        assert m.kept.sum() == 2
        np.testing.assert_allclose(m.marginals, 0.4, atol=1e-14)

    def test_layer_clamps_k_to_rank(self):
        L = random_psd(8, np.random.default_rng(28), rank=3)
        kept, marg = draw_layer(SamplerConfig("kdpp", dropout_rate=0.5), 8, L, make_rng(0), 20)
        assert np.all(kept.sum(axis=1) == 3)
        assert marg.sum() == pytest.approx(3)


class TestBank:
    spec = NetworkSpec((3, 6, 5, 1))

    def kernels(self, kind="correlation"):
        rng = np.random.default_rng(29)
        return {h: NeuronKernel(h, kind, random_psd(n, rng)) for h, n in self.spec.dropout_sizes().items()}

    def test_bernoulli_single(self):
        a = build_mask_bank(self.spec, None, SamplerConfig("bernoulli"), 1, seed=3)
        b = build_mask_bank(self.spec, None, SamplerConfig("bernoulli"), 1, seed=3)
        assert len(a) == 1 and a.to_dict() == b.to_dict()

    def test_dpp_shape(self):
        bank = build_mask_bank(self.spec, self.kernels(), SamplerConfig("dpp"), 100, seed=0)
        assert len(bank) == 100 and all(len(s.layers) == 2 for s in bank)
        assert bank.kind == "dpp"

    def test_bit_identical(self, tmp_path):
        cfg = SamplerConfig("kdpp")
        for i in range(2):
            build_mask_bank(self.spec, self.kernels("covariance"), cfg, 20, seed=5).save(tmp_path / f"{i}.json")
        assert (tmp_path / "0.json").read_bytes() == (tmp_path / "1.json").read_bytes()

    def test_seed_changes_bank(self):
        a = build_mask_bank(self.spec, self.kernels(), SamplerConfig("dpp"), 20, seed=1)
        b = build_mask_bank(self.spec, self.kernels(), SamplerConfig("dpp"), 20, seed=2)
        assert not np.array_equal(a.kept_matrix(1), b.kept_matrix(1))

    def test_missing_kernel(self):
        with pytest.raises(ValueError):
            build_mask_bank(self.spec, {1: self.kernels()[1]}, SamplerConfig("dpp"), 2, seed=0)

    def test_kernel_kind_mismatch(self):
        with pytest.raises(ValueError):
            build_mask_bank(self.spec, self.kernels("covariance"), SamplerConfig("dpp"), 2, seed=0)

    def test_kernel_size_mismatch(self):
        ks = self.kernels()
        ks[2] = NeuronKernel(2, "correlation", np.eye(3))
        with pytest.raises(ShapeError):
            build_mask_bank(self.spec, ks, SamplerConfig("dpp"), 2, seed=0)

    def test_provenance(self):
        bank = build_mask_bank(self.spec, None, SamplerConfig("bernoulli", dropout_rate=0.3), 4, seed=8)
        assert bank.provenance["seed"] == 8 and bank.provenance["T"] == 4
        assert bank.provenance["sampler"]["dropout_rate"] == 0.3

    def test_zero_T(self):
        with pytest.raises(ValueError):
            build_mask_bank(self.spec, None, SamplerConfig("bernoulli"), 0, seed=0)
