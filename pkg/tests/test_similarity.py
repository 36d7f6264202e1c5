import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.datagen import Dataset
from fedsim.errors import ConfigError, InputError, StatisticsError
from fedsim.nn import ModelSpec, forward, init_params
from fedsim.similarity import (BnStatsProfile, GaussianStats, SimilarityMatrix, build_weight_matrix,
                               collect_bn_stats, distance_matrix, pairwise_distance, stats_from_bn_params,
                               wasserstein_diag)

SPEC = ModelSpec(5, ((6, True), (4, True)), 3)


def trained_reference(seed=0):
    p = init_params(SPEC, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for _ in range(5):
        forward(p, rng.normal(size=(16, 5)), "train")
    return p


def random_profile(rng, widths=(3, 2)):
    return BnStatsProfile([GaussianStats(rng.normal(size=w), rng.uniform(0, 3, size=w)) for w in widths],
                          GaussianStats(rng.normal(size=2), rng.uniform(0, 3, size=2)))


class TestCollectStats:
    def test_constant_dataset(self, backend):
        ref = trained_reference()
        row = np.random.default_rng(3).normal(size=5)
        ds = Dataset(np.tile(row, (40, 1)), np.zeros(40, dtype=int), 3)
        prof = collect_bn_stats(ref, ds, batch_size=16)
        _, cache = forward(ref, row[None, :], "eval")
        for name, stats in zip(prof.layer_names, prof.layers):
            np.testing.assert_array_equal(stats.var, 0.0)
            np.testing.assert_allclose(stats.mu, cache.bn_inputs[name][0], rtol=1e-14, atol=1e-15)

    def test_duplicated_dataset(self, backend, rng):
        ref = trained_reference()
        x = rng.normal(size=(30, 5))
        a = collect_bn_stats(ref, Dataset(x, np.zeros(30, dtype=int), 3))
        b = collect_bn_stats(ref, Dataset(np.repeat(x, 2, axis=0), np.zeros(60, dtype=int), 3))
        for sa, sb in zip(a.layers + [a.last_feature], b.layers + [b.last_feature]):
            np.testing.assert_allclose(sa.mu, sb.mu, atol=1e-12)
            np.testing.assert_allclose(sa.var, sb.var, atol=1e-12)

    def test_matches_two_pass_oracle(self, backend, rng):
        spec = ModelSpec(4, ((4, True),), 2)
        ref = init_params(spec, rng)
        ref.arrays["fc0.weight"] = np.eye(4)
        x = rng.normal(2.0, 3.0, size=(100, 4))
        prof = collect_bn_stats(ref, Dataset(x, np.zeros(100, dtype=int), 2), batch_size=32)
        mean = x.sum(0) / 100
        var = ((x - mean) ** 2).sum(0) / 100
        np.testing.assert_allclose(prof.layers[0].mu, mean, rtol=0, atol=1e-10)
        np.testing.assert_allclose(prof.layers[0].var, var, rtol=0, atol=1e-10)

    def test_permutation_invariant(self, backend, rng):
        ref = trained_reference()
        x = rng.normal(size=(77, 5))
        a = collect_bn_stats(ref, Dataset(x, np.zeros(77, dtype=int), 3))
        b = collect_bn_stats(ref, Dataset(x[rng.permutation(77)], np.zeros(77, dtype=int), 3))
        for sa, sb in zip(a.layers, b.layers):
            np.testing.assert_allclose(sa.mu, sb.mu, atol=1e-9)
            np.testing.assert_allclose(sa.var, sb.var, atol=1e-9)

    def test_last_feature_is_classifier_input(self, rng):
        ref = trained_reference()
        x = rng.normal(size=(20, 5))
        prof = collect_bn_stats(ref, Dataset(x, np.zeros(20, dtype=int), 3))
        _, cache = forward(ref, x, "eval")
        np.testing.assert_allclose(prof.last_feature.mu, cache.classifier_input.mean(0), atol=1e-12)

    def test_too_few_samples(self):
        with pytest.raises(StatisticsError):
            collect_bn_stats(trained_reference(), Dataset(np.zeros((1, 5)), [0], 3))

    def test_requires_bn(self, rng):
        ref = init_params(ModelSpec(5, ((4, False),), 3), rng)
        with pytest.raises(ConfigError):
            collect_bn_stats(ref, Dataset(np.zeros((4, 5)), [0] * 4, 3))

    def test_does_not_touch_reference(self, rng):
        ref = trained_reference()
        before = {k: v.copy() for k, v in ref.items()}
        collect_bn_stats(ref, Dataset(rng.normal(size=(10, 5)), [0] * 10, 3))
        for k in before:
            np.testing.assert_array_equal(before[k], ref[k])


# (mu_a, var_a, mu_b, var_b) with hand-evaluated sqrt(||dmu||^2 + ||dsd||^2)
FIXTURES = [
    ([0.0], [1.0], [3.0], [4.0], math.sqrt(10)),
    ([0.0], [1.0], [0.0], [1.0], 0.0),
    ([1.0], [0.0], [1.0], [0.0], 0.0),
    ([0.0], [0.0], [0.0], [9.0], 3.0),
    ([0.0], [0.0], [4.0], [0.0], 4.0),
    ([0.0, 0.0], [1.0, 1.0], [3.0, 4.0], [1.0, 1.0], 5.0),
    ([0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [9.0, 16.0], 5.0),
    ([1.0, 2.0], [1.0, 4.0], [1.0, 2.0], [4.0, 9.0], math.sqrt(2)),
    ([-1.0], [4.0], [1.0], [1.0], math.sqrt(5)),
    ([0.5], [0.25], [-0.5], [2.25], math.sqrt(2)),
    ([2.0, -2.0, 0.0], [1.0, 1.0, 1.0], [2.0, -2.0, 0.0], [1.0, 1.0, 1.0], 0.0),
    ([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], math.sqrt(6)),
    ([10.0], [100.0], [0.0], [0.0], math.sqrt(200)),
    ([0.0], [1e-8], [0.0], [4e-8], 1e-4),
    ([1e6], [1.0], [1e6 + 3.0], [16.0], math.sqrt(18)),
    ([0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0], [4.0, 4.0, 4.0, 4.0], math.sqrt(8)),
    ([3.0], [0.0], [0.0], [16.0], 5.0),
    ([0.0, 1.0], [2.25, 6.25], [0.0, 1.0], [0.25, 0.25], math.sqrt(5)),
    ([-2.0, 2.0], [1.0, 1.0], [2.0, -2.0], [1.0, 1.0], math.sqrt(32)),
    ([7.0], [49.0], [7.0], [0.0], 7.0),
]


class TestWasserstein:
    @pytest.mark.parametrize("mu_a,var_a,mu_b,var_b,expected", FIXTURES)
    def test_hand_values(self, mu_a, var_a, mu_b, var_b, expected):
        assert abs(wasserstein_diag(mu_a, var_a, mu_b, var_b) - expected) <= 1e-12

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            wasserstein_diag([0, 1], [1, 1], [0], [1])

    def test_negative_variance(self):
        with pytest.raises(InputError):
            wasserstein_diag([0], [-1], [0], [1])

    @given(st.integers(0, 2**31), st.integers(1, 8))
    @settings(max_examples=200, deadline=None)
    def test_metric_axioms(self, seed, c):
        rng = np.random.default_rng(seed)
        a, b, z = ((rng.normal(size=c), rng.uniform(0, 4, size=c)) for _ in range(3))
        dab = wasserstein_diag(*a, *b)
        assert dab >= 0
        assert dab == wasserstein_diag(*b, *a)
        assert wasserstein_diag(*a, *a) == 0
        assert dab <= wasserstein_diag(*a, *z) + wasserstein_diag(*z, *b) + 1e-12


class TestPairwiseDistance:
    def test_self_is_zero(self, rng):
        p = random_profile(rng)
        assert pairwise_distance(p, p) == 0
        assert pairwise_distance(p, p, "last_layer") == 0

    def test_sum_not_root_sum_square(self):
        p = BnStatsProfile([GaussianStats(np.zeros(1), np.ones(1)), GaussianStats(np.zeros(1), np.ones(1))])
        q = BnStatsProfile([GaussianStats(np.array([3.0]), np.ones(1)), GaussianStats(np.array([4.0]), np.ones(1))])
        assert pairwise_distance(p, q) == pytest.approx(7.0, abs=1e-12)

    def test_last_layer_variant(self, rng):
        p, q = random_profile(rng), random_profile(rng)
        lf = wasserstein_diag(p.last_feature.mu, p.last_feature.var, q.last_feature.mu, q.last_feature.var)
        assert pairwise_distance(p, q, "last_layer") == lf

    def test_architecture_mismatch(self, rng):
        with pytest.raises(InputError):
            pairwise_distance(random_profile(rng, (3, 2)), random_profile(rng, (3,)))
        with pytest.raises(InputError):
            pairwise_distance(random_profile(rng, (3, 2)), random_profile(rng, (3, 4)))

    @given(st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_triangle(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (random_profile(rng) for _ in range(3))
        for x, y, z in ((a, b, c), (b, c, a), (a, c, b)):
            assert pairwise_distance(x, y) >= 0
            assert pairwise_distance(x, y) <= pairwise_distance(x, z) + pairwise_distance(z, y) + 1e-12

    def test_matrix_matches_pairwise(self, backend, rng):
        profs = [random_profile(rng) for _ in range(6)]
        d = distance_matrix(profs)
        for i in range(6):
            for j in range(6):
                assert d[i, j] == pytest.approx(pairwise_distance(profs[i], profs[j]), rel=1e-13, abs=1e-15)
        dl = distance_matrix(profs, "last_layer")
        assert dl[1, 4] == pytest.approx(pairwise_distance(profs[1], profs[4], "last_layer"), rel=1e-13)


class TestWeightMatrix:
    def test_two_clients(self):
        for lam in (0.0, 0.3, 0.5, 1.0):
            w = build_weight_matrix([[0, 2.5], [2.5, 0]], lam).w
            np.testing.assert_allclose(w, [[lam, 1 - lam], [1 - lam, lam]], atol=1e-15)

    def test_hand_row(self):
        d = np.array([[0, 1, 3], [1, 0, 2], [3, 2, 0]], dtype=float)
        w = build_weight_matrix(d, 0.5).w
        np.testing.assert_allclose(w[0], [0.5, 0.375, 0.125], atol=1e-15)

    def test_default_lambda(self):
        assert build_weight_matrix([[0, 1], [1, 0]]).lam == 0.5

    def test_scale_invariant(self, rng):
        a = rng.uniform(0.1, 5, size=(5, 5))
        d = a + a.T
        np.fill_diagonal(d, 0)
        np.testing.assert_allclose(build_weight_matrix(d).w, build_weight_matrix(7.3 * d).w, atol=1e-15)

    def test_single_client(self):
        assert build_weight_matrix([[0.0]], 0.3).w.tolist() == [[1.0]]

    def test_identical_profiles_uniform_fallback(self):
        w = build_weight_matrix(np.zeros((4, 4)), 0.5).w
        np.testing.assert_allclose(w, np.where(np.eye(4, dtype=bool), 0.5, 0.5 / 3), atol=1e-15)

    @pytest.mark.parametrize("bad", [
        [[0, -1], [-1, 0]],
        [[0, 1], [2, 0]],
        [[1, 1], [1, 1]],
        [[0, 1, 2], [1, 0, 3]],
    ])
    def test_invalid(self, bad):
        with pytest.raises(InputError):
            build_weight_matrix(bad)

    @given(seed=st.integers(0, 2**31), n=st.integers(2, 16), lam=st.sampled_from([0.0, 0.25, 0.5, 1.0]))
    @settings(max_examples=200, deadline=None)
    def test_invariants(self, seed, n, lam):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.01, 10, size=(n, n))
        d = a + a.T
        np.fill_diagonal(d, 0)
        w = build_weight_matrix(d, lam).w
        assert np.all(np.diag(w) == lam)
        np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-9)
        assert np.all((w >= 0) & (w <= 1))
        off = ~np.eye(n, dtype=bool)
        assert np.all(w[off] <= 1 - lam + 1e-15)
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    if i not in (j, k) and d[i, j] < d[i, k]:
                        assert w[i, j] >= w[i, k]
                        if lam < 1:
                            assert w[i, j] > w[i, k]

    def test_json_round_trip(self):
        sim = build_weight_matrix([[0, 1, 3], [1, 0, 2], [3, 2, 0]], 0.25)
        payload = json.loads(json.dumps(sim.to_dict()))
        assert set(payload) == {"clients", "lambda", "rows"}
        back = SimilarityMatrix.from_dict(payload)
        assert back.w.tobytes() == sim.w.tobytes() and back.lam == 0.25

    def test_profile_json_round_trip(self, rng):
        p = random_profile(rng)
        q = BnStatsProfile.from_dict(json.loads(json.dumps(p.to_dict())))
        assert pairwise_distance(p, q) == 0 and pairwise_distance(p, q, "last_layer") == 0


class TestStatsFromBnParams:
    def test_fresh_bn_gives_uniform_weights(self):
        profs = [stats_from_bn_params(init_params(SPEC, np.random.default_rng(s))) for s in range(4)]
        d = distance_matrix(profs)
        assert np.all(d == 0)
        w = build_weight_matrix(d, 0.5).w
        np.testing.assert_allclose(w[0], [0.5, 1 / 6, 1 / 6, 1 / 6])

    def test_shapes_match_collected(self, rng):
        ref = trained_reference()
        a = stats_from_bn_params(ref)
        b = collect_bn_stats(ref, Dataset(rng.normal(size=(10, 5)), [0] * 10, 3))
        assert [s.mu.shape for s in a.layers] == [s.mu.shape for s in b.layers]
        assert a.layer_names == b.layer_names

    def test_uses_running_stats(self):
        ref = trained_reference()
        prof = stats_from_bn_params(ref)
        np.testing.assert_array_equal(prof.layers[1].mu, ref["bn1.running_mean"])
        np.testing.assert_array_equal(prof.layers[1].var, ref["bn1.running_var"])

    def test_requires_bn(self, rng):
        with pytest.raises(ConfigError):
            stats_from_bn_params(init_params(ModelSpec(3, ((2, False),), 2), rng))
