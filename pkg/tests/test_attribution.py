import numpy as np
import pytest

from waveletmixer.attribution import (
    shapley_exact,
    shapley_sampled,
    zoned_aggregate,
)


def linear_fn(coeffs):
    c = np.asarray(coeffs, dtype=np.float64)
    return lambda x: np.asarray(x, dtype=np.float64) @ c


SCALAR_GROUPS_2 = [(0,), (1,)]


class TestExact:
    def test_linear_model_recovers_coefficients(self):
        # f = 2 x1 + 3 x2, zero background, x = (1, 1)
        phi = shapley_exact(linear_fn([2.0, 3.0]), np.array([1.0, 1.0]),
                            np.zeros((1, 2)), SCALAR_GROUPS_2)
        np.testing.assert_allclose(phi, [2.0, 3.0], atol=1e-12)

    def test_symmetry_axiom(self):
        fn = lambda x: x[:, 0] * x[:, 1]  # symmetric in both features
        phi = shapley_exact(fn, np.array([1.0, 1.0]), np.zeros((1, 2)), SCALAR_GROUPS_2)
        assert phi[0] == pytest.approx(phi[1], abs=1e-12)

    def test_dummy_axiom(self):
        fn = lambda x: 5.0 * x[:, 0]  # independent of x2
        phi = shapley_exact(fn, np.array([2.0, 9.0]), np.zeros((1, 2)), SCALAR_GROUPS_2)
        assert phi[1] == pytest.approx(0.0, abs=1e-12)

    def test_efficiency_on_random_models(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            d = int(rng.integers(1, 9))
            coeffs = rng.standard_normal(d)
            quad = rng.standard_normal(d) * 0.5

            def fn(x, c=coeffs, q=quad):
                return x @ c + (x ** 2) @ q

            x = rng.standard_normal(d)
            bg = rng.standard_normal((6, d))
            groups = [(i,) for i in range(d)]
            phi = shapley_exact(fn, x, bg, groups)
            expect = fn(x[None, :])[0] - fn(bg).mean()
            assert phi.sum() == pytest.approx(expect, abs=1e-9)

    def test_group_of_multiple_entries(self):
        # two features toggled together form one group
        fn = lambda x: x[:, 0] + 10.0 * x[:, 1] + 100.0 * x[:, 2]
        phi = shapley_exact(fn, np.array([1.0, 1.0, 1.0]), np.zeros((1, 3)),
                            [([0, 1],), ([2],)])
        assert phi[0] == pytest.approx(11.0, abs=1e-12)
        assert phi[1] == pytest.approx(100.0, abs=1e-12)

    def test_refuses_beyond_group_limit(self):
        groups = [(i,) for i in range(13)]
        with pytest.raises(ValueError, match="shapley_sampled"):
            shapley_exact(lambda x: x.sum(axis=1), np.zeros(13), np.zeros((1, 13)), groups)

    def test_background_averaging(self):
        # with a non-degenerate background the baseline is its mean output
        fn = linear_fn([1.0])
        phi = shapley_exact(fn, np.array([5.0]), np.array([[1.0], [3.0]]), [(0,)])
        assert phi[0] == pytest.approx(5.0 - 2.0, abs=1e-12)


class TestSampled:
    def test_close_to_exact_on_linear_fixture(self):
        fn = linear_fn([2.0, 3.0])
        x = np.array([1.0, 1.0])
        bg = np.zeros((1, 2))
        phi, se = shapley_sampled(fn, x, bg, SCALAR_GROUPS_2, n_permutations=1000, seed=3)
        for got, expect, err in zip(phi, [2.0, 3.0], se):
            # linear models have zero permutation variance: estimates are exact
            assert got == pytest.approx(expect, abs=max(3 * err, 1e-9))

    def test_single_permutation_deterministic(self):
        fn = lambda x: (x ** 2).sum(axis=1)
        x = np.array([1.0, 2.0, 3.0])
        bg = np.random.default_rng(5).standard_normal((4, 3))
        groups = [(i,) for i in range(3)]
        a, _ = shapley_sampled(fn, x, bg, groups, n_permutations=1, seed=11)
        b, _ = shapley_sampled(fn, x, bg, groups, n_permutations=1, seed=11)
        np.testing.assert_array_equal(a, b)

    def test_d8_agreement_with_exact(self):
        rng = np.random.default_rng(23)
        d = 8
        coeffs = rng.uniform(0.5, 2.0, size=d)
        fn = linear_fn(coeffs)
        x = rng.uniform(1.0, 2.0, size=d)
        bg = rng.standard_normal((8, d))
        groups = [(i,) for i in range(d)]
        exact = shapley_exact(fn, x, bg, groups)
        sampled, _ = shapley_sampled(fn, x, bg, groups, n_permutations=10000, seed=7)
        rel = np.abs(sampled - exact) / np.abs(exact)
        assert np.all(rel < 0.05)

    def test_standard_error_shrinks_with_permutations(self):
        rng = np.random.default_rng(29)
        d = 5
        fn = lambda x: np.prod(np.abs(x) + 0.5, axis=1)
        x = rng.standard_normal(d)
        bg = rng.standard_normal((6, d))
        groups = [(i,) for i in range(d)]
        _, se_small = shapley_sampled(fn, x, bg, groups, n_permutations=64, seed=1)
        _, se_big = shapley_sampled(fn, x, bg, groups, n_permutations=256, seed=1)
        # 4x permutations should roughly halve the standard error
        ratio = se_big.mean() / se_small.mean()
        assert ratio < 0.75


class TestZonedAggregate:
    def test_single_sample_cell_equals_its_phi(self):
        phis = np.array([[0.2, -0.1]])
        cells = zoned_aggregate(phis, zones=[8], years=[2023], channel_names=["a", "b"])
        cell = cells[(8, 2023)]
        assert cell["n_samples"] == 1
        assert cell["channels"][0]["signed_mean_shap"] == pytest.approx(0.2)
        assert cell["channels"][1]["signed_mean_shap"] == pytest.approx(-0.1)

    def test_cancellation_vs_magnitude(self):
        phis = np.array([[0.5], [-0.5]])
        cells = zoned_aggregate(phis, zones=[1, 1], years=[2024, 2024], channel_names=["a"])
        ch = cells[(1, 2024)]["channels"][0]
        assert ch["signed_mean_shap"] == pytest.approx(0.0)
        assert ch["mean_abs_shap"] == pytest.approx(0.5)

    def test_known_per_zone_values(self):
        phis = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 2.0]])
        zones = [8, 8, 9]
        years = [2023, 2023, 2023]
        cells = zoned_aggregate(phis, zones, years, ["a", "b"])
        assert cells[(8, 2023)]["channels"][0]["signed_mean_shap"] == pytest.approx(2.0)
        assert cells[(9, 2023)]["channels"][1]["signed_mean_shap"] == pytest.approx(2.0)
        assert cells[(8, 2023)]["n_samples"] == 2

    def test_rank_by_mean_abs(self):
        phis = np.array([[0.1, -0.9, 0.5]])
        cells = zoned_aggregate(phis, [1], [2023], ["a", "b", "c"])
        by_name = {c["channel"]: c["rank"] for c in cells[(1, 2023)]["channels"]}
        assert by_name == {"b": 1, "c": 2, "a": 3}

    def test_sample_order_invariance(self):
        rng = np.random.default_rng(31)
        phis = rng.standard_normal((10, 3))
        zones = rng.choice([1, 5], size=10)
        years = rng.choice([2023, 2024], size=10)
        a = zoned_aggregate(phis, zones, years, ["x", "y", "z"])
        perm = rng.permutation(10)
        b = zoned_aggregate(phis[perm], zones[perm], years[perm], ["x", "y", "z"])
        for key in a:
            for ca, cb in zip(a[key]["channels"], b[key]["channels"]):
                assert ca["signed_mean_shap"] == pytest.approx(cb["signed_mean_shap"], abs=1e-12)
