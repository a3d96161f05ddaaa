"""Global mixture conditioning, relaxed categorical sampling, densities.

Densities are checked against the closed-form Gaussian formula and a
quadrature integral; selection statistics against exact categorical
frequencies; the soft path against finite differences.
"""

import numpy as np
import pytest

from agma import autodiff as ad
from agma.autodiff import Tensor
from agma.errors import DomainError
from agma.global_prior import (
    ConditionedPrior,
    condition,
    export_global_csv,
    global_mixture,
    gumbel_select,
    import_global_csv,
    log_density,
    sample_from_past,
    sample_global,
)
from agma.mixture import MixturePrior

from conftest import assert_grads_close, tiny_model


def _prior(attention, means, variances):
    att = np.asarray(attention, dtype=np.float64)
    mix = MixturePrior(
        Tensor(np.full(att.shape[-1], 1.0 / att.shape[-1])),
        Tensor(np.asarray(means, dtype=np.float64)),
        Tensor(np.asarray(variances, dtype=np.float64)),
    )
    return ConditionedPrior(attention=Tensor(att), mixture=mix)


class TestGlobalMixtureView:
    def test_weights_are_softmax_of_logits(self, rng):
        m = tiny_model()
        m.params["global.logits"].data = rng.normal(size=4)
        mix = global_mixture(m)
        want = np.exp(m.params["global.logits"].data)
        want /= want.sum()
        np.testing.assert_allclose(mix.weights.data, want, atol=1e-12)

    def test_variances_respect_floor(self, rng):
        m = tiny_model()
        m.params["global.rho"].data = rng.normal(scale=20.0, size=(4, 6))
        mix = global_mixture(m)
        assert np.all(mix.variances.data >= m.config.sigma2_min)

    def test_view_is_differentiable(self, rng):
        m = tiny_model()
        m.params.zero_grad()
        mix = global_mixture(m)
        ad.add(ad.sum_(ad.power(mix.means, 2)), ad.sum_(mix.variances)).backward()
        assert np.any(m.params["global.mu"].grad != 0)
        assert np.any(m.params["global.rho"].grad != 0)


class TestConditioning:
    def test_shapes_and_simplex_rows(self, rng):
        m = tiny_model()
        cond = condition(m, Tensor(rng.normal(size=(5, 6))))
        assert cond.attention.shape == (5, 4)
        np.testing.assert_allclose(cond.attention.data.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(cond.attention.data >= 0)

    def test_attention_row_selection(self, rng):
        m = tiny_model()
        cond = condition(m, Tensor(rng.normal(size=(3, 6))))
        np.testing.assert_array_equal(cond.attention_row(1), cond.attention.data[1])
        with pytest.raises(DomainError):
            cond.attention_row()

    def test_mixture_for_drops_zero_components(self):
        prior = _prior([0.0, 0.6, 0.0, 0.4], np.zeros((4, 2)), np.ones((4, 2)))
        sub = prior.mixture_for()
        assert sub.k == 2
        np.testing.assert_allclose(sub.weights.data, [0.6, 0.4], atol=1e-12)
        zero = _prior([0.0, 0.0], np.zeros((2, 1)), np.ones((2, 1)))
        with pytest.raises(DomainError):
            zero.mixture_for()

    def test_sample_from_past_shape(self, rng):
        m = tiny_model()
        out = sample_from_past(m, Tensor(rng.normal(size=(3, 6))), 5, np.random.default_rng(0))
        assert out.shape == (3, 5, 6)


class TestGumbelSelect:
    def test_soft_rows_live_on_simplex(self, rng):
        a = rng.dirichlet(np.ones(5), size=7)
        sel = gumbel_select(Tensor(a), 0.7, rng)
        assert sel.shape == (7, 5)
        assert np.all(sel.data > 0)
        np.testing.assert_allclose(sel.data.sum(axis=1), 1.0, atol=1e-9)

    def test_hard_is_exact_categorical(self, rng):
        a = np.array([0.2, 0.5, 0.3])
        n = 100_000
        idx = gumbel_select(np.tile(a, (n, 1)), 1.0, rng, hard=True)
        freq = np.bincount(idx, minlength=3) / n
        assert np.all(np.abs(freq - a) < 0.01)

    def test_hard_never_picks_zero_weight(self, rng):
        a = np.array([0.5, 0.0, 0.5])
        idx = gumbel_select(np.tile(a, (10_000, 1)), 1.0, rng, hard=True)
        assert not np.any(idx == 1)

    def test_soft_low_temperature_matches_hard_argmax(self):
        a = np.random.default_rng(5).dirichlet(np.ones(4), size=50)
        soft = gumbel_select(Tensor(a), 1e-3, np.random.default_rng(99))
        hard = gumbel_select(Tensor(a), 1e-3, np.random.default_rng(99), hard=True)
        np.testing.assert_array_equal(np.argmax(soft.data, axis=1), hard)
        assert np.all(soft.data.max(axis=1) > 0.999)

    def test_lower_temperature_sharpens_every_row(self):
        a = np.random.default_rng(3).dirichlet(np.ones(6), size=20)

        def entropies(tau):
            sel = gumbel_select(Tensor(a), tau, np.random.default_rng(123)).data
            p = np.clip(sel, 1e-300, 1.0)
            return -(p * np.log(p)).sum(axis=1)

        assert np.all(entropies(0.2) <= entropies(1.0) + 1e-12)

    def test_temperature_and_mass_validation(self, rng):
        a = np.array([[0.5, 0.5]])
        with pytest.raises(DomainError):
            gumbel_select(a, 0.0, rng)
        with pytest.raises(DomainError):
            gumbel_select(np.array([[0.0, 0.0]]), 1.0, rng)
        with pytest.raises(DomainError):
            gumbel_select(np.array([[-0.1, 1.1]]), 1.0, rng)

    def test_soft_gradient_matches_fd(self, rng):
        a0 = rng.dirichlet(np.ones(4), size=3)
        w = rng.normal(size=(3, 4))

        def loss(a):
            sel = gumbel_select(a, 0.8, np.random.default_rng(2024))
            return ad.sum_(ad.mul(sel, Tensor(w)))

        assert_grads_close(loss, [a0])


class TestSampleGlobal:
    def test_shapes_single_and_batched(self, rng):
        prior = _prior(
            np.array([0.5, 0.5]), np.array([[0.0, 0.0], [1.0, 1.0]]), np.ones((2, 2))
        )
        assert sample_global(prior, 1.0, rng, n=4).shape == (4, 2)
        batched = _prior(
            np.tile([0.5, 0.5], (3, 1)), np.array([[0.0, 0.0], [1.0, 1.0]]), np.ones((2, 2))
        )
        assert sample_global(batched, 1.0, rng, n=4).shape == (3, 4, 2)
        with pytest.raises(DomainError):
            sample_global(prior, 1.0, rng, n=0)

    def test_hard_moments_match_mixture(self, rng):
        a = np.array([0.3, 0.7])
        mu = np.array([[-2.0], [5.0]])
        var = np.array([[0.5], [2.0]])
        prior = _prior(a, mu, var)
        z = sample_global(prior, 1.0, rng, n=200_000, hard=True).data[:, 0]
        want_mean = a @ mu[:, 0]
        want_var = a @ (var[:, 0] + mu[:, 0] ** 2) - want_mean**2
        assert abs(z.mean() - want_mean) < 0.05
        assert abs(z.var() - want_var) < 0.15

    def test_hard_frequencies_with_separated_means(self, rng):
        a = np.array([0.25, 0.75])
        prior = _prior(a, np.array([[0.0], [100.0]]), np.full((2, 1), 0.01))
        z = sample_global(prior, 1.0, rng, n=100_000, hard=True).data[:, 0]
        frac_high = float(np.mean(z > 50.0))
        assert abs(frac_high - 0.75) < 0.01

    def test_soft_low_temperature_approaches_hard_statistics(self, rng):
        a = np.array([0.4, 0.6])
        prior = _prior(a, np.array([[0.0], [10.0]]), np.full((2, 1), 0.01))
        z = sample_global(prior, 0.05, rng, n=50_000).data[:, 0]
        frac_high = float(np.mean(z > 5.0))
        assert abs(frac_high - 0.6) < 0.02

    def test_soft_path_gradients_reach_everything(self, rng):
        m = tiny_model()
        m.params.zero_grad()
        cond = condition(m, Tensor(rng.normal(size=(2, 6))))
        z = sample_global(cond, 1.0, np.random.default_rng(4), n=3)
        ad.sum_(ad.power(z, 2)).backward()
        for name in ("global.mu", "global.rho", "global.logits", "cross.query.w"):
            assert np.any(m.params[name].grad != 0), name

    def test_determinism_under_fixed_rng(self):
        prior = _prior(np.array([0.5, 0.5]), np.zeros((2, 3)), np.ones((2, 3)))
        z1 = sample_global(prior, 1.0, np.random.default_rng(11), n=5)
        z2 = sample_global(prior, 1.0, np.random.default_rng(11), n=5)
        np.testing.assert_array_equal(z1.data, z2.data)


class TestLogDensity:
    def test_single_gaussian_closed_form(self, rng):
        mu = np.array([[1.0, -2.0, 0.5]])
        var = np.array([[0.5, 2.0, 1.0]])
        prior = _prior(np.array([1.0]), mu, var)
        for _ in range(20):
            z = rng.normal(size=3)
            want = -0.5 * np.sum((z - mu[0]) ** 2 / var[0] + np.log(2 * np.pi * var[0]))
            assert log_density(prior, z) == pytest.approx(want, abs=1e-10)

    def test_mixture_matches_manual_logsumexp(self, rng):
        a = np.array([0.3, 0.2, 0.5])
        mu = rng.normal(size=(3, 2))
        var = rng.uniform(0.5, 2.0, size=(3, 2))
        prior = _prior(a, mu, var)
        z = rng.normal(size=2)
        comps = [
            np.log(a[g]) - 0.5 * np.sum((z - mu[g]) ** 2 / var[g] + np.log(2 * np.pi * var[g]))
            for g in range(3)
        ]
        assert log_density(prior, z) == pytest.approx(np.logaddexp.reduce(comps), abs=1e-10)

    def test_density_integrates_to_one(self):
        prior = _prior(
            np.array([0.6, 0.4]), np.array([[-1.0], [2.0]]), np.array([[0.3], [1.5]])
        )
        grid = np.linspace(-12.0, 14.0, 20_001)
        dens = np.array([np.exp(log_density(prior, np.array([x]))) for x in grid])
        integral = np.trapezoid(dens, grid)
        assert integral == pytest.approx(1.0, abs=1e-6)

    def test_component_permutation_invariance(self, rng):
        a = np.array([0.1, 0.6, 0.3])
        mu = rng.normal(size=(3, 2))
        var = rng.uniform(0.5, 2.0, size=(3, 2))
        perm = np.array([2, 0, 1])
        z = rng.normal(size=2)
        base = log_density(_prior(a, mu, var), z)
        swapped = log_density(_prior(a[perm], mu[perm], var[perm]), z)
        assert base == pytest.approx(swapped, abs=1e-12)

    def test_zero_attention_components_are_excluded(self):
        # an outlier component with zero attention must not contribute
        prior = _prior(
            np.array([1.0, 0.0]), np.array([[0.0], [0.0]]), np.array([[1.0], [1e-12]])
        )
        want = -0.5 * (0.0 + np.log(2 * np.pi))
        assert log_density(prior, np.array([0.0])) == pytest.approx(want, abs=1e-9)

    def test_per_agent_selection(self, rng):
        m = tiny_model()
        cond = condition(m, Tensor(rng.normal(size=(3, 6))), normalizer="softmax")
        z = rng.normal(size=6)
        vals = [log_density(cond, z, agent=i) for i in range(3)]
        assert len(set(vals)) > 1  # different agents weight components differently


class TestCsvRoundTrip:
    def test_export_import_reproduces_mixture(self, tmp_path, rng):
        m = tiny_model(seed=8)
        m.params["global.logits"].data = rng.normal(size=4)
        m.params["global.rho"].data = rng.normal(size=(4, 6))
        path = tmp_path / "global.csv"
        export_global_csv(m, path)
        before = global_mixture(m)

        other = tiny_model(seed=99)
        import_global_csv(other, path)
        after = global_mixture(other)
        np.testing.assert_allclose(after.weights.data, before.weights.data, atol=1e-12)
        np.testing.assert_array_equal(after.means.data, before.means.data)
        np.testing.assert_allclose(after.variances.data, before.variances.data, rtol=1e-12)

    def test_import_rejects_wrong_shape(self, tmp_path):
        m = tiny_model()
        path = tmp_path / "global.csv"
        export_global_csv(m, path)
        with pytest.raises(DomainError):
            import_global_csv(tiny_model(k_global=7), path)

    def test_import_rejects_subfloor_variance(self, tmp_path):
        from agma.mixture import mixture_to_csv

        m = tiny_model()
        bad = MixturePrior(
            Tensor(np.full(4, 0.25)),
            Tensor(np.zeros((4, 6))),
            Tensor(np.full((4, 6), m.config.sigma2_min / 2)),
        )
        path = tmp_path / "bad.csv"
        mixture_to_csv(bad, path)
        with pytest.raises(DomainError):
            import_global_csv(m, path)
