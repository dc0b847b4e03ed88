import numpy as np
import pytest
from helpers import gaussian_pdf, max_rel_err, mvn_logpdf

from chanadapt import gmm


def random_diag_mixture(m, k, d, rng, spread=2.0):
    logits = rng.normal(size=(m, k))
    means = rng.normal(scale=spread, size=(m, k, d))
    variances = rng.uniform(0.3, 2.0, size=(m, k, d))
    return gmm.ConditionalMixture(logits, means, variances=variances)


def random_psi(k, d, rng, strength=0.3):
    A = np.tile(np.eye(d), (k, 1, 1)) + strength * rng.normal(size=(k, d, d))
    b = strength * rng.normal(size=(k, d))
    C = rng.uniform(0.7, 1.4, size=(k, d))
    beta = rng.uniform(0.7, 1.3, size=k)
    gamma = strength * rng.normal(size=k)
    return gmm.AdaptationParams(A, b, C, beta, gamma)


class TestMixtureLogPdf:
    def test_standard_normal_at_mean(self):
        comp = gmm.GaussianComponent(0.0, np.zeros(2), np.ones(2))
        assert gmm.mixture_log_pdf(np.zeros(2), [comp]) == pytest.approx(
            np.log(1.0 / (2.0 * np.pi)), abs=1e-12
        )

    def test_duplicate_components_match_single(self):
        comp = gmm.GaussianComponent(0.3, np.array([1.0, -2.0]), np.array([0.5, 1.5]))
        single = gmm.mixture_log_pdf(np.array([0.2, 0.1]), [comp])
        double = gmm.mixture_log_pdf(np.array([0.2, 0.1]), [comp, comp])
        assert double == pytest.approx(single, abs=1e-12)

    def test_matches_direct_density_sum(self):
        # pi = (0.3, 0.7), means (-1, 2), variances (1, 4), x = 0
        comps = [
            gmm.GaussianComponent(np.log(0.3), np.array([-1.0]), np.array([1.0])),
            gmm.GaussianComponent(np.log(0.7), np.array([2.0]), np.array([4.0])),
        ]
        expected = 0.3 * gaussian_pdf(0.0, -1.0, 1.0) + 0.7 * gaussian_pdf(0.0, 2.0, 4.0)
        assert gmm.mixture_log_pdf(np.zeros(1), comps) == pytest.approx(np.log(expected), rel=1e-12)

    def test_dimension_mismatch_raises(self):
        comp = gmm.GaussianComponent(0.0, np.zeros(2), np.ones(2))
        with pytest.raises(ValueError):
            gmm.mixture_log_pdf(np.zeros(3), [comp])

    def test_non_finite_input_raises(self):
        comp = gmm.GaussianComponent(0.0, np.zeros(2), np.ones(2))
        with pytest.raises(ValueError):
            gmm.mixture_log_pdf(np.array([np.nan, 0.0]), [comp])

    def test_full_covariance_matches_dense_formula(self):
        rng = np.random.default_rng(7)
        L = rng.normal(size=(2, 2))
        cov = L @ L.T + 0.5 * np.eye(2)
        comp = gmm.GaussianComponent(0.0, np.array([0.5, -0.3]), cov)
        x = rng.normal(size=2)
        assert gmm.mixture_log_pdf(x, [comp]) == pytest.approx(
            float(mvn_logpdf(x, comp.mean, cov)), rel=1e-12
        )


class TestComponentValidation:
    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            gmm.GaussianComponent(0.0, np.zeros(2), np.array([1.0, -1.0]))

    def test_non_pd_covariance_rejected(self):
        cov = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3, -1
        with pytest.raises(ValueError):
            gmm.GaussianComponent(0.0, np.zeros(2), cov)

    def test_mean_length_must_match(self):
        with pytest.raises(ValueError):
            gmm.GaussianComponent(0.0, np.zeros(3), np.ones(2))


class TestSampleMixture:
    def test_single_component_index(self):
        comp = gmm.GaussianComponent(0.0, np.zeros(2), np.ones(2))
        rng = np.random.default_rng(0)
        for _ in range(50):
            _, idx = gmm.sample_mixture([comp], rng)
            assert idx == 0

    def test_zero_weight_component_never_drawn(self):
        comps = [
            gmm.GaussianComponent(0.0, np.zeros(1), np.ones(1)),
            gmm.GaussianComponent(-800.0, np.ones(1), np.ones(1)),
        ]
        mixture = gmm.ConditionalMixture.from_components([comps])
        rng = np.random.default_rng(1)
        _, comp_idx = gmm.sample_conditional(mixture, np.zeros(100000, dtype=int), rng)
        assert np.all(comp_idx == 0)

    def test_law_of_large_numbers(self):
        rng = np.random.default_rng(2)
        mixture = random_diag_mixture(1, 3, 2, rng)
        n = 1_000_000
        X, comp_idx = gmm.sample_conditional(mixture, np.zeros(n, dtype=int), rng)
        weights = mixture.weights()[0]
        freqs = np.bincount(comp_idx, minlength=3) / n
        sigma = np.sqrt(weights * (1.0 - weights) / n)
        assert np.all(np.abs(freqs - weights) <= 3.0 * sigma)
        for i in range(3):
            rows = comp_idx == i
            got = X[rows].mean(axis=0)
            se = np.sqrt(mixture.variances[0, i] / rows.sum())
            assert np.all(np.abs(got - mixture.means[0, i]) <= 3.0 * se)

    def test_seeded_determinism(self):
        comps = [gmm.GaussianComponent(0.0, np.zeros(2), np.ones(2))]
        x1, _ = gmm.sample_mixture(comps, np.random.default_rng(9))
        x2, _ = gmm.sample_mixture(comps, np.random.default_rng(9))
        assert np.array_equal(x1, x2)


class TestApplyParamTransform:
    def test_identity_is_noop(self):
        rng = np.random.default_rng(3)
        mixture = random_diag_mixture(4, 3, 2, rng)
        psi = gmm.AdaptationParams.identity(3, 2)
        out = gmm.apply_param_transform(mixture, psi)
        assert np.array_equal(out.logits, mixture.logits)
        assert np.array_equal(out.means, mixture.means)
        assert np.array_equal(out.variances, mixture.variances)

    def test_scalar_case(self):
        # A=2, b=3, C=0.5 on mu=1, var=4, logit=0 -> mu=5, var=1, logit=gamma
        mixture = gmm.ConditionalMixture(
            np.array([[0.0]]), np.array([[[1.0]]]), variances=np.array([[[4.0]]])
        )
        psi = gmm.AdaptationParams(
            A=np.array([[[2.0]]]), b=np.array([[3.0]]), C=np.array([[0.5]]),
            beta=np.array([1.7]), gamma=np.array([-0.4]),
        )
        out = gmm.apply_param_transform(mixture, psi)
        assert out.means[0, 0, 0] == pytest.approx(5.0)
        assert out.variances[0, 0, 0] == pytest.approx(1.0)
        assert out.logits[0, 0] == pytest.approx(-0.4)

    def test_matches_pushforward_distribution(self):
        # samples of the transformed mixture should match pushing source
        # samples through x_hat = C (x - mu) + A mu + b, per component
        rng = np.random.default_rng(4)
        mixture = random_diag_mixture(1, 2, 2, rng)
        psi = random_psi(2, 2, rng)
        target = gmm.apply_param_transform(mixture, psi)
        n = 100_000
        for i in range(2):
            src = mixture.means[0, i] + np.sqrt(mixture.variances[0, i]) * rng.standard_normal((n, 2))
            pushed = (src - mixture.means[0, i]) * psi.C[i] + psi.A[i] @ mixture.means[0, i] + psi.b[i]
            direct = target.means[0, i] + np.sqrt(target.variances[0, i]) * rng.standard_normal((n, 2))
            assert np.allclose(pushed.mean(axis=0), direct.mean(axis=0), atol=0.02)
            assert np.allclose(pushed.var(axis=0), direct.var(axis=0), rtol=0.05)

    def test_full_covariance_path(self):
        rng = np.random.default_rng(5)
        base = rng.normal(size=(1, 2, 2, 2))
        covs = np.einsum("skab,skcb->skac", base, base) + 0.5 * np.eye(2)
        mixture = gmm.ConditionalMixture(
            np.zeros((1, 2)), rng.normal(size=(1, 2, 2)), covariances=covs
        )
        psi = random_psi(2, 2, rng)
        out = gmm.apply_param_transform(mixture, psi)
        C = np.zeros((2, 2, 2))
        C[:, [0, 1], [0, 1]] = psi.C
        for i in range(2):
            expected = C[i] @ covs[0, i] @ C[i].T
            assert np.allclose(out.covariances[0, i], expected)


class TestKlGaussians:
    def test_identical_is_zero(self):
        comp = gmm.GaussianComponent(0.0, np.array([1.0, 2.0]), np.array([0.5, 2.0]))
        assert abs(gmm.kl_gaussians(comp, comp)) <= 1e-12

    def test_unit_shift_half(self):
        p = gmm.GaussianComponent(0.0, np.zeros(1), np.ones(1))
        q = gmm.GaussianComponent(0.0, np.ones(1), np.ones(1))
        assert gmm.kl_gaussians(p, q) == pytest.approx(0.5, abs=1e-12)

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(3):
            L1 = rng.normal(size=(2, 2))
            L2 = rng.normal(size=(2, 2))
            cov_p = L1 @ L1.T + 0.3 * np.eye(2)
            cov_q = L2 @ L2.T + 0.3 * np.eye(2)
            p = gmm.GaussianComponent(0.0, rng.normal(size=2), cov_p)
            q = gmm.GaussianComponent(0.0, rng.normal(size=2), cov_q)
            closed = gmm.kl_gaussians(p, q)
            X = p.mean + rng.standard_normal((1_000_000, 2)) @ np.linalg.cholesky(cov_p).T
            mc = np.mean(mvn_logpdf(X, p.mean, cov_p) - mvn_logpdf(X, q.mean, cov_q))
            assert closed == pytest.approx(mc, rel=0.01)

    def test_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            p = gmm.GaussianComponent(0.0, rng.normal(size=3), rng.uniform(0.2, 2.0, 3))
            q = gmm.GaussianComponent(0.0, rng.normal(size=3), rng.uniform(0.2, 2.0, 3))
            assert gmm.kl_gaussians(p, q) >= 0.0


class TestKlCorresponding:
    def test_identity_psi_is_zero(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            mixture = random_diag_mixture(3, 2, 2, rng)
            const = gmm.SymbolConstellation.uniform(rng.normal(size=(3, 2)))
            psi = gmm.AdaptationParams.identity(2, 2)
            assert abs(gmm.kl_corresponding(mixture, psi, const)) <= 1e-12

    def test_single_component_prior_term_vanishes(self):
        rng = np.random.default_rng(9)
        mixture = random_diag_mixture(2, 1, 2, rng)
        const = gmm.SymbolConstellation.uniform(rng.normal(size=(2, 2)))
        psi = gmm.AdaptationParams.identity(1, 2)
        psi.beta[:] = 3.7
        psi.gamma[:] = -2.2
        assert abs(gmm.kl_corresponding(mixture, psi, const)) <= 1e-12

    def test_nonnegative_for_random_psi(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            mixture = random_diag_mixture(3, 2, 2, rng)
            const = gmm.SymbolConstellation.uniform(rng.normal(size=(3, 2)))
            psi = random_psi(2, 2, rng)
            assert gmm.kl_corresponding(mixture, psi, const) >= 0.0

    def test_monte_carlo_joint_oracle(self):
        # E over z ~ p(z), K ~ pi(z), x ~ N_K of log P(x,K|z) / P_hat(x,K|z)
        rng = np.random.default_rng(11)
        mixture = random_diag_mixture(2, 2, 2, rng)
        const = gmm.SymbolConstellation.uniform(rng.normal(size=(2, 2)))
        psi = random_psi(2, 2, rng)
        closed = gmm.kl_corresponding(mixture, psi, const)
        target = gmm.apply_param_transform(mixture, psi)
        n = 1_000_000
        z_idx = rng.choice(2, size=n, p=const.priors)
        X, K = gmm.sample_conditional(mixture, z_idx, rng)
        logw_src = np.log(mixture.weights())[z_idx, K]
        logw_tgt = np.log(target.weights())[z_idx, K]
        mu_s, v_s = mixture.means[z_idx, K], mixture.variances[z_idx, K]
        mu_t, v_t = target.means[z_idx, K], target.variances[z_idx, K]
        logn_src = -0.5 * (((X - mu_s) ** 2 / v_s) + np.log(v_s)).sum(axis=1) - np.log(2 * np.pi)
        logn_tgt = -0.5 * (((X - mu_t) ** 2 / v_t) + np.log(v_t)).sum(axis=1) - np.log(2 * np.pi)
        mc = np.mean(logw_src + logn_src - logw_tgt - logn_tgt)
        assert closed == pytest.approx(mc, rel=0.01)

    def test_gradient_matches_finite_differences(self):
        from helpers import fd_grad

        rng = np.random.default_rng(12)
        mixture = random_diag_mixture(3, 2, 2, rng)
        const = gmm.SymbolConstellation.uniform(rng.normal(size=(3, 2)))
        psi = random_psi(2, 2, rng)
        value, grad = gmm.kl_corresponding_with_grad(mixture, psi, const)
        assert value == pytest.approx(gmm.kl_corresponding(mixture, psi, const))

        def f(vec):
            p = gmm.AdaptationParams.from_vector(vec, 2, 2, validate=False)
            return gmm.kl_corresponding(mixture, p, const)

        numeric = fd_grad(f, psi.to_vector())
        assert max_rel_err(grad, numeric) < 1e-4


class TestJointPosterior:
    def test_degenerate_single_pair(self):
        # one symbol carrying all prior mass, k=1: the table is a single 1
        mixture = gmm.ConditionalMixture(
            np.zeros((2, 1)),
            np.array([[[0.0, 0.0]], [[50.0, 50.0]]]),
            variances=np.ones((2, 1, 2)),
        )
        const = gmm.SymbolConstellation(np.array([[0.0, 0.0], [50.0, 50.0]]),
                                        np.array([1.0, 0.0]))
        post = gmm.joint_posterior(np.array([0.3, -0.2]), mixture, const)
        assert post.shape == (2, 1)
        assert post[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_separated_symbols_concentrate(self):
        rng = np.random.default_rng(13)
        means = np.array([[[0.0, 0.0]], [[20.0, 0.0]]])  # 20 sigma apart
        mixture = gmm.ConditionalMixture(np.zeros((2, 1)), means, variances=np.ones((2, 1, 2)))
        const = gmm.SymbolConstellation.uniform(means[:, 0, :])
        post = gmm.joint_posterior(np.zeros(2), mixture, const)
        assert post[0, 0] >= 0.99

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(14)
        mixture = random_diag_mixture(4, 3, 2, rng)
        const = gmm.SymbolConstellation.uniform(rng.normal(size=(4, 2)))
        X = rng.normal(scale=3.0, size=(1000, 2))
        post = gmm.joint_posterior_batch(X, mixture, const)
        assert np.allclose(post.sum(axis=(1, 2)), 1.0, atol=1e-9)

    def test_marginal_matches_bayes_on_mixture_log_pdf(self):
        rng = np.random.default_rng(15)
        mixture = random_diag_mixture(3, 2, 2, rng)
        const = gmm.SymbolConstellation.uniform(rng.normal(size=(3, 2)))
        x = rng.normal(size=2)
        post = gmm.joint_posterior(x, mixture, const).sum(axis=1)
        log_lik = np.array(
            [gmm.mixture_log_pdf(x, mixture.components(s)) for s in range(3)]
        )
        unnorm = const.priors * np.exp(log_lik)
        assert np.allclose(post, unnorm / unnorm.sum(), atol=1e-12)


class TestInverseComponentTransform:
    def test_identity(self):
        rng = np.random.default_rng(16)
        mixture = random_diag_mixture(2, 2, 2, rng)
        psi = gmm.AdaptationParams.identity(2, 2)
        x = rng.normal(size=2)
        out = gmm.inverse_component_transform(x, 0, 1, psi, mixture)
        assert np.allclose(out, x, atol=1e-15)

    def test_scalar_example(self):
        mixture = gmm.ConditionalMixture(
            np.array([[0.0]]), np.array([[[1.0]]]), variances=np.array([[[1.0]]])
        )
        psi = gmm.AdaptationParams(
            A=np.array([[[2.0]]]), b=np.array([[3.0]]), C=np.array([[0.5]]),
            beta=np.ones(1), gamma=np.zeros(1),
        )
        out = gmm.inverse_component_transform(np.array([5.0]), 0, 0, psi, mixture)
        assert out[0] == pytest.approx(1.0, abs=1e-12)

    def test_round_trip_with_forward_map(self):
        rng = np.random.default_rng(17)
        mixture = random_diag_mixture(3, 2, 2, rng)
        psi = random_psi(2, 2, rng)
        for s in range(3):
            for i in range(2):
                x = rng.normal(size=2)
                mu = mixture.means[s, i]
                forward = psi.C[i] * (x - mu) + psi.A[i] @ mu + psi.b[i]
                back = gmm.inverse_component_transform(forward, s, i, psi, mixture)
                assert np.allclose(back, x, atol=1e-10)

    def test_near_singular_c_raises(self):
        mixture = gmm.ConditionalMixture(
            np.array([[0.0]]), np.array([[[1.0]]]), variances=np.array([[[1.0]]])
        )
        psi = gmm.AdaptationParams.identity(1, 1)
        psi.C[0, 0] = 1e-12
        with pytest.raises(ValueError):
            gmm.inverse_component_transform(np.array([1.0]), 0, 0, psi, mixture)


class TestExpectedInverseTransform:
    def test_identity_psi_returns_input(self):
        rng = np.random.default_rng(18)
        mixture = random_diag_mixture(3, 2, 2, rng)
        const = gmm.SymbolConstellation.uniform(rng.normal(size=(3, 2)))
        psi = gmm.AdaptationParams.identity(2, 2)
        target = gmm.apply_param_transform(mixture, psi)
        X = rng.normal(size=(50, 2))
        out = gmm.expected_inverse_transform_batch(X, psi, mixture, target, const)
        assert np.allclose(out, X, atol=1e-12)

    def test_single_pair_equals_component_inverse(self):
        rng = np.random.default_rng(19)
        mixture = gmm.ConditionalMixture(
            np.zeros((2, 1)),
            rng.normal(size=(2, 1, 2)),
            variances=np.ones((2, 1, 2)),
        )
        const = gmm.SymbolConstellation(rng.normal(size=(2, 2)), np.array([1.0, 0.0]))
        psi = random_psi(1, 2, rng)
        target = gmm.apply_param_transform(mixture, psi)
        x = rng.normal(size=2)
        expected = gmm.inverse_component_transform(x, 0, 0, psi, mixture)
        got = gmm.expected_inverse_transform(x, psi, mixture, target, const)
        assert np.allclose(got, expected, atol=1e-10)

    def test_mmse_optimality_against_perturbations(self):
        rng = np.random.default_rng(20)
        for _ in range(5):
            mixture = random_diag_mixture(3, 2, 2, rng)
            const = gmm.SymbolConstellation.uniform(rng.normal(size=(3, 2)))
            psi = random_psi(2, 2, rng)
            target = gmm.apply_param_transform(mixture, psi)
            x = rng.normal(size=2)
            w_star = gmm.expected_inverse_transform(x, psi, mixture, target, const)
            post = gmm.joint_posterior(x, target, const)
            backs = np.stack([
                [gmm.inverse_component_transform(x, s, i, psi, mixture) for i in range(2)]
                for s in range(3)
            ])

            def objective(w):
                return 0.5 * float((post * ((backs - w) ** 2).sum(axis=2)).sum())

            j_star = objective(w_star)
            for _ in range(100):
                delta = rng.standard_normal(2)
                delta *= 0.1 / np.linalg.norm(delta)
                assert j_star <= objective(w_star + delta) + 1e-12


class TestSerialization:
    def test_mixture_round_trip(self):
        rng = np.random.default_rng(21)
        mixture = random_diag_mixture(3, 2, 2, rng)
        again = gmm.ConditionalMixture.from_dict(mixture.to_dict())
        assert np.allclose(again.logits, mixture.logits)
        assert np.allclose(again.means, mixture.means)
        assert np.allclose(again.variances, mixture.variances)

    def test_psi_round_trip(self):
        rng = np.random.default_rng(22)
        psi = random_psi(3, 2, rng)
        again = gmm.AdaptationParams.from_dict(psi.to_dict())
        assert np.allclose(again.to_vector(), psi.to_vector())

    def test_vector_round_trip(self):
        rng = np.random.default_rng(23)
        psi = random_psi(3, 2, rng)
        vec = psi.to_vector()
        assert vec.shape == (3 * (4 + 4 + 2),)
        again = gmm.AdaptationParams.from_vector(vec, 3, 2)
        assert np.allclose(again.to_vector(), vec)

    def test_identity_constructor(self):
        psi = gmm.AdaptationParams.identity(4, 3)
        assert psi.is_identity()
        assert psi.n_params == 4 * (9 + 6 + 2)


class TestConstellation:
    def test_priors_must_sum_to_one(self):
        with pytest.raises(ValueError):
            gmm.SymbolConstellation(np.zeros((2, 2)), np.array([0.6, 0.3]))

    def test_needs_two_symbols(self):
        with pytest.raises(ValueError):
            gmm.SymbolConstellation(np.zeros((1, 2)), np.array([1.0]))

    def test_class_proportion_priors(self):
        symbols = np.array([[0.0, 1.0], [1.0, 0.0]])
        const = gmm.SymbolConstellation.from_class_proportions(symbols, [0, 0, 0, 1])
        assert np.allclose(const.priors, [0.75, 0.25])
