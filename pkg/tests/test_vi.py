import numpy as np
import pytest

from vpr.diagnostics import analytic_gaussian_posterior, gaussian_kl
from vpr.errors import DegenerateDataError, NonFiniteGradientError
from vpr.forward import COUNTER, LinearForward
from vpr.gaussian import GaussianVariational, SparsityPattern, StructuredCholesky
from vpr.priors import DiagonalGaussianPrior, UniformPrior
from vpr.scenarios import conjugate_problem
from vpr.transforms import BoundedBox
from vpr.vi import (
    OptimizerState,
    TargetLogDensity,
    elbo_and_grad,
    elbo_estimate,
    elbo_step,
    optimize,
    posterior_target,
    run_psi,
    sample_noise,
)


def gaussian_target(mean, std):
    mean, std = np.asarray(mean, float), np.asarray(std, float)

    def fn(m):
        z = (m - mean) / std
        return -0.5 * float(z @ z), -z / std
    return TargetLogDensity(fn)


def unnormalised_log_evidence(P):
    n, k = P.G.shape[1], P.G.shape[0]
    post = analytic_gaussian_posterior(P.G, P.sigma_d, P.prior_a.mu, np.diag(P.prior_a.std ** 2), P.d_obs)
    return post, (post.log_evidence + 0.5 * k * np.log(2 * np.pi * P.sigma_d ** 2)
                  + 0.5 * n * np.log(2 * np.pi) + np.sum(np.log(P.prior_a.std)))


# -- posterior target ----------------------------------------------------------------------
def test_posterior_target_examples():
    box = BoundedBox.uniform(4, -5, 5)
    G = np.eye(4)
    m = np.array([0.1, 0.2, 0.3, 0.4])
    t = posterior_target(UniformPrior(box), LinearForward(G, G @ m, 0.5))
    assert t(m)[0] == 0.0
    assert t(m + 10)[0] == -np.inf
    rng = np.random.default_rng(0)
    G = rng.normal(size=(3, 4))
    prior = DiagonalGaussianPrior(np.zeros(4), np.full(4, 2.0), box)
    t = posterior_target(prior, LinearForward(G, rng.normal(size=3), 0.5))
    _, g = t(m)
    h = 1e-6
    fd = [(t(m + h * e)[0] - t(m - h * e)[0]) / (2 * h) for e in np.eye(4)]
    np.testing.assert_allclose(g, fd, rtol=1e-7, atol=1e-8)
    assert t.sims_per_eval == 1


# -- ELBO estimator ------------------------------------------------------------------------
def bounded_problem():
    box = BoundedBox(np.array([0.0, -1.0]), np.array([3.0, 4.0]))

    def fn(m):
        v = -0.5 * (m[0] - 1.0) ** 2 - 0.25 * (m[1] - m[0]) ** 2 - 0.1 * m[1] ** 4
        g = np.array([-(m[0] - 1.0) + 0.5 * (m[1] - m[0]), -0.5 * (m[1] - m[0]) - 0.4 * m[1] ** 3])
        return v, g
    chol = StructuredCholesky(SparsityPattern.full(2), np.array([-0.3, 0.2]), np.array([0.4]))
    return box, TargetLogDensity(fn), GaussianVariational(np.array([0.2, -0.1]), chol)


def test_elbo_gradient_matches_fd():
    box, target, q = bounded_problem()
    eps = sample_noise(3, 0, 4, 2)
    p0 = q.get_params()
    assert p0.size == 5
    _, g, _ = elbo_and_grad(q, box, target, eps, path_gradient=False)
    h = 1e-6
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        fp = elbo_and_grad(q.with_params(p0 + e), box, target, eps, path_gradient=False)[0]
        fm = elbo_and_grad(q.with_params(p0 - e), box, target, eps, path_gradient=False)[0]
        fd = (fp - fm) / (2 * h)
        assert abs(g[i] - fd) < 1e-4 * max(abs(fd), 1e-3)


def test_path_gradient_has_same_expectation():
    box, target, q = bounded_problem()
    eps = sample_noise(0, 0, 200000, 2)
    _, g_total, _ = elbo_and_grad(q, box, target, eps, path_gradient=False)
    _, g_path, _ = elbo_and_grad(q, box, target, eps, path_gradient=True)
    np.testing.assert_allclose(g_path, g_total, atol=0.02)


def test_self_target_gives_zero_elbo():
    box, _, q = bounded_problem()

    def fn(m):
        theta = box.unbounded_free(m)
        return q.log_density(theta) - float(np.sum(box.logjac_free(theta))), np.zeros(2)
    for seed in range(3):
        eps = sample_noise(seed, 0, 5, 2)
        from vpr.vi import elbo_terms
        for r in elbo_terms(q, box, TargetLogDensity(fn), eps):
            assert abs(r.value) < 1e-9
    assert abs(elbo_estimate(q, box, TargetLogDensity(fn), n_samples=7, seed=2)) < 1e-9


def test_elbo_estimate_is_deterministic():
    box, target, q = bounded_problem()
    a = elbo_estimate(q, box, target, n_samples=5, seed=11, iteration=3)
    b = elbo_estimate(q, box, target, n_samples=5, seed=11, iteration=3)
    assert a == b
    with pytest.raises(ValueError):
        elbo_estimate(q, box, target, n_samples=0)


def test_all_samples_outside_support():
    box, _, q = bounded_problem()
    t = TargetLogDensity(lambda m: (-np.inf, np.zeros(2)))
    with pytest.raises(DegenerateDataError):
        elbo_estimate(q, box, t, n_samples=3)


def test_non_finite_gradient_reports_seed():
    box, _, q = bounded_problem()
    t = TargetLogDensity(lambda m: (0.0, np.array([np.nan, 0.0])))
    with pytest.raises(NonFiniteGradientError, match="seed=4"):
        elbo_step(q, box, t, 2, OptimizerState(), seed=4)


def test_zero_gradient_leaves_parameters():
    opt = OptimizerState(lr=0.5)
    p = np.array([0.5, -1.0, 2.0, 0.1])
    for _ in range(3):
        p2 = opt.ascend(p, np.zeros(4))
        np.testing.assert_array_equal(p2, p)
    assert opt.step == 3


def test_learning_rate_decay():
    opt = OptimizerState(lr=1e-2, decay_start=100)
    opt.step = 100
    assert opt.current_lr() == 1e-2
    opt.step = 400
    assert opt.current_lr() == pytest.approx(5e-3)


# -- optimisation -------------------------------------------------------------------------
def test_standard_normal_from_offset_start():
    box = BoundedBox.unbounded(1)
    q = GaussianVariational.initial(SparsityPattern.full(1), np.array([5.0]))
    q, trace, _ = optimize(q, box, gaussian_target([0.0], [1.0]), 2000, 2, lr=1e-2)
    assert abs(q.mu[0]) < 0.1
    assert abs(np.exp(q.chol.raw_diag[0]) - 1.0) < 0.1


def test_conjugate_psi_matches_analytic():
    P = conjugate_problem(n=6, k=8, seed=2)
    post, log_z = unnormalised_log_evidence(P)
    COUNTER.reset()
    q, man = run_psi(posterior_target(P.prior_a, P.forward), P.box,
                     pattern=SparsityPattern.full(6), iterations=3000, n_samples=2, lr=1e-2)
    assert man.forward_sims == 3000 * 2 * 1 == COUNTER.value
    assert gaussian_kl(q, (post.mean, post.cov)) < 0.05
    shift = np.sqrt(np.diag(post.cov))
    assert np.all(np.abs(q.mu - post.mean) < 0.02 * np.maximum(shift, np.abs(post.mean - P.prior_a.mu)))

    t = posterior_target(P.prior_a, P.forward)
    draws = [elbo_estimate(q, P.box, t, n_samples=200, seed=s) for s in range(5)]
    elbo = float(np.mean(draws))
    noise = float(np.std(draws)) / np.sqrt(5)
    assert elbo <= log_z + 3 * noise + 1e-9
    assert abs(elbo - log_z) < 0.1


def test_elbo_below_evidence_for_poor_q():
    P = conjugate_problem(n=4, k=6, seed=1)
    _, log_z = unnormalised_log_evidence(P)
    t = posterior_target(P.prior_a, P.forward)
    q = GaussianVariational.initial(SparsityPattern.full(4), np.ones(4), std=0.5)
    assert elbo_estimate(q, P.box, t, n_samples=20000, seed=0) < log_z


def test_elbo_trend_is_non_decreasing():
    P = conjugate_problem(n=10, k=12, seed=0)
    q = GaussianVariational.initial(SparsityPattern.full(10), np.full(10, 3.0))
    _, trace, _ = optimize(q, P.box, posterior_target(P.prior_a, P.forward), 500, 2, lr=1e-2)
    v = np.array([t[1] for t in trace])
    ma = np.convolve(v, np.ones(50) / 50, mode="valid")
    # compare consecutive non-overlapping windows so one noisy draw cannot flip the sign
    blocks = ma[::50]
    assert np.all(np.diff(blocks) >= 0)


def test_runs_are_independent_of_thread_count():
    P = conjugate_problem(n=5, k=7, seed=3)
    t = posterior_target(P.prior_a, P.forward)
    q0 = GaussianVariational.initial(SparsityPattern.full(5))
    a, ta, _ = optimize(q0, P.box, t, 200, 4, threads=1)
    b, tb, _ = optimize(q0, P.box, t, 200, 4, threads=4)
    np.testing.assert_array_equal(a.get_params(), b.get_params())
    assert [x[1] for x in ta] == [x[1] for x in tb]


def test_run_psi_validation_and_manifest():
    P = conjugate_problem(n=3, k=4)
    t = posterior_target(P.prior_a, P.forward)
    with pytest.raises(ValueError):
        run_psi(t, P.box, iterations=0)
    q, man = run_psi(t, P.box, iterations=5, seed=7)
    assert man.seed == 7 and man.iterations == 5 and man.samples == 2
    assert man.forward_sims == 10
    q2, _ = run_psi(t, P.box, iterations=5, seed=7)
    np.testing.assert_array_equal(q.get_params(), q2.get_params())
