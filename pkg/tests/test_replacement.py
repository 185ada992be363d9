import numpy as np
import pytest

from vpr.diagnostics import analytic_gaussian_posterior, gaussian_kl
from vpr.errors import SupportError
from vpr.forward import COUNTER
from vpr.gaussian import GaussianVariational, SparsityPattern
from vpr.priors import DiagonalGaussianPrior, UniformPrior
from vpr.replacement import VprProblem, VprTarget, check_support, run_vpr, vpr_target
from vpr.scenarios import conjugate_problem
from vpr.transforms import BoundedBox
from vpr.vi import posterior_target, run_psi


class ShiftedPrior:
    """Adds a constant to another prior's log density."""

    def __init__(self, base, shift):
        self.base, self.shift, self.box = base, shift, base.box

    def log_prob(self, m):
        return self.base.log_prob(m) + self.shift

    def log_prob_grad(self, m):
        v, g = self.base.log_prob_grad(m)
        return v + self.shift, g


def analytic(P, prior):
    return analytic_gaussian_posterior(P.G, P.sigma_d, prior.mu, np.diag(prior.std ** 2), P.d_obs)


@pytest.fixture(scope="module")
def conj():
    P = conjugate_problem(n=10, k=12, seed=0)
    pat = SparsityPattern.full(10)
    q_a, _ = run_psi(posterior_target(P.prior_a, P.forward), P.box, pattern=pat,
                     iterations=3000, n_samples=2)
    q_b, _ = run_psi(posterior_target(P.prior_b, P.forward), P.box, pattern=pat,
                     iterations=3000, n_samples=2, seed=1)
    return P, q_a, q_b


# -- support rule --------------------------------------------------------------------------
def test_check_support_examples():
    old = UniformPrior(BoundedBox.uniform(4, 0, 10))
    assert check_support(old, old)
    assert check_support(UniformPrior(BoundedBox.uniform(4, 1, 9)), old)
    up = np.full(4, 10.0)
    up[2] = 11.0
    rep = check_support(UniformPrior(BoundedBox(np.zeros(4), up)), old)
    assert not rep and rep.indices == [2]
    assert "subset" in rep.message and "2" in rep.message


def test_run_vpr_refuses_bad_support():
    old = UniformPrior(BoundedBox.uniform(2, 0, 10))
    new = UniformPrior(BoundedBox.uniform(2, -1, 10))
    q = GaussianVariational.initial(SparsityPattern.full(2))
    COUNTER.reset()
    with pytest.raises(SupportError, match="subset") as exc:
        run_vpr(VprProblem(q, old.box, old, new), iterations=3)
    assert exc.value.indices == [0, 1]


# -- surrogate target ----------------------------------------------------------------------
def test_identity_target_is_q_old_density():
    box = BoundedBox.uniform(2, 0, 5)
    q = GaussianVariational.initial(SparsityPattern.full(2), np.array([0.3, -0.2]), std=0.7)
    p = DiagonalGaussianPrior(np.full(2, 2.0), np.ones(2), box)
    m = np.array([1.0, 3.0])
    theta = box.unbounded_free(m)
    expect = q.log_density(theta) - np.sum(box.logjac_free(theta))
    assert vpr_target(m, VprProblem(q, box, p, p))[0] == pytest.approx(expect, rel=1e-12)
    # a uniform old prior only shifts the target by a constant
    t = VprTarget(VprProblem(q, box, UniformPrior(box), p))
    v1, v2 = t(m)[0], t(m + 0.5)[0]
    m2 = m + 0.5
    th2 = box.unbounded_free(m2)
    e2 = q.log_density(th2) - np.sum(box.logjac_free(th2))
    assert v1 - expect - p.log_prob(m) == pytest.approx(v2 - e2 - p.log_prob(m2), abs=1e-10)
    assert t.activations == 0


def test_target_gradient_matches_fd():
    box = BoundedBox.uniform(3, -4, 6)
    q = GaussianVariational.initial(SparsityPattern.full(3), np.array([0.3, -0.2, 0.1]), std=0.8)
    q.chol.offdiag[:] = [0.1, -0.2, 0.05]
    p_old = DiagonalGaussianPrior(np.zeros(3), np.full(3, 3.0), box)
    p_new = DiagonalGaussianPrior(np.ones(3), np.full(3, 1.5), box)
    t = VprTarget(VprProblem(q, box, p_old, p_new))
    m = np.array([0.5, 1.5, -1.0])
    _, g = t(m)
    h = 1e-6
    fd = [(t(m + h * e)[0] - t(m - h * e)[0]) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(g, fd, rtol=1e-6)
    assert t(np.array([0.5, 7.0, 0.0]))[0] == -np.inf


def test_one_dimensional_quotient():
    box = BoundedBox.unbounded(1)
    q_old = GaussianVariational.initial(SparsityPattern.full(1))
    p_old = DiagonalGaussianPrior([0.0], [2.0], box)
    p_new = DiagonalGaussianPrior([0.0], [1.0], box)
    q, man = run_vpr(VprProblem(q_old, box, p_old, p_new), iterations=3000)
    var = float(np.exp(2 * q.chol.raw_diag[0]))
    assert var == pytest.approx(1 / 1.75, abs=5e-3)
    assert abs(q.mu[0]) < 1e-2
    assert man.forward_sims == 0 and man.samples == 10


# -- conjugate suite -------------------------------------------------------------------------
def test_identity_replacement(conj):
    P, q_a, _ = conj
    q, man = run_vpr(VprProblem(q_a, P.box, P.prior_a, P.prior_a), iterations=500)
    assert gaussian_kl(q, q_a) < 1e-3
    assert man.clamp_activations == 0


def test_conjugate_chain(conj):
    P, q_a, q_b = conj
    COUNTER.reset()
    q, man = run_vpr(VprProblem(q_a, P.box, P.prior_a, P.prior_b), iterations=3000)
    assert COUNTER.value == 0 and man.forward_sims == 0
    assert man.clamp_activations == 0 and not man.warnings
    post = analytic(P, P.prior_b)
    std = np.sqrt(np.diag(post.cov))
    assert np.all(np.abs(q.mu - post.mean) < 0.02 * std)
    # order invariance: PSI under B directly against PSI under A then VPR to B
    assert gaussian_kl(q, q_b) < 0.05


def test_whitened_identity_and_chain(conj):
    P, q_a, q_b = conj
    q, man = run_vpr(VprProblem(q_a, P.box, P.prior_a, P.prior_a), iterations=500, whiten=True)
    assert gaussian_kl(q, q_a) < 1e-3 and man.forward_sims == 0
    q, _ = run_vpr(VprProblem(q_a, P.box, P.prior_a, P.prior_b), iterations=3000, whiten=True)
    post = analytic(P, P.prior_b)
    assert np.all(np.abs(q.mu - post.mean) < 0.02 * np.sqrt(np.diag(post.cov)))
    assert gaussian_kl(q, q_b) < 0.05


def test_whitened_target_gradient_matches_fd(conj):
    from vpr.replacement import WhitenedTarget, warm_start
    P, q_a, _ = conj
    box = BoundedBox(np.full(10, -8.0), np.full(10, 8.0))
    inner = VprTarget(VprProblem(q_a, P.box, P.prior_a, P.prior_b))
    t = WhitenedTarget(inner, warm_start(q_a, P.box, box), box)
    z = np.random.default_rng(3).normal(size=10) * 0.5
    v, g = t(z)
    h = 1e-6
    fd = [(t(z + h * e)[0] - t(z - h * e)[0]) / (2 * h) for e in np.eye(10)]
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6)


def test_constant_shift_invariance(conj):
    P, q_a, _ = conj
    base = run_vpr(VprProblem(q_a, P.box, P.prior_a, P.prior_b), iterations=300)[0]
    for s_new, s_old in ((123.0, 0.0), (0.0, -7.5), (40.0, 40.0)):
        prob = VprProblem(q_a, P.box, ShiftedPrior(P.prior_a, s_old), ShiftedPrior(P.prior_b, s_new))
        q, _ = run_vpr(prob, iterations=300)
        np.testing.assert_allclose(q.get_params(), base.get_params(), atol=1e-3)


def test_floor_activates_and_is_reported():
    box = BoundedBox.unbounded(1)
    q_old = GaussianVariational.initial(SparsityPattern.full(1), std=3.0)
    # a very narrow old prior: samples of q_new far from zero fall through the floor
    p_old = DiagonalGaussianPrior([0.0], [0.1], box)
    p_new = DiagonalGaussianPrior([0.0], [1.0], box)
    _, man = run_vpr(VprProblem(q_old, box, p_old, p_new), iterations=50, warm=False, init_std=3.0)
    assert man.clamp_activations > 0
    assert any("floor" in w for w in man.warnings)


def test_old_prior_zero_at_reference():
    box = BoundedBox.uniform(1, 0, 10)
    q_old = GaussianVariational.initial(SparsityPattern.full(1))

    class Zero(UniformPrior):
        def log_prob(self, m):
            return -np.inf
    with pytest.raises(SupportError):
        VprTarget(VprProblem(q_old, box, Zero(box), UniformPrior(box)))


def test_vpr_is_deterministic(conj):
    P, q_a, _ = conj
    prob = VprProblem(q_a, P.box, P.prior_a, P.prior_b)
    a = run_vpr(prob, iterations=50, threads=1)[0]
    b = run_vpr(prob, iterations=50, threads=4)[0]
    np.testing.assert_array_equal(a.get_params(), b.get_params())
