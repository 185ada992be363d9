"""Prior-specific inversion: ELBO maximisation over the structured Gaussian family.

Samples are drawn in unbounded space, ``theta = mu + L eps``, pushed through
the logit map to the physical model ``m`` and scored with

    target(m) + log|dm/dtheta| - log q(theta)

Each per-sample noise vector comes from its own stream seeded by
``(seed, iteration, sample)``, so results do not depend on how the samples
are scheduled across threads.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateDataError, NonFiniteGradientError
from .forward import COUNTER
from .gaussian import LOG_2PI, GaussianVariational, SparsityPattern
from .manifest import RunManifest
from .transforms import BoundedBox

PENALTY = -1e8
ITERATIONS = 5000
PSI_SAMPLES = 2


@dataclass
class TargetLogDensity:
    """``m -> (log density, gradient)``; ``sims_per_eval`` counts forward simulations per call."""

    fn: Callable
    tag: str = "test-target"
    sims_per_eval: int = 0

    def __call__(self, m):
        return self.fn(m)


def posterior_target(prior, forward=None) -> TargetLogDensity:
    """Unnormalised log posterior: Gaussian log-likelihood plus log prior.

    ``forward`` provides ``misfit_grad(m) -> (0.5 |r / sigma|^2, gradient)``;
    ``None`` gives the prior alone.  The forward model is skipped for models
    outside the prior support.
    """
    def fn(m):
        lp, gp = prior.log_prob_grad(m)
        if not np.isfinite(lp):
            return -np.inf, np.zeros_like(gp)
        if forward is None:
            return lp, gp
        misfit, gm = forward.misfit_grad(m)
        g = gp - np.asarray(gm).ravel()
        g[prior.box.fixed_mask] = 0.0
        return lp - misfit, g

    spe = 0 if forward is None else forward.sims_per_eval
    return TargetLogDensity(fn, "posterior-target", spe)


def sample_noise(seed: int, iteration: int, n_samples: int, n: int) -> np.ndarray:
    rows = [np.random.default_rng(np.random.SeedSequence([seed, iteration, s])).standard_normal(n)
            for s in range(n_samples)]
    return np.array(rows).reshape(n_samples, n)


@dataclass
class SampleResult:
    value: float          # target + log-Jacobian - log q
    model_term: float     # target + log-Jacobian
    grad: np.ndarray      # d value / d params
    penalized: bool = False


def _evaluate_sample(q: GaussianVariational, box: BoundedBox, target, eps, path_gradient: bool):
    theta = q.mu + q.chol.matvec(eps)
    m = box.fixed_values.copy()
    m[box.free] = box.physical_free(theta)
    val, gm = target(m)
    penalized = not np.isfinite(val)
    if penalized:
        val, gm = PENALTY, np.zeros(box.n)
    gm = np.asarray(gm, dtype=np.float64)
    g_theta = gm[box.free] * box.dm_dtheta(theta) + box.dlogjac_dtheta(theta)
    if path_gradient:
        # -d log q / d theta with the density parameters held fixed
        g_theta = g_theta + q.chol.solve_transpose(eps)
    logjac = float(np.sum(box.logjac_free(theta)))
    logq = -0.5 * q.n * LOG_2PI - q.chol.log_det() - 0.5 * float(eps @ eps)
    n = q.n
    grad = np.empty(2 * n + q.pattern.n_offdiag)
    grad[:n] = g_theta
    grad[n:2 * n] = g_theta * eps * q.chol.diag + (0.0 if path_gradient else 1.0)
    pos = 2 * n
    for k, block in q.chol.blocks():
        grad[pos:pos + n - k] = g_theta[k:] * eps[:n - k]
        pos += n - k
    model_term = val + logjac
    return SampleResult(model_term - logq, model_term, grad, penalized)


def elbo_terms(q, box, target, eps, path_gradient=True, executor=None):
    """Evaluate every row of ``eps``; returns a list of ``SampleResult`` in row order."""
    eps = np.atleast_2d(eps)
    if executor is not None and len(eps) > 1:
        return list(executor.map(lambda e: _evaluate_sample(q, box, target, e, path_gradient), eps))
    return [_evaluate_sample(q, box, target, e, path_gradient) for e in eps]


def elbo_and_grad(q, box, target, eps, analytic_entropy=False, path_gradient=True, executor=None):
    """Monte Carlo ELBO and its gradient w.r.t. ``[mu, raw_diag, offdiag]`` at fixed ``eps``.

    With ``path_gradient=False`` the gradient is the total derivative of the
    returned estimate.  With ``path_gradient=True`` the zero-mean score term of
    ``-log q`` is dropped, which removes all gradient noise once ``q`` matches
    a Gaussian target.
    """
    res = elbo_terms(q, box, target, eps, path_gradient, executor)
    if all(r.penalized for r in res):
        raise DegenerateDataError("every sample fell outside the target support")
    if analytic_entropy:
        value = float(np.mean([r.model_term for r in res])) + q.entropy()
    else:
        value = float(np.mean([r.value for r in res]))
    grad = np.zeros_like(res[0].grad)
    for r in res:
        grad += r.grad
    return value, grad / len(res), sum(r.penalized for r in res)


def elbo_estimate(q, box, target, n_samples: int = PSI_SAMPLES, seed: int = 0, iteration: int = 0,
                  analytic_entropy: bool = False) -> float:
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    eps = sample_noise(seed, iteration, n_samples, q.n)
    return elbo_and_grad(q, box, target, eps, analytic_entropy)[0]


@dataclass
class OptimizerState:
    """Adam moments plus a learning rate that decays as ``1/sqrt(t)`` after ``decay_start``."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_start: int | None = None
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def current_lr(self) -> float:
        t = self.step
        if self.decay_start and t > self.decay_start:
            return self.lr * math.sqrt(self.decay_start / t)
        return self.lr

    def ascend(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.step)
        vhat = self.v / (1 - self.beta2 ** self.step)
        return params + self.current_lr() * mhat / (np.sqrt(vhat) + self.eps)


def elbo_step(q, box, target, n_samples, opt: OptimizerState, seed: int, executor=None,
              analytic_entropy=False, path_gradient=True):
    """One stochastic ascent step; returns ``(q_new, opt, elbo, n_penalized)``."""
    it = opt.step
    eps = sample_noise(seed, it, n_samples, q.n)
    value, grad, npen = elbo_and_grad(q, box, target, eps, analytic_entropy, path_gradient, executor)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(
            f"non-finite ELBO gradient at iteration {it} (seed={seed}, samples 0..{n_samples - 1})",
            sample_seed=(seed, it))
    params = opt.ascend(q.get_params(), grad)
    return q.with_params(params), opt, value, npen


def _moving_average(x, w):
    c = np.cumsum(np.insert(np.asarray(x, dtype=np.float64), 0, 0.0))
    return (c[w:] - c[:-w]) / w


def optimize(q, box, target, iterations, n_samples, lr=1e-2, seed=0, threads=1,
             analytic_entropy=False, path_gradient=True, early_stop=False, callback=None):
    """Run the ascent loop; returns ``(q, trace, penalized_count)``."""
    opt = OptimizerState(lr=lr, decay_start=max(1, iterations // 2))
    trace = []
    npen_total = 0
    t0 = time.perf_counter()
    ex = ThreadPoolExecutor(max_workers=min(threads, n_samples)) if threads > 1 else None
    try:
        for it in range(iterations):
            q, opt, value, npen = elbo_step(q, box, target, n_samples, opt, seed, ex,
                                            analytic_entropy, path_gradient)
            npen_total += npen
            trace.append((it, value, time.perf_counter() - t0))
            if callback is not None:
                callback(it, q, value)
            if early_stop and it >= 400 and it % 50 == 0:
                ma = _moving_average([t[1] for t in trace], 200)
                prev, last = ma[-201], ma[-1]
                if abs(last - prev) < 1e-3 * abs(prev):
                    break
    finally:
        if ex is not None:
            ex.shutdown()
    return q, trace, npen_total


def run_psi(target: TargetLogDensity, box: BoundedBox, pattern: SparsityPattern | None = None,
            q_init: GaussianVariational | None = None, iterations: int = ITERATIONS,
            n_samples: int = PSI_SAMPLES, lr: float = 1e-2, seed: int = 0, threads: int = 1,
            analytic_entropy: bool = False, path_gradient: bool = True,
            early_stop: bool = False, init_std: float = 1.0):
    """Prior-specific inversion; returns ``(q_old, manifest)``.

    The variational dimension is the number of free cells of ``box``.
    """
    if iterations < 1 or n_samples < 1:
        raise ValueError("iterations and n_samples must be at least 1")
    if q_init is None:
        pattern = pattern or SparsityPattern(box.n_free, (0,))
        mu0 = box.unbounded_free(box.center()[box.free])
        q_init = GaussianVariational.initial(pattern, mu0, std=init_std)
    start_sims = COUNTER.value
    t0 = time.perf_counter()
    q, trace, npen = optimize(q_init, box, target, iterations, n_samples, lr, seed, threads,
                              analytic_entropy, path_gradient, early_stop)
    man = RunManifest(mode="psi", seed=seed, iterations=len(trace), samples=n_samples,
                      forward_sims=COUNTER.value - start_sims,
                      sims_per_eval=target.sims_per_eval, penalized_samples=npen,
                      final_elbo=trace[-1][1], wall_time=time.perf_counter() - t0, trace=trace)
    return q, man
