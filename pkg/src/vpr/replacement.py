"""Variational prior replacement.

Given ``q_old`` fitted under ``p_old``, the new posterior is approximated by
minimising ``KL(q_new || q_old * p_new / p_old)``.  The surrogate target only
touches ``q_old`` and the two priors, so no forward simulation is ever run.
The evidence ratio between the two problems is a constant and is never
computed.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, SupportError
from .forward import COUNTER
from .gaussian import LOG_2PI, GaussianVariational, StructuredCholesky
from .manifest import RunManifest
from .transforms import BoundedBox
from .vi import TargetLogDensity, optimize

CLAMP = 50.0
VPR_SAMPLES = 10


@dataclass
class SupportReport:
    ok: bool
    indices: list[int] = field(default_factory=list)
    message: str = ""

    def __bool__(self):
        return self.ok


def check_support(p_new, p_old) -> SupportReport:
    """The new prior's box must sit inside the old prior's box, cell by cell."""
    bn, bo = p_new.box, p_old.box
    if bn.n != bo.n:
        return SupportReport(False, [], f"dimension mismatch: new {bn.n}, old {bo.n}")
    bad = bn.fixed_mask != bo.fixed_mask
    free = ~bo.fixed_mask & ~bn.fixed_mask
    bad |= free & ((bn.lower < bo.lower) | (bn.upper > bo.upper))
    idx = np.flatnonzero(bad).tolist()
    if idx:
        head = ", ".join(str(i) for i in idx[:10])
        more = "" if len(idx) <= 10 else f" (+{len(idx) - 10} more)"
        return SupportReport(False, idx, "support rule violated: the new prior support must be a "
                                         f"subset of the old prior support; offending cells {head}{more}")
    return SupportReport(True)


@dataclass
class VprProblem:
    q_old: GaussianVariational
    box_old: BoundedBox
    p_old: object
    p_new: object
    clamp: float = CLAMP


def reference_model(problem: VprProblem) -> np.ndarray:
    """Physical image of ``q_old``'s mean, nudged inside the new box if needed."""
    box = problem.box_old
    m = box.fixed_values.copy()
    m[box.free] = box.physical_free(problem.q_old.mu)
    bn = problem.p_new.box
    lo, hi = bn.lower[bn.free], bn.upper[bn.free]
    m[bn.free] = np.clip(m[bn.free], np.nextafter(lo, hi), np.nextafter(hi, lo))
    return m


class VprTarget(TargetLogDensity):
    """``log q_old(m) + log p_new(m) - log p_old(m)`` in model space.

    ``log q_old(m)`` is the unbounded-space density at ``theta_old(m)`` minus the
    old log-Jacobian.  The division by ``p_old`` is guarded: ``log p_old`` is
    floored at ``clamp`` nats below its value at the reference model, and each
    sample that hits the floor is counted.  The floor moves with any additive
    constant in ``p_old``, so un-normalised priors give the same target.
    """

    def __init__(self, problem: VprProblem):
        self.problem = problem
        self.activations = 0
        self._lock = threading.Lock()
        self.identity = problem.p_new is problem.p_old
        lp_ref = float(problem.p_old.log_prob(reference_model(problem)))
        if not np.isfinite(lp_ref):
            raise SupportError("old prior vanishes at the old posterior mean", [])
        self.floor = lp_ref - problem.clamp
        super().__init__(self._evaluate, "vpr-target", 0)

    def _evaluate(self, m):
        pb = self.problem
        box, q = pb.box_old, pb.q_old
        m = np.asarray(m, dtype=np.float64)
        g = np.zeros(box.n)
        if not box.inside(m):
            return -np.inf, g
        lp_new, g_new = pb.p_new.log_prob_grad(m)
        if not np.isfinite(lp_new):
            return -np.inf, g

        mf = m[box.free]
        theta = box.unbounded_free(mf)
        y = q.chol.solve(theta - q.mu)
        logq = -0.5 * q.n * LOG_2PI - q.chol.log_det() - 0.5 * float(y @ y)
        dlogq = -q.chol.solve_transpose(y)
        logjac = float(np.sum(box.logjac_free(theta)))
        g[box.free] = (dlogq - box.dlogjac_dtheta(theta)) * box.dtheta_dm(mf)

        if self.identity:
            ratio = 0.0
        else:
            lp_old, g_old = pb.p_old.log_prob_grad(m)
            g = g + np.asarray(g_new)
            if lp_old < self.floor:
                with self._lock:
                    self.activations += 1
                lp_old = self.floor
            else:
                g = g - np.asarray(g_old)
            ratio = lp_new - lp_old
        g[box.fixed_mask] = 0.0
        return logq - logjac + ratio, g


def vpr_target(m, problem: VprProblem):
    return VprTarget(problem)(m)


def warm_start(q_old: GaussianVariational, box_old: BoundedBox, box_new: BoundedBox):
    """Re-express ``q_old`` in the unbounded coordinates of ``box_new``.

    The mean maps exactly; the factor is rescaled row-wise by the ratio of
    the two transforms' slopes at the mean (a linearisation).
    """
    if np.array_equal(box_old.lower, box_new.lower) and np.array_equal(box_old.upper, box_new.upper):
        return q_old.copy()
    m = box_old.physical_free(q_old.mu)
    lo, hi = box_new.lower[box_new.free], box_new.upper[box_new.free]
    m = np.clip(m, np.nextafter(lo, hi), np.nextafter(hi, lo))
    mu = box_new.unbounded_free(m)
    s = box_old.dm_dtheta(q_old.mu) / box_new.dm_dtheta(mu)
    chol = q_old.chol
    off = chol.offdiag.copy()
    for b, k in enumerate(q_old.pattern.offsets[1:], start=1):
        st = chol._starts[b]
        off[st:st + q_old.n - k] *= s[k:]
    return GaussianVariational(mu, StructuredCholesky(q_old.pattern, chol.raw_diag + np.log(s), off))


class WhitenedTarget(TargetLogDensity):
    """The replacement target pulled back through ``theta = mu_w + L_w z``.

    ``q_w`` is the warm start.  In ``z`` the old posterior is close to a
    standard normal, so the stiff directions of ``q_old`` no longer set the
    optimiser's step.  The value includes ``log |d m / d z|``.
    """

    def __init__(self, inner: VprTarget, q_w: GaussianVariational, box: BoundedBox):
        self.inner, self.q_w, self.box = inner, q_w, box
        self.log_det_w = q_w.chol.log_det()
        super().__init__(self._evaluate, "vpr-whitened", 0)

    def _evaluate(self, z):
        box, qw = self.box, self.q_w
        theta = qw.mu + qw.chol.matvec(np.asarray(z, dtype=np.float64))
        m = box.fixed_values.copy()
        m[box.free] = box.physical_free(theta)
        v, g = self.inner(m)
        if not np.isfinite(v):
            return -np.inf, np.zeros(qw.n)
        g_theta = np.asarray(g)[box.free] * box.dm_dtheta(theta) + box.dlogjac_dtheta(theta)
        value = v + float(np.sum(box.logjac_free(theta))) + self.log_det_w
        return value, qw.chol.rmatvec(g_theta)


def unwhiten(q_z: GaussianVariational, q_w: GaussianVariational) -> GaussianVariational:
    """Map a fit in whitened coordinates back; the factor becomes ``L_w L_z``."""
    return GaussianVariational(q_w.mu + q_w.chol.matvec(q_z.mu), q_w.chol.compose(q_z.chol))


def run_vpr(problem: VprProblem, iterations: int = 5000, n_samples: int = VPR_SAMPLES,
            lr: float = 1e-2, seed: int = 0, threads: int = 1, warm: bool = True,
            init_std: float = 1.0, analytic_entropy: bool = False, path_gradient: bool = True,
            early_stop: bool = False, whiten: bool = False):
    """Fit ``q_new`` over the new prior's box; returns ``(q_new, manifest)``.

    With ``whiten`` the fit runs in coordinates where the warm start is a
    standard normal.  ``q_new`` then carries the product factor, whose
    offsets are pairwise sums of the old pattern's offsets.

    Raises ``SupportError`` before doing any work if the support rule fails,
    and ``ContractViolation`` if a forward simulation was counted.
    """
    report = check_support(problem.p_new, problem.p_old)
    if not report:
        raise SupportError(report.message, report.indices)
    box_new = problem.p_new.box
    if warm:
        q0 = warm_start(problem.q_old, problem.box_old, box_new)
    else:
        mu0 = box_new.unbounded_free(box_new.center()[box_new.free])
        q0 = GaussianVariational.initial(problem.q_old.pattern, mu0, std=init_std)
    target = VprTarget(problem)
    start_sims = COUNTER.value
    t0 = time.perf_counter()
    if whiten:
        n = q0.n
        q_z = GaussianVariational.initial(q0.pattern, np.zeros(n), std=1.0)
        q_z, trace, npen = optimize(q_z, BoundedBox.unbounded(n), WhitenedTarget(target, q0, box_new),
                                    iterations, n_samples, lr, seed, threads, analytic_entropy,
                                    path_gradient, early_stop)
        q = unwhiten(q_z, q0)
    else:
        q, trace, npen = optimize(q0, box_new, target, iterations, n_samples, lr, seed, threads,
                                  analytic_entropy, path_gradient, early_stop)
    sims = COUNTER.value - start_sims
    man = RunManifest(mode="vpr", seed=seed, iterations=len(trace), samples=n_samples,
                      forward_sims=sims, sims_per_eval=0, clamp_activations=target.activations,
                      penalized_samples=npen, final_elbo=trace[-1][1],
                      wall_time=time.perf_counter() - t0, trace=trace)
    if target.activations:
        man.warnings.append(f"old-prior floor ({problem.clamp} nats) activated "
                            f"{target.activations} times")
    if sims != 0:
        raise ContractViolation(f"prior replacement ran {sims} forward simulations; expected 0")
    return q, man
