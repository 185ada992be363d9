"""Posterior summaries and independent oracles.

Summaries are computed from samples pushed to physical space.  The oracles
(conjugate linear-Gaussian posterior, brute-force grid posterior, closed-form
Gaussian KL) do not share code with the variational engines.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DegenerateDataError, DimensionError, DomainError, SizeError
from .gaussian import GaussianVariational, densify
from .transforms import BoundedBox

N_SUMMARY = 2000
_CHUNK = 1024


def _sample_physical(q: GaussianVariational, box: BoundedBox, n_samples: int, seed: int):
    """Yield chunks of physical-space samples; the draw order is fixed by ``seed``."""
    rng = np.random.default_rng(seed)
    done = 0
    while done < n_samples:
        k = min(_CHUNK, n_samples - done)
        eps = rng.standard_normal((k, q.n))
        theta = q.mu + q.chol.matvec(eps)
        m = np.broadcast_to(box.fixed_values, (k, box.n)).copy()
        m[:, box.free] = box.physical_free(theta)
        yield m
        done += k


@dataclass
class EnsembleSummary:
    mean: np.ndarray
    std: np.ndarray
    n_samples: int
    histograms: dict = field(default_factory=dict)
    correlation: np.ndarray | None = None


def ensemble_stats(q, box, n_samples: int = N_SUMMARY, seed: int = 0) -> EnsembleSummary:
    """Per-cell mean and unbiased standard deviation in physical space."""
    if n_samples < 2:
        raise ValueError("ensemble statistics need at least 2 samples")
    shift = box.fixed_values.copy()
    shift[box.free] = box.physical_free(q.mu)
    s1 = np.zeros(box.n)
    s2 = np.zeros(box.n)
    for m in _sample_physical(q, box, n_samples, seed):
        d = m - shift
        s1 += d.sum(axis=0)
        s2 += (d * d).sum(axis=0)
    mean_d = s1 / n_samples
    var = np.maximum(s2 - n_samples * mean_d ** 2, 0.0) / (n_samples - 1)
    return EnsembleSummary(shift + mean_d, np.sqrt(var), n_samples)


def relative_error_map(mean, truth, std, mask=None) -> np.ndarray:
    """``|mean - truth| / std``; cells where ``mask`` is False are skipped (set to 0)."""
    mean, truth, std = (np.asarray(a, dtype=np.float64) for a in (mean, truth, std))
    if not (mean.shape == truth.shape == std.shape):
        raise DimensionError("mean, truth and std must share a shape")
    sel = np.ones(mean.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    zero = sel & ~(std > 0)
    if np.any(zero):
        cell = tuple(int(i) for i in np.argwhere(zero)[0])
        raise DomainError(f"zero standard deviation at cell {cell}")
    out = np.zeros(mean.shape)
    out[sel] = np.abs(mean[sel] - truth[sel]) / std[sel]
    return out


@dataclass
class Histogram:
    cell: int
    edges: np.ndarray
    probs: np.ndarray


def marginal_histograms(q, box, cells, bins: int = 50, n_samples: int = N_SUMMARY, seed: int = 0,
                        ranges=None) -> list[Histogram]:
    """Normalised per-cell histograms over ``[a_i, b_i]``.

    Unbounded cells need an explicit entry in ``ranges`` (``{cell: (lo, hi)}``),
    otherwise the sample range is used.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    cells = [int(c) for c in cells]
    for c in cells:
        if not 0 <= c < box.n:
            raise IndexError(f"cell {c} out of range for dimension {box.n}")
    samples = np.concatenate([m[:, cells] for m in _sample_physical(q, box, n_samples, seed)])
    out = []
    for j, c in enumerate(cells):
        lo, hi = box.lower[c], box.upper[c]
        if ranges and c in ranges:
            lo, hi = ranges[c]
        elif not (np.isfinite(lo) and np.isfinite(hi)):
            lo, hi = samples[:, j].min(), samples[:, j].max()
            if hi <= lo:
                lo, hi = lo - 0.5, hi + 0.5
        counts, edges = np.histogram(samples[:, j], bins=bins, range=(lo, hi))
        out.append(Histogram(c, edges, counts / max(counts.sum(), 1)))
    return out


def window_cells(nx: int, z0: int, x0: int, height: int, width: int) -> np.ndarray:
    """Flat row-major indices of a rectangular window."""
    zz, xx = np.meshgrid(np.arange(z0, z0 + height), np.arange(x0, x0 + width), indexing="ij")
    return (zz * nx + xx).ravel()


def correlation_submatrix(q, box, cells, n_samples: int = N_SUMMARY, seed: int = 0) -> np.ndarray:
    cells = np.asarray(cells, dtype=np.int64)
    if np.any((cells < 0) | (cells >= box.n)):
        raise IndexError("window cell out of range")
    X = np.concatenate([m[:, cells] for m in _sample_physical(q, box, n_samples, seed)])
    Xc = X - X.mean(axis=0)
    var = np.einsum("ij,ij->j", Xc, Xc)
    if np.any(var <= 0):
        raise DegenerateDataError(f"zero variance at cell {int(cells[np.flatnonzero(var <= 0)[0]])}")
    sd = np.sqrt(var)
    C = (Xc.T @ Xc) / np.outer(sd, sd)
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    return C


# -- oracles ---------------------------------------------------------------------------------
@dataclass
class GaussianPosterior:
    mean: np.ndarray
    cov: np.ndarray
    log_evidence: float


def analytic_gaussian_posterior(G, sigma_d, mu0, Sigma0, d_obs) -> GaussianPosterior:
    """Conjugate posterior of ``d = G m + N(0, sigma_d^2 I)`` under ``m ~ N(mu0, Sigma0)``."""
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    mu0 = np.asarray(mu0, dtype=np.float64)
    Sigma0 = np.atleast_2d(np.asarray(Sigma0, dtype=np.float64))
    d = np.asarray(d_obs, dtype=np.float64)
    k, n = G.shape
    try:
        c0 = cho_factor(Sigma0, lower=True)
        prec = cho_solve(c0, np.eye(n)) + G.T @ G / sigma_d ** 2
        cp = cho_factor(prec, lower=True)
        cov = cho_solve(cp, np.eye(n))
        mean = cov @ (cho_solve(c0, mu0) + G.T @ d / sigma_d ** 2)
        # evidence: d ~ N(G mu0, G Sigma0 G^T + sigma^2 I)
        S = G @ Sigma0 @ G.T + sigma_d ** 2 * np.eye(k)
        cs = cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular conjugate system: {exc}") from None
    r = d - G @ mu0
    logdet = 2.0 * np.sum(np.log(np.diag(cs[0])))
    log_ev = -0.5 * (k * np.log(2 * np.pi) + logdet + r @ cho_solve(cs, r))
    return GaussianPosterior(mean, 0.5 * (cov + cov.T), float(log_ev))


@dataclass
class GridPosterior:
    axes: list
    table: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    corr: np.ndarray


def _trapz_weights(x):
    x = np.asarray(x, dtype=np.float64)
    w = np.zeros_like(x)
    dx = np.diff(x)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return w


def grid_brute_posterior(log_target, axes) -> GridPosterior:
    """Normalise ``exp(log_target)`` on a tensor grid (1D or 2D) by the trapezoid rule.

    ``log_target`` is called with one point (a length-``dim`` array) at a time.
    """
    axes = [np.asarray(a, dtype=np.float64) for a in axes]
    dim = len(axes)
    if dim not in (1, 2):
        raise DimensionError("grid posterior supports 1 or 2 dimensions")
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    lp = np.array([log_target(p) for p in pts], dtype=np.float64).reshape(mesh[0].shape)
    if not np.any(np.isfinite(lp)):
        raise DegenerateDataError("log target is -inf on the whole grid")
    p = np.exp(lp - np.max(lp[np.isfinite(lp)]))
    w = _trapz_weights(axes[0]) if dim == 1 else np.outer(_trapz_weights(axes[0]), _trapz_weights(axes[1]))
    table = p / np.sum(w * p)
    mass = w * table
    mean = np.array([np.sum(mass * g) for g in mesh])
    cov = np.array([[np.sum(mass * (gi - mean[i]) * (gj - mean[j])) for j, gj in enumerate(mesh)]
                    for i, gi in enumerate(mesh)])
    std = np.sqrt(np.diag(cov))
    return GridPosterior(axes, table, mean, std, cov / np.outer(std, std))


def _moments(q):
    if isinstance(q, GaussianVariational):
        if q.n > 4096:
            raise SizeError(f"dimension {q.n} too large for a dense KL")
        L = densify(q.chol)
        return q.mu, L @ L.T
    mu, cov = q
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    if mu.size > 4096:
        raise SizeError(f"dimension {mu.size} too large for a dense KL")
    return mu, np.atleast_2d(np.asarray(cov, dtype=np.float64))


def gaussian_kl(q1, q2) -> float:
    """``KL(q1 || q2)`` for Gaussians given as variational objects or ``(mean, cov)`` pairs."""
    mu1, S1 = _moments(q1)
    mu2, S2 = _moments(q2)
    if mu1.shape != mu2.shape:
        raise DimensionError("distributions differ in dimension")
    n = mu1.size
    c2 = cho_factor(S2, lower=True)
    c1 = cho_factor(S1, lower=True)
    dm = mu2 - mu1
    tr = np.trace(cho_solve(c2, S1))
    quad = dm @ cho_solve(c2, dm)
    logdet2 = 2.0 * np.sum(np.log(np.diag(c2[0])))
    logdet1 = 2.0 * np.sum(np.log(np.diag(c1[0])))
    return float(max(0.5 * (tr + quad - n + logdet2 - logdet1), 0.0))


@dataclass
class ButterflyComparison:
    interleaved: np.ndarray   # [n_src][2 n_rec][nt], predicted then observed per receiver
    rms: np.ndarray           # [n_src][n_rec] root-mean-square residual per trace


def butterfly_compare(d_pred, d_obs) -> ButterflyComparison:
    d_pred = np.asarray(d_pred, dtype=np.float64)
    d_obs = np.asarray(d_obs, dtype=np.float64)
    if d_pred.shape != d_obs.shape:
        raise DimensionError(f"shape mismatch {d_pred.shape} vs {d_obs.shape}")
    inter = np.empty(d_pred.shape[:-2] + (2 * d_pred.shape[-2], d_pred.shape[-1]))
    inter[..., 0::2, :] = d_pred
    inter[..., 1::2, :] = d_obs
    rms = np.sqrt(np.mean((d_pred - d_obs) ** 2, axis=-1))
    return ButterflyComparison(inter, rms)
