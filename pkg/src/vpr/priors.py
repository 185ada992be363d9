"""Prior families over gridded velocity models.

All log-densities are unnormalised: normalising constants and truncation
masses do not depend on the model and are dropped.  Every prior carries the
box it is supported on; outside that box it evaluates to ``-inf``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

from .errors import DegenerateDataError, DimensionError, NotSPDError, SizeError
from .transforms import BoundedBox

SIGMA2_SMOOTH = 500.0
WINDOW = 20
N_SUBIMAGES = 1000


def log_uniform(m: np.ndarray, box: BoundedBox) -> float:
    return 0.0 if box.inside(m) else -np.inf


@dataclass
class SmoothingOperator:
    """Second-difference operator along both grid axes (no wraparound).

    Output rows are the horizontal differences of every row followed by the
    vertical differences of every column, each scaled by its axis weight.
    """

    nz: int
    nx: int
    weights: tuple[float, float] = (1.0, 1.0)

    @property
    def n(self) -> int:
        return self.nz * self.nx

    def apply(self, m: np.ndarray) -> np.ndarray:
        m = np.asarray(m, dtype=np.float64)
        if m.size != self.n:
            raise DimensionError(f"field has {m.size} values, grid is {self.nz}x{self.nx}")
        g = m.reshape(self.nz, self.nx)
        wx, wz = self.weights
        dxx = wx * (g[:, :-2] - 2.0 * g[:, 1:-1] + g[:, 2:])
        dzz = wz * (g[:-2, :] - 2.0 * g[1:-1, :] + g[2:, :])
        return np.concatenate([dxx.ravel(), dzz.ravel()])

    def apply_transpose(self, r: np.ndarray) -> np.ndarray:
        wx, wz = self.weights
        nhx = self.nz * max(self.nx - 2, 0)
        rx = r[:nhx].reshape(self.nz, max(self.nx - 2, 0)) * wx
        rz = r[nhx:].reshape(max(self.nz - 2, 0), self.nx) * wz
        out = np.zeros((self.nz, self.nx))
        out[:, :-2] += rx
        out[:, 1:-1] -= 2.0 * rx
        out[:, 2:] += rx
        out[:-2, :] += rz
        out[1:-1, :] -= 2.0 * rz
        out[2:, :] += rz
        return out.ravel()


def apply_smoothing(S: SmoothingOperator, m: np.ndarray) -> np.ndarray:
    return S.apply(m)


def log_smoothed_prior(m, S: SmoothingOperator, sigma2_Sm: float, box: BoundedBox,
                       base=None) -> float:
    """Smoothness penalty ``-0.5 |Sm|^2 / sigma2_Sm`` times a base prior.

    ``base`` defaults to the uniform prior over ``box``; pass another prior
    object (e.g. a diagonal Gaussian) to smooth that instead.
    """
    lb = log_uniform(m, box) if base is None else base.log_prob(m)
    if not np.isfinite(lb):
        return -np.inf
    r = S.apply(m)
    return float(-0.5 * (r @ r) / sigma2_Sm + lb)


def log_diag_gaussian(m, mu, std, box: BoundedBox) -> float:
    if not box.inside(m):
        return -np.inf
    f = box.free
    z = (np.asarray(m)[f] - np.asarray(mu)[f]) / np.asarray(std)[f]
    return float(-0.5 * z @ z)


# -- prior objects --------------------------------------------------------------
class UniformPrior:
    def __init__(self, box: BoundedBox):
        self.box = box

    def log_prob(self, m) -> float:
        return log_uniform(m, self.box)

    def log_prob_grad(self, m):
        return self.log_prob(m), np.zeros(self.box.n)


class DiagonalGaussianPrior:
    """Independent Gaussians per cell, truncated to ``box``."""

    def __init__(self, mu, std, box: BoundedBox):
        self.mu = np.asarray(mu, dtype=np.float64).ravel()
        self.std = np.asarray(std, dtype=np.float64).ravel()
        self.box = box
        if np.any(self.std[box.free] <= 0):
            raise ValueError("standard deviations must be positive")

    @classmethod
    def from_box(cls, box: BoundedBox) -> "DiagonalGaussianPrior":
        """Mean and std of the uniform distribution over ``box``."""
        return cls(box.center(), box.uniform_std(), box)

    def log_prob(self, m) -> float:
        return log_diag_gaussian(m, self.mu, self.std, self.box)

    def log_prob_grad(self, m):
        g = np.zeros(self.box.n)
        if not self.box.inside(m):
            return -np.inf, g
        f = self.box.free
        z = (np.asarray(m)[f] - self.mu[f]) / self.std[f]
        g[f] = -z / self.std[f]
        return float(-0.5 * z @ z), g


class SmoothedPrior:
    def __init__(self, smoother: SmoothingOperator, sigma2: float = SIGMA2_SMOOTH, base=None,
                 box: BoundedBox | None = None):
        if base is None:
            if box is None:
                raise ValueError("either a base prior or a box is required")
            base = UniformPrior(box)
        self.base = base
        self.smoother = smoother
        self.sigma2 = float(sigma2)
        self.box = base.box
        if smoother.n != self.box.n:
            raise DimensionError("smoothing grid does not match the box dimension")

    def log_prob(self, m) -> float:
        return log_smoothed_prior(m, self.smoother, self.sigma2, self.box, base=self.base)

    def log_prob_grad(self, m):
        lb, g = self.base.log_prob_grad(m)
        if not np.isfinite(lb):
            return -np.inf, np.zeros(self.box.n)
        r = self.smoother.apply(m)
        g = g - self.smoother.apply_transpose(r) / self.sigma2
        g[self.box.fixed_mask] = 0.0
        return float(lb - 0.5 * (r @ r) / self.sigma2), g


# -- windowed geological Gaussian ---------------------------------------------------
@dataclass
class LocalCorrelation:
    window: int
    matrix: np.ndarray
    n_samples: int


def build_local_correlation(images, w: int = WINDOW, n_subimages: int = N_SUBIMAGES,
                            seed: int = 0) -> LocalCorrelation:
    """Empirical correlation of randomly placed ``w x w`` windows.

    ``n_subimages`` windows are drawn from each image.  Each image is first
    standardised by its own mean and standard deviation so that pictures with
    different brightness and contrast pool on one scale; every window is then
    flattened row-major and the sample correlation across windows is taken.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for k, img in enumerate(images):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 2 or img.shape[0] < w or img.shape[1] < w:
            raise SizeError(f"image {k} with shape {img.shape} is smaller than the {w}x{w} window")
        s = img.std()
        img = (img - img.mean()) / (s if s > 0 else 1.0)
        iz = rng.integers(0, img.shape[0] - w + 1, size=n_subimages)
        ix = rng.integers(0, img.shape[1] - w + 1, size=n_subimages)
        for z0, x0 in zip(iz, ix):
            rows.append(img[z0:z0 + w, x0:x0 + w].ravel())
    X = np.array(rows)
    Xc = X - X.mean(axis=0)
    var = np.einsum("ij,ij->j", Xc, Xc)
    if np.any(var <= 1e-12 * max(var.max(), 1.0)):
        bad = int(np.flatnonzero(var <= 1e-12 * max(var.max(), 1.0))[0])
        raise DegenerateDataError(f"zero sample variance at window pixel {bad}")
    sd = np.sqrt(var)
    R = (Xc.T @ Xc) / np.outer(sd, sd)
    R = np.clip(0.5 * (R + R.T), -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return LocalCorrelation(w, R, len(rows))


def offset_average(R_local: np.ndarray, w: int) -> np.ndarray:
    """Average of ``R_local`` entries per 2D offset; returns a ``(2w-1, 2w-1)`` table.

    Entry ``[dz + w - 1, dx + w - 1]`` holds the mean correlation between
    window pixels separated by ``(dz, dx)``.
    """
    R_local = np.asarray(R_local, dtype=np.float64)
    if R_local.shape != (w * w, w * w):
        raise DimensionError(f"R_local must be {w * w}x{w * w} for window {w}")
    pz, px = np.divmod(np.arange(w * w), w)
    dz = pz[None, :] - pz[:, None] + w - 1
    dx = px[None, :] - px[:, None] + w - 1
    tot = np.zeros((2 * w - 1, 2 * w - 1))
    cnt = np.zeros_like(tot)
    np.add.at(tot, (dz, dx), R_local)
    np.add.at(cnt, (dz, dx), 1.0)
    return tot / cnt


class WindowedGaussianPrior:
    """Gaussian with banded covariance ``D R D`` truncated to ``box``.

    Only free cells of ``box`` enter the Gaussian; the covariance is stored in
    LAPACK lower-banded form together with its banded Cholesky factor.
    """

    def __init__(self, mu, std, band: np.ndarray, nz: int, nx: int, box: BoundedBox,
                 jitter: float = 0.0, chol_band: np.ndarray | None = None):
        self.mu = np.asarray(mu, dtype=np.float64).ravel()
        self.std = np.asarray(std, dtype=np.float64).ravel()
        self.band = band
        self.nz, self.nx = nz, nx
        self.box = box
        self.jitter = jitter
        self.chol_band = chol_band if chol_band is not None else cholesky_banded(band, lower=True)

    @property
    def bandwidth(self) -> int:
        return self.band.shape[0] - 1

    def dense_covariance(self) -> np.ndarray:
        n = self.band.shape[1]
        if n > 4096:
            raise SizeError("covariance too large to densify")
        C = np.zeros((n, n))
        for k in range(self.band.shape[0]):
            idx = np.arange(n - k)
            C[idx + k, idx] = self.band[k, :n - k]
            C[idx, idx + k] = self.band[k, :n - k]
        return C

    def log_prob_grad(self, m):
        g = np.zeros(self.box.n)
        if not self.box.inside(m):
            return -np.inf, g
        f = self.box.free
        r = np.asarray(m, dtype=np.float64)[f] - self.mu[f]
        x = cho_solve_banded((self.chol_band, True), r)
        g[f] = -x
        return float(-0.5 * r @ x), g

    def log_prob(self, m) -> float:
        return self.log_prob_grad(m)[0]


def assemble_windowed_covariance(R_local: np.ndarray, std: np.ndarray, nz: int, nx: int,
                                 box: BoundedBox | None = None, mu: np.ndarray | None = None,
                                 max_jitter: float = 1e-2) -> WindowedGaussianPrior:
    """Spread a local window correlation over an ``nz x nx`` grid.

    Cell pairs closer than the window size in both directions get the
    offset-averaged correlation; all other pairs are uncorrelated.  Jitter
    (relative to the mean variance) is added until the banded Cholesky
    factorisation succeeds.
    """
    R_local = np.asarray(R_local, dtype=np.float64)
    w = int(round(np.sqrt(R_local.shape[0])))
    table = offset_average(R_local, w)
    n = nz * nx
    std = np.asarray(std, dtype=np.float64).ravel()
    if std.size != n:
        raise DimensionError(f"std has {std.size} entries, grid has {n}")
    if box is None:
        box = BoundedBox.unbounded(n)
    if mu is None:
        mu = box.center()
    free = box.free
    if np.any(std[free] <= 0):
        raise ValueError("standard deviations must be positive")
    index = -np.ones(n, dtype=np.int64)
    index[free] = np.arange(free.size)
    cz, cx = np.divmod(free, nx)
    s_free = std[free]

    pairs = []
    kmax = 0
    for dz in range(0, w):
        for dx in range(-(w - 1), w):
            if dz == 0 and dx <= 0:
                continue
            qz, qx = cz + dz, cx + dx
            ok = (qz < nz) & (qx >= 0) & (qx < nx)
            p = np.flatnonzero(ok)
            q = index[qz[ok] * nx + qx[ok]]
            keep = q >= 0
            p, q = p[keep], q[keep]
            if p.size == 0:
                continue
            val = table[dz + w - 1, dx + w - 1] * s_free[p] * s_free[q]
            lo, hi = np.minimum(p, q), np.maximum(p, q)
            kmax = max(kmax, int((hi - lo).max()))
            pairs.append((lo, hi, val))
    nf = free.size
    band = np.zeros((kmax + 1, nf))
    band[0] = s_free ** 2 * table[w - 1, w - 1]
    for lo, hi, val in pairs:
        band[hi - lo, lo] = val

    mean_var = float(np.mean(band[0]))
    jitter = 0.0
    for eps in [0.0] + [10.0 ** e for e in range(-10, 0)]:
        jitter = eps * mean_var
        if jitter > max_jitter * mean_var:
            break
        trial = band.copy()
        trial[0] += jitter
        try:
            cb = cholesky_banded(trial, lower=True)
        except LinAlgError:
            continue
        return WindowedGaussianPrior(mu, std, trial, nz, nx, box, jitter=jitter, chol_band=cb)
    raise NotSPDError(f"windowed covariance not SPD even with jitter {max_jitter} x mean variance")


def log_windowed_gaussian(m, prior: WindowedGaussianPrior) -> float:
    return prior.log_prob(m)
