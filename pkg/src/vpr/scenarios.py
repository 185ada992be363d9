"""Small reference problems used by the oracle command and the test-suite.

``conjugate_problem`` is a linear-Gaussian inverse problem with a closed-form
posterior.  ``desk_fwi`` is a reduced acoustic FWI setup: a water layer over
a gently folded, layered sediment model with a handful of surface shots.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import AcousticForward, AcousticSolver, LinearForward, Survey, ricker
from .gaussian import SparsityPattern
from .priors import DiagonalGaussianPrior, SmoothedPrior, SmoothingOperator, UniformPrior
from .transforms import BoundedBox


@dataclass
class ConjugateProblem:
    G: np.ndarray
    sigma_d: float
    d_obs: np.ndarray
    truth: np.ndarray
    box: BoundedBox
    prior_a: DiagonalGaussianPrior
    prior_b: DiagonalGaussianPrior

    @property
    def forward(self) -> LinearForward:
        return LinearForward(self.G, self.d_obs, self.sigma_d)


def conjugate_problem(n: int = 10, k: int = 12, sigma_d: float = 1.0, std_a: float = 1.5,
                      mean_b: float = 0.3, std_b: float = 0.75, seed: int = 0) -> ConjugateProblem:
    """Unbounded ``d = G m + noise`` with two diagonal Gaussian priors A (wide) and B (tight)."""
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((k, n)) / np.sqrt(n)
    truth = rng.standard_normal(n)
    d_obs = G @ truth + sigma_d * rng.standard_normal(k)
    box = BoundedBox.unbounded(n)
    pa = DiagonalGaussianPrior(np.zeros(n), np.full(n, std_a), box)
    pb = DiagonalGaussianPrior(np.full(n, mean_b), np.full(n, std_b), box)
    return ConjugateProblem(G, sigma_d, d_obs, truth, box, pa, pb)


@dataclass
class DeskFWI:
    nz: int
    nx: int
    dx: float
    truth: np.ndarray          # (nz, nx)
    water: np.ndarray          # (nz, nx) bool
    survey: Survey
    solver: AcousticSolver
    d_obs: np.ndarray
    sigma_d: float
    box: BoundedBox

    @property
    def forward(self) -> AcousticForward:
        return AcousticForward(self.solver, self.d_obs, self.sigma_d)

    def pattern(self, width: int = 3) -> SparsityPattern:
        rows = int(np.sum(~self.water.all(axis=1)))
        return SparsityPattern.for_grid(rows, self.nx, width=width, n=self.box.n_free)

    def uniform_prior(self) -> UniformPrior:
        return UniformPrior(self.box)

    def gaussian_prior(self) -> DiagonalGaussianPrior:
        return DiagonalGaussianPrior.from_box(self.box)

    def smoothed(self, base=None, sigma2: float | None = None) -> SmoothedPrior:
        S = SmoothingOperator(self.nz, self.nx)
        kw = {} if sigma2 is None else {"sigma2": sigma2}
        return SmoothedPrior(S, base=base, box=self.box, **kw)


def desk_truth(nz: int = 20, nx: int = 40, water_rows: int = 2) -> np.ndarray:
    z = np.arange(nz)[:, None]
    x = np.arange(nx)[None, :]
    v = 1800.0 + 60.0 * (z - water_rows) + 150.0 * np.sin(2 * np.pi * x / nx) * (z > 8 * nz / 20)
    v = v + 300.0 * (z >= 13 * nz // 20)
    v[:water_rows] = 1500.0
    return np.asarray(v, dtype=np.float64)


def desk_fwi(nz: int = 20, nx: int = 40, dx: float = 20.0, nt: int = 300, dt: float = 0.002,
             f0: float = 10.0, amplitude: float = 3.0, sigma_d: float = 0.1, sponge: int = 10,
             water_rows: int = 2, sources=None, noise_seed: int = 0, threads: int = 1) -> DeskFWI:
    truth = desk_truth(nz, nx, water_rows)
    water = np.zeros((nz, nx), dtype=bool)
    water[:water_rows] = True
    if sources is None:
        sources = [[0, int(round(f * (nx - 1)))] for f in (0.15, 0.5, 0.85)]
    receivers = [[water_rows, j] for j in range(nx)]
    survey = Survey(sources, receivers, dt, nt, amplitude * ricker(f0, dt, nt))
    survey.check_grid(nz, nx)
    solver = AcousticSolver(nz, nx, dx, survey, sponge=sponge, threads=threads, water_mask=water)
    clean = solver.simulate(truth)
    rng = np.random.default_rng(noise_seed)
    d_obs = clean + sigma_d * rng.standard_normal(clean.shape)

    depth = np.arange(nz)
    trend = 1800.0 + 60.0 * (depth - water_rows)
    lower = np.maximum(trend - 500.0, 1400.0)
    upper = trend + 700.0
    fixed_vals = np.where(water, truth, 0.0).ravel()
    box = BoundedBox(np.repeat(lower, nx), np.repeat(upper, nx),
                     fixed_mask=water.ravel(), fixed_values=fixed_vals)
    return DeskFWI(nz, nx, dx, truth, water, survey, solver, d_obs, sigma_d, box)
