"""Forward operators, likelihood and the global forward-simulation counter.

The acoustic solver advances the constant-density wave equation with a
second-order leapfrog in time and a fourth-order Laplacian in space.  An
exponential sponge surrounds the model on all four sides:

    u[n+1] = D * (2 u[n] - D u[n-1] + K * lap(u[n]) + f[n])

with ``K = (v dt / dx)^2`` and damping ``D`` (1 inside the model).  The
gradient is the exact discrete adjoint of this recursion, so it agrees with
finite differences of the simulated data up to rounding.
"""
from __future__ import annotations

import math
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import DimensionError, FormatError, StabilityError

# (v dt / dx)^2 * 32/3 <= 4 for the 2D fourth-order stencil
CFL_MAX = math.sqrt(3.0 / 8.0)
SIGMA_D = 0.1
F0 = 10.0
DT = 0.002


class SimulationCounter:
    """Thread-safe count of forward-equivalent simulations."""

    def __init__(self):
        self._lock = threading.Lock()
        self._value = 0

    def add(self, k: int = 1) -> None:
        with self._lock:
            self._value += int(k)

    @property
    def value(self) -> int:
        with self._lock:
            return self._value

    def reset(self) -> None:
        with self._lock:
            self._value = 0


COUNTER = SimulationCounter()


def ricker(f0: float = F0, dt: float = DT, nt: int = 500, t0: float | None = None) -> np.ndarray:
    """Ricker wavelet with unit peak at ``t0`` (default ``1.5 / f0``)."""
    if f0 <= 0:
        raise ValueError("f0 must be positive")
    t0 = 1.5 / f0 if t0 is None else t0
    if t0 < 0:
        raise ValueError("t0 must be non-negative")
    a = (math.pi * f0 * (np.arange(nt) * dt - t0)) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def log_likelihood(d_syn, d_obs, sigma_d: float = SIGMA_D) -> float:
    r = (np.asarray(d_syn, dtype=np.float64) - np.asarray(d_obs, dtype=np.float64)) / sigma_d
    return float(-0.5 * np.sum(r * r))


# -- linear oracle model ---------------------------------------------------------
def linear_forward(G, m) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if G.ndim != 2 or G.shape[1] != m.size:
        raise DimensionError(f"G has shape {G.shape}, model has {m.size} entries")
    COUNTER.add(1)
    return G @ m


def linear_misfit_gradient(G, m, d_obs, sigma_d: float):
    """Misfit ``0.5 |(Gm - d)/sigma|^2`` and its gradient ``G^T (Gm - d) / sigma^2``."""
    d = linear_forward(G, m)
    d_obs = np.asarray(d_obs, dtype=np.float64)
    if d_obs.shape != d.shape:
        raise DimensionError(f"data has shape {d_obs.shape}, prediction has {d.shape}")
    r = d - d_obs
    return float(0.5 * r @ r / sigma_d ** 2), np.asarray(G).T @ r / sigma_d ** 2


class LinearForward:
    """``m -> (misfit, gradient)`` for ``d = G m`` with i.i.d. Gaussian noise."""

    def __init__(self, G, d_obs, sigma_d: float):
        self.G = np.asarray(G, dtype=np.float64)
        self.d_obs = np.asarray(d_obs, dtype=np.float64)
        self.sigma_d = float(sigma_d)
        self.sims_per_eval = 1

    def misfit_grad(self, m):
        return linear_misfit_gradient(self.G, m, self.d_obs, self.sigma_d)

    def predict(self, m):
        return linear_forward(self.G, m)


# -- acoustic FDTD ---------------------------------------------------------------------
@dataclass
class Survey:
    """Acquisition geometry in cell indices ``(iz, ix)`` plus the source wavelet."""

    sources: np.ndarray
    receivers: np.ndarray
    dt: float
    nt: int
    wavelet: np.ndarray

    def __post_init__(self):
        self.sources = np.atleast_2d(np.asarray(self.sources, dtype=np.int64))
        self.receivers = np.atleast_2d(np.asarray(self.receivers, dtype=np.int64))
        self.wavelet = np.asarray(self.wavelet, dtype=np.float64)
        if self.dt <= 0 or self.nt <= 0:
            raise ValueError("dt and nt must be positive")
        if self.wavelet.shape != (self.nt,):
            raise DimensionError(f"wavelet has {self.wavelet.size} samples, nt={self.nt}")

    @property
    def n_src(self) -> int:
        return len(self.sources)

    @property
    def n_rec(self) -> int:
        return len(self.receivers)

    def check_grid(self, nz: int, nx: int) -> None:
        for name, pos in (("source", self.sources), ("receiver", self.receivers)):
            bad = (pos[:, 0] < 0) | (pos[:, 0] >= nz) | (pos[:, 1] < 0) | (pos[:, 1] >= nx)
            if np.any(bad):
                raise DimensionError(f"{name} {pos[np.flatnonzero(bad)[0]].tolist()} "
                                     f"outside the {nz}x{nx} grid")


@dataclass
class WaveformData:
    data: np.ndarray
    sigma_d: float = SIGMA_D
    dt: float = DT

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DimensionError("waveform data must be [n_src][n_rec][nt]")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("waveform data contains non-finite samples")
        if self.sigma_d <= 0:
            raise ValueError("sigma_d must be positive")


@dataclass
class VelocityField:
    values: np.ndarray
    dx: float
    water_mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError("velocity must be a 2D (nz, nx) array")
        if self.water_mask is None:
            self.water_mask = np.zeros(self.values.shape, dtype=bool)
        self.water_mask = np.asarray(self.water_mask, dtype=bool).reshape(self.values.shape)
        if np.any(self.values <= 0):
            raise ValueError("velocities must be positive")

    @property
    def shape(self):
        return self.values.shape


_C0, _C1, _C2 = -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0


@numba.njit(cache=True, nogil=True)
def _lap(u, out):
    nz, nx = u.shape
    for i in range(nz):
        for j in range(nx):
            s = 2.0 * _C0 * u[i, j]
            if i >= 1:
                s += _C1 * u[i - 1, j]
            if i >= 2:
                s += _C2 * u[i - 2, j]
            if i + 1 < nz:
                s += _C1 * u[i + 1, j]
            if i + 2 < nz:
                s += _C2 * u[i + 2, j]
            if j >= 1:
                s += _C1 * u[i, j - 1]
            if j >= 2:
                s += _C2 * u[i, j - 2]
            if j + 1 < nx:
                s += _C1 * u[i, j + 1]
            if j + 2 < nx:
                s += _C2 * u[i, j + 2]
            out[i, j] = s


@numba.njit(cache=True, nogil=True)
def _fdtd_forward(kappa, damp, sz, sx, wav, rz, rx, nt, lap_store, store, inner):
    nz, nx = kappa.shape
    prev = np.zeros((nz, nx))
    cur = np.zeros((nz, nx))
    nxt = np.zeros((nz, nx))
    lap = np.zeros((nz, nx))
    rec = np.zeros((rz.shape[0], nt))
    energy = np.zeros(nt)
    z0, z1, x0, x1 = inner[0], inner[1], inner[2], inner[3]
    for n in range(nt):
        if store:
            lap = lap_store[n]
        _lap(cur, lap)
        for i in range(nz):
            for j in range(nx):
                d = damp[i, j]
                nxt[i, j] = d * (2.0 * cur[i, j] - d * prev[i, j] + kappa[i, j] * lap[i, j])
        nxt[sz, sx] += damp[sz, sx] * wav[n]
        for r in range(rz.shape[0]):
            rec[r, n] = nxt[rz[r], rx[r]]
        e = 0.0
        for i in range(z0, z1):
            for j in range(x0, x1):
                e += nxt[i, j] * nxt[i, j]
        energy[n] = e
        prev, cur, nxt = cur, nxt, prev
    return rec, energy


@numba.njit(cache=True, nogil=True)
def _fdtd_adjoint(kappa, damp, rz, rx, res, lap_store):
    # res[r, n] = dJ/d(rec[r, n]); rec[:, n] samples u[n+1]
    nz, nx = kappa.shape
    nt = res.shape[1]
    lam1 = np.zeros((nz, nx))  # lambda[n+1]
    lam2 = np.zeros((nz, nx))  # lambda[n+2]
    lam0 = np.zeros((nz, nx))
    tmp = np.zeros((nz, nx))
    ltmp = np.zeros((nz, nx))
    grad = np.zeros((nz, nx))
    for n in range(nt, 0, -1):
        if n <= nt - 1:
            for i in range(nz):
                for j in range(nx):
                    grad[i, j] += damp[i, j] * lam1[i, j] * lap_store[n, i, j]
        for i in range(nz):
            for j in range(nx):
                tmp[i, j] = kappa[i, j] * damp[i, j] * lam1[i, j]
        _lap(tmp, ltmp)
        for i in range(nz):
            for j in range(nx):
                d = damp[i, j]
                lam0[i, j] = 2.0 * d * lam1[i, j] + ltmp[i, j] - d * d * lam2[i, j]
        for r in range(rz.shape[0]):
            lam0[rz[r], rx[r]] += res[r, n - 1]
        lam2, lam1, lam0 = lam1, lam0, lam2
    for i in range(nz):
        for j in range(nx):
            grad[i, j] += damp[i, j] * lam1[i, j] * lap_store[0, i, j]
    return grad


@numba.njit(cache=True, nogil=True)
def _fdtd_born(kappa, damp, dkappa, rz, rx, lap_store):
    nt = lap_store.shape[0]
    nz, nx = kappa.shape
    prev = np.zeros((nz, nx))
    cur = np.zeros((nz, nx))
    nxt = np.zeros((nz, nx))
    lap = np.zeros((nz, nx))
    rec = np.zeros((rz.shape[0], nt))
    for n in range(nt):
        _lap(cur, lap)
        for i in range(nz):
            for j in range(nx):
                d = damp[i, j]
                nxt[i, j] = d * (2.0 * cur[i, j] - d * prev[i, j] + kappa[i, j] * lap[i, j]
                                 + dkappa[i, j] * lap_store[n, i, j])
        for r in range(rz.shape[0]):
            rec[r, n] = nxt[rz[r], rx[r]]
        prev, cur, nxt = cur, nxt, prev
    return rec


def sponge_profile(nz: int, nx: int, width: int, strength: float = 0.35) -> np.ndarray:
    """Damping factors on the padded grid: ``exp(-(strength * d / width)^2)`` per axis."""
    def axis(n):
        d = np.zeros(n + 2 * width)
        if width:
            ramp = np.arange(width, 0, -1, dtype=np.float64)
            d[:width] = ramp
            d[-width:] = ramp[::-1]
        return np.exp(-(strength * d / max(width, 1)) ** 2)
    return np.outer(axis(nz), axis(nx))


class AcousticSolver:
    """Per-geometry solver state: padded grid, sponge, source/receiver indices."""

    def __init__(self, nz: int, nx: int, dx: float, survey: Survey, sponge: int = 20,
                 threads: int = 1, water_mask=None):
        survey.check_grid(nz, nx)
        self.nz, self.nx, self.dx = nz, nx, float(dx)
        self.survey = survey
        self.nb = int(sponge)
        self.threads = max(1, int(threads))
        self.damp = sponge_profile(nz, nx, self.nb)
        nb = self.nb
        self.src = survey.sources + nb
        self.rz = np.ascontiguousarray(survey.receivers[:, 0] + nb)
        self.rx = np.ascontiguousarray(survey.receivers[:, 1] + nb)
        self.inner = np.array([nb, nb + nz, nb, nb + nx], dtype=np.int64)
        zi = np.clip(np.arange(nz + 2 * nb) - nb, 0, nz - 1)
        xi = np.clip(np.arange(nx + 2 * nb) - nb, 0, nx - 1)
        self._fold = (zi[:, None] * nx + xi[None, :]).ravel()
        self.water_mask = (np.zeros((nz, nx), dtype=bool) if water_mask is None
                           else np.asarray(water_mask, dtype=bool).reshape(nz, nx))

    def _pad(self, v):
        return np.pad(np.asarray(v, dtype=np.float64).reshape(self.nz, self.nx), self.nb,
                      mode="edge")

    def kappa(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        cfl = float(np.max(v)) * self.survey.dt / self.dx
        if not cfl <= CFL_MAX:
            raise StabilityError(f"CFL number {cfl:.4f} exceeds the stability bound {CFL_MAX:.4f}")
        return (self._pad(v) * self.survey.dt / self.dx) ** 2

    def _map(self, fn, n):
        if self.threads > 1 and n > 1:
            with ThreadPoolExecutor(max_workers=min(self.threads, n)) as ex:
                return list(ex.map(fn, range(n)))
        return [fn(i) for i in range(n)]

    def _run_source(self, kappa, i, store):
        s = self.src[i]
        nt = self.survey.nt
        lap = np.empty((nt,) + kappa.shape) if store else np.empty((1, 1, 1))
        rec, energy = _fdtd_forward(kappa, self.damp, int(s[0]), int(s[1]), self.survey.wavelet,
                                    self.rz, self.rx, nt, lap, store, self.inner)
        return rec, energy, lap

    def simulate(self, v, return_energy: bool = False):
        kappa = self.kappa(v)
        out = self._map(lambda i: self._run_source(kappa, i, False), self.survey.n_src)
        COUNTER.add(self.survey.n_src)
        data = np.stack([o[0] for o in out])
        if return_energy:
            return data, np.stack([o[1] for o in out])
        return data

    def misfit_grad(self, v, d_obs, sigma_d: float):
        kappa = self.kappa(v)
        d_obs = np.asarray(d_obs, dtype=np.float64)
        expected = (self.survey.n_src, self.survey.n_rec, self.survey.nt)
        if d_obs.shape != expected:
            raise DimensionError(f"observed data has shape {d_obs.shape}, expected {expected}")

        def one(i):
            rec, _, lap = self._run_source(kappa, i, True)
            res = (rec - d_obs[i]) / sigma_d
            g = _fdtd_adjoint(kappa, self.damp, self.rz, self.rx, res / sigma_d, lap)
            return 0.5 * float(np.sum(res * res)), g

        out = self._map(one, self.survey.n_src)
        COUNTER.add(2 * self.survey.n_src)
        misfit = 0.0
        gk = np.zeros_like(kappa)
        for f, g in out:
            misfit += f
            gk += g
        return misfit, self._to_velocity_grad(gk, v)

    def adjoint_apply(self, v, residual):
        """``F'(v)^T r`` for data-space ``residual`` (no misfit weighting)."""
        kappa = self.kappa(v)

        def one(i):
            _, _, lap = self._run_source(kappa, i, True)
            return _fdtd_adjoint(kappa, self.damp, self.rz, self.rx,
                                 np.ascontiguousarray(residual[i], dtype=np.float64), lap)

        gk = sum(self._map(one, self.survey.n_src))
        return self._to_velocity_grad(gk, v)

    def born(self, v, dv):
        """Linearised data perturbation ``F'(v) dv``."""
        kappa = self.kappa(v)
        dkappa = 2.0 * self._pad(v) * self._pad(dv) * (self.survey.dt / self.dx) ** 2

        def one(i):
            _, _, lap = self._run_source(kappa, i, True)
            return _fdtd_born(kappa, self.damp, dkappa, self.rz, self.rx, lap)

        return np.stack(self._map(one, self.survey.n_src))

    def _to_velocity_grad(self, gk, v):
        gv_pad = gk * 2.0 * self._pad(v) * (self.survey.dt / self.dx) ** 2
        g = np.zeros(self.nz * self.nx)
        np.add.at(g, self._fold, gv_pad.ravel())
        g = g.reshape(self.nz, self.nx)
        g[self.water_mask] = 0.0
        return g


def simulate_acoustic(vel: VelocityField, survey: Survey, sponge: int = 20, threads: int = 1,
                      sigma_d: float = SIGMA_D) -> WaveformData:
    solver = AcousticSolver(*vel.shape, vel.dx, survey, sponge=sponge, threads=threads,
                            water_mask=vel.water_mask)
    return WaveformData(solver.simulate(vel.values), sigma_d=sigma_d, dt=survey.dt)


def misfit_and_adjoint_gradient(vel: VelocityField, survey: Survey, d_obs, sigma_d: float = SIGMA_D,
                                sponge: int = 20, threads: int = 1):
    solver = AcousticSolver(*vel.shape, vel.dx, survey, sponge=sponge, threads=threads,
                            water_mask=vel.water_mask)
    d = d_obs.data if isinstance(d_obs, WaveformData) else d_obs
    return solver.misfit_grad(vel.values, d, sigma_d)


class AcousticForward:
    """FWI misfit/gradient on a flattened velocity vector (row-major, row = depth)."""

    def __init__(self, solver: AcousticSolver, d_obs, sigma_d: float = SIGMA_D):
        self.solver = solver
        self.d_obs = np.asarray(d_obs.data if isinstance(d_obs, WaveformData) else d_obs)
        self.sigma_d = float(sigma_d)
        self.sims_per_eval = 2 * solver.survey.n_src

    def misfit_grad(self, m):
        f, g = self.solver.misfit_grad(np.asarray(m).reshape(self.solver.nz, self.solver.nx),
                                       self.d_obs, self.sigma_d)
        return f, g.ravel()

    def predict(self, m):
        return self.solver.simulate(np.asarray(m).reshape(self.solver.nz, self.solver.nx))


# -- VPRD waveform files ---------------------------------------------------------------
_MAGIC_D = b"VPRD"


def write_waveforms(path, data, dt: float) -> None:
    data = np.asarray(data)
    n_src, n_rec, nt = data.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC_D)
        fh.write(struct.pack("<IIId", n_src, n_rec, nt, float(dt)))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_waveforms(path):
    """Return ``(data[n_src, n_rec, nt] as float64, dt)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC_D:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC_D!r}")
    if len(raw) < 24:
        raise FormatError(f"{path}: truncated header")
    n_src, n_rec, nt, dt = struct.unpack_from("<IIId", raw, 4)
    count = n_src * n_rec * nt
    if len(raw) != 24 + 4 * count:
        raise FormatError(f"{path}: expected {24 + 4 * count} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=24).astype(np.float64)
    return data.reshape(n_src, n_rec, nt), dt
