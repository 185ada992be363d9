"""Logit bijection between unbounded Gaussian space and bounded model space.

Entries whose bounds are both infinite are passed through unchanged (identity
map, zero log-Jacobian); this is what the linear-Gaussian oracle problems use.
Fixed cells keep a stored constant and are never transformed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DimensionError, DomainError


@dataclass
class BoundedBox:
    lower: np.ndarray
    upper: np.ndarray
    fixed_mask: np.ndarray | None = None
    fixed_values: np.ndarray | None = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64).ravel().copy()
        self.upper = np.asarray(self.upper, dtype=np.float64).ravel().copy()
        n = self.lower.size
        if self.upper.shape != (n,):
            raise DimensionError("lower and upper bounds differ in length")
        if self.fixed_mask is None:
            self.fixed_mask = np.zeros(n, dtype=bool)
        self.fixed_mask = np.asarray(self.fixed_mask, dtype=bool).ravel().copy()
        if self.fixed_values is None:
            self.fixed_values = np.zeros(n)
        self.fixed_values = np.asarray(self.fixed_values, dtype=np.float64).ravel().copy()
        if self.fixed_mask.shape != (n,) or self.fixed_values.shape != (n,):
            raise DimensionError("fixed_mask / fixed_values must match the bounds length")
        free = ~self.fixed_mask
        lo, hi = self.lower[free], self.upper[free]
        bad = np.flatnonzero(~(lo < hi))
        if bad.size:
            i = np.flatnonzero(free)[bad[0]]
            raise DomainError(f"lower bound must be below upper bound at index {i}")
        half = np.isfinite(lo) != np.isfinite(hi)
        if np.any(half):
            i = np.flatnonzero(free)[np.flatnonzero(half)[0]]
            raise DomainError(f"half-infinite bounds are not supported (index {i})")
        self.free = np.flatnonzero(free)
        self._unb = ~np.isfinite(self.lower[self.free])
        # width for bounded entries, 1 as a harmless placeholder elsewhere
        self._a = np.where(self._unb, 0.0, self.lower[self.free])
        self._b = np.where(self._unb, 1.0, self.upper[self.free])
        self._w = self._b - self._a
        self._lo_in = np.nextafter(self._a, self._b)
        self._hi_in = np.nextafter(self._b, self._a)

    @property
    def n(self) -> int:
        return self.lower.size

    @property
    def n_free(self) -> int:
        return self.free.size

    @classmethod
    def uniform(cls, n, lower, upper, **kw) -> "BoundedBox":
        return cls(np.full(n, float(lower)), np.full(n, float(upper)), **kw)

    @classmethod
    def unbounded(cls, n) -> "BoundedBox":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @classmethod
    def from_depth_profile(cls, lower, upper, nx, **kw) -> "BoundedBox":
        """Broadcast per-depth bounds (one value per row) across ``nx`` columns."""
        lower = np.repeat(np.asarray(lower, dtype=np.float64), nx)
        upper = np.repeat(np.asarray(upper, dtype=np.float64), nx)
        return cls(lower, upper, **kw)

    def center(self) -> np.ndarray:
        """Midpoint of every bounded free entry, fixed values elsewhere."""
        c = self.fixed_values.copy()
        c[self.free] = np.where(self._unb, 0.0, 0.5 * (self._a + self._b))
        return c

    def uniform_std(self) -> np.ndarray:
        """Standard deviation ``(b - a) / sqrt(12)`` of the uniform over the box."""
        s = np.zeros(self.n)
        s[self.free] = np.where(self._unb, np.inf, self._w / np.sqrt(12.0))
        return s

    def embed(self, theta_free: np.ndarray) -> np.ndarray:
        """Scatter a free-parameter vector into a full-length vector (zeros at fixed cells)."""
        full = np.zeros(theta_free.shape[:-1] + (self.n,))
        full[..., self.free] = theta_free
        return full

    def inside(self, m: np.ndarray) -> bool:
        mf = np.asarray(m, dtype=np.float64)[self.free]
        return bool(np.all((mf > self.lower[self.free]) & (mf < self.upper[self.free])))

    # -- derivative helpers on the free sub-vector --------------------------------
    def dm_dtheta(self, theta_free: np.ndarray) -> np.ndarray:
        s = expit(theta_free)
        return np.where(self._unb, 1.0, self._w * s * expit(-theta_free))

    def dlogjac_dtheta(self, theta_free: np.ndarray) -> np.ndarray:
        return np.where(self._unb, 0.0, expit(-theta_free) - expit(theta_free))

    def dtheta_dm(self, m_free: np.ndarray) -> np.ndarray:
        return np.where(self._unb, 1.0, 1.0 / (m_free - self._a) + 1.0 / (self._b - m_free))

    def physical_free(self, theta_free: np.ndarray) -> np.ndarray:
        th = np.asarray(theta_free, dtype=np.float64)
        # one branch keeps the map monotone in floating point
        m = np.clip(self._a + self._w * expit(th), self._lo_in, self._hi_in)
        return np.where(self._unb, th, m)

    def unbounded_free(self, m_free: np.ndarray) -> np.ndarray:
        mf = np.asarray(m_free, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            th = np.log(mf - self._a) - np.log(self._b - mf)
        return np.where(self._unb, mf, th)

    def logjac_free(self, theta_free: np.ndarray) -> np.ndarray:
        th = np.asarray(theta_free, dtype=np.float64)
        # log sigma(t) + log(1 - sigma(t)) = -softplus(-t) - softplus(t)
        lj = np.log(self._w) - np.logaddexp(0.0, -th) - np.logaddexp(0.0, th)
        return np.where(self._unb, 0.0, lj)


def _check_len(x, box):
    if x.shape[-1] != box.n:
        raise DimensionError(f"vector has length {x.shape[-1]}, box has {box.n}")


def to_physical(theta: np.ndarray, box: BoundedBox) -> np.ndarray:
    """Map unbounded ``theta`` (full length) to the box; fixed cells take stored values."""
    theta = np.asarray(theta, dtype=np.float64)
    _check_len(theta, box)
    m = np.broadcast_to(box.fixed_values, theta.shape).copy()
    m[..., box.free] = box.physical_free(theta[..., box.free])
    return m


def to_unbounded(m: np.ndarray, box: BoundedBox) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    _check_len(m, box)
    mf = m[..., box.free]
    lo, hi = box.lower[box.free], box.upper[box.free]
    bad = ~((mf > lo) & (mf < hi))
    if np.any(bad):
        j = np.flatnonzero(bad.reshape(-1, box.n_free).any(axis=0))[0]
        i = int(box.free[j])
        raise DomainError(f"value at index {i} lies on or outside its bounds "
                          f"({lo[j]}, {hi[j]})")
    theta = np.zeros_like(m)
    theta[..., box.free] = box.unbounded_free(mf)
    return theta


def log_abs_det_jacobian(theta: np.ndarray, box: BoundedBox) -> float:
    """``sum_i log |dm_i / dtheta_i|`` over free entries, stable for large ``|theta|``."""
    theta = np.asarray(theta, dtype=np.float64)
    _check_len(theta, box)
    return float(np.sum(box.logjac_free(theta[box.free])))
