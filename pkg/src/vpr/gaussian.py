"""Structured multivariate Gaussian with a sparse, banded Cholesky factor.

The lower-triangular factor ``L`` only carries entries on a fixed set of
sub-diagonals ("offsets").  Offset ``k`` stores ``n - k`` values where entry
``j`` of the block is ``L[j + k, j]``.  The main diagonal is stored as an
unconstrained vector and mapped through ``exp`` so that ``L L^T`` stays
positive definite whatever the optimiser does to it.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import DimensionError, DomainError, FormatError, SizeError

DENSIFY_LIMIT = 4096
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SparsityPattern:
    n: int
    offsets: tuple[int, ...] = (0,)

    def __post_init__(self):
        offsets = tuple(int(k) for k in self.offsets)
        object.__setattr__(self, "offsets", offsets)
        if self.n < 1:
            raise DimensionError(f"dimension must be positive, got {self.n}")
        if not offsets or offsets[0] != 0:
            raise ValueError("offset 0 must be present (and first)")
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ValueError(f"offsets must be strictly increasing: {offsets}")
        if offsets[-1] >= self.n:
            raise ValueError(f"offset {offsets[-1]} out of range for n={self.n}")

    @property
    def n_stored(self) -> int:
        return sum(self.n - k for k in self.offsets)

    @property
    def n_offdiag(self) -> int:
        return sum(self.n - k for k in self.offsets[1:])

    def block_starts(self) -> np.ndarray:
        """Start index of each off-diagonal block in the flat store (index 0 unused)."""
        starts = np.zeros(len(self.offsets), dtype=np.int64)
        pos = 0
        for i, k in enumerate(self.offsets[1:], start=1):
            starts[i] = pos
            pos += self.n - k
        return starts

    @classmethod
    def full(cls, n: int) -> "SparsityPattern":
        return cls(n, tuple(range(n)))

    @classmethod
    def for_grid(cls, nz: int, nx: int, width: int = 3, n: int | None = None) -> "SparsityPattern":
        """Offsets coupling each cell with its neighbours within ``width`` cells.

        Covers horizontal offsets ``1..width`` and, for every row shift
        ``1..width``, the columns ``-width..width`` around the cell directly
        below.  ``n`` defaults to ``nz * nx``; pass a smaller value when the
        variational dimension only covers the free (non-fixed) rows.
        """
        n = nz * nx if n is None else n
        offs = set(range(0, width + 1))
        for dz in range(1, width + 1):
            for dx in range(-width, width + 1):
                offs.add(dz * nx + dx)
        return cls(n, tuple(sorted(k for k in offs if 0 <= k < n)))


@numba.njit(cache=True, nogil=True)
def _forward_subst(diag, offsets, starts, offdiag, r):
    n = r.shape[0]
    y = np.empty(n)
    for i in range(n):
        s = r[i]
        for b in range(1, offsets.shape[0]):
            k = offsets[b]
            if i >= k:
                s -= offdiag[starts[b] + i - k] * y[i - k]
        y[i] = s / diag[i]
    return y


@numba.njit(cache=True, nogil=True)
def _backward_subst(diag, offsets, starts, offdiag, y):
    # solves L^T x = y
    n = y.shape[0]
    x = np.empty(n)
    for j in range(n - 1, -1, -1):
        s = y[j]
        for b in range(1, offsets.shape[0]):
            k = offsets[b]
            if j + k < n:
                s -= offdiag[starts[b] + j] * x[j + k]
        x[j] = s / diag[j]
    return x


@dataclass
class StructuredCholesky:
    pattern: SparsityPattern
    raw_diag: np.ndarray
    offdiag: np.ndarray = field(default=None)

    def __post_init__(self):
        self.raw_diag = np.asarray(self.raw_diag, dtype=np.float64).copy()
        if self.raw_diag.shape != (self.pattern.n,):
            raise DimensionError(
                f"raw_diag has shape {self.raw_diag.shape}, expected ({self.pattern.n},)")
        if self.offdiag is None:
            self.offdiag = np.zeros(self.pattern.n_offdiag)
        self.offdiag = np.asarray(self.offdiag, dtype=np.float64).copy()
        if self.offdiag.shape != (self.pattern.n_offdiag,):
            raise DimensionError(
                f"offdiag has {self.offdiag.size} entries, expected {self.pattern.n_offdiag}")
        self._offsets = np.asarray(self.pattern.offsets, dtype=np.int64)
        self._starts = self.pattern.block_starts()

    @property
    def n(self) -> int:
        return self.pattern.n

    @property
    def diag(self) -> np.ndarray:
        return np.exp(self.raw_diag)

    def blocks(self):
        """Yield ``(offset, view)`` for each off-diagonal block."""
        for b, k in enumerate(self.pattern.offsets[1:], start=1):
            s = self._starts[b]
            yield k, self.offdiag[s:s + self.n - k]

    def matvec(self, eps: np.ndarray) -> np.ndarray:
        """``L @ eps`` for a vector or a batch of row vectors."""
        eps = np.asarray(eps, dtype=np.float64)
        out = self.diag * eps
        for k, block in self.blocks():
            out[..., k:] += block * eps[..., :self.n - k]
        return out

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        """``L.T @ v``."""
        v = np.asarray(v, dtype=np.float64)
        out = self.diag * v
        for k, block in self.blocks():
            out[..., :self.n - k] += block * v[..., k:]
        return out

    def solve(self, r: np.ndarray) -> np.ndarray:
        """Forward substitution ``L y = r``."""
        return _forward_subst(self.diag, self._offsets, self._starts, self.offdiag,
                              np.ascontiguousarray(r, dtype=np.float64))

    def solve_transpose(self, y: np.ndarray) -> np.ndarray:
        """Back substitution ``L^T x = y``."""
        return _backward_subst(self.diag, self._offsets, self._starts, self.offdiag,
                               np.ascontiguousarray(y, dtype=np.float64))

    def log_det(self) -> float:
        """``log det L`` (half the log-determinant of the covariance)."""
        return float(np.sum(self.raw_diag))

    def densify(self) -> np.ndarray:
        return densify(self)

    @classmethod
    def from_dense(cls, L: np.ndarray, pattern: SparsityPattern) -> "StructuredCholesky":
        L = np.asarray(L, dtype=np.float64)
        if L.shape != (pattern.n, pattern.n):
            raise DimensionError(f"matrix shape {L.shape} does not match n={pattern.n}")
        d = np.diag(L)
        if np.any(d <= 0):
            raise DomainError("diagonal of L must be strictly positive")
        off = np.concatenate([np.diagonal(L, -k) for k in pattern.offsets[1:]] or [np.zeros(0)])
        return cls(pattern, np.log(d), off)

    def copy(self) -> "StructuredCholesky":
        return StructuredCholesky(self.pattern, self.raw_diag, self.offdiag)

    def compose(self, other: "StructuredCholesky") -> "StructuredCholesky":
        """The product ``self @ other``; its offsets are the pairwise sums below ``n``."""
        n = self.n
        if other.n != n:
            raise DimensionError(f"cannot compose factors of size {n} and {other.n}")
        left = [(0, self.diag)] + list(self.blocks())
        right = [(0, other.diag)] + list(other.blocks())
        acc: dict[int, np.ndarray] = {}
        for a, ba in left:
            for b, bb in right:
                c = a + b
                if c >= n:
                    continue
                # (L1 L2)[j + c, j] picks up L1[j + c, j + b] * L2[j + b, j]
                acc.setdefault(c, np.zeros(n - c))
                acc[c] += ba[b:b + n - c] * bb[:n - c]
        offsets = tuple(sorted(acc))
        off = np.concatenate([acc[k] for k in offsets[1:]] or [np.zeros(0)])
        return StructuredCholesky(SparsityPattern(n, offsets), np.log(acc[0]), off)


def densify(chol: StructuredCholesky, limit: int = DENSIFY_LIMIT) -> np.ndarray:
    n = chol.n
    if n > limit:
        raise SizeError(f"refusing to materialise a {n}x{n} factor (limit {limit})")
    L = np.zeros((n, n))
    idx = np.arange(n)
    L[idx, idx] = chol.diag
    for k, block in chol.blocks():
        L[idx[k:], idx[:n - k]] = block
    return L


@dataclass
class GaussianVariational:
    mu: np.ndarray
    chol: StructuredCholesky

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).copy()
        if self.mu.shape != (self.chol.n,):
            raise DimensionError(f"mu has shape {self.mu.shape}, factor has n={self.chol.n}")

    @classmethod
    def initial(cls, pattern: SparsityPattern, mu=None, std: float = 1.0) -> "GaussianVariational":
        """Zero off-diagonals and a constant diagonal ``std``."""
        mu = np.zeros(pattern.n) if mu is None else mu
        return cls(mu, StructuredCholesky(pattern, np.full(pattern.n, math.log(std))))

    @property
    def n(self) -> int:
        return self.chol.n

    @property
    def pattern(self) -> SparsityPattern:
        return self.chol.pattern

    # flat parameter vector [mu, raw_diag, offdiag] used by the optimiser
    def get_params(self) -> np.ndarray:
        return np.concatenate([self.mu, self.chol.raw_diag, self.chol.offdiag])

    def set_params(self, params: np.ndarray) -> None:
        n = self.n
        params = np.asarray(params, dtype=np.float64)
        self.mu = params[:n].copy()
        self.chol.raw_diag = params[n:2 * n].copy()
        self.chol.offdiag = params[2 * n:].copy()

    def with_params(self, params: np.ndarray) -> "GaussianVariational":
        q = self.copy()
        q.set_params(params)
        return q

    def copy(self) -> "GaussianVariational":
        return GaussianVariational(self.mu, self.chol.copy())

    def sample(self, eps: np.ndarray) -> np.ndarray:
        return sample_reparam(self, eps)

    def log_density(self, theta: np.ndarray) -> float:
        return log_density(self, theta)

    def grad_log_density(self, theta: np.ndarray) -> np.ndarray:
        """Gradient of ``log q`` w.r.t. ``theta``: ``-L^{-T} L^{-1} (theta - mu)``."""
        y = self.chol.solve(np.asarray(theta, dtype=np.float64) - self.mu)
        return -self.chol.solve_transpose(y)

    def covariance(self) -> np.ndarray:
        L = densify(self.chol)
        return L @ L.T

    def entropy(self) -> float:
        return 0.5 * self.n * (1.0 + LOG_2PI) + self.chol.log_det()


def sample_reparam(q: GaussianVariational, eps: np.ndarray) -> np.ndarray:
    """Reparameterised draw ``mu + L eps`` (``eps`` may be a batch of rows)."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1] != q.n:
        raise DimensionError(f"eps has length {eps.shape[-1]}, expected {q.n}")
    return q.mu + q.chol.matvec(eps)


def log_density(q: GaussianVariational, theta: np.ndarray) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (q.n,):
        raise DimensionError(f"theta has shape {theta.shape}, expected ({q.n},)")
    if not np.all(np.isfinite(theta)):
        raise DomainError("theta contains non-finite values")
    y = q.chol.solve(theta - q.mu)
    return float(-0.5 * q.n * LOG_2PI - q.chol.log_det() - 0.5 * y @ y)


_MAGIC_Q = b"VPRQ"


def save_variational(path, q: GaussianVariational) -> None:
    """Write ``q`` in the little-endian ``VPRQ`` state format."""
    offs = q.pattern.offsets
    with open(path, "wb") as fh:
        fh.write(_MAGIC_Q)
        fh.write(struct.pack("<II", q.n, len(offs)))
        fh.write(np.asarray(offs, dtype="<u4").tobytes())
        for arr in (q.mu, q.chol.raw_diag, q.chol.offdiag):
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def load_variational(path) -> GaussianVariational:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC_Q:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {_MAGIC_Q!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    n, n_off = struct.unpack_from("<II", raw, 4)
    pos = 12
    if len(raw) < pos + 4 * n_off:
        raise FormatError(f"{path}: truncated offset table")
    offsets = tuple(int(k) for k in np.frombuffer(raw, dtype="<u4", count=n_off, offset=pos))
    pos += 4 * n_off
    pattern = SparsityPattern(n, offsets)
    total = 2 * n + pattern.n_offdiag
    if len(raw) != pos + 8 * total:
        raise FormatError(f"{path}: expected {pos + 8 * total} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8", count=total, offset=pos).astype(np.float64)
    return GaussianVariational(vals[:n], StructuredCholesky(pattern, vals[n:2 * n], vals[2 * n:]))
