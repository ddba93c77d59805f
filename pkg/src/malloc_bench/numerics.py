"""Dense linear algebra with multiply-accumulate accounting, plus a portable PRNG.

Matrices are plain 2-D ``numpy.float32`` arrays. Products accumulate in
float64 and are rounded back to float32 on output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

F32 = np.float32
F64 = np.float64

_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    pass


@dataclass
class MacMeter:
    """Running count of multiply-accumulate operations."""

    total: int = 0

    def add(self, n: int) -> None:
        if n < 0:
            raise ValueError(f"negative MAC count {n}")
        self.total += int(n)

    def snapshot(self) -> int:
        return self.total


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=F32)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray, meter: MacMeter | None = None) -> np.ndarray:
    """Product ``a @ b``; charges ``rows(a) * cols(a) * cols(b)`` MACs."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if meter is not None:
        meter.add(a.shape[0] * a.shape[1] * b.shape[1])
    return (a.astype(F64) @ b.astype(F64)).astype(F32)


def batched_matmul(a: np.ndarray, b: np.ndarray, meter: MacMeter | None = None) -> np.ndarray:
    """Per-slice product over a leading batch axis: (n, m, k) @ (n, k, p)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"cannot batch-multiply {a.shape} by {b.shape}")
    if meter is not None:
        meter.add(a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])
    return (a.astype(F64) @ b.astype(F64)).astype(F32)


def softmax_rows(a: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax with max subtraction. Masked-out entries get weight 0.

    Works on any array; the reduction runs over the last axis. A row with no
    admissible entry is an error rather than a silent NaN.
    """
    x = np.asarray(a, dtype=F64)
    if mask is not None:
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row with every entry masked")
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return (e / e.sum(axis=-1, keepdims=True)).astype(F32)


def sigmoid(x):
    x = np.asarray(x, dtype=F64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    return np.asarray(x, dtype=F64) * sigmoid(x)


def layer_norm(x, eps: float = 1e-5):
    """Parameter-free layer norm over the last axis."""
    x = np.asarray(x, dtype=F64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Rng:
    """splitmix64 generator.

    ``uniform`` and ``uniform_array`` draw from the same stream, so
    ``uniform_array(n)`` equals ``n`` consecutive ``uniform()`` calls.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def u64_array(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            out = _mix64(states)
        self.state = (self.state + n * _GAMMA) & _MASK64
        return out

    def uniform_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(F64) * 2.0**-53

    def uniform_matrix(self, rows: int, cols: int, low: float, high: float) -> np.ndarray:
        u = self.uniform_array(rows * cols).reshape(rows, cols)
        return (low + (high - low) * u).astype(F32)

    def normal_array(self, n: int) -> np.ndarray:
        """Box-Muller standard normals."""
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform_array(m)
        u2 = self.uniform_array(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        return np.minimum((self.uniform_array(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform_array(n), kind="stable")

    def fork(self, tag: int) -> "Rng":
        """Independent child stream; does not advance this generator."""
        return Rng(_mix64(np.array([self.state ^ (int(tag) * _GAMMA & _MASK64)], dtype=np.uint64))[0].item())
