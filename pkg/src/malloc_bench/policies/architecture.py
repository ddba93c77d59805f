"""Architecture-level policy: a constant-size WKV recurrence instead of a cache."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import F32, F64, MacMeter
from .base import ELEMENT_BYTES, AttendOutput, CachePolicy, EmptyCacheError, PolicyError, _rows


def rwkv_init_state(width: int):
    return np.zeros(width, F64), np.zeros(width, F64), np.full(width, -np.inf)


def rwkv_step(state, k, v, w, u):
    """One step of the max-tracked WKV recurrence, per channel.

    ``state = (num, den, m)`` summarises earlier tokens as
    ``num = sum_i exp(k_i - (t-1-i) w - m) v_i`` (``den`` without ``v_i``),
    scaled by the running exponent ``m``. The past is decayed by one step
    before mixing with the current token, which receives the bonus ``u``.
    Returns (output, new_state).
    """
    num, den, m = state
    k = np.asarray(k, F64)
    v = np.asarray(v, F64)
    m_past = m - w
    top = np.maximum(m_past, u + k)
    a = np.exp(m_past - top)
    b = np.exp(u + k - top)
    out = (a * num + b * v) / (a * den + b)
    m_new = np.maximum(m_past, k)
    a = np.exp(m_past - m_new)
    b = np.exp(k - m_new)
    return out, (a * num + b * v, a * den + b, m_new)


def default_decay(width: int) -> np.ndarray:
    """Per-channel decay rates spread geometrically over [0.05, 2]."""
    return np.geomspace(0.05, 2.0, width)


@dataclass
class RecurrentState:
    num: np.ndarray
    den: np.ndarray
    m: np.ndarray
    # last admitted token; it is mixed in with the bonus when attended
    pending: tuple | None = None
    seen: int = 0

    @property
    def n_entries(self) -> int:
        return 0 if self.pending is None else 1

    def memory_bytes(self) -> int:
        return (self.num.size + self.den.size) * ELEMENT_BYTES

    def overhead_bytes(self) -> int:
        return self.m.size * ELEMENT_BYTES + (0 if self.pending is None else 2 * self.m.size * ELEMENT_BYTES)


class RWKV(CachePolicy):
    """Channel-wise WKV recurrence over keys and values; queries are unused."""

    name = "rwkv"
    state_type = RecurrentState

    def __init__(self, d_model, n_heads, decay=None, bonus=None):
        super().__init__(d_model, n_heads)
        w = default_decay(d_model) if decay is None else np.broadcast_to(np.asarray(decay, F64), (d_model,))
        u = np.zeros(d_model) if bonus is None else np.broadcast_to(np.asarray(bonus, F64), (d_model,))
        if not (np.all(w > 0) and np.all(np.isfinite(u))):
            raise PolicyError("rwkv decay must be positive and bonus finite")
        self.decay = np.array(w, F64)
        self.bonus = np.array(u, F64)

    def full_attention(self, Q, K, V, meter=None):
        L, d = K.shape
        state = rwkv_init_state(d)
        out = np.empty((L, d), F32)
        for t in range(L):
            out[t], state = rwkv_step(state, K[t], V[t], self.decay, self.bonus)
        if meter is not None:
            meter.add(2 * L * d)
        return out

    def prefill(self, K, V, Q=None, meter=None):
        K = _rows(K, self.d_model)
        V = _rows(V, self.d_model)
        st = RecurrentState(*rwkv_init_state(self.d_model))
        for t in range(K.shape[0]):
            self.append(st, K[t], V[t])
        return st

    def append(self, state, k, v, meter=None):
        self._check(state)
        if state.pending is not None:
            _, (state.num, state.den, state.m) = rwkv_step(
                (state.num, state.den, state.m), *state.pending, self.decay, self.bonus
            )
        state.pending = (_rows(k, self.d_model)[0].astype(F64), _rows(v, self.d_model)[0].astype(F64))
        state.seen += 1
        return state

    def attend(self, state, q=None, meter=None):
        self._check(state)
        if state.pending is None:
            raise EmptyCacheError("rwkv state has seen no tokens")
        out, _ = rwkv_step((state.num, state.den, state.m), *state.pending, self.decay, self.bonus)
        if meter is not None:
            meter.add(2 * self.d_model)
        return AttendOutput(context=out.astype(F32))

    def describe(self):
        return {"name": self.name}
