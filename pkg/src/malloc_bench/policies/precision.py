"""Precision-level policies: asymmetric low-bit quantisation of cached K/V."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import F32, F64
from .base import ELEMENT_BYTES, CachePolicy, PolicyError, _rows, attend_one

ALLOWED_BITS = (2, 4, 8)


def _check_bits(bits: int) -> None:
    if bits not in ALLOWED_BITS:
        raise PolicyError(f"bits must be one of {ALLOWED_BITS}, got {bits}")


def quantize_along(x: np.ndarray, axis: int, bits: int):
    """Asymmetric min/max quantisation with statistics reduced over ``axis``."""
    _check_bits(bits)
    # cached values are fp32; quantise exactly those
    x = np.asarray(x, F32).astype(F64)
    lo = x.min(axis=axis, keepdims=True)
    hi = x.max(axis=axis, keepdims=True)
    levels = 2**bits - 1
    # codes are taken against the stored fp32 statistics, so dequantisation
    # error stays within half a step of what is actually kept
    scale = ((hi - lo) / levels).astype(F32)
    scale = np.where(scale > 0, scale, F32(1.0))
    zero = lo.astype(F32)
    codes = np.clip(np.floor((x - zero) / scale.astype(F64) + 0.5), 0, levels).astype(np.uint8)
    return codes, scale, zero


def dequantize(codes, scale, zero) -> np.ndarray:
    return (codes.astype(F64) * scale.astype(F64) + zero.astype(F64)).astype(F32)


def quantize_lowbit(x, bits: int, group: int):
    """Quantise a vector in consecutive groups of ``group`` elements.

    A short final group is padded with its last element, which leaves its
    min/max unchanged. Returns (codes, scale, zero) with one scale/zero per
    group.
    """
    _check_bits(bits)
    if group < 1:
        raise PolicyError(f"group must be >= 1, got {group}")
    x = np.asarray(x, F64).reshape(-1)
    n = x.size
    pad = (-n) % group
    if pad:
        x = np.concatenate([x, np.full(pad, x[-1])])
    codes, scale, zero = quantize_along(x.reshape(-1, group), 1, bits)
    return codes.reshape(-1)[:n], scale.reshape(-1), zero.reshape(-1)


def dequantize_lowbit(codes, scale, zero, group: int) -> np.ndarray:
    n = codes.size
    idx = np.arange(n) // group
    return (codes.astype(F64) * scale.astype(F64)[idx] + zero.astype(F64)[idx]).astype(F32)


def quantize_tokens(X: np.ndarray, bits: int, group: int):
    """Per-token quantisation of rows, ``group`` channels per scale."""
    n, d = X.shape
    if d % group:
        raise PolicyError(f"group {group} must divide width {d}")
    codes, scale, zero = quantize_along(X.reshape(n, d // group, group), 2, bits)
    return codes.reshape(n, d), scale.reshape(n, d // group), zero.reshape(n, d // group)


def dequantize_tokens(codes, scale, zero, group: int) -> np.ndarray:
    n, d = codes.shape
    c = codes.reshape(n, d // group, group)
    return dequantize(c, scale.reshape(n, d // group, 1), zero.reshape(n, d // group, 1)).reshape(n, d)


@dataclass
class QuantState:
    """Quantised K/V plus full-precision rows that are not (yet) quantised."""

    d_model: int
    bits: int
    seen: int = 0
    # KIVI keys: one (codes[group x d], scale[d], zero[d]) per complete chunk
    k_chunks: list = field(default_factory=list)
    # per-token codes for keys (IntactKV) and values (both)
    k_tok: tuple | None = None
    v_tok: tuple | None = None
    # full-precision rows kept verbatim
    K_fp: np.ndarray | None = None
    V_fp: np.ndarray | None = None
    group: int = 32

    @property
    def n_entries(self) -> int:
        return self.seen

    def _n_scales(self) -> int:
        n = sum(s.size + z.size for _, s, z in self.k_chunks)
        for part in (self.k_tok, self.v_tok):
            if part is not None:
                n += part[1].size + part[2].size
        return n

    def _n_fp(self) -> int:
        return sum(a.size for a in (self.K_fp, self.V_fp) if a is not None)

    def memory_bytes(self) -> int:
        # headline: every cached K/V element at the quantised width
        return -(-2 * self.seen * self.d_model * self.bits // 8)

    def overhead_bytes(self) -> int:
        extra_fp = self._n_fp() * ELEMENT_BYTES - -(-self._n_fp() * self.bits // 8)
        return self._n_scales() * ELEMENT_BYTES + extra_fp


def _empty_tok(d: int, group: int):
    return (np.zeros((0, d), np.uint8), np.zeros((0, d // group), F32), np.zeros((0, d // group), F32))


def _cat_tok(a, b):
    return tuple(np.concatenate([x, y]) for x, y in zip(a, b))


class KIVI(CachePolicy):
    """Keys quantised per channel over chunks of ``group`` tokens, values per token.

    Keys of an incomplete chunk stay in full precision until the chunk fills.
    """

    name = "kivi"
    state_type = QuantState

    def __init__(self, d_model, n_heads, bits: int = 2, group: int = 32):
        super().__init__(d_model, n_heads)
        _check_bits(bits)
        if group < 1 or d_model % group:
            raise PolicyError(f"group {group} must divide d_model {d_model}")
        self.bits = bits
        self.group = group

    def _new_state(self) -> QuantState:
        d = self.d_model
        return QuantState(d, self.bits, group=self.group, v_tok=_empty_tok(d, self.group), K_fp=np.zeros((0, d), F32))

    def _flush(self, state: QuantState) -> None:
        while state.K_fp.shape[0] >= self.group:
            chunk, state.K_fp = state.K_fp[: self.group], state.K_fp[self.group :]
            state.k_chunks.append(quantize_along(chunk, 0, self.bits))

    def prefill(self, K, V, Q=None, meter=None):
        K = _rows(K, self.d_model)
        V = _rows(V, self.d_model)
        state = self._new_state()
        state.K_fp = K.copy()
        state.v_tok = quantize_tokens(V, self.bits, self.group)
        state.seen = K.shape[0]
        self._flush(state)
        return state

    def append(self, state, k, v, meter=None):
        self._check(state)
        state.K_fp = np.vstack([state.K_fp, _rows(k, self.d_model)])
        state.v_tok = _cat_tok(state.v_tok, quantize_tokens(_rows(v, self.d_model), self.bits, self.group))
        state.seen += 1
        self._flush(state)
        return state

    def materialize(self, state: QuantState):
        parts = [dequantize(c, s, z) for c, s, z in state.k_chunks]
        K = np.vstack(parts + [state.K_fp])
        V = dequantize_tokens(*state.v_tok, self.group)
        return K, V

    def attend(self, state, q, meter=None):
        self._check(state)
        K, V = self.materialize(state)
        return attend_one(np.asarray(q, F32).reshape(-1), K, V, self.n_heads, meter)

    def describe(self):
        return {"name": self.name, "bits": self.bits, "group": self.group}


class IntactKV(KIVI):
    """The first ``pivots`` tokens stay exact; later tokens are quantised per token."""

    name = "intactkv"

    def __init__(self, d_model, n_heads, bits: int = 2, pivots: int = 4, group: int = 32):
        super().__init__(d_model, n_heads, bits=bits, group=group)
        if pivots < 1:
            raise PolicyError(f"pivots must be >= 1, got {pivots}")
        self.pivots = pivots

    def _new_state(self) -> QuantState:
        d = self.d_model
        return QuantState(
            d, self.bits, group=self.group,
            k_tok=_empty_tok(d, self.group), v_tok=_empty_tok(d, self.group),
            K_fp=np.zeros((0, d), F32), V_fp=np.zeros((0, d), F32),
        )

    def prefill(self, K, V, Q=None, meter=None):
        K = _rows(K, self.d_model)
        V = _rows(V, self.d_model)
        state = self._new_state()
        p = min(self.pivots, K.shape[0])
        state.K_fp, state.V_fp = K[:p].copy(), V[:p].copy()
        state.k_tok = quantize_tokens(K[p:], self.bits, self.group)
        state.v_tok = quantize_tokens(V[p:], self.bits, self.group)
        state.seen = K.shape[0]
        return state

    def append(self, state, k, v, meter=None):
        self._check(state)
        k = _rows(k, self.d_model)
        v = _rows(v, self.d_model)
        if state.K_fp.shape[0] < self.pivots:
            state.K_fp = np.vstack([state.K_fp, k])
            state.V_fp = np.vstack([state.V_fp, v])
        else:
            state.k_tok = _cat_tok(state.k_tok, quantize_tokens(k, self.bits, self.group))
            state.v_tok = _cat_tok(state.v_tok, quantize_tokens(v, self.bits, self.group))
        state.seen += 1
        return state

    def materialize(self, state: QuantState):
        K = np.vstack([state.K_fp, dequantize_tokens(*state.k_tok, self.group)])
        V = np.vstack([state.V_fp, dequantize_tokens(*state.v_tok, self.group)])
        return K, V

    def describe(self):
        return {"name": self.name, "bits": self.bits, "pivots": self.pivots, "group": self.group}
