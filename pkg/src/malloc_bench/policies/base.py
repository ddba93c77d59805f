"""Shared pieces of the per-block cache policy contract.

A policy object is bound to one attention block. It knows how to run
attention over a whole sequence (``full_attention``), how to build a cache
from a prefilled sequence (``prefill``), how to admit one new token
(``append``) and how to answer one query against the cache (``attend``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import F32, F64, MacMeter, ShapeError, batched_matmul, softmax_rows

ELEMENT_BYTES = 4


class PolicyError(ValueError):
    """Invalid policy configuration or a policy/state mismatch."""


class EmptyCacheError(RuntimeError):
    pass


@dataclass
class AttendOutput:
    context: np.ndarray
    # (n_heads, n_entries); None for policies without softmax weights
    weights: np.ndarray | None = None


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """(n, n_heads*hd) -> (n_heads, n, hd)."""
    n, width = x.shape
    return x.reshape(n, n_heads, width // n_heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, hd = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * hd)


def group_index(n_heads: int, n_groups: int) -> np.ndarray:
    """Query head h reads key/value group floor(h * G / H)."""
    return (np.arange(n_heads) * n_groups) // n_heads


def attend_one(
    q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    n_heads: int,
    meter: MacMeter | None,
    n_groups: int | None = None,
    valid: np.ndarray | None = None,
) -> AttendOutput:
    """Softmax attention of a single query over ``n`` stored entries.

    ``K``/``V`` are (n, G*hd); query head h uses group ``group_index``.
    """
    if K.shape[0] == 0:
        raise EmptyCacheError("attend on an empty cache")
    G = n_heads if n_groups is None else n_groups
    hd = q.shape[-1] // n_heads
    if K.shape[1] != G * hd or V.shape != K.shape:
        raise ShapeError(f"query width {q.shape[-1]} incompatible with K {K.shape}, V {V.shape}")
    gi = group_index(n_heads, G)
    qh = q.reshape(n_heads, 1, hd)
    Kh = split_heads(K, G)[gi]
    Vh = split_heads(V, G)[gi]
    scores = batched_matmul(qh, Kh.transpose(0, 2, 1), meter).astype(F64) / np.sqrt(hd)
    mask = None if valid is None else np.broadcast_to(valid, scores.shape)
    w = softmax_rows(scores, mask)
    ctx = batched_matmul(w, Vh, meter)
    return AttendOutput(context=ctx.reshape(-1), weights=w[:, 0, :])


def masked_attention(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    n_heads: int,
    meter: MacMeter | None,
    mask: np.ndarray | None = None,
    n_groups: int | None = None,
    sparse: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Attention for every row of ``Q``; returns (context, weights).

    ``mask`` is (L, L) or (H, L, L) and is combined with causality. Dense
    charging counts the full score and value products; ``sparse`` charges
    only admitted pairs, which is what a banded or bucketed kernel computes.
    """
    L = Q.shape[0]
    G = n_heads if n_groups is None else n_groups
    hd = Q.shape[1] // n_heads
    gi = group_index(n_heads, G)
    Qh = split_heads(Q, n_heads)
    Kh = split_heads(K, G)[gi]
    Vh = split_heads(V, G)[gi]
    allowed = np.tril(np.ones((L, L), dtype=bool))
    if mask is not None:
        allowed = allowed & mask
    allowed = np.broadcast_to(allowed, (n_heads, L, L))
    scores = batched_matmul(Qh, Kh.transpose(0, 2, 1), None if sparse else meter).astype(F64) / np.sqrt(hd)
    w = softmax_rows(scores, allowed)
    ctx = batched_matmul(w, Vh, None if sparse else meter)
    if sparse and meter is not None:
        meter.add(2 * int(allowed.sum()) * hd)
    return merge_heads(ctx), w


def causal_scores(Q: np.ndarray, K: np.ndarray, n_heads: int, meter: MacMeter | None = None) -> np.ndarray:
    """Causal attention weights (H, L, L) of a prefilled sequence."""
    L = Q.shape[0]
    hd = Q.shape[1] // n_heads
    s = batched_matmul(split_heads(Q, n_heads), split_heads(K, n_heads).transpose(0, 2, 1), meter)
    allowed = np.broadcast_to(np.tril(np.ones((L, L), dtype=bool)), s.shape)
    return softmax_rows(s.astype(F64) / np.sqrt(hd), allowed)


def _rows(x: np.ndarray, width: int) -> np.ndarray:
    a = np.asarray(x, dtype=F32)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.shape[-1] != width:
        raise ShapeError(f"expected rows of width {width}, got {a.shape}")
    return a


@dataclass
class KVState:
    """Plain stored keys and values, one row per retained entry."""

    K: np.ndarray
    V: np.ndarray
    seen: int = 0

    @classmethod
    def empty(cls, width: int) -> "KVState":
        return cls(np.zeros((0, width), F32), np.zeros((0, width), F32))

    @property
    def n_entries(self) -> int:
        return self.K.shape[0]

    def memory_bytes(self) -> int:
        return (self.K.size + self.V.size) * ELEMENT_BYTES

    def overhead_bytes(self) -> int:
        return 0

    def push(self, k: np.ndarray, v: np.ndarray) -> None:
        self.K = np.vstack([self.K, k.reshape(1, -1).astype(F32)])
        self.V = np.vstack([self.V, v.reshape(1, -1).astype(F32)])


@dataclass
class RecomputeState:
    """Recompute-mode policies keep nothing between requests."""

    seen: int = 0

    def memory_bytes(self) -> int:
        return 0

    def overhead_bytes(self) -> int:
        return 0


class CachePolicy:
    """Base class: exact causal attention over an uncompressed cache."""

    name = "native"
    mode = "cached"  # or "recompute"

    def __init__(self, d_model: int, n_heads: int):
        if d_model % n_heads:
            raise PolicyError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads

    def full_attention(self, Q, K, V, meter: MacMeter | None = None) -> np.ndarray:
        return masked_attention(Q, K, V, self.n_heads, meter)[0]

    def prefill(self, K, V, Q=None, meter: MacMeter | None = None):
        K = _rows(K, self.d_model)
        V = _rows(V, self.d_model)
        if K.shape != V.shape:
            raise ShapeError(f"K {K.shape} and V {V.shape} differ")
        state = KVState(K.copy(), V.copy(), seen=K.shape[0])
        return state

    def append(self, state, k, v, meter=None):
        self._check(state)
        state.push(_rows(k, self.d_model), _rows(v, self.d_model))
        state.seen += 1
        return state

    def attend(self, state, q, meter: MacMeter | None = None) -> AttendOutput:
        self._check(state)
        return attend_one(np.asarray(q, F32).reshape(-1), state.K, state.V, self.n_heads, meter)

    def empty_state(self):
        return self.prefill(np.zeros((0, self.d_model), F32), np.zeros((0, self.d_model), F32))

    # -- helpers
    state_type: type = KVState

    def _check(self, state) -> None:
        if not isinstance(state, self.state_type):
            raise PolicyError(f"{self.name} policy cannot use a {type(state).__name__}")

    def describe(self) -> dict:
        return {"name": self.name}


class RecomputePolicy(CachePolicy):
    """Policies that rerun attention over the full request every time."""

    mode = "recompute"
    state_type = RecomputeState

    def prefill(self, K, V, Q=None, meter=None):
        return RecomputeState(seen=np.asarray(K).shape[0])

    def append(self, state, k, v, meter=None):
        self._check(state)
        state.seen += 1
        return state

    def attend(self, state, q, meter=None):
        raise EmptyCacheError(f"{self.name} keeps no cache; decode by recomputing the sequence")
