"""Token-level policies: merging (Longformer window, beacons) and pruning (H2O, SnapKV)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import F32, F64, MacMeter
from .base import (
    ELEMENT_BYTES,
    AttendOutput,
    CachePolicy,
    KVState,
    PolicyError,
    RecomputePolicy,
    _rows,
    attend_one,
    causal_scores,
    masked_attention,
)


def longformer_mask(L: int, w: int, g: int) -> np.ndarray:
    """Causal sliding window of width ``w`` plus the first ``g`` positions."""
    if w < 1 or g < 0:
        raise PolicyError(f"longformer needs w >= 1 and g >= 0, got w={w}, g={g}")
    i = np.arange(L)[:, None]
    j = np.arange(L)[None, :]
    return (j <= i) & ((j > i - w) | (j < g))


class Longformer(RecomputePolicy):
    name = "longformer"

    def __init__(self, d_model, n_heads, window: int = 64, n_global: int = 4):
        super().__init__(d_model, n_heads)
        longformer_mask(1, window, n_global)
        self.window = window
        self.n_global = n_global

    def full_attention(self, Q, K, V, meter=None):
        mask = longformer_mask(Q.shape[0], self.window, self.n_global)
        return masked_attention(Q, K, V, self.n_heads, meter, mask=mask, sparse=True)[0]

    def describe(self):
        return {"name": self.name, "window": self.window, "n_global": self.n_global}


@dataclass
class BeaconState:
    beacons_K: np.ndarray
    beacons_V: np.ndarray
    buf_K: np.ndarray
    buf_V: np.ndarray
    seen: int = 0

    @property
    def K(self):
        return np.vstack([self.beacons_K, self.buf_K])

    @property
    def V(self):
        return np.vstack([self.beacons_V, self.buf_V])

    @property
    def n_entries(self) -> int:
        return self.beacons_K.shape[0] + self.buf_K.shape[0]

    def memory_bytes(self) -> int:
        return 2 * self.n_entries * self.beacons_K.shape[1] * ELEMENT_BYTES

    def overhead_bytes(self) -> int:
        return 0


class Beacon(CachePolicy):
    """Every ``ratio`` consecutive tokens collapse into one mean-pooled entry.

    Tokens wait in a raw buffer until a full chunk is available.
    """

    name = "beacon"
    state_type = BeaconState

    def __init__(self, d_model, n_heads, ratio: int = 8):
        super().__init__(d_model, n_heads)
        if ratio < 1:
            raise PolicyError(f"beacon ratio must be >= 1, got {ratio}")
        self.ratio = ratio

    def prefill(self, K, V, Q=None, meter=None):
        K = _rows(K, self.d_model)
        V = _rows(V, self.d_model)
        n_full = K.shape[0] // self.ratio * self.ratio
        r, d = self.ratio, self.d_model
        bk = K[:n_full].astype(F64).reshape(-1, r, d).mean(axis=1).astype(F32)
        bv = V[:n_full].astype(F64).reshape(-1, r, d).mean(axis=1).astype(F32)
        return BeaconState(bk, bv, K[n_full:].copy(), V[n_full:].copy(), seen=K.shape[0])

    def append(self, state, k, v, meter=None):
        self._check(state)
        state.buf_K = np.vstack([state.buf_K, _rows(k, self.d_model)])
        state.buf_V = np.vstack([state.buf_V, _rows(v, self.d_model)])
        state.seen += 1
        if state.buf_K.shape[0] == self.ratio:
            state.beacons_K = np.vstack([state.beacons_K, state.buf_K.astype(F64).mean(axis=0).astype(F32)])
            state.beacons_V = np.vstack([state.beacons_V, state.buf_V.astype(F64).mean(axis=0).astype(F32)])
            state.buf_K = state.buf_K[:0]
            state.buf_V = state.buf_V[:0]
        return state

    def attend(self, state, q, meter=None):
        self._check(state)
        return attend_one(np.asarray(q, F32).reshape(-1), state.K, state.V, self.n_heads, meter)

    def describe(self):
        return {"name": self.name, "ratio": self.ratio}


@dataclass
class ScoredState(KVState):
    """Retained tokens with their original positions and a per-token score."""

    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0, F64))
    pinned: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    def overhead_bytes(self) -> int:
        # fp32 score per retained token
        return self.scores.size * ELEMENT_BYTES

    def keep(self, idx: np.ndarray) -> None:
        idx = np.sort(np.asarray(idx, np.int64))
        self.K = self.K[idx]
        self.V = self.V[idx]
        self.positions = self.positions[idx]
        self.scores = self.scores[idx]
        self.pinned = self.pinned[idx]

    def add(self, k, v, score: float = 0.0, pinned: bool = False) -> None:
        self.push(k, v)
        self.positions = np.append(self.positions, self.seen)
        self.scores = np.append(self.scores, score)
        self.pinned = np.append(self.pinned, pinned)
        self.seen += 1


def _top_indices(scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` largest scores; earlier index wins ties."""
    if n <= 0:
        return np.zeros(0, np.int64)
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:n])


class H2O(CachePolicy):
    """Heavy-hitter eviction on cumulative attention mass.

    A token's score is the attention it has received, summed over heads and
    over every query that saw it. Once the cache holds more than ``budget``
    tokens, the lowest-scoring token outside the recent window is dropped.
    The newest token has not been scored yet and is never the victim.
    """

    name = "h2o"
    state_type = ScoredState

    def __init__(self, d_model, n_heads, budget: int = 16, recent: int = 4):
        super().__init__(d_model, n_heads)
        if budget < 1 or recent < 0 or recent > budget:
            raise PolicyError(f"h2o needs 1 <= budget and 0 <= recent <= budget, got {budget}, {recent}")
        self.budget = budget
        self.recent = recent

    def prefill(self, K, V, Q=None, meter=None):
        K = _rows(K, self.d_model)
        V = _rows(V, self.d_model)
        L = K.shape[0]
        if Q is not None and L:
            scores = causal_scores(_rows(Q, self.d_model), K, self.n_heads, meter).astype(F64).sum(axis=(0, 1))
        else:
            scores = np.zeros(L, F64)
        state = ScoredState(K.copy(), V.copy(), seen=L, positions=np.arange(L), scores=scores, pinned=np.zeros(L, bool))
        if L > self.budget:
            n_recent = self.recent
            old = L - n_recent
            keep = np.concatenate([_top_indices(scores[:old], self.budget - n_recent), np.arange(old, L)])
            state.keep(keep)
        return state

    def append(self, state, k, v, meter=None):
        self._check(state)
        state.add(_rows(k, self.d_model), _rows(v, self.d_model))
        self.evict(state)
        return state

    def evict(self, state: ScoredState) -> None:
        while state.n_entries > self.budget:
            protected = max(self.recent, 1)
            candidates = state.scores[: state.n_entries - protected]
            victim = int(np.lexsort((np.arange(candidates.size), candidates))[0])
            state.keep(np.delete(np.arange(state.n_entries), victim))

    def attend(self, state, q, meter=None):
        self._check(state)
        out = attend_one(np.asarray(q, F32).reshape(-1), state.K, state.V, self.n_heads, meter)
        state.scores = state.scores + out.weights.astype(F64).sum(axis=0)
        return out

    def describe(self):
        return {"name": self.name, "budget": self.budget, "recent": self.recent}


def pool_votes(votes: np.ndarray, width: int) -> np.ndarray:
    """Max pooling, stride 1, window centred on each position."""
    if width <= 1:
        return votes.copy()
    half = width // 2
    padded = np.concatenate([np.full(half, -np.inf), votes, np.full(width - 1 - half, -np.inf)])
    return np.lib.stride_tricks.sliding_window_view(padded, width).max(axis=1)


def snapkv_select(weights: np.ndarray, budget: int, window: int, pool: int) -> tuple[np.ndarray, np.ndarray]:
    """Choose the tokens a SnapKV prefill keeps.

    ``weights`` is (H, L, L) attention (causal). The last ``window`` queries
    vote for prefix tokens; votes are summed over those queries and heads,
    max-pooled, and the top ``budget - window`` prefix tokens are kept along
    with the window itself. Returns (kept indices, pinned flags).
    """
    L = weights.shape[-1]
    if L <= budget:
        return np.arange(L), np.zeros(L, bool)
    window = min(window, budget)
    prefix = L - window
    votes = weights[:, L - window :, :prefix].astype(F64).sum(axis=(0, 1))
    chosen = _top_indices(pool_votes(votes, pool), budget - window)
    keep = np.concatenate([chosen, np.arange(prefix, L)])
    pinned = np.concatenate([np.ones(chosen.size, bool), np.zeros(window, bool)])
    return keep, pinned


class SnapKV(CachePolicy):
    """One-shot prefill selection by observation-window votes.

    Selected prefix tokens stay for the rest of the request. The window
    tokens and anything appended later form a FIFO that shares the
    remaining budget.
    """

    name = "snapkv"
    state_type = ScoredState

    def __init__(self, d_model, n_heads, budget: int = 16, window: int = 4, pool: int = 3):
        super().__init__(d_model, n_heads)
        if budget < 1 or window < 1 or pool < 1:
            raise PolicyError(f"snapkv counts must be >= 1, got budget={budget}, window={window}, pool={pool}")
        if window > budget:
            raise PolicyError(f"snapkv observation window {window} exceeds budget {budget}")
        self.budget = budget
        self.window = window
        self.pool = pool

    def prefill(self, K, V, Q=None, meter=None):
        K = _rows(K, self.d_model)
        V = _rows(V, self.d_model)
        L = K.shape[0]
        state = ScoredState(K.copy(), V.copy(), seen=L, positions=np.arange(L), scores=np.zeros(L), pinned=np.zeros(L, bool))
        if L > self.budget:
            if Q is None:
                raise PolicyError("snapkv prefill over budget needs the prefill queries")
            w = causal_scores(_rows(Q, self.d_model), K, self.n_heads, meter)
            keep, pinned = snapkv_select(w, self.budget, self.window, self.pool)
            order = np.argsort(keep)
            state.keep(keep[order])
            state.pinned = pinned[order]
        return state

    def append(self, state, k, v, meter=None):
        self._check(state)
        state.add(_rows(k, self.d_model), _rows(v, self.d_model))
        while state.n_entries > self.budget:
            fifo = np.flatnonzero(~state.pinned)
            state.keep(np.delete(np.arange(state.n_entries), fifo[0]))
        return state

    def attend(self, state, q, meter=None):
        self._check(state)
        return attend_one(np.asarray(q, F32).reshape(-1), state.K, state.V, self.n_heads, meter)

    def describe(self):
        return {"name": self.name, "budget": self.budget, "window": self.window, "pool": self.pool}
