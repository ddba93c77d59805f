"""Head-level policies: shared key/value groups and low-rank latent caching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import F32, F64, MacMeter, ShapeError, matmul
from .base import ELEMENT_BYTES, CachePolicy, KVState, PolicyError, _rows, attend_one, masked_attention


def pool_heads(X: np.ndarray, n_heads: int, n_groups: int) -> np.ndarray:
    """Mean of the H/G contiguous head slices in each group: (n, d) -> (n, G*hd)."""
    n, d = X.shape
    hd = d // n_heads
    return X.astype(F64).reshape(n, n_groups, n_heads // n_groups, hd).mean(axis=2).reshape(n, n_groups * hd).astype(F32)


class GQA(CachePolicy):
    """Grouped keys/values: each group stores the mean of its heads' K/V."""

    name = "gqa"

    def __init__(self, d_model, n_heads, groups: int = 4):
        super().__init__(d_model, n_heads)
        if groups < 1 or n_heads % groups:
            raise PolicyError(f"groups {groups} must divide n_heads {n_heads}")
        self.groups = groups

    @property
    def kv_width(self) -> int:
        return self.groups * self.head_dim

    def full_attention(self, Q, K, V, meter=None):
        Kg = pool_heads(K, self.n_heads, self.groups)
        Vg = pool_heads(V, self.n_heads, self.groups)
        return masked_attention(Q, Kg, Vg, self.n_heads, meter, n_groups=self.groups)[0]

    def prefill(self, K, V, Q=None, meter=None):
        K = _rows(K, self.d_model)
        V = _rows(V, self.d_model)
        return KVState(pool_heads(K, self.n_heads, self.groups), pool_heads(V, self.n_heads, self.groups), seen=K.shape[0])

    def append(self, state, k, v, meter=None):
        self._check(state)
        state.push(pool_heads(_rows(k, self.d_model), self.n_heads, self.groups), pool_heads(_rows(v, self.d_model), self.n_heads, self.groups))
        state.seen += 1
        return state

    def attend(self, state, q, meter=None):
        self._check(state)
        return attend_one(np.asarray(q, F32).reshape(-1), state.K, state.V, self.n_heads, meter, n_groups=self.groups)

    def describe(self):
        return {"name": self.name, "groups": self.groups}


class MQA(GQA):
    name = "mqa"

    def __init__(self, d_model, n_heads):
        super().__init__(d_model, n_heads, groups=1)

    def describe(self):
        return {"name": self.name}


def mla_compress(kv: np.ndarray, W_down: np.ndarray, meter: MacMeter | None = None) -> np.ndarray:
    """Latent for each row of ``[k | v]`` (n, 2d) -> (n, d_c)."""
    return matmul(np.atleast_2d(kv), W_down, meter)


def mla_reconstruct(C: np.ndarray, W_upK: np.ndarray, W_upV: np.ndarray, meter: MacMeter | None = None):
    C = np.atleast_2d(C)
    return matmul(C, W_upK, meter), matmul(C, W_upV, meter)


def mla_maps_from_weights(W_K: np.ndarray, W_V: np.ndarray, latent: int):
    """Rank-``latent`` factorisation of the joint key/value map.

    The stacked row ``[k | v]`` of any input lies in the row space of
    ``[W_K | W_V]``; projecting onto its top right singular vectors is the
    best rank-``latent`` code for isotropic inputs.
    """
    W = np.hstack([W_K, W_V]).astype(F64)
    _, _, vt = np.linalg.svd(W, full_matrices=True)
    basis = vt[:latent].T  # (2d, latent)
    d = W_K.shape[1]
    return basis.astype(F32), basis.T[:, :d].astype(F32), basis.T[:, d:].astype(F32)


@dataclass
class LatentState:
    C: np.ndarray
    seen: int = 0

    @property
    def n_entries(self) -> int:
        return self.C.shape[0]

    def memory_bytes(self) -> int:
        return self.C.size * ELEMENT_BYTES

    def overhead_bytes(self) -> int:
        return 0


class MLA(CachePolicy):
    """Cache a ``latent``-wide code of ``[k | v]`` and rebuild K/V when attending.

    Reconstruction is done naively (materialise every K/V row, then attend).
    """

    name = "mla"
    state_type = LatentState

    def __init__(self, d_model, n_heads, latent: int = 64, W_down=None, W_upK=None, W_upV=None, W_K=None, W_V=None):
        super().__init__(d_model, n_heads)
        if latent < 1 or latent > 2 * d_model:
            raise PolicyError(f"latent width {latent} must be in [1, {2 * d_model}]")
        self.latent = latent
        if W_down is None:
            if W_K is None or W_V is None:
                raise PolicyError("mla needs explicit maps or the block's W_K/W_V to derive them")
            W_down, W_upK, W_upV = mla_maps_from_weights(W_K, W_V, latent)
        self.W_down = np.asarray(W_down, F32)
        self.W_upK = np.asarray(W_upK, F32)
        self.W_upV = np.asarray(W_upV, F32)
        expect = [(2 * d_model, latent), (latent, d_model), (latent, d_model)]
        got = [self.W_down.shape, self.W_upK.shape, self.W_upV.shape]
        if got != expect:
            raise ShapeError(f"mla maps have shapes {got}, expected {expect}")

    def full_attention(self, Q, K, V, meter=None):
        C = mla_compress(np.hstack([K, V]), self.W_down, meter)
        Kr, Vr = mla_reconstruct(C, self.W_upK, self.W_upV, meter)
        return masked_attention(Q, Kr, Vr, self.n_heads, meter)[0]

    def prefill(self, K, V, Q=None, meter=None):
        K = _rows(K, self.d_model)
        V = _rows(V, self.d_model)
        if K.shape[0] == 0:
            return LatentState(np.zeros((0, self.latent), F32))
        return LatentState(mla_compress(np.hstack([K, V]), self.W_down, meter), seen=K.shape[0])

    def append(self, state, k, v, meter=None):
        self._check(state)
        kv = np.hstack([_rows(k, self.d_model), _rows(v, self.d_model)])
        state.C = np.vstack([state.C, mla_compress(kv, self.W_down, meter)])
        state.seen += 1
        return state

    def attend(self, state, q, meter=None):
        self._check(state)
        Kr, Vr = mla_reconstruct(state.C, self.W_upK, self.W_upV, meter)
        return attend_one(np.asarray(q, F32).reshape(-1), Kr, Vr, self.n_heads, meter)

    def describe(self):
        return {"name": self.name, "latent": self.latent}
