"""Sequence-level policies: full cache, low-rank time projection, LSH buckets."""

from __future__ import annotations

import numpy as np

from ..numerics import F32, F64, MacMeter, Rng, ShapeError, batched_matmul, matmul, softmax_rows
from .base import CachePolicy, PolicyError, RecomputePolicy, masked_attention, merge_heads, split_heads


class Native(CachePolicy):
    name = "native"


def linformer_project(K, V, E, F, meter: MacMeter | None = None):
    """Project L keys/values onto k entries with the first L columns of E, F."""
    L = K.shape[0]
    if E.shape[1] < L or F.shape[1] < L:
        raise ShapeError(f"projection maps {E.shape}/{F.shape} shorter than sequence {L}")
    return matmul(E[:, :L], K, meter), matmul(F[:, :L], V, meter)


class Linformer(RecomputePolicy):
    """Keys and values projected along time by fixed maps E, F (k x L_max).

    Every position i only sees the projection of its own prefix, so the
    projected sets are accumulated as running sums of ``E[:, j] k_j``.
    A projected entry whose map row is still all zero is excluded from the
    softmax.
    """

    name = "linformer"

    def __init__(self, d_model, n_heads, k: int = 64, max_len: int = 1024, E=None, F=None, rng: Rng | None = None):
        super().__init__(d_model, n_heads)
        if k < 1:
            raise PolicyError(f"linformer projection length must be >= 1, got {k}")
        self.k = k
        self.max_len = max_len
        if E is None or F is None:
            rng = rng or Rng(0)
            scale = 1.0 / np.sqrt(k)
            E = (rng.normal_array(k * max_len) * scale).reshape(k, max_len)
            F = (rng.normal_array(k * max_len) * scale).reshape(k, max_len)
        self.E = np.asarray(E, F32)
        self.F = np.asarray(F, F32)
        if self.E.shape != self.F.shape or self.E.shape[0] != k:
            raise PolicyError(f"E {self.E.shape} and F {self.F.shape} must both be {k} x L_max")
        self.max_len = self.E.shape[1]

    def full_attention(self, Q, K, V, meter=None):
        L, d = Q.shape
        if L > self.max_len:
            raise ShapeError(f"sequence {L} longer than projection maps {self.max_len}")
        H, hd = self.n_heads, self.head_dim
        E = self.E[:, :L].astype(F64)
        Fm = self.F[:, :L].astype(F64)
        if meter is not None:
            # running projections: one k x d outer product per position for K and V
            meter.add(2 * L * self.k * d)
        Kp = np.zeros((self.k, d), F64)
        Vp = np.zeros((self.k, d), F64)
        live = np.zeros(self.k, dtype=bool)
        out = np.empty((L, d), F32)
        for i in range(L):
            Kp += np.outer(E[:, i], K[i])
            Vp += np.outer(Fm[:, i], V[i])
            live |= (E[:, i] != 0) | (Fm[:, i] != 0)
            kp = Kp.astype(F32)
            vp = Vp.astype(F32)
            qh = Q[i].reshape(H, 1, hd)
            s = batched_matmul(qh, split_heads(kp, H).transpose(0, 2, 1), meter).astype(F64) / np.sqrt(hd)
            w = softmax_rows(s, np.broadcast_to(live, s.shape))
            out[i] = batched_matmul(w, split_heads(vp, H), meter).reshape(-1)
        return out

    def describe(self):
        return {"name": self.name, "k": self.k}


def lsh_bucket(x, rotation) -> np.ndarray | int:
    """Angular LSH: argmax over [xR, -xR]. Works on a vector or rows."""
    R = np.asarray(rotation, F64)
    y = np.asarray(x, F64) @ R
    b = np.argmax(np.concatenate([y, -y], axis=-1), axis=-1)
    return int(b) if np.ndim(b) == 0 else b


class Reformer(RecomputePolicy):
    """Attention restricted to query/key pairs that hash to the same bucket.

    Queries and keys are hashed per head with one frozen rotation per block.
    Causality still applies and every token may attend to itself.
    """

    name = "reformer"

    def __init__(self, d_model, n_heads, n_buckets: int = 8, rotation=None, rng: Rng | None = None):
        super().__init__(d_model, n_heads)
        if n_buckets < 2 or n_buckets % 2:
            raise PolicyError(f"n_buckets must be even and >= 2, got {n_buckets}")
        self.n_buckets = n_buckets
        if rotation is None:
            rng = rng or Rng(0)
            rotation = rng.normal_array(self.head_dim * (n_buckets // 2)).reshape(self.head_dim, n_buckets // 2)
        self.rotation = np.asarray(rotation, F32)
        if self.rotation.shape != (self.head_dim, n_buckets // 2):
            raise PolicyError(f"rotation must be {self.head_dim} x {n_buckets // 2}, got {self.rotation.shape}")

    def bucket_mask(self, Q, K, meter=None) -> np.ndarray:
        """(H, L, L) admission mask from per-head buckets (diagonal always on)."""
        H = self.n_heads
        L = Q.shape[0]
        if meter is not None:
            meter.add(2 * L * self.d_model * (self.n_buckets // 2))
        bq = lsh_bucket(split_heads(Q, H), self.rotation)
        bk = lsh_bucket(split_heads(K, H), self.rotation)
        same = bq[:, :, None] == bk[:, None, :]
        return same | np.eye(L, dtype=bool)[None]

    def full_attention(self, Q, K, V, meter=None):
        mask = self.bucket_mask(Q, K, meter)
        return masked_attention(Q, K, V, self.n_heads, meter, mask=mask, sparse=True)[0]

    def describe(self):
        return {"name": self.name, "n_buckets": self.n_buckets}


__all__ = ["Native", "Linformer", "Reformer", "linformer_project", "lsh_bucket", "merge_heads"]
