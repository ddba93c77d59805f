"""Gated causal-attention recommender backbone (simplified HSTU block).

Each block computes, on the layer-normalised input ``xn``::

    q, k, v, u = xn W_Q, xn W_K, xn W_V, xn W_U
    a = attention(q, k, v)            # causal, multi-head; policy-dependent
    x = x + (silu(u) * a) W_O

Tokens are ``item_emb[v_t] + label_emb[y_t]``. The CTR head scores a
candidate by ``sigmoid(h_t . item_emb[candidate])``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .numerics import F32, F64, MacMeter, Rng, ShapeError, as_matrix, layer_norm, matmul, sigmoid, silu
from .policies import CachePolicy, Native, PolicyConfig, PolicyError, RecomputeState, build_policy

PROJECTIONS = ("W_Q", "W_K", "W_V", "W_U", "W_O")
CHECKPOINT_MAGIC = b"MALLOCv1"
PROB_EPS = 1e-7


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    n_heads: int = 8
    n_blocks: int = 8
    max_seq_len: int = 128
    n_items: int = 1
    label_vocab: int = 2
    bytes_per_element: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_seq_len < 2 or self.n_blocks < 1 or self.n_items < 1:
            raise ValueError("need max_seq_len >= 2, n_blocks >= 1, n_items >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class Parameters:
    item_emb: np.ndarray
    label_emb: np.ndarray
    blocks: list[dict[str, np.ndarray]] = field(default_factory=list)

    def matrices(self) -> list[tuple[str, np.ndarray]]:
        out = [("item_emb", self.item_emb), ("label_emb", self.label_emb)]
        for i, blk in enumerate(self.blocks):
            out += [(f"blocks.{i}.{name}", blk[name]) for name in PROJECTIONS]
        return out

    def copy(self) -> "Parameters":
        return Parameters(self.item_emb.copy(), self.label_emb.copy(), [{k: v.copy() for k, v in b.items()} for b in self.blocks])

    def astype(self, dtype) -> "Parameters":
        return Parameters(
            self.item_emb.astype(dtype), self.label_emb.astype(dtype),
            [{k: v.astype(dtype) for k, v in b.items()} for b in self.blocks],
        )


def init_params(config: ModelConfig, rng: Rng) -> Parameters:
    """Every matrix uniform in [-1/sqrt(d), 1/sqrt(d)], drawn in a fixed order."""
    d = config.d_model
    bound = 1.0 / np.sqrt(d)
    item = rng.uniform_matrix(config.n_items, d, -bound, bound)
    label = rng.uniform_matrix(config.label_vocab, d, -bound, bound)
    blocks = [{name: rng.uniform_matrix(d, d, -bound, bound) for name in PROJECTIONS} for _ in range(config.n_blocks)]
    return Parameters(item, label, blocks)


def embed_sequence(seq, params: Parameters) -> np.ndarray:
    """(L, d) token matrix; ``seq`` needs ``items`` and ``labels``."""
    items = np.asarray(seq.items, np.int64)
    labels = np.asarray(seq.labels, np.int64)
    d = params.item_emb.shape[1]
    if items.shape != labels.shape:
        raise DataError(f"{items.size} items but {labels.size} labels")
    for pos, (i, y) in enumerate(zip(items, labels)):
        if not 0 <= i < params.item_emb.shape[0]:
            raise DataError(f"item id {i} out of range at position {pos}")
        if not 0 <= y < params.label_emb.shape[0]:
            raise DataError(f"label {y} out of range at position {pos}")
    if items.size == 0:
        return np.zeros((0, d), F32)
    return (params.item_emb[items].astype(F64) + params.label_emb[labels].astype(F64)).astype(F32)


def bind_policies(policy: PolicyConfig | None, params: Parameters, config: ModelConfig, seed: int = 0) -> list[CachePolicy]:
    """One policy instance per block."""
    policy = policy or PolicyConfig()
    return [
        build_policy(policy, config.d_model, config.n_heads, block_weights=blk, max_len=config.max_seq_len, seed=seed, block=i)
        for i, blk in enumerate(params.blocks)
    ]


@dataclass
class ForwardTrace:
    Q: list[np.ndarray]
    K: list[np.ndarray]
    V: list[np.ndarray]
    hidden: np.ndarray
    macs: int


def _gate(u, a):
    return (silu(u) * np.asarray(a, F64)).astype(F32)


def forward_full(tokens, params: Parameters, config: ModelConfig, meter: MacMeter | None = None,
                 policies: list[CachePolicy] | None = None) -> ForwardTrace:
    """All positions at once. Returns final hidden states and per-block Q/K/V."""
    x = as_matrix(tokens)
    if x.shape[0] > config.max_seq_len:
        raise ShapeError(f"{x.shape[0]} tokens exceed max_seq_len {config.max_seq_len}")
    meter = meter if meter is not None else MacMeter()
    start = meter.total
    if policies is None:
        policies = [Native(config.d_model, config.n_heads)] * len(params.blocks)
    Qs, Ks, Vs = [], [], []
    for blk, policy in zip(params.blocks, policies):
        xn = layer_norm(x).astype(F32)
        q, k, v, u = (matmul(xn, blk[n], meter) for n in ("W_Q", "W_K", "W_V", "W_U"))
        Qs.append(q)
        Ks.append(k)
        Vs.append(v)
        if x.shape[0] == 0:
            a = np.zeros_like(v)
        else:
            a = policy.full_attention(q, k, v, meter)
        x = (x.astype(F64) + matmul(_gate(u, a), blk["W_O"], meter)).astype(F32)
    return ForwardTrace(Qs, Ks, Vs, x, meter.total - start)


class DecodeSession:
    """Incremental inference for one request under one policy.

    Cached policies keep one state per block. Recompute-mode policies keep
    only the request's input tokens and rerun the full forward each step.
    """

    def __init__(self, params: Parameters, config: ModelConfig, policy: PolicyConfig | None = None,
                 seed: int = 0, policies: list[CachePolicy] | None = None):
        self.params = params
        self.config = config
        self.policies = policies if policies is not None else bind_policies(policy, params, config, seed)
        if len(self.policies) != len(params.blocks):
            raise PolicyError(f"{len(self.policies)} policies for {len(params.blocks)} blocks")
        self.recompute = self.policies[0].mode == "recompute"
        self.tokens = np.zeros((0, config.d_model), F32)
        self.states = [p.empty_state() if not self.recompute else RecomputeState() for p in self.policies]
        self.hidden: np.ndarray | None = None

    @property
    def length(self) -> int:
        return self.tokens.shape[0] if self.recompute else self.states[0].seen

    def memory_bytes(self) -> int:
        return sum(s.memory_bytes() for s in self.states)

    def overhead_bytes(self) -> int:
        return sum(s.overhead_bytes() for s in self.states)

    def prefill(self, tokens, meter: MacMeter | None = None) -> np.ndarray:
        """Process a whole prefix; returns its last hidden state."""
        tokens = as_matrix(tokens)
        if self.length:
            raise PolicyError("prefill on a session that already holds tokens")
        if tokens.shape[0] == 0:
            return None
        trace = forward_full(tokens, self.params, self.config, meter, self.policies)
        if self.recompute:
            self.tokens = tokens.copy()
            self.states = [RecomputeState(seen=tokens.shape[0]) for _ in self.policies]
        else:
            self.states = [p.prefill(k, v, q) for p, q, k, v in zip(self.policies, trace.Q, trace.K, trace.V)]
        self.hidden = trace.hidden[-1]
        return self.hidden

    def step(self, token, meter: MacMeter | None = None) -> np.ndarray:
        """Admit one token and return its final hidden state."""
        x = as_matrix(token)
        meter = meter if meter is not None else MacMeter()
        if self.recompute:
            self.tokens = np.vstack([self.tokens, x])
            trace = forward_full(self.tokens, self.params, self.config, meter, self.policies)
            for s in self.states:
                s.seen += 1
            self.hidden = trace.hidden[-1]
            return self.hidden
        for i, (blk, policy) in enumerate(zip(self.params.blocks, self.policies)):
            xn = layer_norm(x).astype(F32)
            q, k, v, u = (matmul(xn, blk[n], meter) for n in ("W_Q", "W_K", "W_V", "W_U"))
            self.states[i] = policy.append(self.states[i], k[0], v[0], meter)
            ctx = policy.attend(self.states[i], q[0], meter).context
            x = (x.astype(F64) + matmul(_gate(u, ctx.reshape(1, -1)), blk["W_O"], meter)).astype(F32)
        self.hidden = x[0]
        return self.hidden


def forward_step(token, session: DecodeSession, meter: MacMeter | None = None) -> np.ndarray:
    return session.step(token, meter)


def predict_ctr(hidden, candidate: int, params: Parameters, meter: MacMeter | None = None) -> float:
    if not 0 <= candidate < params.item_emb.shape[0]:
        raise DataError(f"candidate item {candidate} out of range")
    h = np.asarray(hidden, F64).reshape(-1)
    if meter is not None:
        meter.add(h.size)
    return float(sigmoid(h @ params.item_emb[candidate].astype(F64)))


def bce_loss(preds, labels, eps: float = PROB_EPS) -> float:
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    p = np.asarray(preds, F64).reshape(-1)
    y = np.asarray(labels, F64).reshape(-1)
    if p.shape != y.shape:
        raise ShapeError(f"{p.size} predictions but {y.size} labels")
    if p.size == 0:
        raise ShapeError("bce_loss of an empty batch")
    p = np.clip(p, eps, 1 - eps)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


_CONFIG_FIELDS = ("d_model", "n_heads", "head_dim", "n_blocks", "max_seq_len", "n_items", "label_vocab", "bytes_per_element")


def save_checkpoint(path, params: Parameters, config: ModelConfig) -> None:
    """Flat little-endian file: magic, u32 config fields, then (rows, cols, f32 data) per matrix."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<8I", *(getattr(config, n) for n in _CONFIG_FIELDS)))
        for _, m in params.matrices():
            m = np.ascontiguousarray(m, dtype="<f4")
            f.write(struct.pack("<2I", *m.shape))
            f.write(m.tobytes())


def load_checkpoint(path) -> tuple[Parameters, ModelConfig]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    vals = dict(zip(_CONFIG_FIELDS, struct.unpack_from("<8I", data, 8)))
    head_dim = vals.pop("head_dim")
    config = ModelConfig(**vals)
    if head_dim != config.head_dim:
        raise DataError(f"{path}: head_dim {head_dim} inconsistent with d_model/n_heads")
    off = 8 + 32
    mats = []
    n_mats = 2 + len(PROJECTIONS) * config.n_blocks
    for _ in range(n_mats):
        if off + 8 > len(data):
            raise DataError(f"{path}: truncated checkpoint")
        rows, cols = struct.unpack_from("<2I", data, off)
        off += 8
        n = rows * cols * 4
        if off + n > len(data):
            raise DataError(f"{path}: truncated checkpoint")
        mats.append(np.frombuffer(data, "<f4", rows * cols, off).reshape(rows, cols).astype(F32))
        off += n
    if off != len(data):
        raise DataError(f"{path}: {len(data) - off} trailing bytes")
    blocks = [dict(zip(PROJECTIONS, mats[2 + 5 * i : 7 + 5 * i])) for i in range(config.n_blocks)]
    return Parameters(mats[0], mats[1], blocks), config
