"""Compute (MACs) and KV-memory accounting for one decode request.

Conventions: embedding lookups, normalisation, softmax, activations and
element-wise gating are not counted. A request holds ``cached_len``
history tokens and decodes one more position, which attends to the
``cached_len + 1`` positions including itself. Memory is the cache
resident when that decode step starts, summed over the batch.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np

from .backbone import DecodeSession, ModelConfig, Parameters, predict_ctr
from .numerics import F32, MacMeter, Rng
from .policies import PolicyConfig, longformer_mask

MEM_CEILING_ENV = "MALLOC_BENCH_MEM_CEILING_BYTES"
MIB = 2**20


class UnsupportedFormula(ValueError):
    pass


class MemoryCeilingExceeded(RuntimeError):
    pass


@dataclass
class ResourceReport:
    macs_measured: int
    macs_formula: int | None
    kv_peak_bytes: int
    overhead_bytes: int
    batch: int
    mode: str
    cached_len: int

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def kv_peak_mib(self) -> float:
        return self.kv_peak_bytes / MIB


def native_kv_bytes(cached_len: int, d_model: int, n_blocks: int, batch: int, bytes_per_elem: int = 4) -> int:
    """K and V for every cached token, block and request."""
    return 2 * cached_len * d_model * bytes_per_elem * n_blocks * batch


def _entries_after_append(policy: PolicyConfig, n: int) -> int:
    """Entries a cached policy attends over once ``n`` tokens were admitted."""
    p = policy.params
    if policy.name in ("h2o", "snapkv"):
        return min(n, p.get("budget", 16))
    if policy.name == "beacon":
        r = p.get("ratio", 8)
        return n // r + n % r
    return n


def macs_formula(policy: PolicyConfig, config: ModelConfig, cached_len: int, batch: int = 1,
                 recompute: bool = False) -> int:
    """Closed-form MACs of one decode step (or of one full pass when recomputing).

    Raises ``UnsupportedFormula`` for data-dependent cost (Reformer buckets).
    """
    d, nb = config.d_model, config.n_blocks
    n = cached_len + 1
    proj = 5 * d * d
    name = policy.name
    if recompute or policy.mode == "recompute":
        L = n
        if name in ("native", "mqa", "gqa", "h2o", "snapkv", "beacon", "kivi", "intactkv"):
            attn = 2 * L * L * d
        elif name == "longformer":
            mask = longformer_mask(L, policy.params.get("window", 64), policy.params.get("n_global", 4))
            attn = 2 * int(mask.sum()) * d
        elif name == "linformer":
            attn = 4 * L * policy.params.get("k", 64) * d
        else:
            raise UnsupportedFormula(f"no closed-form full-pass count for {name}")
        per_block = proj * L + attn
    elif name in ("native", "mqa", "gqa", "kivi", "intactkv", "h2o", "snapkv", "beacon"):
        per_block = proj + 2 * _entries_after_append(policy, n) * d
    elif name == "mla":
        dc = policy.params.get("latent", 64)
        per_block = proj + 2 * d * dc + n * (2 * d * dc + 2 * d)
    elif name == "rwkv":
        per_block = proj + 2 * d
    else:
        raise UnsupportedFormula(f"no closed-form decode count for {name}")
    return batch * (nb * per_block + d)


def memory_ceiling() -> int | None:
    raw = os.environ.get(MEM_CEILING_ENV)
    return int(raw) if raw else None


def random_request(config: ModelConfig, params: Parameters, length: int, rng: Rng) -> np.ndarray:
    items = rng.integers(length, config.n_items)
    labels = rng.integers(length, 2)
    return (params.item_emb[items].astype(np.float64) + params.label_emb[labels]).astype(F32)


def measure(params: Parameters, config: ModelConfig, policy: PolicyConfig | None = None, *,
            cached_len: int | None = None, batch: int = 8, seed: int = 0, requests=None,
            ceiling: int | None = None) -> ResourceReport:
    """Run ``batch`` requests: prefill ``cached_len`` tokens, then decode and score one position.

    ``requests`` may supply the token matrices (each ``cached_len + 1`` rows);
    otherwise random ones are drawn. Only the decode step is metered.
    """
    policy = policy or PolicyConfig()
    cached_len = config.max_seq_len - 1 if cached_len is None else cached_len
    ceiling = memory_ceiling() if ceiling is None else ceiling
    full = native_kv_bytes(cached_len + 1, config.d_model, config.n_blocks, batch, config.bytes_per_element)
    if ceiling is not None and full > ceiling:
        raise MemoryCeilingExceeded(f"scenario needs up to {full} cache bytes, ceiling is {ceiling}")
    rng = Rng(seed).fork(77)
    meter = MacMeter()
    resident = overhead = 0
    for b in range(batch):
        X = requests[b] if requests is not None else random_request(config, params, cached_len + 1, rng)
        sess = DecodeSession(params, config, policy, seed=seed)
        sess.prefill(X[:cached_len])
        resident += sess.memory_bytes()
        overhead += sess.overhead_bytes()
        h = sess.step(X[cached_len], meter)
        predict_ctr(h, 0, params, meter)
    try:
        formula = macs_formula(policy, config, cached_len, batch)
    except UnsupportedFormula:
        formula = None
    return ResourceReport(meter.total, formula, resident, overhead, batch, policy.mode, cached_len)
