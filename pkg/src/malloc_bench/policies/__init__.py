"""Cache policies grouped by the granularity at which they save memory."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import Rng
from .architecture import RWKV, rwkv_init_state, rwkv_step
from .base import (
    AttendOutput,
    CachePolicy,
    EmptyCacheError,
    KVState,
    PolicyError,
    RecomputeState,
    attend_one,
    masked_attention,
)
from .head import GQA, MLA, MQA, mla_compress, mla_maps_from_weights, mla_reconstruct, pool_heads
from .precision import IntactKV, KIVI, dequantize_lowbit, quantize_lowbit
from .sequence import Linformer, Native, Reformer, linformer_project, lsh_bucket
from .token import H2O, Beacon, Longformer, SnapKV, longformer_mask, pool_votes, snapkv_select

POLICIES = {
    cls.name: cls
    for cls in (Native, Linformer, Reformer, Longformer, Beacon, H2O, SnapKV, MQA, GQA, MLA, KIVI, IntactKV, RWKV)
}

# granularity label per policy, for reports
LEVELS = {
    "native": "sequence", "linformer": "sequence", "reformer": "sequence",
    "longformer": "token", "beacon": "token", "h2o": "token", "snapkv": "token",
    "mqa": "head", "gqa": "head", "mla": "head",
    "kivi": "precision", "intactkv": "precision",
    "rwkv": "architecture",
}

_PARAMS = {
    "native": (),
    "linformer": ("k",),
    "reformer": ("n_buckets",),
    "longformer": ("window", "n_global"),
    "beacon": ("ratio",),
    "h2o": ("budget", "recent"),
    "snapkv": ("budget", "window", "pool"),
    "mqa": (),
    "gqa": ("groups",),
    "mla": ("latent",),
    "kivi": ("bits", "group"),
    "intactkv": ("bits", "pivots", "group"),
    "rwkv": ("decay", "bonus"),
}


@dataclass(frozen=True)
class PolicyConfig:
    """Which policy to run and its parameters; unspecified ones take defaults."""

    name: str = "native"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in POLICIES:
            raise PolicyError(f"unknown policy {self.name!r}; choose from {sorted(POLICIES)}")
        unknown = set(self.params) - set(_PARAMS[self.name])
        if unknown:
            raise PolicyError(f"{self.name} does not take {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        name = d.pop("name")
        if isinstance(d.get("params"), dict):
            d = {**d.pop("params"), **d}
        return cls(name, d)

    def to_dict(self) -> dict:
        return {"name": self.name, **self.params}

    @property
    def label(self) -> str:
        if not self.params:
            return self.name
        inner = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()) if not isinstance(v, (list, tuple)))
        return f"{self.name}({inner})" if inner else self.name

    @property
    def mode(self) -> str:
        return POLICIES[self.name].mode


def build_policy(cfg: PolicyConfig, d_model: int, n_heads: int, *, block_weights=None,
                 max_len: int = 1024, seed: int = 0, block: int = 0) -> CachePolicy:
    """Instantiate ``cfg`` for one block.

    Frozen random maps (Linformer projections, Reformer rotations) come from
    a stream keyed by ``seed`` and ``block``; MLA derives its maps from the
    block's key/value weights.
    """
    cls = POLICIES[cfg.name]
    kw = dict(cfg.params)
    if cfg.name in ("linformer", "reformer"):
        kw["rng"] = Rng(seed).fork(1000 + block)
    if cfg.name == "linformer":
        kw["max_len"] = max_len
    if cfg.name == "mla" and block_weights is not None:
        kw.setdefault("W_K", block_weights["W_K"])
        kw.setdefault("W_V", block_weights["W_V"])
    return cls(d_model, n_heads, **kw)


__all__ = [
    "AttendOutput", "CachePolicy", "EmptyCacheError", "KVState", "PolicyError", "RecomputeState",
    "POLICIES", "LEVELS", "PolicyConfig", "build_policy",
    "Native", "Linformer", "Reformer", "Longformer", "Beacon", "H2O", "SnapKV",
    "MQA", "GQA", "MLA", "KIVI", "IntactKV", "RWKV",
    "attend_one", "masked_attention", "linformer_project", "lsh_bucket", "longformer_mask",
    "pool_votes", "snapkv_select", "pool_heads", "mla_compress", "mla_reconstruct",
    "mla_maps_from_weights", "quantize_lowbit", "dequantize_lowbit", "rwkv_init_state", "rwkv_step",
]
