import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from malloc_bench.numerics import MacMeter
from malloc_bench.policies import (
    GQA, H2O, KIVI, MLA, MQA, RWKV, Beacon, EmptyCacheError, IntactKV, Linformer, Longformer, Native,
    PolicyConfig, PolicyError, Reformer, SnapKV, build_policy, dequantize_lowbit, linformer_project,
    longformer_mask, lsh_bucket, mla_compress, mla_reconstruct, pool_heads, quantize_lowbit,
    rwkv_init_state, rwkv_step, snapkv_select,
)
from malloc_bench.policies.token import ScoredState, pool_votes


def rand(shape, seed, scale=1.0):
    return (np.random.default_rng(seed).normal(size=shape) * scale).astype(np.float32)


def attend_oracle(q, K, V, H, allowed=None):
    """Per-head softmax attention written out with explicit loops."""
    n, d = K.shape
    hd = d // H
    out = np.zeros(d)
    for h in range(H):
        sl = slice(h * hd, (h + 1) * hd)
        s = np.array([float(np.dot(q[sl].astype(float), K[j, sl].astype(float))) / np.sqrt(hd) for j in range(n)])
        ok = np.ones(n, bool) if allowed is None else allowed[h]
        s = np.where(ok, s, -np.inf)
        w = np.exp(s - s[ok].max())
        w /= w.sum()
        out[sl] = w @ V[:, sl].astype(float)
    return out


def causal_oracle(Q, K, V, H, mask=None):
    L = Q.shape[0]
    out = np.zeros(Q.shape)
    for i in range(L):
        allowed = np.zeros((H, i + 1), bool)
        for h in range(H):
            allowed[h] = np.ones(i + 1, bool) if mask is None else mask[h][i, : i + 1]
        out[i] = attend_oracle(Q[i], K[: i + 1], V[: i + 1], H, allowed)
    return out


# -- shared contract ---------------------------------------------------------

ALL_CACHED = [
    PolicyConfig("native"), PolicyConfig("h2o", {"budget": 4, "recent": 1}), PolicyConfig("snapkv", {"budget": 4, "window": 2}),
    PolicyConfig("beacon", {"ratio": 2}), PolicyConfig("gqa", {"groups": 2}), PolicyConfig("mqa"),
    PolicyConfig("mla", {"latent": 8}), PolicyConfig("kivi", {"group": 8}), PolicyConfig("intactkv", {"group": 8, "pivots": 2}),
    PolicyConfig("rwkv"),
]


def make(cfg, d=16, H=4):
    weights = {"W_K": rand((d, d), 1), "W_V": rand((d, d), 2)}
    return build_policy(cfg, d, H, block_weights=weights, max_len=32)


@pytest.mark.parametrize("cfg", ALL_CACHED, ids=lambda c: c.label)
def test_seen_count_is_true_position_and_weights_normalised(cfg):
    p = make(cfg)
    K, V, Q = rand((9, 16), 3), rand((9, 16), 4), rand((9, 16), 5)
    st_ = p.prefill(K[:5], V[:5], Q[:5])
    assert st_.seen == 5
    for t in range(5, 9):
        st_ = p.append(st_, K[t], V[t])
        out = p.attend(st_, Q[t])
        assert st_.seen == t + 1
        assert np.isfinite(out.context).all()
        if out.weights is not None:
            np.testing.assert_allclose(out.weights.sum(axis=1), 1, atol=1e-6)


@pytest.mark.parametrize("cfg", ALL_CACHED, ids=lambda c: c.label)
def test_empty_cache_memory_is_zero_and_attend_raises(cfg):
    p = make(cfg)
    s = p.empty_state()
    if cfg.name != "rwkv":
        assert s.memory_bytes() == 0
    with pytest.raises(EmptyCacheError):
        p.attend(s, rand(16, 0))


def test_state_from_another_policy_is_rejected():
    a, b = make(PolicyConfig("native")), make(PolicyConfig("mla", {"latent": 8}))
    with pytest.raises(PolicyError):
        b.append(a.prefill(rand((2, 16), 0), rand((2, 16), 1)), rand(16, 2), rand(16, 3))


def test_invalid_configs():
    with pytest.raises(PolicyError):
        PolicyConfig("gqa", {"groups": 3}) and GQA(16, 4, groups=3)
    with pytest.raises(PolicyError):
        KIVI(16, 4, bits=3)
    with pytest.raises(PolicyError):
        PolicyConfig("nope")
    with pytest.raises(PolicyError):
        PolicyConfig("h2o", {"ratio": 2})
    with pytest.raises(PolicyError):
        MLA(16, 4, latent=33, W_K=rand((16, 16), 0), W_V=rand((16, 16), 1))


def test_policy_config_round_trip_and_nested_params():
    cfg = PolicyConfig.from_dict({"name": "h2o", "budget": 8})
    assert cfg == PolicyConfig.from_dict({"name": "h2o", "params": {"budget": 8}})
    assert PolicyConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.label == "h2o(budget=8)"
    assert cfg.mode == "cached" and PolicyConfig("longformer").mode == "recompute"


# -- native ------------------------------------------------------------------

def test_native_prefill_stores_every_row():
    K, V = rand((5, 16), 0), rand((5, 16), 1)
    s = Native(16, 4).prefill(K, V)
    assert s.n_entries == 5
    np.testing.assert_array_equal(s.K, K)
    np.testing.assert_array_equal(s.V, V)
    assert s.memory_bytes() == 2 * 5 * 16 * 4


def test_singleton_cache_returns_its_value():
    p = Native(16, 4)
    v = rand(16, 1)
    out = p.attend(p.prefill(rand((1, 16), 0), v.reshape(1, -1)), rand(16, 2))
    np.testing.assert_array_equal(out.context, v)


def test_native_attend_matches_oracle():
    p = Native(16, 4)
    K, V, q = rand((7, 16), 0), rand((7, 16), 1), rand(16, 2)
    out = p.attend(p.prefill(K, V), q)
    np.testing.assert_allclose(out.context, attend_oracle(q, K, V, 4), atol=1e-6)


def test_native_full_attention_matches_causal_oracle():
    Q, K, V = rand((6, 16), 0), rand((6, 16), 1), rand((6, 16), 2)
    np.testing.assert_allclose(Native(16, 4).full_attention(Q, K, V), causal_oracle(Q, K, V, 4), atol=1e-6)


# -- head level --------------------------------------------------------------

def test_pool_heads_is_contiguous_mean():
    X = rand((3, 8), 0)
    P = pool_heads(X, 4, 2)
    np.testing.assert_allclose(P[:, :2], (X[:, 0:2] + X[:, 2:4]) / 2, atol=1e-7)
    np.testing.assert_allclose(P[:, 2:], (X[:, 4:6] + X[:, 6:8]) / 2, atol=1e-7)
    np.testing.assert_array_equal(pool_heads(X, 4, 4), X)


def test_gqa_g_equals_h_matches_native():
    K, V, q = rand((6, 16), 0), rand((6, 16), 1), rand(16, 2)
    g = GQA(16, 4, groups=4)
    n = Native(16, 4)
    np.testing.assert_allclose(g.attend(g.prefill(K, V), q).context, n.attend(n.prefill(K, V), q).context, atol=1e-6)


def test_gqa_one_group_equals_mqa():
    K, V, q = rand((6, 16), 0), rand((6, 16), 1), rand(16, 2)
    g, m = GQA(16, 4, groups=1), MQA(16, 4)
    np.testing.assert_array_equal(g.attend(g.prefill(K, V), q).context, m.attend(m.prefill(K, V), q).context)


def test_gqa_heads_read_their_group():
    K, V, q = rand((5, 16), 0), rand((5, 16), 1), rand(16, 2)
    g = GQA(16, 4, groups=2)
    Kp, Vp = pool_heads(K, 4, 2), pool_heads(V, 4, 2)
    # expand each group to the query heads that read it: heads 0,1 -> group 0; heads 2,3 -> group 1
    Ke = np.hstack([Kp[:, :4], Kp[:, :4], Kp[:, 4:], Kp[:, 4:]])
    Ve = np.hstack([Vp[:, :4], Vp[:, :4], Vp[:, 4:], Vp[:, 4:]])
    np.testing.assert_allclose(g.attend(g.prefill(K, V), q).context, attend_oracle(q, Ke, Ve, 4), atol=1e-6)


def test_gqa_memory_ratio():
    K, V = rand((10, 16), 0), rand((10, 16), 1)
    native = Native(16, 4).prefill(K, V).memory_bytes()
    assert GQA(16, 4, groups=2).prefill(K, V).memory_bytes() * 2 == native
    assert MQA(16, 4).prefill(K, V).memory_bytes() * 4 == native


def test_mla_identity_maps_are_lossless():
    d = 16
    I = np.eye(2 * d, dtype=np.float32)
    p = MLA(d, 4, latent=2 * d, W_down=I, W_upK=I[:, :d], W_upV=I[:, d:])
    K, V, q = rand((5, d), 0), rand((5, d), 1), rand(d, 2)
    n = Native(d, 4)
    np.testing.assert_allclose(p.attend(p.prefill(K, V), q).context, n.attend(n.prefill(K, V), q).context, atol=1e-6)


def test_mla_random_maps_match_materialise_then_attend():
    d, dc = 16, 6
    Wd, Wk, Wv = rand((2 * d, dc), 0, 0.3), rand((dc, d), 1, 0.3), rand((dc, d), 2, 0.3)
    p = MLA(d, 4, latent=dc, W_down=Wd, W_upK=Wk, W_upV=Wv)
    K, V, q = rand((4, d), 3), rand((4, d), 4), rand(d, 5)
    s = p.prefill(K[:2], V[:2])
    for t in (2, 3):
        s = p.append(s, K[t], V[t])
    C = np.hstack([K, V]).astype(float) @ Wd
    Kr, Vr = C @ Wk, C @ Wv
    np.testing.assert_allclose(p.attend(s, q).context, attend_oracle(q, Kr, Vr, 4), atol=1e-5)


def test_mla_maps_from_weights_exact_at_full_rank():
    d = 16
    WK, WV = rand((d, d), 0), rand((d, d), 1)
    p = MLA(d, 4, latent=d, W_K=WK, W_V=WV)
    x = rand((5, d), 2)
    K, V = x @ WK, x @ WV
    C = mla_compress(np.hstack([K, V]), p.W_down)
    Kr, Vr = mla_reconstruct(C, p.W_upK, p.W_upV)
    np.testing.assert_allclose(Kr, K, atol=1e-4)
    np.testing.assert_allclose(Vr, V, atol=1e-4)


def test_mla_memory_factor():
    d = 32
    p = MLA(d, 4, latent=8, W_K=rand((d, d), 0), W_V=rand((d, d), 1))
    K, V = rand((10, d), 2), rand((10, d), 3)
    assert p.prefill(K, V).memory_bytes() * 8 == Native(d, 4).prefill(K, V).memory_bytes()


def test_mla_decode_macs_closed_form():
    d, dc, n = 16, 6, 5
    p = MLA(d, 4, latent=dc, W_K=rand((d, d), 0), W_V=rand((d, d), 1))
    s = p.prefill(rand((n - 1, d), 2), rand((n - 1, d), 3))
    m = MacMeter()
    p.attend(p.append(s, rand(d, 4), rand(d, 5), m), rand(d, 6), m)
    assert m.total == 2 * d * dc + n * (2 * d * dc + 2 * d)


# -- token level -------------------------------------------------------------

def test_longformer_mask_hand_case():
    m = longformer_mask(5, 2, 1)
    assert np.flatnonzero(m[4]).tolist() == [0, 3, 4]
    assert np.array_equal(longformer_mask(6, 6, 0), np.tril(np.ones((6, 6), bool)))


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 4))
def test_longformer_mask_is_causal(L, w, g):
    m = longformer_mask(L, w, g)
    assert not np.triu(m, 1).any()
    assert m.diagonal().all()


def test_longformer_matches_masked_oracle():
    Q, K, V = rand((7, 16), 0), rand((7, 16), 1), rand((7, 16), 2)
    mask = longformer_mask(7, 2, 1)
    got = Longformer(16, 4, window=2, n_global=1).full_attention(Q, K, V)
    np.testing.assert_allclose(got, causal_oracle(Q, K, V, 4, [mask] * 4), atol=1e-6)


def test_beacon_two_point_mean():
    p = Beacon(4, 1, ratio=2)
    a, b = np.array([1, 2, 3, 4.0], np.float32), np.array([3, 2, 1, 0.0], np.float32)
    s = p.append(p.append(p.empty_state(), a, a), b, b)
    assert s.n_entries == 1
    np.testing.assert_array_equal(s.K[0], (a + b) / 2)


def test_beacon_entry_count():
    p = Beacon(16, 4, ratio=4)
    s = p.prefill(rand((10, 16), 0), rand((10, 16), 1))
    assert s.n_entries == 10 // 4 + 10 % 4
    for t in range(2):
        s = p.append(s, rand(16, t), rand(16, t + 9))
    assert s.n_entries == 3


def test_h2o_under_budget_keeps_everything():
    K, V, Q = rand((10, 16), 0), rand((10, 16), 1), rand((10, 16), 2)
    s = H2O(16, 4, budget=16).prefill(K, V, Q)
    assert s.n_entries == 10


def test_h2o_evicts_lowest_score():
    p = H2O(4, 1, budget=2, recent=0)
    s = ScoredState(rand((3, 4), 0), rand((3, 4), 1), seen=3, positions=np.arange(3),
                    scores=np.array([0.5, 0.1, 0.4]), pinned=np.zeros(3, bool))
    p.evict(s)
    assert s.positions.tolist() == [0, 2]


def test_h2o_append_scores_from_attention():
    p = H2O(16, 4, budget=3, recent=1)
    K, V, Q = rand((6, 16), 0), rand((6, 16), 1), rand((6, 16), 2)
    s = p.prefill(K[:3], V[:3], Q[:3])
    base = s.scores.copy()
    out = p.attend(s, Q[3])
    np.testing.assert_allclose(s.scores - base, out.weights.sum(axis=0), atol=1e-6)
    s = p.append(s, K[3], V[3])
    assert s.n_entries == 3 and 3 in s.positions


@given(st.integers(1, 6), st.integers(0, 6), st.integers(1, 14), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_budget_never_exceeded(budget, recent, L, seed):
    recent = min(recent, budget)
    for p in (H2O(8, 2, budget=budget, recent=recent), SnapKV(8, 2, budget=budget, window=max(1, recent), pool=3)):
        K, V, Q = rand((L + 3, 8), seed), rand((L + 3, 8), seed + 1), rand((L + 3, 8), seed + 2)
        s = p.prefill(K[:L], V[:L], Q[:L])
        assert s.n_entries <= budget
        for t in range(L, L + 3):
            s = p.append(s, K[t], V[t])
            p.attend(s, Q[t])
            assert s.n_entries <= budget
            assert s.positions[-1] == t


def brute_snapkv(weights, budget, window, pool):
    """Enumerate every prefix subset; keep the one with the largest pooled vote total."""
    L = weights.shape[-1]
    prefix = L - window
    votes = weights[:, prefix:, :prefix].sum(axis=(0, 1))
    pooled = [max(votes[j] for j in range(max(0, i - pool // 2), min(prefix, i + pool - pool // 2))) for i in range(prefix)]
    best = max(itertools.combinations(range(prefix), budget - window), key=lambda c: sum(pooled[i] for i in c))
    return sorted(best) + list(range(prefix, L))


def test_snapkv_hand_case():
    w = np.array([[[1, 0, 0], [0.5, 0.5, 0], [0.2, 0.7, 0.1]]])
    keep, pinned = snapkv_select(w, budget=2, window=1, pool=1)
    assert keep.tolist() == [1, 2] == brute_snapkv(w, 2, 1, 1)
    assert pinned.tolist() == [True, False]


@given(st.integers(3, 8), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_snapkv_selection_matches_enumeration(L, seed):
    rng = np.random.default_rng(seed)
    w = rng.random((2, L, L))
    budget = int(rng.integers(2, L))
    window = int(rng.integers(1, budget))
    pool = int(rng.choice([1, 3]))
    keep, _ = snapkv_select(w, budget, window, pool)
    assert keep.tolist() == brute_snapkv(w, budget, window, pool)


def test_pool_votes_centred_max():
    np.testing.assert_array_equal(pool_votes(np.array([1.0, 5.0, 2.0, 0.0]), 3), [5, 5, 5, 2])


def test_snapkv_fifo_keeps_pinned_tokens():
    p = SnapKV(16, 4, budget=4, window=2, pool=1)
    K, V, Q = rand((12, 16), 0), rand((12, 16), 1), rand((12, 16), 2)
    s = p.prefill(K[:8], V[:8], Q[:8])
    pinned = s.positions[s.pinned].tolist()
    assert len(pinned) == 2
    for t in range(8, 12):
        s = p.append(s, K[t], V[t])
    assert s.positions.tolist() == pinned + [10, 11]


# -- sequence level ----------------------------------------------------------

def test_linformer_project_shapes():
    K, V = rand((6, 16), 0), rand((6, 16), 1)
    Kp, Vp = linformer_project(K, V, rand((3, 10), 2), rand((3, 10), 3))
    assert Kp.shape == Vp.shape == (3, 16)


def test_linformer_identity_matches_native():
    L, d = 6, 16
    E = np.eye(8, 10, dtype=np.float32)
    Q, K, V = rand((L, d), 0), rand((L, d), 1), rand((L, d), 2)
    got = Linformer(d, 4, k=8, E=E, F=E).full_attention(Q, K, V)
    np.testing.assert_allclose(got, Native(d, 4).full_attention(Q, K, V), atol=1e-6)


def test_linformer_matches_two_step_oracle():
    L, d, k = 6, 16, 3
    E, F = rand((k, L), 3, 0.5), rand((k, L), 4, 0.5)
    Q, K, V = rand((L, d), 0), rand((L, d), 1), rand((L, d), 2)
    got = Linformer(d, 4, k=k, E=E, F=F).full_attention(Q, K, V)
    for i in range(L):
        # project the visible prefix, then attend over the k projected rows
        Kp = E[:, : i + 1].astype(float) @ K[: i + 1]
        Vp = F[:, : i + 1].astype(float) @ V[: i + 1]
        np.testing.assert_allclose(got[i], attend_oracle(Q[i], Kp, Vp, 4), atol=1e-6)


def test_linformer_is_causal():
    Q, K, V = rand((6, 16), 0), rand((6, 16), 1), rand((6, 16), 2)
    p = Linformer(16, 4, k=3, max_len=6)
    a = p.full_attention(Q, K, V)
    K2, V2 = K.copy(), V.copy()
    K2[5] += 3
    V2[5] -= 3
    np.testing.assert_array_equal(p.full_attention(Q, K2, V2)[:5], a[:5])


def test_lsh_bucket_determinism_and_antisymmetry():
    R = rand((4, 2), 0)
    x = rand(4, 1)
    assert lsh_bucket(x, R) == lsh_bucket(x.copy(), R)
    assert abs(lsh_bucket(x, R) - lsh_bucket(-x, R)) == 2


def test_reformer_matches_brute_force_bucket_mask():
    L, d, H, nb = 8, 8, 2, 4
    R = rand((d // H, nb // 2), 7)
    Q, K, V = rand((L, d), 0), rand((L, d), 1), rand((L, d), 2)
    p = Reformer(d, H, n_buckets=nb, rotation=R)
    masks = []
    for h in range(H):
        sl = slice(h * d // H, (h + 1) * d // H)

        def bucket(x):
            proj = [float(np.dot(x, R[:, c])) for c in range(nb // 2)]
            full = proj + [-v for v in proj]
            return full.index(max(full))

        bq = [bucket(Q[i, sl]) for i in range(L)]
        bk = [bucket(K[j, sl]) for j in range(L)]
        masks.append(np.array([[bq[i] == bk[j] or i == j for j in range(L)] for i in range(L)]))
    np.testing.assert_allclose(p.full_attention(Q, K, V), causal_oracle(Q, K, V, H, masks), atol=1e-6)


def test_recompute_policies_hold_no_cache():
    for name in ("linformer", "reformer", "longformer"):
        p = build_policy(PolicyConfig(name), 16, 4, max_len=32)
        s = p.prefill(rand((5, 16), 0), rand((5, 16), 1))
        assert p.mode == "recompute" and s.memory_bytes() == 0 and s.seen == 5


# -- precision level ---------------------------------------------------------

def test_quantize_grid_and_constant_round_trip():
    x = np.array([0, 1, 2, 3.0])
    c, s, z = quantize_lowbit(x, 2, 4)
    np.testing.assert_array_equal(dequantize_lowbit(c, s, z, 4), x)
    x = np.full(7, -2.5)
    c, s, z = quantize_lowbit(x, 2, 4)
    np.testing.assert_array_equal(dequantize_lowbit(c, s, z, 4), x)


def test_quantize_hand_error():
    x = np.array([0, 0.4, 2.6, 3.0])
    c, s, z = quantize_lowbit(x, 2, 4)
    err = np.abs(dequantize_lowbit(c, s, z, 4) - x)
    assert s[0] == 1.0
    np.testing.assert_allclose(err.max(), 0.4, atol=1e-6)


@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=40), st.sampled_from([2, 4, 8]),
       st.integers(1, 8))
def test_quantize_error_within_half_step(xs, bits, group):
    x = np.array(xs, np.float32).astype(float)
    c, s, z = quantize_lowbit(x, bits, group)
    idx = np.arange(x.size) // group
    back = c * s.astype(float)[idx] + z.astype(float)[idx]
    assert np.all(np.abs(back - x) <= s.astype(float)[idx] / 2 * (1 + 1e-12))
    assert c.max() <= 2**bits - 1


def test_kivi_constant_columns_match_native():
    d, n = 16, 12
    rng = np.random.default_rng(0)
    K = np.tile(rng.normal(size=d), (n, 1)).astype(np.float32)
    # value rows on a 2-bit grid with both ends present in every 4-channel group
    codes = rng.integers(0, 4, size=(n, d))
    codes[:, 0::4], codes[:, 1::4] = 0, 3
    V = (codes * 0.25 - 1).astype(np.float32)
    q = rand(d, 1)
    p = KIVI(d, 4, bits=2, group=4)
    s = p.prefill(K[:6], V[:6])
    for t in range(6, n):
        s = p.append(s, K[t], V[t])
    assert len(s.k_chunks) == 3
    Km, Vm = p.materialize(s)
    np.testing.assert_array_equal(Km, K)
    np.testing.assert_array_equal(Vm, V)
    nat = Native(d, 4)
    np.testing.assert_allclose(p.attend(s, q).context, nat.attend(nat.prefill(K, V), q).context, atol=1e-6)


def test_kivi_residual_keys_stay_full_precision():
    p = KIVI(16, 4, bits=2, group=8)
    K, V = rand((11, 16), 0), rand((11, 16), 1)
    s = p.prefill(K, V)
    Km, _ = p.materialize(s)
    np.testing.assert_array_equal(Km[8:], K[8:])
    assert not np.array_equal(Km[:8], K[:8])


def test_intactkv_pivots_are_exact():
    p = IntactKV(16, 4, bits=2, pivots=3, group=8)
    K, V = rand((9, 16), 0), rand((9, 16), 1)
    s = p.prefill(K[:2], V[:2])
    for t in range(2, 9):
        s = p.append(s, K[t], V[t])
    Km, Vm = p.materialize(s)
    np.testing.assert_array_equal(Km[:3], K[:3])
    np.testing.assert_array_equal(Vm[:3], V[:3])
    assert Km.shape == (9, 16)


def test_quantised_headline_and_overhead():
    K, V = rand((40, 32), 0), rand((40, 32), 1)
    native = Native(32, 4).prefill(K, V).memory_bytes()
    for p in (KIVI(32, 4, bits=2, group=32), IntactKV(32, 4, bits=2, group=32)):
        s = p.prefill(K, V)
        assert s.memory_bytes() * 16 == native
        assert s.overhead_bytes() > 0
    s = KIVI(32, 4, bits=4, group=32).prefill(K, V)
    assert s.memory_bytes() * 8 == native


# -- architecture level ------------------------------------------------------

def wkv_direct(K, V, w, u):
    """Output at every step as the explicit double sum, in 50-digit arithmetic."""
    mpmath.mp.dps = 50
    L, d = K.shape
    out = np.zeros((L, d))
    for c in range(d):
        wc, uc = mpmath.mpf(float(w[c])), mpmath.mpf(float(u[c]))
        for t in range(L):
            num = mpmath.exp(uc + float(K[t, c])) * float(V[t, c])
            den = mpmath.exp(uc + float(K[t, c]))
            for i in range(t):
                e = mpmath.exp(float(K[i, c]) - (t - i) * wc)
                num += e * float(V[i, c])
                den += e
            out[t, c] = float(num / den)
    return out


def test_rwkv_single_token_returns_value():
    out, _ = rwkv_step(rwkv_init_state(3), np.array([5.0, -2, 0]), np.array([1.0, 2, 3]), np.ones(3), np.zeros(3))
    np.testing.assert_array_equal(out, [1, 2, 3])


def test_rwkv_strong_decay_sees_only_current_token():
    p = RWKV(4, 1, decay=1e4, bonus=0.0)
    K, V = rand((5, 4), 0), rand((5, 4), 1)
    np.testing.assert_allclose(p.full_attention(None, K, V), V, atol=1e-6)


def test_rwkv_matches_direct_sum():
    K, V = rand((6, 5), 0, 3.0), rand((6, 5), 1)
    w, u = np.geomspace(0.1, 2, 5), np.linspace(-1, 1, 5)
    p = RWKV(5, 1, decay=w, bonus=u)
    ref = wkv_direct(K, V, w, u)
    np.testing.assert_allclose(p.full_attention(None, K, V), ref, rtol=1e-5, atol=1e-7)
    s = p.prefill(K[:3], V[:3])
    for t in range(3, 6):
        s = p.append(s, K[t], V[t])
        np.testing.assert_allclose(p.attend(s).context, ref[t], rtol=1e-5, atol=1e-7)


def test_rwkv_extreme_keys_stay_finite():
    K = np.array([[800.0], [-800.0], [790.0]], np.float32)
    V = np.array([[1.0], [2.0], [3.0]], np.float32)
    out = RWKV(1, 1, decay=0.5).full_attention(None, K, V)
    assert np.isfinite(out).all()


def test_rwkv_state_size_is_constant():
    p = RWKV(16, 4)
    s = p.prefill(rand((3, 16), 0), rand((3, 16), 1))
    before = s.memory_bytes()
    for t in range(5):
        s = p.append(s, rand(16, t), rand(16, t + 1))
    assert s.memory_bytes() == before == 2 * 16 * 4 and s.seen == 8
