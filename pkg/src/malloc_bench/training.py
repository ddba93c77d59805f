"""Next-interaction CTR training (Adam) and policy-aware evaluation.

Training runs in float64 on padded batches with an explicit backward pass
through the gated attention blocks. Each position t predicts the label of
interaction t+1 for item t+1 from the causal prefix up to t.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .backbone import PROB_EPS, DecodeSession, ModelConfig, Parameters, embed_sequence, init_params, predict_ctr
from .metrics import ScoredImpressions
from .numerics import F32, MacMeter, Rng, sigmoid
from .policies import PolicyConfig

log = logging.getLogger(__name__)

LN_EPS = 1e-5


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float, why: str = "non-finite loss/gradient"):
        super().__init__(f"{why} at epoch {epoch}, step {step} (loss={loss})")
        self.epoch, self.step, self.loss = epoch, step, loss


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 3
    lr: float = 5e-4
    batch_size: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # an epoch whose mean loss exceeds this counts as diverged (coin flip is ln 2)
    max_loss: float = 4 * float(np.log(2))


def pad_batch(seqs, max_len: int):
    L = min(max(len(s) for s in seqs), max_len)
    B = len(seqs)
    items = np.zeros((B, L), np.int64)
    labels = np.zeros((B, L), np.int64)
    lengths = np.zeros(B, np.int64)
    for b, s in enumerate(seqs):
        n = min(len(s), L)
        items[b, :n] = s.items[-n:]
        labels[b, :n] = s.labels[-n:]
        lengths[b] = n
    return items, labels, lengths


def _ln_forward(x):
    mu = x.mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.var(-1, keepdims=True) + LN_EPS)
    xhat = (x - mu) * inv
    return xhat, inv


def _ln_backward(dxhat, xhat, inv):
    return inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))


def loss_and_grads(params: Parameters, items, labels, lengths, n_heads: int, need_grad: bool = True):
    """Mean clamped BCE over all next-interaction targets in the batch, and its gradient.

    ``params`` should be float64. Returns (loss, grads or None, n_targets).
    """
    B, L = items.shape
    d = params.item_emb.shape[1]
    H = n_heads
    hd = d // H
    pos = np.arange(L)
    valid = pos[None, :] < lengths[:, None]
    target = valid[:, 1:]  # prediction from position t for t+1
    n_targets = int(target.sum())
    causal = np.tril(np.ones((L, L), bool))

    x = params.item_emb[items] + params.label_emb[labels]
    caches = []
    for blk in params.blocks:
        xhat, inv = _ln_forward(x)
        Q, K, V, U = (xhat @ blk[n] for n in ("W_Q", "W_K", "W_V", "W_U"))
        Qh, Kh, Vh = (m.reshape(B, L, H, hd).transpose(0, 2, 1, 3) for m in (Q, K, V))
        S = (Qh @ Kh.transpose(0, 1, 3, 2)) / np.sqrt(hd)
        S = np.where(causal, S, -np.inf)
        S -= S.max(-1, keepdims=True)
        P = np.exp(S)
        P /= P.sum(-1, keepdims=True)
        A = (P @ Vh).transpose(0, 2, 1, 3).reshape(B, L, d)
        sU = sigmoid(U)
        G = U * sU
        Z = G * A
        caches.append((x, xhat, inv, Qh, Kh, Vh, U, sU, G, A, P, Z))
        x = x + Z @ blk["W_O"]

    h = x[:, :-1]
    cand = items[:, 1:]
    E_c = params.item_emb[cand]
    logit = np.einsum("bld,bld->bl", h, E_c)
    p = sigmoid(logit)
    y = labels[:, 1:]
    pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    nll = -(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    loss = float(nll[target].sum() / max(n_targets, 1))
    if not need_grad:
        return loss, None, n_targets

    inside = (p > PROB_EPS) & (p < 1 - PROB_EPS)
    dlogit = np.where(target & inside, (p - y) / max(n_targets, 1), 0.0)
    g_item = np.zeros_like(params.item_emb)
    g_label = np.zeros_like(params.label_emb)
    np.add.at(g_item, cand.reshape(-1), (dlogit[..., None] * h).reshape(-1, d))
    dx = np.zeros((B, L, d))
    dx[:, :-1] = dlogit[..., None] * E_c

    g_blocks = []
    for blk, (x_in, xhat, inv, Qh, Kh, Vh, U, sU, G, A, P, Z) in zip(reversed(params.blocks), reversed(caches)):
        g = {"W_O": np.einsum("bli,blj->ij", Z, dx)}
        dZ = dx @ blk["W_O"].T
        dU = dZ * A * (sU * (1 + U * (1 - sU)))
        dAh = (dZ * G).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        dP = dAh @ Vh.transpose(0, 1, 3, 2)
        dVh = P.transpose(0, 1, 3, 2) @ dAh
        dS = P * (dP - (dP * P).sum(-1, keepdims=True)) / np.sqrt(hd)
        dQh = dS @ Kh
        dKh = dS.transpose(0, 1, 3, 2) @ Qh
        merge = lambda t: t.transpose(0, 2, 1, 3).reshape(B, L, d)
        dQ, dK, dV = merge(dQh), merge(dKh), merge(dVh)
        dxhat = np.zeros_like(xhat)
        for name, dm in (("W_Q", dQ), ("W_K", dK), ("W_V", dV), ("W_U", dU)):
            g[name] = np.einsum("bli,blj->ij", xhat, dm)
            dxhat += dm @ blk[name].T
        dx = dx + _ln_backward(dxhat, xhat, inv)
        g_blocks.append(g)
    g_blocks.reverse()
    dx = np.where(valid[..., None], dx, 0.0)
    np.add.at(g_item, items[valid], dx[valid])
    np.add.at(g_label, labels[valid], dx[valid])
    return loss, Parameters(g_item, g_label, g_blocks), n_targets


class Adam:
    def __init__(self, params: Parameters, settings: TrainSettings):
        self.s = settings
        self.t = 0
        self.m = [np.zeros_like(a) for _, a in params.matrices()]
        self.v = [np.zeros_like(a) for _, a in params.matrices()]

    def step(self, params: Parameters, grads: Parameters) -> None:
        s = self.s
        self.t += 1
        c1 = 1 - s.beta1**self.t
        c2 = 1 - s.beta2**self.t
        for (_, w), (_, g), m, v in zip(params.matrices(), grads.matrices(), self.m, self.v):
            m *= s.beta1
            m += (1 - s.beta1) * g
            v *= s.beta2
            v += (1 - s.beta2) * g * g
            w -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)


def train(dataset, config: ModelConfig, settings: TrainSettings, rng: Rng,
          init: Parameters | None = None, history: list | None = None) -> Parameters:
    """Fit the backbone on every sequence of ``dataset``. Deterministic given ``rng``.

    Raises ``TrainingDiverged`` on a non-finite loss or gradient, or when an
    epoch's mean loss exceeds ``settings.max_loss``.
    """
    seqs = [s for s in dataset.sequences if len(s) >= 2]
    if not seqs:
        raise ValueError("training needs at least one sequence with two interactions")
    params = (init if init is not None else init_params(config, rng)).astype(np.float64)
    opt = Adam(params, settings)
    step = 0
    for epoch in range(settings.epochs):
        order = rng.permutation(len(seqs))
        total = count = 0.0
        for start in range(0, len(seqs), settings.batch_size):
            batch = [seqs[i] for i in order[start : start + settings.batch_size]]
            items, labels, lengths = pad_batch(batch, config.max_seq_len)
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads, n = loss_and_grads(params, items, labels, lengths, config.n_heads)
                finite = np.isfinite(loss) and all(np.isfinite(g).all() for _, g in grads.matrices())
            if not finite:
                raise TrainingDiverged(epoch, step, loss)
            opt.step(params, grads)
            step += 1
            total += loss * n
            count += n
        mean = total / max(count, 1)
        log.info("epoch %d: train loss %.5f", epoch, mean)
        if history is not None:
            history.append(mean)
        if mean > settings.max_loss:
            raise TrainingDiverged(epoch, step, mean, f"epoch loss above {settings.max_loss:.3f}")
    return params.astype(F32)


def evaluate(params: Parameters, config: ModelConfig, test, policy: PolicyConfig | None = None,
             seed: int = 0, meter: MacMeter | None = None) -> ScoredImpressions:
    """Score every test position by decoding each user's request under ``policy``.

    The prefix before ``eval_from`` is prefilled; each later interaction is
    scored from the hidden state of the position before it, then admitted.
    """
    users, scores, labels = [], [], []
    for seq in test.sequences:
        X = embed_sequence(seq, params)
        start = max(seq.eval_from, 1)
        if start >= len(seq):
            continue
        sess = DecodeSession(params, config, policy, seed=seed)
        h = sess.prefill(X[:start], meter)
        for t in range(start, len(seq)):
            if t > start:
                h = sess.step(X[t - 1], meter)
            scores.append(predict_ctr(h, int(seq.items[t]), params))
            labels.append(int(seq.labels[t]))
            users.append(seq.user)
    return ScoredImpressions(np.array(users, np.int64), np.array(scores), np.array(labels, np.int64))
