"""Synthetic lookup task, manual backprop, Adam, and the training loop.

The model trains on key/value retrieval: a context lists "key = value" lines
and the sequence ends with a query for one key followed by its value. The
loss covers only the answer tokens and the terminal EOS, matching what
generation must produce at inference time.

Gradients come from hand-written reverse-mode differentiation of the batched
forward pass. The whole path is dtype-parameterized: float32 for training
throughput, float64 end-to-end for finite-difference verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, TrainConfig
from .corpus import Corpus, Document, QAPair
from .errors import TrainingDivergedError, ValidationError
from .metrics import exact_match
from .rng import SplitMix64
from .tokenizer import EOS, SEP, tokenize
from .weights import Weights, init_weights

RMS_EPS = 1e-5


# ---------------------------------------------------------------------------
# lookup task generation


@dataclass(frozen=True)
class LookupTask:
    n_pairs: int
    distractor_rate: float
    pairs: tuple[tuple[str, str], ...]
    queries: tuple[tuple[str, str], ...]
    corpus_text: str


def _distinct_words(rng: SplitMix64, n: int, length: int,
                    taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = rng.letters(length)
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def shared_prefix_count(n_pairs: int, distractor_rate: float) -> int:
    """Keys that share their 4-char prefix with at least one other key.

    round(rate * n_pairs), except a count of exactly 1 is impossible
    (sharing needs a partner) and becomes 2 when the task has room.
    """
    n = min(n_pairs, max(0, round(distractor_rate * n_pairs)))
    if n == 1:
        n = 2 if n_pairs >= 2 else 0
    return n


def make_lookup_task(n_pairs: int, distractor_rate: float,
                     seed: int) -> LookupTask:
    """Deterministic key/value task with prefix-colliding distractors.

    Keys are 8 lowercase letters (4-char prefix + 4-char suffix); a seeded
    fraction of keys shares its prefix with one or two others. Values are
    4 to 8 lowercase letters. Queries ask for every key in corpus order.
    """
    if n_pairs <= 0:
        raise ValidationError("n_pairs must be positive")
    if not 0.0 <= distractor_rate <= 1.0:
        raise ValidationError("distractor_rate must lie in [0, 1]")
    rng = SplitMix64(seed)

    n_shared = shared_prefix_count(n_pairs, distractor_rate)
    group_sizes = []
    remaining = n_shared
    while remaining >= 2:
        size = 3 if remaining == 3 else 2
        group_sizes.append(size)
        remaining -= size
    group_sizes.extend([1] * (n_pairs - n_shared))

    prefixes_taken: set[str] = set()
    keys: list[str] = []
    for size in group_sizes:
        prefix = _distinct_words(rng, 1, 4, prefixes_taken)[0]
        suffixes: set[str] = set()
        for _ in range(size):
            sfx = _distinct_words(rng, 1, 4, suffixes)[0]
            keys.append(prefix + sfx)

    pairs = [(k, rng.letters(4 + rng.next_below(5))) for k in keys]
    rng.shuffle(pairs)

    corpus_text = "".join(f"{k} = {v}\n" for k, v in pairs)
    queries = tuple((f"{k}?", v) for k, v in pairs)
    return LookupTask(n_pairs=n_pairs, distractor_rate=distractor_rate,
                      pairs=tuple(pairs), queries=queries,
                      corpus_text=corpus_text)


def task_to_corpus(task: LookupTask) -> Corpus:
    """One document per pair, in task order."""
    docs = tuple(
        Document(id=f"p{i:03d}", title=f"p{i:03d}", text=f"{k} = {v}")
        for i, (k, v) in enumerate(task.pairs))
    return Corpus(docs)


def task_to_qa(task: LookupTask) -> list[QAPair]:
    """The task's queries as QA pairs tied to their supporting documents."""
    by_key = {k: i for i, (k, v) in enumerate(task.pairs)}
    out = []
    for query, answer in task.queries:
        i = by_key[query.rstrip("?")]
        out.append(QAPair(question=query, answers=(answer,),
                          doc_ids=(f"p{i:03d}",)))
    return out


# ---------------------------------------------------------------------------
# forward/backward


def _params(weights: Weights, dtype) -> dict[str, np.ndarray]:
    return {name: arr.astype(dtype) for name, arr in weights.tensors()}


def _rms_fwd(x, gain):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r * gain, r


def _rms_bwd(x, gain, r, dy):
    d = x.shape[-1]
    g_dy = dy * gain
    dot = np.sum(g_dy * x, axis=-1, keepdims=True)
    dx = g_dy / r - x * dot / (d * r**3)
    dgain = np.sum(dy * x / r, axis=tuple(range(dy.ndim - 1)))
    return dx, dgain


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _rope_tables(t: int, head_dim: int, theta: float, dtype):
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.arange(t, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rope_fwd(x, cos, sin):
    # x: (B, T, H, hd); tables broadcast over batch and heads
    c = cos[None, :, None, :]
    s = sin[None, :, None, :]
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def _rope_bwd(dy, cos, sin):
    # transpose of a rotation is the inverse rotation
    c = cos[None, :, None, :]
    s = sin[None, :, None, :]
    de, do = dy[..., 0::2], dy[..., 1::2]
    dx = np.empty_like(dy)
    dx[..., 0::2] = de * c + do * s
    dx[..., 1::2] = -de * s + do * c
    return dx


# score-workspace budget in bytes for attention chunking
_ATTN_WORKSPACE = 128 * 2**20


def _heads_first(x):
    """(B, T, H, hd) -> contiguous (B*H, T, hd)."""
    b, t, h, hd = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b * h, t, hd)


def _heads_back(x, b, t, h, hd):
    """Inverse of _heads_first."""
    return np.ascontiguousarray(
        x.reshape(b, h, t, hd).transpose(0, 2, 1, 3))


def _causal_bias(t_q: int, t_k: int, offset: int, dtype) -> np.ndarray:
    """Additive mask: 0 where key <= offset + query index, else -inf."""
    qpos = offset + np.arange(t_q)[:, None]
    kpos = np.arange(t_k)[None, :]
    bias = np.zeros((t_q, t_k), dtype=dtype)
    bias[kpos > qpos] = -np.inf
    return bias


def _score_chunk(n: int, t_q: int, t_k: int, itemsize: int) -> int:
    per_slice = t_q * t_k * itemsize
    return max(1, min(n, _ATTN_WORKSPACE // max(1, per_slice)))


def _softmax_rows(s):
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def _attn_fwd(q, k, v):
    b, t, h, hd = q.shape
    scale = 1.0 / np.sqrt(float(hd))
    bias = _causal_bias(t, t, 0, q.dtype)
    q2, k2, v2 = _heads_first(q), _heads_first(k), _heads_first(v)
    ctx = np.empty_like(q2)
    step = _score_chunk(b * h, t, t, q2.itemsize)
    for lo in range(0, b * h, step):
        hi = min(b * h, lo + step)
        s = q2[lo:hi] @ k2[lo:hi].transpose(0, 2, 1)
        s *= scale
        s += bias
        _softmax_rows(s)
        ctx[lo:hi] = s @ v2[lo:hi]
    return _heads_back(ctx, b, t, h, hd)


def _attn_bwd(q, k, v, dctx):
    b, t, h, hd = q.shape
    scale = 1.0 / np.sqrt(float(hd))
    bias = _causal_bias(t, t, 0, q.dtype)
    q2, k2, v2 = _heads_first(q), _heads_first(k), _heads_first(v)
    dctx2 = _heads_first(dctx)
    dq2 = np.empty_like(q2)
    dk2 = np.empty_like(k2)
    dv2 = np.empty_like(v2)
    step = _score_chunk(b * h, t, t, q2.itemsize)
    for lo in range(0, b * h, step):
        hi = min(b * h, lo + step)
        s = q2[lo:hi] @ k2[lo:hi].transpose(0, 2, 1)
        s *= scale
        s += bias
        _softmax_rows(s)
        dv2[lo:hi] = s.transpose(0, 2, 1) @ dctx2[lo:hi]
        dp = dctx2[lo:hi] @ v2[lo:hi].transpose(0, 2, 1)
        dp -= np.sum(dp * s, axis=-1, keepdims=True)
        dp *= s
        dq2[lo:hi] = (dp @ k2[lo:hi]) * scale
        dk2[lo:hi] = (dp.transpose(0, 2, 1) @ q2[lo:hi]) * scale
    return (_heads_back(dq2, b, t, h, hd), _heads_back(dk2, b, t, h, hd),
            _heads_back(dv2, b, t, h, hd))


def loss_and_grads(weights: Weights, tokens, target_mask=None,
                   dtype=np.float32):
    """Mean next-token cross-entropy and gradients for every tensor.

    ``tokens`` is a (batch, length) int array of same-length rows; position
    j's logits predict token j+1. ``target_mask`` (batch, length-1) selects
    which targets count; all of them by default. Gradients come back as a
    dict keyed like Weights.tensors().
    """
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise ValidationError("tokens must be (batch, length>=2)")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValidationError("token id outside the vocabulary")
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    b, t = inputs.shape
    if target_mask is None:
        mask = np.ones((b, t), dtype=bool)
    else:
        mask = np.asarray(target_mask, dtype=bool)
        if mask.shape != (b, t):
            raise ValidationError("target_mask must be (batch, length-1)")
    n_loss = int(mask.sum())
    if n_loss == 0:
        raise ValidationError("target_mask selects no positions")

    p = _params(weights, dtype)
    hcount, hd, d, f = cfg.n_heads, cfg.head_dim, cfg.d_model, cfg.d_ffn
    cos, sin = _rope_tables(t, hd, cfg.rope_theta, dtype)

    emb = p["token_embedding"]
    x = emb[inputs]
    saved = []
    for li in range(cfg.n_layers):
        wq, wk = p[f"layers.{li}.wq"], p[f"layers.{li}.wk"]
        wv, wo = p[f"layers.{li}.wv"], p[f"layers.{li}.wo"]
        w1, w2 = p[f"layers.{li}.w1"], p[f"layers.{li}.w2"]
        ga, gf = p[f"layers.{li}.attn_gain"], p[f"layers.{li}.ffn_gain"]

        x_in = x
        h, r1 = _rms_fwd(x_in, ga)
        q = _rope_fwd((h @ wq).reshape(b, t, hcount, hd), cos, sin)
        k = _rope_fwd((h @ wk).reshape(b, t, hcount, hd), cos, sin)
        v = (h @ wv).reshape(b, t, hcount, hd)
        ctx = _attn_fwd(q, k, v).reshape(b, t, d)
        x2 = x_in + ctx @ wo
        h2, r2 = _rms_fwd(x2, gf)
        u = h2 @ w1
        a = u * _sigmoid(u)
        x = x2 + a @ w2
        saved.append((x_in, h, r1, q, k, v, ctx, x2, h2, r2, u))

    hf, rf = _rms_fwd(x, p["final_gain"])
    logits = hf @ emb.T

    # masked mean cross-entropy, stable log-sum-exp
    m = logits.max(axis=-1, keepdims=True)
    z = np.exp(logits - m)
    zsum = z.sum(axis=-1, keepdims=True)
    lse = (m + np.log(zsum))[..., 0]
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    loss = float(np.sum((lse - picked) * mask, dtype=np.float64) / n_loss)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"loss is not finite: {loss}")

    weight = (mask / n_loss).astype(dtype)
    dlogits = z / zsum
    np.put_along_axis(
        dlogits, targets[..., None],
        np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0,
        axis=-1)
    dlogits *= weight[..., None]

    grads = {name: np.zeros_like(arr, dtype=dtype)
             for name, arr in weights.tensors()}

    grads["token_embedding"] += dlogits.reshape(-1, cfg.vocab_size).T @ \
        hf.reshape(-1, d)
    dhf = dlogits @ emb
    dx, dg = _rms_bwd(x, p["final_gain"], rf, dhf)
    grads["final_gain"] += dg

    for li in reversed(range(cfg.n_layers)):
        wq, wk = p[f"layers.{li}.wq"], p[f"layers.{li}.wk"]
        wv, wo = p[f"layers.{li}.wv"], p[f"layers.{li}.wo"]
        w1, w2 = p[f"layers.{li}.w1"], p[f"layers.{li}.w2"]
        ga, gf = p[f"layers.{li}.attn_gain"], p[f"layers.{li}.ffn_gain"]
        x_in, h, r1, q, k, v, ctx, x2, h2, r2, u = saved[li]

        # ffn branch
        a = u * _sigmoid(u)
        da = dx @ w2.T
        grads[f"layers.{li}.w2"] += a.reshape(-1, f).T @ dx.reshape(-1, d)
        sig = _sigmoid(u)
        du = da * (sig * (1.0 + u * (1.0 - sig)))
        grads[f"layers.{li}.w1"] += h2.reshape(-1, d).T @ du.reshape(-1, f)
        dh2 = du @ w1.T
        dx2, dgf = _rms_bwd(x2, gf, r2, dh2)
        grads[f"layers.{li}.ffn_gain"] += dgf
        dx2 += dx  # residual

        # attention branch
        dctx = (dx2 @ wo.T).reshape(b, t, hcount, hd)
        grads[f"layers.{li}.wo"] += ctx.reshape(-1, d).T @ dx2.reshape(-1, d)
        dq, dk, dv = _attn_bwd(q, k, v, dctx)
        dqp = _rope_bwd(dq, cos, sin).reshape(b, t, d)
        dkp = _rope_bwd(dk, cos, sin).reshape(b, t, d)
        dvp = dv.reshape(b, t, d)
        grads[f"layers.{li}.wq"] += h.reshape(-1, d).T @ dqp.reshape(-1, d)
        grads[f"layers.{li}.wk"] += h.reshape(-1, d).T @ dkp.reshape(-1, d)
        grads[f"layers.{li}.wv"] += h.reshape(-1, d).T @ dvp.reshape(-1, d)
        dh = dqp @ wq.T + dkp @ wk.T + dvp @ wv.T
        dxa, dga = _rms_bwd(x_in, ga, r1, dh)
        grads[f"layers.{li}.attn_gain"] += dga
        dx = dx2 + dxa  # residual

    flat = dx.reshape(-1, d)
    np.add.at(grads["token_embedding"], inputs.ravel(), flat)
    return loss, grads


def _attn_fwd_kv(q, k_full, v_full, offset):
    """Attention of suffix queries over prefix+suffix keys.

    q: (B, Tq, H, hd) at absolute positions offset..offset+Tq-1;
    k_full/v_full: (B*H, Tk, hd) with the first ``offset`` rows shared
    prefix keys. Returns ctx shaped like q.
    """
    b, tq, h, hd = q.shape
    tk = k_full.shape[1]
    scale = 1.0 / np.sqrt(float(hd))
    bias = _causal_bias(tq, tk, offset, q.dtype)
    q2 = _heads_first(q)
    ctx = np.empty_like(q2)
    step = _score_chunk(b * h, tq, tk, q2.itemsize)
    for lo in range(0, b * h, step):
        hi = min(b * h, lo + step)
        s = q2[lo:hi] @ k_full[lo:hi].transpose(0, 2, 1)
        s *= scale
        s += bias
        _softmax_rows(s)
        ctx[lo:hi] = s @ v_full[lo:hi]
    return _heads_back(ctx, b, tq, h, hd)


def _attn_bwd_kv(q, k_full, v_full, dctx, offset):
    b, tq, h, hd = q.shape
    tk = k_full.shape[1]
    scale = 1.0 / np.sqrt(float(hd))
    bias = _causal_bias(tq, tk, offset, q.dtype)
    q2 = _heads_first(q)
    dctx2 = _heads_first(dctx)
    dq2 = np.empty_like(q2)
    dk2 = np.zeros_like(k_full)
    dv2 = np.zeros_like(v_full)
    step = _score_chunk(b * h, tq, tk, q2.itemsize)
    for lo in range(0, b * h, step):
        hi = min(b * h, lo + step)
        s = q2[lo:hi] @ k_full[lo:hi].transpose(0, 2, 1)
        s *= scale
        s += bias
        _softmax_rows(s)
        dv2[lo:hi] = s.transpose(0, 2, 1) @ dctx2[lo:hi]
        dp = dctx2[lo:hi] @ v_full[lo:hi].transpose(0, 2, 1)
        dp -= np.sum(dp * s, axis=-1, keepdims=True)
        dp *= s
        dq2[lo:hi] = (dp @ k_full[lo:hi]) * scale
        dk2[lo:hi] = (dp.transpose(0, 2, 1) @ q2[lo:hi]) * scale
    return _heads_back(dq2, b, tq, h, hd), dk2, dv2


def _concat_kv(shared, own, b):
    """Tile (1, Tp, H, hd) shared rows per batch row and append own rows."""
    _, tp, h, hd = shared.shape
    sh = _heads_first(shared)
    tiled = np.repeat(sh[None], b, axis=0).reshape(b * h, tp, hd)
    return np.concatenate([tiled, _heads_first(own)], axis=1)


def loss_and_grads_shared(weights: Weights, prefix_tokens, suffix_tokens,
                          suffix_target_mask, dtype=np.float32):
    """Same loss/grads as stacking prefix+suffix rows, computed efficiently.

    The document prefix runs through the model once; only the per-example
    suffixes (SEP, query, answer, EOS) are batched. Loss targets live in the
    suffix: ``suffix_target_mask`` is (batch, suffix_len - 1) over
    suffix_tokens[:, 1:]. Equivalent to loss_and_grads on the concatenated
    rows with the mask confined to the suffix.
    """
    cfg = weights.config
    prefix = np.asarray(prefix_tokens, dtype=np.int64).ravel()
    suffix = np.asarray(suffix_tokens, dtype=np.int64)
    if prefix.size == 0 or suffix.ndim != 2 or suffix.shape[1] < 2:
        raise ValidationError("need a prefix and (batch, len>=2) suffixes")
    all_ids = np.concatenate([prefix, suffix.ravel()])
    if all_ids.min() < 0 or all_ids.max() >= cfg.vocab_size:
        raise ValidationError("token id outside the vocabulary")
    b, ts = suffix.shape
    tp = prefix.size
    mask = np.asarray(suffix_target_mask, dtype=bool)
    if mask.shape != (b, ts - 1):
        raise ValidationError("suffix_target_mask must be (batch, len-1)")
    n_loss = int(mask.sum())
    if n_loss == 0:
        raise ValidationError("suffix_target_mask selects no positions")

    p = _params(weights, dtype)
    hcount, hd, d, f = cfg.n_heads, cfg.head_dim, cfg.d_model, cfg.d_ffn
    cos_all, sin_all = _rope_tables(tp + ts, hd, cfg.rope_theta, dtype)
    cos_p, sin_p = cos_all[:tp], sin_all[:tp]
    cos_s, sin_s = cos_all[tp:], sin_all[tp:]

    emb = p["token_embedding"]
    xp = emb[prefix][None]
    xs = emb[suffix]
    saved_p, saved_s = [], []
    for li in range(cfg.n_layers):
        wq, wk = p[f"layers.{li}.wq"], p[f"layers.{li}.wk"]
        wv, wo = p[f"layers.{li}.wv"], p[f"layers.{li}.wo"]
        w1, w2 = p[f"layers.{li}.w1"], p[f"layers.{li}.w2"]
        ga, gf = p[f"layers.{li}.attn_gain"], p[f"layers.{li}.ffn_gain"]

        # prefix rows, batch of one
        xp_in = xp
        hp, r1p = _rms_fwd(xp_in, ga)
        qp = _rope_fwd((hp @ wq).reshape(1, tp, hcount, hd), cos_p, sin_p)
        kp = _rope_fwd((hp @ wk).reshape(1, tp, hcount, hd), cos_p, sin_p)
        vp = (hp @ wv).reshape(1, tp, hcount, hd)
        ctxp = _attn_fwd(qp, kp, vp).reshape(1, tp, d)
        xp2 = xp_in + ctxp @ wo
        hp2, r2p = _rms_fwd(xp2, gf)
        up = hp2 @ w1
        xp = xp2 + (up * _sigmoid(up)) @ w2
        saved_p.append((xp_in, hp, r1p, qp, kp, vp, ctxp, xp2, hp2, r2p, up))

        # suffix rows attend over the shared prefix plus themselves
        xs_in = xs
        hs, r1s = _rms_fwd(xs_in, ga)
        qs = _rope_fwd((hs @ wq).reshape(b, ts, hcount, hd), cos_s, sin_s)
        ks = _rope_fwd((hs @ wk).reshape(b, ts, hcount, hd), cos_s, sin_s)
        vs = (hs @ wv).reshape(b, ts, hcount, hd)
        kf = _concat_kv(kp, ks, b)
        vf = _concat_kv(vp, vs, b)
        ctxs = _attn_fwd_kv(qs, kf, vf, tp).reshape(b, ts, d)
        xs2 = xs_in + ctxs @ wo
        hs2, r2s = _rms_fwd(xs2, gf)
        us = hs2 @ w1
        xs = xs2 + (us * _sigmoid(us)) @ w2
        saved_s.append((xs_in, hs, r1s, qs, ks, vs, kf, vf, ctxs, xs2, hs2,
                        r2s, us))

    hf, rf = _rms_fwd(xs, p["final_gain"])
    logits = hf @ emb.T
    targets = suffix[:, 1:]

    m = logits[:, :-1].max(axis=-1, keepdims=True)
    z = np.exp(logits[:, :-1] - m)
    zsum = z.sum(axis=-1, keepdims=True)
    lse = (m + np.log(zsum))[..., 0]
    picked = np.take_along_axis(logits[:, :-1], targets[..., None],
                                axis=-1)[..., 0]
    loss = float(np.sum((lse - picked) * mask, dtype=np.float64) / n_loss)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"loss is not finite: {loss}")

    weight = (mask / n_loss).astype(dtype)
    dlog = z / zsum
    np.put_along_axis(
        dlog, targets[..., None],
        np.take_along_axis(dlog, targets[..., None], axis=-1) - 1.0, axis=-1)
    dlog *= weight[..., None]
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = dlog

    grads = {name: np.zeros_like(arr, dtype=dtype)
             for name, arr in weights.tensors()}
    grads["token_embedding"] += dlogits.reshape(-1, cfg.vocab_size).T @ \
        hf.reshape(-1, d)
    dhf = dlogits @ emb
    dxs, dgfin = _rms_bwd(xs, p["final_gain"], rf, dhf)
    grads["final_gain"] += dgfin
    dxp = np.zeros((1, tp, d), dtype=dtype)

    for li in reversed(range(cfg.n_layers)):
        wq, wk = p[f"layers.{li}.wq"], p[f"layers.{li}.wk"]
        wv, wo = p[f"layers.{li}.wv"], p[f"layers.{li}.wo"]
        w1, w2 = p[f"layers.{li}.w1"], p[f"layers.{li}.w2"]
        ga, gf = p[f"layers.{li}.attn_gain"], p[f"layers.{li}.ffn_gain"]

        # suffix branch
        xs_in, hs, r1s, qs, ks, vs, kf, vf, ctxs, xs2, hs2, r2s, us = \
            saved_s[li]
        a_s = us * _sigmoid(us)
        da = dxs @ w2.T
        grads[f"layers.{li}.w2"] += a_s.reshape(-1, f).T @ dxs.reshape(-1, d)
        sig = _sigmoid(us)
        du = da * (sig * (1.0 + us * (1.0 - sig)))
        grads[f"layers.{li}.w1"] += hs2.reshape(-1, d).T @ du.reshape(-1, f)
        dxs2, dgf2 = _rms_bwd(xs2, gf, r2s, du @ w1.T)
        grads[f"layers.{li}.ffn_gain"] += dgf2
        dxs2 += dxs
        dctxs = (dxs2 @ wo.T).reshape(b, ts, hcount, hd)
        grads[f"layers.{li}.wo"] += ctxs.reshape(-1, d).T @ dxs2.reshape(-1, d)
        dqs, dkf, dvf = _attn_bwd_kv(qs, kf, vf, dctxs, tp)
        dkp_from_s = dkf[:, :tp].reshape(b, hcount, tp, hd).sum(axis=0)
        dvp_from_s = dvf[:, :tp].reshape(b, hcount, tp, hd).sum(axis=0)
        dks = _heads_back(dkf[:, tp:], b, ts, hcount, hd)
        dvs = _heads_back(dvf[:, tp:], b, ts, hcount, hd)
        dqsp = _rope_bwd(dqs, cos_s, sin_s).reshape(b, ts, d)
        dksp = _rope_bwd(dks, cos_s, sin_s).reshape(b, ts, d)
        dvsp = dvs.reshape(b, ts, d)
        grads[f"layers.{li}.wq"] += hs.reshape(-1, d).T @ dqsp.reshape(-1, d)
        grads[f"layers.{li}.wk"] += hs.reshape(-1, d).T @ dksp.reshape(-1, d)
        grads[f"layers.{li}.wv"] += hs.reshape(-1, d).T @ dvsp.reshape(-1, d)
        dhs = dqsp @ wq.T + dksp @ wk.T + dvsp @ wv.T
        dxsa, dga2 = _rms_bwd(xs_in, ga, r1s, dhs)
        grads[f"layers.{li}.attn_gain"] += dga2
        dxs = dxs2 + dxsa

        # prefix branch; dkp/dvp contributions from the suffix enter here
        xp_in, hp, r1p, qp, kp, vp, ctxp, xp2, hp2, r2p, up = saved_p[li]
        a_p = up * _sigmoid(up)
        da = dxp @ w2.T
        grads[f"layers.{li}.w2"] += a_p.reshape(-1, f).T @ dxp.reshape(-1, d)
        sig = _sigmoid(up)
        du = da * (sig * (1.0 + up * (1.0 - sig)))
        grads[f"layers.{li}.w1"] += hp2.reshape(-1, d).T @ du.reshape(-1, f)
        dxp2, dgf1 = _rms_bwd(xp2, gf, r2p, du @ w1.T)
        grads[f"layers.{li}.ffn_gain"] += dgf1
        dxp2 += dxp
        dctxp = (dxp2 @ wo.T).reshape(1, tp, hcount, hd)
        grads[f"layers.{li}.wo"] += ctxp.reshape(-1, d).T @ dxp2.reshape(-1, d)
        dqp, dkp, dvp = _attn_bwd(qp, kp, vp, dctxp)
        dkp = dkp + dkp_from_s.transpose(1, 0, 2)[None]
        dvp = dvp + dvp_from_s.transpose(1, 0, 2)[None]
        dqpp = _rope_bwd(dqp, cos_p, sin_p).reshape(1, tp, d)
        dkpp = _rope_bwd(dkp, cos_p, sin_p).reshape(1, tp, d)
        dvpp = dvp.reshape(1, tp, d)
        grads[f"layers.{li}.wq"] += hp.reshape(-1, d).T @ dqpp.reshape(-1, d)
        grads[f"layers.{li}.wk"] += hp.reshape(-1, d).T @ dkpp.reshape(-1, d)
        grads[f"layers.{li}.wv"] += hp.reshape(-1, d).T @ dvpp.reshape(-1, d)
        dhp = dqpp @ wq.T + dkpp @ wk.T + dvpp @ wv.T
        dxpa, dga1 = _rms_bwd(xp_in, ga, r1p, dhp)
        grads[f"layers.{li}.attn_gain"] += dga1
        dxp = dxp2 + dxpa

    np.add.at(grads["token_embedding"], suffix.ravel(), dxs.reshape(-1, d))
    np.add.at(grads["token_embedding"], prefix, dxp[0])
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def init(cls, weights: Weights) -> "AdamState":
        return cls(step=0,
                   m={n: np.zeros(a.shape, np.float64)
                      for n, a in weights.tensors()},
                   v={n: np.zeros(a.shape, np.float64)
                      for n, a in weights.tensors()})


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        g64 = g.astype(np.float64)
        total += float(np.sum(g64 * g64))
    return float(np.sqrt(total))


def adam_step(weights: Weights, grads: dict, state: AdamState,
              config: TrainConfig):
    """One Adam update with global-norm clipping, in place.

    Raises TrainingDivergedError on any non-finite gradient entry. Returns
    the same weights and state objects.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(
                f"non-finite gradient in {name} at step {state.step + 1}")
    norm = global_grad_norm(grads)
    scale = 1.0 if norm <= config.grad_clip_norm else \
        config.grad_clip_norm / norm

    state.step += 1
    t = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, arr in weights.tensors():
        g = grads[name].astype(np.float64) * scale
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = config.learning_rate * (m / bc1) / \
            (np.sqrt(v / bc2) + config.adam_eps)
        arr[...] = (arr.astype(np.float64) - update).astype(arr.dtype)
    return weights, state


# ---------------------------------------------------------------------------
# training loop


def example_tokens(prefix_tokens: list[int], query: str,
                   answer: str) -> tuple[list[int], int]:
    """Full training sequence and the index where loss targets begin.

    Layout matches inference exactly: BOS-led prefix, SEP, query bytes,
    then answer bytes and EOS (the supervised span).
    """
    head = list(prefix_tokens) + [SEP] + tokenize(query)
    seq = head + tokenize(answer) + [EOS]
    return seq, len(head)


def _pad_rows(seqs, starts) -> tuple[np.ndarray, np.ndarray]:
    t_max = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), t_max), EOS, dtype=np.int64)
    mask = np.zeros((len(seqs), t_max - 1), dtype=bool)
    for i, (seq, start) in enumerate(zip(seqs, starts)):
        tokens[i, :len(seq)] = seq
        mask[i, start - 1:len(seq) - 1] = True
    return tokens, mask


def build_batch(prefix_tokens: list[int], examples,
                supervise_query: bool = False) -> tuple[np.ndarray,
                                                        np.ndarray]:
    """Pad example rows to a common length; mask selects answer+EOS targets.

    With supervise_query the mask also covers the query bytes. The query
    repeats a key from the knowledge prefix, so those positions carry
    copy-from-context signal that trains the same matching circuit the
    answer needs; generation behavior is unaffected since query tokens are
    always given, never sampled.
    """
    seqs, starts = [], []
    for query, answer in examples:
        seq, start = example_tokens(prefix_tokens, query, answer)
        seqs.append(seq)
        starts.append(len(prefix_tokens) + 1 if supervise_query else start)
    return _pad_rows(seqs, starts)


def build_mixed_batch(rows, supervise_query: bool = False) -> tuple[
        np.ndarray, np.ndarray]:
    """Batch over independent tasks: rows of (prefix_tokens, query, answer)."""
    seqs, starts = [], []
    for prefix_tokens, query, answer in rows:
        seq, start = example_tokens(prefix_tokens, query, answer)
        seqs.append(seq)
        starts.append(len(prefix_tokens) + 1 if supervise_query else start)
    return _pad_rows(seqs, starts)


_DEFAULT_LADDER = (1, 2, 3, 4, 6, 8, 8, 12, 16, 16, 24, 32, 32, 48, 64, 64)


def train_lookup(model_config: ModelConfig, train_config: TrainConfig,
                 distractor_rate: float = 0.5,
                 ladder: tuple[int, ...] = _DEFAULT_LADDER,
                 curriculum: bool = True,
                 supervise_query: bool = True,
                 log_every: int = 100, log_fn=print,
                 weights: Weights | None = None,
                 state: "AdamState | None" = None) -> Weights:
    """Train from scratch on seeded lookup tasks; returns the weights.

    Every step draws a fresh task (context size sampled from ``ladder``) and
    a batch of its queries, so no fixed dataset exists to overfit. With
    ``curriculum`` the first 30% of steps use small contexts and the middle
    30% mid-sized ones, which speeds up the copying phase transition.
    Pass ``weights``/``state`` to resume a run.
    """
    from .kvcache import corpus_prefix_tokens

    if weights is None:
        weights = init_weights(model_config)
    if state is None:
        state = AdamState.init(weights)
    rng = SplitMix64(train_config.seed)
    ema = None
    for step in range(1, train_config.steps + 1):
        frac = step / train_config.steps
        pool = ladder
        if curriculum and frac <= 0.3:
            pool = tuple(n for n in ladder if n <= 8) or ladder
        elif curriculum and frac <= 0.6:
            pool = tuple(n for n in ladder if n <= 32) or ladder
        n_pairs = rng.choice(pool)
        if n_pairs <= 4:
            # small contexts: one fresh task per row keeps the batch diverse
            rows = []
            for _ in range(train_config.batch_size):
                task = make_lookup_task(n_pairs, distractor_rate,
                                        seed=rng.next_u64())
                prefix = corpus_prefix_tokens(task_to_corpus(task))
                q, a = task.queries[rng.next_below(len(task.queries))]
                rows.append((prefix, q, a))
            tokens, mask = build_mixed_batch(rows, supervise_query)
            loss, grads = loss_and_grads(weights, tokens, mask)
        else:
            task = make_lookup_task(n_pairs, distractor_rate,
                                    seed=rng.next_u64())
            prefix = corpus_prefix_tokens(task_to_corpus(task))
            idx = [rng.next_below(len(task.queries))
                   for _ in range(train_config.batch_size)]
            tokens, mask = build_batch(prefix,
                                       [task.queries[i] for i in idx],
                                       supervise_query)
            tp = len(prefix)
            loss, grads = loss_and_grads_shared(weights, prefix,
                                                tokens[:, tp:],
                                                mask[:, tp:])
        adam_step(weights, grads, state, train_config)
        ema = loss if ema is None else 0.98 * ema + 0.02 * loss
        if log_fn is not None and (step % log_every == 0
                                   or step == train_config.steps):
            log_fn(f"step {step:>6}  n_pairs {n_pairs:>3}  "
                   f"loss {loss:.4f}  ema {ema:.4f}")
    return weights


def evaluate_lookup_em(weights: Weights, n_tasks: int = 25, n_pairs: int = 8,
                       distractor_rate: float = 0.5, seed: int = 7000,
                       queries_per_task: int | None = 8,
                       max_new_tokens: int = 16) -> float:
    """Held-out exact-match rate over fresh seeded tasks, via cached decoding."""
    from .kvcache import kv_encode, truncate_to
    from .model import greedy_generate

    rng = SplitMix64(seed)
    hits = 0
    total = 0
    for _ in range(n_tasks):
        task = make_lookup_task(n_pairs, distractor_rate, seed=rng.next_u64())
        cache = kv_encode(weights, task_to_corpus(task))
        mark = cache.doc_mark
        queries = list(task.queries)
        if queries_per_task is not None and queries_per_task < len(queries):
            picked = rng.sample_indices(len(queries), queries_per_task)
            queries = [queries[i] for i in picked]
        for query, answer in queries:
            result = greedy_generate(weights, cache, tokenize(query),
                                     max_new_tokens=max_new_tokens)
            hits += exact_match(result.text, [answer])
            total += 1
            truncate_to(cache, mark)
    return hits / total
