"""Pure-Python (numpy) kernel implementations.

Reference semantics for the compiled backend. Within this backend,
`sample_tokens` and `score_tokens` share the exact arithmetic path, so
re-scoring a fresh sample reproduces its log-probs bit for bit.

Feature convention: a context feature vector has length F = V + R_block;
the first V entries are token counts, the rest is fixed (role one-hot).
Emitting token k increments feature k, so logits/value updates are
incremental row additions.
"""
from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def sample_tokens(policy, value_w, base_feat, uniforms, end_id, greedy):
    """Autoregressive sampling; returns (tokens, logprobs, values, truncated).

    Consumes uniforms[t] for position t; stops after emitting end_id or
    after len(uniforms) tokens (truncated).
    """
    vocab_size = policy.shape[1]
    max_len = len(uniforms)
    logits = base_feat @ policy
    value = float(base_feat @ value_w)
    tokens = np.empty(max_len, dtype=np.int32)
    logprobs = np.empty(max_len, dtype=np.float64)
    values = np.empty(max_len, dtype=np.float64)
    truncated = True
    n = 0
    for t in range(max_len):
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite logits: corrupted parameters")
        m = logits.max()
        ex = np.exp(logits - m)
        z = ex.sum()
        if greedy:
            tok = int(np.argmax(logits))
        else:
            cum = np.cumsum(ex / z)
            tok = int(np.searchsorted(cum, uniforms[t], side="right"))
            if tok >= vocab_size:
                tok = vocab_size - 1
        tokens[n] = tok
        logprobs[n] = (logits[tok] - m) - np.log(z)
        values[n] = value
        n += 1
        if tok == end_id:
            truncated = False
            break
        logits = logits + policy[tok]
        value = value + float(value_w[tok])
    return tokens[:n].copy(), logprobs[:n].copy(), values[:n].copy(), truncated


def score_tokens(policy, value_w, base_feat, tokens):
    """Teacher-forced log-probs and per-position values for given tokens."""
    n = len(tokens)
    logits = base_feat @ policy
    value = float(base_feat @ value_w)
    logprobs = np.empty(n, dtype=np.float64)
    values = np.empty(n, dtype=np.float64)
    for t in range(n):
        tok = int(tokens[t])
        m = logits.max()
        ex = np.exp(logits - m)
        z = ex.sum()
        logprobs[t] = (logits[tok] - m) - np.log(z)
        values[t] = value
        if t + 1 < n:
            logits = logits + policy[tok]
            value = value + float(value_w[tok])
    return logprobs, values


def _position_features(base_feats, tokens, vocab_size):
    """(R, T, F) features: base counts plus cumulative emitted-token counts."""
    rows, width = tokens.shape
    feats = np.repeat(base_feats[:, None, :], width, axis=1)
    rr = np.arange(rows)
    for t in range(1, width):
        feats[:, t, :] = feats[:, t - 1, :]
        feats[rr, t, tokens[:, t - 1]] += 1.0
    return feats


def _mask_from_lengths(lengths, width):
    return (np.arange(width)[None, :] < lengths[:, None]).astype(np.float64)


def policy_loss_grad(policy, base_feats, tokens, lengths, old_lp, adv,
                     clip_eps, entropy_coef):
    """Clipped-surrogate PPO loss and exact gradient for the linear softmax.

    Returns (loss, grad, stats) where stats carries token-level diagnostics.
    """
    rows, width = tokens.shape
    vocab_size = policy.shape[1]
    mask = _mask_from_lengths(lengths, width)
    n_tok = float(mask.sum())
    feats = _position_features(base_feats, tokens, vocab_size)
    logits = feats @ policy
    m = logits.max(axis=-1, keepdims=True)
    ex = np.exp(logits - m)
    z = ex.sum(axis=-1, keepdims=True)
    lp_all = (logits - m) - np.log(z)
    p = ex / z
    new_lp = np.take_along_axis(lp_all, tokens[..., None].astype(np.int64), -1)[..., 0]

    ratio = np.exp(np.where(mask > 0, new_lp - old_lp, 0.0))
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    term = np.minimum(surr1, surr2)
    loss_clip = -float((term * mask).sum()) / n_tok

    active = (surr1 <= surr2) & (mask > 0)
    coef = np.where(active, ratio * adv, 0.0) / n_tok
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, tokens[..., None].astype(np.int64), 1.0, -1)
    grad_logits = -coef[..., None] * (onehot - p)

    entropy = -(p * lp_all).sum(axis=-1)
    ent_mean = float((entropy * mask).sum()) / n_tok
    loss = loss_clip - entropy_coef * ent_mean
    if entropy_coef != 0.0:
        dH = -p * (lp_all + entropy[..., None])
        grad_logits -= (entropy_coef / n_tok) * dH * mask[..., None]

    grad = np.einsum("rtf,rtv->fv", feats, grad_logits)

    dev = np.abs(ratio - 1.0) * mask
    clipped = (surr2 < surr1) & (mask > 0)
    stats = {
        "n_tokens": n_tok,
        "ratio_sum": float((ratio * mask).sum()),
        "ratio_max": float((ratio * mask).max()) if n_tok else 1.0,
        "max_ratio_dev": float(dev.max()) if n_tok else 0.0,
        "clip_count": float(clipped.sum()),
        "approx_kl_sum": float(((old_lp - new_lp) * mask).sum()),
        "entropy_sum": float((entropy * mask).sum()),
    }
    return loss, grad, stats


def value_loss_grad(value_w, base_feats, tokens, lengths, returns, value_coef):
    """Masked MSE between fresh value predictions and returns, with gradient."""
    rows, width = tokens.shape
    mask = _mask_from_lengths(lengths, width)
    n_tok = float(mask.sum())
    feats = _position_features(base_feats, tokens, value_w.shape[0])
    v = feats @ value_w
    diff = (v - returns) * mask
    loss = value_coef * float((diff * diff).sum()) / n_tok
    dv = (2.0 * value_coef / n_tok) * diff
    grad = np.einsum("rtf,rt->f", feats, dv)
    return loss, grad, v


def gae_batch(rewards, values, lengths, terminal_values, gamma, lam):
    """Per-row generalized advantage estimation (recursive form)."""
    rows, width = rewards.shape
    adv = np.zeros((rows, width), dtype=np.float64)
    ret = np.zeros((rows, width), dtype=np.float64)
    for r in range(rows):
        n = int(lengths[r])
        acc = 0.0
        next_value = float(terminal_values[r])
        for t in range(n - 1, -1, -1):
            delta = rewards[r, t] + gamma * next_value - values[r, t]
            acc = delta + gamma * lam * acc
            adv[r, t] = acc
            ret[r, t] = acc + values[r, t]
            next_value = values[r, t]
    return adv, ret
