# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: hot loops for sampling, scoring, PPO losses, and GAE.

Semantics mirror marlflow._kernels.pyref; sparse base features (token
counts are mostly zero) are exploited in the matvec and gradient loops.
"""
import numpy as np

from libc.math cimport exp, log, isfinite

BACKEND_NAME = "compiled"


cdef inline void _base_logits(double[:, ::1] policy, double[::1] feat,
                              double[::1] logits) noexcept:
    cdef Py_ssize_t F = policy.shape[0], V = policy.shape[1]
    cdef Py_ssize_t f, v
    cdef double c
    for v in range(V):
        logits[v] = 0.0
    for f in range(F):
        c = feat[f]
        if c != 0.0:
            for v in range(V):
                logits[v] += c * policy[f, v]


cdef inline double _dot(double[::1] w, double[::1] feat) noexcept:
    cdef Py_ssize_t f, F = w.shape[0]
    cdef double s = 0.0
    for f in range(F):
        if feat[f] != 0.0:
            s += feat[f] * w[f]
    return s


def sample_tokens(double[:, ::1] policy, double[::1] value_w,
                  double[::1] base_feat, double[::1] uniforms,
                  int end_id, bint greedy):
    cdef Py_ssize_t V = policy.shape[1]
    cdef Py_ssize_t max_len = uniforms.shape[0]
    cdef Py_ssize_t t, v, tok, n = 0
    cdef double m, z, acc, u, value
    logits_arr = np.empty(V, dtype=np.float64)
    ex_arr = np.empty(V, dtype=np.float64)
    tokens_arr = np.empty(max_len, dtype=np.int32)
    lp_arr = np.empty(max_len, dtype=np.float64)
    val_arr = np.empty(max_len, dtype=np.float64)
    cdef double[::1] logits = logits_arr
    cdef double[::1] ex = ex_arr
    cdef int[::1] tokens = tokens_arr
    cdef double[::1] lps = lp_arr
    cdef double[::1] vals = val_arr
    cdef bint truncated = True

    _base_logits(policy, base_feat, logits)
    value = _dot(value_w, base_feat)
    for t in range(max_len):
        for v in range(V):
            if not isfinite(logits[v]):
                raise FloatingPointError(
                    "non-finite logits: corrupted parameters")
        m = logits[0]
        for v in range(1, V):
            if logits[v] > m:
                m = logits[v]
        z = 0.0
        for v in range(V):
            ex[v] = exp(logits[v] - m)
            z += ex[v]
        if greedy:
            tok = 0
            for v in range(1, V):
                if logits[v] > logits[tok]:
                    tok = v
        else:
            u = uniforms[t]
            acc = 0.0
            tok = V - 1
            for v in range(V):
                acc += ex[v] / z
                if u < acc:
                    tok = v
                    break
        tokens[n] = <int>tok
        lps[n] = (logits[tok] - m) - log(z)
        vals[n] = value
        n += 1
        if tok == end_id:
            truncated = False
            break
        for v in range(V):
            logits[v] += policy[tok, v]
        value += value_w[tok]
    return (tokens_arr[:n].copy(), lp_arr[:n].copy(), val_arr[:n].copy(),
            bool(truncated))


def score_tokens(double[:, ::1] policy, double[::1] value_w,
                 double[::1] base_feat, tokens_in):
    tokens_arr = np.ascontiguousarray(tokens_in, dtype=np.int32)
    cdef int[::1] tokens = tokens_arr
    cdef Py_ssize_t n = tokens.shape[0]
    cdef Py_ssize_t V = policy.shape[1]
    cdef Py_ssize_t t, v, tok
    cdef double m, z, value
    logits_arr = np.empty(V, dtype=np.float64)
    lp_arr = np.empty(n, dtype=np.float64)
    val_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] logits = logits_arr
    cdef double[::1] lps = lp_arr
    cdef double[::1] vals = val_arr

    _base_logits(policy, base_feat, logits)
    value = _dot(value_w, base_feat)
    for t in range(n):
        tok = tokens[t]
        m = logits[0]
        for v in range(1, V):
            if logits[v] > m:
                m = logits[v]
        z = 0.0
        for v in range(V):
            z += exp(logits[v] - m)
        lps[t] = (logits[tok] - m) - log(z)
        vals[t] = value
        if t + 1 < n:
            for v in range(V):
                logits[v] += policy[tok, v]
            value += value_w[tok]
    return lp_arr, val_arr


def policy_loss_grad(double[:, ::1] policy, double[:, ::1] base_feats,
                     int[:, ::1] tokens, int[::1] lengths,
                     double[:, ::1] old_lp, double[:, ::1] adv,
                     double clip_eps, double entropy_coef):
    cdef Py_ssize_t R = tokens.shape[0], T = tokens.shape[1]
    cdef Py_ssize_t F = policy.shape[0], V = policy.shape[1]
    cdef Py_ssize_t r, t, v, f, tok, n
    cdef double m, z, new_lp, ratio, clip_r, surr1, surr2, a, coef, h, c
    cdef double lo = 1.0 - clip_eps, hi = 1.0 + clip_eps
    cdef double n_tok = 0.0, loss_sum = 0.0, ent_sum = 0.0
    cdef double ratio_sum = 0.0, ratio_max = 0.0, dev, dev_max = 0.0
    cdef double clip_count = 0.0, kl_sum = 0.0

    grad_arr = np.zeros((F, V), dtype=np.float64)
    feat_arr = np.empty(F, dtype=np.float64)
    logits_arr = np.empty(V, dtype=np.float64)
    lpall_arr = np.empty(V, dtype=np.float64)
    p_arr = np.empty(V, dtype=np.float64)
    gl_arr = np.empty(V, dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    cdef double[::1] feat = feat_arr
    cdef double[::1] logits = logits_arr
    cdef double[::1] lp_all = lpall_arr
    cdef double[::1] p = p_arr
    cdef double[::1] gl = gl_arr

    for r in range(R):
        n = lengths[r]
        n_tok += n
    if n_tok == 0.0:
        raise ValueError("empty batch")

    for r in range(R):
        n = lengths[r]
        if n == 0:
            continue
        for f in range(F):
            feat[f] = base_feats[r, f]
        _base_logits(policy, feat, logits)
        for t in range(n):
            tok = tokens[r, t]
            m = logits[0]
            for v in range(1, V):
                if logits[v] > m:
                    m = logits[v]
            z = 0.0
            for v in range(V):
                p[v] = exp(logits[v] - m)
                z += p[v]
            c = log(z)
            h = 0.0
            for v in range(V):
                lp_all[v] = (logits[v] - m) - c
                p[v] = p[v] / z
                h -= p[v] * lp_all[v]
            new_lp = lp_all[tok]
            ratio = exp(new_lp - old_lp[r, t])
            a = adv[r, t]
            surr1 = ratio * a
            clip_r = ratio
            if clip_r < lo:
                clip_r = lo
            elif clip_r > hi:
                clip_r = hi
            surr2 = clip_r * a
            loss_sum += surr1 if surr1 < surr2 else surr2
            if surr2 < surr1:
                clip_count += 1.0
            coef = (ratio * a) / n_tok if surr1 <= surr2 else 0.0
            ent_sum += h
            ratio_sum += ratio
            if ratio > ratio_max:
                ratio_max = ratio
            dev = ratio - 1.0
            if dev < 0.0:
                dev = -dev
            if dev > dev_max:
                dev_max = dev
            kl_sum += old_lp[r, t] - new_lp

            for v in range(V):
                gl[v] = -coef * ((1.0 if v == tok else 0.0) - p[v])
                if entropy_coef != 0.0:
                    gl[v] += (entropy_coef / n_tok) * p[v] * (lp_all[v] + h)
            for f in range(F):
                c = feat[f]
                if c != 0.0:
                    for v in range(V):
                        grad[f, v] += c * gl[v]

            if t + 1 < n:
                for v in range(V):
                    logits[v] += policy[tok, v]
                feat[tok] += 1.0

    cdef double loss = -loss_sum / n_tok - entropy_coef * (ent_sum / n_tok)
    stats = {
        "n_tokens": n_tok,
        "ratio_sum": ratio_sum,
        "ratio_max": ratio_max,
        "max_ratio_dev": dev_max,
        "clip_count": clip_count,
        "approx_kl_sum": kl_sum,
        "entropy_sum": ent_sum,
    }
    return loss, grad_arr, stats


def value_loss_grad(double[::1] value_w, double[:, ::1] base_feats,
                    int[:, ::1] tokens, int[::1] lengths,
                    double[:, ::1] returns, double value_coef):
    cdef Py_ssize_t R = tokens.shape[0], T = tokens.shape[1]
    cdef Py_ssize_t F = value_w.shape[0]
    cdef Py_ssize_t r, t, f, n, tok
    cdef double n_tok = 0.0, loss_sum = 0.0, value, diff, c

    grad_arr = np.zeros(F, dtype=np.float64)
    feat_arr = np.empty(F, dtype=np.float64)
    v_arr = np.zeros((R, T), dtype=np.float64)
    cdef double[::1] grad = grad_arr
    cdef double[::1] feat = feat_arr
    cdef double[:, ::1] vpred = v_arr

    for r in range(R):
        n_tok += lengths[r]
    if n_tok == 0.0:
        raise ValueError("empty batch")

    for r in range(R):
        n = lengths[r]
        if n == 0:
            continue
        for f in range(F):
            feat[f] = base_feats[r, f]
        value = _dot(value_w, feat)
        for t in range(n):
            tok = tokens[r, t]
            vpred[r, t] = value
            diff = value - returns[r, t]
            loss_sum += diff * diff
            c = (2.0 * value_coef / n_tok) * diff
            for f in range(F):
                if feat[f] != 0.0:
                    grad[f] += c * feat[f]
            if t + 1 < n:
                feat[tok] += 1.0
                value += value_w[tok]

    return value_coef * loss_sum / n_tok, grad_arr, v_arr


def gae_batch(double[:, ::1] rewards, double[:, ::1] values,
              int[::1] lengths, double[::1] terminal_values,
              double gamma, double lam):
    cdef Py_ssize_t R = rewards.shape[0], T = rewards.shape[1]
    cdef Py_ssize_t r, t, n
    cdef double acc, next_value, delta
    adv_arr = np.zeros((R, T), dtype=np.float64)
    ret_arr = np.zeros((R, T), dtype=np.float64)
    cdef double[:, ::1] adv = adv_arr
    cdef double[:, ::1] ret = ret_arr
    for r in range(R):
        n = lengths[r]
        acc = 0.0
        next_value = terminal_values[r]
        for t in range(n - 1, -1, -1):
            delta = (rewards[r, t] + gamma * next_value) - values[r, t]
            acc = delta + gamma * lam * acc
            adv[r, t] = acc
            ret[r, t] = acc + values[r, t]
            next_value = values[r, t]
    return adv_arr, ret_arr
