"""Numba-jitted numeric kernels.

All kernels accumulate in float64 and round to float32 at op boundaries.
Reductions run in a fixed sequential order per output element, so a row's
result never depends on how many other rows share the call. That property
is what makes incremental decoding bitwise-equal to batched prefill.
"""

import math

import numpy as np
from numba import njit

F32 = np.float32
NEG_INF = np.float64(-np.inf)

_JIT = dict(cache=True, fastmath=False, nogil=True)


@njit(**_JIT)
def matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.empty((m, n), dtype=np.float32)
    acc = np.empty(n, dtype=np.float64)
    for i in range(m):
        for c in range(n):
            acc[c] = 0.0
        for j in range(k):
            av = np.float64(a[i, j])
            for c in range(n):
                acc[c] += av * np.float64(b[j, c])
        for c in range(n):
            out[i, c] = np.float32(acc[c])
    return out


@njit(**_JIT)
def matmul_bias(a, b, bias):
    m, k = a.shape
    _, n = b.shape
    out = np.empty((m, n), dtype=np.float32)
    acc = np.empty(n, dtype=np.float64)
    for i in range(m):
        for c in range(n):
            acc[c] = np.float64(bias[c])
        for j in range(k):
            av = np.float64(a[i, j])
            for c in range(n):
                acc[c] += av * np.float64(b[j, c])
        for c in range(n):
            out[i, c] = np.float32(acc[c])
    return out


@njit(**_JIT)
def softmax_rows(x):
    m, n = x.shape
    out = np.empty((m, n), dtype=np.float32)
    for i in range(m):
        mx = NEG_INF
        for j in range(n):
            v = np.float64(x[i, j])
            if v > mx:
                mx = v
        s = 0.0
        for j in range(n):
            e = math.exp(np.float64(x[i, j]) - mx)
            out[i, j] = np.float32(e)
            s += e
        inv = 1.0 / s
        for j in range(n):
            out[i, j] = np.float32(np.float64(out[i, j]) * inv)
    return out


@njit(**_JIT)
def masked_softmax_rows(x, allow):
    """Softmax per row over allowed columns only; masked entries are exact 0."""
    m, n = x.shape
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        mx = NEG_INF
        for j in range(n):
            if allow[i, j]:
                v = np.float64(x[i, j])
                if v > mx:
                    mx = v
        s = 0.0
        for j in range(n):
            if allow[i, j]:
                e = math.exp(np.float64(x[i, j]) - mx)
                out[i, j] = np.float32(e)
                s += e
        inv = 1.0 / s
        for j in range(n):
            if allow[i, j]:
                out[i, j] = np.float32(np.float64(out[i, j]) * inv)
    return out


@njit(**_JIT)
def layer_norm_rows(x, gain, bias, eps):
    m, n = x.shape
    out = np.empty((m, n), dtype=np.float32)
    for i in range(m):
        mean = 0.0
        for j in range(n):
            mean += np.float64(x[i, j])
        mean /= n
        var = 0.0
        for j in range(n):
            d = np.float64(x[i, j]) - mean
            var += d * d
        var /= n
        inv = 1.0 / math.sqrt(var + eps)
        for j in range(n):
            xn = (np.float64(x[i, j]) - mean) * inv
            out[i, j] = np.float32(xn * np.float64(gain[j]) + np.float64(bias[j]))
    return out


@njit(**_JIT)
def _gelu_njit(x):
    """tanh-approximation GELU; njit-callable for the fused stack."""
    flat = x.ravel()
    out = np.empty(flat.shape[0], dtype=np.float32)
    c = 0.7978845608028654  # sqrt(2/pi)
    for i in range(flat.shape[0]):
        v = np.float64(flat[i])
        out[i] = np.float32(0.5 * v * (1.0 + math.tanh(c * (v + 0.044715 * v * v * v))))
    return out.reshape(x.shape)


# the op layer gets numpy's vectorized tanh; a scalar libm loop costs ~8x
from ._kernels_numpy import gelu, gelu_grad  # noqa: E402


@njit(**_JIT)
def conv1d(x, w, stride):
    """Valid cross-correlation over the token axis. x (n,d), w (k,d,dout)."""
    n, d = x.shape
    k, _, dout = w.shape
    m = (n - k) // stride + 1
    out = np.empty((m, dout), dtype=np.float32)
    acc = np.empty(dout, dtype=np.float64)
    for i in range(m):
        for o in range(dout):
            acc[o] = 0.0
        base = i * stride
        for j in range(k):
            for c in range(d):
                xv = np.float64(x[base + j, c])
                for o in range(dout):
                    acc[o] += xv * np.float64(w[j, c, o])
        for o in range(dout):
            out[i, o] = np.float32(acc[o])
    return out


@njit(**_JIT)
def conv1d_bwd(x, w, stride, dy):
    n, d = x.shape
    k, _, dout = w.shape
    m = dy.shape[0]
    dx = np.zeros((n, d), dtype=np.float64)
    dw = np.zeros((k, d, dout), dtype=np.float64)
    for i in range(m):
        base = i * stride
        for j in range(k):
            for c in range(d):
                xv = np.float64(x[base + j, c])
                accx = 0.0
                for o in range(dout):
                    g = np.float64(dy[i, o])
                    dw[j, c, o] += xv * g
                    accx += np.float64(w[j, c, o]) * g
                dx[base + j, c] += accx
    return dx.astype(np.float32), dw.astype(np.float32)


@njit(**_JIT)
def avg_pool1d(x, window, stride):
    """m = ceil(n/stride); the final window averages its true occupancy."""
    n, d = x.shape
    m = (n + stride - 1) // stride
    out = np.empty((m, d), dtype=np.float32)
    for i in range(m):
        lo = i * stride
        hi = min(lo + window, n)
        cnt = hi - lo
        for c in range(d):
            acc = 0.0
            for j in range(lo, hi):
                acc += np.float64(x[j, c])
            out[i, c] = np.float32(acc / cnt)
    return out


@njit(**_JIT)
def avg_pool1d_bwd(n, window, stride, dy):
    m, d = dy.shape
    dx = np.zeros((n, d), dtype=np.float64)
    for i in range(m):
        lo = i * stride
        hi = min(lo + window, n)
        cnt = hi - lo
        for c in range(d):
            g = np.float64(dy[i, c]) / cnt
            for j in range(lo, hi):
                dx[j, c] += g
    return dx.astype(np.float32)


@njit(**_JIT)
def stack_forward(kc, vc, cur_len, x, allow, n_heads, eps,
                  ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo,
                  ln2g, ln2b, w1, b1, w2, b2):
    """Pre-norm transformer decoder stack with an external KV cache.

    kc/vc: (L, C, d) caches; new rows are written at [cur_len, cur_len+T).
    x: (T, d) already-embedded inputs. allow: (T, cur_len+T) boolean
    attention permissions (cache columns then new rows). Returns the
    hidden states after the last block (pre final-norm features).
    """
    n_layers = wq.shape[0]
    t, d = x.shape
    width = cur_len + t
    dh = d // n_heads
    inv_sqrt = 1.0 / math.sqrt(dh)

    h = x.copy()
    scores = np.empty(width, dtype=np.float32)
    probs = np.empty(width, dtype=np.float64)
    acc = np.empty(dh, dtype=np.float64)
    for layer in range(n_layers):
        u = layer_norm_rows(h, ln1g[layer], ln1b[layer], eps)
        q = matmul_bias(u, wq[layer], bq[layer])
        knew = matmul_bias(u, wk[layer], bk[layer])
        vnew = matmul_bias(u, wv[layer], bv[layer])
        for i in range(t):
            for c in range(d):
                kc[layer, cur_len + i, c] = knew[i, c]
                vc[layer, cur_len + i, c] = vnew[i, c]
        ctx = np.empty((t, d), dtype=np.float32)
        for head in range(n_heads):
            c0 = head * dh
            for i in range(t):
                mx = NEG_INF
                for j in range(width):
                    if allow[i, j]:
                        dot = 0.0
                        for c in range(dh):
                            dot += np.float64(q[i, c0 + c]) * np.float64(kc[layer, j, c0 + c])
                        sc = np.float32(np.float64(np.float32(dot)) * inv_sqrt)
                        scores[j] = sc
                        if np.float64(sc) > mx:
                            mx = np.float64(sc)
                s = 0.0
                for j in range(width):
                    if allow[i, j]:
                        e = math.exp(np.float64(scores[j]) - mx)
                        probs[j] = e
                        s += e
                inv = 1.0 / s
                for c in range(dh):
                    acc[c] = 0.0
                for j in range(width):
                    if allow[i, j]:
                        pv = np.float64(np.float32(probs[j] * inv))
                        for c in range(dh):
                            acc[c] += pv * np.float64(vc[layer, j, c0 + c])
                for c in range(dh):
                    ctx[i, c0 + c] = np.float32(acc[c])
        attn_out = matmul_bias(ctx, wo[layer], bo[layer])
        for i in range(t):
            for c in range(d):
                h[i, c] = np.float32(h[i, c] + attn_out[i, c])
        u2 = layer_norm_rows(h, ln2g[layer], ln2b[layer], eps)
        f1 = _gelu_njit(matmul_bias(u2, w1[layer], b1[layer]))
        f2 = matmul_bias(f1, w2[layer], b2[layer])
        for i in range(t):
            for c in range(d):
                h[i, c] = np.float32(h[i, c] + f2[i, c])
    return h
