"""Pure-numpy fallback kernels, API-compatible with the numba backend.

Matmuls go through unoptimized einsum in float64, which reduces each output
element over the contracted axis in a fixed order independent of batch size
(verified by the backend test suite). Attention compacts each query row to
its allowed columns before reducing, so results do not depend on how many
masked columns are present. Slower than the jitted backend, same contracts.
"""

import numpy as np

F64 = np.float64


def matmul(a, b):
    out = np.einsum("ij,jk->ik", a.astype(F64), b.astype(F64))
    return out.astype(np.float32)


def matmul_bias(a, b, bias):
    out = np.einsum("ij,jk->ik", a.astype(F64), b.astype(F64)) + bias.astype(F64)
    return out.astype(np.float32)


def softmax_rows(x):
    x64 = x.astype(F64)
    mx = x64.max(axis=-1, keepdims=True)
    e = np.exp(x64 - mx)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def masked_softmax_rows(x, allow):
    m, n = x.shape
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        cols = np.flatnonzero(allow[i])
        xs = x[i, cols].astype(F64)
        e = np.exp(xs - xs.max())
        out[i, cols] = (e / e.sum()).astype(np.float32)
    return out


def layer_norm_rows(x, gain, bias, eps):
    x64 = x.astype(F64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=-1, keepdims=True)
    xn = (x64 - mean) / np.sqrt(var + eps)
    return (xn * gain.astype(F64) + bias.astype(F64)).astype(np.float32)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x):
    v = x.astype(F64)
    v3 = v * v * v
    return (0.5 * v * (1.0 + np.tanh(_GELU_C * (v + 0.044715 * v3)))).astype(np.float32)


def gelu_grad(x):
    v = x.astype(F64)
    u = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * (v * v))
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du


def _windows(x, k, stride):
    n = x.shape[0]
    m = (n - k) // stride + 1
    idx = np.arange(m)[:, None] * stride + np.arange(k)[None, :]
    return x[idx]  # (m, k, d)


def conv1d(x, w, stride):
    win = _windows(x.astype(F64), w.shape[0], stride)
    out = np.einsum("mjc,jco->mo", win, w.astype(F64))
    return out.astype(np.float32)


def conv1d_bwd(x, w, stride, dy):
    n, d = x.shape
    k, _, dout = w.shape
    m = dy.shape[0]
    win = _windows(x.astype(F64), k, stride)
    dy64 = dy.astype(F64)
    dw = np.einsum("mjc,mo->jco", win, dy64)
    dx = np.zeros((n, d), dtype=F64)
    dwin = np.einsum("mo,jco->mjc", dy64, w.astype(F64))
    for i in range(m):
        dx[i * stride : i * stride + k] += dwin[i]
    return dx.astype(np.float32), dw.astype(np.float32)


def avg_pool1d(x, window, stride):
    n, d = x.shape
    m = (n + stride - 1) // stride
    out = np.empty((m, d), dtype=np.float32)
    x64 = x.astype(F64)
    for i in range(m):
        lo = i * stride
        hi = min(lo + window, n)
        out[i] = (x64[lo:hi].sum(axis=0) / (hi - lo)).astype(np.float32)
    return out


def avg_pool1d_bwd(n, window, stride, dy):
    m, d = dy.shape
    dx = np.zeros((n, d), dtype=F64)
    for i in range(m):
        lo = i * stride
        hi = min(lo + window, n)
        dx[lo:hi] += dy[i].astype(F64) / (hi - lo)
    return dx.astype(np.float32)


def stack_forward(kc, vc, cur_len, x, allow, n_heads, eps,
                  ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo,
                  ln2g, ln2b, w1, b1, w2, b2):
    n_layers = wq.shape[0]
    t, d = x.shape
    dh = d // n_heads
    inv_sqrt = 1.0 / np.sqrt(F64(dh))

    h = x.copy()
    for layer in range(n_layers):
        u = layer_norm_rows(h, ln1g[layer], ln1b[layer], eps)
        q = matmul_bias(u, wq[layer], bq[layer])
        kc[layer, cur_len : cur_len + t] = matmul_bias(u, wk[layer], bk[layer])
        vc[layer, cur_len : cur_len + t] = matmul_bias(u, wv[layer], bv[layer])
        ctx = np.empty((t, d), dtype=np.float32)
        for i in range(t):
            cols = np.flatnonzero(allow[i])
            for head in range(n_heads):
                c0 = head * dh
                keys = kc[layer, cols, c0 : c0 + dh].astype(F64)
                dots = np.einsum("c,jc->j", q[i, c0 : c0 + dh].astype(F64), keys)
                sc = (dots.astype(np.float32).astype(F64) * inv_sqrt).astype(np.float32)
                e = np.exp(sc.astype(F64) - sc.astype(F64).max())
                p = (e / e.sum()).astype(np.float32)
                vals = vc[layer, cols, c0 : c0 + dh].astype(F64)
                ctx[i, c0 : c0 + dh] = np.einsum("j,jc->c", p.astype(F64), vals).astype(
                    np.float32
                )
        h = h + matmul_bias(ctx, wo[layer], bo[layer])
        u2 = layer_norm_rows(h, ln2g[layer], ln2b[layer], eps)
        f2 = matmul_bias(gelu(matmul_bias(u2, w1[layer], b1[layer])), w2[layer], b2[layer])
        h = h + f2
    return h
