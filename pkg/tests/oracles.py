"""Independent reference implementations the tests check the library against.

Everything here is deliberately written the slow, obvious way (explicit
loops, closed forms) and stays independent of the code paths it verifies.
"""

import math

import numpy as np


def matmul_loops(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def fro_norm_loops(m):
    total = 0.0
    for row in m:
        for x in row:
            total += float(x) * float(x)
    return math.sqrt(total)


def sym3_eigenvalues(a):
    """Eigenvalues of a symmetric 3x3 matrix via the characteristic cubic
    (trigonometric closed form), descending."""
    p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    if p1 == 0.0:
        return np.sort(np.diag(a))[::-1]
    q = np.trace(a) / 3.0
    p2 = (a[0, 0] - q) ** 2 + (a[1, 1] - q) ** 2 + (a[2, 2] - q) ** 2 + 2.0 * p1
    p = math.sqrt(p2 / 6.0)
    b = (a - q * np.eye(3)) / p
    det_b = (b[0, 0] * (b[1, 1] * b[2, 2] - b[1, 2] * b[2, 1])
             - b[0, 1] * (b[1, 0] * b[2, 2] - b[1, 2] * b[2, 0])
             + b[0, 2] * (b[1, 0] * b[2, 1] - b[1, 1] * b[2, 0]))
    r = min(1.0, max(-1.0, det_b / 2.0))
    phi = math.acos(r) / 3.0
    e1 = q + 2.0 * p * math.cos(phi)
    e3 = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    e2 = 3.0 * q - e1 - e3
    return np.array(sorted([e1, e2, e3], reverse=True))


def tail_energy(sigma, r):
    return math.sqrt(float(np.sum(np.asarray(sigma)[r:] ** 2)))


def softmax_rows(mat):
    out = np.empty_like(mat, dtype=np.float64)
    for i, row in enumerate(mat):
        shifted = row - row.max()
        e = np.exp(shifted)
        out[i] = e / e.sum()
    return out


def gelu(x):
    from scipy.special import erf
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def layernorm_rows(x, g, b, eps=1e-5):
    out = np.empty_like(x, dtype=np.float64)
    for i, row in enumerate(x):
        mu = row.mean()
        var = ((row - mu) ** 2).mean()
        out[i] = g * (row - mu) / math.sqrt(var + eps) + b
    return out


def naive_layer_forward(p, x, cross_kv=None, causal=False):
    """Per-head loop reference for both layer parameterizations."""
    from twinpress.model import CompressedLayerParams

    x = np.asarray(x, dtype=np.float64)
    compressed = isinstance(p, CompressedLayerParams)
    d_h = p.d_h
    h_count = p.n_heads
    width = p.head_width if compressed else d_h

    if p.ff_residual_pre_ln:
        att_in = layernorm_rows(x, p.ln_g, p.ln_b)
    else:
        att_in = x
    ksrc = cross_kv if cross_kv is not None else att_in

    heads = []
    for h in range(h_count):
        rows = slice(h * width, (h + 1) * width)
        wq_h = p.w_q[rows]
        wk_h = p.w_k[rows]
        wv_h = p.w_v[rows]
        q_h = att_in @ wq_h.T
        k_h = ksrc @ wk_h.T
        v_h = ksrc @ wv_h.T
        if not compressed:
            if p.b_q is not None:
                q_h = q_h + p.b_q[h * d_h:(h + 1) * d_h]
            if p.b_v is not None:
                v_h = v_h + p.b_v[h * d_h:(h + 1) * d_h]
        logits = q_h @ k_h.T / math.sqrt(d_h)
        if compressed and p.t_q is not None:
            logits = logits + (ksrc @ p.t_q[h])[None, :] / math.sqrt(d_h)
        if causal:
            n = logits.shape[0]
            for i in range(n):
                logits[i, i + 1:] = -np.inf
        a_h = softmax_rows(logits)
        c_h = a_h @ v_h
        if compressed:
            heads.append(c_h @ p.w_ot[rows])
        else:
            heads.append(c_h @ p.w_o[:, h * d_h:(h + 1) * d_h].T)
    z = sum(heads)
    if p.b_o is not None:
        z = z + p.b_o

    if compressed:
        w1 = p.ff1_u @ p.ff1_v + p.ff1_a @ p.ff1_b
        w2 = p.ff2_u @ p.ff2_v + p.ff2_a @ p.ff2_b
    else:
        w1, w2 = p.w_1, p.w_2

    def act(v):
        return gelu(v) if p.activation == "gelu" else np.maximum(v, 0.0)

    if p.ff_residual_pre_ln:
        x_mid = x + z
        h_in = layernorm_rows(x_mid, p.ln2_g, p.ln2_b)
        f1 = h_in @ w1.T
        if p.b_1 is not None:
            f1 = f1 + p.b_1
        out = act(f1) @ w2.T
        if p.b_2 is not None:
            out = out + p.b_2
        return x_mid + out
    z_norm = layernorm_rows(z + x, p.ln_g, p.ln_b)
    f1 = z_norm @ w1.T
    if p.b_1 is not None:
        f1 = f1 + p.b_1
    out = act(f1) @ w2.T
    if p.b_2 is not None:
        out = out + p.b_2
    return out


def numeric_gradient(fn, arr, step=1e-5):
    """Central-difference gradient of a scalar function of one array."""
    grad = np.zeros_like(arr)
    for i in range(arr.size):
        orig = arr.flat[i]
        arr.flat[i] = orig + step
        hi = fn()
        arr.flat[i] = orig - step
        lo = fn()
        arr.flat[i] = orig
        grad.flat[i] = (hi - lo) / (2.0 * step)
    return grad


def random_layer(dims, rng, biases=True, activation="gelu", pre_ln=False):
    from twinpress.model import LayerParams

    d, d_ff = dims.d, dims.d_ff
    sd = 1.0 / math.sqrt(d)
    return LayerParams(
        w_q=rng.normal(0, sd, (d, d)),
        w_k=rng.normal(0, sd, (d, d)),
        w_v=rng.normal(0, sd, (d, d)),
        w_o=rng.normal(0, sd, (d, d)),
        w_1=rng.normal(0, sd, (d_ff, d)),
        w_2=rng.normal(0, 1.0 / math.sqrt(d_ff), (d, d_ff)),
        n_heads=dims.n_heads,
        b_q=rng.normal(0, 0.1, d) if biases else None,
        b_v=rng.normal(0, 0.1, d) if biases else None,
        b_o=rng.normal(0, 0.1, d) if biases else None,
        b_1=rng.normal(0, 0.1, d_ff) if biases else None,
        b_2=rng.normal(0, 0.1, d) if biases else None,
        ln_g=1.0 + rng.normal(0, 0.05, d),
        ln_b=rng.normal(0, 0.05, d),
        ln2_g=(1.0 + rng.normal(0, 0.05, d)) if pre_ln else None,
        ln2_b=rng.normal(0, 0.05, d) if pre_ln else None,
        activation=activation,
        ff_residual_pre_ln=pre_ln,
    )
