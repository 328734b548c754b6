"""Reference transformer: layer forward/backward in two parameterizations,
full-model stacking for toy tasks, and hidden-state capture.

Layer math, default architecture (post-LN, no feed-forward residual):

    Q = X Wq^T, K = X Wk^T, V = X Wv^T          per-head slices of width d_h
    A_h = softmax(Q_h K_h^T / sqrt(d_h))
    Z = concat_h(A_h V_h) Wo^T
    Z' = LayerNorm(Z + X)
    out = act(Z' W1^T) W2^T

The `ff_residual_pre_ln` variant applies LayerNorm before attention and adds
a residual around the feed-forward block (two layernorms).

Compressed layers replace the d_h-wide per-head projections with factor
stacks of width r+l; the softmax scale stays 1/sqrt(d_h) because the factored
product approximates the original logits, whose scale was calibrated to d_h.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from .errors import InputError, NumericalError, ShapeError
from .linalg import Matrix

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
LN_EPS = 1e-5

ACTIVATIONS = ("gelu", "relu")


@dataclass(frozen=True)
class ModelDims:
    d: int
    n_heads: int
    d_h: int
    d_ff: int
    n_layers: int
    vocab: int

    def __post_init__(self):
        for name in ("d", "n_heads", "d_h", "d_ff", "vocab"):
            if getattr(self, name) <= 0:
                raise ShapeError(f"ModelDims.{name} must be positive")
        if self.n_layers < 0:
            raise ShapeError("ModelDims.n_layers must be >= 0")
        if self.n_heads * self.d_h != self.d:
            raise ShapeError(
                f"n_heads * d_h must equal d ({self.n_heads} * {self.d_h} != {self.d})"
            )

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "n_heads": self.n_heads,
            "d_h": self.d_h,
            "d_ff": self.d_ff,
            "n_layers": self.n_layers,
            "vocab": self.vocab,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelDims":
        return cls(**{k: int(data[k]) for k in ("d", "n_heads", "d_h", "d_ff", "n_layers", "vocab")})


@dataclass
class LayerParams:
    """Dense layer weights, head-stacked.

    w_q/w_k/w_v are d x d with head h in rows [h*d_h, (h+1)*d_h); w_o is d x d
    with head h in the same column range. w_1 is d_ff x d, w_2 is d x d_ff.
    Biases are optional 1-D arrays; there is no key bias.
    """

    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    w_1: Matrix
    w_2: Matrix
    n_heads: int
    b_q: Optional[np.ndarray] = None
    b_v: Optional[np.ndarray] = None
    b_o: Optional[np.ndarray] = None
    b_1: Optional[np.ndarray] = None
    b_2: Optional[np.ndarray] = None
    ln_g: Optional[np.ndarray] = None
    ln_b: Optional[np.ndarray] = None
    ln2_g: Optional[np.ndarray] = None  # pre-LN variant only
    ln2_b: Optional[np.ndarray] = None
    activation: str = "gelu"
    ff_residual_pre_ln: bool = False

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.w_q.shape != (d, d) or self.w_k.shape != (d, d) or self.w_v.shape != (d, d):
            raise ShapeError("w_q/w_k/w_v must all be d x d")
        if self.w_o.shape != (d, d):
            raise ShapeError("w_o must be d x d")
        if self.w_1.shape[1] != d or self.w_2.shape[0] != d:
            raise ShapeError("feed-forward shapes inconsistent with d")
        if self.w_1.shape[0] != self.w_2.shape[1]:
            raise ShapeError("w_1 and w_2 disagree on d_ff")
        if d % self.n_heads != 0:
            raise ShapeError("d must be divisible by n_heads")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        if self.ln_g is None:
            self.ln_g = np.ones(d)
        if self.ln_b is None:
            self.ln_b = np.zeros(d)
        if self.ff_residual_pre_ln:
            if self.ln2_g is None:
                self.ln2_g = np.ones(d)
            if self.ln2_b is None:
                self.ln2_b = np.zeros(d)

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_h(self) -> int:
        return self.d // self.n_heads

    @property
    def d_ff(self) -> int:
        return self.w_1.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        """Live views of all present parameter arrays, keyed by field name."""
        out = {}
        for name in ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2", "b_q", "b_v",
                     "b_o", "b_1", "b_2", "ln_g", "ln_b", "ln2_g", "ln2_b"):
            arr = getattr(self, name)
            if arr is not None:
                out[name] = arr
        return out


@dataclass
class CompressedLayerParams:
    """Factored layer weights.

    Attention stacks w_q/w_k/w_v/w_ot are (H*(r_a+l_a)) x d; within each head
    block the first r_a rows are spectral, the remaining l_a rows are the
    adapter. w_ot stacks the transposed per-head output factors so the
    attention output is concat_h(C_h) @ w_ot. Feed-forward weights are stored
    as u @ v + a @ b per matrix. t_q holds the per-head key-space query bias
    (H x d); the value bias is folded into b_o at compression time.
    """

    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_ot: Matrix
    ff1_u: Matrix
    ff1_v: Matrix
    ff1_a: Matrix
    ff1_b: Matrix
    ff2_u: Matrix
    ff2_v: Matrix
    ff2_a: Matrix
    ff2_b: Matrix
    n_heads: int
    d_h: int
    r_a: int
    l_a: int
    r_f: int
    l_f: int
    t_q: Optional[Matrix] = None
    b_o: Optional[np.ndarray] = None
    b_1: Optional[np.ndarray] = None
    b_2: Optional[np.ndarray] = None
    ln_g: Optional[np.ndarray] = None
    ln_b: Optional[np.ndarray] = None
    ln2_g: Optional[np.ndarray] = None
    ln2_b: Optional[np.ndarray] = None
    activation: str = "gelu"
    ff_residual_pre_ln: bool = False

    def __post_init__(self):
        d = self.w_q.shape[1]
        width = self.r_a + self.l_a
        if width <= 0 or width > self.d_h:
            raise ShapeError(f"per-head width r_a+l_a={width} outside (0, d_h={self.d_h}]")
        expect = (self.n_heads * width, d)
        for name in ("w_q", "w_k", "w_v", "w_ot"):
            if getattr(self, name).shape != expect:
                raise ShapeError(f"{name} must have shape {expect}")
        d_ff = self.ff1_u.shape[0]
        if self.ff1_u.shape != (d_ff, self.r_f) or self.ff1_v.shape != (self.r_f, d):
            raise ShapeError("ff1 spectral factor shapes inconsistent")
        if self.ff1_a.shape != (d_ff, self.l_f) or self.ff1_b.shape != (self.l_f, d):
            raise ShapeError("ff1 adapter factor shapes inconsistent")
        if self.ff2_u.shape != (d, self.r_f) or self.ff2_v.shape != (self.r_f, d_ff):
            raise ShapeError("ff2 spectral factor shapes inconsistent")
        if self.ff2_a.shape != (d, self.l_f) or self.ff2_b.shape != (self.l_f, d_ff):
            raise ShapeError("ff2 adapter factor shapes inconsistent")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        if self.ln_g is None:
            self.ln_g = np.ones(d)
        if self.ln_b is None:
            self.ln_b = np.zeros(d)
        if self.ff_residual_pre_ln:
            if self.ln2_g is None:
                self.ln2_g = np.ones(d)
            if self.ln2_b is None:
                self.ln2_b = np.zeros(d)

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_ff(self) -> int:
        return self.ff1_u.shape[0]

    @property
    def head_width(self) -> int:
        return self.r_a + self.l_a

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("w_q", "w_k", "w_v", "w_ot", "ff1_u", "ff1_v", "ff1_a",
                     "ff1_b", "ff2_u", "ff2_v", "ff2_a", "ff2_b", "t_q", "b_o",
                     "b_1", "b_2", "ln_g", "ln_b", "ln2_g", "ln2_b"):
            arr = getattr(self, name)
            if arr is not None:
                out[name] = arr
        return out

    def w1_effective(self) -> Matrix:
        return self.ff1_u @ self.ff1_v + self.ff1_a @ self.ff1_b

    def w2_effective(self) -> Matrix:
        return self.ff2_u @ self.ff2_v + self.ff2_a @ self.ff2_b


AnyLayerParams = Union[LayerParams, CompressedLayerParams]


@dataclass
class AttentionTrace:
    """Per-head intermediates of one forward pass.

    q/k/v/context are (H, n, width); attn is (H, n, m) with rows summing to 1;
    z is the attention output (n, d); z_norm is the feed-forward input.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    context: np.ndarray
    z: Matrix
    z_norm: Matrix


@dataclass
class HiddenStatePairSet:
    """Captured (X_i, X_o) pairs for one layer of the original model."""

    layer_index: int
    pairs: list[tuple[Matrix, Matrix]]
    d: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.pairs:
            raise ShapeError("pair set must be nonempty")
        for x_i, x_o in self.pairs:
            if x_i.shape[1] != self.d or x_o.shape[1] != self.d:
                raise ShapeError("all pairs must share width d")

    def __len__(self) -> int:
        return len(self.pairs)


# ---------------------------------------------------------------------------
# activations / layernorm / softmax primitives


def _act(x: Matrix, kind: str) -> Matrix:
    if kind == "gelu":
        return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))
    return np.maximum(x, 0.0)


def _act_grad(x: Matrix, kind: str) -> Matrix:
    if kind == "gelu":
        return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (x > 0).astype(np.float64)


def _ln_fwd(x: Matrix, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _lead_axes(arr: np.ndarray) -> tuple:
    return tuple(range(arr.ndim - 1))


def _ln_bwd(dout: Matrix, g: np.ndarray, cache):
    xhat, inv = cache
    dg = np.sum(dout * xhat, axis=_lead_axes(dout))
    db = np.sum(dout, axis=_lead_axes(dout))
    dxhat = dout * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg, db


def _softmax_last(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _heads(mat: np.ndarray, n_heads: int) -> np.ndarray:
    # (..., n, H*w) -> (..., H, n, w); columns are head-major by construction
    *lead, n, total = mat.shape
    w = total // n_heads
    return np.ascontiguousarray(
        np.moveaxis(mat.reshape(*lead, n, n_heads, w), -2, -3))


def _unheads(stack: np.ndarray) -> np.ndarray:
    moved = np.moveaxis(stack, -3, -2)  # (..., n, H, w)
    *lead, n, h, w = moved.shape
    return np.ascontiguousarray(moved.reshape(*lead, n, h * w))


def _flat2(arr: np.ndarray) -> np.ndarray:
    # collapse leading dims for one weight-gradient GEMM over a whole batch
    return arr.reshape(-1, arr.shape[-1])


# ---------------------------------------------------------------------------
# layer forward


def _check_finite(arr: np.ndarray, step: str):
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values in {step} output")


def _attn_fwd(p: AnyLayerParams, att_in: Matrix, ksrc: Matrix, causal: bool) -> dict:
    compressed = isinstance(p, CompressedLayerParams)
    if compressed:
        q_act = att_in @ p.w_q.T
        k_act = ksrc @ p.w_k.T
        v_act = ksrc @ p.w_v.T
    else:
        q_act = att_in @ p.w_q.T
        if p.b_q is not None:
            q_act = q_act + p.b_q
        k_act = ksrc @ p.w_k.T
        v_act = ksrc @ p.w_v.T
        if p.b_v is not None:
            v_act = v_act + p.b_v
    q3 = _heads(q_act, p.n_heads)
    k3 = _heads(k_act, p.n_heads)
    v3 = _heads(v_act, p.n_heads)
    scale = 1.0 / np.sqrt(p.d_h)
    logits = (q3 @ np.swapaxes(k3, -1, -2)) * scale
    if compressed and p.t_q is not None:
        # key-space query bias: adds (ksrc @ t_h)/sqrt(d_h) to every query row
        logits = logits + scale * np.swapaxes(ksrc @ p.t_q.T, -1, -2)[..., None, :]
    if causal:
        n, m = logits.shape[-2], logits.shape[-1]
        if n != m:
            raise ShapeError("causal masking requires square attention")
        logits = np.where(np.triu(np.ones((n, m), dtype=bool), k=1), -np.inf, logits)
    attn = _softmax_last(logits)
    ctx = attn @ v3
    zcat = _unheads(ctx)
    if compressed:
        z = zcat @ p.w_ot
    else:
        z = zcat @ p.w_o.T
    if p.b_o is not None:
        z = z + p.b_o
    _check_finite(z, "attention")
    return {"q3": q3, "k3": k3, "v3": v3, "attn": attn, "ctx": ctx,
            "zcat": zcat, "z": z, "att_in": att_in, "ksrc": ksrc}


def _ff_fwd(p: AnyLayerParams, h_in: Matrix) -> dict:
    if isinstance(p, CompressedLayerParams):
        w1 = p.w1_effective()
        w2 = p.w2_effective()
    else:
        w1, w2 = p.w_1, p.w_2
    f1 = h_in @ w1.T
    if p.b_1 is not None:
        f1 = f1 + p.b_1
    g = _act(f1, p.activation)
    out = g @ w2.T
    if p.b_2 is not None:
        out = out + p.b_2
    return {"w1": w1, "w2": w2, "f1": f1, "g": g, "out": out, "h_in": h_in}


def _layer_fwd_cache(p: AnyLayerParams, x: Matrix, causal: bool, cross_kv) -> dict:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim not in (2, 3) or x.shape[-1] != p.d:
        raise ShapeError(f"input must be (batch x) n x {p.d}, got {x.shape}")
    if cross_kv is not None:
        cross_kv = np.ascontiguousarray(cross_kv, dtype=np.float64)
        if cross_kv.ndim != x.ndim or cross_kv.shape[-1] != p.d:
            raise ShapeError(f"cross_kv must be (batch x) m x {p.d}, got {cross_kv.shape}")
        if causal:
            raise InputError("causal masking is not defined for cross-attention")
    c: dict = {"x": x, "cross": cross_kv is not None}
    if p.ff_residual_pre_ln:
        att_in, c["ln1"] = _ln_fwd(x, p.ln_g, p.ln_b)
        ksrc = cross_kv if cross_kv is not None else att_in
        c["att"] = _attn_fwd(p, att_in, ksrc, causal)
        x_mid = x + c["att"]["z"]
        c["x_mid"] = x_mid
        h_in, c["ln2"] = _ln_fwd(x_mid, p.ln2_g, p.ln2_b)
        _check_finite(h_in, "layernorm")
        c["ff"] = _ff_fwd(p, h_in)
        x_out = x_mid + c["ff"]["out"]
        c["z_norm"] = h_in
    else:
        ksrc = cross_kv if cross_kv is not None else x
        c["att"] = _attn_fwd(p, x, ksrc, causal)
        resid = x + c["att"]["z"]
        h_in, c["ln"] = _ln_fwd(resid, p.ln_g, p.ln_b)
        _check_finite(h_in, "layernorm")
        c["ff"] = _ff_fwd(p, h_in)
        x_out = c["ff"]["out"]
        c["z_norm"] = h_in
    _check_finite(x_out, "feed-forward")
    c["x_out"] = x_out
    return c


def layer_forward(p: AnyLayerParams, x: Matrix, *, causal: bool = False,
                  cross_kv: Optional[Matrix] = None, want_trace: bool = False):
    """Run one layer. Returns the output, or (output, AttentionTrace) when
    want_trace is set."""
    p = _materialized(p)
    c = _layer_fwd_cache(p, x, causal, cross_kv)
    if not want_trace:
        return c["x_out"]
    a = c["att"]
    trace = AttentionTrace(q=a["q3"], k=a["k3"], v=a["v3"], attn=a["attn"],
                           context=a["ctx"], z=a["z"], z_norm=c["z_norm"])
    return c["x_out"], trace


def _materialized(p):
    # QuantizedLayerParams (quant module) exposes dequantized(); plain params
    # pass through untouched.
    deq = getattr(p, "dequantized", None)
    return deq() if callable(deq) else p


# ---------------------------------------------------------------------------
# layer backward


def _attn_bwd(p: AnyLayerParams, c: dict, dz: Matrix, grads: dict):
    compressed = isinstance(p, CompressedLayerParams)
    zcat, attn, q3, k3, v3 = c["zcat"], c["attn"], c["q3"], c["k3"], c["v3"]
    att_in, ksrc = c["att_in"], c["ksrc"]
    if p.b_o is not None:
        grads["b_o"] = dz.sum(axis=_lead_axes(dz))
    if compressed:
        grads["w_ot"] = _flat2(zcat).T @ _flat2(dz)
        dzcat = dz @ p.w_ot.T
    else:
        grads["w_o"] = _flat2(dz).T @ _flat2(zcat)
        dzcat = dz @ p.w_o
    dctx = _heads(dzcat, p.n_heads)
    dattn = dctx @ np.swapaxes(v3, -1, -2)
    dv3 = np.swapaxes(attn, -1, -2) @ dctx
    dlogits = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    scale = 1.0 / np.sqrt(p.d_h)
    dq3 = (dlogits @ k3) * scale
    dk3 = (np.swapaxes(dlogits, -1, -2) @ q3) * scale
    dksrc = np.zeros_like(ksrc)
    if compressed and p.t_q is not None:
        colsum = dlogits.sum(axis=-2) * scale  # (..., H, m)
        if ksrc.ndim == 2:
            grads["t_q"] = colsum @ ksrc
        else:
            grads["t_q"] = np.einsum("bhm,bmd->hd", colsum, ksrc)
        dksrc += np.swapaxes(colsum, -1, -2) @ p.t_q
    dq_act = _unheads(dq3)
    dk_act = _unheads(dk3)
    dv_act = _unheads(dv3)
    grads["w_q"] = _flat2(dq_act).T @ _flat2(att_in)
    grads["w_k"] = _flat2(dk_act).T @ _flat2(ksrc)
    grads["w_v"] = _flat2(dv_act).T @ _flat2(ksrc)
    datt_in = dq_act @ p.w_q
    dksrc += dk_act @ p.w_k + dv_act @ p.w_v
    if not compressed:
        if p.b_q is not None:
            grads["b_q"] = dq_act.sum(axis=_lead_axes(dq_act))
        if p.b_v is not None:
            grads["b_v"] = dv_act.sum(axis=_lead_axes(dv_act))
    if not c["cross_attended"]:
        datt_in = datt_in + dksrc
    return datt_in


def _ff_bwd(p: AnyLayerParams, c: dict, dout: Matrix, grads: dict) -> Matrix:
    f1, g, h_in, w1, w2 = c["f1"], c["g"], c["h_in"], c["w1"], c["w2"]
    if p.b_2 is not None:
        grads["b_2"] = dout.sum(axis=_lead_axes(dout))
    dw2 = _flat2(dout).T @ _flat2(g)
    dg = dout @ w2
    df1 = dg * _act_grad(f1, p.activation)
    if p.b_1 is not None:
        grads["b_1"] = df1.sum(axis=_lead_axes(df1))
    dw1 = _flat2(df1).T @ _flat2(h_in)
    if isinstance(p, CompressedLayerParams):
        grads["ff1_u"] = dw1 @ p.ff1_v.T
        grads["ff1_v"] = p.ff1_u.T @ dw1
        grads["ff1_a"] = dw1 @ p.ff1_b.T
        grads["ff1_b"] = p.ff1_a.T @ dw1
        grads["ff2_u"] = dw2 @ p.ff2_v.T
        grads["ff2_v"] = p.ff2_u.T @ dw2
        grads["ff2_a"] = dw2 @ p.ff2_b.T
        grads["ff2_b"] = p.ff2_a.T @ dw2
    else:
        grads["w_1"] = dw1
        grads["w_2"] = dw2
    return df1 @ w1


def _layer_bwd_from_cache(p: AnyLayerParams, c: dict, upstream: Matrix):
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != c["x_out"].shape:
        raise ShapeError(f"upstream gradient shape {upstream.shape} != output {c['x_out'].shape}")
    grads: dict[str, np.ndarray] = {}
    c["att"]["cross_attended"] = c["cross"]
    if p.ff_residual_pre_ln:
        dx_mid = upstream.copy()
        dh_in = _ff_bwd(p, c["ff"], upstream, grads)
        dmid_ln, grads["ln2_g"], grads["ln2_b"] = _ln_bwd(dh_in, p.ln2_g, c["ln2"])
        dx_mid += dmid_ln
        dx = dx_mid.copy()
        datt_in = _attn_bwd(p, c["att"], dx_mid, grads)
        dx_ln, grads["ln_g"], grads["ln_b"] = _ln_bwd(datt_in, p.ln_g, c["ln1"])
        dx += dx_ln
    else:
        dh_in = _ff_bwd(p, c["ff"], upstream, grads)
        dresid, grads["ln_g"], grads["ln_b"] = _ln_bwd(dh_in, p.ln_g, c["ln"])
        dx = dresid.copy()
        dx += _attn_bwd(p, c["att"], dresid, grads)
    return grads, dx


def layer_backward(p: AnyLayerParams, x: Matrix, upstream: Matrix, *,
                   causal: bool = False, cross_kv: Optional[Matrix] = None):
    """Analytic gradients of the layer output against every trainable tensor
    and against the input x.

    A provided cross_kv is treated as a constant: gradients flow into the
    layer parameters and x only. Returns (grads, dx) with grads keyed like
    params.tensors().
    """
    p = _materialized(p)
    c = _layer_fwd_cache(p, x, causal, cross_kv)
    return _layer_bwd_from_cache(p, c, upstream)


# ---------------------------------------------------------------------------
# full model


def sinusoidal_encoding(n: int, d: int) -> Matrix:
    pos = np.arange(n)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-np.log(10000.0) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: pe[:, 1::2].shape[1]])
    return pe


@dataclass
class Model:
    """Token embedding + layer stack + vocab readout."""

    dims: ModelDims
    embedding: Matrix  # vocab x d
    w_out: Matrix      # vocab x d
    b_out: np.ndarray  # (vocab,)
    layers: list

    def embed(self, tokens: np.ndarray) -> Matrix:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise InputError("tokens must be a nonempty 1-D id sequence")
        if tokens.min() < 0 or tokens.max() >= self.dims.vocab:
            raise InputError(
                f"token id out of range [0, {self.dims.vocab}): {tokens.min()}..{tokens.max()}"
            )
        return self.embedding[tokens] + sinusoidal_encoding(len(tokens), self.dims.d)

    def readout(self, h: Matrix) -> Matrix:
        return h @ self.w_out.T + self.b_out


def model_forward(model: Model, tokens: np.ndarray) -> Matrix:
    """Embed, apply every layer in order, project to vocab logits."""
    h = model.embed(tokens)
    for layer in model.layers:
        h = layer_forward(layer, h)
    return model.readout(h)


def model_hidden_states(model: Model, tokens: np.ndarray) -> list[Matrix]:
    """Hidden states entering each layer plus the final state (n_layers + 1)."""
    h = model.embed(tokens)
    states = [h]
    for layer in model.layers:
        h = layer_forward(layer, h)
        states.append(h)
    return states


def model_fingerprint(model: Model) -> str:
    """Content hash over all parameter bytes, for provenance tags."""
    digest = hashlib.sha256()
    digest.update(repr(model.dims.to_dict()).encode())
    for arr in (model.embedding, model.w_out, model.b_out):
        digest.update(np.ascontiguousarray(arr).tobytes())
    for layer in model.layers:
        for name in sorted(layer.tensors()):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(layer.tensors()[name]).tobytes())
    return digest.hexdigest()


def capture_hidden_states(model: Model, inputs: Sequence[np.ndarray], layer_index: int,
                          distribution_id: str = "unspecified") -> HiddenStatePairSet:
    """Capture (X_i, X_o) at one layer of the original model for every input."""
    sets = capture_all_hidden_states(model, inputs, [layer_index], distribution_id)
    return sets[layer_index]


def capture_all_hidden_states(model: Model, inputs: Sequence[np.ndarray],
                              layer_indices: Optional[Sequence[int]] = None,
                              distribution_id: str = "unspecified") -> dict[int, HiddenStatePairSet]:
    """Single-pass capture over several layers; keyed by layer index."""
    if layer_indices is None:
        layer_indices = range(len(model.layers))
    wanted = sorted(set(int(j) for j in layer_indices))
    for j in wanted:
        if not 0 <= j < len(model.layers):
            raise InputError(f"layer index {j} outside [0, {len(model.layers)})")
    pairs: dict[int, list] = {j: [] for j in wanted}
    for tokens in inputs:
        states = model_hidden_states(model, tokens)
        for j in wanted:
            pairs[j].append((states[j], states[j + 1]))
    provenance = {"source_model": model_fingerprint(model), "distribution": distribution_id}
    return {
        j: HiddenStatePairSet(layer_index=j, pairs=pairs[j], d=model.dims.d,
                              provenance=dict(provenance))
        for j in wanted
    }


def build_toy_model(dims: ModelDims, rng: np.random.Generator, *, biases: bool = True,
                    activation: str = "gelu", ff_residual_pre_ln: bool = False) -> Model:
    """Random-initialized toy transformer, deterministic for a fixed generator."""
    d, d_ff = dims.d, dims.d_ff
    sd = 1.0 / np.sqrt(d)

    def layer():
        return LayerParams(
            w_q=rng.normal(0, sd, (d, d)),
            w_k=rng.normal(0, sd, (d, d)),
            w_v=rng.normal(0, sd, (d, d)),
            w_o=rng.normal(0, sd, (d, d)),
            w_1=rng.normal(0, sd, (d_ff, d)),
            w_2=rng.normal(0, 1.0 / np.sqrt(d_ff), (d, d_ff)),
            n_heads=dims.n_heads,
            b_q=np.zeros(d) if biases else None,
            b_v=np.zeros(d) if biases else None,
            b_o=np.zeros(d) if biases else None,
            b_1=np.zeros(d_ff) if biases else None,
            b_2=np.zeros(d) if biases else None,
            activation=activation,
            ff_residual_pre_ln=ff_residual_pre_ln,
        )

    return Model(
        dims=dims,
        embedding=rng.normal(0, 1.0, (dims.vocab, d)),
        w_out=rng.normal(0, sd, (dims.vocab, d)),
        b_out=np.zeros(dims.vocab),
        layers=[layer() for _ in range(dims.n_layers)],
    )
