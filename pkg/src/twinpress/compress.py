"""Joint factorization of product-twin attention weight pairs, independent
feed-forward factorization, adapter augmentation, rank planning, and size
accounting.

The per-head query/key matrices only act on the output through the product
W_q_h^T W_k_h (the attention logits), and value/output through
W_v_h^T W_o_h^T, so each pair is compressed jointly: take the thin SVD of the
product and keep the rank-r spectral pair. Truncating the product directly is
Frobenius-optimal among all rank-r replacements, which beats truncating each
factor on its own. Trainable rank-l adapter columns/rows are concatenated to
the spectral pair (the right-side block zero-initialized so the factorization
is unchanged at construction time).

Feed-forward matrices are separated by the activation, so each one gets its
own SVD plus an additive adapter pair a @ b (a random, b zero).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import PlanError, ShapeError
from .linalg import Matrix, check_matrix, svd, truncate
from .model import CompressedLayerParams, LayerParams, ModelDims

FINETUNE_MODES = (
    "spectral+lora-all",
    "spectral-only",
    "lora-only-scratch",
    "frozen-spectral-lora-only",
)


@dataclass(frozen=True)
class RankPlan:
    """Spectral/adapter ranks: r_a, l_a for attention (per head), r_f, l_f for
    each feed-forward matrix."""

    r_a: int
    l_a: int
    r_f: int
    l_f: int

    def __post_init__(self):
        for name in ("r_a", "l_a", "r_f", "l_f"):
            if getattr(self, name) < 0:
                raise PlanError(f"{name} must be >= 0")
        if self.r_a + self.l_a < 1 or self.r_f + self.l_f < 1:
            raise PlanError("total rank must be >= 1 for each component")

    @property
    def total_attention(self) -> int:
        return self.r_a + self.l_a

    @property
    def total_ff(self) -> int:
        return self.r_f + self.l_f

    def validate(self, dims: ModelDims):
        if self.total_attention > dims.d_h:
            raise PlanError(
                f"r_a + l_a = {self.total_attention} exceeds d_h = {dims.d_h}")
        if self.total_ff > min(dims.d, dims.d_ff):
            raise PlanError(
                f"r_f + l_f = {self.total_ff} exceeds min(d, d_ff) = {min(dims.d, dims.d_ff)}")

    def to_dict(self) -> dict:
        return {"r_a": self.r_a, "l_a": self.l_a, "r_f": self.r_f, "l_f": self.l_f}

    @classmethod
    def from_dict(cls, data: dict) -> "RankPlan":
        return cls(**{k: int(data[k]) for k in ("r_a", "l_a", "r_f", "l_f")})


@dataclass
class CompressionPlan:
    """Per-layer compression choices: layers absent from `ranks` keep their
    original weights; `quantize` flags layers for int8 export."""

    n_layers: int
    ranks: dict[int, RankPlan] = field(default_factory=dict)
    quantize: set[int] = field(default_factory=set)

    def __post_init__(self):
        for j in self.ranks:
            if not 0 <= j < self.n_layers:
                raise PlanError(f"layer index {j} outside [0, {self.n_layers})")
        bad = self.quantize - set(self.ranks)
        if bad:
            raise PlanError(f"quantize flags for uncompressed layers: {sorted(bad)}")

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "ranks": {str(j): rp.to_dict() for j, rp in sorted(self.ranks.items())},
            "quantize": sorted(self.quantize),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CompressionPlan":
        return cls(
            n_layers=int(data["n_layers"]),
            ranks={int(j): RankPlan.from_dict(rp) for j, rp in data.get("ranks", {}).items()},
            quantize=set(int(j) for j in data.get("quantize", [])),
        )


def uniform_plan(dims: ModelDims, rank_plan: RankPlan, layers=None,
                 quantize: bool = False) -> CompressionPlan:
    """One RankPlan applied to the given layers (default: all)."""
    rank_plan.validate(dims)
    idx = list(range(dims.n_layers)) if layers is None else [int(j) for j in layers]
    return CompressionPlan(
        n_layers=dims.n_layers,
        ranks={j: rank_plan for j in idx},
        quantize=set(idx) if quantize else set(),
    )


# ---------------------------------------------------------------------------
# factorization


def _adapter_a(rng: Optional[np.random.Generator], rows: int, l: int) -> Matrix:
    rng = rng if rng is not None else np.random.default_rng(0)
    return rng.normal(0.0, 1.0 / np.sqrt(rows), (rows, l))


def twin_factor(p: Matrix, q: Matrix, r: int, l: int,
                rng: Optional[np.random.Generator] = None) -> tuple[Matrix, Matrix]:
    """Joint rank-(r+l) replacement of a product-twin pair.

    Returns (p', q') with p' = [U_r sqrt(S_r) | A_l] and
    q' = [sqrt(S_r) V_r^T ; 0], so p' @ q' is the Frobenius-optimal rank-r
    approximation of p @ q at construction time.
    """
    p = check_matrix(p, "p")
    q = check_matrix(q, "q")
    if p.shape[1] != q.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {p.shape} vs {q.shape}")
    inner = p.shape[1]
    if r < 1:
        raise PlanError("spectral rank must be >= 1")
    if l < 0 or r + l > inner:
        raise PlanError(f"r + l = {r + l} exceeds twin inner dimension {inner}")
    left, right = truncate(svd(p @ q), r)
    if l:
        left = np.hstack([left, _adapter_a(rng, p.shape[0], l)])
        right = np.vstack([right, np.zeros((l, q.shape[1]))])
    return left, right


def compress_ff(w: Matrix, r_f: int, l_f: int,
                rng: Optional[np.random.Generator] = None):
    """Low-rank replacement of one feed-forward matrix: w ~ u @ v + a @ b with
    (u, v) the rank-r_f spectral pair of w's own SVD, a random, b zero."""
    w = check_matrix(w, "w")
    if r_f < 1:
        raise PlanError("spectral rank must be >= 1")
    if l_f < 0 or r_f + l_f > min(w.shape):
        raise PlanError(f"r_f + l_f = {r_f + l_f} exceeds min{w.shape}")
    u, v = truncate(svd(w), r_f)
    a = _adapter_a(rng, w.shape[0], l_f)
    b = np.zeros((l_f, w.shape[1]))
    return u, v, a, b


def compress_attention(params: LayerParams, dims: ModelDims, plan: RankPlan,
                       rng: Optional[np.random.Generator] = None):
    """Per-head joint factorization of (W_q^T, W_k) and (W_v^T, W_o^T),
    restacked into H*(r_a+l_a)-row matrices.

    Returns (w_q, w_k, w_v, w_ot, t_q): the four factor stacks plus the
    per-head key-space query bias (None when the layer has no query bias).
    """
    d, dh = dims.d, dims.d_h
    if params.w_q.shape != (d, d) or params.n_heads != dims.n_heads:
        raise ShapeError("layer shapes inconsistent with dims")
    wq_blocks, wk_blocks, wv_blocks, wot_blocks, t_rows = [], [], [], [], []
    for h in range(dims.n_heads):
        rows = slice(h * dh, (h + 1) * dh)
        pq, qk = twin_factor(params.w_q[rows].T, params.w_k[rows], plan.r_a, plan.l_a, rng)
        pv, qo = twin_factor(params.w_v[rows].T, params.w_o[:, rows].T, plan.r_a, plan.l_a, rng)
        wq_blocks.append(pq.T)
        wk_blocks.append(qk)
        wv_blocks.append(pv.T)
        wot_blocks.append(qo)
        if params.b_q is not None:
            t_rows.append(params.w_k[rows].T @ params.b_q[rows])
    t_q = np.ascontiguousarray(np.vstack([t[None, :] for t in t_rows])) if t_rows else None
    return tuple(np.ascontiguousarray(np.vstack(blocks))
                 for blocks in (wq_blocks, wk_blocks, wv_blocks, wot_blocks)) + (t_q,)


def _folded_output_bias(params: LayerParams):
    # rows of every attention matrix sum to 1, so the value bias contributes a
    # constant row W_o @ b_v to Z; fold it into the output bias.
    b_o = params.b_o
    if params.b_v is not None:
        fold = params.w_o @ params.b_v
        b_o = fold if b_o is None else b_o + fold
    return None if b_o is None else b_o.copy()


def compress_layer(params: LayerParams, dims: ModelDims, plan: RankPlan,
                   mode: str = "spectral+lora-all",
                   rng: Optional[np.random.Generator] = None) -> CompressedLayerParams:
    """Build the factored layer for one of the four fine-tuning strategies.

    * spectral+lora-all / frozen-spectral-lora-only: rank-r spectral init plus
      rank-l adapters (identical construction; the modes differ in what the
      trainer updates).
    * spectral-only: the adapter budget goes to spectral rank (r+l, 0).
    * lora-only-scratch: same total rank, every factor Gaussian-initialized,
      no SVD prior. Bias and layernorm values are kept (they are never
      factored).
    """
    if mode not in FINETUNE_MODES:
        raise PlanError(f"unknown mode {mode!r}")
    plan.validate(dims)
    rng = rng if rng is not None else np.random.default_rng(0)
    d, d_ff = dims.d, dims.d_ff

    if mode == "spectral-only":
        eff = RankPlan(plan.total_attention, 0, plan.total_ff, 0)
    elif mode == "lora-only-scratch":
        eff = RankPlan(0, plan.total_attention, 0, plan.total_ff)
    else:
        eff = plan

    if mode == "lora-only-scratch":
        ta, tf = eff.total_attention, eff.total_ff
        shape = (dims.n_heads * ta, d)
        w_q, w_k, w_v, w_ot = (rng.normal(0, 1.0 / np.sqrt(d), shape) for _ in range(4))
        ff1_u = np.zeros((d_ff, 0))
        ff1_v = np.zeros((0, d))
        ff1_a = rng.normal(0, 1.0 / np.sqrt(d_ff), (d_ff, tf))
        ff1_b = rng.normal(0, 1.0 / np.sqrt(tf), (tf, d))
        ff2_u = np.zeros((d, 0))
        ff2_v = np.zeros((0, d_ff))
        ff2_a = rng.normal(0, 1.0 / np.sqrt(d), (d, tf))
        ff2_b = rng.normal(0, 1.0 / np.sqrt(tf), (tf, d_ff))
        t_q = None if params.b_q is None else np.zeros((dims.n_heads, d))
    else:
        w_q, w_k, w_v, w_ot, t_q = compress_attention(params, dims, eff, rng)
        ff1_u, ff1_v, ff1_a, ff1_b = compress_ff(params.w_1, eff.r_f, eff.l_f, rng)
        ff2_u, ff2_v, ff2_a, ff2_b = compress_ff(params.w_2, eff.r_f, eff.l_f, rng)

    return CompressedLayerParams(
        w_q=w_q, w_k=w_k, w_v=w_v, w_ot=w_ot,
        ff1_u=ff1_u, ff1_v=ff1_v, ff1_a=ff1_a, ff1_b=ff1_b,
        ff2_u=ff2_u, ff2_v=ff2_v, ff2_a=ff2_a, ff2_b=ff2_b,
        n_heads=dims.n_heads, d_h=dims.d_h,
        r_a=eff.r_a, l_a=eff.l_a, r_f=eff.r_f, l_f=eff.l_f,
        t_q=t_q,
        b_o=_folded_output_bias(params),
        b_1=None if params.b_1 is None else params.b_1.copy(),
        b_2=None if params.b_2 is None else params.b_2.copy(),
        ln_g=params.ln_g.copy(), ln_b=params.ln_b.copy(),
        ln2_g=None if params.ln2_g is None else params.ln2_g.copy(),
        ln2_b=None if params.ln2_b is None else params.ln2_b.copy(),
        activation=params.activation,
        ff_residual_pre_ln=params.ff_residual_pre_ln,
    )


# ---------------------------------------------------------------------------
# rank planning


def _round_to_multiple(x: float, m: int) -> int:
    # round-half-to-even on the multiple count, like the published rank tables
    return int(round(x / m)) * m


def _component_weights(dims: ModelDims) -> tuple[float, float]:
    attn = 4 * dims.d * dims.d
    ff = 2 * dims.d * dims.d_ff
    total = attn + ff
    return attn / total, ff / total


def _solve_totals(dims: ModelDims, target: float, ratio: float):
    w_attn, w_ff = _component_weights(dims)
    removed_ff = target / (ratio * w_attn + w_ff)
    removed_attn = ratio * removed_ff
    attn_total = (1.0 - removed_attn) * dims.d_h
    ff_total = (1.0 - removed_ff) * (dims.d * dims.d_ff) / (dims.d + dims.d_ff)
    return attn_total, ff_total, removed_attn, removed_ff


def _plan_from_target(dims: ModelDims, target: float, ratio: float,
                      attn_multiple: int, ff_multiple: int) -> RankPlan:
    attn_exact, ff_exact, removed_attn, removed_ff = _solve_totals(dims, target, ratio)
    if removed_ff >= 1.0 or removed_attn >= 1.0:
        raise PlanError("removed fraction reaches 1 for a component")
    attn_total = _round_to_multiple(attn_exact, attn_multiple)
    ff_total = _round_to_multiple(ff_exact, ff_multiple)
    if attn_total < attn_multiple or ff_total < ff_multiple:
        raise PlanError("rounded total rank fell to zero")
    plan = RankPlan(
        r_a=attn_total * 4 // 5, l_a=attn_total // 5,
        r_f=ff_total * 9 // 10, l_f=ff_total // 10,
    )
    plan.validate(dims)
    return plan


def make_plan(dims: ModelDims, target_removed_fraction: float, *,
              attn_ff_removed_ratio: float = 0.7,
              attn_multiple: int = 5, ff_multiple: int = 10) -> RankPlan:
    """Solve for ranks hitting a whole-layer removed-parameter fraction.

    The attention removed fraction is attn_ff_removed_ratio times the
    feed-forward one, weighted by parameter counts (4d^2 vs 2*d*d_ff). Totals
    are rounded to the nearest attn_multiple / ff_multiple so the 4:1 and 9:1
    spectral:adapter splits stay integral.
    """
    if not 0.0 < target_removed_fraction < 1.0:
        raise PlanError(
            f"target removed fraction must lie in (0, 1), got {target_removed_fraction}")
    try:
        return _plan_from_target(dims, target_removed_fraction, attn_ff_removed_ratio,
                                 attn_multiple, ff_multiple)
    except PlanError as exc:
        lo, hi = _feasible_range(dims, attn_ff_removed_ratio, attn_multiple, ff_multiple)
        if lo is None:
            raise PlanError(f"no feasible target for dims {dims.to_dict()}") from exc
        raise PlanError(
            f"target {target_removed_fraction} infeasible ({exc}); "
            f"feasible targets lie in about [{lo:.3f}, {hi:.3f}]"
        ) from exc


def _feasible_range(dims, ratio, attn_multiple, ff_multiple):
    feasible = []
    for t in np.linspace(0.001, 0.999, 999):
        try:
            _plan_from_target(dims, float(t), ratio, attn_multiple, ff_multiple)
            feasible.append(float(t))
        except PlanError:
            continue
    if not feasible:
        return None, None
    return min(feasible), max(feasible)


# ---------------------------------------------------------------------------
# accounting


SCALE_BYTES = 4  # per-row float32 scale stored alongside int8 codes


def _attn_factor_rows(dims: ModelDims, plan: RankPlan) -> int:
    return dims.n_heads * plan.total_attention


def _layer_param_counts(dims: ModelDims, plan: Optional[RankPlan]):
    attn_orig = 4 * dims.d * dims.d
    ff_orig = 2 * dims.d * dims.d_ff
    if plan is None:
        return attn_orig, ff_orig, attn_orig, ff_orig
    attn = 4 * _attn_factor_rows(dims, plan) * dims.d
    ff = 2 * plan.total_ff * (dims.d + dims.d_ff)
    return attn_orig, ff_orig, attn, ff


def _layer_factor_tensors(dims: ModelDims, plan: RankPlan):
    # (rows, cols) of every factor tensor in a compressed layer
    rows_a = _attn_factor_rows(dims, plan)
    shapes = [(rows_a, dims.d)] * 4
    shapes += [(dims.d_ff, plan.r_f), (plan.r_f, dims.d),
               (dims.d_ff, plan.l_f), (plan.l_f, dims.d)]
    shapes += [(dims.d, plan.r_f), (plan.r_f, dims.d_ff),
               (dims.d, plan.l_f), (plan.l_f, dims.d_ff)]
    return [(r, c) for r, c in shapes if r > 0 and c > 0]


@dataclass
class LayerSizeReport:
    layer_index: int
    compressed: bool
    quantized: bool
    attn_params: int
    ff_params: int
    attn_retained: float
    ff_retained: float
    retained_fraction: float
    bytes_f32: int
    bytes_f64: int
    bytes_stored: int  # int8 codes + f32 scales where quantized, else f32

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SizeReport:
    """Parameter and byte accounting over the compressible weights (the four
    attention matrices and two feed-forward matrices per layer; biases and
    layernorm parameters are excluded)."""

    layers: list[LayerSizeReport]
    params_original: int
    params_retained: int
    retained_fraction: float
    removed_fraction: float
    attn_retained: float
    ff_retained: float
    bytes_original_f32: int
    bytes_stored: int
    byte_fraction_vs_f32: float
    byte_fraction_ideal: float  # codes-only view: retained * stored_bits / 32

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["layers"] = [lay.to_dict() for lay in self.layers]
        return out


def accounting(dims: ModelDims, plan: CompressionPlan) -> SizeReport:
    """Per-layer and whole-model retained fractions plus byte accounting."""
    layers = []
    total_orig = 0
    total_kept = 0
    attn_orig_total = attn_kept_total = 0
    ff_orig_total = ff_kept_total = 0
    bytes_orig = 0
    bytes_stored = 0
    ideal_bits = 0.0
    for j in range(dims.n_layers):
        rp = plan.ranks.get(j)
        quant = j in plan.quantize
        attn_orig, ff_orig, attn, ff = _layer_param_counts(dims, rp)
        kept = attn + ff
        orig = attn_orig + ff_orig
        if rp is None:
            stored = 4 * kept
            ideal_bits += 32.0 * kept
        elif quant:
            shapes = _layer_factor_tensors(dims, rp)
            stored = sum(r * c + SCALE_BYTES * r for r, c in shapes)
            ideal_bits += 8.0 * kept
        else:
            stored = 4 * kept
            ideal_bits += 32.0 * kept
        layers.append(LayerSizeReport(
            layer_index=j, compressed=rp is not None, quantized=quant,
            attn_params=attn, ff_params=ff,
            attn_retained=attn / attn_orig, ff_retained=ff / ff_orig,
            retained_fraction=kept / orig,
            bytes_f32=4 * kept, bytes_f64=8 * kept, bytes_stored=stored,
        ))
        total_orig += orig
        total_kept += kept
        attn_orig_total += attn_orig
        attn_kept_total += attn
        ff_orig_total += ff_orig
        ff_kept_total += ff
        bytes_orig += 4 * orig
        bytes_stored += stored
    if dims.n_layers == 0:
        raise PlanError("accounting requires at least one layer")
    retained = total_kept / total_orig
    return SizeReport(
        layers=layers,
        params_original=total_orig,
        params_retained=total_kept,
        retained_fraction=retained,
        removed_fraction=1.0 - retained,
        attn_retained=attn_kept_total / attn_orig_total,
        ff_retained=ff_kept_total / ff_orig_total,
        bytes_original_f32=bytes_orig,
        bytes_stored=bytes_stored,
        byte_fraction_vs_f32=bytes_stored / bytes_orig,
        byte_fraction_ideal=ideal_bits / (32.0 * total_orig),
    )


def achieved_removed_fraction(dims: ModelDims, plan: RankPlan) -> float:
    """Removed fraction a uniform plan actually achieves after rounding."""
    w_attn, w_ff = _component_weights(dims)
    retained_attn = plan.total_attention / dims.d_h
    retained_ff = plan.total_ff * (dims.d + dims.d_ff) / (dims.d * dims.d_ff)
    return 1.0 - (w_attn * retained_attn + w_ff * retained_ff)
