"""Mixing original and compressed layers without retraining.

Because every compressed layer was fine-tuned against the ORIGINAL model's
hidden states, slots compose freely: any subset of layers can be swapped to
its compressed counterpart and the rest stay original. Sweeping the number of
swapped layers trades compression for output fidelity from one fine-tuned
artifact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .compress import CompressionPlan, RankPlan, accounting
from .errors import AssemblyError, InputError
from .model import LayerParams, Model, ModelDims, model_forward

ORIGINAL = "original"
COMPRESSED = "compressed"


@dataclass(frozen=True)
class LayerSlot:
    original: LayerParams
    compressed: Optional[object] = None  # CompressedLayerParams | QuantizedLayerParams
    active: str = ORIGINAL

    def __post_init__(self):
        if self.active not in (ORIGINAL, COMPRESSED):
            raise AssemblyError(f"unknown slot kind {self.active!r}")
        if self.active == COMPRESSED and self.compressed is None:
            raise AssemblyError("cannot activate a missing compressed slot")

    @property
    def active_params(self):
        return self.compressed if self.active == COMPRESSED else self.original


@dataclass(frozen=True)
class MixedModel:
    """Per-layer original/compressed slots with shared embedding and readout.

    Immutable: swap and with_compressed return new values sharing unchanged
    slots.
    """

    dims: ModelDims
    embedding: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    slots: tuple[LayerSlot, ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.slots) != self.dims.n_layers:
            raise AssemblyError(
                f"expected {self.dims.n_layers} slots, got {len(self.slots)}")

    @classmethod
    def from_model(cls, model: Model, provenance: Optional[dict] = None) -> "MixedModel":
        return cls(
            dims=model.dims,
            embedding=model.embedding,
            w_out=model.w_out,
            b_out=model.b_out,
            slots=tuple(LayerSlot(original=lp) for lp in model.layers),
            provenance=provenance or {},
        )

    def to_model(self) -> Model:
        return Model(dims=self.dims, embedding=self.embedding, w_out=self.w_out,
                     b_out=self.b_out, layers=[s.active_params for s in self.slots])

    def with_compressed(self, layer_index: int, params, activate: bool = False) -> "MixedModel":
        self._check_index(layer_index)
        slots = list(self.slots)
        slots[layer_index] = replace(
            slots[layer_index], compressed=params,
            active=COMPRESSED if activate else slots[layer_index].active)
        return replace(self, slots=tuple(slots))

    def active_kinds(self) -> list[str]:
        return [s.active for s in self.slots]

    def compressed_indices(self) -> list[int]:
        return [j for j, s in enumerate(self.slots) if s.compressed is not None]

    def rank_plans(self) -> dict[int, RankPlan]:
        plans = {}
        for j, slot in enumerate(self.slots):
            lp = slot.compressed
            if lp is None:
                continue
            base = lp.dequantized() if hasattr(lp, "dequantized") else lp
            plans[j] = RankPlan(base.r_a, base.l_a, base.r_f, base.l_f)
        return plans

    def _check_index(self, layer_index: int):
        if not 0 <= layer_index < len(self.slots):
            raise InputError(
                f"layer index {layer_index} outside [0, {len(self.slots)})")


def swap(model: MixedModel, layer_index: int, slot: str) -> MixedModel:
    """Return a model with exactly one slot's active kind changed."""
    model._check_index(layer_index)
    current = model.slots[layer_index]
    if slot == COMPRESSED and current.compressed is None:
        raise AssemblyError(f"layer {layer_index} has no compressed slot")
    if slot not in (ORIGINAL, COMPRESSED):
        raise AssemblyError(f"unknown slot kind {slot!r}")
    slots = list(model.slots)
    slots[layer_index] = replace(current, active=slot)
    return replace(model, slots=tuple(slots))


def set_active(model: MixedModel, compressed_layers: Sequence[int]) -> MixedModel:
    """Activate the compressed slot for exactly the given layers."""
    out = model
    wanted = set(int(j) for j in compressed_layers)
    for j in range(len(model.slots)):
        out = swap(out, j, COMPRESSED if j in wanted else ORIGINAL)
    return out


# ---------------------------------------------------------------------------
# divergence metrics


def relative_logit_divergence(base: Model, other: Model,
                              inputs: Sequence[np.ndarray]) -> float:
    """||logits' - logits||_F / ||logits||_F accumulated over all inputs."""
    num = 0.0
    den = 0.0
    for tokens in inputs:
        a = model_forward(base, tokens)
        b = model_forward(other, tokens)
        num += float(np.sum((b - a) ** 2))
        den += float(np.sum(a * a))
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return float(np.sqrt(num / den))


def argmax_agreement(base: Model, other: Model, inputs: Sequence[np.ndarray]) -> float:
    agree = 0
    total = 0
    for tokens in inputs:
        a = model_forward(base, tokens).argmax(axis=1)
        b = model_forward(other, tokens).argmax(axis=1)
        agree += int(np.sum(a == b))
        total += a.size
    return agree / total if total else 1.0


@dataclass
class SweepPoint:
    n_compressed: int
    layers: list[int]
    retained_fraction: float
    byte_fraction: float
    divergence: float
    agreement: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def sweep(model: MixedModel, order: Sequence[int], inputs: Sequence[np.ndarray]) -> list[SweepPoint]:
    """Successively activate compressed slots in `order`, measuring divergence
    against the all-original model at each prefix (including the empty one)."""
    order = [int(j) for j in order]
    for j in order:
        model._check_index(j)
        if model.slots[j].compressed is None:
            raise AssemblyError(f"layer {j} has no compressed slot to sweep")
    baseline = set_active(model, []).to_model()
    plans = model.rank_plans()
    quantized = {j for j in model.compressed_indices()
                 if hasattr(model.slots[j].compressed, "dequantized")}
    points = []
    for k in range(len(order) + 1):
        active = order[:k]
        m = set_active(model, active).to_model()
        plan = CompressionPlan(
            n_layers=model.dims.n_layers,
            ranks={j: plans[j] for j in active},
            quantize={j for j in active if j in quantized},
        )
        report = accounting(model.dims, plan)
        points.append(SweepPoint(
            n_compressed=k,
            layers=list(active),
            retained_fraction=report.retained_fraction,
            byte_fraction=report.byte_fraction_vs_f32,
            divergence=relative_logit_divergence(baseline, m, inputs),
            agreement=argmax_agreement(baseline, m, inputs),
        ))
    return points


def greedy_order(model: MixedModel, pair_sets: dict) -> list[int]:
    """Alternative sweep order: worst per-layer objective first."""
    from .finetune import layer_objective

    scored = []
    for j in model.compressed_indices():
        if j not in pair_sets:
            raise InputError(f"no captured pairs for layer {j}")
        scored.append((layer_objective(model.slots[j].compressed, pair_sets[j]), j))
    return [j for _, j in sorted(scored, reverse=True)]
