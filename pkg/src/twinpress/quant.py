"""Per-row symmetric int8 quantization of factored weights and
quantization-constrained layer fine-tuning.

Scheme: per-row absmax, scale = max|row| / 127 (scale 1 for all-zero rows),
codes rounded half-to-even and clamped to [-127, 127]. Scales are stored as
float32 so training-time fake quantization and exported tensors dequantize
bit-for-bit identically. Only factor matrices are quantized; biases,
layernorm parameters, and the key-space query bias stay full precision.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .finetune import (Adam, FinetuneResult, HiddenStatePairSet, TrainConfig,
                       finetune_layer, layer_objective, mask_frozen_grads,
                       objective_grads, _batches)
from .model import CompressedLayerParams

QMAX = 127

# factor tensors eligible for quantization (2-D weight factors only)
FACTOR_NAMES = ("w_q", "w_k", "w_v", "w_ot", "ff1_u", "ff1_v", "ff1_a",
                "ff1_b", "ff2_u", "ff2_v", "ff2_a", "ff2_b")


@dataclass
class QuantizedTensor:
    codes: np.ndarray   # int8, same shape as the source
    scales: np.ndarray  # float32, one positive scale per row

    def __post_init__(self):
        if self.codes.ndim != 2:
            raise ShapeError("quantized tensors must be 2-D")
        if self.scales.shape != (self.codes.shape[0],):
            raise ShapeError("one scale per row required")

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def nbytes(self) -> int:
        rows, cols = self.codes.shape
        return rows * cols + 4 * rows


def quantize(m: np.ndarray) -> QuantizedTensor:
    m = np.ascontiguousarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise NumericalError("cannot quantize non-finite entries")
    rows = m.shape[0]
    if m.shape[1] == 0 or rows == 0:
        return QuantizedTensor(codes=np.zeros(m.shape, dtype=np.int8),
                               scales=np.ones(rows, dtype=np.float32))
    absmax = np.abs(m).max(axis=1)
    scales = (absmax / QMAX).astype(np.float32)
    scales[absmax == 0] = 1.0  # sentinel for all-zero rows
    codes = np.round(m / scales.astype(np.float64)[:, None])
    codes = np.clip(codes, -QMAX, QMAX).astype(np.int8)
    return QuantizedTensor(codes=codes, scales=scales)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.codes.astype(np.float64) * q.scales.astype(np.float64)[:, None]


def fake_quantize(m: np.ndarray) -> np.ndarray:
    """Round-trip through the int8 grid, back in float64."""
    return dequantize(quantize(m))


def ste_mask(m: np.ndarray) -> np.ndarray:
    """Straight-through gradient mask: identity inside the representable
    range, zero outside. Per-row absmax keeps everything inside, so this is
    all-ones in practice; kept for the contract."""
    q = quantize(m)
    scales = q.scales.astype(np.float64)[:, None]
    return (np.abs(m) <= scales * (QMAX + 0.5)).astype(np.float64)


@dataclass
class QuantizedLayerParams:
    """Compressed layer with int8 factor tensors.

    `base` holds the dequantized factors (plus full-precision biases and
    norms) so the forward path is the plain compressed one; `factors` holds
    the codes and scales for storage.
    """

    base: CompressedLayerParams
    factors: dict[str, QuantizedTensor]

    @classmethod
    def from_compressed(cls, lp: CompressedLayerParams) -> "QuantizedLayerParams":
        base = copy.deepcopy(lp)
        factors = {}
        for name in FACTOR_NAMES:
            arr = getattr(base, name)
            if arr.size == 0:
                continue
            q = quantize(arr)
            factors[name] = q
            setattr(base, name, dequantize(q))
        return cls(base=base, factors=factors)

    def dequantized(self) -> CompressedLayerParams:
        return self.base

    def tensors(self) -> dict[str, np.ndarray]:
        return self.base.tensors()

    @property
    def d(self) -> int:
        return self.base.d

    def stored_factor_bytes(self) -> int:
        return sum(q.nbytes() for q in self.factors.values())


def _quantized_view(lp: CompressedLayerParams) -> CompressedLayerParams:
    view = copy.copy(lp)
    for name in FACTOR_NAMES:
        arr = getattr(lp, name)
        if arr.size:
            setattr(view, name, fake_quantize(arr))
    return view


def finetune_layer_quantized(params: CompressedLayerParams, pairs,
                             cfg: TrainConfig, level: str = "int8") -> FinetuneResult:
    """Quantization-aware layer fine-tuning.

    The forward pass sees fake-quantized factor weights; gradients pass
    straight through the rounding to the full-precision shadow parameters.
    Loss history and the best-iterate rule are evaluated at the quantized
    parameters, and the returned params are the exported int8 layer.
    """
    if level == "none":
        return finetune_layer(params, pairs, cfg)
    if level != "int8":
        raise ConfigError(f"unknown quantization level {level!r}")
    shadow = copy.deepcopy(params)
    pair_list = pairs.pairs if isinstance(pairs, HiddenStatePairSet) else list(pairs)
    if not pair_list:
        raise ConfigError("cannot fine-tune on an empty pair set")
    rng = np.random.default_rng(cfg.seed)
    adam = Adam(shadow.tensors(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    history = [layer_objective(_quantized_view(shadow), pair_list)]
    best = copy.deepcopy(shadow)
    best_loss = history[0]
    best_epoch = 0
    diverged_at = None
    for epoch in range(1, cfg.epochs + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                for batch in _batches(len(pair_list), cfg.batch_size, rng):
                    view = _quantized_view(shadow)
                    grads, _ = objective_grads(view, [pair_list[i] for i in batch])
                    for name in FACTOR_NAMES:
                        if name in grads and grads[name].size:
                            grads[name] *= ste_mask(getattr(shadow, name))
                    mask_frozen_grads(grads, shadow, cfg.mode)
                    adam.step(grads)
                loss = layer_objective(_quantized_view(shadow), pair_list)
        except NumericalError:
            loss = float("nan")
        history.append(loss)
        if not np.isfinite(loss):
            diverged_at = epoch
            break
        if loss < best_loss:
            best_loss = loss
            best = copy.deepcopy(shadow)
            best_epoch = epoch
    return FinetuneResult(params=QuantizedLayerParams.from_compressed(best),
                          history=history, best_epoch=best_epoch,
                          diverged_at=diverged_at)


def post_training_quantize(params: CompressedLayerParams) -> QuantizedLayerParams:
    """Quantize once after full-precision training (the baseline QAT beats)."""
    return QuantizedLayerParams.from_compressed(params)
