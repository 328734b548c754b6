"""Layer-wise fine-tuning of compressed layers on captured hidden-state pairs.

Each layer is trained on its own (X_i, X_o) pairs, minimizing the mean squared
Frobenius error of the factored layer's output against the original layer's
output. Layers never see each other's updates, so jobs are embarrassingly
parallel and results are identical whether layers run sequentially or
concurrently.
"""

from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .model import (CompressedLayerParams, HiddenStatePairSet, Model,
                    capture_all_hidden_states, layer_forward)

MODES = (
    "spectral+lora-all",
    "spectral-only",
    "lora-only-scratch",
    "frozen-spectral-lora-only",
)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "spectral+lora-all"
    seed: int = 0
    quant_aware: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Adam:
    """Adam over a dict of named parameter arrays, updated in place.

    Parameter names are visited in sorted order so update sequences are
    reproducible.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            self.params[name] -= self.lr * update


def _shape_groups(pair_list):
    """Stack same-shape pairs into 3-D batches; order is deterministic."""
    groups: dict[tuple, list[int]] = {}
    for i, (x_i, x_o) in enumerate(pair_list):
        if x_i.shape != x_o.shape:
            raise ShapeError(f"pair {i}: input {x_i.shape} vs target {x_o.shape}")
        groups.setdefault(x_i.shape, []).append(i)
    for idxs in groups.values():
        yield (np.stack([pair_list[i][0] for i in idxs]),
               np.stack([pair_list[i][1] for i in idxs]))


def layer_objective(params, pairs) -> float:
    """Mean over pairs of the squared Frobenius output error."""
    pair_list = pairs.pairs if isinstance(pairs, HiddenStatePairSet) else pairs
    total = 0.0
    for xi, xo in _shape_groups(pair_list):
        out = layer_forward(params, xi)
        diff = out - xo
        total += float(np.sum(diff * diff))
    return total / len(pair_list)


def objective_grads(params, pairs) -> tuple[dict[str, np.ndarray], float]:
    """Gradient of layer_objective over the given pairs, plus its value."""
    from .model import _layer_bwd_from_cache, _layer_fwd_cache, _materialized

    pair_list = pairs.pairs if isinstance(pairs, HiddenStatePairSet) else pairs
    p = _materialized(params)
    grads: dict[str, np.ndarray] = {}
    total = 0.0
    scale = 1.0 / len(pair_list)
    for xi, xo in _shape_groups(pair_list):
        cache = _layer_fwd_cache(p, xi, False, None)
        diff = cache["x_out"] - xo
        total += float(np.sum(diff * diff))
        g, _ = _layer_bwd_from_cache(p, cache, (2.0 * scale) * diff)
        for name, arr in g.items():
            if name in grads:
                grads[name] += arr
            else:
                grads[name] = arr
    return grads, total * scale


def _spectral_row_mask(p: CompressedLayerParams) -> np.ndarray:
    width = p.head_width
    mask = np.zeros(p.n_heads * width, dtype=bool)
    for h in range(p.n_heads):
        mask[h * width: h * width + p.r_a] = True
    return mask


def mask_frozen_grads(grads: dict[str, np.ndarray], p: CompressedLayerParams,
                      mode: str) -> dict[str, np.ndarray]:
    """Zero the gradients of tensors the mode keeps frozen.

    Only frozen-spectral-lora-only freezes anything: the spectral row blocks
    of the attention stacks and the spectral feed-forward factors. Adapters,
    biases, and layernorm parameters stay trainable in every mode.
    """
    if mode != "frozen-spectral-lora-only":
        return grads
    rows = _spectral_row_mask(p)
    for name in ("w_q", "w_k", "w_v", "w_ot"):
        if name in grads:
            grads[name][rows] = 0.0
    for name in ("ff1_u", "ff1_v", "ff2_u", "ff2_v"):
        if name in grads:
            grads[name][:] = 0.0
    return grads


@dataclass
class FinetuneResult:
    params: object
    history: list[float]
    best_epoch: int
    diverged_at: Optional[int] = None

    @property
    def initial_loss(self) -> float:
        return self.history[0]

    @property
    def final_loss(self) -> float:
        return self.history[self.best_epoch]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start: start + batch_size]


def finetune_layer(params: CompressedLayerParams, pairs, cfg: TrainConfig) -> FinetuneResult:
    """Mini-batch Adam on the layer objective.

    Returns the best-loss iterate over {init, end of each epoch}, so the
    reported final loss never exceeds the initial loss. A NaN epoch loss stops
    training and restores the best iterate (diverged_at records the epoch).
    """
    params = copy.deepcopy(params)
    pair_list = pairs.pairs if isinstance(pairs, HiddenStatePairSet) else list(pairs)
    if not pair_list:
        raise ConfigError("cannot fine-tune on an empty pair set")
    rng = np.random.default_rng(cfg.seed)
    tensors = params.tensors()
    adam = Adam(tensors, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    history = [layer_objective(params, pair_list)]
    best = copy.deepcopy(params)
    best_loss = history[0]
    best_epoch = 0
    diverged_at = None
    for epoch in range(1, cfg.epochs + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                for batch in _batches(len(pair_list), cfg.batch_size, rng):
                    grads, _ = objective_grads(params, [pair_list[i] for i in batch])
                    mask_frozen_grads(grads, params, cfg.mode)
                    adam.step(grads)
                loss = layer_objective(params, pair_list)
        except NumericalError:
            loss = float("nan")
        history.append(loss)
        if not np.isfinite(loss):
            diverged_at = epoch
            break
        if loss < best_loss:
            best_loss = loss
            best = copy.deepcopy(params)
            best_epoch = epoch
    return FinetuneResult(params=best, history=history, best_epoch=best_epoch,
                          diverged_at=diverged_at)


@dataclass
class GradCheckReport:
    per_tensor: dict[str, float]
    max_rel_error: float
    tolerance: float
    step: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(params, pairs, tolerance: float = 1e-5, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic objective gradients with central finite differences.

    Relative error per tensor uses denominator max(|a|, |n|, floor) with
    floor = 1e-4 * max(1, linf), so near-zero entries are compared absolutely
    at a level that absorbs finite-difference roundoff. Report-only, O(params)
    forward passes; intended for small layers.
    """
    pair_list = pairs.pairs if isinstance(pairs, HiddenStatePairSet) else list(pairs)
    analytic, _ = objective_grads(params, pair_list)
    per_tensor: dict[str, float] = {}
    tensors = params.tensors()
    for name in sorted(analytic):
        arr = tensors[name]
        if arr.size == 0:
            continue
        numeric = np.zeros_like(arr)
        for i in range(arr.size):
            orig = arr.flat[i]
            arr.flat[i] = orig + step
            hi = layer_objective(params, pair_list)
            arr.flat[i] = orig - step
            lo = layer_objective(params, pair_list)
            arr.flat[i] = orig
            numeric.flat[i] = (hi - lo) / (2.0 * step)
        a = analytic[name]
        scale = max(1.0, float(np.abs(a).max()), float(np.abs(numeric).max()))
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-4 * scale)
        rel = np.abs(a - numeric) / denom
        per_tensor[name] = float(rel.max())
    worst = max(per_tensor.values()) if per_tensor else 0.0
    return GradCheckReport(per_tensor=per_tensor, max_rel_error=worst,
                           tolerance=tolerance, step=step)


def layer_seed(seed: int, layer_index: int, stage: int) -> int:
    """Stable per-layer sub-seed; stage 0 = compression, 1 = training."""
    ss = np.random.SeedSequence([int(seed), int(layer_index), int(stage)])
    return int(ss.generate_state(1)[0])


def finetune_all_layers(model: Model, plan, capture_inputs: Sequence[np.ndarray],
                        cfg: TrainConfig, n_workers: int = 1,
                        distribution_id: str = "unspecified"):
    """Capture pairs from the original model, compress and fine-tune every
    planned layer independently, and assemble the result.

    Returns (MixedModel, {layer_index: FinetuneResult}). Jobs own their
    parameters exclusively; with n_workers > 1 they run in a thread pool and
    produce bit-identical results to a sequential run.
    """
    from .assemble import MixedModel  # circular at module load time only
    from .compress import compress_layer
    from .quant import finetune_layer_quantized

    selected = sorted(plan.ranks)
    pair_sets = (capture_all_hidden_states(model, capture_inputs, selected, distribution_id)
                 if selected else {})

    def job(j: int):
        from .errors import TwinpressError
        try:
            rank_plan = plan.ranks[j]
            comp_rng = np.random.default_rng(layer_seed(cfg.seed, j, 0))
            lp = compress_layer(model.layers[j], model.dims, rank_plan, cfg.mode, comp_rng)
            layer_cfg = replace(cfg, seed=layer_seed(cfg.seed, j, 1))
            if cfg.quant_aware and j in plan.quantize:
                res = finetune_layer_quantized(lp, pair_sets[j], layer_cfg)
            else:
                res = finetune_layer(lp, pair_sets[j], layer_cfg)
                if j in plan.quantize:
                    from .quant import QuantizedLayerParams
                    res = FinetuneResult(
                        params=QuantizedLayerParams.from_compressed(res.params),
                        history=res.history, best_epoch=res.best_epoch,
                        diverged_at=res.diverged_at)
        except TwinpressError as err:
            raise type(err)(f"layer {j}: {err}") from err
        return j, res

    if n_workers > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = dict(pool.map(job, selected))
    else:
        results = dict(job(j) for j in selected)

    mixed = MixedModel.from_model(model)
    for j, res in results.items():
        mixed = mixed.with_compressed(j, res.params, activate=True)
    return mixed, results
