"""Synthetic token tasks: input distributions, toy-model training with
cross-entropy, and the token-error-rate metric.

Two input distributions realize the adaptation-vs-generalization axis in a
speech-free form: `narrow` draws fixed-length sequences over a small fixed
sub-alphabet, `broad` draws variable-length sequences over the full alphabet.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError, TrainingError
from .finetune import Adam
from .model import Model, model_forward

TASKS = ("copy", "reverse")


def narrow_alphabet(vocab: int) -> int:
    return max(2, vocab // 4)


def sample_narrow(vocab: int, n: int, seq_len: int, rng: np.random.Generator,
                  alphabet_size: Optional[int] = None) -> list[np.ndarray]:
    size = alphabet_size if alphabet_size is not None else narrow_alphabet(vocab)
    if not 2 <= size <= vocab:
        raise ConfigError(f"narrow alphabet size {size} outside [2, {vocab}]")
    return [rng.integers(0, size, seq_len) for _ in range(n)]


def sample_broad(vocab: int, n: int, seq_len: int, rng: np.random.Generator) -> list[np.ndarray]:
    lo = max(2, seq_len // 2)
    hi = seq_len + max(1, seq_len // 2)
    return [rng.integers(0, vocab, int(rng.integers(lo, hi + 1))) for _ in range(n)]


def sample_inputs(distribution: str, vocab: int, n: int, seq_len: int,
                  rng: np.random.Generator) -> list[np.ndarray]:
    if distribution == "narrow":
        return sample_narrow(vocab, n, seq_len, rng)
    if distribution == "broad":
        return sample_broad(vocab, n, seq_len, rng)
    raise ConfigError(f"unknown input distribution {distribution!r}")


def task_targets(kind: str, tokens: np.ndarray) -> np.ndarray:
    if kind == "copy":
        return np.asarray(tokens)
    if kind == "reverse":
        return np.asarray(tokens)[::-1]
    raise ConfigError(f"unknown task {kind!r}; expected one of {TASKS}")


# ---------------------------------------------------------------------------
# metrics


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Levenshtein distance over token ids."""
    la, lb = len(a), len(b)
    prev = list(range(lb + 1))
    for i in range(1, la + 1):
        cur = [i] + [0] * lb
        for j in range(1, lb + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[lb]


def token_error_rate(predictions: Sequence[np.ndarray],
                     references: Sequence[np.ndarray]) -> float:
    """Corpus-level substitution/insertion/deletion rate."""
    if len(predictions) != len(references):
        raise InputError("prediction/reference counts differ")
    edits = 0
    total = 0
    for pred, ref in zip(predictions, references):
        edits += edit_distance(list(map(int, pred)), list(map(int, ref)))
        total += len(ref)
    if total == 0:
        raise InputError("empty reference corpus")
    return edits / total


def greedy_decode(model: Model, tokens: np.ndarray) -> np.ndarray:
    return model_forward(model, tokens).argmax(axis=1)


def token_accuracy(model: Model, kind: str, inputs: Sequence[np.ndarray]) -> float:
    correct = 0
    total = 0
    for tokens in inputs:
        target = task_targets(kind, tokens)
        pred = greedy_decode(model, tokens)
        correct += int(np.sum(pred == target))
        total += len(target)
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# end-to-end toy training


def _model_param_dict(model: Model) -> dict[str, np.ndarray]:
    params = {"embedding": model.embedding, "readout/w": model.w_out,
              "readout/b": model.b_out}
    for j, layer in enumerate(model.layers):
        for name, arr in layer.tensors().items():
            params[f"layer{j}/{name}"] = arr
    return params


def _batch_grads(model: Model, tokens: np.ndarray, targets: np.ndarray):
    """Cross-entropy loss and gradients for a (batch, seq_len) token matrix."""
    from .model import (_layer_bwd_from_cache, _layer_fwd_cache, _materialized,
                        sinusoidal_encoding)

    b, n = tokens.shape
    h = model.embedding[tokens] + sinusoidal_encoding(n, model.dims.d)
    caches = []
    for layer in model.layers:
        cache = _layer_fwd_cache(_materialized(layer), h, False, None)
        caches.append(cache)
        h = cache["x_out"]
    logits = h @ model.w_out.T + model.b_out
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    picked = np.take_along_axis(probs, targets[..., None], axis=-1)[..., 0]
    loss = float(-np.mean(np.log(picked + 1e-300)))
    dlogits = probs
    np.put_along_axis(dlogits, targets[..., None],
                      picked[..., None] - 1.0, axis=-1)
    dlogits /= b * n
    grads = {"readout/w": dlogits.reshape(-1, model.dims.vocab).T @ h.reshape(-1, model.dims.d),
             "readout/b": dlogits.sum(axis=(0, 1))}
    dh = dlogits @ model.w_out
    for j in reversed(range(len(model.layers))):
        layer_grads, dh = _layer_bwd_from_cache(
            _materialized(model.layers[j]), caches[j], dh)
        for name, arr in layer_grads.items():
            grads[f"layer{j}/{name}"] = arr
    demb = np.zeros_like(model.embedding)
    np.add.at(demb, tokens.reshape(-1), dh.reshape(-1, model.dims.d))
    grads["embedding"] = demb
    return grads, loss


@dataclass
class ToyTrainResult:
    steps: int
    losses: list[float]
    accuracy: float
    diverged_at: Optional[int] = None


def train_toy(model: Model, kind: str, steps: int, *, batch_size: int = 16,
              lr: float = 1e-3, seq_len: int = 12, seed: int = 0,
              eval_samples: int = 256) -> ToyTrainResult:
    """Train the toy model end-to-end with cross-entropy on a synthetic task.

    Mutates the model in place; deterministic for a fixed seed. A NaN batch
    loss aborts with a TrainingError naming the step.
    """
    if kind not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {kind!r}")
    rng = np.random.default_rng(seed)
    params = _model_param_dict(model)
    adam = Adam(params, lr=lr)
    losses = []
    vocab = model.dims.vocab
    for step in range(steps):
        tokens = rng.integers(0, vocab, (batch_size, seq_len))
        targets = np.stack([task_targets(kind, row) for row in tokens])
        grads, loss = _batch_grads(model, tokens, targets)
        if not np.isfinite(loss):
            raise TrainingError(f"toy training diverged at step {step}")
        adam.step(grads)
        losses.append(loss)
    held_out = [rng.integers(0, vocab, seq_len) for _ in range(eval_samples)]
    return ToyTrainResult(steps=steps, losses=losses,
                          accuracy=token_accuracy(model, kind, held_out))
