"""Pipeline CLI: toy-model generation/training, capture, plan, compress,
fine-tune, quantize, assemble, evaluate, sweep, and report subcommands.

Configuration is a strict JSON file (unknown keys rejected); every value has
a default and can be overridden on the command line. Stages communicate
through container artifacts in the work directory, so reruns with the same
config and seed are idempotent (identical artifact hashes) and the pipeline
resumes by skipping stages whose artifacts already match.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import assemble as asm
from . import store
from .compress import (CompressionPlan, RankPlan, accounting,
                       achieved_removed_fraction, compress_layer, make_plan,
                       uniform_plan)
from .errors import ConfigError, InputError, TwinpressError, exit_code
from .finetune import (FinetuneResult, TrainConfig, finetune_layer,
                       layer_objective, layer_seed)
from .model import (Model, ModelDims, build_toy_model, capture_all_hidden_states,
                    model_fingerprint)
from .quant import finetune_layer_quantized, post_training_quantize
from .tasks import TASKS, sample_inputs, task_targets, token_error_rate, train_toy
from . import tasks


# ---------------------------------------------------------------------------
# configuration

_STAGE_SEED = {"capture": 101, "eval_narrow": 102, "eval_broad": 103,
               "toy_data": 104, "sweep": 105}


def _stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STAGE_SEED[stage]]))


def _strict(data: dict, allowed: set[str], where: str) -> dict:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {sorted(unknown)}")
    return data


@dataclass
class ArchConfig:
    activation: str = "gelu"
    ff_residual_pre_ln: bool = False
    biases: bool = True

    @classmethod
    def from_dict(cls, data: dict) -> "ArchConfig":
        _strict(data, {"activation", "ff_residual_pre_ln", "biases"}, "arch")
        return cls(**data)


@dataclass
class TaskConfig:
    kind: str = "copy"
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-3
    seq_len: int = 12
    eval_samples: int = 256

    @classmethod
    def from_dict(cls, data: dict) -> "TaskConfig":
        _strict(data, {"kind", "steps", "batch_size", "lr", "seq_len",
                       "eval_samples"}, "task")
        cfg = cls(**data)
        if cfg.kind not in TASKS:
            raise ConfigError(f"task.kind must be one of {TASKS}")
        return cfg


@dataclass
class CaptureConfig:
    num_samples: int = 200
    seq_len: int = 12
    distribution: str = "narrow"

    @classmethod
    def from_dict(cls, data: dict) -> "CaptureConfig":
        _strict(data, {"num_samples", "seq_len", "distribution"}, "capture")
        cfg = cls(**data)
        if cfg.distribution not in ("narrow", "broad"):
            raise ConfigError("capture.distribution must be narrow or broad")
        return cfg


@dataclass
class EvalConfig:
    num_samples: int = 64
    seq_len: int = 12

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        _strict(data, {"num_samples", "seq_len"}, "eval")
        return cls(**data)


@dataclass
class PlanConfig:
    r_a: int
    l_a: int
    r_f: int
    l_f: int
    layers: Optional[list[int]] = None  # None = all layers
    quantize: bool = False

    @classmethod
    def from_dict(cls, data: dict) -> "PlanConfig":
        _strict(data, {"r_a", "l_a", "r_f", "l_f", "layers", "quantize"}, "plan")
        return cls(**data)


@dataclass
class RunConfig:
    dims: ModelDims = field(default_factory=lambda: ModelDims(
        d=64, n_heads=4, d_h=16, d_ff=256, n_layers=4, vocab=16))
    seed: Optional[int] = None
    arch: ArchConfig = field(default_factory=ArchConfig)
    target_removed_fraction: float = 0.5
    plan: Optional[PlanConfig] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    capture: CaptureConfig = field(default_factory=CaptureConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    workdir: str = "twinpress-run"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        _strict(data, {"dims", "seed", "arch", "target_removed_fraction",
                       "plan", "train", "task", "capture", "eval", "paths"},
                "config")
        kwargs = {}
        if "dims" in data:
            dd = dict(data["dims"])
            _strict(dd, {"d", "n_heads", "d_h", "d_ff", "n_layers", "vocab"}, "dims")
            if "d_h" not in dd:
                dd["d_h"] = dd["d"] // dd["n_heads"]
            kwargs["dims"] = ModelDims.from_dict(dd)
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        if "arch" in data:
            kwargs["arch"] = ArchConfig.from_dict(data["arch"])
        if "target_removed_fraction" in data:
            kwargs["target_removed_fraction"] = float(data["target_removed_fraction"])
        if data.get("plan") is not None:
            kwargs["plan"] = PlanConfig.from_dict(data["plan"])
        if "train" in data:
            td = dict(data["train"])
            _strict(td, {"epochs", "batch_size", "lr", "beta1", "beta2", "eps",
                         "mode", "seed", "quant_aware"}, "train")
            kwargs["train"] = TrainConfig(**td)
        if "task" in data:
            kwargs["task"] = TaskConfig.from_dict(data["task"])
        if "capture" in data:
            kwargs["capture"] = CaptureConfig.from_dict(data["capture"])
        if "eval" in data:
            kwargs["eval"] = EvalConfig.from_dict(data["eval"])
        if "paths" in data:
            pd = _strict(dict(data["paths"]), {"workdir"}, "paths")
            if "workdir" in pd:
                kwargs["workdir"] = str(pd["workdir"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "dims": self.dims.to_dict(),
            "seed": self.seed,
            "arch": asdict(self.arch),
            "target_removed_fraction": self.target_removed_fraction,
            "plan": None if self.plan is None else asdict(self.plan),
            "train": self.train.to_dict(),
            "task": asdict(self.task),
            "capture": asdict(self.capture),
            "eval": asdict(self.eval),
            "paths": {"workdir": self.workdir},
        }

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("--seed (or config seed) is required for this command")
        return self.seed

    def compression_plan(self) -> CompressionPlan:
        if self.plan is not None:
            rp = RankPlan(self.plan.r_a, self.plan.l_a, self.plan.r_f, self.plan.l_f)
            return uniform_plan(self.dims, rp, self.plan.layers, self.plan.quantize)
        rp = make_plan(self.dims, self.target_removed_fraction)
        return uniform_plan(self.dims, rp)


def load_run_config(path: Optional[str], overrides: dict) -> RunConfig:
    data = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a JSON object")
    cfg = RunConfig.from_dict(data)
    if overrides.get("seed") is not None:
        cfg = replace(cfg, seed=int(overrides["seed"]))
    if overrides.get("workdir") is not None:
        cfg = replace(cfg, workdir=overrides["workdir"])
    if overrides.get("target") is not None:
        cfg = replace(cfg, target_removed_fraction=float(overrides["target"]),
                      plan=None)
    if overrides.get("epochs") is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=int(overrides["epochs"])))
    if overrides.get("mode") is not None:
        cfg = replace(cfg, train=replace(cfg.train, mode=overrides["mode"]))
    cfg.compression_plan()  # validate rank bounds before any compute
    return cfg


# ---------------------------------------------------------------------------
# stage implementations (pure functions on in-memory values)


def stage_gen_toy(cfg: RunConfig) -> Model:
    rng = np.random.default_rng(cfg.require_seed())
    return build_toy_model(cfg.dims, rng, biases=cfg.arch.biases,
                           activation=cfg.arch.activation,
                           ff_residual_pre_ln=cfg.arch.ff_residual_pre_ln)


def stage_train_toy(cfg: RunConfig) -> tuple[Model, float]:
    model = stage_gen_toy(cfg)
    result = train_toy(model, cfg.task.kind, cfg.task.steps,
                       batch_size=cfg.task.batch_size, lr=cfg.task.lr,
                       seq_len=cfg.task.seq_len,
                       seed=int(_stage_rng(cfg.require_seed(), "toy_data").integers(2**31)),
                       eval_samples=cfg.task.eval_samples)
    return model, result.accuracy


def capture_inputs_for(cfg: RunConfig) -> list[np.ndarray]:
    rng = _stage_rng(cfg.require_seed(), "capture")
    return sample_inputs(cfg.capture.distribution, cfg.dims.vocab,
                         cfg.capture.num_samples, cfg.capture.seq_len, rng)


def eval_inputs_for(cfg: RunConfig, distribution: str) -> list[np.ndarray]:
    rng = _stage_rng(cfg.require_seed(), f"eval_{distribution}")
    return sample_inputs(distribution, cfg.dims.vocab, cfg.eval.num_samples,
                         cfg.eval.seq_len, rng)


def stage_compress(cfg: RunConfig, mixed: asm.MixedModel,
                   plan: CompressionPlan) -> asm.MixedModel:
    """SVD-initialize every planned layer (no fine-tuning) and activate it."""
    seed = cfg.require_seed()
    model = asm.set_active(mixed, []).to_model()
    out = mixed
    for j in sorted(plan.ranks):
        rng = np.random.default_rng(layer_seed(seed, j, 0))
        lp = compress_layer(model.layers[j], cfg.dims, plan.ranks[j],
                            cfg.train.mode, rng)
        out = out.with_compressed(j, lp, activate=True)
    return out


def stage_finetune(cfg: RunConfig, mixed: asm.MixedModel, plan: CompressionPlan,
                   pair_sets: dict) -> tuple[asm.MixedModel, dict[int, FinetuneResult]]:
    """Fine-tune each compressed slot independently against its pairs."""
    seed = cfg.require_seed()
    out = mixed
    results = {}
    for j in sorted(plan.ranks):
        slot = mixed.slots[j]
        if slot.compressed is None:
            raise InputError(f"layer {j} has no compressed slot to fine-tune")
        layer_cfg = replace(cfg.train, seed=layer_seed(seed, j, 1))
        if cfg.train.quant_aware and j in plan.quantize:
            res = finetune_layer_quantized(slot.compressed, pair_sets[j], layer_cfg)
        else:
            res = finetune_layer(slot.compressed, pair_sets[j], layer_cfg)
            if j in plan.quantize:
                res = FinetuneResult(params=post_training_quantize(res.params),
                                     history=res.history, best_epoch=res.best_epoch,
                                     diverged_at=res.diverged_at)
        if res.diverged_at is not None:
            print(f"warning: layer {j} diverged at epoch {res.diverged_at}; "
                  "best iterate restored", file=sys.stderr)
        out = out.with_compressed(j, res.params, activate=True)
        results[j] = res
    return out, results


@dataclass
class EvalReport:
    per_layer_objectives: dict[int, float]
    divergence_narrow: float
    divergence_broad: float
    agreement_narrow: float
    agreement_broad: float
    retained_fraction: float
    byte_fraction: float
    token_error_rates: Optional[dict[str, float]]
    loss_histories: Optional[dict[int, list[float]]]
    provenance: dict

    def validate(self):
        values = [self.divergence_narrow, self.divergence_broad,
                  self.agreement_narrow, self.agreement_broad,
                  self.retained_fraction, self.byte_fraction]
        values += list(self.per_layer_objectives.values())
        if self.token_error_rates:
            values += list(self.token_error_rates.values())
        if not all(np.isfinite(v) for v in values):
            raise TwinpressError("evaluation produced non-finite metrics")
        if self.divergence_narrow < 0 or self.divergence_broad < 0:
            raise TwinpressError("divergence must be nonnegative")
        for a in (self.agreement_narrow, self.agreement_broad):
            if not 0.0 <= a <= 1.0:
                raise TwinpressError("agreement must lie in [0, 1]")

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["per_layer_objectives"] = {str(k): v for k, v in self.per_layer_objectives.items()}
        if self.loss_histories is not None:
            out["loss_histories"] = {str(k): v for k, v in self.loss_histories.items()}
        return out


def stage_eval(cfg: RunConfig, mixed: asm.MixedModel,
               histories: Optional[dict[int, list[float]]] = None,
               provenance: Optional[dict] = None) -> EvalReport:
    base = asm.set_active(mixed, []).to_model()
    active = mixed.to_model()
    narrow = eval_inputs_for(cfg, "narrow")
    broad = eval_inputs_for(cfg, "broad")

    compressed = mixed.compressed_indices()
    active_compressed = [j for j in compressed
                         if mixed.slots[j].active == asm.COMPRESSED]
    per_layer = {}
    if compressed:
        pair_sets = capture_all_hidden_states(base, narrow, compressed, "narrow")
        for j in compressed:
            per_layer[j] = layer_objective(mixed.slots[j].active_params, pair_sets[j])

    plan = CompressionPlan(
        n_layers=cfg.dims.n_layers,
        ranks={j: rp for j, rp in mixed.rank_plans().items() if j in active_compressed},
        quantize={j for j in active_compressed
                  if hasattr(mixed.slots[j].compressed, "dequantized")},
    )
    report_sizes = accounting(cfg.dims, plan)

    ter = None
    prov = dict(provenance or {})
    src_prov = mixed.provenance if isinstance(mixed.provenance, dict) else {}
    task_kind = src_prov.get("task")
    if src_prov.get("trained") and task_kind in TASKS:
        ter = {}
        for name, inputs in (("narrow", narrow), ("broad", broad)):
            refs = [task_targets(task_kind, t) for t in inputs]
            ter[f"base_{name}"] = token_error_rate(
                [tasks.greedy_decode(base, t) for t in inputs], refs)
            ter[f"compressed_{name}"] = token_error_rate(
                [tasks.greedy_decode(active, t) for t in inputs], refs)

    report = EvalReport(
        per_layer_objectives=per_layer,
        divergence_narrow=asm.relative_logit_divergence(base, active, narrow),
        divergence_broad=asm.relative_logit_divergence(base, active, broad),
        agreement_narrow=asm.argmax_agreement(base, active, narrow),
        agreement_broad=asm.argmax_agreement(base, active, broad),
        retained_fraction=report_sizes.retained_fraction,
        byte_fraction=report_sizes.byte_fraction_vs_f32,
        token_error_rates=ter,
        loss_histories=histories,
        provenance=prov,
    )
    report.validate()
    return report


# ---------------------------------------------------------------------------
# artifact helpers


def _provenance(cfg: RunConfig, stage: str, carry_from=None, **extra) -> dict:
    prov = {"stage": stage, "config_sha256": cfg.config_hash(),
            "seed": cfg.require_seed()}
    if carry_from is not None:
        src = carry_from.provenance if hasattr(carry_from, "provenance") else carry_from
        for key in ("task", "trained", "token_accuracy"):
            if isinstance(src, dict) and key in src:
                prov[key] = src[key]
    prov.update(extra)
    return prov


def _artifact_fresh(path: Path, cfg: RunConfig, stage: str) -> bool:
    """True when the artifact exists and was produced by this config/seed."""
    if not path.exists():
        return False
    try:
        with store._ContainerReader(str(path)) as reader:
            prov = reader.header.get("provenance") or reader.header.get(
                "report", {}).get("provenance", {})
    except TwinpressError:
        return False
    return (isinstance(prov, dict)
            and prov.get("stage") == stage
            and prov.get("config_sha256") == cfg.config_hash()
            and prov.get("seed") == cfg.seed)


def _workdir(cfg: RunConfig) -> Path:
    wd = Path(cfg.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    return wd


def _timed(label: str, fn):
    """Run a pipeline stage, printing wall-clock (stdout only; never stored,
    so artifact hashes stay reproducible) and prefixing errors with the
    stage name."""
    start = time.perf_counter()
    try:
        result = fn()
    except TwinpressError as err:
        raise type(err)(f"stage {label}: {err}") from err
    print(f"[{label}] {time.perf_counter() - start:.2f}s")
    return result


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_toy(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out) if args.out else _workdir(cfg) / "model.ckpt"
    model = _timed("gen-toy", lambda: stage_gen_toy(cfg))
    store.save_checkpoint(model, str(out), provenance=_provenance(cfg, "gen-toy"))
    print(f"wrote {out} ({model_fingerprint(model)[:12]})")
    return 0


def cmd_train_toy(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out) if args.out else _workdir(cfg) / "model.ckpt"
    model, accuracy = _timed("train-toy", lambda: stage_train_toy(cfg))
    store.save_checkpoint(
        model, str(out),
        provenance=_provenance(cfg, "train-toy", task=cfg.task.kind, trained=True,
                               token_accuracy=accuracy))
    print(f"wrote {out}; held-out token accuracy {accuracy:.4f}")
    return 0


def _load_mixed(path: str) -> asm.MixedModel:
    return store.load_checkpoint(path)


def cmd_capture(args) -> int:
    cfg = _config_from_args(args)
    mixed = _load_mixed(args.model)
    plan = cfg.compression_plan()
    layers = sorted(plan.ranks) if args.layers is None else _parse_layers(args.layers)
    wd = _workdir(cfg)
    inputs = capture_inputs_for(cfg)
    base = asm.set_active(mixed, []).to_model()
    sets = _timed("capture", lambda: capture_all_hidden_states(
        base, inputs, layers, cfg.capture.distribution))
    for j, pairset in sets.items():
        pairset.provenance.update(_provenance(cfg, "capture"))
        path = wd / f"pairs_layer{j}.pairs"
        store.save_pairs(pairset, str(path))
        print(f"wrote {path} ({len(pairset)} pairs)")
    return 0


def cmd_plan(args) -> int:
    cfg = _config_from_args(args)
    rp = make_plan(cfg.dims, cfg.target_removed_fraction)
    achieved = achieved_removed_fraction(cfg.dims, rp)
    plan = uniform_plan(cfg.dims, rp)
    sizes = accounting(cfg.dims, plan)
    print(f"ranks: r_a={rp.r_a} l_a={rp.l_a} r_f={rp.r_f} l_f={rp.l_f}")
    print(f"target removed {cfg.target_removed_fraction:.4f} -> achieved {achieved:.4f} "
          f"(retained {sizes.retained_fraction:.4f})")
    if args.out:
        store.save_report({"plan": rp.to_dict(),
                           "achieved_removed_fraction": achieved,
                           "retained_fraction": sizes.retained_fraction,
                           "provenance": _provenance(cfg, "plan")}, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_compress(args) -> int:
    cfg = _config_from_args(args)
    mixed = _load_mixed(args.model)
    plan = cfg.compression_plan()
    out = Path(args.out) if args.out else _workdir(cfg) / "compressed.ckpt"
    compressed = _timed("compress", lambda: stage_compress(cfg, mixed, plan))
    store.save_checkpoint(compressed, str(out),
                          provenance=_provenance(cfg, "compress", carry_from=mixed))
    sizes = accounting(cfg.dims, plan)
    print(f"wrote {out}; retained fraction {sizes.retained_fraction:.4f}")
    return 0


def _load_pair_sets(cfg: RunConfig, pairs_dir: Path, layers: Sequence[int]) -> dict:
    sets = {}
    for j in layers:
        path = pairs_dir / f"pairs_layer{j}.pairs"
        if not path.exists():
            raise InputError(f"missing pair set {path}")
        sets[j] = store.load_pairs(str(path))
    return sets


def cmd_finetune(args) -> int:
    cfg = _config_from_args(args)
    mixed = _load_mixed(args.model)
    plan = cfg.compression_plan()
    pairs_dir = Path(args.pairs_dir) if args.pairs_dir else _workdir(cfg)
    pair_sets = _load_pair_sets(cfg, pairs_dir, sorted(plan.ranks))
    out = Path(args.out) if args.out else _workdir(cfg) / "finetuned.ckpt"
    tuned, results = _timed("finetune", lambda: stage_finetune(cfg, mixed, plan, pair_sets))
    store.save_checkpoint(tuned, str(out),
                          provenance=_provenance(cfg, "finetune", carry_from=mixed))
    histories = {j: res.history for j, res in results.items()}
    hist_path = out.with_suffix(".histories.rpt")
    store.save_report({"loss_histories": {str(j): h for j, h in histories.items()},
                       "provenance": _provenance(cfg, "finetune")}, str(hist_path))
    for j, res in sorted(results.items()):
        print(f"layer {j}: loss {res.initial_loss:.6g} -> {res.final_loss:.6g} "
              f"(best epoch {res.best_epoch})")
    print(f"wrote {out} and {hist_path}")
    return 0


def cmd_quantize(args) -> int:
    cfg = _config_from_args(args)
    mixed = _load_mixed(args.model)
    out = Path(args.out) if args.out else _workdir(cfg) / "quantized.ckpt"
    compressed = mixed.compressed_indices()
    if not compressed:
        raise InputError("checkpoint has no compressed layers to quantize")
    result = mixed
    if args.aware:
        pairs_dir = Path(args.pairs_dir) if args.pairs_dir else _workdir(cfg)
        pair_sets = _load_pair_sets(cfg, pairs_dir, compressed)
        for j in compressed:
            layer_cfg = replace(cfg.train, seed=layer_seed(cfg.require_seed(), j, 1),
                                quant_aware=True)
            res = finetune_layer_quantized(
                _dequantized_slot(mixed, j), pair_sets[j], layer_cfg)
            result = result.with_compressed(j, res.params,
                                            activate=mixed.slots[j].active == asm.COMPRESSED)
    else:
        for j in compressed:
            result = result.with_compressed(
                j, post_training_quantize(_dequantized_slot(mixed, j)),
                activate=mixed.slots[j].active == asm.COMPRESSED)
    store.save_checkpoint(result, str(out),
                          provenance=_provenance(cfg, "quantize", carry_from=mixed))
    print(f"wrote {out}")
    return 0


def _dequantized_slot(mixed: asm.MixedModel, j: int):
    lp = mixed.slots[j].compressed
    return lp.dequantized() if hasattr(lp, "dequantized") else lp


def cmd_assemble(args) -> int:
    cfg = _config_from_args(args)
    mixed = _load_mixed(args.model)
    layers = _parse_layers(args.layers) if args.layers is not None else []
    out = Path(args.out) if args.out else _workdir(cfg) / "assembled.ckpt"
    assembled = asm.set_active(mixed, layers)
    store.save_checkpoint(assembled, str(out),
                          provenance=_provenance(cfg, "assemble", carry_from=mixed,
                                                 active=layers))
    print(f"wrote {out}; compressed slots active: {layers}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    mixed = _load_mixed(args.model)
    histories = None
    if args.histories:
        data = store.load_report(args.histories).get("loss_histories", {})
        histories = {int(j): h for j, h in data.items()}
    report = _timed("eval", lambda: stage_eval(
        cfg, mixed, histories, provenance=_provenance(
            cfg, "eval", source_checkpoint=store.checkpoint_hash(args.model))))
    _print_eval(report)
    out = Path(args.out) if args.out else _workdir(cfg) / "eval.rpt"
    store.save_report(report.to_dict(), str(out),
                      provenance=_provenance(cfg, "eval"))
    print(f"wrote {out}")
    return 0


def _print_eval(report: EvalReport):
    print("metric                value (narrow)  value (broad)")
    print(f"logit divergence      {report.divergence_narrow:<15.6g} {report.divergence_broad:.6g}")
    print(f"argmax agreement      {report.agreement_narrow:<15.4f} {report.agreement_broad:.4f}")
    if report.token_error_rates:
        t = report.token_error_rates
        print(f"token error (base)    {t['base_narrow']:<15.4f} {t['base_broad']:.4f}")
        print(f"token error (comp)    {t['compressed_narrow']:<15.4f} {t['compressed_broad']:.4f}")
    print(f"retained fraction     {report.retained_fraction:.4f}")
    print(f"byte fraction         {report.byte_fraction:.4f}")
    for j, obj in sorted(report.per_layer_objectives.items()):
        print(f"layer {j} objective    {obj:.6g}")


def rank_sweep_points(cfg: RunConfig, mixed: asm.MixedModel,
                      plans: Sequence[tuple[str, RankPlan]],
                      quantize_axis: bool) -> list[dict]:
    """Sweep whole-model compression level: every layer compressed at each
    rank plan, fine-tuned from fresh captures, evaluated against the original;
    optionally repeated with int8 quantization."""
    base = asm.set_active(mixed, []).to_model()
    capture = capture_inputs_for(cfg)
    inputs = eval_inputs_for(cfg, "narrow")
    points = []
    variants = (False, True) if quantize_axis else (False,)
    for label, rp in plans:
        for quant in variants:
            plan = uniform_plan(cfg.dims, rp, quantize=quant)
            qcfg = replace(cfg, train=replace(cfg.train, quant_aware=quant))
            tuned, _ = stage_finetune(
                qcfg, stage_compress(qcfg, mixed, plan), plan,
                capture_pair_sets(base, capture, plan, qcfg))
            sizes = accounting(cfg.dims, plan)
            points.append({
                "label": label,
                "plan": rp.to_dict(),
                "quantized": quant,
                "retained_fraction": sizes.retained_fraction,
                "byte_fraction": sizes.byte_fraction_vs_f32,
                "byte_fraction_ideal": sizes.byte_fraction_ideal,
                "attn_retained": sizes.attn_retained,
                "divergence": asm.relative_logit_divergence(
                    base, tuned.to_model(), inputs),
            })
    return points


def stage_rank_sweep(cfg: RunConfig, mixed: asm.MixedModel,
                     targets: Sequence[float], quantize_axis: bool) -> list[dict]:
    plans = [(f"target={float(t):g}", make_plan(cfg.dims, float(t)))
             for t in targets]
    return rank_sweep_points(cfg, mixed, plans, quantize_axis)


def capture_pair_sets(base, capture_inputs, plan: CompressionPlan,
                      cfg: RunConfig) -> dict:
    return capture_all_hidden_states(base, capture_inputs, sorted(plan.ranks),
                                     cfg.capture.distribution)


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    mixed = _load_mixed(args.model)
    report: dict = {"provenance": _provenance(cfg, "sweep")}

    if args.rank_targets:
        targets = [float(t) for t in args.rank_targets.split(",") if t]
        points = _timed("rank-sweep", lambda: stage_rank_sweep(
            cfg, mixed, targets, quantize_axis=not args.no_quantized_axis))
        report["rank_points"] = points
        print("point          quant  retained  bytes    attn-kept  divergence")
        for p in points:
            print(f"{p['label']:<14} {str(p['quantized']):<6} "
                  f"{p['retained_fraction']:<9.4f} {p['byte_fraction']:<8.4f} "
                  f"{p['attn_retained']:<10.4f} {p['divergence']:.6g}")
    else:
        compressed = mixed.compressed_indices()
        if not compressed:
            raise InputError("checkpoint has no compressed layers to sweep")
        inputs = eval_inputs_for(cfg, "narrow")
        order = compressed if args.order == "first-to-last" else None
        if order is None:
            pair_sets = capture_all_hidden_states(
                asm.set_active(mixed, []).to_model(), capture_inputs_for(cfg),
                compressed, cfg.capture.distribution)
            order = asm.greedy_order(mixed, pair_sets)
        points = _timed("sweep", lambda: asm.sweep(mixed, order, inputs))
        report["points"] = [p.to_dict() for p in points]
        report["order"] = list(order)
        print("k  layers          retained  bytes    divergence  agreement")
        for p in points:
            print(f"{p.n_compressed:<2d} {str(p.layers):<15} {p.retained_fraction:<9.4f} "
                  f"{p.byte_fraction:<8.4f} {p.divergence:<11.6g} {p.agreement:.4f}")

    out = Path(args.out) if args.out else _workdir(cfg) / "sweep.rpt"
    store.save_report(report, str(out))
    print(f"wrote {out}")
    return 0


def cmd_report(args) -> int:
    report = store.load_report(args.path)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_pipeline(args) -> int:
    """capture -> plan -> compress -> finetune -> assemble -> eval, resumable."""
    cfg = _config_from_args(args)
    cfg.require_seed()
    wd = _workdir(cfg)
    plan = cfg.compression_plan()

    source_path = Path(args.model) if args.model else wd / "source.ckpt"
    if args.model is None:
        stage = "train-toy" if args.train_source else "gen-toy"
        if _artifact_fresh(source_path, cfg, stage):
            print(f"[{stage}] reusing {source_path}")
        elif args.train_source:
            model, accuracy = _timed("train-toy", lambda: stage_train_toy(cfg))
            store.save_checkpoint(model, str(source_path),
                                  provenance=_provenance(cfg, "train-toy",
                                                         task=cfg.task.kind,
                                                         trained=True,
                                                         token_accuracy=accuracy))
        else:
            model = _timed("gen-toy", lambda: stage_gen_toy(cfg))
            store.save_checkpoint(model, str(source_path),
                                  provenance=_provenance(cfg, "gen-toy"))
    mixed = _load_mixed(str(source_path))

    pair_paths = {j: wd / f"pairs_layer{j}.pairs" for j in sorted(plan.ranks)}
    if all(_artifact_fresh(p, cfg, "capture") for p in pair_paths.values()):
        print("[capture] reusing pair sets")
    else:
        inputs = capture_inputs_for(cfg)
        base = asm.set_active(mixed, []).to_model()
        sets = _timed("capture", lambda: capture_all_hidden_states(
            base, inputs, sorted(plan.ranks), cfg.capture.distribution))
        for j, pairset in sets.items():
            pairset.provenance.update(_provenance(cfg, "capture"))
            store.save_pairs(pairset, str(pair_paths[j]))

    compressed_path = wd / "compressed.ckpt"
    if _artifact_fresh(compressed_path, cfg, "compress"):
        print("[compress] reusing checkpoint")
    else:
        compressed = _timed("compress", lambda: stage_compress(cfg, mixed, plan))
        store.save_checkpoint(compressed, str(compressed_path),
                              provenance=_provenance(cfg, "compress", carry_from=mixed))

    finetuned_path = wd / "finetuned.ckpt"
    hist_path = wd / "finetuned.histories.rpt"
    if _artifact_fresh(finetuned_path, cfg, "finetune"):
        print("[finetune] reusing checkpoint")
    else:
        comp = _load_mixed(str(compressed_path))
        pair_sets = {j: store.load_pairs(str(p)) for j, p in pair_paths.items()}
        tuned, results = _timed("finetune",
                                lambda: stage_finetune(cfg, comp, plan, pair_sets))
        store.save_checkpoint(tuned, str(finetuned_path),
                              provenance=_provenance(cfg, "finetune", carry_from=mixed))
        store.save_report(
            {"loss_histories": {str(j): r.history for j, r in results.items()},
             "provenance": _provenance(cfg, "finetune")}, str(hist_path))

    tuned = _load_mixed(str(finetuned_path))
    histories = {int(j): h for j, h in store.load_report(
        str(hist_path)).get("loss_histories", {}).items()}
    report = _timed("eval", lambda: stage_eval(
        cfg, tuned, histories,
        provenance=_provenance(cfg, "pipeline",
                               source_checkpoint=store.checkpoint_hash(str(source_path)))))
    _print_eval(report)
    store.save_report(report.to_dict(), str(wd / "eval.rpt"),
                      provenance=_provenance(cfg, "eval"))
    print(f"pipeline artifacts in {wd}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _parse_layers(spec: str) -> list[int]:
    if not spec:
        return []
    try:
        return [int(tok) for tok in spec.split(",") if tok != ""]
    except ValueError as exc:
        raise InputError(f"bad layer list {spec!r}: {exc}") from exc


def _config_from_args(args) -> RunConfig:
    return load_run_config(args.config, {
        "seed": getattr(args, "seed", None),
        "workdir": getattr(args, "workdir", None),
        "target": getattr(args, "target", None),
        "epochs": getattr(args, "epochs", None),
        "mode": getattr(args, "mode", None),
    })


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twinpress",
        description="joint low-rank compression of product-twin weight pairs")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model_arg=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="run seed (overrides config)")
        p.add_argument("--workdir", help="artifact directory (overrides config)")
        p.add_argument("--target", type=float, help="target removed fraction")
        p.add_argument("--epochs", type=int, help="fine-tuning epochs")
        p.add_argument("--mode", help="fine-tuning mode")
        if model_arg:
            p.add_argument("--model", required=True, help="input checkpoint")

    p = sub.add_parser("gen-toy", help="write a random toy checkpoint")
    common(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train-toy", help="train a toy model on a synthetic task")
    common(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("capture", help="capture hidden-state pairs per layer")
    common(p, model_arg=True)
    p.add_argument("--layers", help="comma-separated layer indices")
    p.set_defaults(func=cmd_capture)

    p = sub.add_parser("plan", help="solve ranks for a removed-fraction target")
    common(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("compress", help="factorize planned layers (no training)")
    common(p, model_arg=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("finetune", help="fine-tune compressed layers on pairs")
    common(p, model_arg=True)
    p.add_argument("--pairs-dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("quantize", help="int8-quantize compressed layers")
    common(p, model_arg=True)
    p.add_argument("--aware", action="store_true",
                   help="quantization-aware fine-tuning (needs pairs)")
    p.add_argument("--pairs-dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("assemble", help="choose active original/compressed slots")
    common(p, model_arg=True)
    p.add_argument("--layers", help="layers whose compressed slot is active")
    p.add_argument("--out")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("eval", help="evaluate a checkpoint against its originals")
    common(p, model_arg=True)
    p.add_argument("--histories", help="loss-history report to embed")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="compression/fidelity curves")
    common(p, model_arg=True)
    p.add_argument("--order", choices=["first-to-last", "greedy"],
                   default="first-to-last")
    p.add_argument("--rank-targets",
                   help="comma-separated removed fractions; sweeps ranks over "
                        "all layers instead of successive layers")
    p.add_argument("--no-quantized-axis", action="store_true",
                   help="skip the int8 variant of the rank sweep")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="pretty-print a stored report")
    p.add_argument("path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="capture/plan/compress/finetune/eval")
    common(p)
    p.add_argument("--model", help="source checkpoint (default: generate)")
    p.add_argument("--train-source", action="store_true",
                   help="train the toy source model instead of random init")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TwinpressError as err:
        print(f"error[{err.category}]: {err}", file=sys.stderr)
        return exit_code(err)


if __name__ == "__main__":
    sys.exit(main())
