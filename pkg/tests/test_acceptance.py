"""Acceptance suite: one test per criterion, each printing a pass/fail line
with its runtime against the stated budget (run with -s to see them live).

Workloads are frozen: dimensions, seeds, and hyperparameters below were
calibrated once and must not drift.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from twinpress.assemble import (MixedModel, relative_logit_divergence,
                                set_active, swap, sweep)
from twinpress.compress import (RankPlan, accounting, compress_layer,
                                make_plan, twin_factor, uniform_plan)
from twinpress.errors import FormatError
from twinpress.finetune import (TrainConfig, finetune_all_layers,
                                finetune_layer, grad_check, layer_objective,
                                layer_seed)
from twinpress.linalg import svd, truncate
from twinpress.model import (ModelDims, build_toy_model,
                             capture_all_hidden_states, capture_hidden_states,
                             layer_forward, model_forward)
from twinpress.quant import (dequantize, finetune_layer_quantized,
                             post_training_quantize, quantize)
from twinpress.store import (load_checkpoint, load_pairs, save_checkpoint,
                             save_pairs)

from oracles import random_layer, tail_energy

BASE_512 = ModelDims(d=512, n_heads=8, d_h=64, d_ff=2048, n_layers=6, vocab=2)
TOY = ModelDims(d=64, n_heads=4, d_h=16, d_ff=256, n_layers=4, vocab=16)


@contextmanager
def criterion(number: int, name: str, budget_s: float):
    start = time.perf_counter()
    try:
        yield
    except Exception:
        print(f"criterion {number} ({name}): FAIL after "
              f"{time.perf_counter() - start:.1f}s")
        raise
    elapsed = time.perf_counter() - start
    assert elapsed < budget_s, f"criterion {number} overran budget: {elapsed:.1f}s"
    print(f"criterion {number} ({name}): PASS in {elapsed:.1f}s "
          f"(budget {budget_s:.0f}s)")


# ---------------------------------------------------------------------------
# shared frozen toy pipeline (criteria 5, 8, 10)


def _narrow_inputs(n, seq_len, seed, vocab=16, alphabet=4):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, alphabet, seq_len) for _ in range(n)]


def _broad_inputs(n, seq_len, seed, vocab=16):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, vocab, int(rng.integers(max(2, seq_len // 2),
                                                    seq_len + seq_len // 2 + 1)))
            for _ in range(n)]


@pytest.fixture(scope="module")
def toy_setup():
    model = build_toy_model(TOY, np.random.default_rng(0))
    plan = uniform_plan(TOY, make_plan(TOY, 0.5))
    capture = _narrow_inputs(200, 12, 42)
    cfg = TrainConfig(epochs=40, lr=1e-4, seed=5)
    return model, plan, capture, cfg


_tuned_cache: dict = {}


def _tuned_pipeline(toy_setup, n_workers: int):
    """Memoized fine-tune of the shared toy pipeline; the first criterion to
    need a variant pays its cost inside its own timing budget."""
    if n_workers not in _tuned_cache:
        model, plan, capture, cfg = toy_setup
        _tuned_cache[n_workers] = finetune_all_layers(
            model, plan, capture, cfg, n_workers=n_workers)
    return _tuned_cache[n_workers]


def test_criterion_1_plan_reproduction():
    with criterion(1, "plan reproduction", 1.0):
        plan = make_plan(BASE_512, 0.50)
        assert (plan.r_a, plan.l_a, plan.r_f, plan.l_f) == (32, 8, 162, 18)
        report = accounting(BASE_512, uniform_plan(BASE_512, plan))
        assert abs(report.retained_fraction - 0.5013) <= 1e-4


def test_criterion_2_exact_rank_invariance():
    with criterion(2, "exact-rank invariance", 10.0):
        dims = ModelDims(d=32, n_heads=4, d_h=8, d_ff=64, n_layers=1, vocab=4)
        full = RankPlan(dims.d_h, 0, min(dims.d, dims.d_ff), 0)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            layer = random_layer(dims, rng)
            compressed = compress_layer(layer, dims, full, rng=rng)
            x = rng.normal(size=(10, dims.d))
            orig = layer_forward(layer, x)
            comp = layer_forward(compressed, x)
            rel = np.linalg.norm(comp - orig) / np.linalg.norm(orig)
            assert rel < 1e-8, f"layer seed {seed}: relative error {rel}"


def test_criterion_3_joint_beats_independent():
    with criterion(3, "Eckart-Young / joint-beats-independent", 10.0):
        wins = 0
        cases = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            p = rng.normal(size=(16, 4))
            q = rng.normal(size=(4, 16))
            m = p @ q
            sigma = svd(m).sigma
            for r in (1, 2, 3):
                cases += 1
                left, right = twin_factor(p, q, r, 0)
                joint = np.linalg.norm(m - left @ right)
                pl, pr = truncate(svd(p), r)
                ql, qr = truncate(svd(q), r)
                indep = np.linalg.norm(m - (pl @ pr) @ (ql @ qr))
                assert abs(joint - tail_energy(sigma, r)) < 1e-9
                if joint <= indep:
                    wins += 1
        assert wins == cases == 300


def test_criterion_4_gradient_correctness():
    with criterion(4, "gradient correctness", 60.0):
        dims = ModelDims(d=8, n_heads=2, d_h=4, d_ff=16, n_layers=1, vocab=4)
        rng = np.random.default_rng(17)
        layer = random_layer(dims, rng)
        compressed = compress_layer(layer, dims, RankPlan(2, 1, 4, 2), rng=rng)
        pairs = []
        for _ in range(3):
            x = rng.normal(size=(5, dims.d))
            pairs.append((x, layer_forward(layer, x)))
        report = grad_check(compressed, pairs, tolerance=1e-5, step=1e-5)
        classes = {
            "spectral": {"w_q", "w_k", "w_v", "w_ot", "ff1_u", "ff1_v",
                         "ff2_u", "ff2_v"},
            "adapter": {"ff1_a", "ff1_b", "ff2_a", "ff2_b"},
            "bias": {"t_q", "b_o", "b_1", "b_2"},
            "layernorm": {"ln_g", "ln_b"},
        }
        for cls, names in classes.items():
            present = names & set(report.per_tensor)
            assert present, f"no {cls} tensors checked"
            for name in present:
                assert report.per_tensor[name] < 1e-5, (cls, name,
                                                        report.per_tensor[name])
        assert report.passed


def test_criterion_5_finetuning_efficacy(toy_setup):
    with criterion(5, "fine-tuning efficacy", 600.0):
        model, plan, capture, cfg = toy_setup
        tuned, results = _tuned_pipeline(toy_setup, 1)
        for j, res in results.items():
            assert res.final_loss <= res.initial_loss, f"layer {j}"
        svd_only = MixedModel.from_model(model)
        for j in plan.ranks:
            lp = compress_layer(model.layers[j], TOY, plan.ranks[j], cfg.mode,
                                np.random.default_rng(layer_seed(cfg.seed, j, 0)))
            svd_only = svd_only.with_compressed(j, lp, activate=True)
        narrow = _narrow_inputs(64, 12, 1000)
        broad = _broad_inputs(64, 12, 2000)
        for name, inputs in (("narrow", narrow), ("broad", broad)):
            d_tuned = relative_logit_divergence(model, tuned.to_model(), inputs)
            d_svd = relative_logit_divergence(model, svd_only.to_model(), inputs)
            assert d_tuned < d_svd, (name, d_tuned, d_svd)


def _spectrum_shaped_layer_model():
    """Frozen ablation workload: toy layer whose weights have decaying spectra
    (the regime where spectral initialization carries real information)."""
    dims = ModelDims(d=64, n_heads=4, d_h=16, d_ff=256, n_layers=1, vocab=16)
    model = build_toy_model(dims, np.random.default_rng(2))
    layer = model.layers[0]
    for name in ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2"):
        arr = getattr(layer, name)
        res = svd(arr)
        k = len(res.sigma)
        target = res.sigma[0] * (np.arange(1, k + 1) ** -1.2)
        target *= np.linalg.norm(res.sigma) / np.linalg.norm(target)
        setattr(layer, name, (res.u * target) @ res.v.T)
    return dims, model


def test_criterion_6_ablation_ordering():
    with criterion(6, "ablation ordering", 900.0):
        dims, model = _spectrum_shaped_layer_model()
        inputs = _narrow_inputs(200, 12, 42)
        pairs = capture_hidden_states(model, inputs, 0)
        plan = RankPlan(8, 2, 18, 2)
        finals = {}
        for mode in ("spectral+lora-all", "spectral-only", "lora-only-scratch",
                     "frozen-spectral-lora-only"):
            lp = compress_layer(model.layers[0], dims, plan, mode,
                                np.random.default_rng(100))
            res = finetune_layer(lp, pairs, TrainConfig(
                epochs=40, lr=1e-3, seed=7, mode=mode))
            finals[mode] = res.final_loss
        case_i = finals["spectral+lora-all"]
        case_ii = finals["spectral-only"]
        case_iii = finals["lora-only-scratch"]
        case_iv = finals["frozen-spectral-lora-only"]
        assert case_i <= case_ii, (case_i, case_ii)
        assert case_ii < case_iv, (case_ii, case_iv)
        assert case_iv < case_iii, (case_iv, case_iii)
        assert case_iii >= 5.0 * case_i, (case_iii, case_i)


def test_criterion_7_quantization():
    with criterion(7, "quantization", 300.0):
        rng = np.random.default_rng(55)
        rows = rng.normal(size=(1000, 40)) * rng.uniform(0.01, 50, size=(1000, 1))
        q = quantize(rows)
        err = np.abs(rows - dequantize(q))
        assert np.all(err <= q.scales.astype(np.float64)[:, None] / 2)

        # fixed toy layer with outlier channels: the regime where per-row
        # absmax scales are coarse and training through the quantizer pays
        dims = ModelDims(d=32, n_heads=4, d_h=8, d_ff=64, n_layers=1, vocab=16)
        model = build_toy_model(dims, np.random.default_rng(3))
        layer = model.layers[0]
        col_rng = np.random.default_rng(8)
        for name in ("w_q", "w_v", "w_1", "w_2"):
            arr = getattr(layer, name)
            cols = col_rng.choice(arr.shape[1], 3, replace=False)
            arr[:, cols] *= 16.0
        inputs = _narrow_inputs(120, 10, 77)
        pairs = capture_hidden_states(model, inputs, 0)
        lp = compress_layer(layer, dims, RankPlan(4, 1, 9, 1),
                            rng=np.random.default_rng(11))
        cfg = TrainConfig(epochs=40, lr=1e-3, seed=13)
        fp = finetune_layer(lp, pairs, cfg)
        ptq_loss = layer_objective(post_training_quantize(fp.params), pairs)
        qat = finetune_layer_quantized(lp, pairs, cfg)
        assert qat.final_loss <= ptq_loss, (qat.final_loss, ptq_loss)


def test_criterion_8_layer_swap_soundness(toy_setup):
    with criterion(8, "layer-swap soundness", 120.0):
        model, plan, capture, cfg = toy_setup
        tuned, _ = _tuned_pipeline(toy_setup, 1)
        inputs = _narrow_inputs(16, 12, 321)
        allorig = set_active(tuned, []).to_model()
        for tokens in inputs:
            assert np.array_equal(model_forward(allorig, tokens),
                                  model_forward(model, tokens))
        a = sweep(tuned, [0, 1, 2, 3], inputs)
        b = sweep(tuned, [0, 1, 2, 3], inputs)
        assert len(a) == 5
        assert [p.to_dict() for p in a] == [p.to_dict() for p in b]
        pair_sets = capture_all_hidden_states(model, _narrow_inputs(20, 12, 777))
        for j in range(TOY.n_layers):
            swapped_back = swap(tuned, j, "original")
            obj_orig = layer_objective(swapped_back.slots[j].active_params,
                                       pair_sets[j])
            obj_comp = layer_objective(tuned.slots[j].active_params, pair_sets[j])
            assert obj_orig == 0.0
            assert obj_orig <= obj_comp


def test_criterion_9_format_robustness(tmp_path):
    with criterion(9, "format robustness", 120.0):
        dims = ModelDims(d=16, n_heads=4, d_h=4, d_ff=32, n_layers=2, vocab=8)
        model = build_toy_model(dims, np.random.default_rng(31))
        ck1, ck2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, str(ck1))
        save_checkpoint(load_checkpoint(str(ck1)), str(ck2))
        assert ck1.read_bytes() == ck2.read_bytes()
        inputs = [np.random.default_rng(5).integers(0, 8, 6) for _ in range(3)]
        ps = capture_hidden_states(model, inputs, 0)
        pp1, pp2 = tmp_path / "a.pairs", tmp_path / "b.pairs"
        save_pairs(ps, str(pp1))
        save_pairs(load_pairs(str(pp1)), str(pp2))
        assert pp1.read_bytes() == pp2.read_bytes()

        valid = ck1.read_bytes()
        rng = np.random.default_rng(4321)
        bad = tmp_path / "fuzz.bin"
        crashes = 0
        for case in range(10_000):
            kind = case % 4
            if kind == 0:
                blob = rng.integers(0, 256, rng.integers(0, 300),
                                    dtype=np.uint8).tobytes()
            elif kind == 1:
                data = bytearray(valid)
                for _ in range(int(rng.integers(1, 6))):
                    data[int(rng.integers(0, len(data)))] = int(rng.integers(0, 256))
                blob = bytes(data)
            elif kind == 2:
                blob = valid[:int(rng.integers(0, len(valid)))]
            else:
                blob = valid + rng.integers(0, 256, rng.integers(1, 32),
                                            dtype=np.uint8).tobytes()
            bad.write_bytes(blob)
            try:
                load_checkpoint(str(bad))
            except FormatError:
                pass
            except Exception:
                crashes += 1
        assert crashes == 0


def test_criterion_10_parallel_equivalence(toy_setup):
    with criterion(10, "parallel equivalence", 600.0):
        model, plan, capture, cfg = toy_setup
        _, seq_results = _tuned_pipeline(toy_setup, 1)
        _, par_results = _tuned_pipeline(toy_setup, 4)
        assert set(seq_results) == set(par_results) == set(plan.ranks)
        for j in plan.ranks:
            assert seq_results[j].history == par_results[j].history, j
            seq_tensors = seq_results[j].params.tensors()
            par_tensors = par_results[j].params.tensors()
            assert set(seq_tensors) == set(par_tensors)
            for name in seq_tensors:
                assert np.array_equal(seq_tensors[name], par_tensors[name]), (j, name)
