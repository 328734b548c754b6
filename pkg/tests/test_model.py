import numpy as np
import pytest

from twinpress.compress import RankPlan, compress_layer
from twinpress.errors import InputError, NumericalError, ShapeError
from twinpress.model import (HiddenStatePairSet, LayerParams, ModelDims,
                             build_toy_model, capture_all_hidden_states,
                             capture_hidden_states, layer_backward,
                             layer_forward, model_forward)

from oracles import naive_layer_forward, numeric_gradient, random_layer

DIMS = ModelDims(d=16, n_heads=4, d_h=4, d_ff=32, n_layers=2, vocab=11)


class TestModelDims:
    def test_head_width_invariant(self):
        with pytest.raises(ShapeError):
            ModelDims(d=16, n_heads=3, d_h=4, d_ff=32, n_layers=1, vocab=4)

    def test_positive(self):
        with pytest.raises(ShapeError):
            ModelDims(d=0, n_heads=1, d_h=0, d_ff=4, n_layers=1, vocab=4)

    def test_zero_layers_allowed(self):
        ModelDims(d=8, n_heads=2, d_h=4, d_ff=16, n_layers=0, vocab=4)


class TestLayerForward:
    def test_zero_weights_zero_output(self):
        d, d_ff = 8, 16
        p = LayerParams(
            w_q=np.zeros((d, d)), w_k=np.zeros((d, d)), w_v=np.zeros((d, d)),
            w_o=np.zeros((d, d)), w_1=np.zeros((d_ff, d)), w_2=np.zeros((d, d_ff)),
            n_heads=2, b_q=np.zeros(d), b_v=np.zeros(d), b_o=np.zeros(d),
            b_1=np.zeros(d_ff), b_2=np.zeros(d),
            ln_g=np.zeros(d), ln_b=np.zeros(d), activation="gelu")
        out = layer_forward(p, np.zeros((3, d)))
        assert np.array_equal(out, np.zeros((3, d)))

    def test_single_token_attention_is_one(self, rng):
        p = random_layer(DIMS, rng)
        _, trace = layer_forward(p, rng.normal(size=(1, DIMS.d)), want_trace=True)
        assert trace.attn.shape == (DIMS.n_heads, 1, 1)
        assert np.allclose(trace.attn, 1.0)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_naive_loop_original(self, seed):
        rng = np.random.default_rng(seed)
        p = random_layer(DIMS, rng, biases=(seed % 2 == 0))
        x = rng.normal(size=(5, DIMS.d))
        assert np.max(np.abs(layer_forward(p, x) - naive_layer_forward(p, x))) < 1e-10

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_naive_loop_compressed(self, seed):
        rng = np.random.default_rng(seed)
        p = random_layer(DIMS, rng)
        cp = compress_layer(p, DIMS, RankPlan(2, 1, 6, 2), rng=rng)
        # give the adapter rows real values so the zero-init path is not all we test
        cp.w_k[:] += rng.normal(0, 0.1, cp.w_k.shape)
        cp.ff1_b[:] = rng.normal(0, 0.1, cp.ff1_b.shape)
        x = rng.normal(size=(4, DIMS.d))
        assert np.max(np.abs(layer_forward(cp, x) - naive_layer_forward(cp, x))) < 1e-10

    def test_matches_naive_loop_pre_ln(self, rng):
        p = random_layer(DIMS, rng, pre_ln=True)
        x = rng.normal(size=(5, DIMS.d))
        assert np.max(np.abs(layer_forward(p, x) - naive_layer_forward(p, x))) < 1e-10

    def test_matches_naive_loop_cross(self, rng):
        p = random_layer(DIMS, rng)
        x = rng.normal(size=(3, DIMS.d))
        kv = rng.normal(size=(6, DIMS.d))
        got = layer_forward(p, x, cross_kv=kv)
        want = naive_layer_forward(p, x, cross_kv=kv)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_matches_naive_loop_causal(self, rng):
        p = random_layer(DIMS, rng)
        x = rng.normal(size=(5, DIMS.d))
        got = layer_forward(p, x, causal=True)
        want = naive_layer_forward(p, x, causal=True)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_attention_rows_sum_to_one(self, rng):
        p = random_layer(DIMS, rng)
        _, trace = layer_forward(p, rng.normal(size=(6, DIMS.d)), want_trace=True)
        assert np.max(np.abs(trace.attn.sum(axis=-1) - 1.0)) < 1e-9
        assert trace.attn.min() >= 0.0 and trace.attn.max() <= 1.0

    def test_attention_rows_sum_to_one_compressed(self, rng):
        p = random_layer(DIMS, rng)
        cp = compress_layer(p, DIMS, RankPlan(2, 1, 6, 2), rng=rng)
        _, trace = layer_forward(cp, rng.normal(size=(6, DIMS.d)), want_trace=True)
        assert np.max(np.abs(trace.attn.sum(axis=-1) - 1.0)) < 1e-9

    def test_shape_errors(self, rng):
        p = random_layer(DIMS, rng)
        with pytest.raises(ShapeError):
            layer_forward(p, rng.normal(size=(3, DIMS.d + 1)))
        with pytest.raises(InputError):
            layer_forward(p, rng.normal(size=(3, DIMS.d)), causal=True,
                          cross_kv=rng.normal(size=(3, DIMS.d)))

    def test_nan_detected_with_substep(self, rng):
        p = random_layer(DIMS, rng)
        p.w_2[0, 0] = np.nan
        with pytest.raises(NumericalError, match="feed-forward"):
            layer_forward(p, rng.normal(size=(2, DIMS.d)))

    @pytest.mark.parametrize("seed", range(3))
    def test_exact_factorization_invariance(self, seed):
        # any (W_q', W_k') with the same per-head product leaves A_h unchanged;
        # analogous replacement on (V, O) leaves Z unchanged
        rng = np.random.default_rng(seed)
        p = random_layer(DIMS, rng, biases=False)
        x = rng.normal(size=(5, DIMS.d))
        _, trace = layer_forward(p, x, want_trace=True)
        w_q, w_k = p.w_q.copy(), p.w_k.copy()
        w_v, w_o = p.w_v.copy(), p.w_o.copy()
        dh = DIMS.d_h
        for h in range(DIMS.n_heads):
            rows = slice(h * dh, (h + 1) * dh)
            g = rng.normal(size=(dh, dh)) + 0.5 * np.eye(dh)
            w_q[rows] = np.linalg.inv(g).T @ p.w_q[rows]
            w_k[rows] = g @ p.w_k[rows]
            g2 = rng.normal(size=(dh, dh)) + 0.5 * np.eye(dh)
            w_v[rows] = np.linalg.inv(g2).T @ p.w_v[rows]
            w_o[:, rows] = p.w_o[:, rows] @ g2.T
        q = LayerParams(w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o, w_1=p.w_1, w_2=p.w_2,
                        n_heads=p.n_heads, ln_g=p.ln_g, ln_b=p.ln_b,
                        activation=p.activation)
        _, trace2 = layer_forward(q, x, want_trace=True)
        assert np.max(np.abs(trace.attn - trace2.attn)) < 1e-9
        assert np.max(np.abs(trace.z - trace2.z)) < 1e-9


class TestLayerBackward:
    def test_zero_upstream_zero_grads(self, rng):
        p = random_layer(DIMS, rng)
        x = rng.normal(size=(4, DIMS.d))
        grads, dx = layer_backward(p, x, np.zeros((4, DIMS.d)))
        assert np.array_equal(dx, np.zeros_like(x))
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads.values())

    @pytest.mark.parametrize("pre_ln", [False, True])
    def test_original_matches_finite_differences(self, pre_ln):
        rng = np.random.default_rng(11)
        dims = ModelDims(d=8, n_heads=2, d_h=4, d_ff=16, n_layers=1, vocab=4)
        p = random_layer(dims, rng, pre_ln=pre_ln)
        x = rng.normal(size=(3, dims.d))
        upstream = rng.normal(size=(3, dims.d))
        grads, dx = layer_backward(p, x, upstream)

        def loss():
            return float(np.sum(layer_forward(p, x) * upstream))

        for name, arr in p.tensors().items():
            numeric = numeric_gradient(loss, arr)
            denom = max(1e-4, float(np.abs(numeric).max()), float(np.abs(grads[name]).max()))
            assert np.max(np.abs(grads[name] - numeric)) / denom < 1e-5, name

        def loss_x():
            return float(np.sum(layer_forward(p, x) * upstream))

        numeric_x = numeric_gradient(loss_x, x)
        denom = max(1e-4, float(np.abs(numeric_x).max()))
        assert np.max(np.abs(dx - numeric_x)) / denom < 1e-5

    def test_compressed_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        dims = ModelDims(d=8, n_heads=2, d_h=4, d_ff=16, n_layers=1, vocab=4)
        p = random_layer(dims, rng)
        cp = compress_layer(p, dims, RankPlan(2, 1, 4, 2), rng=rng)
        x = rng.normal(size=(3, dims.d))
        upstream = rng.normal(size=(3, dims.d))
        grads, dx = layer_backward(cp, x, upstream)

        def loss():
            return float(np.sum(layer_forward(cp, x) * upstream))

        for name, arr in cp.tensors().items():
            if arr.size == 0:
                continue
            numeric = numeric_gradient(loss, arr)
            denom = max(1e-4, float(np.abs(numeric).max()), float(np.abs(grads[name]).max()))
            assert np.max(np.abs(grads[name] - numeric)) / denom < 1e-5, name
        numeric_x = numeric_gradient(loss, x)
        denom = max(1e-4, float(np.abs(numeric_x).max()))
        assert np.max(np.abs(dx - numeric_x)) / denom < 1e-5

    def test_compressed_pre_ln_matches_naive_and_finite_differences(self):
        rng = np.random.default_rng(19)
        dims = ModelDims(d=8, n_heads=2, d_h=4, d_ff=16, n_layers=1, vocab=4)
        p = random_layer(dims, rng, pre_ln=True)
        cp = compress_layer(p, dims, RankPlan(2, 1, 4, 1), rng=rng)
        assert cp.ff_residual_pre_ln
        x = rng.normal(size=(4, dims.d))
        assert np.max(np.abs(layer_forward(cp, x) - naive_layer_forward(cp, x))) < 1e-10
        upstream = rng.normal(size=(4, dims.d))
        grads, _ = layer_backward(cp, x, upstream)

        def loss():
            return float(np.sum(layer_forward(cp, x) * upstream))

        for name, arr in cp.tensors().items():
            if arr.size == 0:
                continue
            numeric = numeric_gradient(loss, arr)
            denom = max(1e-4, float(np.abs(numeric).max()), float(np.abs(grads[name]).max()))
            assert np.max(np.abs(grads[name] - numeric)) / denom < 1e-5, name

    def test_adapter_b_grad_nonzero_at_zero_init(self):
        # forward contribution of the zero block is zero, its gradient is not
        rng = np.random.default_rng(17)
        dims = ModelDims(d=8, n_heads=2, d_h=4, d_ff=16, n_layers=1, vocab=4)
        p = random_layer(dims, rng)
        cp = compress_layer(p, dims, RankPlan(2, 1, 4, 2), rng=rng)
        assert np.array_equal(cp.ff1_b, np.zeros_like(cp.ff1_b))
        x = rng.normal(size=(3, dims.d))
        upstream = rng.normal(size=(3, dims.d))
        grads, _ = layer_backward(cp, x, upstream)

        def loss():
            return float(np.sum(layer_forward(cp, x) * upstream))

        numeric = numeric_gradient(loss, cp.ff1_b)
        assert np.abs(grads["ff1_b"]).max() > 1e-6
        denom = max(1e-4, float(np.abs(numeric).max()))
        assert np.max(np.abs(grads["ff1_b"] - numeric)) / denom < 1e-5


class TestModelForward:
    def test_zero_layer_model(self, rng):
        dims = ModelDims(d=8, n_heads=2, d_h=4, d_ff=16, n_layers=0, vocab=5)
        model = build_toy_model(dims, rng)
        tokens = np.array([1, 4, 0])
        logits = model_forward(model, tokens)
        assert np.array_equal(logits, model.readout(model.embed(tokens)))

    def test_bit_identical_layer_copy(self, toy_model, rng):
        tokens = rng.integers(0, toy_model.dims.vocab, 6)
        before = model_forward(toy_model, tokens)
        import copy
        toy_model.layers[0] = copy.deepcopy(toy_model.layers[0])
        assert np.array_equal(before, model_forward(toy_model, tokens))

    def test_matches_manual_composition(self, toy_model, rng):
        tokens = rng.integers(0, toy_model.dims.vocab, 7)
        h = toy_model.embed(tokens)
        for layer in toy_model.layers:
            h = layer_forward(layer, h)
        manual = toy_model.readout(h)
        assert np.array_equal(model_forward(toy_model, tokens), manual)

    def test_unknown_token_rejected(self, toy_model):
        with pytest.raises(InputError):
            model_forward(toy_model, np.array([0, toy_model.dims.vocab]))


class TestCapture:
    def test_definitional_roundtrip(self, toy_model, rng):
        inputs = [rng.integers(0, toy_model.dims.vocab, 5) for _ in range(3)]
        pairset = capture_hidden_states(toy_model, inputs, 0)
        for x_i, x_o in pairset.pairs:
            out = layer_forward(toy_model.layers[0], x_i)
            assert np.array_equal(out, x_o)

    def test_pair_count(self, toy_model, rng):
        inputs = [rng.integers(0, toy_model.dims.vocab, 5) for _ in range(4)]
        assert len(capture_hidden_states(toy_model, inputs, 1)) == 4

    def test_chained_layers(self, toy_model, rng):
        inputs = [rng.integers(0, toy_model.dims.vocab, 5) for _ in range(3)]
        sets = capture_all_hidden_states(toy_model, inputs)
        for (xi1, _), (_, xo0) in zip(sets[1].pairs, sets[0].pairs):
            assert np.array_equal(xi1, xo0)

    def test_index_out_of_range(self, toy_model, rng):
        with pytest.raises(InputError):
            capture_hidden_states(toy_model, [rng.integers(0, 4, 3)], 99)

    def test_pairset_invariants(self):
        with pytest.raises(ShapeError):
            HiddenStatePairSet(layer_index=0, pairs=[], d=4)
        with pytest.raises(ShapeError):
            HiddenStatePairSet(layer_index=0,
                               pairs=[(np.zeros((2, 3)), np.zeros((2, 4)))], d=4)
