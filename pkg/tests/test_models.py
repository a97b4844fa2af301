"""Topology planning, initialization, cells, and forward-pass tests."""

import math

import numpy as np
import pytest

from deepself.errors import ConfigError, FormatError, ShapeError
from deepself.models import (
    CnnToRnnReshape,
    Conv,
    Dense,
    Flatten,
    ModelSpec,
    Recurrent,
    SequenceHead,
    cnn_to_rnn_reshape,
    forward,
    gru_cell,
    infer_conv_output_size,
    init_model,
    lstm_cell,
    plan_shapes,
    rnn_cell,
    run_recurrent_layer,
)
from deepself.tensor import Tensor


def conv1d(channels, kernel, stride=1, padding=0):
    return Conv(1, channels, (kernel,), (stride,), (padding,))


class TestInferConvOutputSize:
    def test_same_padding_case(self):
        assert infer_conv_output_size(28, 3, 1, 1) == 28

    def test_kernel_covers_input(self):
        assert infer_conv_output_size(5, 5, 1, 0) == 1

    def test_kernel_exceeding_input_rejected(self):
        with pytest.raises(ConfigError):
            infer_conv_output_size(3, 5, 1, 0)

    def test_bad_arguments_rejected(self):
        with pytest.raises(ConfigError):
            infer_conv_output_size(8, 3, 0, 0)
        with pytest.raises(ConfigError):
            infer_conv_output_size(8, 3, 1, -1)
        with pytest.raises(ConfigError):
            infer_conv_output_size(0, 3, 1, 0)


class TestPlanShapes:
    def test_eeg_style_cnn_plan(self):
        # 4 convolutional stages and 2 fully connected stages overall
        spec = ModelSpec(
            input_shape=(1, 4096),
            layers=(conv1d(16, 8, 2), conv1d(16, 8, 2), conv1d(32, 8, 2), conv1d(32, 8, 2),
                    Dense(64)),
            n_classes=2,
        )
        plan = plan_shapes(spec)
        assert plan.output_shape == (2,)
        dense_stages = [s for s in plan.stages if isinstance(s.layer, Dense)]
        conv_stages = [s for s in plan.stages if isinstance(s.layer, Conv)]
        assert len(conv_stages) == 4
        assert len(dense_stages) == 2
        assert dense_stages[-1].is_head
        flattens = [s for s in plan.stages if isinstance(s.layer, Flatten)]
        assert len(flattens) == 1
        assert flattens[0].in_shape == conv_stages[-1].out_shape

    def test_shrinking_chain_errors_where_extent_collapses(self):
        layers = tuple(conv1d(1, 3, 2) for _ in range(3))
        plan = plan_shapes(ModelSpec((1, 17), layers, 2))
        conv_out = [s.out_shape for s in plan.stages if isinstance(s.layer, Conv)]
        assert conv_out == [(1, 8), (1, 3), (1, 1)]
        with pytest.raises(ConfigError, match="layer 3"):
            plan_shapes(ModelSpec((1, 17), layers + (conv1d(1, 3, 2),), 2))

    def test_empty_layer_list_rejected(self):
        with pytest.raises(ConfigError):
            plan_shapes(ModelSpec((8,), (), 2))

    def test_conv_after_recurrent_rejected(self):
        spec = ModelSpec((10, 4), (Recurrent("gru", 6), conv1d(4, 3)), 2)
        with pytest.raises(ConfigError, match="recurrent"):
            plan_shapes(spec)

    def test_recurrent_needs_sequence_input(self):
        with pytest.raises(ConfigError):
            plan_shapes(ModelSpec((2, 5, 7, 3), (Recurrent("rnn", 4),), 2))
        with pytest.raises(ConfigError):
            plan_shapes(ModelSpec((9,), (Flatten(), Recurrent("rnn", 4)), 2))

    def test_implicit_reshape_after_1d_conv(self):
        spec = ModelSpec((1, 64), (conv1d(8, 5, 2), Recurrent("gru", 12)), 3)
        plan = plan_shapes(spec)
        reshape_stages = [s for s in plan.stages if isinstance(s.layer, CnnToRnnReshape)]
        assert len(reshape_stages) == 1
        assert reshape_stages[0].in_shape == (8, 30)
        assert reshape_stages[0].out_shape == (30, 8)

    def test_implicit_reshape_after_2d_conv_keeps_time_axis(self):
        spec = ModelSpec(
            (1, 12, 20),
            (Conv(2, 4, (3, 3), (1, 1), (0, 0)), Recurrent("lstm", 5)),
            2,
        )
        plan = plan_shapes(spec)
        reshape_stage = next(s for s in plan.stages if isinstance(s.layer, CnnToRnnReshape))
        assert reshape_stage.in_shape == (4, 10, 18)
        assert reshape_stage.out_shape == (18, 40)

    def test_bidirectional_head_width(self):
        plan = plan_shapes(ModelSpec((10, 4), (Recurrent("gru", 6, 2, "bi"),), 3))
        head_in = next(s for s in plan.stages if isinstance(s.layer, SequenceHead))
        assert head_in.out_shape == (12,)
        assert plan.output_shape == (3,)

    def test_dense_head_appended_to_hidden_layers(self):
        plan = plan_shapes(ModelSpec((8,), (Dense(5),), 4))
        assert [type(s.layer).__name__ for s in plan.stages] == ["Dense", "Dense"]
        assert plan.stages[-1].is_head
        assert plan.stages[-1].out_shape == (4,)


class TestInitModel:
    def test_same_seed_bit_identical(self):
        spec = ModelSpec((1, 32), (conv1d(4, 3), Recurrent("lstm", 5, 1, "bi")), 2, seed=11)
        a, b = init_model(spec), init_model(spec)
        assert set(a.params) == set(b.params)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_glorot_bound_dense(self):
        model = init_model(ModelSpec((100,), (Dense(50),), 2, seed=3))
        w = model.params["layer0.weight"].data
        assert w.shape == (100, 50)
        assert np.max(np.abs(w)) < math.sqrt(6.0 / 150.0)

    def test_biases_zero_except_lstm_forget(self):
        spec = ModelSpec((6, 3), (Recurrent("lstm", 4), Dense(5)), 2, seed=0)
        model = init_model(spec)
        bias_names = [n for n in model.params
                      if n.endswith("bias") or n.rsplit(".", 1)[-1].startswith("b")]
        assert len(bias_names) == 6  # 4 gates + hidden dense + head
        for name in bias_names:
            expected = 1.0 if name.endswith(".b_f") else 0.0
            np.testing.assert_array_equal(model.params[name].data, expected)

    def test_default_dtype_is_float32(self):
        model = init_model(ModelSpec((8,), (Dense(4),), 2))
        assert all(p.data.dtype == np.float32 for p in model.params.values())

    def test_float64_verification_mode(self):
        model = init_model(ModelSpec((8,), (Dense(4),), 2), dtype=np.float64)
        assert all(p.data.dtype == np.float64 for p in model.params.values())


class TestForward:
    def test_probability_rows_sum_to_one(self):
        spec = ModelSpec((1, 40), (conv1d(4, 5, 2), Recurrent("gru", 6, 1, "bi")), 3, seed=5)
        model = init_model(spec)
        rng = np.random.default_rng(0)
        _, probs = forward(model, rng.standard_normal((7, 1, 40)).astype(np.float32))
        assert probs.shape == (7, 3)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)

    def test_batch_size_preserved(self):
        model = init_model(ModelSpec((8,), (Dense(4),), 2, seed=1))
        logits, _ = forward(model, np.ones((7, 8), dtype=np.float32))
        assert logits.shape == (7, 2)

    def test_identity_network_passes_input_through(self):
        model = init_model(ModelSpec((3,), (Dense(3),), 3, seed=0))
        model.params["layer0.weight"].data = np.eye(3, dtype=np.float32)
        model.params["head.weight"].data = np.eye(3, dtype=np.float32)
        batch = np.array([[0.5, 1.0, 2.0], [3.0, 0.25, 1.5]], dtype=np.float32)
        logits, _ = forward(model, batch)
        np.testing.assert_array_equal(logits.data, batch)

    def test_shape_mismatch_names_expectation(self):
        model = init_model(ModelSpec((1, 40), (conv1d(4, 5),), 2, seed=1))
        with pytest.raises(ShapeError, match="1 x 40"):
            forward(model, np.ones((2, 1, 39), dtype=np.float32))

    def test_forward_deterministic(self):
        spec = ModelSpec((5, 3), (Recurrent("lstm", 4, 2, "bi"),), 2, seed=9)
        model = init_model(spec)
        batch = np.random.default_rng(2).standard_normal((4, 5, 3)).astype(np.float32)
        a, _ = forward(model, batch)
        b, _ = forward(model, batch)
        np.testing.assert_array_equal(a.data, b.data)

    def test_cnn_rnn_stack_runs(self):
        spec = ModelSpec(
            (1, 16, 30),
            (Conv(2, 3, (3, 5), (1, 2), (1, 0)), Recurrent("rnn", 7), Dense(6)),
            4, seed=2,
        )
        model = init_model(spec)
        logits, probs = forward(model, np.random.default_rng(1).standard_normal((2, 1, 16, 30)))
        assert logits.shape == (2, 4)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)


def _cell_params(names, shape_w=(1, 1), value=0.0):
    params = {}
    for name in names:
        if name.startswith("W") or name.startswith("U"):
            params[f"c.{name}"] = Tensor(np.full(shape_w, value))
        else:
            params[f"c.{name}"] = Tensor(np.full(shape_w[1], value))
    return params


class TestCells:
    def test_gru_all_zero_parameters_and_state(self):
        p = _cell_params(["W_r", "U_r", "b_r", "W_z", "U_z", "b_z", "W_n", "U_n", "b_n"])
        out = gru_cell(Tensor([[3.0]]), Tensor([[0.0]]), p, "c")
        np.testing.assert_array_equal(out.data, 0.0)

    def test_gru_zero_params_halve_the_state(self):
        p = _cell_params(["W_r", "U_r", "b_r", "W_z", "U_z", "b_z", "W_n", "U_n", "b_n"])
        out = gru_cell(Tensor([[7.0]]), Tensor([[0.8]]), p, "c")
        np.testing.assert_allclose(out.data, [[0.4]], rtol=1e-6)

    def test_gru_candidate_path(self):
        p = _cell_params(["W_r", "U_r", "b_r", "W_z", "U_z", "b_z", "W_n", "U_n", "b_n"])
        p["c.W_n"] = Tensor([[1.0]])
        out = gru_cell(Tensor([[1.0]]), Tensor([[0.0]]), p, "c")
        np.testing.assert_allclose(out.data, [[0.5 * math.tanh(1.0)]], rtol=1e-6)

    def test_rnn_cell_equation(self):
        p = {"c.W": Tensor([[1.0]]), "c.U": Tensor([[2.0]]), "c.b": Tensor([0.5])}
        out = rnn_cell(Tensor([[0.3]]), Tensor([[0.1]]), p, "c")
        np.testing.assert_allclose(out.data, [[math.tanh(0.3 + 0.2 + 0.5)]], rtol=1e-6)

    def test_lstm_zero_params(self):
        names = [f"{k}_{g}" for g in "ifgo" for k in ("W", "U", "b")]
        p = _cell_params(names)
        h, c = lstm_cell(Tensor([[2.0]]), Tensor([[0.0]]), Tensor([[0.6]]), p, "c")
        # i=f=o=0.5, g=0  ->  c' = 0.3, h' = 0.5*tanh(0.3)
        np.testing.assert_allclose(c.data, [[0.3]], rtol=1e-6)
        np.testing.assert_allclose(h.data, [[0.5 * math.tanh(0.3)]], rtol=1e-6)


def _tied_bi_params(rng, features, hidden, cell="gru"):
    """Bidirectional parameter set whose two directions share values."""
    gates = {"rnn": ("",), "gru": ("_r", "_z", "_n"), "lstm": ("_i", "_f", "_g", "_o")}[cell]
    params = {}
    for gate in gates:
        w = rng.standard_normal((features, hidden)) * 0.4
        u = rng.standard_normal((hidden, hidden)) * 0.4
        b = rng.standard_normal(hidden) * 0.1
        for d in ("fwd", "bwd"):
            params[f"r.l0.{d}.W{gate}"] = Tensor(w.copy())
            params[f"r.l0.{d}.U{gate}"] = Tensor(u.copy())
            params[f"r.l0.{d}.b{gate}"] = Tensor(b.copy())
    return params


class TestBidirectional:
    def test_output_width_doubles(self):
        rng = np.random.default_rng(4)
        steps = [Tensor(rng.standard_normal((3, 5))) for _ in range(6)]
        model = init_model(ModelSpec((6, 5), (Recurrent("gru", 7, 1, "bi"),), 2, seed=0),
                           dtype=np.float64)
        outputs, head = run_recurrent_layer(steps, model.params, "layer0",
                                            Recurrent("gru", 7, 1, "bi"))
        assert len(outputs) == 6
        assert outputs[0].shape == (3, 14)
        assert head.shape == (3, 14)

    def test_reversed_input_swaps_directions_under_tied_weights(self):
        rng = np.random.default_rng(8)
        layer = Recurrent("gru", 4, 1, "bi")
        params = _tied_bi_params(rng, 3, 4)
        steps = [Tensor(rng.standard_normal((2, 3))) for _ in range(5)]
        out_fwd_order, _ = run_recurrent_layer(steps, params, "r", layer)
        out_rev_order, _ = run_recurrent_layer(steps[::-1], params, "r", layer)
        for t in range(5):
            fwd_half_on_reversed = out_rev_order[t].data[:, :4]
            bwd_half_original = out_fwd_order[4 - t].data[:, 4:]
            np.testing.assert_allclose(fwd_half_on_reversed, bwd_half_original, rtol=1e-12)

    def test_single_step_sequence(self):
        rng = np.random.default_rng(1)
        layer = Recurrent("rnn", 4, 1, "bi")
        params = _tied_bi_params(rng, 3, 4, cell="rnn")
        outputs, head = run_recurrent_layer([Tensor(rng.standard_normal((2, 3)))], params, "r", layer)
        assert len(outputs) == 1
        np.testing.assert_array_equal(head.data[:, :4], head.data[:, 4:])

    def test_unidirectional_causality(self):
        rng = np.random.default_rng(6)
        model = init_model(ModelSpec((8, 3), (Recurrent("rnn", 5),), 2, seed=7), dtype=np.float64)
        layer = Recurrent("rnn", 5)
        base = rng.standard_normal((8, 3))
        perturbed = base.copy()
        perturbed[4] += 10.0
        out_a, _ = run_recurrent_layer([Tensor(base[t][None, :]) for t in range(8)],
                                       model.params, "layer0", layer)
        out_b, _ = run_recurrent_layer([Tensor(perturbed[t][None, :]) for t in range(8)],
                                       model.params, "layer0", layer)
        for t in range(4):
            np.testing.assert_array_equal(out_a[t].data, out_b[t].data)
        assert not np.allclose(out_a[4].data, out_b[4].data)


class TestCnnToRnnReshape:
    def test_shape_and_ordering(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 8, 4, 10))
        out = cnn_to_rnn_reshape(Tensor(x))
        assert out.shape == (2, 10, 32)
        for b in (0, 1):
            for c in (0, 3, 7):
                for f in (0, 2):
                    for t in (0, 5, 9):
                        assert out.data[b, t, c * 4 + f] == x[b, c, f, t]

    def test_degenerate_identity(self):
        x = np.arange(12.0).reshape(2, 1, 1, 6)
        out = cnn_to_rnn_reshape(Tensor(x))
        np.testing.assert_array_equal(out.data[:, :, 0], x[:, 0, 0, :])

    def test_multiset_preserved(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((3, 5, 7, 11))
        out = cnn_to_rnn_reshape(Tensor(x))
        np.testing.assert_array_equal(np.sort(out.data.ravel()), np.sort(x.ravel()))

    def test_rank3_variant(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((2, 6, 9))
        out = cnn_to_rnn_reshape(Tensor(x))
        assert out.shape == (2, 9, 6)
        np.testing.assert_array_equal(out.data, np.transpose(x, (0, 2, 1)))


class TestModelSpecText:
    def test_round_trip(self):
        spec = ModelSpec(
            (1, 16, 30),
            (Conv(2, 3, (3, 5), (1, 2), (1, 0)), Recurrent("gru", 7, 2, "bi"),
             Flatten(), Dense(6)),
            4, activation="tanh", seed=42,
        )
        assert ModelSpec.from_text(spec.to_text()) == spec

    def test_bad_line_rejected(self):
        with pytest.raises(FormatError):
            ModelSpec.from_text("input_shape=4\nn_classes=2\nlayer=warp:speed=9\n")

    def test_missing_fields_rejected(self):
        with pytest.raises(FormatError):
            ModelSpec.from_text("layer=dense:nodes=4\n")

    def test_domain_validation(self):
        with pytest.raises(ConfigError):
            Recurrent("conv", 4)
        with pytest.raises(ConfigError):
            Recurrent("gru", 4, direction="both")
        with pytest.raises(ConfigError):
            Dense(0)
        with pytest.raises(ConfigError):
            Conv(4, 1, (3,), (1,), (0,))
        with pytest.raises(ConfigError):
            ModelSpec((8,), (Dense(4),), 2, activation="swish")
