import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from foresee.errors import ShapeError, TrainingDivergenceError, ValidationError
from foresee.numerics import (
    Dropout,
    MultiHeadAttention,
    OptimizerState,
    RngStream,
    TransformerBlock,
    adam_step,
    dropout_mask,
    finite_difference_check,
    gelu,
    init_parameters,
    layer_norm,
    linear_forward,
    multi_head_attention,
    softmax,
)

from .conftest import randn

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


class TestLinear:
    def test_identity(self):
        assert torch.equal(linear_forward(t([1.0, 2.0]), torch.eye(2, dtype=D), t([0.0, 0.0])), t([1.0, 2.0]))

    def test_hand_product(self):
        y = linear_forward(t([1.0, 1.0]), t([[1.0, 1.0], [0.0, 1.0]]), t([1.0, 0.0]))
        assert torch.equal(y, t([3.0, 1.0]))

    def test_zero_input_gives_bias(self):
        b = t([0.3, -2.0, 5.0])
        assert torch.equal(linear_forward(torch.zeros(4, dtype=D), torch.ones(3, 4, dtype=D), b), b)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3,\).*\(2, 2\)"):
            linear_forward(torch.zeros(3, dtype=D), torch.eye(2, dtype=D))

    def test_gradient(self, gen):
        x, W, b = randn(gen, 5, 3), randn(gen, 4, 3).requires_grad_(), randn(gen, 4).requires_grad_()
        err = finite_difference_check(lambda: (linear_forward(x, W, b) ** 2).sum(), [W, b])
        assert err <= 1e-4


class TestLayerNorm:
    def test_constant_vector(self):
        out = layer_norm(t([3.0, 3.0, 3.0]), torch.ones(3, dtype=D), torch.zeros(3, dtype=D))
        assert torch.allclose(out, torch.zeros(3, dtype=D))

    def test_unit_variance_pair(self):
        out = layer_norm(t([1.0, -1.0]), torch.ones(2, dtype=D), torch.zeros(2, dtype=D), eps=1e-14)
        assert torch.allclose(out, t([1.0, -1.0]), atol=1e-12)

    def test_affine(self):
        out = layer_norm(t([1.0, -1.0]), t([2.0, 2.0]), t([1.0, 1.0]), eps=1e-14)
        assert torch.allclose(out, t([3.0, -1.0]), atol=1e-12)

    def test_matches_torch(self, gen):
        x, g, b = randn(gen, 6, 5), randn(gen, 5), randn(gen, 5)
        assert torch.allclose(layer_norm(x, g, b), nn.functional.layer_norm(x, (5,), g, b), atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(torch.zeros(3, dtype=D), torch.ones(2, dtype=D), torch.zeros(2, dtype=D))

    def test_gradient(self, gen):
        x = randn(gen, 3, 6).requires_grad_()
        g, b = randn(gen, 6).requires_grad_(), randn(gen, 6).requires_grad_()
        w = randn(gen, 3, 6)
        assert finite_difference_check(lambda: (layer_norm(x, g, b) * w).sum(), [x, g, b]) <= 1e-4


class TestGelu:
    def test_values(self):
        assert gelu(0.0) == 0.0
        assert gelu(10.0) == pytest.approx(10.0, abs=1e-12)
        # Phi(1) via erf
        assert gelu(1.0) == pytest.approx(0.8413447460685429, abs=1e-12)

    def test_tensor_matches_torch(self, gen):
        x = randn(gen, 50) * 3
        assert torch.allclose(gelu(x), nn.functional.gelu(x), atol=1e-14)


class TestSoftmax:
    def test_symmetric(self):
        assert torch.allclose(softmax(t([0.0, 0.0])), t([0.5, 0.5]))

    def test_closed_form(self):
        assert torch.allclose(softmax(t([0.0, math.log(3.0)])), t([0.25, 0.75]), atol=1e-15)

    def test_empty(self):
        with pytest.raises(ShapeError):
            softmax(torch.zeros(0, dtype=D))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)), st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, x, c):
        x = torch.tensor(x)
        p = softmax(x)
        assert (p >= 0).all()
        assert abs(p.sum().item() - 1.0) <= 1e-12
        assert torch.allclose(softmax(x + c), p, atol=1e-12)


class TestAttention:
    def test_single_token_is_value_output_map(self, gen):
        mha = MultiHeadAttention(8, 2).double()
        x = randn(gen, 1, 8)
        expected = mha.out(mha.v(x))
        assert torch.allclose(multi_head_attention(x, x, 2, mha), expected, atol=1e-12)

    def test_identical_keys_get_equal_weights(self, gen):
        mha = MultiHeadAttention(8, 4).double()
        q = randn(gen, 3, 8)
        kv = randn(gen, 1, 8).repeat(2, 1)
        mha(q, kv, keep_weights=True)
        assert torch.allclose(mha.last_weights, torch.full_like(mha.last_weights, 0.5))

    def test_shapes(self, gen):
        mha = MultiHeadAttention(8, 2).double()
        assert mha(randn(gen, 5, 8), randn(gen, 7, 8)).shape == (5, 8)
        assert mha(randn(gen, 3, 5, 8)).shape == (3, 5, 8)

    def test_errors(self):
        with pytest.raises(ValidationError):
            MultiHeadAttention(10, 3)
        mha = MultiHeadAttention(8, 2).double()
        with pytest.raises(ShapeError):
            mha(torch.zeros(0, 8, dtype=D))

    def test_gradient(self, gen, init_rng):
        mha = MultiHeadAttention(8, 2).double()
        init_parameters(mha, init_rng)
        x = randn(gen, 4, 8).requires_grad_()
        w = randn(gen, 4, 8)
        params = [x, *mha.parameters()]
        assert finite_difference_check(lambda: (mha(x) * w).sum(), params) <= 1e-4

    def test_block_gradient(self, gen, init_rng):
        block = TransformerBlock(8, 2, 16).double()
        init_parameters(block, init_rng)
        x = randn(gen, 5, 8)
        w = randn(gen, 5, 8)
        assert finite_difference_check(lambda: (block(x) * w).sum(), list(block.parameters())) <= 1e-4


class TestDropout:
    def test_rate_zero_and_eval_identity(self, gen):
        x = randn(gen, 4, 6)
        assert torch.equal(dropout_mask(x, 0.0, True), x)
        assert torch.equal(dropout_mask(x, 0.2, False), x)

    def test_deterministic_under_seed(self, gen):
        x = randn(gen, 10, 10)
        a = dropout_mask(x, 0.2, True, RngStream(3, "dropout").torch_generator())
        b = dropout_mask(x, 0.2, True, RngStream(3, "dropout").torch_generator())
        assert torch.equal(a, b)

    def test_inverted_scaling_preserves_mean(self):
        x = torch.ones(200_000, dtype=D)
        y = dropout_mask(x, 0.2, True, RngStream(0, "dropout").torch_generator())
        assert set(torch.unique(y).tolist()) <= {0.0, 1.25}
        assert y.mean().item() == pytest.approx(1.0, abs=0.01)

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_bad_rate(self, rate):
        with pytest.raises(ValidationError):
            dropout_mask(torch.zeros(2, dtype=D), rate, True)
        with pytest.raises(ValidationError):
            Dropout(rate)


class TestAdam:
    def test_first_step_on_quadratic(self):
        theta = nn.Parameter(t([1.0]))
        (theta**2).sum().backward()
        adam_step([("theta", theta)], OptimizerState(lr=0.1, weight_decay=0.0))
        # m_hat = g, v_hat = g^2  ->  step = lr * g / (|g| + eps)
        assert theta.item() == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-15)
        assert theta.item() == pytest.approx(0.9, abs=1e-8)

    def test_zero_gradient_no_decay_is_identity(self, gen):
        p = nn.Parameter(randn(gen, 3, 3))
        before = p.detach().clone()
        p.grad = torch.zeros_like(p)
        state = OptimizerState(weight_decay=0.0)
        for _ in range(5):
            adam_step([("p", p)], state)
        assert torch.equal(p.detach(), before)
        assert state.step == 5

    def test_decoupled_weight_decay(self, gen):
        p = nn.Parameter(randn(gen, 4))
        before = p.detach().clone()
        p.grad = torch.zeros_like(p)
        adam_step([("p", p)], OptimizerState(lr=0.01, weight_decay=0.5))
        assert torch.allclose(p.detach(), before * (1 - 0.01 * 0.5), atol=1e-15)

    def test_nan_gradient_raises(self):
        p = nn.Parameter(t([1.0]))
        p.grad = t([float("nan")])
        with pytest.raises(TrainingDivergenceError):
            adam_step([("p", p)], OptimizerState())

    def test_step_counter_and_state_shapes(self, gen):
        p = nn.Parameter(randn(gen, 2, 5))
        state = OptimizerState()
        for k in range(3):
            p.grad = randn(gen, 2, 5)
            adam_step([("p", p)], state)
            assert state.step == k + 1
            assert torch.isfinite(p).all()
        assert state.exp_avg["p"].shape == p.shape == state.exp_avg_sq["p"].shape


class TestFiniteDifference:
    def test_quadratic_exact(self, gen):
        A = randn(gen, 4, 4)
        x = randn(gen, 4).requires_grad_()
        assert finite_difference_check(lambda: x @ A @ x + 3 * x.sum(), [x]) <= 1e-10

    def test_two_layer_mlp(self, gen, init_rng):
        mlp = nn.Sequential(nn.Linear(5, 7), nn.Tanh(), nn.Linear(7, 1)).double()
        init_parameters(mlp, init_rng)
        x = randn(gen, 6, 5)
        assert finite_difference_check(lambda: mlp(x).pow(2).sum(), list(mlp.parameters()), h=1e-5) <= 1e-4

    def test_detects_wrong_gradient(self, gen):
        class Doubled(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                ctx.save_for_backward(x)
                return (x**2).sum()

            @staticmethod
            def backward(ctx, g):
                (x,) = ctx.saved_tensors
                return g * 2 * (2 * x)

        x = t([0.7, -1.3, 2.0]).requires_grad_()
        err = finite_difference_check(lambda: Doubled.apply(x), [x])
        assert err == pytest.approx(1.0, rel=1e-6)
        assert err > 1e-4

    def test_non_finite_loss(self):
        x = t([1.0]).requires_grad_()
        with pytest.raises(TrainingDivergenceError):
            finite_difference_check(lambda: x.sum() * float("inf"), [x])

    def test_bad_step(self):
        with pytest.raises(ValidationError):
            finite_difference_check(lambda: None, [], h=0.0)


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(42, "init").generator.standard_normal(10)
        b = RngStream(42, "init").generator.standard_normal(10)
        assert np.array_equal(a, b)

    def test_purposes_independent(self):
        a = RngStream(42, "init").generator.standard_normal(10)
        b = RngStream(42, "dropout").generator.standard_normal(10)
        assert not np.array_equal(a, b)

    def test_children(self):
        root = RngStream(1, "folds")
        assert np.array_equal(root.child(3).generator.random(4), RngStream(1, "folds").child(3).generator.random(4))
        assert not np.array_equal(root.child(3).generator.random(4), root.child(4).generator.random(4))

    def test_unknown_purpose(self):
        with pytest.raises(ValidationError):
            RngStream(0, "weights")


def test_init_scheme(init_rng):
    lin = nn.Linear(16, 4).double()
    norm = nn.LayerNorm(4).double()
    init_parameters(nn.ModuleList([lin, norm]), init_rng)
    assert lin.weight.abs().max() <= 1 / 4
    assert torch.equal(lin.bias, torch.zeros(4, dtype=D))
    assert torch.equal(norm.weight, torch.ones(4, dtype=D))
