import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mvb import ShapeError
from mvb.numerics import (RngState, conv2d_3x3, grad_check, group_norm, linear, rng_normal, rng_uniform,
                          softmax_lastdim)


class TestSoftmax:
    def test_uniform_pair(self):
        assert torch.allclose(softmax_lastdim(torch.tensor([0.0, 0.0])), torch.tensor([0.5, 0.5]))

    def test_log_two(self):
        out = softmax_lastdim(torch.tensor([math.log(2.0), 0.0], dtype=torch.float64))
        assert torch.allclose(out, torch.tensor([2 / 3, 1 / 3], dtype=torch.float64), atol=1e-15)

    def test_saturates_without_overflow(self):
        out = softmax_lastdim(torch.tensor([1000.0, 0.0], dtype=torch.float64))
        assert abs(out[0].item() - 1) < 1e-12 and out[1].item() < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            softmax_lastdim(torch.zeros(3, 0))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
    def test_rows_sum_to_one(self, logits):
        out = softmax_lastdim(torch.tensor(logits, dtype=torch.float32))
        assert torch.isfinite(out).all()
        assert abs(out.double().sum().item() - 1) < 1e-6


class TestLinear:
    def test_identity(self):
        assert torch.equal(linear(torch.tensor([1.0, 2.0]), torch.eye(2), torch.zeros(2)), torch.tensor([1.0, 2.0]))

    def test_hand_arithmetic(self):
        out = linear(torch.tensor([1.0, 1.0]), torch.tensor([[2.0, 0.0], [0.0, 3.0]]), torch.tensor([1.0, 1.0]))
        assert torch.equal(out, torch.tensor([3.0, 4.0]))

    def test_zero_input_passes_bias(self):
        assert torch.equal(linear(torch.zeros(3), torch.randn(1, 3), torch.tensor([5.0])), torch.tensor([5.0]))

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            linear(torch.zeros(3), torch.zeros(2, 4))


class TestGroupNorm:
    def test_constant_input(self):
        out = group_norm(torch.full((2, 4, 3, 3), 5.0), 2, torch.ones(4), torch.zeros(4))
        assert torch.equal(out, torch.zeros_like(out))

    def test_affine_dominates(self):
        out = group_norm(torch.randn(2, 4, 3, 3), 2, torch.zeros(4), torch.full((4,), 7.0))
        assert torch.equal(out, torch.full_like(out, 7.0))

    def test_two_values(self):
        x = torch.tensor([[[1.0], [3.0]]], dtype=torch.float64)  # [B=1, C=2, 1]
        out = group_norm(x, 1, torch.ones(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64), eps=1e-12)
        assert torch.allclose(out.flatten(), torch.tensor([-1.0, 1.0], dtype=torch.float64), atol=1e-10)

    def test_normalized_statistics(self):
        x = torch.randn(3, 8, 5, 5) * 4 + 2
        y = group_norm(x, 4, torch.ones(8), torch.zeros(8)).double().reshape(3, 4, -1)
        assert y.mean(-1).abs().max() < 1e-5
        assert (y.var(-1, unbiased=False) - 1).abs().max() < 1e-4

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            group_norm(torch.zeros(1, 6, 2, 2), 4, torch.ones(6), torch.zeros(6))


class TestConv:
    def test_delta_kernel_is_identity(self):
        k = torch.zeros(1, 1, 3, 3)
        k[0, 0, 1, 1] = 1
        x = torch.randn(2, 1, 5, 6)
        assert torch.equal(conv2d_3x3(x, k, torch.zeros(1)), x)

    def test_ones_kernel_interior(self):
        out = conv2d_3x3(torch.ones(1, 1, 5, 5), torch.ones(1, 1, 3, 3), None)
        assert out[0, 0, 2, 2].item() == 9

    def test_zero_kernel_bias(self):
        out = conv2d_3x3(torch.randn(1, 3, 4, 4), torch.zeros(2, 3, 3, 3), torch.tensor([2.0, 2.0]))
        assert torch.equal(out, torch.full((1, 2, 4, 4), 2.0))

    def test_stride_two_halves(self):
        assert conv2d_3x3(torch.randn(1, 2, 8, 8), torch.randn(3, 2, 3, 3), None, stride=2).shape == (1, 3, 4, 4)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d_3x3(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3), None)


class TestGradCheck:
    def test_quadratic(self):
        x = torch.tensor([3.0], requires_grad=True)
        assert grad_check(lambda: (x ** 2).sum(), [x], h=1e-4) < 1e-6

    def test_softmax_sum_is_flat(self):
        x = torch.randn(3, 5, requires_grad=True)
        assert grad_check(lambda: softmax_lastdim(x).sum(), [x]) < 1e-8

    def test_restores_dtype(self):
        x = torch.randn(4, requires_grad=True)
        grad_check(lambda: (x ** 3).sum(), [x])
        assert x.dtype == torch.float32 and x.grad is None

    def test_detects_wrong_gradient(self):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x ** 2

            @staticmethod
            def backward(ctx, g):
                return g  # should be 2x * g

        x = torch.tensor([2.0], requires_grad=True)
        assert grad_check(lambda: Bad.apply(x).sum(), [x]) > 0.1

    def test_non_finite(self):
        x = torch.tensor([0.0], requires_grad=True)
        with pytest.raises(ArithmeticError):
            grad_check(lambda: (1 / x).sum(), [x])

    def test_step_range(self):
        x = torch.tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda: x.sum(), [x], h=0.1)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(1, 3), st.sampled_from([2, 4]), st.integers(2, 4), st.integers(0, 10_000))
    def test_public_ops_match_finite_differences(self, b, c, hw, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(b, c, hw, hw, generator=g, requires_grad=True)
        k = torch.randn(c, c, 3, 3, generator=g, requires_grad=True)
        gamma = torch.randn(c, generator=g, requires_grad=True)
        beta = torch.randn(c, generator=g, requires_grad=True)
        w = torch.randn(3, c, generator=g, requires_grad=True)
        weight = torch.randn(b, hw, hw, 3, generator=g, dtype=torch.float64)

        def f():
            h = group_norm(conv2d_3x3(x, k, None), c // 2, gamma, beta)
            y = softmax_lastdim(linear(h.permute(0, 2, 3, 1), w))
            return (y * weight).sum()

        assert grad_check(f, [x, k, gamma, beta, w]) < 1e-3


class TestRng:
    def test_same_state_same_draws(self):
        a, _ = rng_normal(RngState(7, 3), (4, 5))
        b, _ = rng_normal(RngState(7, 3), (4, 5))
        assert torch.equal(a, b)

    def test_moments(self):
        z, s = rng_normal(RngState(123), (100_000,))
        assert abs(z.double().mean().item()) < 0.02
        assert abs(z.double().var().item() - 1) < 0.03
        assert s.counter == 100_000

    def test_seeds_differ(self):
        assert not torch.equal(rng_normal(RngState(1), (16,))[0], rng_normal(RngState(2), (16,))[0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**64 - 1), st.integers(0, 10_000), st.integers(1, 9), st.integers(1, 9))
    def test_batching_does_not_change_stream(self, seed, counter, n1, n2):
        s = RngState(seed, counter)
        whole, end = rng_uniform(s, n1 + n2)
        a, mid = rng_uniform(s, n1)
        b, end2 = rng_uniform(mid, n2)
        assert np.array_equal(whole, np.concatenate([a, b])) and end == end2

    def test_uniform_range(self):
        u, _ = rng_uniform(RngState(5), 10_000)
        assert u.min() >= 0 and u.max() < 1
        assert abs(u.mean() - 0.5) < 3 * math.sqrt(1 / 12 / 10_000)
