from decimal import Decimal, getcontext

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from mvb import ConfigError, InputError, ShapeError
from mvb.diffusion import (GuidanceConfig, cfg_epsilon, ddim_loop, ddim_sample, ddim_step, ddim_timesteps,
                           ddpm_sample, ddpm_step, make_schedule, q_sample, training_loss)
from mvb.numerics import RngState, rng_normal, rng_uniform

from conftest import PROMPT, tiny_model


class TestSchedule:
    def test_single_step(self):
        s = make_schedule(1, 0.02, 0.02)
        assert s.alpha_bar.tolist() == [pytest.approx(0.98, abs=1e-15)]

    def test_alpha_bar_against_decimal_product(self):
        s = make_schedule(1000, 1e-4, 2e-2)
        getcontext().prec = 50
        prod = Decimal(1)
        for b in s.beta:
            prod *= Decimal(1) - Decimal(float(b))
        assert abs(float(prod) - s.alpha_bar[999]) <= 1e-12 * float(prod)

    @given(st.integers(1, 300), st.floats(1e-5, 0.1), st.floats(0.0, 0.5))
    def test_invariants(self, T, start, extra):
        s = make_schedule(T, start, min(start + extra, 0.9))
        assert ((s.beta > 0) & (s.beta < 1)).all()
        assert (np.diff(s.beta) >= 0).all()
        np.testing.assert_array_equal(s.alpha, 1 - s.beta)
        assert (np.diff(s.alpha_bar) < 0).all()

    @pytest.mark.parametrize("args", [(0, 1e-4, 2e-2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ConfigError):
            make_schedule(*args)

    def test_read_only(self):
        with pytest.raises(ValueError):
            make_schedule(10).beta[0] = 0.5


class TestQSample:
    def test_no_noise_limit(self):
        s = make_schedule(1, 1e-12, 1e-12)
        z0, eps = torch.randn(2, 3, 4, 4, 4), torch.randn(2, 3, 4, 4, 4)
        assert torch.allclose(q_sample(z0, 0, eps, s), z0, atol=1e-5)

    def test_pure_noise_limit(self):
        s = make_schedule(400, 0.5, 0.5)  # ab = 0.5**400
        z0, eps = torch.randn(2, 4, 4, 4), torch.randn(2, 4, 4, 4)
        assert torch.equal(q_sample(z0, 399, eps, s), eps)

    @pytest.mark.parametrize("t", [0, 25, 49])
    def test_marginal_within_three_sigma(self, t):
        s = make_schedule(50)
        n = 10_000
        z0 = torch.full((n,), 0.7, dtype=torch.float64)
        eps, _ = rng_normal(RngState(t), (n,))
        z = q_sample(z0, t, eps.double(), s)
        ab = s.alpha_bar[t]
        var = 1 - ab
        assert abs(z.mean().item() - np.sqrt(ab) * 0.7) < 3 * np.sqrt(var / n)
        assert abs(z.var().item() - var) < 3 * var * np.sqrt(2 / (n - 1))

    def test_per_element_timesteps(self):
        s = make_schedule(50)
        z0, eps = torch.randn(3, 2, 4, 4, 4), torch.randn(3, 2, 4, 4, 4)
        out = q_sample(z0, np.array([0, 10, 49]), eps, s)
        for i, t in enumerate([0, 10, 49]):
            assert torch.equal(out[i], q_sample(z0[i], t, eps[i], s))

    def test_errors(self):
        s = make_schedule(50)
        with pytest.raises(InputError):
            q_sample(torch.zeros(2), 50, torch.zeros(2), s)
        with pytest.raises(ShapeError):
            q_sample(torch.zeros(2), 0, torch.zeros(3), s)


class TestGuidance:
    def test_identities(self):
        c, u = torch.randn(5), torch.randn(5)
        assert torch.equal(cfg_epsilon(c, u, 1), c)
        assert torch.equal(cfg_epsilon(c, u, 0), u)
        assert cfg_epsilon(torch.tensor(2.0), torch.tensor(1.0), 3).item() == 4.0

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 10))
    def test_affine_in_scale(self, a, b, s):
        c, u = torch.tensor([a], dtype=torch.float64), torch.tensor([b], dtype=torch.float64)
        lo, hi = cfg_epsilon(c, u, 0.5), cfg_epsilon(c, u, 2.5)
        mid = cfg_epsilon(c, u, s)
        assert torch.allclose(mid, lo + (s - 0.5) / 2.0 * (hi - lo), atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cfg_epsilon(torch.zeros(2), torch.zeros(3), 2.0)

    def test_config_validation(self):
        m = tiny_model()
        with pytest.raises(ConfigError):
            GuidanceConfig(-1.0, m.conditioner.null_pair(1))
        with torch.no_grad():
            cond = m.conditioner.encode(torch.tensor([PROMPT]))
        with pytest.raises(ConfigError):
            GuidanceConfig(2.0, cond)


def _oracle(z0, sched):
    """Perfect noise predictor for a known clean sample."""
    def eps_fn(z, t):
        ab = sched.alpha_bar[t]
        return (z - np.sqrt(ab) * z0) / np.sqrt(1 - ab)
    return eps_fn


class TestSamplers:
    def test_ddpm_one_step_inversion(self):
        s = make_schedule(1, 0.02, 0.02)
        z0, eps = torch.randn(2, 4, 4, 4, 4), torch.randn(2, 4, 4, 4, 4)
        z, rng = ddpm_step(q_sample(z0, 0, eps, s), eps, 0, RngState(3), s)
        assert torch.allclose(z, z0, atol=1e-5)
        assert rng == RngState(3)  # t = 0 draws nothing

    def test_ddpm_step_deterministic(self):
        s = make_schedule(50)
        z, e = torch.randn(1, 2, 4, 4, 4), torch.randn(1, 2, 4, 4, 4)
        a, ra = ddpm_step(z, e, 30, RngState(5), s)
        b, rb = ddpm_step(z, e, 30, RngState(5), s)
        assert torch.equal(a, b) and ra == rb

    def test_ddim_full_steps_with_oracle_recovers(self):
        s = make_schedule(50)
        z0 = torch.rand(1, 3, 4, 8, 8) * 2 - 1
        eps = torch.randn_like(z0)
        z = q_sample(z0, 49, eps, s)
        out = ddim_loop(_oracle(z0, s), z, ddim_timesteps(50, 49), s)
        assert torch.allclose(out, z0, atol=1e-4)

    @given(st.integers(1, 50), st.integers(0, 49))
    def test_timesteps(self, steps, start):
        if steps > start + 1:
            with pytest.raises(ConfigError):
                ddim_timesteps(steps, start)
            return
        ts = ddim_timesteps(steps, start)
        assert ts[0] == start and len(ts) == steps
        assert steps == 1 or ts[-1] == 0
        assert all(a > b for a, b in zip(ts, ts[1:]))

    def test_zero_steps(self):
        m = tiny_model()
        with pytest.raises(ConfigError):
            ddim_sample(m, (1, 2, 4, 8, 8), m.conditioner.null_pair(1), None, 0, make_schedule(50), RngState(0))

    def test_clip_keeps_clean_estimate_in_range(self):
        s = make_schedule(50)
        z = torch.randn(1, 1, 4, 4, 4) * 5
        out = ddim_step(z, torch.zeros_like(z), 40, -1, s, clip_x0=1.0)
        assert out.abs().max() <= 1.0

    def test_ddim_bitwise_deterministic(self):
        m = tiny_model(num_timesteps=50)
        s = make_schedule(50)
        with torch.no_grad():
            cond = m.conditioner.encode(torch.tensor([PROMPT]))
        guide = GuidanceConfig(3.0, m.conditioner.null_pair(1))
        a, _ = ddim_sample(m, (1, 3, 4, 8, 8), cond, guide, 5, s, RngState(11))
        b, _ = ddim_sample(m, (1, 3, 4, 8, 8), cond, guide, 5, s, RngState(11))
        assert torch.equal(a, b)

    def test_unit_scale_is_conditional_sampling(self):
        m = tiny_model(num_timesteps=50)
        s = make_schedule(50)
        with torch.no_grad():
            cond = m.conditioner.encode(torch.tensor([PROMPT]))
        a, _ = ddim_sample(m, (1, 2, 4, 8, 8), cond, GuidanceConfig(1.0, m.conditioner.null_pair(1)), 4, s,
                           RngState(2))
        b, _ = ddim_sample(m, (1, 2, 4, 8, 8), cond, None, 4, s, RngState(2))
        assert torch.equal(a, b)

    def test_ddpm_sample_deterministic(self):
        m = tiny_model(num_timesteps=10)
        s = make_schedule(10)
        cond = m.conditioner.null_pair(1)
        a, ra = ddpm_sample(m, (1, 2, 4, 8, 8), cond, None, s, RngState(4))
        b, rb = ddpm_sample(m, (1, 2, 4, 8, 8), cond, None, s, RngState(4))
        assert torch.equal(a, b) and ra == rb


class TestLoss:
    def test_zero_head_loss_is_unit(self):
        m = tiny_model(num_timesteps=50, precondition=False)
        s = make_schedule(50)
        z0 = torch.rand(2, 2, 4, 8, 8) * 2 - 1
        ids = torch.tensor([PROMPT, PROMPT])
        rng, vals = RngState(0), []
        for _ in range(10):
            loss, rng = training_loss(m, z0, ids, None, rng, s)
            vals.append(loss.item())
        n = 10 * z0.numel()
        assert abs(np.mean(vals) - 1.0) < 3 * np.sqrt(2 / n)

    def test_oracle_model_has_zero_loss(self, monkeypatch):
        m = tiny_model(num_timesteps=50)
        s = make_schedule(50)
        z0 = torch.rand(1, 2, 4, 8, 8)

        def forward(inp, t, cond, temporal=True, residues=None):
            ab = torch.tensor(s.alpha_bar)[t].reshape(-1, 1, 1, 1, 1)
            return ((inp.double() - ab.sqrt() * z0.double()) / (1 - ab).sqrt()).float()

        monkeypatch.setattr(m, "forward", forward)
        loss, _ = training_loss(m, z0, torch.tensor([PROMPT]), None, RngState(1), s)
        assert loss.item() < 1e-8

    def test_reproducible_under_fixed_rng(self):
        m = tiny_model(num_timesteps=50)
        s = make_schedule(50)
        z0 = torch.rand(2, 2, 4, 8, 8)
        ids = torch.tensor([PROMPT, PROMPT])
        a, ra = training_loss(m, z0, ids, z0[:, 0], RngState(9), s, p_img=0.5, p_text=0.5)
        b, rb = training_loss(m, z0, ids, z0[:, 0], RngState(9), s, p_img=0.5, p_text=0.5)
        assert torch.equal(a, b) and ra == rb

    def test_masked_model_ignores_given_frame(self):
        m = tiny_model(masked=True, num_timesteps=50, precondition=False)
        s = make_schedule(50)
        z0 = torch.rand(1, 3, 4, 8, 8)
        loss, _ = training_loss(m, z0, torch.tensor([PROMPT]), None, RngState(0), s)
        # zero head: the loss is the mean square of the noise on frames 1..N-1
        _, rng = rng_uniform(RngState(0), 1)
        _, rng = rng_uniform(rng, 2)
        eps, _ = rng_normal(rng, z0.shape)
        assert loss.item() == pytest.approx((eps[:, 1:] ** 2).mean().item(), rel=1e-6)
        with pytest.raises(InputError):
            training_loss(m, z0[:, :1], torch.tensor([PROMPT]), None, RngState(0), s)
