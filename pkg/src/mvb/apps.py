"""Sampling pipelines built on a trained model: image animation, video
editing by noising and re-denoising, and zero-shot customized generation.

All pipelines take and return single clips ``[N, 4, H, W]`` and never touch
model parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import ConfigError, InputError, ShapeError
from .conditioning import ConditionPair
from .diffusion import (DiffusionSchedule, GuidanceConfig, ddim_loop, ddim_sample, ddim_timesteps,
                        guided_eps_fn, make_schedule, q_sample)
from .numerics import RngState, rng_normal
from .unet import MvbUNet


def _schedule(model: MvbUNet) -> DiffusionSchedule:
    c = model.config
    return make_schedule(c["num_timesteps"], c["beta_start"], c["beta_end"])


def _guidance(model: MvbUNet, scale: float) -> GuidanceConfig | None:
    return None if scale == 1 else GuidanceConfig(scale, model.conditioner.null_pair(1))


def _condition(model: MvbUNet, cond, text_ids, image) -> ConditionPair:
    if cond is not None:
        if cond.batch != 1:
            raise ShapeError("pipelines take one condition pair (batch 1)")
        return cond
    if text_ids is None:
        raise InputError("give either a condition pair or text token ids")
    ids = torch.as_tensor(text_ids, dtype=torch.long).reshape(1, -1)
    with torch.no_grad():
        return model.conditioner.encode(ids, None if image is None else image[None])


@dataclass
class AnimationRequest:
    """Animate ``first_frame`` [4, H, W]. Without ``cond`` the pair is built
    from ``text_ids`` and the first frame as image condition."""

    first_frame: torch.Tensor
    text_ids: list | None = None
    cond: ConditionPair | None = None
    frames: int = 8
    steps: int = 20
    seed: int = 0
    guidance_scale: float = 1.0

    def __post_init__(self):
        if self.frames < 2:
            raise ConfigError("animation needs at least two frames")
        if self.first_frame.dim() != 3 or self.first_frame.shape[0] != 4:
            raise ShapeError(f"first frame must be [4, H, W], got {tuple(self.first_frame.shape)}")


def animate_image(model: MvbUNet, req: AnimationRequest, on_step=None) -> torch.Tensor:
    """Masked-input sampling with frame 0 clamped to the noised first frame.

    Before each model call frame 0 is reset to ``q_sample(first_frame, t)``
    using the frame-0 slice of the initial noise, and at the end to the first
    frame itself. ``on_step(z, t)`` sees the clamped latent at every step.
    """
    f0 = req.first_frame.to(torch.float32)
    cond = _condition(model, req.cond, req.text_ids, f0)
    return animate_batch(model, f0[None], cond, req.frames, req.steps, req.seed, req.guidance_scale, on_step)[0]


def animate_batch(model: MvbUNet, first_frames: torch.Tensor, cond: ConditionPair, frames: int = 8,
                  steps: int = 20, seed: int = 0, guidance_scale: float = 1.0, on_step=None) -> torch.Tensor:
    """Batched :func:`animate_image`: first_frames [B, 4, H, W] -> [B, N, 4, H, W]."""
    if model.in_channels != 9:
        raise ConfigError("animation needs a 9-channel (masked input) model")
    if frames < 2:
        raise ConfigError("animation needs at least two frames")
    sched = _schedule(model)
    b = first_frames.shape[0]
    z, _ = rng_normal(RngState(seed), (b, frames, 4, *first_frames.shape[-2:]))
    eps0 = z[:, 0].clone()

    def clamp(x, t):
        x = x.clone()
        x[:, 0] = first_frames if t < 0 else q_sample(first_frames, t, eps0, sched)
        if on_step is not None:
            on_step(x, t)
        return x

    guidance = None if guidance_scale == 1 else GuidanceConfig(guidance_scale, model.conditioner.null_pair(b))
    eps_fn = guided_eps_fn(model, cond, guidance, first_frame=first_frames)
    return ddim_loop(eps_fn, z, ddim_timesteps(steps, sched.T - 1), sched, clamp, clip_x0=1.0)


@dataclass
class EditRequest:
    """Re-generate ``source`` [N, 4, H, W] from noise level ``strength``."""

    source: torch.Tensor
    strength: float = 0.6
    text_ids: list | None = None
    image: torch.Tensor | None = None
    cond: ConditionPair | None = None
    steps: int = 20
    seed: int = 0
    guidance_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError(f"strength must lie in [0, 1], got {self.strength}")
        if self.source.dim() != 4 or self.source.shape[1] != 4:
            raise ShapeError(f"source must be [N, 4, H, W], got {tuple(self.source.shape)}")


def edit_start(strength: float, T: int) -> int:
    return int(round(strength * (T - 1)))


def edit_video(model: MvbUNet, req: EditRequest) -> torch.Tensor:
    """Noise the source to ``t* = round(strength (T - 1))`` with independent
    per-frame noise and run DDIM from ``t*`` under the new conditions."""
    if req.strength == 0:
        return req.source.clone()
    sched = _schedule(model)
    t_star = edit_start(req.strength, sched.T)
    src = req.source.to(torch.float32)[None]
    cond = _condition(model, req.cond, req.text_ids, req.image)
    eps, _ = rng_normal(RngState(req.seed), src.shape)
    z = q_sample(src, t_star, eps, sched)
    kw = {"first_frame": src[:, 0]} if model.in_channels == 9 else {}
    eps_fn = guided_eps_fn(model, cond, _guidance(model, req.guidance_scale), **kw)
    timesteps = ddim_timesteps(min(req.steps, t_star + 1), t_star)
    return ddim_loop(eps_fn, z, timesteps, sched, clip_x0=1.0)[0]


def customized_generation(model: MvbUNet, image_condition: torch.Tensor | None, text_ids, steps: int = 20,
                          seed: int = 0, frames: int = 8, guidance_scale: float = 1.0) -> torch.Tensor:
    """Sample a clip whose subject follows ``image_condition`` [4, H, W]
    (``None`` for the null image), with no per-subject training."""
    if model.in_channels == 9:
        raise ConfigError("customized generation uses a 4-channel model")
    sched = _schedule(model)
    img = None if image_condition is None else image_condition.to(torch.float32)
    cond = _condition(model, None, text_ids, img)
    shape = (1, frames, 4, model.size, model.size)
    out, _ = ddim_sample(model, shape, cond, _guidance(model, guidance_scale), steps, sched, RngState(seed))
    return out[0]


def sample_video(model: MvbUNet, text_ids, image=None, frames: int = 8, steps: int = 20, seed: int = 0,
                 guidance_scale: float = 1.0, control: torch.Tensor | None = None, branch=None) -> torch.Tensor:
    """Plain text(+image) to video; optional control maps [N, 1, H, W] with a branch."""
    sched = _schedule(model)
    img = None if image is None else image.to(torch.float32)
    cond = _condition(model, None, text_ids, img)
    shape = (1, frames, 4, model.size, model.size)
    kw = {}
    if control is not None:
        if branch is None:
            raise ConfigError("control maps need a control branch")
        kw["control"] = (branch, control[None])
    if model.in_channels == 9:
        if img is None:
            raise ConfigError("a 9-channel model needs a first frame (image)")
        if control is not None:
            raise ConfigError("control maps are not supported for animation")
        return animate_batch(model, img[None], cond, frames, steps, seed, guidance_scale)[0]
    out, _ = ddim_sample(model, shape, cond, _guidance(model, guidance_scale), steps, sched, RngState(seed), **kw)
    return out[0]


def frame_mse(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(np.mean((a.double().numpy() - b.double().numpy()) ** 2))
