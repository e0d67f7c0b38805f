"""Linear-beta DDPM schedule, forward noising, epsilon-prediction losses,
classifier-free guidance and DDPM/DDIM samplers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import ConfigError, InputError, ShapeError
from .conditioning import ConditionPair
from .numerics import RngState, rng_normal, rng_uniform
from .schedule import DiffusionSchedule, make_schedule  # noqa: F401
from .unet import MvbUNet, build_masked_input


def _coef(values, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(np.asarray(values, dtype=np.float64)).to(like.dtype)
    return v.reshape(-1, *([1] * (like.dim() - 1))) if v.dim() else v


def _check_t(t, sched: DiffusionSchedule):
    arr = np.asarray(t)
    if (arr < 0).any() or (arr >= sched.T).any():
        raise InputError(f"timestep outside [0, {sched.T})")
    return arr


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """sqrt(ab_t) z0 + sqrt(1 - ab_t) eps; ``t`` scalar or one per batch element."""
    if eps.shape != z0.shape:
        raise ShapeError("eps must match z0")
    ab = sched.alpha_bar[_check_t(t, sched)]
    return _coef(np.sqrt(ab), z0) * z0 + _coef(np.sqrt(1.0 - ab), z0) * eps


def cfg_epsilon(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, s: float) -> torch.Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError("guidance branches disagree in shape")
    if s == 1:
        return eps_cond
    if s == 0:
        return eps_uncond
    return eps_uncond + s * (eps_cond - eps_uncond)


@dataclass
class GuidanceConfig:
    scale: float
    uncond: ConditionPair

    def __post_init__(self):
        if self.scale < 0:
            raise ConfigError("guidance scale must be non-negative")
        if not (bool(self.uncond.text.is_null.all()) and bool(self.uncond.image.is_null.all())):
            raise ConfigError("unconditional branch must null both conditions")


# ---------------------------------------------------------------------------
# training objective
# ---------------------------------------------------------------------------

def training_loss(
    model: MvbUNet,
    z0: torch.Tensor,
    token_ids: torch.Tensor,
    image_latent: torch.Tensor | None,
    rng: RngState,
    sched: DiffusionSchedule,
    p_img: float = 0.0,
    p_text: float = 0.0,
    temporal: bool = True,
    weight_cap: float = 1.0,
) -> tuple[torch.Tensor, RngState]:
    """Epsilon-prediction MSE for one batch.

    With ``weight_cap > 1`` each sample's error is weighted by
    ``clamp((1 - abar_t) / abar_t, 1, weight_cap)``, i.e. the x0 error up to
    a cap, which keeps gradients alive at high noise levels.

    Draw order: B timesteps, 2B dropout uniforms, then the noise tensor.
    Masked (9-channel) models receive frame 0 as the given frame and its
    latent channels are left out of the loss. ``temporal=False`` trains the
    per-frame image model; masked models then see an empty first-frame slot
    and an all-ones mask.
    """
    b, n = z0.shape[:2]
    u, rng = rng_uniform(rng, b)
    t = np.minimum((u * sched.T).astype(np.int64), sched.T - 1)
    cond = model.conditioner.encode(token_ids, image_latent)
    cond, rng = model.conditioner.drop(cond, rng, p_img, p_text)
    eps, rng = rng_normal(rng, z0.shape)
    z_t = q_sample(z0, t, eps, sched)
    if model.in_channels == 9 and not temporal:
        h, w = z_t.shape[-2:]
        inp = torch.cat([z_t, torch.zeros_like(z_t), torch.ones(b, n, 1, h, w, dtype=z_t.dtype)], dim=2)
        eps_hat = model(inp, torch.from_numpy(t), cond, temporal)
        sq = (eps - eps_hat) ** 2
    elif model.in_channels == 9:
        if n < 2:
            raise InputError("masked training needs at least two frames")
        given = [True] + [False] * (n - 1)
        eps_hat = model(build_masked_input(z_t, z0[:, 0], given), torch.from_numpy(t), cond, temporal)
        sq = (eps - eps_hat)[:, 1:] ** 2
    else:
        eps_hat = model(z_t, torch.from_numpy(t), cond, temporal)
        sq = (eps - eps_hat) ** 2
    if weight_cap <= 1.0:
        return sq.mean(), rng
    ab = torch.as_tensor(sched.alpha_bar[t], dtype=sq.dtype)
    w = ((1 - ab) / ab).clamp(1.0, weight_cap)
    return (w * sq.flatten(1).mean(dim=1)).sum() / w.sum(), rng


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def ddpm_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, rng: RngState, sched: DiffusionSchedule):
    """Ancestral step t -> t-1; returns (z_prev, rng). No noise drawn at t = 0."""
    if t < 0 or t >= sched.T:
        raise InputError(f"timestep {t} outside [0, {sched.T})")
    a, b, ab = sched.alpha[t], sched.beta[t], sched.alpha_bar[t]
    z64 = z_t.double()
    mean = (z64 - (b / np.sqrt(1.0 - ab)) * eps_hat.double()) / np.sqrt(a)
    if t == 0:
        return mean.to(z_t.dtype), rng
    var = b * (1.0 - sched.alpha_bar[t - 1]) / (1.0 - ab)
    noise, rng = rng_normal(rng, z_t.shape)
    return (mean + np.sqrt(var) * noise.double()).to(z_t.dtype), rng


def ddim_timesteps(steps: int, t_start: int) -> list[int]:
    """``steps`` uniformly strided indices from t_start down to 0 (just
    ``[t_start]`` for a single step)."""
    if steps < 1:
        raise ConfigError("steps must be at least 1")
    if steps > t_start + 1:
        raise ConfigError(f"{steps} steps exceed the {t_start + 1} available timesteps")
    ts = np.unique(np.round(np.linspace(t_start, 0, steps)).astype(np.int64))[::-1]
    return [int(t) for t in ts]


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, sched: DiffusionSchedule,
              clip_x0: float | None = None):
    """eta = 0 update; ``t_prev = -1`` returns the clean estimate.

    With ``clip_x0`` the clean estimate is clamped to ``[-clip_x0, clip_x0]``
    and the noise direction recomputed from it.
    """
    ab_t, ab_p = float(sched.ab(t)), float(sched.ab(t_prev))
    z64, e64 = z_t.double(), eps_hat.double()
    x0 = (z64 - np.sqrt(1.0 - ab_t) * e64) / np.sqrt(ab_t)
    if clip_x0 is not None:
        x0 = x0.clamp(-clip_x0, clip_x0)
        e64 = (z64 - np.sqrt(ab_t) * x0) / np.sqrt(1.0 - ab_t)
    return (np.sqrt(ab_p) * x0 + np.sqrt(1.0 - ab_p) * e64).to(z_t.dtype)


EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


def ddim_loop(
    eps_fn: EpsFn,
    z: torch.Tensor,
    timesteps: list[int],
    sched: DiffusionSchedule,
    clamp: Callable[[torch.Tensor, int], torch.Tensor] | None = None,
    clip_x0: float | None = None,
) -> torch.Tensor:
    """Run DDIM over ``timesteps`` (descending). ``clamp(z, t)`` may overwrite
    known content before every model call and once more at t = -1."""
    for k, t in enumerate(timesteps):
        if clamp is not None:
            z = clamp(z, t)
        with torch.no_grad():
            eps = eps_fn(z, t)
        t_prev = timesteps[k + 1] if k + 1 < len(timesteps) else -1
        z = ddim_step(z, eps, t, t_prev, sched, clip_x0)
    if clamp is not None:
        z = clamp(z, -1)
    return z


def guided_eps_fn(
    model: MvbUNet,
    cond: ConditionPair,
    guidance: GuidanceConfig | None,
    first_frame: torch.Tensor | None = None,
    control=None,
) -> EpsFn:
    """Build the per-step noise predictor: optional masked input, optional
    control residues, classifier-free guidance over (cond, both-null)."""

    def one(z, t, c):
        inp = z
        if model.in_channels == 9:
            if first_frame is None:
                raise ConfigError("a 9-channel model needs a first frame")
            given = [True] + [False] * (z.shape[1] - 1)
            inp = build_masked_input(z, first_frame, given)
        if control is not None:
            branch, signal = control
            residues = branch(signal, z, t, c)
            return model(inp, t, c, residues=residues)
        return model(inp, t, c)

    def eps_fn(z, t):
        e_c = one(z, t, cond)
        if guidance is None or guidance.scale == 1:
            return e_c
        e_u = one(z, t, guidance.uncond)
        return cfg_epsilon(e_c, e_u, guidance.scale)

    return eps_fn


def ddim_sample(
    model: MvbUNet,
    shape,
    cond: ConditionPair,
    guidance: GuidanceConfig | None,
    steps: int,
    sched: DiffusionSchedule,
    rng: RngState,
    clip_x0: float | None = 1.0,
    clamp=None,
    **kw,
) -> tuple[torch.Tensor, RngState]:
    """Deterministic (eta = 0) sampling from fresh noise ``z_T``.

    The clean estimate is clipped to the latent range ``[-1, 1]`` by default.
    Extra keywords (``first_frame``, ``control``) go to :func:`guided_eps_fn`.
    """
    if steps < 1:
        raise ConfigError("steps must be at least 1")
    z, rng = rng_normal(rng, shape)
    eps_fn = guided_eps_fn(model, cond, guidance, **kw)
    return ddim_loop(eps_fn, z, ddim_timesteps(steps, sched.T - 1), sched, clamp, clip_x0), rng


def ddpm_sample(
    model: MvbUNet,
    shape,
    cond: ConditionPair,
    guidance: GuidanceConfig | None,
    sched: DiffusionSchedule,
    rng: RngState,
    **kw,
) -> tuple[torch.Tensor, RngState]:
    """Full ancestral sampling over all T steps."""
    z, rng = rng_normal(rng, shape)
    eps_fn = guided_eps_fn(model, cond, guidance, **kw)
    for t in reversed(range(sched.T)):
        with torch.no_grad():
            eps = eps_fn(z, t)
        z, rng = ddpm_step(z, eps, t, rng, sched)
    return z, rng
