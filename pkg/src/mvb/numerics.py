"""Dense tensor primitives, a counter-based RNG and a finite-difference
gradient oracle.

Tensors are ``torch.Tensor`` (float32 storage, autograd for reverse-mode
gradients). Reductions that feed normalization statistics accumulate in
float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import ShapeError

_MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / float(1 << 53)


# ---------------------------------------------------------------------------
# elementwise / affine ops
# ---------------------------------------------------------------------------

def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with max-subtraction."""
    if x.numel() == 0 or x.dim() == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {tuple(x.shape)}")
    shifted = x - x.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` over the last axis."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input last dim {x.shape[-1]} vs weight {tuple(weight.shape)}"
        )
    if bias is not None and bias.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: bias {tuple(bias.shape)} vs weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def group_norm(
    x: torch.Tensor, groups: int, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    """Group normalization over ``[B, C, *spatial]``; statistics in float64."""
    if x.dim() < 2:
        raise ShapeError("group_norm expects [B, C, ...]")
    if eps <= 0:
        raise ValueError("eps must be positive")
    b, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    xg = x.reshape(b, groups, -1).to(torch.float64)
    mean = xg.mean(dim=-1, keepdim=True)
    var = ((xg - mean) ** 2).mean(dim=-1, keepdim=True)
    y = ((xg - mean) / torch.sqrt(var + eps)).reshape(x.shape).to(x.dtype)
    shape = (1, c) + (1,) * (x.dim() - 2)
    return y * gamma.reshape(shape) + beta.reshape(shape)


def conv2d_3x3(
    x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None, stride: int = 1
) -> torch.Tensor:
    """3x3 convolution, padding 1, stride 1 (or 2 for downsampling)."""
    if x.dim() != 4:
        raise ShapeError(f"conv2d_3x3 expects [B, C, H, W], got {tuple(x.shape)}")
    if kernel.shape[1:] != (x.shape[1], 3, 3):
        raise ShapeError(f"kernel {tuple(kernel.shape)} does not match {x.shape[1]} input channels")
    return F.conv2d(x, kernel, bias, stride=stride, padding=1)


# ---------------------------------------------------------------------------
# counter-based RNG
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngState:
    """Immutable (seed, counter) pair. Draw ``k`` of a stream lives at
    position ``counter + k`` regardless of how draws are batched."""

    seed: int
    counter: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "counter", int(self.counter) & _MASK64)

    def advance(self, n: int) -> "RngState":
        return RngState(self.seed, self.counter + n)


def _raw_pairs(state: RngState, n: int) -> np.ndarray:
    # two Philox4x64 words per draw; word j sits in block j // 4
    start = 2 * state.counter
    block, offset = divmod(start, 4)
    gen = np.random.Philox(key=state.seed, counter=block)
    words = gen.random_raw(offset + 2 * n)[offset:]
    return words.reshape(n, 2)


def rng_uniform(state: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """``n`` float64 uniforms in [0, 1); advances the counter by ``n``."""
    if n == 0:
        return np.zeros(0), state
    w = _raw_pairs(state, n)[:, 0]
    return (w >> np.uint64(11)).astype(np.float64) * _INV_2_53, state.advance(n)


def rng_normal(state: RngState, shape: Sequence[int]) -> tuple[torch.Tensor, RngState]:
    """I.i.d. standard normals (Box-Muller, one draw per pair of words)."""
    shape = tuple(int(s) for s in shape)
    n = math.prod(shape)
    if n == 0:
        return torch.zeros(shape), state
    w = _raw_pairs(state, n)
    u1 = ((w[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
    u2 = (w[:, 1] >> np.uint64(11)).astype(np.float64) * _INV_2_53
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return torch.from_numpy(z.astype(np.float32)).reshape(shape), state.advance(n)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` is re-evaluated with each coordinate of ``params`` nudged by ``±h``;
    parameters are temporarily promoted to float64 so both routes run in
    widened precision. ``max_coords`` optionally caps the coordinates probed
    per tensor (chosen deterministically from ``seed``); ``None`` probes all.
    """
    if not 0 < h <= 1e-2:
        raise ValueError("h must lie in (0, 1e-2]")
    params = list(params)
    dtypes = [p.dtype for p in params]
    for p in params:
        p.data = p.data.to(torch.float64)
        p.grad = None
    try:
        out = f()
        if out.numel() != 1 or not torch.isfinite(out).all():
            raise ArithmeticError("grad_check: f must return one finite scalar")
        grads = torch.autograd.grad(out, params, allow_unused=True)
        worst = 0.0
        rng = np.random.default_rng(seed)
        with torch.no_grad():
            for p, g in zip(params, grads):
                g = torch.zeros_like(p) if g is None else g
                flat = p.data.view(-1)
                idx = np.arange(flat.numel())
                if max_coords is not None and flat.numel() > max_coords:
                    idx = np.sort(rng.choice(flat.numel(), size=max_coords, replace=False))
                gflat = g.reshape(-1)
                for i in idx:
                    orig = flat[i].item()
                    flat[i] = orig + h
                    fp = f().item()
                    flat[i] = orig - h
                    fm = f().item()
                    flat[i] = orig
                    if not (math.isfinite(fp) and math.isfinite(fm)):
                        raise ArithmeticError("grad_check: f became non-finite")
                    fd = (fp - fm) / (2.0 * h)
                    a = gflat[i].item()
                    worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
        return worst
    finally:
        for p, dt in zip(params, dtypes):
            p.data = p.data.to(dt)
            p.grad = None
