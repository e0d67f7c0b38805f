"""Attention kernels of the multimodal video block.

All three operate on frame features shaped ``[B, N, C, H, W]`` and return the
same shape with a residual connection.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from . import ShapeError
from .numerics import linear, softmax_lastdim


def multihead_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """softmax(QK^T / sqrt(d)) V with queries/keys split head-wise.

    q: [S, Lq, C], k/v: [S, Lk, C] -> [S, Lq, C]
    """
    s, lq, c = q.shape
    if c % heads:
        raise ShapeError(f"{c} channels not divisible by {heads} heads")
    d = c // heads
    q = q.reshape(s, lq, heads, d).transpose(1, 2)
    k = k.reshape(s, k.shape[1], heads, d).transpose(1, 2)
    v = v.reshape(s, v.shape[1], heads, d).transpose(1, 2)
    w = softmax_lastdim(q @ k.transpose(-1, -2) / math.sqrt(d))
    return (w @ v).transpose(1, 2).reshape(s, lq, c)


def frames_to_tokens(x: torch.Tensor) -> torch.Tensor:
    """[B, N, C, H, W] -> [B*N, H*W, C]"""
    b, n, c, h, w = x.shape
    return x.reshape(b * n, c, h * w).transpose(1, 2)


def tokens_to_frames(t: torch.Tensor, shape) -> torch.Tensor:
    b, n, c, h, w = shape
    return t.transpose(1, 2).reshape(b, n, c, h, w)


def _check_frames(x: torch.Tensor, channels: int):
    if x.dim() != 5 or x.shape[2] != channels:
        raise ShapeError(f"expected [B, N, {channels}, H, W], got {tuple(x.shape)}")


def _proj(c_in: int, c_out: int, zero: bool = False) -> nn.Parameter:
    w = torch.zeros(c_out, c_in) if zero else torch.randn(c_out, c_in) / math.sqrt(c_in)
    return nn.Parameter(w)


class SpatialSelfAttention(nn.Module):
    """Per-frame attention over the H*W token axis."""

    def __init__(self, channels: int, heads: int = 1):
        super().__init__()
        if channels % heads:
            raise ShapeError("channels must be divisible by heads")
        self.channels, self.heads = channels, heads
        self.w_q = _proj(channels, channels)
        self.w_k = _proj(channels, channels)
        self.w_v = _proj(channels, channels)
        self.w_out = _proj(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_frames(x, self.channels)
        tok = frames_to_tokens(x)
        a = multihead_attention(linear(tok, self.w_q), linear(tok, self.w_k), linear(tok, self.w_v), self.heads)
        return x + tokens_to_frames(linear(a, self.w_out), x.shape)


class MultimodalCrossAttention(nn.Module):
    """Shared query/output projections with separate key/value pairs for
    text and image tokens; the two attention results are summed.

    With ``image=False`` the layer is plain text cross-attention.
    """

    def __init__(self, channels: int, c_cond: int, heads: int = 1, image: bool = True):
        super().__init__()
        self.channels, self.c_cond, self.heads = channels, c_cond, heads
        self.w_q = _proj(channels, channels)
        self.w_k = _proj(c_cond, channels)
        self.w_v = _proj(c_cond, channels)
        self.w_out = _proj(channels, channels)
        self.image = image
        if image:
            self.w_k_img = _proj(c_cond, channels)
            # zero value projection: a freshly added image branch is a no-op
            self.w_v_img = _proj(c_cond, channels, zero=True)

    def image_term(self, q: torch.Tensor, image_tokens: torch.Tensor) -> torch.Tensor:
        return multihead_attention(q, linear(image_tokens, self.w_k_img), linear(image_tokens, self.w_v_img),
                                   self.heads)

    def forward(self, x: torch.Tensor, text: torch.Tensor, image_tokens: torch.Tensor | None = None) -> torch.Tensor:
        """x: [B, N, C, H, W]; text: [B, L_text, C_cond]; image_tokens: [B, L_img, C_cond]."""
        _check_frames(x, self.channels)
        b, n = x.shape[:2]
        if text.dim() != 3 or text.shape[0] != b or text.shape[-1] != self.c_cond:
            raise ShapeError(f"text embedding {tuple(text.shape)} incompatible with batch {b}, C_cond {self.c_cond}")
        tok = frames_to_tokens(x)
        q = linear(tok, self.w_q)
        # condition tokens duplicated across the N frames
        text = text.repeat_interleave(n, 0)
        a = multihead_attention(q, linear(text, self.w_k), linear(text, self.w_v), self.heads)
        if self.image and image_tokens is not None:
            if image_tokens.dim() != 3 or image_tokens.shape[0] != b or image_tokens.shape[-1] != self.c_cond:
                raise ShapeError(f"image tokens {tuple(image_tokens.shape)} incompatible with the layer")
            a = a + self.image_term(q, image_tokens.repeat_interleave(n, 0))
        return x + tokens_to_frames(linear(a, self.w_out), x.shape)


class TemporalAttention(nn.Module):
    """Attention across frames at each spatial location.

    A learned per-frame-index embedding is added before the projections;
    the output projection starts at zero so the layer starts as the identity.
    """

    def __init__(self, channels: int, heads: int = 1, max_frames: int = 16):
        super().__init__()
        self.channels, self.heads, self.max_frames = channels, heads, max_frames
        self.frame_pos = nn.Parameter(torch.randn(max_frames, channels) * 0.02)
        self.w_q = _proj(channels, channels)
        self.w_k = _proj(channels, channels)
        self.w_v = _proj(channels, channels)
        self.w_out = _proj(channels, channels, zero=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_frames(x, self.channels)
        b, n, c, h, w = x.shape
        if n > self.max_frames:
            raise ShapeError(f"{n} frames exceed the positional table ({self.max_frames})")
        tok = x.permute(0, 3, 4, 1, 2).reshape(b * h * w, n, c)
        inp = tok + self.frame_pos[:n]
        a = multihead_attention(linear(inp, self.w_q), linear(inp, self.w_k), linear(inp, self.w_v), self.heads)
        delta = linear(a, self.w_out).reshape(b, h, w, n, c).permute(0, 3, 4, 1, 2)
        return x + delta
