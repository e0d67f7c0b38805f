"""Synthetic moving-shape clips rendered analytically into a 4-channel latent.

Channels: occupancy, colour-x, colour-y, edge band, all in [-1, 1].
Captions encode shape, motion, colour and motion direction, so the text
condition genuinely predicts everything except position and size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

SHAPES = ("square", "circle", "triangle")
MOTIONS = ("translate", "scale", "rotate")
N_COLORS = 8
DIRECTIONS = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))

COLOR_NAMES = ("red", "orange", "yellow", "green", "cyan", "blue", "purple", "magenta")
DIRECTION_NAMES = ("right", "down-right", "down", "down-left", "left", "up-left", "up", "up-right")
SCALE_NAMES = ("grow", "shrink")
ROTATE_NAMES = ("spin-pos", "spin-neg")

# token layout (vocabulary 64, 0 = pad)
TOK_SHAPE, TOK_MOTION, TOK_COLOR, TOK_DIR, TOK_SCALE, TOK_ROT = 1, 4, 7, 15, 23, 25


@dataclass
class SyntheticClip:
    frames: torch.Tensor  # [N, 4, H, W]
    caption_ids: list[int]
    shape_kind: str
    motion: str
    color_code: int
    params: dict = field(default_factory=dict)


def _sdf(kind: str, px, py, cx, cy, r, angle):
    x, y = px - cx, py - cy
    c, s = np.cos(angle), np.sin(angle)
    x, y = c * x + s * y, -s * x + c * y
    if kind == "circle":
        return np.hypot(x, y) - r
    if kind == "square":
        h = r / np.sqrt(2.0) * 1.15
        qx, qy = np.abs(x) - h, np.abs(y) - h
        outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
        return outside + np.minimum(np.maximum(qx, qy), 0)
    if kind == "triangle":
        # equilateral triangle, circumradius ~ 1.25 r, pointing up
        k = np.sqrt(3.0)
        a = 1.25 * r * k / 2
        x = np.abs(x) - a
        y = -y + a / k
        flip = x + k * y > 0
        x, y = np.where(flip, (x - k * y) / 2, x), np.where(flip, (-k * x - y) / 2, y)
        x = x - np.clip(x, -2 * a, 0)
        return -np.hypot(x, y) * np.sign(y)
    raise ValueError(f"unknown shape {kind!r}")


def render_frame(kind: str, cx: float, cy: float, r: float, angle: float, color_code: int,
                 height: int = 16, width: int = 16) -> np.ndarray:
    py, px = np.mgrid[0:height, 0:width].astype(np.float64)
    d = _sdf(kind, px, py, cx, cy, r, angle)
    occ = np.clip(0.5 - d, 0.0, 1.0)
    edge = np.clip(1.0 - np.abs(d), 0.0, 1.0)
    theta = 2 * np.pi * color_code / N_COLORS
    out = np.stack([2 * occ - 1, occ * np.cos(theta), occ * np.sin(theta), 2 * edge - 1])
    return out.astype(np.float32)


def caption_for(kind: str, motion: str, color_code: int, motion_arg: int, length: int = 8) -> list[int]:
    ids = [TOK_SHAPE + SHAPES.index(kind), TOK_MOTION + MOTIONS.index(motion), TOK_COLOR + color_code]
    ids.append({"translate": TOK_DIR, "scale": TOK_SCALE, "rotate": TOK_ROT}[motion] + motion_arg)
    return ids + [0] * (length - len(ids))


def parse_prompt(text: str, length: int = 8) -> list[int]:
    """Caption ids from words (``"red circle translate up-left"``) or from
    whitespace-separated integer ids."""
    words = text.lower().replace(",", " ").split()
    if words and all(w.lstrip("-").isdigit() for w in words):
        ids = [int(w) for w in words]
        if len(ids) > length:
            raise ValueError(f"prompt longer than {length} tokens")
        return ids + [0] * (length - len(ids))
    vocab = {}
    for names, base in ((SHAPES, TOK_SHAPE), (MOTIONS, TOK_MOTION), (COLOR_NAMES, TOK_COLOR),
                        (DIRECTION_NAMES, TOK_DIR), (SCALE_NAMES, TOK_SCALE), (ROTATE_NAMES, TOK_ROT)):
        vocab.update({n: base + i for i, n in enumerate(names)})
    order = {"shape": 0, "motion": 1, "color": 2, "arg": 3}
    slots = [0, 0, 0, 0]
    for w in words:
        if w not in vocab:
            raise ValueError(f"unknown prompt word {w!r}")
        tok = vocab[w]
        kind = ("shape" if tok < TOK_MOTION else "motion" if tok < TOK_COLOR else
                "color" if tok < TOK_DIR else "arg")
        slots[order[kind]] = tok
    ids = [t for t in slots if t]
    return ids + [0] * (length - len(ids))


def make_clip(rng: np.random.Generator, frames: int = 8, height: int = 16, width: int = 16,
              kind: str | None = None, motion: str | None = None, color_code: int | None = None) -> SyntheticClip:
    kind = SHAPES[rng.integers(3)] if kind is None else kind
    motion = MOTIONS[rng.integers(3)] if motion is None else motion
    color_code = int(rng.integers(N_COLORS)) if color_code is None else color_code
    size = min(height, width)
    r0 = rng.uniform(0.17, 0.23) * size
    angle0 = rng.uniform(0, np.pi / 2)
    span = frames - 1
    vx = vy = 0
    growth = omega = 0.0
    if motion == "translate":
        arg = int(rng.integers(len(DIRECTIONS)))
        vx, vy = DIRECTIONS[arg]
        step = max(1, int(size // 16))
        vx, vy = vx * step, vy * step
        r0 = min(r0, (size - 2 - abs(vx) * span) / 2 - 0.5) if span else r0
    elif motion == "scale":
        arg = int(rng.integers(2))
        growth = (0.06 if arg == 0 else -0.06)
    else:
        arg = int(rng.integers(2))
        omega = 0.25 if arg == 0 else -0.25
    r_max = r0 * (1 + max(growth * span, 0)) * 1.3

    def centre_range(v, extent):
        lo = r_max + 0.5 - min(0, v * span)
        hi = extent - 1.5 - r_max - max(0, v * span)
        return (lo, hi) if hi >= lo else ((lo + hi) / 2, (lo + hi) / 2)

    cx0 = rng.uniform(*centre_range(vx, width))
    cy0 = rng.uniform(*centre_range(vy, height))
    out = np.empty((frames, 4, height, width), dtype=np.float32)
    for k in range(frames):
        out[k] = render_frame(kind, cx0 + k * vx, cy0 + k * vy, r0 * (1 + growth * k), angle0 + omega * k,
                              color_code, height, width)
    params = dict(cx=cx0, cy=cy0, r=r0, angle=angle0, vx=vx, vy=vy, growth=growth, omega=omega)
    return SyntheticClip(torch.from_numpy(out), caption_for(kind, motion, color_code, arg), kind, motion,
                         color_code, params)


def gen_synthetic_dataset(count: int, frames: int = 8, height: int = 16, width: int = 16,
                          seed: int = 0) -> list[SyntheticClip]:
    """Deterministic clips; clip ``i`` depends only on ``(seed, i)``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    return [make_clip(np.random.default_rng([seed, i]), frames, height, width) for i in range(count)]


def stack_clips(clips: list[SyntheticClip]) -> tuple[torch.Tensor, torch.Tensor]:
    """-> (frames [B, N, 4, H, W], caption ids [B, L])"""
    return (torch.stack([c.frames for c in clips]),
            torch.tensor([c.caption_ids for c in clips], dtype=torch.long))
