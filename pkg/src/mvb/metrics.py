"""Latent-space evaluation: reconstruction errors against a reference,
frame-to-frame consistency, and caption adherence via a frozen probe."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import ShapeError
from .data import N_COLORS, SHAPES, TOK_COLOR, TOK_SHAPE, SyntheticClip, gen_synthetic_dataset, stack_clips


@dataclass
class MetricRecord:
    first_frame_mse: float
    avg_frame_mse: float
    temporal_consistency: float
    probe_accuracy: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


class FrameProbe(nn.Module):
    """Per-frame classifier for shape kind and colour code."""

    def __init__(self, hidden: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(4, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * hidden, 2 * hidden, 3, padding=1), nn.SiLU(),
            nn.AdaptiveMaxPool2d(1), nn.Flatten(),
        )
        self.shape_head = nn.Linear(2 * hidden, len(SHAPES))
        self.color_head = nn.Linear(2 * hidden, N_COLORS)

    def forward(self, x):
        h = self.body(x)
        return self.shape_head(h), self.color_head(h)

    def predict(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        with torch.no_grad():
            s, c = self(frames.reshape(-1, *frames.shape[-3:]))
        return s.argmax(-1), c.argmax(-1)


def caption_labels(caption_ids) -> tuple[int, int]:
    ids = list(caption_ids)
    return ids[0] - TOK_SHAPE, ids[2] - TOK_COLOR


def train_probe(clips: int = 512, steps: int = 1200, seed: int = 0, size: int = 16) -> FrameProbe:
    """Fit the probe on renderer output until it classifies its training set exactly."""
    frames, caps = stack_clips(gen_synthetic_dataset(clips, 8, size, size, seed=10_000 + seed))
    x = frames.reshape(-1, 4, size, size)
    labels = np.array([caption_labels(c) for c in caps.tolist()])
    ys = torch.from_numpy(np.repeat(labels[:, 0], frames.shape[1]))
    yc = torch.from_numpy(np.repeat(labels[:, 1], frames.shape[1]))
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        probe = FrameProbe()
    opt = torch.optim.Adam(probe.parameters(), lr=3e-3)
    decay = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    for _ in range(steps):
        idx = torch.randint(0, x.shape[0], (128,), generator=gen)
        s, c = probe(x[idx])
        loss = F.cross_entropy(s, ys[idx]) + F.cross_entropy(c, yc[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        decay.step()
    probe.eval()
    for p in probe.parameters():
        p.requires_grad_(False)
    return probe


@lru_cache(maxsize=4)
def default_probe(size: int = 16) -> FrameProbe:
    return train_probe(size=size)


def probe_accuracy(frames: torch.Tensor, caption_ids, probe: FrameProbe | None = None) -> float:
    """Fraction of frames whose shape and colour both match the caption."""
    probe = default_probe(frames.shape[-1]) if probe is None else probe
    s, c = probe.predict(frames)
    shape, color = caption_labels(caption_ids)
    return float(((s == shape) & (c == color)).double().mean())


def temporal_consistency(frames: torch.Tensor) -> float:
    """Mean MSE between consecutive frames of [N, C, H, W]."""
    if frames.shape[0] < 2:
        return 0.0
    f = frames.double()
    return float(((f[1:] - f[:-1]) ** 2).mean())


def eval_metrics(generated: torch.Tensor, reference, caption_ids=None, probe: FrameProbe | None = None) -> MetricRecord:
    """Score one generated clip [N, 4, H, W].

    ``reference`` is either a :class:`SyntheticClip` (frame-by-frame errors,
    caption taken from the clip) or a condition image [4, H, W] that every
    frame is compared with. The probe term needs caption ids.
    """
    g = generated.double()
    if isinstance(reference, SyntheticClip):
        ref = reference.frames.double()
        if ref.shape != g.shape:
            raise ShapeError(f"reference clip {tuple(ref.shape)} vs generated {tuple(g.shape)}")
        caption_ids = reference.caption_ids if caption_ids is None else caption_ids
    else:
        if reference.shape != g.shape[1:]:
            raise ShapeError(f"condition image {tuple(reference.shape)} vs frames {tuple(g.shape[1:])}")
        ref = reference.double()[None].expand_as(g)
    err = ((g - ref) ** 2).flatten(1).mean(dim=1)
    acc = None if caption_ids is None else probe_accuracy(generated, caption_ids, probe)
    return MetricRecord(float(err[0]), float(err.mean()), temporal_consistency(generated), acc)
