"""Ablation studies on synthetic data.

* :func:`control_benchmark`: train a control branch on single frames of an
  image model, drop it unchanged into video models built from that image
  model with each block variant, and measure how well samples follow the
  control maps.
* :func:`conditioning_ablation`: animate held-out first frames with text
  only, image condition, masked first-frame input, or both, and score the
  samples against the condition frame.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .apps import animate_batch
from .config import RunConfig
from .control import ControlBranch, control_adherence, edge_map, train_control_branch
from .data import gen_synthetic_dataset, stack_clips
from .diffusion import ddim_sample, make_schedule
from .numerics import RngState
from .train import dataset_for, train_phase
from .unet import MvbUNet, copy_spatial, feature_drift

log = logging.getLogger(__name__)

HELD_OUT_SEED = 999


@dataclass
class BenchSettings:
    """Sizes shared by both studies."""

    widths: tuple = (16, 32)
    num_clips: int = 256
    lr: float = 2e-3
    loss_weight_cap: float = 50.0
    image_steps: int = 500
    image_cond_steps: int = 300
    video_steps: int = 300
    branch_steps: int = 300
    test_clips: int = 8
    sample_steps: int = 20
    seeds: int = 5
    seed: int = 0

    def run_config(self, **kw) -> RunConfig:
        return RunConfig(widths=self.widths, num_clips=self.num_clips, lr=self.lr, seed=self.seed,
                         loss_weight_cap=self.loss_weight_cap, out_dir="", **kw)


@dataclass
class ImageStage:
    """Phase-1 image model and its training data, reused across studies."""

    model: MvbUNet
    frames: torch.Tensor
    captions: torch.Tensor
    seconds: float


def train_image_stage(s: BenchSettings) -> ImageStage:
    t0 = time.perf_counter()
    cfg = s.run_config()
    frames, captions = dataset_for(cfg)
    torch.manual_seed(s.seed)
    model = MvbUNet(**cfg.model_kwargs())
    train_phase(model, frames, captions, 1, s.image_steps, cfg, make_schedule())
    return ImageStage(model, frames, captions, time.perf_counter() - t0)


def video_model(stage: ImageStage, s: BenchSettings, variant: str, masked: bool = False,
                init: MvbUNet | None = None) -> MvbUNet:
    """Build a video model of ``variant`` on top of the image model and run
    the remaining training phases for it."""
    cfg = s.run_config(variant=variant, masked=masked)
    sched = make_schedule()
    torch.manual_seed(s.seed + 2)
    model = MvbUNet(**cfg.model_kwargs())
    copy_spatial(model, stage.model if init is None else init, groups=("spatial", "image"))
    if variant == "mvb" and init is None:
        train_phase(model, stage.frames, stage.captions, 2, s.image_cond_steps, cfg, sched)
    train_phase(model, stage.frames, stage.captions, 3, s.video_steps, cfg, sched)
    return model


# ---------------------------------------------------------------------------
# control compatibility
# ---------------------------------------------------------------------------

@dataclass
class ControlResult:
    adherence: dict = field(default_factory=dict)  # variant -> per-seed list
    baseline: dict = field(default_factory=dict)  # variant -> per-seed list, no control
    drift: dict = field(default_factory=dict)
    image_adherence: list = field(default_factory=list)
    samples: dict = field(default_factory=dict)  # variant -> [B, N, 4, H, W] (seed 0)
    signal: torch.Tensor | None = None
    seconds: float = 0.0

    def mean(self, variant: str) -> float:
        return float(np.mean(self.adherence[variant]))

    def rows(self):
        for v, vals in self.adherence.items():
            for k, a in enumerate(vals):
                base = self.baseline.get(v, [np.nan] * len(vals))[k]
                yield v, k, a, base, self.drift[v]


def control_benchmark(variants=("composed", "composed_fs", "decomposed_fs", "mvb"), s: BenchSettings | None = None,
                      stage: ImageStage | None = None, baseline: bool = False) -> ControlResult:
    """Mean edge-map adherence per variant with an image-trained control branch.

    The image condition of ``mvb`` samples is the clip's own first frame.
    """
    s = s or BenchSettings()
    t0 = time.perf_counter()
    stage = stage or train_image_stage(s)
    sched = make_schedule()
    torch.manual_seed(s.seed + 1)
    branch = ControlBranch(stage.model)
    train_control_branch(stage.model, branch, stage.frames, stage.captions, sched, steps=s.branch_steps,
                         lr=s.lr, seed=s.seed)
    tf, tc = stack_clips(gen_synthetic_dataset(s.test_clips, seed=HELD_OUT_SEED))
    signal = edge_map(tf)
    res = ControlResult(signal=signal)
    for v in variants:
        model = video_model(stage, s, v)
        with torch.no_grad():
            cond = model.conditioner.encode(tc, tf[:, 0] if v == "mvb" else None)
        res.drift[v] = feature_drift(model, stage.model, tf, cond)
        res.adherence[v], res.baseline[v] = [], []
        for k in range(s.seeds):
            out, _ = ddim_sample(model, tf.shape, cond, None, s.sample_steps, sched, RngState(k),
                                 control=(branch, signal))
            res.adherence[v].append(control_adherence(out, signal))
            if k == 0:
                res.samples[v] = out
            if baseline:
                out, _ = ddim_sample(model, tf.shape, cond, None, s.sample_steps, sched, RngState(k))
                res.baseline[v].append(control_adherence(out, signal))
        log.info("%s adherence %.3f drift %.3f", v, res.mean(v), res.drift[v])
    if baseline:
        with torch.no_grad():
            cond = stage.model.conditioner.encode(tc)
        for k in range(s.seeds):
            out, _ = ddim_sample(stage.model, tf.shape, cond, None, s.sample_steps, sched, RngState(k),
                                 control=(branch, signal))
            res.image_adherence.append(control_adherence(out, signal))
    res.seconds = time.perf_counter() - t0 + stage.seconds
    return res


# ---------------------------------------------------------------------------
# conditioning ablation
# ---------------------------------------------------------------------------

ARMS = ("text", "image", "masked", "both")


@dataclass
class ConditioningResult:
    first: dict = field(default_factory=dict)  # arm -> per-seed first-frame MSE
    avg: dict = field(default_factory=dict)  # arm -> per-seed average-frame MSE
    samples: dict = field(default_factory=dict)
    seconds: float = 0.0

    def rows(self):
        for arm in self.first:
            for k, (f, a) in enumerate(zip(self.first[arm], self.avg[arm])):
                yield arm, k, f, a


def _mse_to_condition(video: torch.Tensor, image: torch.Tensor) -> tuple[float, float]:
    err = ((video.double() - image.double()[:, None]) ** 2).mean(dim=(2, 3, 4))  # [B, N]
    return float(err[:, 0].mean()), float(err.mean())


def conditioning_ablation(s: BenchSettings | None = None, stage: ImageStage | None = None) -> ConditioningResult:
    """First-frame and average-frame MSE to the held-out condition frame for
    text only, image condition, masked input, and masked input plus image."""
    s = s or BenchSettings()
    t0 = time.perf_counter()
    stage = stage or train_image_stage(s)
    sched = make_schedule()
    plain = video_model(stage, s, "mvb")
    masked = video_model(stage, s, "mvb", masked=True, init=plain)
    tf, tc = stack_clips(gen_synthetic_dataset(s.test_clips, seed=HELD_OUT_SEED))
    image = tf[:, 0]
    res = ConditioningResult()
    with torch.no_grad():
        c_text = plain.conditioner.encode(tc)
        c_both = plain.conditioner.encode(tc, image)
    for arm in ARMS:
        res.first[arm], res.avg[arm] = [], []
        for k in range(s.seeds):
            if arm in ("text", "image"):
                out, _ = ddim_sample(plain, tf.shape, c_text if arm == "text" else c_both, None, s.sample_steps,
                                     sched, RngState(k))
            else:
                out = animate_batch(masked, image, c_text if arm == "masked" else c_both, tf.shape[1],
                                    s.sample_steps, seed=k)
            f, a = _mse_to_condition(out, image)
            res.first[arm].append(f)
            res.avg[arm].append(a)
            if k == 0:
                res.samples[arm] = out
        log.info("%s first %.4f avg %.4f", arm, np.mean(res.first[arm]), np.mean(res.avg[arm]))
    res.seconds = time.perf_counter() - t0 + stage.seconds
    return res


def conditioning_checks(first: dict, avg: dict) -> dict:
    """Per-seed ordering checks for one set of arm -> value maps.

    ``masked_text_like`` asks that masked-only average error sits closer to
    text-only than to image-only, while its first-frame error stays below
    text-only.
    """
    mid = (avg["image"] + avg["text"]) / 2
    return {
        "first_order": first["both"] <= first["image"] <= first["text"],
        "avg_order": avg["both"] <= avg["image"] <= avg["text"],
        "masked_text_like": avg["masked"] >= mid and first["masked"] < first["text"],
    }


def conditioning_votes(res: ConditioningResult) -> dict:
    """Check name -> number of seeds on which it holds."""
    n = len(res.first["text"])
    votes = {}
    for k in range(n):
        checks = conditioning_checks({a: res.first[a][k] for a in ARMS}, {a: res.avg[a][k] for a in ARMS})
        for name, ok in checks.items():
            votes[name] = votes.get(name, 0) + int(ok)
    return votes
