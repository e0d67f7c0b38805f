"""Three-phase training recipe.

1. image model: single frames, text only (all spatial weights)
2. image cross-attention: single frames, spatial weights frozen,
   condition dropout (image 25%, text 10%)
3. video: full clips, only temporal layers (and the mask head for
   9-channel models) train; ``composed`` instead fine-tunes everything
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .conditioning import read_prompt_file, write_prompt_file
from .config import RunConfig, save_config
from .data import SyntheticClip, gen_synthetic_dataset, stack_clips
from .diffusion import DiffusionSchedule, make_schedule, training_loss
from .formats import load_checkpoint, load_clip, save_checkpoint, save_clip
from .numerics import RngState
from .unet import MvbUNet, trainable_groups

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: MvbUNet
    losses: list = field(default_factory=list)  # (step, phase, loss)
    checkpoints: dict = field(default_factory=dict)  # phase -> path

    def phase_losses(self, phase: int) -> np.ndarray:
        return np.array([l for _, p, l in self.losses if p == phase])


def save_dataset(clips: list[SyntheticClip], directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, clip in enumerate(clips):
        save_clip(clip.frames, d / f"clip_{i:04d}.mvbclip")
    write_prompt_file(d / "captions.txt", [c.caption_ids for c in clips])


def load_dataset(directory: str | Path, text_len: int = 8) -> tuple[torch.Tensor, torch.Tensor]:
    d = Path(directory)
    files = sorted(d.glob("clip_*.mvbclip"))
    if not d.is_dir() or not files:
        raise FileNotFoundError(f"no dataset at {d}")
    captions = read_prompt_file(d / "captions.txt", text_len)
    if len(captions) != len(files):
        raise FileNotFoundError(f"{d}: {len(files)} clips but {len(captions)} captions")
    return torch.stack([load_clip(f) for f in files]), torch.tensor(captions, dtype=torch.long)


def dataset_for(cfg: RunConfig) -> tuple[torch.Tensor, torch.Tensor]:
    if cfg.data_dir:
        return load_dataset(cfg.data_dir, cfg.text_len)
    return stack_clips(gen_synthetic_dataset(cfg.num_clips, cfg.frames, cfg.size, cfg.size, cfg.seed))


def smoothed(losses, window: int = 50) -> np.ndarray:
    """Trailing moving average."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def train_phase(
    model: MvbUNet,
    frames: torch.Tensor,
    captions: torch.Tensor,
    phase: int,
    steps: int,
    cfg: RunConfig,
    sched: DiffusionSchedule,
    step0: int = 0,
) -> list[tuple[int, int, float]]:
    """Run one phase with a fresh Adam optimizer; returns (step, phase, loss)."""
    params = model.set_trainable(trainable_groups(cfg.variant, phase, model.in_channels == 9))
    if not params or steps == 0:
        return []
    opt = torch.optim.Adam(params, lr=cfg.lr)
    picker = np.random.default_rng([cfg.seed, phase, 7])
    rng = RngState(cfg.seed * 1000 + phase)
    video = phase == 3
    use_image = model.variant == "mvb"
    n_clips = frames.shape[0]
    out = []
    model.train()
    for k in range(steps):
        if video:
            idx = picker.integers(n_clips, size=cfg.batch)
            z0 = frames[idx]
            image = z0[:, 0] if use_image else None
            p_img, p_text = cfg.p_img, cfg.p_text
        else:
            idx = picker.integers(n_clips, size=cfg.image_batch)
            fidx = picker.integers(frames.shape[1], size=cfg.image_batch)
            z0 = frames[idx, fidx][:, None]
            image = z0[:, 0] if phase == 2 else None
            p_img, p_text = (cfg.p_img, cfg.p_text) if phase == 2 else (0.0, cfg.p_text)
        loss, rng = training_loss(model, z0, captions[idx], image, rng, sched, p_img, p_text,
                                  temporal=video, weight_cap=cfg.loss_weight_cap)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        out.append((step0 + k, phase, loss.item()))
        if k % 100 == 0:
            log.info("phase %d step %d loss %.4f", phase, k, out[-1][2])
    model.set_trainable(())
    return out


def run_train(cfg: RunConfig, model: MvbUNet | None = None, data=None) -> TrainResult:
    """Train per ``cfg``; writes checkpoints, ``run.cfg`` and ``loss.tsv``
    (``step<TAB>phase<TAB>loss``) into ``cfg.out_dir`` when it is set."""
    frames, captions = dataset_for(cfg) if data is None else data
    torch.manual_seed(cfg.seed)
    if model is None:
        model = MvbUNet(**cfg.model_kwargs())
    if cfg.init_ckpt:
        load_checkpoint(model, cfg.init_ckpt)
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_dir / "run.cfg")
    result = TrainResult(model)
    steps = {1: cfg.steps_phase1, 2: cfg.steps_phase2, 3: cfg.steps_phase3}
    step0 = sum(steps[p] for p in range(1, cfg.start_phase))
    for phase in range(cfg.start_phase, 4):
        result.losses += train_phase(model, frames, captions, phase, steps[phase], cfg, sched, step0)
        step0 += steps[phase]
        if out_dir is not None:
            path = out_dir / f"phase{phase}.ckpt"
            save_checkpoint(model, path)
            result.checkpoints[phase] = path
    if out_dir is not None:
        save_checkpoint(model, out_dir / "model.ckpt")
        with open(out_dir / "loss.tsv", "w", encoding="utf-8") as fh:
            fh.writelines(f"{s}\t{p}\t{l!r}\n" for s, p, l in result.losses)
    return result


def read_loss_log(path: str | Path) -> list[tuple[int, int, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        s, p, l = line.split("\t")
        rows.append((int(s), int(p), float(l)))
    return rows
