"""Residual geometry control: an encoder copy of the image model whose
per-frame features, passed through zero-initialized 1x1 fusion convs, are
added at the decoder skip junctions and the mid block of a video model."""

from __future__ import annotations

import copy

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import ConfigError, InputError, ShapeError
from .conditioning import ConditionPair
from .diffusion import DiffusionSchedule, q_sample
from .numerics import RngState, rng_normal, rng_uniform
from .unet import Conv3x3, MVBlock, MvbUNet, sinusoidal_embedding


def edge_map(latent: torch.Tensor) -> torch.Tensor:
    """[..., 4, H, W] -> [..., 1, H, W]: channel mean, central-difference
    gradient magnitude, normalized by the per-image maximum (0 when flat)."""
    if latent.dim() < 3:
        raise ShapeError("edge_map expects [..., C, H, W]")
    lead = latent.shape[:-3]
    g = latent.reshape(-1, *latent.shape[-3:]).to(torch.float64).mean(dim=1, keepdim=True)
    p = F.pad(g, (1, 1, 1, 1), mode="replicate")
    gx = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / 2
    gy = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / 2
    mag = torch.sqrt(gx ** 2 + gy ** 2)
    peak = mag.flatten(1).amax(dim=1).reshape(-1, 1, 1, 1)
    out = torch.where(peak > 1e-12, mag / peak.clamp_min(1e-12), torch.zeros_like(mag))
    return out.to(torch.float32).reshape(*lead, 1, *latent.shape[-2:])


def control_adherence(generated: torch.Tensor, signal: torch.Tensor) -> float:
    """Mean per-frame Pearson correlation between edge_map(generated) and the
    control maps; frames where either map is constant count as 0."""
    maps = edge_map(generated)
    if maps.shape != signal.shape:
        raise ShapeError(f"control maps {tuple(signal.shape)} vs generated {tuple(maps.shape)}")
    a = maps.reshape(-1, maps.shape[-2] * maps.shape[-1]).double()
    b = signal.reshape(-1, a.shape[1]).double()
    a = a - a.mean(dim=1, keepdim=True)
    b = b - b.mean(dim=1, keepdim=True)
    den = a.norm(dim=1) * b.norm(dim=1)
    corr = torch.where(den > 1e-12, (a * b).sum(dim=1) / den.clamp_min(1e-12), torch.zeros_like(den))
    return float(corr.mean())


class ControlBranch(nn.Module):
    """Trainable copy of an image model's encoder plus a hint encoder.

    The copy uses text-only cross-attention regardless of the source variant;
    it always runs frame by frame (N = 1), the image-control contract.
    """

    def __init__(self, image_model: MvbUNet, hint_hidden: int = 16):
        super().__init__()
        cfg = image_model.config
        widths = image_model.widths
        w0 = widths[0]
        self.widths = widths
        self.num_timesteps = image_model.num_timesteps
        self.time_mlp = copy.deepcopy(image_model.time_mlp)
        self.conv_in = copy.deepcopy(image_model.conv_in)
        self.pos_emb = nn.Parameter(image_model.pos_emb.detach().clone())
        self.hint = nn.Sequential(Conv3x3(1, hint_hidden), nn.SiLU(), Conv3x3(hint_hidden, w0, zero=True))
        blk = dict(variant="decomposed_fs", c_cond=cfg["c_cond"], t_dim=image_model.t_dim, heads=cfg["heads"])
        self.down = nn.ModuleList()
        prev = w0
        for w in widths:
            self.down.append(MVBlock(prev, w, **blk))
            prev = w
        self.downsample = copy.deepcopy(image_model.downsample)
        self.mid = MVBlock(prev, prev, **blk)
        self._copy_blocks(image_model)
        self.fusion = nn.ModuleList(nn.Conv2d(w, w, 1) for w in list(widths) + [widths[-1]])
        for conv in self.fusion:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def _copy_blocks(self, src: MvbUNet):
        pairs = list(zip(self.down, src.down)) + [(self.mid, src.mid)]
        with torch.no_grad():
            for dst, s in pairs:
                sp = dict(s.named_parameters())
                for n, p in dst.named_parameters():
                    if "temporal" not in n:
                        p.copy_(sp[n])

    @property
    def levels(self) -> int:
        return len(self.widths)

    def forward(self, signal: torch.Tensor, z_t: torch.Tensor, t, cond: ConditionPair) -> list[torch.Tensor]:
        """signal [B, N, 1, H, W], z_t [B, N, 4, H, W] -> one residue per
        encoder level plus the mid block, each [B, N, C, h, w]."""
        if signal.dim() != 5 or signal.shape[2] != 1:
            raise ShapeError(f"control maps must be [B, N, 1, H, W], got {tuple(signal.shape)}")
        b, n = z_t.shape[:2]
        if signal.shape[:2] != (b, n) or signal.shape[-2:] != z_t.shape[-2:]:
            raise InputError(f"control maps {tuple(signal.shape)} do not match latents {tuple(z_t.shape)}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        t = t.expand(b) if t.numel() == 1 else t
        if (t < 0).any() or (t >= self.num_timesteps).any():
            raise InputError("timestep out of range")
        # every frame becomes its own single-frame sample
        t_emb = self.time_mlp(sinusoidal_embedding(t.repeat_interleave(n), self.widths[0]).to(self.conv_in.weight.dtype))
        frame_cond = cond.repeat(n)
        x = z_t[:, :, :4].reshape(b * n, 1, 4, *z_t.shape[-2:])
        hint = signal.clamp(0, 1).reshape(b * n, 1, *signal.shape[-2:])
        h = (self.conv_in(x[:, 0]) + self.pos_emb + self.hint(hint))[:, None]
        feats = []
        for i, block in enumerate(self.down):
            h = block(h, t_emb, frame_cond, temporal=False)
            feats.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h[:, 0])[:, None]
        feats.append(self.mid(h, t_emb, frame_cond, temporal=False))
        return [fuse(f[:, 0]).reshape(b, n, *f.shape[2:]) for fuse, f in zip(self.fusion, feats)]


def control_branch_forward(branch: ControlBranch, signal, z_t, t, cond):
    return branch(signal, z_t, t, cond)


def controlled_unet_forward(model: MvbUNet, branch: ControlBranch, signal, inp, t, cond: ConditionPair,
                            temporal: bool = True):
    if branch.levels != model.levels or tuple(branch.widths) != tuple(model.widths):
        raise ConfigError("control branch and model disagree on U-Net levels")
    residues = branch(signal, inp[:, :, :4], t, cond)
    return model(inp, t, cond, temporal=temporal, residues=residues)


def train_control_branch(
    image_model: MvbUNet,
    branch: ControlBranch,
    frames: torch.Tensor,
    captions: torch.Tensor,
    sched: DiffusionSchedule,
    steps: int = 300,
    batch: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """Fit the branch on single frames (N = 1) with the image model frozen."""
    for p in image_model.parameters():
        p.requires_grad_(False)
    params = [p for p in branch.parameters()]
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    picker = np.random.default_rng([seed, 11])
    rng = RngState(seed * 1000 + 11)
    losses = []
    for _ in range(steps):
        idx = picker.integers(frames.shape[0], size=batch)
        fidx = picker.integers(frames.shape[1], size=batch)
        z0 = frames[idx, fidx][:, None]
        u, rng = rng_uniform(rng, batch)
        t = torch.from_numpy(np.minimum((u * sched.T).astype(np.int64), sched.T - 1))
        eps, rng = rng_normal(rng, z0.shape)
        z_t = q_sample(z0, t.numpy(), eps, sched)
        with torch.no_grad():
            cond = image_model.conditioner.encode(captions[idx])
        signal = edge_map(z0)
        eps_hat = controlled_unet_forward(image_model, branch, signal, z_t, t, cond, temporal=False)
        loss = ((eps - eps_hat) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        losses.append(loss.item())
    for p in branch.parameters():
        p.requires_grad_(False)
    return losses
