"""Multimodal video blocks assembled into a two-level U-Net noise predictor.

Variants (``variant`` tag):

* ``composed`` / ``composed_fs``: conv -> temporal conv -> self-attn -> text cross-attn
* ``decomposed_fs``: conv -> self-attn -> text cross-attn -> temporal attn
* ``mvb``: conv -> self-attn -> text+image cross-attn -> temporal attn

``composed_fs`` differs from ``composed`` only in which parameters the video
training phase may update (see :func:`trainable_groups`).
"""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from . import ConfigError, InputError, ShapeError
from .attention import MultimodalCrossAttention, SpatialSelfAttention, TemporalAttention
from .conditioning import ConditionPair, Conditioner
from .numerics import conv2d_3x3, grad_check, group_norm
from .schedule import make_schedule

VARIANTS = ("composed", "composed_fs", "decomposed_fs", "mvb")
TEMPORAL_CONV_VARIANTS = ("composed", "composed_fs")
PARAM_GROUPS = ("spatial", "image", "temporal", "mask")


class Conv3x3(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1, bias: bool = True, zero: bool = False):
        super().__init__()
        std = 0.0 if zero else 1.0 / math.sqrt(9 * c_in)
        self.stride = stride
        self.weight = nn.Parameter(torch.randn(c_out, c_in, 3, 3) * std)
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None

    def forward(self, x):
        return conv2d_3x3(x, self.weight, self.bias, self.stride)


class GroupNorm(nn.Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        super().__init__()
        self.groups = math.gcd(groups, channels)
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return group_norm(x, self.groups, self.gamma, self.beta, self.eps)


class ResBlock2D(nn.Module):
    """GroupNorm/SiLU/conv twice; the time embedding enters as a per-channel bias."""

    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = GroupNorm(c_in)
        self.conv1 = Conv3x3(c_in, c_out)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = GroupNorm(c_out)
        self.conv2 = Conv3x3(c_out, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class TemporalConv(nn.Module):
    """Residual kernel-3 convolution along the frame axis at every pixel."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, 3, padding=1)

    def forward(self, x):
        b, n, c, h, w = x.shape
        seq = x.permute(0, 3, 4, 2, 1).reshape(b * h * w, c, n)
        out = self.conv(seq).reshape(b, h, w, c, n).permute(0, 4, 3, 1, 2)
        return x + out


class MVBlock(nn.Module):
    def __init__(self, c_in, c_out, variant, c_cond, t_dim, heads=1, max_frames=16):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown block variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.res = ResBlock2D(c_in, c_out, t_dim)
        self.self_attn = SpatialSelfAttention(c_out, heads)
        self.cross_attn = MultimodalCrossAttention(c_out, c_cond, heads, image=variant == "mvb")
        if variant in TEMPORAL_CONV_VARIANTS:
            self.temporal_conv = TemporalConv(c_out)
        else:
            self.temporal_attn = TemporalAttention(c_out, heads, max_frames)

    def forward(self, x, t_emb, cond: ConditionPair, temporal: bool = True):
        """x: [B, N, C, H, W]; t_emb: [B, t_dim]."""
        b, n = x.shape[:2]
        h = self.res(x.flatten(0, 1), t_emb.repeat_interleave(n, 0))
        h = h.reshape(b, n, *h.shape[1:])
        if temporal and self.variant in TEMPORAL_CONV_VARIANTS:
            h = self.temporal_conv(h)
        h = self.self_attn(h)
        image = cond.image.tokens if self.variant == "mvb" else None
        h = self.cross_attn(h, cond.text.embedding, image)
        if temporal and self.variant not in TEMPORAL_CONV_VARIANTS:
            h = self.temporal_attn(h)
        return h


def mvb_block_forward(x, cond, t_emb, block: MVBlock, variant: str, temporal: bool = True):
    if block.variant != variant:
        raise ConfigError(f"block built as {block.variant!r}, asked to run as {variant!r}")
    return block(x, t_emb, cond, temporal)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """[sin(t*f_i) ..., cos(t*f_i) ...] with geometric frequencies."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1).to(torch.float32)


def position_grid(channels: int, size: int) -> torch.Tensor:
    """[channels, size, size] sinusoidal code of absolute position; channels
    alternate between x and y, frequencies double from half a period per
    grid up to the Nyquist limit and then repeat."""
    pos = (torch.arange(size, dtype=torch.float64) + 0.5) / size
    octaves = max(1, int(math.log2(size)))
    rows = []
    for c in range(channels):
        k, axis = (c // 4) % octaves, (c // 2) % 2
        ang = math.pi * (2 ** k) * pos
        wave = torch.sin(ang) if c % 2 == 0 else torch.cos(ang)
        rows.append(wave[None, :].expand(size, -1) if axis == 0 else wave[:, None].expand(-1, size))
    return torch.stack(rows).to(torch.float32)


class MvbUNet(nn.Module):
    """Noise predictor over latent video ``[B, N, in_channels, H, W]``.

    ``in_channels`` is 4 (plain) or 9 (noisy latent + replicated first frame
    + mask). The extra five input channels go through their own zero-initialized
    convolution, which is the same map as zero-padding the input conv.

    With ``precondition`` the network output is a scaled correction to the
    best linear noise estimate for data of scale ``sigma_data``::

        v = ab * sd^2 + (1 - ab)
        eps = sqrt(1 - ab) / v * z_t + sqrt(ab * sd^2 / v) * net(z_t / sqrt(v))

    which keeps the clean-latent estimate well conditioned at high noise.
    Without it the network output is the noise estimate itself.
    """

    def __init__(
        self,
        widths=(32, 64),
        variant: str = "mvb",
        in_channels: int = 4,
        c_cond: int = 64,
        heads: int = 1,
        max_frames: int = 16,
        num_timesteps: int = 1000,
        size: int = 16,
        vocab: int = 64,
        text_len: int = 8,
        image_tokens: int = 4,
        precondition: bool = True,
        beta_start: float = 1e-4,
        beta_end: float = 2e-2,
        sigma_data: float = 0.5,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        if in_channels not in (4, 9):
            raise ConfigError("in_channels must be 4 or 9")
        widths = tuple(int(w) for w in widths)
        if size % (2 ** (len(widths) - 1)):
            raise ConfigError(f"latent size {size} not divisible by the U-Net downsampling")
        self.widths, self.variant, self.in_channels = widths, variant, in_channels
        self.num_timesteps, self.size = num_timesteps, size
        self.config = dict(widths=widths, variant=variant, in_channels=in_channels, c_cond=c_cond, heads=heads,
                           max_frames=max_frames, num_timesteps=num_timesteps, size=size, vocab=vocab,
                           text_len=text_len, image_tokens=image_tokens, precondition=precondition,
                           beta_start=beta_start, beta_end=beta_end, sigma_data=sigma_data)
        self.precondition, self.sigma_data = precondition, sigma_data
        alpha_bar = make_schedule(num_timesteps, beta_start, beta_end).alpha_bar
        self.register_buffer("alpha_bar", torch.tensor(alpha_bar, dtype=torch.float32), persistent=False)

        w0 = widths[0]
        t_dim = 2 * w0
        self.t_dim = t_dim
        self.conditioner = Conditioner(vocab, text_len, image_tokens, c_cond, size)
        self.time_mlp = nn.Sequential(nn.Linear(w0, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.conv_in = Conv3x3(4, w0)
        self.pos_emb = nn.Parameter(position_grid(w0, size))
        if in_channels == 9:
            self.conv_in_cond = Conv3x3(5, w0, bias=False, zero=True)

        blk = dict(variant=variant, c_cond=c_cond, t_dim=t_dim, heads=heads, max_frames=max_frames)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = w0
        for i, w in enumerate(widths):
            self.down.append(MVBlock(prev, w, **blk))
            if i < len(widths) - 1:
                self.downsample.append(Conv3x3(w, w, stride=2))
            prev = w
        self.mid = MVBlock(prev, prev, **blk)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(widths))):
            self.up.append(MVBlock(prev + widths[i], widths[i], **blk))
            if i > 0:
                self.upsample.append(Conv3x3(widths[i], widths[i]))
            prev = widths[i]
        self.out_norm = GroupNorm(w0)
        self.conv_out = Conv3x3(w0, 4, zero=True)

    # -- helpers ---------------------------------------------------------
    @property
    def levels(self) -> int:
        return len(self.widths)

    def time_embedding(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if (t < 0).any() or (t >= self.num_timesteps).any():
            raise InputError(f"timestep outside [0, {self.num_timesteps})")
        emb = sinusoidal_embedding(t, self.widths[0])
        return self.time_mlp(emb.to(self.conv_in.weight.dtype))

    def _frames_apply(self, fn, x):
        b, n = x.shape[:2]
        y = fn(x.flatten(0, 1))
        return y.reshape(b, n, *y.shape[1:])

    def _stem(self, inp):
        if inp.dim() != 5 or inp.shape[2] != self.in_channels:
            raise ShapeError(f"model expects [B, N, {self.in_channels}, H, W] input, got {tuple(inp.shape)}")
        h = self._frames_apply(self.conv_in, inp[:, :, :4]) + self.pos_emb
        if self.in_channels == 9:
            h = h + self._frames_apply(self.conv_in_cond, inp[:, :, 4:])
        return h

    def _batch_t(self, t, b):
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        return t.expand(b) if t.numel() == 1 else t

    def encode(self, inp, t, cond: ConditionPair, temporal: bool = True):
        """Encoder pass; returns (skip features per level, mid features)."""
        t_emb = self.time_embedding(self._batch_t(t, inp.shape[0]))
        h = self._stem(inp)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, t_emb, cond, temporal)
            skips.append(h)
            if i < len(self.downsample):
                h = self._frames_apply(self.downsample[i], h)
        h = self.mid(h, t_emb, cond, temporal)
        return skips, h, t_emb

    def forward(self, inp, t, cond: ConditionPair, temporal: bool = True, residues=None):
        """Predict noise ``[B, N, 4, H, W]``.

        ``temporal=False`` bypasses every temporal layer (the image model).
        ``residues`` (one per encoder level, then one for the mid block) are
        added at the skip junctions and the mid output.
        """
        if self.precondition:
            return self._preconditioned(inp, t, cond, temporal, residues)
        return self._net(inp, t, cond, temporal, residues)

    def _preconditioned(self, inp, t, cond, temporal, residues):
        if inp.dim() != 5 or inp.shape[2] != self.in_channels:
            raise ShapeError(f"model expects [B, N, {self.in_channels}, H, W] input, got {tuple(inp.shape)}")
        tb = self._batch_t(t, inp.shape[0])
        if (tb < 0).any() or (tb >= self.num_timesteps).any():
            raise InputError(f"timestep outside [0, {self.num_timesteps})")
        ab = self.alpha_bar[tb].reshape(-1, 1, 1, 1, 1)
        var = ab * self.sigma_data ** 2 + (1 - ab)
        c_skip = torch.sqrt(1 - ab) / var
        c_out = torch.sqrt(ab * self.sigma_data ** 2 / var)
        z = inp[:, :, :4]
        scaled = torch.cat([z / torch.sqrt(var), inp[:, :, 4:]], dim=2)
        return c_skip * z + c_out * self._net(scaled, tb, cond, temporal, residues)

    def _net(self, inp, t, cond, temporal, residues):
        skips, h, t_emb = self.encode(inp, t, cond, temporal)
        if residues is not None:
            if len(residues) != self.levels + 1:
                raise ConfigError(f"expected {self.levels + 1} control residues, got {len(residues)}")
            skips = [s + r for s, r in zip(skips, residues[:-1])]
            h = h + residues[-1]
        for j, block in enumerate(self.up):
            i = self.levels - 1 - j
            h = block(torch.cat([h, skips[i]], dim=2), t_emb, cond, temporal)
            if i > 0:
                h = self._frames_apply(lambda z: self.upsample[j](F.interpolate(z, scale_factor=2, mode="nearest")), h)
        out = self._frames_apply(lambda z: self.conv_out(F.silu(self.out_norm(z))), h)
        return out

    # -- parameter bookkeeping --------------------------------------------
    @property
    def spatial_frozen(self) -> bool:
        return not any(p.requires_grad for n, p in self.named_parameters() if parameter_group(n) == "spatial")

    @spatial_frozen.setter
    def spatial_frozen(self, frozen: bool):
        for n, p in self.named_parameters():
            if parameter_group(n) == "spatial":
                p.requires_grad_(not frozen)

    def set_trainable(self, groups) -> list[nn.Parameter]:
        """Enable gradients only for the given parameter groups."""
        groups = set(groups)
        unknown = groups - set(PARAM_GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}")
        params = []
        for n, p in self.named_parameters():
            on = parameter_group(n) in groups
            p.requires_grad_(on)
            if on:
                params.append(p)
        return params


def parameter_group(name: str) -> str:
    """Classify a parameter name as spatial, image, temporal or mask."""
    if "temporal" in name:
        return "temporal"
    if name.startswith("conditioner.image") or "_img" in name:
        return "image"
    if name.startswith("conv_in_cond"):
        return "mask"
    return "spatial"


def trainable_groups(variant: str, phase: int, masked: bool = False) -> tuple[str, ...]:
    """Parameter groups updated in training phase 1 (image), 2 (image
    cross-attention) or 3 (video). Only ``mvb`` blocks read the image
    condition, so phase 2 is empty for the other variants."""
    if phase == 1:
        return ("spatial",)
    if phase == 2:
        return ("image",) if variant == "mvb" else ()
    if phase != 3:
        raise ConfigError(f"no training phase {phase}")
    groups = ("spatial", "image", "temporal") if variant == "composed" else ("temporal",)
    return groups + (("mask",) if masked else ())


def unet_forward(model: MvbUNet, inp, t, cond: ConditionPair, **kw):
    return model(inp, t, cond, **kw)


def build_masked_input(z_t: torch.Tensor, z00: torch.Tensor, given) -> torch.Tensor:
    """Stack noisy latents, the replicated first frame and a mask channel.

    ``given`` is a per-frame boolean sequence; mask channel is 0 on given
    frames and 1 on frames to generate.
    """
    if z_t.dim() != 5 or z_t.shape[2] != 4:
        raise ShapeError(f"z_t must be [B, N, 4, H, W], got {tuple(z_t.shape)}")
    b, n, _, h, w = z_t.shape
    if z00.shape != (b, 4, h, w):
        raise ShapeError(f"first frame must be [{b}, 4, {h}, {w}], got {tuple(z00.shape)}")
    given = torch.as_tensor(given, dtype=torch.bool).reshape(-1)
    if given.numel() != n:
        raise ShapeError(f"given-frame mask has {given.numel()} entries for {n} frames")
    if not given.any():
        raise InputError("animation needs at least one given frame")
    mask = (~given).to(z_t.dtype).reshape(1, n, 1, 1, 1).expand(b, n, 1, h, w)
    rep = z00[:, None].expand(b, n, 4, h, w)
    return torch.cat([z_t, rep, mask], dim=2)


def per_frame_features(model: MvbUNet, inp, t, cond, temporal: bool):
    skips, mid, _ = model.encode(inp, t, cond, temporal)
    return skips + [mid]


def feature_drift(model: MvbUNet, reference: MvbUNet, x, cond: ConditionPair, t=None) -> float:
    """Mean relative L2 distance between per-frame encoder features of
    ``model`` (temporal layers on) and ``reference`` (temporal layers off)."""
    t = model.num_timesteps // 2 if t is None else t
    with torch.no_grad():
        fv = per_frame_features(model, x, t, cond, temporal=True)
        fi = per_frame_features(reference, x, t, cond, temporal=False)
    rel = []
    for a, b in zip(fv, fi):
        a = a.flatten(2).double()
        b = b.flatten(2).double()
        num = (a - b).norm(dim=-1)
        den = b.norm(dim=-1).clamp_min(1e-12)
        rel.append((num / den).mean())
    return float(torch.stack(rel).mean())


def copy_spatial(dst: MvbUNet, src: MvbUNet, groups=("spatial", "image")) -> None:
    """Copy parameters of the listed groups by name (same layout required)."""
    sp = dict(src.named_parameters())
    with torch.no_grad():
        for n, p in dst.named_parameters():
            if parameter_group(n) in groups and n in sp:
                if sp[n].shape != p.shape:
                    raise ConfigError(f"parameter {n}: {tuple(sp[n].shape)} vs {tuple(p.shape)}")
                p.copy_(sp[n])


def gradcheck_variant(variant: str, masked: bool = False, frames: int = 2, max_coords: int | None = 16,
                      seed: int = 0, h: float = 1e-3, reduction: str = "mean") -> float:
    """Finite-difference check of the epsilon loss of a 1-level, width-8,
    8x8 model of ``variant`` at t = 500.

    Every parameter is perturbed away from its (often zero) initial value first
    so no gradient path is trivially dead. ``reduction="sum"`` checks the
    unnormalized squared error instead, which keeps gradients O(1) so the
    relative error is not diluted by the mean. Returns the max relative error.
    """
    from .diffusion import q_sample

    if reduction not in ("mean", "sum"):
        raise ConfigError("reduction must be 'mean' or 'sum'")
    torch.manual_seed(seed)
    model = MvbUNet(widths=(8,), variant=variant, in_channels=9 if masked else 4, c_cond=8, size=8,
                    max_frames=max(frames, 2)).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn_like(p))
    z0 = torch.randn(1, frames, 4, 8, 8, dtype=torch.float64).clamp(-1, 1)
    eps = torch.randn_like(z0)
    z_t = q_sample(z0, 500, eps, make_schedule())
    inp = build_masked_input(z_t, z0[:, 0], [True] + [False] * (frames - 1)) if masked else z_t
    ids = torch.tensor([[1, 4, 7, 15, 0, 0, 0, 0]])
    image = torch.randn(1, 4, 8, 8, dtype=torch.float64)

    def f():
        sq = (model(inp, 500, model.conditioner.encode(ids, image)) - eps) ** 2
        return sq.sum() if reduction == "sum" else sq.mean()

    return grad_check(f, list(model.parameters()), h=h, max_coords=max_coords, seed=seed)
