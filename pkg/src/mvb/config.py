"""Run configuration: ``key = value`` lines, ``#`` comments, unknown keys rejected.

Documented keys (defaults in parentheses):

variant (mvb)            composed | composed_fs | decomposed_fs | mvb
widths (32,64)           channel width per U-Net level
heads (1)                attention heads
c_cond (64)              condition token width
vocab (64), text_len (8), image_tokens (4)
frames (8), size (16)    clip length and latent side
masked (false)           9-channel first-frame conditioning
num_clips (8)            synthetic clips generated when data_dir is empty
data_dir ()              directory written by ``mvb gendata``
T (1000), beta_start (0.0001), beta_end (0.02)
precondition (true)      scale the network output around the linear noise estimate
sigma_data (0.5)         data scale used by the preconditioning
p_img (0.25), p_text (0.1)
loss_weight_cap (1.0)    >1 weights each sample by min((1-abar)/abar, cap); 1 is plain epsilon MSE
lr (0.001), batch (4), image_batch (16)
steps_phase1/2/3 (500)   optimizer steps per phase
start_phase (1)          resume: first phase to run
init_ckpt ()             resume: weights loaded before start_phase
seed (0)                 overridden by the MVB_SEED environment variable
out_dir (run)
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from . import ConfigError
from .unet import VARIANTS


@dataclass
class RunConfig:
    variant: str = "mvb"
    widths: tuple = (32, 64)
    heads: int = 1
    c_cond: int = 64
    vocab: int = 64
    text_len: int = 8
    image_tokens: int = 4
    frames: int = 8
    size: int = 16
    masked: bool = False
    num_clips: int = 8
    data_dir: str = ""
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    precondition: bool = True
    sigma_data: float = 0.5
    p_img: float = 0.25
    p_text: float = 0.1
    loss_weight_cap: float = 1.0
    lr: float = 1e-3
    batch: int = 4
    image_batch: int = 16
    steps_phase1: int = 500
    steps_phase2: int = 500
    steps_phase3: int = 500
    start_phase: int = 1
    init_ckpt: str = ""
    seed: int = 0
    out_dir: str = "run"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.widths or min(self.widths) < 1:
            raise ConfigError("widths must be positive")
        for key in ("heads", "c_cond", "vocab", "text_len", "image_tokens", "frames", "size", "num_clips", "T",
                    "batch", "image_batch"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be at least 1")
        for key in ("steps_phase1", "steps_phase2", "steps_phase3"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        for key in ("p_img", "p_text"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1]")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.start_phase not in (1, 2, 3):
            raise ConfigError("start_phase must be 1, 2 or 3")
        if self.loss_weight_cap < 1.0:
            raise ConfigError("loss_weight_cap must be at least 1")
        if self.lr <= 0 or self.sigma_data <= 0:
            raise ConfigError("lr and sigma_data must be positive")

    def model_kwargs(self) -> dict:
        return dict(widths=self.widths, variant=self.variant, in_channels=9 if self.masked else 4,
                    c_cond=self.c_cond, heads=self.heads, max_frames=max(16, self.frames),
                    num_timesteps=self.T, size=self.size, vocab=self.vocab, text_len=self.text_len,
                    image_tokens=self.image_tokens, precondition=self.precondition,
                    beta_start=self.beta_start, beta_end=self.beta_end, sigma_data=self.sigma_data)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(kind: str, raw: str, key: str):
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def serialize(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def parse(text: str) -> RunConfig:
    kinds = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse(kinds[key], raw, key)
    return RunConfig(**values)


def load_config(path: str | Path, env=None) -> RunConfig:
    """Parse a config file; ``MVB_SEED`` in ``env`` (default os.environ) wins."""
    cfg = parse(Path(path).read_text(encoding="utf-8"))
    env = os.environ if env is None else env
    if env.get("MVB_SEED"):
        cfg = cfg.replace(seed=int(env["MVB_SEED"]))
    return cfg


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(serialize(cfg), encoding="utf-8")
