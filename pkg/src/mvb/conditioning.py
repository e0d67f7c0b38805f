"""Text and image condition encoders plus classifier-free-guidance dropout."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F

from . import InputError, ShapeError
from .numerics import RngState, rng_uniform


@dataclass
class TextCondition:
    token_ids: torch.Tensor  # [B, L_text] int64
    embedding: torch.Tensor  # [B, L_text, C_cond]
    is_null: torch.Tensor  # [B] bool


@dataclass
class ImageCondition:
    source_latent: torch.Tensor | None  # [B, 4, H, W]
    tokens: torch.Tensor  # [B, L_img, C_cond]
    is_null: torch.Tensor  # [B] bool


@dataclass
class ConditionPair:
    text: TextCondition
    image: ImageCondition

    def __post_init__(self):
        if self.text.embedding.shape[-1] != self.image.tokens.shape[-1]:
            raise ShapeError("text and image conditions must share C_cond")
        if self.text.embedding.shape[0] != self.image.tokens.shape[0]:
            raise ShapeError("text and image conditions must share the batch size")

    @property
    def batch(self) -> int:
        return self.text.embedding.shape[0]

    def repeat(self, n: int) -> "ConditionPair":
        """Repeat every batch element ``n`` times (element-major)."""
        t, i = self.text, self.image
        src = None if i.source_latent is None else i.source_latent.repeat_interleave(n, 0)
        return ConditionPair(
            TextCondition(t.token_ids.repeat_interleave(n, 0), t.embedding.repeat_interleave(n, 0),
                          t.is_null.repeat_interleave(n, 0)),
            ImageCondition(src, i.tokens.repeat_interleave(n, 0), i.is_null.repeat_interleave(n, 0)),
        )


class TextEncoder(nn.Module):
    """Embedding lookup plus learned absolute positions."""

    def __init__(self, vocab: int = 64, length: int = 8, c_cond: int = 64):
        super().__init__()
        self.vocab, self.length = vocab, length
        self.token = nn.Parameter(torch.randn(vocab, c_cond) * 0.5)
        self.position = nn.Parameter(torch.randn(length, c_cond) * 0.1)
        self.null = nn.Parameter(torch.zeros(c_cond))

    def forward(self, token_ids) -> TextCondition:
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids[None]
        if ids.shape[-1] != self.length:
            raise InputError(f"prompt must have {self.length} tokens (pad with 0), got {ids.shape[-1]}")
        if (ids < 0).any() or (ids >= self.vocab).any():
            raise InputError(f"token ids must lie in [0, {self.vocab})")
        emb = self.token[ids] + self.position
        return TextCondition(ids, emb, torch.zeros(ids.shape[0], dtype=torch.bool))

    def null_embedding(self, batch: int) -> torch.Tensor:
        return self.null.expand(batch, self.length, -1)


class ImageEncoder(nn.Module):
    """Conv stack + average pooling to a square grid of condition tokens,
    each tagged with a learned grid-position embedding."""

    def __init__(self, c_cond: int = 64, size: int = 16, hidden: int = 32, tokens: int = 4):
        super().__init__()
        side = int(round(tokens ** 0.5))
        if side * side != tokens:
            raise ValueError("image token count must be a perfect square")
        self.size, self.side = size, side
        self.conv1 = nn.Conv2d(4, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(hidden, c_cond, 3, stride=2, padding=1)
        self.null = nn.Parameter(torch.zeros(tokens, c_cond))
        # keys must say which part of the image a token pools
        self.token_pos = nn.Parameter(torch.randn(tokens, c_cond) * 0.5)

    def forward(self, latent: torch.Tensor) -> ImageCondition:
        x = latent if latent.dim() == 4 else latent[None]
        if x.shape[1:] != (4, self.size, self.size):
            raise InputError(f"image latent must be [4, {self.size}, {self.size}], got {tuple(x.shape[1:])}")
        h = F.silu(self.conv1(x))
        h = F.silu(self.conv2(h))
        h = self.conv3(h)
        h = F.adaptive_avg_pool2d(h, self.side)
        tokens = h.flatten(2).transpose(1, 2) + self.token_pos
        return ImageCondition(x, tokens, torch.zeros(x.shape[0], dtype=torch.bool))

    def null_tokens(self, batch: int) -> torch.Tensor:
        return self.null.expand(batch, -1, -1)


class Conditioner(nn.Module):
    """Owns both encoders and their learned null embeddings."""

    def __init__(self, vocab=64, text_len=8, image_tokens=4, c_cond=64, size=16):
        super().__init__()
        self.c_cond = c_cond
        self.text = TextEncoder(vocab, text_len, c_cond)
        self.image = ImageEncoder(c_cond, size, tokens=image_tokens)

    def encode(self, token_ids, image_latent: torch.Tensor | None = None) -> ConditionPair:
        """Encode a prompt batch; ``image_latent=None`` yields the null image condition."""
        text = self.text(token_ids)
        b = text.embedding.shape[0]
        if image_latent is None:
            image = self.null_image(b)
        else:
            image = self.image(image_latent)
            if image.tokens.shape[0] != b:
                raise InputError("prompt and image batch sizes differ")
        return ConditionPair(text, image)

    def null_image(self, batch: int) -> ImageCondition:
        return ImageCondition(None, self.image.null_tokens(batch), torch.ones(batch, dtype=torch.bool))

    def null_pair(self, batch: int) -> ConditionPair:
        ids = torch.zeros(batch, self.text.length, dtype=torch.long)
        text = TextCondition(ids, self.text.null_embedding(batch), torch.ones(batch, dtype=torch.bool))
        return ConditionPair(text, self.null_image(batch))

    def drop(self, pair: ConditionPair, rng: RngState, p_img: float, p_text: float):
        return drop_conditions(pair, rng, p_img, p_text, self.text.null, self.image.null)


def drop_conditions(
    pair: ConditionPair,
    rng: RngState,
    p_img: float,
    p_text: float,
    null_text: torch.Tensor,
    null_image: torch.Tensor,
) -> tuple[ConditionPair, RngState]:
    """Independently null each element's image (prob ``p_img``) and text
    (prob ``p_text``) condition. Consumes exactly two uniforms per element,
    image first, whatever the outcome."""
    if not (0.0 <= p_img <= 1.0 and 0.0 <= p_text <= 1.0):
        raise ValueError("dropout probabilities must lie in [0, 1]")
    b = pair.batch
    u, rng = rng_uniform(rng, 2 * b)
    u = torch.from_numpy(u.reshape(b, 2))
    drop_img = u[:, 0] < p_img
    drop_txt = u[:, 1] < p_text

    text, image = pair.text, pair.image
    if drop_txt.any():
        null = null_text.expand_as(text.embedding)
        text = replace(text, embedding=torch.where(drop_txt[:, None, None], null, text.embedding),
                       is_null=text.is_null | drop_txt)
    if drop_img.any():
        null = null_image.expand_as(image.tokens)
        image = replace(image, tokens=torch.where(drop_img[:, None, None], null, image.tokens),
                        is_null=image.is_null | drop_img)
    return ConditionPair(text, image), rng


def read_prompt_file(path: str | Path, length: int = 8) -> list[list[int]]:
    """One prompt per line, whitespace-separated integer ids, padded with 0."""
    prompts = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            ids = [int(tok) for tok in line.split()]
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: non-integer token") from exc
        prompts.append(pad_prompt(ids, length))
    return prompts


def write_prompt_file(path: str | Path, prompts) -> None:
    Path(path).write_text("".join(" ".join(str(int(i)) for i in p) + "\n" for p in prompts),
                          encoding="utf-8")


def pad_prompt(ids, length: int = 8) -> list[int]:
    ids = [int(i) for i in ids]
    if len(ids) > length:
        raise InputError(f"prompt longer than {length} tokens")
    return ids + [0] * (length - len(ids))
