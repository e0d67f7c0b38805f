"""Bit-exact checkpoint and clip files.

Checkpoint::

    b"MVBCKPT 1\\n"
    repeated: u64 name length | UTF-8 name | u64 rank | rank x u64 dims | float32 data
    u64 FNV-1a-64 of every preceding byte

Clip::

    b"MVBCLIP 1\\n" | u64 N | u64 C | u64 H | u64 W | N*C*H*W float32 | u64 FNV-1a-64

All integers and floats are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numba
import numpy as np
import torch
from torch import nn

from . import FormatError

CKPT_MAGIC = b"MVBCKPT 1\n"
CLIP_MAGIC = b"MVBCLIP 1\n"
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@numba.njit(cache=True)
def _fnv1a(buf, h):
    prime = np.uint64(FNV_PRIME)
    for i in range(buf.shape[0]):
        h = (h ^ np.uint64(buf[i])) * prime
    return h


def fnv1a64(data: bytes) -> int:
    return int(_fnv1a(np.frombuffer(data, dtype=np.uint8), np.uint64(FNV_OFFSET)))


def _u64(v: int) -> bytes:
    return struct.pack("<Q", v)


def _seal(body: bytes) -> bytes:
    return body + _u64(fnv1a64(body))


def _unseal(blob: bytes, magic: bytes) -> bytes:
    if not blob.startswith(magic):
        raise FormatError(f"bad header, expected {magic!r}", 0)
    if len(blob) < len(magic) + 8:
        raise FormatError("file truncated before checksum", len(blob))
    body, stored = blob[:-8], struct.unpack("<Q", blob[-8:])[0]
    if fnv1a64(body) != stored:
        raise FormatError("checksum mismatch", len(body))
    return body


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def encode_checkpoint(tensors: dict[str, torch.Tensor]) -> bytes:
    parts = [CKPT_MAGIC]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        parts += [_u64(len(raw)), raw, _u64(arr.ndim), *(_u64(d) for d in arr.shape), arr.astype("<f4").tobytes()]
    return _seal(b"".join(parts))


def decode_checkpoint(blob: bytes) -> dict[str, torch.Tensor]:
    body = _unseal(blob, CKPT_MAGIC)
    out: dict[str, torch.Tensor] = {}
    pos = len(CKPT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise FormatError("record runs past end of data", pos)
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    while pos < len(body):
        start = pos
        (nlen,) = struct.unpack("<Q", take(8))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("parameter name is not UTF-8", start) from exc
        (rank,) = struct.unpack("<Q", take(8))
        if rank > 8:
            raise FormatError(f"implausible rank {rank}", start)
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims)
        if name in out:
            raise FormatError(f"duplicate parameter {name!r}", start)
        out[name] = torch.from_numpy(data.astype(np.float32))
    return out


def save_checkpoint(model: nn.Module, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(dict(model.named_parameters())))


def load_checkpoint(model: nn.Module, path: str | Path) -> nn.Module:
    """Load parameters into ``model``; names and shapes must match exactly."""
    tensors = decode_checkpoint(Path(path).read_bytes())
    own = dict(model.named_parameters())
    missing, extra = set(own) - set(tensors), set(tensors) - set(own)
    if missing or extra:
        raise FormatError(f"checkpoint/model mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    with torch.no_grad():
        for name, p in own.items():
            if tensors[name].shape != p.shape:
                raise FormatError(f"{name}: checkpoint shape {tuple(tensors[name].shape)} vs model {tuple(p.shape)}")
            p.copy_(tensors[name])
    return model


def model_checksum(model: nn.Module) -> int:
    """FNV-1a-64 of the model's checkpoint encoding."""
    return fnv1a64(encode_checkpoint(dict(model.named_parameters())))


# ---------------------------------------------------------------------------
# clips
# ---------------------------------------------------------------------------

def encode_clip(frames: torch.Tensor) -> bytes:
    if frames.dim() != 4:
        raise FormatError(f"clip must be [N, C, H, W], got {tuple(frames.shape)}")
    if frames.shape[0] == 0:
        raise FormatError("refusing to save an empty clip (N = 0)")
    arr = frames.detach().cpu().to(torch.float32).contiguous().numpy()
    return _seal(CLIP_MAGIC + b"".join(_u64(d) for d in arr.shape) + arr.astype("<f4").tobytes())


def decode_clip(blob: bytes) -> torch.Tensor:
    body = _unseal(blob, CLIP_MAGIC)
    off = len(CLIP_MAGIC)
    if len(body) < off + 32:
        raise FormatError("clip header truncated", len(body))
    dims = struct.unpack("<4Q", body[off:off + 32])
    if dims[0] == 0:
        raise FormatError("empty clip (N = 0)", off)
    expected = off + 32 + 4 * int(np.prod(dims))
    if len(body) != expected:
        raise FormatError(f"payload length {len(body)} does not match dims {dims}", min(len(body), expected))
    data = np.frombuffer(body[off + 32:], dtype="<f4").reshape(dims)
    return torch.from_numpy(data.astype(np.float32))


def save_clip(frames: torch.Tensor, path: str | Path) -> None:
    Path(path).write_bytes(encode_clip(frames))


def load_clip(path: str | Path) -> torch.Tensor:
    return decode_clip(Path(path).read_bytes())
