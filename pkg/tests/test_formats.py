import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mvb import FormatError
from mvb.formats import (CKPT_MAGIC, decode_checkpoint, decode_clip, encode_checkpoint, encode_clip, fnv1a64,
                         load_checkpoint, load_clip, model_checksum, save_checkpoint, save_clip)

from conftest import randomize, tiny_model


def test_fnv_reference_values():
    # published FNV-1a 64-bit test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


class TestClip:
    def test_round_trip_bitwise(self, tmp_path):
        frames = torch.randn(3, 4, 5, 6)
        frames[0, 0, 0, 0] = float("-0.0")
        save_clip(frames, tmp_path / "a.mvbclip")
        back = load_clip(tmp_path / "a.mvbclip")
        assert back.dtype == torch.float32
        assert back.numpy().tobytes() == frames.numpy().tobytes()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31))
    def test_round_trip_any_shape(self, n, c, h, w, seed):
        frames = torch.randn(n, c, h, w, generator=torch.Generator().manual_seed(seed))
        assert torch.equal(decode_clip(encode_clip(frames)), frames)

    def test_layout(self):
        blob = encode_clip(torch.arange(2 * 1 * 1 * 2, dtype=torch.float32).reshape(2, 1, 1, 2))
        assert blob.startswith(b"MVBCLIP 1\n")
        assert struct.unpack("<4Q", blob[10:42]) == (2, 1, 1, 2)
        assert np.frombuffer(blob[42:-8], "<f4").tolist() == [0.0, 1.0, 2.0, 3.0]
        assert struct.unpack("<Q", blob[-8:])[0] == fnv1a64(blob[:-8])

    def test_empty_rejected(self):
        with pytest.raises(FormatError):
            encode_clip(torch.zeros(0, 4, 2, 2))

    def test_truncated(self):
        blob = encode_clip(torch.randn(2, 4, 3, 3))
        with pytest.raises(FormatError) as err:
            decode_clip(blob[:-5])
        assert err.value.offset is not None

    def test_flipped_byte(self):
        blob = bytearray(encode_clip(torch.randn(2, 4, 3, 3)))
        blob[50] ^= 0x01
        with pytest.raises(FormatError, match="checksum"):
            decode_clip(bytes(blob))

    def test_bad_header(self):
        with pytest.raises(FormatError) as err:
            decode_clip(b"NOTACLIP" + b"\0" * 40)
        assert err.value.offset == 0


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        src = randomize(tiny_model())
        save_checkpoint(src, tmp_path / "m.ckpt")
        dst = load_checkpoint(tiny_model(), tmp_path / "m.ckpt")
        for (n, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
            assert a.detach().numpy().tobytes() == b.detach().numpy().tobytes(), n
        assert model_checksum(src) == model_checksum(dst)

    def test_record_layout(self):
        blob = encode_checkpoint({"w": torch.tensor([[1.5, -2.0]])})
        body = blob[len(CKPT_MAGIC):-8]
        assert body == (struct.pack("<Q", 1) + b"w" + struct.pack("<QQQ", 2, 1, 2) +
                        np.array([1.5, -2.0], "<f4").tobytes())

    def test_scalar_and_unicode_names(self):
        tensors = {"é.scale": torch.tensor(3.25), "b": torch.zeros(2, 3)}
        back = decode_checkpoint(encode_checkpoint(tensors))
        assert list(back) == list(tensors)
        assert back["é.scale"].shape == () and back["é.scale"].item() == 3.25

    def test_corrupted_checksum(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_model(), path)
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="checksum"):
            load_checkpoint(tiny_model(), path)

    def test_truncated(self):
        blob = encode_checkpoint({"w": torch.randn(4)})
        with pytest.raises(FormatError):
            decode_checkpoint(blob[:-3])

    def test_record_past_end_reports_offset(self):
        body = CKPT_MAGIC + struct.pack("<Q", 1) + b"w" + struct.pack("<QQ", 1, 100) + b"\0" * 8
        blob = body + struct.pack("<Q", fnv1a64(body))
        with pytest.raises(FormatError) as err:
            decode_checkpoint(blob)
        assert err.value.offset == len(CKPT_MAGIC) + 25

    def test_mismatched_model(self, tmp_path):
        save_checkpoint(tiny_model(widths=(8,)), tmp_path / "m.ckpt")
        with pytest.raises(FormatError):
            load_checkpoint(tiny_model(), tmp_path / "m.ckpt")
