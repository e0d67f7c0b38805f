import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mvb import ConfigError
from mvb.config import RunConfig, load_config, parse, save_config, serialize
from mvb.data import (COLOR_NAMES, SHAPES, TOK_COLOR, TOK_DIR, TOK_MOTION, TOK_SHAPE, caption_for,
                      gen_synthetic_dataset, make_clip, parse_prompt, render_frame)
from mvb.train import load_dataset, save_dataset


class TestSynthetic:
    def test_same_seed_same_dataset(self):
        a, b = gen_synthetic_dataset(6, seed=4), gen_synthetic_dataset(6, seed=4)
        for x, y in zip(a, b):
            assert torch.equal(x.frames, y.frames) and x.caption_ids == y.caption_ids
        assert not torch.equal(a[0].frames, gen_synthetic_dataset(1, seed=5)[0].frames)

    def test_clip_depends_only_on_index(self):
        assert torch.equal(gen_synthetic_dataset(5, seed=2)[3].frames, gen_synthetic_dataset(9, seed=2)[3].frames)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6), st.sampled_from(SHAPES))
    def test_translate_is_a_shift(self, seed, kind):
        clip = make_clip(np.random.default_rng(seed), kind=kind, motion="translate")
        vx, vy = clip.params["vx"], clip.params["vy"]
        occ = clip.frames[:, 0].numpy()
        for k in range(1, occ.shape[0]):
            np.testing.assert_allclose(occ[k], np.roll(occ[0], (k * vy, k * vx), axis=(0, 1)), atol=1e-6)

    def test_colour_changes_only_colour_channels(self):
        a = render_frame("circle", 7.3, 8.1, 3.5, 0.2, 1)
        b = render_frame("circle", 7.3, 8.1, 3.5, 0.2, 6)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[3], b[3])
        assert not np.allclose(a[1:3], b[1:3])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_value_range_and_caption(self, seed):
        clip = make_clip(np.random.default_rng(seed))
        assert clip.frames.shape == (8, 4, 16, 16)
        assert clip.frames.min() >= -1 and clip.frames.max() <= 1
        ids = clip.caption_ids
        assert ids[0] == TOK_SHAPE + SHAPES.index(clip.shape_kind)
        assert ids[2] == TOK_COLOR + clip.color_code
        # the shape stays on the canvas
        assert (clip.frames[:, 0] > 0).flatten(1).any(dim=1).all()

    def test_count_validated(self):
        with pytest.raises(ValueError):
            gen_synthetic_dataset(0)

    def test_dataset_directory_round_trip(self, tmp_path):
        clips = gen_synthetic_dataset(3, frames=2, seed=1)
        save_dataset(clips, tmp_path / "d")
        frames, captions = load_dataset(tmp_path / "d")
        assert torch.equal(frames, torch.stack([c.frames for c in clips]))
        assert captions.tolist() == [c.caption_ids for c in clips]
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "missing")


class TestPrompt:
    def test_words(self):
        assert parse_prompt("red circle translate up-left") == caption_for("circle", "translate", 0, 5)
        assert parse_prompt("Blue, SQUARE") == [TOK_SHAPE, TOK_COLOR + COLOR_NAMES.index("blue")] + [0] * 6

    def test_ids(self):
        assert parse_prompt("2 4 9") == [2, 4, 9, 0, 0, 0, 0, 0]

    def test_errors(self):
        with pytest.raises(ValueError):
            parse_prompt("green hexagon")
        with pytest.raises(ValueError):
            parse_prompt(" ".join(["1"] * 9))

    def test_direction_tokens(self):
        assert parse_prompt("translate right")[1] == TOK_DIR
        assert parse_prompt("translate")[0] == TOK_MOTION


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = RunConfig(variant="composed_fs", widths=(16, 24, 32), masked=True, lr=3.3e-4, p_img=0.3,
                        data_dir="/x y", seed=7)
        save_config(cfg, tmp_path / "run.cfg")
        assert load_config(tmp_path / "run.cfg", env={}) == cfg
        assert parse(serialize(RunConfig())) == RunConfig()

    @settings(max_examples=40, deadline=None)
    @given(st.floats(1e-6, 1.0, allow_nan=False), st.floats(0, 1), st.integers(0, 2 ** 31), st.booleans())
    def test_round_trip_property(self, lr, p, seed, masked):
        cfg = RunConfig(lr=lr, p_text=p, seed=seed, masked=masked)
        assert parse(serialize(cfg)) == cfg

    def test_comments_and_env_seed(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\nvariant = decomposed_fs  # trailing\n\nseed = 3\n")
        assert load_config(path, env={}).seed == 3
        cfg = load_config(path, env={"MVB_SEED": "42"})
        assert cfg.seed == 42 and cfg.variant == "decomposed_fs"

    @pytest.mark.parametrize("text", ["bogus = 1", "widths 32", "lr = fast", "masked = maybe", "variant = unet",
                                      "p_img = 1.5", "start_phase = 4", "beta_start = 0.5\nbeta_end = 0.1"])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse(text)
