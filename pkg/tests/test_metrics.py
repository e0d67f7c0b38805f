import pytest
import torch

from mvb import ShapeError
from mvb.data import gen_synthetic_dataset
from mvb.metrics import caption_labels, default_probe, eval_metrics, probe_accuracy, temporal_consistency


def test_static_clip_is_consistent():
    frame = gen_synthetic_dataset(1, seed=1)[0].frames[0]
    assert temporal_consistency(frame[None].expand(5, -1, -1, -1)) == 0.0
    assert temporal_consistency(frame[None]) == 0.0


def test_condition_image_reference():
    clip = gen_synthetic_dataset(1, seed=2)[0].frames
    image = clip[0]
    rec = eval_metrics(clip, image)
    per_frame = ((clip.double() - image.double()) ** 2).flatten(1).mean(dim=1)
    assert rec.first_frame_mse == 0.0
    assert rec.avg_frame_mse == pytest.approx(float(per_frame.mean()), rel=1e-12)
    assert rec.probe_accuracy is None


def test_shape_errors():
    clip = gen_synthetic_dataset(1, seed=2)[0]
    with pytest.raises(ShapeError):
        eval_metrics(clip.frames[:3], clip)
    with pytest.raises(ShapeError):
        eval_metrics(clip.frames, torch.zeros(4, 8, 8))


def test_caption_labels():
    assert caption_labels([3, 5, 12, 16, 0, 0, 0, 0]) == (2, 5)


@pytest.mark.slow
class TestProbe:
    def test_renderer_clips_classified(self):
        probe = default_probe()
        for clip in gen_synthetic_dataset(16, seed=4242):
            assert probe_accuracy(clip.frames, clip.caption_ids, probe) == 1.0

    def test_metric_record_uses_clip_caption(self):
        clip = gen_synthetic_dataset(1, seed=77)[0]
        rec = eval_metrics(clip.frames.clone(), clip, probe=default_probe())
        assert rec.first_frame_mse == 0.0 and rec.avg_frame_mse == 0.0
        assert rec.temporal_consistency == temporal_consistency(clip.frames)
        assert rec.probe_accuracy == 1.0

    def test_wrong_caption_fails(self):
        clip = gen_synthetic_dataset(1, seed=78)[0]
        ids = list(clip.caption_ids)
        ids[2] = 7 + (ids[2] - 7 + 4) % 8  # opposite colour
        assert probe_accuracy(clip.frames, ids, default_probe()) == 0.0
