import os

import numpy as np
import pytest

from hairanim import pipeline as pl
from hairanim import synthdata as sd
from hairanim.compositor import CompositeConfig
from hairanim.model import AnimationModel
from hairanim.synthdata import PoseParams


def _pose(yaw=0.0, dx=0.0, dy=0.0, scale=1.0, phase=0.0):
    return PoseParams(yaw, dx, dy, scale, phase)


def _video(seed=11, frames=6, hw=32):
    spec = sd.random_portrait_spec(seed, num_frames=frames, height=hw, width=hw)
    return sd.generate_portrait_video(spec)


@pytest.fixture(scope="module")
def model32():
    return AnimationModel(np.random.default_rng(0))


@pytest.fixture(scope="module")
def reference():
    bank = sd.build_hair_bank(height=32, width=32)
    return bank[2]


def _run(video, ref, model, **cfg_kw):
    cfg = pl.PipelineConfig(**cfg_kw)
    return pl.run_inference(video, ref.frame, ref.hair_mask, ref.pose, cfg, model=model)


# -- pose distance and anchor selection ---------------------------------------


def test_pose_distance_zero_on_self():
    p = _pose(0.3, 2.0, -1.0, 1.1, 0.4)
    assert pl.pose_distance(p, p) == 0.0


def test_pose_distance_symmetric():
    a, b = _pose(0.3, 2.0, -1.0, 1.1), _pose(-0.1, 0.5, 3.0, 0.9)
    assert pl.pose_distance(a, b) == pl.pose_distance(b, a)


def test_pose_distance_ignores_expression_phase():
    a, b = _pose(phase=0.0), _pose(phase=0.9)
    assert pl.pose_distance(a, b) == 0.0


def test_pose_distance_translation_normalized_by_frame_size():
    a, b = _pose(), _pose(dx=8.0)
    wide = pl.pose_distance(a, b, width=64)
    narrow = pl.pose_distance(a, b, width=16)
    assert narrow == pytest.approx(4 * wide)


def test_select_anchor_nearest_yaw():
    poses = [_pose(yaw=y) for y in (0.0, 0.17, 0.35)]
    assert pl.select_anchor_frame(poses, _pose(yaw=0.21)) == 1


def test_select_anchor_tie_breaks_to_first():
    poses = [_pose(yaw=0.1)] * 5
    assert pl.select_anchor_frame(poses, _pose(0.4, 2.0, 1.0, 1.2, 0.0)) == 0


def test_select_anchor_empty_video_rejected():
    with pytest.raises(ValueError, match="empty"):
        pl.select_anchor_frame([], _pose())


def test_select_anchor_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(100):
        frames = int(rng.integers(1, 12))
        poses = [
            _pose(rng.uniform(-0.5, 0.5), rng.uniform(-4, 4), rng.uniform(-4, 4),
                  rng.uniform(0.8, 1.2), rng.uniform(0, 1))
            for _ in range(frames)
        ]
        ref = _pose(rng.uniform(-0.5, 0.5), rng.uniform(-4, 4), rng.uniform(-4, 4),
                    rng.uniform(0.8, 1.2), rng.uniform(0, 1))
        dists = [pl.pose_distance(p, ref) for p in poses]
        expect = dists.index(min(dists))
        assert pl.select_anchor_frame(poses, ref) == expect


def test_select_anchor_uses_video_spec_dimensions():
    video = _video(seed=3, frames=5)
    got = pl.select_anchor_frame(video, _pose(yaw=0.1))
    poses = video.spec.pose_trajectory
    dists = [pl.pose_distance(p, _pose(yaw=0.1), height=32, width=32) for p in poses]
    assert got == dists.index(min(dists))


# -- config validation ---------------------------------------------------------


def test_pipeline_config_rejects_bad_strategy():
    with pytest.raises(ValueError, match="anchor_strategy"):
        pl.PipelineConfig(anchor_strategy="best_guess")


@pytest.mark.parametrize("kw", [
    {"read_ahead": 0},
    {"anchor_index": -1},
    {"nonhair_l1_threshold": 0.0},
    {"pose_weights": (1.0, 0.5)},
    {"pose_weights": (0.0, 0.0, 0.0)},
    {"motion_mode": "psychic"},
    {"fusion_mode": "triple"},
])
def test_pipeline_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        pl.PipelineConfig(**kw)


# -- video sources --------------------------------------------------------------


def test_dir_source_matches_saved_video(tmp_path):
    video = _video(seed=9, frames=4)
    path = tmp_path / "vid"
    sd.save_video_dir(video, path)
    src = pl.open_video(str(path))
    reread = sd.load_video_dir(str(path))
    assert src.num_frames == 4
    for t in range(4):
        np.testing.assert_array_equal(src.frame(t), reread.frames[t])
        np.testing.assert_array_equal(src.hair_mask(t), reread.hair_masks[t])
        assert src.pose(t) == video.spec.pose_trajectory[t]


def test_open_video_dispatch(tmp_path):
    video = _video(seed=9, frames=3)
    assert np.shares_memory(pl.open_video(video).frame(0), video.frames)
    src = pl.open_video(video)
    assert pl.open_video(src) is src
    with pytest.raises(FileNotFoundError):
        pl.open_video(str(tmp_path / "missing"))
    with pytest.raises(TypeError):
        pl.open_video(42)


# -- model loading ---------------------------------------------------------------


def test_load_animation_model_roundtrip(tmp_path, model32, reference):
    path = tmp_path / "m.ckpt"
    model32.save(str(path))
    loaded, meta = pl.load_animation_model(str(path))
    assert meta["fusion_mode"] == "multi_scale"
    video = _video(seed=2, frames=2)
    a = _run(video, reference, model32)
    b = _run(video, reference, loaded)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa, fb)


def test_load_animation_model_fusion_override(tmp_path, model32, reference):
    path = tmp_path / "m.ckpt"
    model32.save(str(path))
    plain, _ = pl.load_animation_model(str(path), fusion_mode="none")
    video = _video(seed=2, frames=1)
    a = _run(video, reference, model32)
    b = _run(video, reference, plain)
    assert not np.array_equal(a.frames[0], b.frames[0])


def test_load_animation_model_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        pl.load_animation_model(str(tmp_path / "nope.ckpt"))


# -- inference ---------------------------------------------------------------------


@pytest.mark.parametrize("frames", [1, 16, 300])
def test_output_length_matches_input(frames, model32, reference):
    video = _video(seed=21, frames=frames)
    res = _run(video, reference, model32)
    assert res.num_frames == frames
    assert len(res.frames) == frames
    assert len(res.nonhair_l1) == frames
    assert res.frames[0].shape == (32, 32, 3)


def test_inference_is_deterministic(model32, reference):
    video = _video(seed=4, frames=5)
    a = _run(video, reference, model32)
    b = _run(video, reference, model32)
    assert a.anchor_index == b.anchor_index
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa, fb)


def test_read_ahead_depth_does_not_change_output(model32, reference):
    video = _video(seed=4, frames=6)
    a = _run(video, reference, model32, read_ahead=1)
    b = _run(video, reference, model32, read_ahead=7)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa, fb)


def test_explicit_anchor_matches_selected_anchor(model32, reference):
    video = _video(seed=8, frames=6)
    auto = _run(video, reference, model32)
    pinned = _run(video, reference, model32,
                  anchor_strategy="explicit_index", anchor_index=auto.anchor_index)
    for fa, fb in zip(auto.frames, pinned.frames):
        np.testing.assert_array_equal(fa, fb)


def test_first_frame_strategy(model32, reference):
    video = _video(seed=8, frames=4)
    res = _run(video, reference, model32, anchor_strategy="first_frame")
    assert res.anchor_index == 0


def test_explicit_anchor_out_of_range(model32, reference):
    video = _video(seed=8, frames=4)
    with pytest.raises(ValueError, match="anchor index"):
        _run(video, reference, model32, anchor_strategy="explicit_index", anchor_index=9)


def test_empty_hair_mask_frames_are_flagged_not_dropped(model32, reference):
    video = _video(seed=13, frames=5)
    masks = video.hair_masks.copy()
    masks[2] = 0.0
    bald = sd.PortraitVideo(frames=video.frames, hair_masks=masks,
                            face_masks=video.face_masks, spec=video.spec)
    res = _run(bald, reference, model32)
    assert res.empty_mask_frames == [2]
    assert res.num_frames == 5
    assert len(res.frames) == 5


def test_nonhair_threshold_flags_untrained_output(model32, reference):
    video = _video(seed=6, frames=3)
    strict = _run(video, reference, model32, nonhair_l1_threshold=1e-6)
    assert strict.flagged_frames == [0, 1, 2]
    lax = _run(video, reference, model32, nonhair_l1_threshold=10.0)
    assert lax.flagged_frames == []


def test_streamed_output_dir_is_reloadable(tmp_path, model32, reference):
    video = _video(seed=7, frames=4)
    out = tmp_path / "gen"
    res = _run(video, reference, model32, output_dir=str(out))
    assert res.frames is None and res.output_dir == str(out)
    back = sd.load_video_dir(str(out))
    assert back.num_frames == 4
    np.testing.assert_array_equal(back.hair_masks, video.hair_masks)
    assert back.spec.pose_trajectory == video.spec.pose_trajectory


def test_streamed_matches_in_memory_after_quantization(tmp_path, model32, reference):
    video = _video(seed=7, frames=3)
    out = tmp_path / "gen"
    streamed = _run(video, reference, model32, output_dir=str(out))
    in_mem = _run(video, reference, model32)
    back = sd.load_video_dir(str(out))
    for t in range(3):
        quantized = np.round(np.clip(in_mem.frames[t], 0.0, 1.0) * 255.0) / 255.0
        np.testing.assert_allclose(back.frames[t], quantized, atol=1e-12)
    assert streamed.nonhair_l1 == in_mem.nonhair_l1


def test_missing_checkpoint_and_model(reference):
    video = _video(seed=7, frames=1)
    with pytest.raises(ValueError, match="checkpoint"):
        pl.run_inference(video, reference.frame, reference.hair_mask, reference.pose,
                         pl.PipelineConfig())


def test_reference_pose_required_for_passthrough(model32, reference):
    video = _video(seed=7, frames=1)
    with pytest.raises(ValueError, match="reference_pose"):
        pl.run_inference(video, reference.frame, reference.hair_mask, None,
                         pl.PipelineConfig(), model=model32)


def test_anchor_carries_reference_hair_color(model32, reference):
    video = _video(seed=16, frames=4)
    res = _run(video, reference, model32)
    mask = res.anchor_hair_mask.astype(bool)
    assert mask.any()
    anchor_color = res.anchor_frame[mask].mean(axis=0)
    ref_color = np.asarray(reference.frame)[reference.hair_mask.astype(bool)].mean(axis=0)
    assert np.abs(anchor_color - ref_color).max() < 0.15
