"""Synthetic portrait domain: rendering, masks, sampling, persistence."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage, signal, stats

from hairanim.synthdata import (
    HAIR_PALETTE,
    IDENTITY_POSE,
    PoseParams,
    PortraitSpec,
    build_hair_bank,
    derive_region_masks,
    generate_portrait_video,
    load_video_dir,
    pose_affine,
    pose_transfer_matrix,
    random_portrait_spec,
    render_frame,
    sample_training_triplet,
    save_video_dir,
    validate_spec,
)


def make_spec(shape_id=1, poses=(IDENTITY_POSE,), size=64, hair=(0.1, 0.2, 0.8), face=(0.85, 0.65, 0.5), bg=0, seed=11):
    return PortraitSpec(
        identity_seed=seed,
        hair_color=hair,
        hair_shape_id=shape_id,
        face_color=face,
        background_pattern_id=bg,
        pose_trajectory=tuple(poses),
        height=size,
        width=size,
    )


def test_identity_pose_hair_mask_marks_exact_hair_pixels():
    spec = make_spec()
    frame, hair_mask, _ = render_frame(spec, IDENTITY_POSE)
    hair = np.asarray(spec.hair_color)
    exact = np.all(frame == hair[None, None, :], axis=-1)
    interior = ndimage.binary_erosion(hair_mask > 0.5, iterations=1)
    # inside the silhouette (off the anti-aliasing band) pixels carry the pure hair color
    assert np.all(exact[interior])
    # the pure hair color never appears outside the silhouette's 1-px band
    outside = ~ndimage.binary_dilation(hair_mask > 0.5, iterations=1)
    assert not np.any(exact & outside)


def test_mean_hair_color_close_to_spec():
    spec = make_spec(shape_id=4)
    frame, hair_mask, _ = render_frame(spec, PoseParams(yaw=0.3, scale=1.1))
    interior = ndimage.binary_erosion(hair_mask > 0.5, iterations=1)
    mean = frame[interior].mean(axis=0)
    assert np.abs(mean - np.asarray(spec.hair_color)).sum() <= 0.05


def test_bald_shape_yields_empty_hair_mask():
    spec = make_spec(shape_id=0)
    _, hair_mask, face_mask = render_frame(spec, IDENTITY_POSE)
    assert hair_mask.sum() == 0.0
    assert face_mask.sum() > 0.0


def test_pure_translation_shifts_frame_exactly():
    dx, dy = 4, 0
    poses = (PoseParams(), PoseParams(dx=float(dx), dy=float(dy)))
    video = generate_portrait_video(make_spec(shape_id=2, poses=poses, bg=3))
    f0, f1 = video.frames[0], video.frames[1]
    # frame 1 equals frame 0 shifted by (dx, dy); compare on the overlap
    np.testing.assert_array_equal(f1[:, dx:], f0[:, : 64 - dx])


def test_translation_cross_correlation_peak_matches_pose_delta():
    dx, dy = 5, -3
    poses = (PoseParams(), PoseParams(dx=float(dx), dy=float(dy)))
    video = generate_portrait_video(make_spec(shape_id=3, poses=poses, bg=1))
    g0 = video.frames[0].mean(axis=-1)
    g1 = video.frames[1].mean(axis=-1)
    g0 = g0 - g0.mean()
    g1 = g1 - g1.mean()
    corr = signal.correlate(g1, g0, mode="full")
    # displacement recovered from the full correlation argmax
    iy, ix = np.unravel_index(np.argmax(corr), corr.shape)
    assert (iy - (g0.shape[0] - 1), ix - (g0.shape[1] - 1)) == (dy, dx)


def test_masks_match_independent_scalar_oracle():
    # scalar reimplementation of the cap silhouette and face ellipse, no shared code paths
    spec = make_spec(shape_id=1, size=32)
    pose = PoseParams(yaw=0.25, dx=2.0, dy=-1.5, scale=1.1)
    hair_mask, face_mask = derive_region_masks(spec, pose)
    unit = 32 / 64.0
    cx = cy = (32 - 1) / 2.0
    for y in range(32):
        for x in range(32):
            px = (x - cx - pose.dx) / unit
            py = (y - cy - pose.dy) / unit
            hx = (math.cos(pose.yaw) * px + math.sin(pose.yaw) * py) / pose.scale
            hy = (-math.sin(pose.yaw) * px + math.cos(pose.yaw) * py) / pose.scale
            in_face = (hx / 13.0) ** 2 + (hy / 17.0) ** 2 <= 1.0
            in_hair = ((hx / 15.0) ** 2 + ((hy + 8.0) / 12.0) ** 2 <= 1.0) and hy <= -4.0
            assert hair_mask[y, x] == float(in_hair)
            assert face_mask[y, x] == float(in_face and not in_hair)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=10**6))
def test_masks_disjoint_and_frames_bounded(seed):
    spec = random_portrait_spec(seed, num_frames=1, height=32, width=32, allow_bald=True)
    video = generate_portrait_video(spec)
    assert float(np.max(video.hair_masks * video.face_masks)) <= 1e-6
    assert video.frames.min() >= 0.0 and video.frames.max() <= 1.0


def test_generation_is_deterministic():
    spec = random_portrait_spec(123, num_frames=3, height=32, width=32)
    a = generate_portrait_video(spec)
    b = generate_portrait_video(spec)
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.hair_masks, b.hair_masks)
    assert np.array_equal(a.face_masks, b.face_masks)


def test_validation_rejects_bad_specs():
    with pytest.raises(ValueError, match="too similar"):
        validate_spec(make_spec(hair=(0.5, 0.5, 0.5), face=(0.5, 0.5, 0.55)))
    with pytest.raises(ValueError, match="yaw"):
        validate_spec(make_spec(poses=(PoseParams(yaw=1.0),)))
    with pytest.raises(ValueError, match="scale"):
        validate_spec(make_spec(poses=(PoseParams(scale=1.5),)))
    with pytest.raises(ValueError, match="out of frame"):
        validate_spec(make_spec(poses=(PoseParams(dx=30.0),)))
    with pytest.raises(ValueError, match="channels"):
        validate_spec(make_spec(hair=(0.5, 1.2, 0.5)))
    with pytest.raises(ValueError, match="divisible"):
        validate_spec(make_spec(size=30))
    with pytest.raises(ValueError, match="trajectory"):
        validate_spec(make_spec(poses=()))


def test_hair_bank_covers_all_styles():
    bank = build_hair_bank(height=32, width=32)
    assert len(bank) == 64
    styles = {(e.hair_shape_id, e.hair_color) for e in bank}
    assert len(styles) == 64
    for e in bank:
        assert e.hair_mask.sum() > 0.0


def test_triplet_pair_membership_for_two_frames():
    spec = random_portrait_spec(5, num_frames=2, height=32, width=32)
    video = generate_portrait_video(spec)
    bank = build_hair_bank(height=32, width=32)
    rng = np.random.default_rng(0)
    for _ in range(10):
        trip = sample_training_triplet(video, bank, rng)
        assert (trip.source_index, trip.driving_index) in {(0, 1), (1, 0)}
        pair = (trip.i_s, trip.i_d)
        assert np.array_equal(pair[0], video.frames[trip.source_index])
        assert np.array_equal(pair[1], video.frames[trip.driving_index])


def test_triplet_reference_never_matches_own_style():
    spec = random_portrait_spec(9, num_frames=4, height=32, width=32)
    video = generate_portrait_video(spec)
    bank = build_hair_bank(height=32, width=32)
    rng = np.random.default_rng(1)
    for _ in range(50):
        trip = sample_training_triplet(video, bank, rng)
        entry = bank[trip.bank_index]
        same_shape = entry.hair_shape_id == spec.hair_shape_id
        same_color = np.abs(np.asarray(entry.hair_color) - np.asarray(spec.hair_color)).sum() < 0.12
        assert not (same_shape and same_color)


def test_triplet_pairs_uniform_chi_square():
    spec = random_portrait_spec(7, num_frames=4, height=32, width=32)
    video = generate_portrait_video(spec)
    bank = build_hair_bank(height=32, width=32)
    rng = np.random.default_rng(42)
    counts = {}
    n = 1200
    for _ in range(n):
        trip = sample_training_triplet(video, bank, rng)
        key = (trip.source_index, trip.driving_index)
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 12
    result = stats.chisquare(list(counts.values()))
    assert result.pvalue > 0.01


def test_triplet_error_cases():
    spec = random_portrait_spec(3, num_frames=1, height=32, width=32)
    video = generate_portrait_video(spec)
    bank = build_hair_bank(height=32, width=32)
    with pytest.raises(ValueError, match="two frames"):
        sample_training_triplet(video, bank, np.random.default_rng(0))
    spec2 = random_portrait_spec(8, num_frames=2, height=32, width=32)
    video2 = generate_portrait_video(spec2)
    own_style = [e for e in bank if e.hair_shape_id == spec2.hair_shape_id and np.abs(np.asarray(e.hair_color) - np.asarray(spec2.hair_color)).sum() < 0.12]
    assert own_style, "sampled spec should exist in the bank palette"
    with pytest.raises(ValueError, match="no style"):
        sample_training_triplet(video2, own_style, np.random.default_rng(0))


def test_save_load_roundtrip(tmp_path):
    spec = random_portrait_spec(21, num_frames=3, height=32, width=32)
    video = generate_portrait_video(spec)
    out = tmp_path / "vid"
    save_video_dir(video, str(out))
    assert (out / "frame_00000.png").exists()
    assert (out / "hair_00002.png").exists()
    assert (out / "manifest.txt").exists()
    loaded = load_video_dir(str(out))
    assert loaded.spec == video.spec
    np.testing.assert_array_equal(loaded.hair_masks, video.hair_masks)
    np.testing.assert_array_equal(loaded.face_masks, video.face_masks)
    assert np.max(np.abs(loaded.frames - video.frames)) <= 0.5 / 255.0 + 1e-12


def test_load_missing_manifest_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_video_dir(str(tmp_path))


def test_pose_transfer_matrix_identity_and_roundtrip():
    np.testing.assert_array_equal(pose_transfer_matrix(IDENTITY_POSE, IDENTITY_POSE, 64, 64), np.eye(3))
    a = PoseParams(yaw=0.2, dx=3.0, dy=-2.0, scale=1.1)
    b = PoseParams(yaw=-0.3, dx=-1.0, dy=4.0, scale=0.9)
    m_ab = pose_transfer_matrix(a, b, 64, 64)
    m_ba = pose_transfer_matrix(b, a, 64, 64)
    np.testing.assert_allclose(m_ab @ m_ba, np.eye(3), atol=1e-10)
    # the transfer matrix moves the head center of pose a onto the head center of pose b
    center_a = pose_affine(a, 64, 64) @ np.array([0.0, 0.0, 1.0])
    center_b = pose_affine(b, 64, 64) @ np.array([0.0, 0.0, 1.0])
    np.testing.assert_allclose(m_ab @ center_a, center_b, atol=1e-10)


def test_expression_phase_changes_mouth_region_only_locally():
    closed = render_frame(make_spec(), PoseParams(expression_phase=-np.pi / 2))[0]
    open_ = render_frame(make_spec(), PoseParams(expression_phase=np.pi / 2))[0]
    diff = np.abs(closed - open_).sum(axis=-1)
    assert diff.max() > 0.1  # the mouth visibly changes
    changed = diff > 1e-9
    ys, xs = np.nonzero(changed)
    # change confined to the lower face area
    assert ys.min() > 32 and 16 < xs.min() and xs.max() < 48
