"""Encoders, motion descriptors and the pose-driven feature warper."""

import numpy as np
import pytest

from hairanim import autograd as ag
from hairanim.encoders import (
    ConvEncoder,
    EncoderConfig,
    MotionDescriptor,
    estimate_motion,
    feature_grid_matrix,
    pose_to_vector,
    train_motion_regressor,
    warp_features,
)
from hairanim.synthdata import IDENTITY_POSE, PoseParams, random_portrait_spec, render_frame


def test_encoder_output_shape():
    rng = np.random.default_rng(0)
    enc = ConvEncoder(EncoderConfig(), rng)
    x = ag.Tensor(np.zeros((2, 3, 64, 64), dtype=np.float32))
    out = enc(x)
    assert out.data.shape == (2, 64, 8, 8)
    out32 = enc(ag.Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))
    assert out32.data.shape == (1, 64, 4, 4)


def test_encoder_gradients_check_against_finite_differences():
    rng = np.random.default_rng(1)
    enc = ConvEncoder(EncoderConfig(base_channels=4, depth=2), rng, dtype=np.float64)
    x = ag.Tensor(np.random.default_rng(2).normal(size=(1, 3, 8, 8)), requires_grad=True)
    params = list(enc.named_params().values()) + [x]
    ag.gradcheck(lambda: enc(x).abs().mean(), params)


def test_passthrough_motion_wraps_pose():
    pose = PoseParams(yaw=0.2, dx=1.0, dy=-2.0, scale=1.1, expression_phase=0.7)
    frame = np.zeros((64, 64, 3))
    m = estimate_motion(frame, pose=pose)
    assert m.mode == "passthrough"
    assert m.pose == pose
    np.testing.assert_allclose(m.vector, pose_to_vector(pose, 64, 64))


def test_passthrough_requires_pose():
    with pytest.raises(ValueError, match="pose"):
        estimate_motion(np.zeros((64, 64, 3)))


def test_learned_mode_requires_regressor():
    with pytest.raises(ValueError, match="regressor"):
        estimate_motion(np.zeros((64, 64, 3)), mode="learned")


def test_warp_identity_returns_features_unchanged():
    f = ag.Tensor(np.random.default_rng(0).normal(size=(1, 4, 8, 8)))
    pose = PoseParams(yaw=0.1, dx=2.0, scale=1.05)
    m = MotionDescriptor(mode="passthrough", pose=pose)
    out = warp_features(m, m, f, (64, 64))
    assert out is f  # bitwise passthrough


def test_warp_mode_mismatch_raises():
    f = ag.Tensor(np.zeros((1, 4, 8, 8)))
    a = MotionDescriptor(mode="passthrough", pose=IDENTITY_POSE)
    b = MotionDescriptor(mode="learned", pose=IDENTITY_POSE)
    with pytest.raises(ValueError, match="modes differ"):
        warp_features(a, b, f, (64, 64))


def test_warp_integer_translation_shifts_feature_cells():
    # an 8 px pan equals exactly one cell at 1/8 resolution
    f = ag.Tensor(np.random.default_rng(3).normal(size=(1, 2, 8, 8)))
    src = MotionDescriptor(mode="passthrough", pose=IDENTITY_POSE)
    dst = MotionDescriptor(mode="passthrough", pose=PoseParams(dx=8.0))
    out = warp_features(src, dst, f, (64, 64)).data
    np.testing.assert_allclose(out[:, :, :, 1:], f.data[:, :, :, :-1], atol=1e-12)
    np.testing.assert_allclose(out[:, :, :, 0], 0.0, atol=1e-12)


def test_warp_round_trip_on_affine_field():
    # bilinear interpolation reproduces fields affine in coordinates, so a
    # there-and-back warp must return the interior exactly
    h = w = 12
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    field = np.stack([1.0 + 0.3 * ys - 0.2 * xs, -0.5 + 0.1 * ys + 0.4 * xs])[None]
    f = ag.Tensor(field)
    a = MotionDescriptor(mode="passthrough", pose=IDENTITY_POSE)
    b = MotionDescriptor(mode="passthrough", pose=PoseParams(yaw=0.2, dx=3.0, dy=-2.0, scale=1.05))
    there = warp_features(a, b, f, (96, 96))
    back = warp_features(b, a, there, (96, 96)).data
    inner = (slice(None), slice(None), slice(4, -4), slice(4, -4))
    assert np.max(np.abs(back[inner] - field[inner])) <= 1e-5


def test_warp_gradients_flow_to_features():
    f = ag.Tensor(np.random.default_rng(5).normal(size=(1, 2, 6, 6)), requires_grad=True)
    a = MotionDescriptor(mode="passthrough", pose=IDENTITY_POSE)
    b = MotionDescriptor(mode="passthrough", pose=PoseParams(yaw=0.15, scale=1.1))
    ag.gradcheck(lambda: warp_features(a, b, f, (48, 48)).abs().mean(), [f])


def test_feature_grid_matrix_consistent_with_image_matrix():
    # mapping a feature cell through the grid matrix lands where the image
    # transform sends the corresponding image point
    pose_a = PoseParams(yaw=0.3, dx=4.0, dy=1.0, scale=0.9)
    pose_b = PoseParams(yaw=-0.1, dx=-2.0, dy=3.0, scale=1.1)
    from hairanim.synthdata import pose_transfer_matrix

    t_img = pose_transfer_matrix(pose_a, pose_b, 64, 64)
    t_feat = feature_grid_matrix(pose_a, pose_b, (64, 64), (8, 8))
    cell = np.array([2.0, 5.0, 1.0])  # (x, y, 1) in feature coords
    img_pt = np.array([8.0 * cell[0] + 3.5, 8.0 * cell[1] + 3.5, 1.0])
    mapped_img = t_img @ img_pt
    mapped_feat = t_feat @ cell
    np.testing.assert_allclose(8.0 * mapped_feat[:2] + 3.5, mapped_img[:2], atol=1e-9)


def test_learned_regressor_recovers_yaw():
    # slow (a couple of minutes): pose regression only generalizes across
    # identities once the pool is in the thousands, so the pool is
    frames, poses = [], []
    for seed in range(6100):
        spec = random_portrait_spec(40_000 + seed, num_frames=1, height=32, width=32)
        pose = spec.pose_trajectory[0]
        frame, _, _ = render_frame(spec, pose)
        frames.append(frame)
        poses.append(pose)
    net = train_motion_regressor(frames[:6000], poses[:6000], seed=1, steps=1600, lr=2e-3, batch_size=32)
    errs = []
    for frame, pose in zip(frames[6000:], poses[6000:]):
        m = estimate_motion(frame, regressor=net, mode="learned")
        errs.append(abs(m.pose.yaw - pose.yaw))
    mae = float(np.mean(errs))
    assert mae <= 0.05, f"held-out yaw MAE {mae:.4f}"
