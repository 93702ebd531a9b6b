"""Appearance encoders, motion description and the feature warper.

Two identical convolutional encoders produce hair and non-hair context
features at 1/8 resolution. Motion is either a passthrough of ground-truth
pose parameters or an 8-dim vector regressed from pixels; the warper turns
the source-to-driving pose change into a similarity resampling of the hair
feature grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .synthdata import PoseParams, pose_transfer_matrix

__all__ = [
    "EncoderConfig",
    "ConvEncoder",
    "MotionDescriptor",
    "MotionRegressor",
    "estimate_motion",
    "train_motion_regressor",
    "warp_features",
    "feature_grid_matrix",
]

_XY_SWAP3 = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    base_channels: int = 16
    depth: int = 3

    def out_channels(self):
        return self.base_channels * 2 ** (self.depth - 1)


class ConvEncoder(ag.Module):
    """Depth x [conv, lrelu, conv, lrelu, avgpool]; channels double per level."""

    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        cin = cfg.in_channels
        for level in range(cfg.depth):
            cout = cfg.base_channels * 2**level
            self.add_child(f"level{level}_a", ag.Conv2d(cin, cout, 3, rng, dtype=dtype))
            self.add_child(f"level{level}_b", ag.Conv2d(cout, cout, 3, rng, dtype=dtype))
            cin = cout

    def __call__(self, x):
        h = x
        for level in range(self.cfg.depth):
            h = ag.leaky_relu(self._children[f"level{level}_a"](h))
            h = ag.leaky_relu(self._children[f"level{level}_b"](h))
            h = ag.avg_pool2(h)
        return h


@dataclass(frozen=True)
class MotionDescriptor:
    """Pose carrier for one frame; passthrough wraps exact PoseParams."""

    mode: str  # "passthrough" or "learned"
    pose: PoseParams
    vector: tuple = ()


def _vector_to_pose(vec, height, width):
    yaw, dxn, dyn, scale, sphi, cphi = (float(v) for v in vec[:6])
    return PoseParams(
        yaw=float(np.clip(yaw, -0.6, 0.6)),
        dx=dxn * width,
        dy=dyn * height,
        scale=float(np.clip(scale, 0.8, 1.2)),
        expression_phase=float(np.arctan2(sphi, cphi)),
    )


def pose_to_vector(pose, height, width):
    return np.array(
        [
            pose.yaw,
            pose.dx / width,
            pose.dy / height,
            pose.scale,
            np.sin(pose.expression_phase),
            np.cos(pose.expression_phase),
            0.0,
            0.0,
        ]
    )


class MotionRegressor(ag.Module):
    """Small conv net regressing the 8-dim motion vector from one square frame.

    Conv/pool stages halve the input down to a 4x4 grid, which the head
    flattens instead of pooling away; pose regression needs the layout, not
    just channel statistics.
    """

    def __init__(self, rng, input_hw=64, dtype=np.float32):
        super().__init__()
        stages = int(np.log2(input_hw / 4))
        if 4 * 2 ** stages != input_hw or stages < 1:
            raise ValueError(f"input_hw must be 4 * 2**k for k >= 1, got {input_hw}")
        self.input_hw = input_hw
        widths = [24] + [48] * (stages - 2) + [64] if stages >= 2 else [24]
        cin = 6  # rgb + normalized luminance + its two gradients
        for i, cout in enumerate(widths):
            self.add_child(f"c{i}", ag.Conv2d(cin, cout, 3, rng, dtype=dtype))
            cin = cout
        self.stages = stages
        self.add_child("fc0", ag.Linear(cin * 4 * 4, 128, rng, dtype=dtype))
        self.add_child("head", ag.Linear(128, 8, rng, dtype=dtype))

    def __call__(self, x):
        if x.data.shape[2:] != (self.input_hw, self.input_hw):
            raise ValueError(
                f"motion regressor expects {self.input_hw}x{self.input_hw} input, got {x.data.shape[2:]}")
        h = x
        for i in range(self.stages):
            h = ag.leaky_relu(self._children[f"c{i}"](h))
            h = ag.avg_pool2(h)
        h = ag.flatten_spatial(h)
        h = ag.leaky_relu(self._children["fc0"](h))
        return self._children["head"](h)


def estimate_motion(frame, pose=None, regressor=None, mode="passthrough"):
    """Describe one frame's motion.

    Passthrough mode wraps the supplied ground-truth pose. Learned mode runs
    the regressor on the frame (H, W, 3) and decodes pose parameters from the
    predicted vector.
    """
    if mode == "passthrough":
        if pose is None:
            raise ValueError("passthrough motion needs ground-truth pose parameters")
        return MotionDescriptor(mode="passthrough", pose=pose, vector=tuple(pose_to_vector(pose, frame.shape[0], frame.shape[1])))
    if mode == "learned":
        if regressor is None:
            raise ValueError("learned motion needs a trained regressor")
        x = ag.Tensor(_regressor_input(frame, regressor.input_hw))
        vec = regressor(x).data[0]
        return MotionDescriptor(mode="learned", pose=_vector_to_pose(vec, frame.shape[0], frame.shape[1]), vector=tuple(float(v) for v in vec))
    raise ValueError(f"unknown motion mode {mode!r}")


def _regressor_input(frame, size):
    h, w = frame.shape[:2]
    if (h, w) != (size, size):
        fy, fx = h // size, w // size
        if fy * size != h or fx * size != w:
            raise ValueError(f"learned motion needs a frame size divisible by {size}")
        frame = frame.reshape(size, fy, size, fx, 3).mean(axis=(1, 3))
    # colors vary per identity; standardized luminance and its gradients hand
    # the net geometry cues it would otherwise have to relearn per palette
    lum = frame @ np.array([0.299, 0.587, 0.114])
    lum = (lum - lum.mean()) / (lum.std() + 1e-6)
    gy, gx = np.gradient(lum)
    planes = np.concatenate([np.transpose(frame, (2, 0, 1)), lum[None], gx[None], gy[None]])
    return planes[None].astype(np.float32)


def train_motion_regressor(frames, poses, seed=0, steps=400, lr=2e-3, batch_size=16, input_hw=None):
    """Fit a MotionRegressor to (frame, pose) pairs by mean squared error."""
    rng = np.random.default_rng(seed)
    h, w = frames[0].shape[:2]
    net = MotionRegressor(rng, input_hw=min(h, w) if input_hw is None else input_hw)
    xs = np.concatenate([_regressor_input(f, net.input_hw) for f in frames])
    ys = np.stack([pose_to_vector(p, h, w) for p in poses]).astype(np.float32)
    opt = ag.Adam(net.named_params(), lr=lr, betas=(0.9, 0.999))
    for step in range(steps):
        # plain regression benefits from a coarse-to-fine rate drop
        opt.lr = lr * (0.1 if step >= steps * 3 // 4 else 0.3 if step >= steps // 2 else 1.0)
        idx = rng.integers(0, len(xs), size=min(batch_size, len(xs)))
        xb = ag.Tensor(xs[idx])
        target = ys[idx]
        opt.zero_grad()
        pred = net(xb)
        # yaw is the hardest component and the one callers care most about
        diff = (pred - target) * np.array([2, 1, 1, 1, 1, 1, 1, 1], dtype=np.float32)
        loss = (diff * diff).mean()
        loss.backward()
        opt.step()
    return net


def feature_grid_matrix(pose_src, pose_dst, image_hw, feature_hw):
    """Similarity from source feature-grid coords to driving feature-grid coords (x, y)."""
    ih, iw = image_hw
    fh, fw = feature_hw
    t_img = pose_transfer_matrix(pose_src, pose_dst, ih, iw)
    ry, rx = ih / fh, iw / fw
    # feature cell centers sit at image position r * f + (r - 1) / 2
    s = np.array([[rx, 0.0, (rx - 1) / 2.0], [0.0, ry, (ry - 1) / 2.0], [0.0, 0.0, 1.0]])
    return np.linalg.inv(s) @ t_img @ s


def warp_features(m_s, m_d, f_h, image_hw):
    """Resample hair features from the source pose onto the driving pose's grid.

    f_h is a Tensor (N, C, h, w). Cells that sample outside the grid read
    zero. Identical descriptors return f_h unchanged.
    """
    if m_s.mode != m_d.mode:
        raise ValueError(f"motion modes differ: {m_s.mode} vs {m_d.mode}")
    if m_s.pose == m_d.pose:
        return f_h
    fh, fw = f_h.data.shape[2:]
    t_feat = feature_grid_matrix(m_s.pose, m_d.pose, image_hw, (fh, fw))
    # affine_sample wants output (row, col) -> source coords
    sample = (_XY_SWAP3 @ np.linalg.inv(t_feat) @ _XY_SWAP3)[:2, :]
    return ag.affine_sample(f_h, sample, mode="zeros")
