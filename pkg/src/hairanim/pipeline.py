"""End-to-end inference: pick an anchor frame, give it the reference hair,
then animate every driving frame against that one fixed appearance source.

The driving video may live in memory or on disk as a PNG directory; frames
are pulled through a small read-ahead buffer and written out as soon as they
are generated, so peak memory does not grow with video length.
"""

from __future__ import annotations

import collections
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint
from .compositor import CompositeConfig, synthesize_anchor
from .decoder import DecoderConfig, FUSION_MODES
from .encoders import EncoderConfig
from .metrics import masked_l1
from .model import MOTION_MODES, AnimationModel, tensor_to_frame
from .synthdata import (
    PortraitVideo,
    load_frame,
    read_manifest,
    save_frame_files,
    write_manifest,
)
from .training import apply_pixel_blend

__all__ = [
    "ANCHOR_STRATEGIES",
    "DEFAULT_POSE_WEIGHTS",
    "PipelineConfig",
    "InferenceResult",
    "VideoSource",
    "open_video",
    "pose_distance",
    "select_anchor_frame",
    "load_animation_model",
    "run_inference",
]

ANCHOR_STRATEGIES = ("pose_similar", "first_frame", "explicit_index")

# yaw, normalized translation, scale
DEFAULT_POSE_WEIGHTS = (1.0, 0.5, 0.5)


@dataclass
class PipelineConfig:
    """Wiring for one inference run.

    motion_mode / fusion_mode / hmg_enabled override the checkpoint's own
    metadata when set; leave them None to trust the checkpoint. output_dir
    None keeps generated frames in memory instead of streaming them to disk.
    """

    checkpoint: str | None = None
    motion_mode: str | None = None
    fusion_mode: str | None = None
    hmg_enabled: bool | None = None
    anchor_strategy: str = "pose_similar"
    anchor_index: int = 0
    composite: CompositeConfig = field(default_factory=CompositeConfig)
    pose_weights: tuple = DEFAULT_POSE_WEIGHTS
    read_ahead: int = 4
    nonhair_l1_threshold: float = 0.05
    pixel_blend: bool = False
    output_dir: str | None = None

    def __post_init__(self):
        if self.anchor_strategy not in ANCHOR_STRATEGIES:
            raise ValueError(f"anchor_strategy must be one of {ANCHOR_STRATEGIES}, got {self.anchor_strategy!r}")
        if self.motion_mode is not None and self.motion_mode not in MOTION_MODES:
            raise ValueError(f"motion_mode must be one of {MOTION_MODES}, got {self.motion_mode!r}")
        if self.fusion_mode is not None and self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.anchor_index < 0:
            raise ValueError("anchor_index must be nonnegative")
        if self.read_ahead < 1:
            raise ValueError("read_ahead must be at least 1")
        weights = tuple(float(w) for w in self.pose_weights)
        if len(weights) != 3 or any(not math.isfinite(w) or w < 0 for w in weights) or sum(weights) == 0:
            raise ValueError("pose_weights needs three nonnegative finite entries, not all zero")
        self.pose_weights = weights
        if not (math.isfinite(self.nonhair_l1_threshold) and self.nonhair_l1_threshold > 0):
            raise ValueError("nonhair_l1_threshold must be a positive finite number")


class VideoSource:
    """Per-frame access to a driving video without assuming it fits in memory."""

    def __init__(self, spec):
        self.spec = spec

    @property
    def num_frames(self):
        return len(self.spec.pose_trajectory)

    def pose(self, t):
        return self.spec.pose_trajectory[t]

    def frame(self, t):
        raise NotImplementedError

    def hair_mask(self, t):
        raise NotImplementedError

    def face_mask(self, t):
        raise NotImplementedError


class _ArraySource(VideoSource):
    def __init__(self, video):
        super().__init__(video.spec)
        self._video = video

    def frame(self, t):
        return self._video.frames[t]

    def hair_mask(self, t):
        return self._video.hair_masks[t]

    def face_mask(self, t):
        return self._video.face_masks[t]


class _DirSource(VideoSource):
    """Lazy PNG reads; only the manifest is parsed up front."""

    def __init__(self, path):
        super().__init__(read_manifest(path))
        self._path = path

    def frame(self, t):
        return load_frame(self._path, t)

    def hair_mask(self, t):
        return load_frame(self._path, t, "hair")

    def face_mask(self, t):
        return load_frame(self._path, t, "face")


def open_video(source):
    """Accept a PortraitVideo, a frame directory path, or an existing source."""
    if isinstance(source, VideoSource):
        return source
    if isinstance(source, PortraitVideo):
        return _ArraySource(source)
    if isinstance(source, (str, os.PathLike)):
        if not os.path.isdir(source):
            raise FileNotFoundError(f"driving video directory not found: {source}")
        return _DirSource(os.fspath(source))
    raise TypeError(f"cannot read a video from {type(source).__name__}")


def pose_distance(a, b, weights=DEFAULT_POSE_WEIGHTS, height=64, width=64):
    """Weighted L2 over yaw, translation (in frame units) and scale."""
    wy, wt, ws = weights
    return math.sqrt(
        wy * (a.yaw - b.yaw) ** 2
        + wt * ((a.dx - b.dx) / width) ** 2
        + wt * ((a.dy - b.dy) / height) ** 2
        + ws * (a.scale - b.scale) ** 2
    )


def select_anchor_frame(video, reference_pose, weights=DEFAULT_POSE_WEIGHTS):
    """Index of the frame whose pose is closest to the reference; ties pick the
    earliest frame. Accepts a video (anything with .spec) or a pose sequence."""
    if hasattr(video, "spec"):
        poses = video.spec.pose_trajectory
        h, w = video.spec.height, video.spec.width
    else:
        poses = tuple(video)
        h = w = 64
    if not poses:
        raise ValueError("cannot pick an anchor from an empty video")
    return min(
        range(len(poses)),
        key=lambda t: (pose_distance(poses[t], reference_pose, weights, h, w), t),
    )


def load_animation_model(path, motion_mode=None, fusion_mode=None, hmg_enabled=None):
    """Rebuild the architecture a checkpoint describes, then load its weights.

    Explicit arguments win over the checkpoint metadata; the parameter table
    is identical across fusion settings so overrides stay loadable.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    _, meta = load_checkpoint(path)
    fusion = fusion_mode if fusion_mode is not None else meta.get("fusion_mode", "multi_scale")
    hmg = hmg_enabled if hmg_enabled is not None else meta.get("hmg_enabled", "True") == "True"
    motion = motion_mode if motion_mode is not None else meta.get("motion_mode", "passthrough")
    enc_cfg = EncoderConfig(
        in_channels=int(meta.get("enc_in", 3)),
        base_channels=int(meta.get("enc_base", 16)),
        depth=int(meta.get("enc_depth", 3)),
    )
    channels = tuple(int(c) for c in meta.get("dec_channels", "64,32,16").split(","))
    dec_cfg = DecoderConfig(
        num_scales=len(channels),
        channels=channels,
        feature_channels=enc_cfg.out_channels(),
        gate_conv_kernel=int(meta.get("dec_gate_kernel", 3)),
        modulation_hidden=int(meta.get("dec_hidden", 32)),
        upsample=meta.get("dec_upsample", "nearest"),
        fusion_mode=fusion,
        hmg_enabled=hmg,
    )
    model = AnimationModel(
        np.random.default_rng(0),
        enc_cfg=enc_cfg,
        dec_cfg=dec_cfg,
        motion_mode=motion,
    )
    _, meta = model.load(path)
    return model, meta


@dataclass
class InferenceResult:
    """What one run produced and where; frames is None when streamed to disk."""

    anchor_index: int
    anchor_frame: np.ndarray
    anchor_hair_mask: np.ndarray
    num_frames: int
    output_dir: str | None
    frames: list | None
    hair_masks: list | None
    nonhair_l1: list
    empty_mask_frames: list
    flagged_frames: list


def _resolve_model(cfg, model):
    if model is not None:
        return model
    if cfg.checkpoint is None:
        raise ValueError("run_inference needs a model or a cfg.checkpoint path")
    loaded, _ = load_animation_model(
        cfg.checkpoint,
        motion_mode=cfg.motion_mode,
        fusion_mode=cfg.fusion_mode,
        hmg_enabled=cfg.hmg_enabled,
    )
    return loaded


def run_inference(driving, reference_frame, reference_hair_mask, reference_pose=None,
                  cfg=None, model=None):
    """Animate a driving video with the reference image's hair.

    One anchor frame is chosen, given the reference hair, and encoded once;
    every driving frame is then rendered against that fixed appearance source.
    Frames whose driving hair mask is empty are generated anyway and listed in
    empty_mask_frames; frames whose non-hair L1 against the driving frame
    exceeds the configured threshold land in flagged_frames.
    """
    cfg = cfg if cfg is not None else PipelineConfig()
    src = open_video(driving)
    total = src.num_frames
    if total == 0:
        raise ValueError("driving video has no frames")
    model = _resolve_model(cfg, model)

    reference_frame = np.asarray(reference_frame, dtype=np.float64)
    reference_hair_mask = np.asarray(reference_hair_mask, dtype=np.float64)
    if reference_pose is None:
        if model.motion_mode != "learned":
            raise ValueError("reference_pose is required unless the model estimates motion itself")
        reference_pose = model.describe_motion(reference_frame).pose

    if cfg.anchor_strategy == "first_frame":
        anchor = 0
    elif cfg.anchor_strategy == "explicit_index":
        anchor = cfg.anchor_index
        if anchor >= total:
            raise ValueError(f"anchor index {anchor} outside video of {total} frames")
    else:
        anchor = select_anchor_frame(src, reference_pose, cfg.pose_weights)

    anchor_pose = src.pose(anchor)
    i_s, i_s_mask = synthesize_anchor(
        src.frame(anchor), src.hair_mask(anchor), anchor_pose,
        reference_frame, reference_hair_mask, reference_pose,
        cfg.composite,
    )
    prepared = model.prepare_source(i_s, anchor_pose)

    out_dir = cfg.output_dir
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    frames_out = [] if out_dir is None else None
    masks_out = [] if out_dir is None else None
    nonhair = []
    empty = []
    flagged = []

    buf = collections.deque()
    next_load = 0
    for _ in range(total):
        while next_load < total and len(buf) < cfg.read_ahead:
            buf.append((
                next_load,
                src.frame(next_load),
                src.hair_mask(next_load),
                src.face_mask(next_load),
                src.pose(next_load),
            ))
            next_load += 1
        t, drv, m_hair, m_face, pose = buf.popleft()
        if float(np.sum(m_hair)) == 0.0:
            empty.append(t)
        gen = tensor_to_frame(model.animate_prepared(prepared, drv, pose, m_hair))
        if cfg.pixel_blend:
            gen = apply_pixel_blend(gen, drv, m_hair, sigma=cfg.composite.blur_sigma)
        score = masked_l1(gen, drv, 1.0 - np.asarray(m_hair, dtype=np.float64))
        nonhair.append(score)
        if score > cfg.nonhair_l1_threshold:
            flagged.append(t)
        if out_dir is not None:
            save_frame_files(out_dir, t, gen, m_hair, m_face)
        else:
            frames_out.append(gen)
            masks_out.append(np.asarray(m_hair))

    if out_dir is not None:
        write_manifest(out_dir, src.spec)

    return InferenceResult(
        anchor_index=anchor,
        anchor_frame=i_s,
        anchor_hair_mask=i_s_mask,
        num_frames=total,
        output_dir=out_dir,
        frames=frames_out,
        hair_masks=masks_out,
        nonhair_l1=nonhair,
        empty_mask_frames=empty,
        flagged_frames=flagged,
    )
