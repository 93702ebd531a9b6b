"""Procedural portrait-video synthesis with exact region masks.

Scenes are evaluated analytically per pixel: an elliptical face with eyes,
nose and a phase-driven mouth, a parametric hair silhouette layered on top,
and a flat or striped background. Translation pans the whole scene (camera
motion), while yaw and scale move the head relative to the background.
Frames are anti-aliased by 3x3 supersampling; masks are the exact binary
memberships at pixel centers, so hair and face masks never overlap.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

__all__ = [
    "PoseParams",
    "PortraitSpec",
    "PortraitVideo",
    "HairBankEntry",
    "TrainingTriplet",
    "IDENTITY_POSE",
    "HAIR_SHAPE_COUNT",
    "HAIR_PALETTE",
    "validate_spec",
    "render_frame",
    "derive_region_masks",
    "generate_portrait_video",
    "random_portrait_spec",
    "build_hair_bank",
    "sample_training_triplet",
    "save_video_dir",
    "load_video_dir",
    "pose_affine",
    "pose_transfer_matrix",
]

# Geometry constants live in canonical units: a 64-unit canvas scaled by
# min(H, W) / 64 at render time.
_CANVAS = 64.0
_FACE_AX, _FACE_AY = 13.0, 17.0
_EYE_OFF, _EYE_R = 5.5, 1.8
_NOSE_Y, _NOSE_R = 2.5, 1.2
_MOUTH_Y, _MOUTH_AX = 10.0, 4.5
_EYE_COLOR = np.array([0.08, 0.08, 0.10])
_MOUTH_COLOR = np.array([0.55, 0.12, 0.12])

HAIR_SHAPE_COUNT = 9  # shape 0 is bald; 1..8 are styled silhouettes

HAIR_PALETTE = np.array(
    [
        [0.05, 0.05, 0.05],  # black
        [0.42, 0.26, 0.12],  # brown
        [0.88, 0.74, 0.38],  # blonde
        [0.72, 0.16, 0.10],  # red
        [0.92, 0.90, 0.85],  # platinum
        [0.15, 0.25, 0.85],  # blue
        [0.10, 0.62, 0.25],  # green
        [0.58, 0.20, 0.75],  # violet
    ]
)

YAW_LIMIT = 0.6
SCALE_RANGE = (0.8, 1.2)


@dataclass(frozen=True)
class PoseParams:
    """Head pose for one frame: in-plane yaw (rad), pan in pixels, scale, mouth phase."""

    yaw: float = 0.0
    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0
    expression_phase: float = 0.0


IDENTITY_POSE = PoseParams()


@dataclass(frozen=True)
class PortraitSpec:
    """Full recipe for one deterministic portrait video."""

    identity_seed: int
    hair_color: tuple
    hair_shape_id: int
    face_color: tuple
    background_pattern_id: int
    pose_trajectory: tuple
    height: int = 64
    width: int = 64


@dataclass
class PortraitVideo:
    frames: np.ndarray  # (T, H, W, 3) float in [0, 1]
    hair_masks: np.ndarray  # (T, H, W) float binary
    face_masks: np.ndarray  # (T, H, W) float binary
    spec: PortraitSpec

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclass
class HairBankEntry:
    frame: np.ndarray
    hair_mask: np.ndarray
    face_mask: np.ndarray
    pose: PoseParams
    hair_shape_id: int
    hair_color: tuple


@dataclass
class TrainingTriplet:
    i_s: np.ndarray
    i_d: np.ndarray
    r_random: np.ndarray
    source_index: int
    driving_index: int
    bank_index: int


# -- validation --------------------------------------------------------------


def validate_pose(pose, height, width):
    if not (-YAW_LIMIT <= pose.yaw <= YAW_LIMIT):
        raise ValueError(f"yaw {pose.yaw} outside [-{YAW_LIMIT}, {YAW_LIMIT}]")
    if not (SCALE_RANGE[0] <= pose.scale <= SCALE_RANGE[1]):
        raise ValueError(f"scale {pose.scale} outside {SCALE_RANGE}")
    # pan bound keeps the head fully in frame at every allowed scale
    if abs(pose.dx) > width / 6.0 or abs(pose.dy) > height / 6.0:
        raise ValueError(f"translation ({pose.dx}, {pose.dy}) moves the head out of frame")


def validate_spec(spec):
    if spec.height < 16 or spec.width < 16 or spec.height % 8 or spec.width % 8:
        raise ValueError("frame size must be at least 16 and divisible by 8")
    if not (0 <= spec.hair_shape_id < HAIR_SHAPE_COUNT):
        raise ValueError(f"hair_shape_id {spec.hair_shape_id} outside [0, {HAIR_SHAPE_COUNT})")
    if len(spec.pose_trajectory) < 1:
        raise ValueError("pose trajectory must contain at least one frame")
    hair = np.asarray(spec.hair_color, dtype=np.float64)
    face = np.asarray(spec.face_color, dtype=np.float64)
    for name, c in (("hair_color", hair), ("face_color", face)):
        if c.shape != (3,) or c.min() < 0.0 or c.max() > 1.0:
            raise ValueError(f"{name} must be three channels in [0, 1]")
    if np.abs(hair - face).sum() < 0.15:
        raise ValueError("hair_color and face_color are too similar (L1 < 0.15)")
    for pose in spec.pose_trajectory:
        validate_pose(pose, spec.height, spec.width)
    return spec


# -- scene membership --------------------------------------------------------


def _in_ellipse(x, y, cx, cy, ax, ay):
    return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0


def _hair_membership(shape_id, hx, hy):
    """Boolean hair silhouette in canonical head coordinates (y grows downward)."""
    if shape_id == 0:
        return np.zeros_like(hx, dtype=bool)
    if shape_id == 1:  # short cap
        return _in_ellipse(hx, hy, 0, -8, 15, 12) & (hy <= -4)
    if shape_id == 2:  # bob framing the face
        return _in_ellipse(hx, hy, 0, -2, 16.5, 16) & (hy <= 4) & ~_in_ellipse(hx, hy, 0, 3, 10, 11)
    if shape_id == 3:  # long hair with side curtains
        top = _in_ellipse(hx, hy, 0, -6, 16, 13) & (hy <= 0)
        sides = (np.abs(hx) >= 10) & (np.abs(hx) <= 16.5) & (hy >= -8) & (hy <= 18)
        return top | sides
    if shape_id == 4:  # round afro
        return _in_ellipse(hx, hy, 0, -9, 16.5, 16.5) & ~_in_ellipse(hx, hy, 0, 4, 10.5, 12.5)
    if shape_id == 5:  # spiky
        base = _in_ellipse(hx, hy, 0, -8, 15, 11) & (hy <= -5)
        out = base
        for k in (-2, -1, 0, 1, 2):
            out = out | _in_ellipse(hx, hy, 5.5 * k, -15.0 + 0.8 * k * k, 3.2, 3.2)
        return out
    if shape_id == 6:  # asymmetric side sweep
        return _in_ellipse(hx, hy, -3.5, -7, 16, 11.5) & ((hy <= -3) | (hx <= -7))
    if shape_id == 7:  # cap with a top bun
        return (_in_ellipse(hx, hy, 0, -8, 15, 11) & (hy <= -4)) | _in_ellipse(hx, hy, 0, -21, 4.5, 4.5)
    if shape_id == 8:  # mohawk strip
        strip = (np.abs(hx) <= 3.2) & (hy >= -23) & (hy <= -6)
        return strip | (_in_ellipse(hx, hy, 0, -8, 13.5, 10) & (hy <= -7))
    raise ValueError(f"unknown hair shape {shape_id}")


def _background_colors(spec):
    rng = np.random.default_rng(np.uint64(spec.identity_seed) + np.uint64(977))
    c1 = rng.uniform(0.2, 0.8, size=3)
    c2 = np.clip(c1 + np.where(c1 < 0.5, 0.22, -0.22), 0.0, 1.0)
    return c1, c2


def _background_field(pattern_id, bx, by, c1, c2):
    pid = pattern_id % 5
    if pid == 0:
        sel = np.zeros_like(bx, dtype=bool)
    elif pid == 1:
        sel = (np.floor(by / 12.0).astype(np.int64) % 2) == 1
    elif pid == 2:
        sel = (np.floor(bx / 12.0).astype(np.int64) % 2) == 1
    elif pid == 3:
        sel = (np.floor((bx + by) / 14.0).astype(np.int64) % 2) == 1
    else:
        sel = ((np.floor(bx / 10.0) + np.floor(by / 10.0)).astype(np.int64) % 2) == 1
    out = np.where(sel[..., None], c2[None, None, :], c1[None, None, :])
    return out


def _scene_color(spec, pose, xs, ys):
    """Color and memberships at pan-adjusted image coordinates.

    Callers subtract the camera pan from integer pixel indices before adding
    subpixel offsets, so a panned frame evaluates bitwise-identical floats to
    the unpanned frame at the shifted pixel.
    """
    h, w = spec.height, spec.width
    unit = min(h, w) / _CANVAS
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    # camera pan already removed from xs/ys; yaw and scale move the head only
    bx = xs / unit
    by = ys / unit
    px = (xs - cx) / unit
    py = (ys - cy) / unit
    cosw, sinw = np.cos(pose.yaw), np.sin(pose.yaw)
    hx = (cosw * px + sinw * py) / pose.scale
    hy = (-sinw * px + cosw * py) / pose.scale

    c1, c2 = _background_colors(spec)
    color = _background_field(spec.background_pattern_id, bx, by, c1, c2)

    face = _in_ellipse(hx, hy, 0, 0, _FACE_AX, _FACE_AY)
    color = np.where(face[..., None], np.asarray(spec.face_color)[None, None, :], color)

    eyes = _in_ellipse(hx, hy, -_EYE_OFF, -4, _EYE_R, _EYE_R) | _in_ellipse(hx, hy, _EYE_OFF, -4, _EYE_R, _EYE_R)
    nose = _in_ellipse(hx, hy, 0, _NOSE_Y, _NOSE_R, _NOSE_R)
    mouth_open = 1.0 + 1.7 * (0.5 + 0.5 * np.sin(pose.expression_phase))
    mouth = _in_ellipse(hx, hy, 0, _MOUTH_Y, _MOUTH_AX, mouth_open)
    color = np.where((eyes & face)[..., None], _EYE_COLOR[None, None, :], color)
    color = np.where((nose & face)[..., None], (np.asarray(spec.face_color) * 0.75)[None, None, :], color)
    color = np.where((mouth & face)[..., None], _MOUTH_COLOR[None, None, :], color)

    hair = _hair_membership(spec.hair_shape_id, hx, hy)
    color = np.where(hair[..., None], np.asarray(spec.hair_color)[None, None, :], color)
    return color, hair, face


def derive_region_masks(spec, pose):
    """Exact binary (hair, face) masks at pixel centers; face excludes hair."""
    ys, xs = np.meshgrid(
        np.arange(spec.height, dtype=np.float64) - pose.dy,
        np.arange(spec.width, dtype=np.float64) - pose.dx,
        indexing="ij",
    )
    _, hair, face = _scene_color(spec, pose, xs, ys)
    hair_mask = hair.astype(np.float64)
    face_mask = (face & ~hair).astype(np.float64)
    return hair_mask, face_mask


def render_frame(spec, pose, supersample=3):
    """Render one anti-aliased frame plus its exact pre-anti-aliasing masks."""
    h, w, s = spec.height, spec.width, supersample
    offs = (np.arange(s, dtype=np.float64) - (s - 1) / 2.0) / s
    ys = ((np.arange(h, dtype=np.float64) - pose.dy)[:, None] + offs[None, :]).reshape(-1)
    xs = ((np.arange(w, dtype=np.float64) - pose.dx)[:, None] + offs[None, :]).reshape(-1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    color, _, _ = _scene_color(spec, pose, gx, gy)
    blocks = color.reshape(h, s, w, s, 3)
    mean = blocks.mean(axis=(1, 3))
    # pixels whose subsamples all agree keep the exact constant color
    uniform = np.all(blocks == blocks[:, :1, :, :1, :], axis=(1, 3))
    frame = np.where(uniform, blocks[:, 0, :, 0, :], mean)
    hair_mask, face_mask = derive_region_masks(spec, pose)
    return frame, hair_mask, face_mask


def generate_portrait_video(spec):
    """Deterministically render every frame of the trajectory."""
    validate_spec(spec)
    frames, hair_masks, face_masks = [], [], []
    for pose in spec.pose_trajectory:
        f, hm, fm = render_frame(spec, pose)
        frames.append(f)
        hair_masks.append(hm)
        face_masks.append(fm)
    return PortraitVideo(
        frames=np.stack(frames),
        hair_masks=np.stack(hair_masks),
        face_masks=np.stack(face_masks),
        spec=spec,
    )


# -- spec sampling -----------------------------------------------------------


def smooth_trajectory(rng, num_frames, height, width, motion_scale=1.0):
    """Sinusoidal yaw/pan/scale curves plus a steadily advancing mouth phase."""
    t = np.arange(num_frames, dtype=np.float64)
    two_pi = 2.0 * np.pi

    def curve(amp):
        freq = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0.0, two_pi)
        return amp * np.sin(two_pi * freq * t / max(num_frames, 2) + phase)

    yaw = curve(rng.uniform(0.15, 0.45) * motion_scale)
    dx = curve(rng.uniform(0.04, 0.10) * width * motion_scale)
    dy = curve(rng.uniform(0.03, 0.08) * height * motion_scale)
    scale = 1.0 + curve(rng.uniform(0.05, 0.15) * motion_scale)
    phase0 = rng.uniform(0.0, two_pi)
    phase = phase0 + two_pi * rng.uniform(0.5, 1.5) * t / max(num_frames, 2)
    return tuple(
        PoseParams(yaw=float(yaw[i]), dx=float(dx[i]), dy=float(dy[i]), scale=float(np.clip(scale[i], *SCALE_RANGE)), expression_phase=float(phase[i]))
        for i in range(num_frames)
    )


def _skin_color(rng):
    base = np.array([0.86, 0.66, 0.50])
    tone = rng.uniform(0.55, 1.1)
    jitter = rng.uniform(-0.06, 0.06, size=3)
    return np.clip(base * tone + jitter, 0.05, 0.98)


def random_portrait_spec(seed, num_frames=16, height=64, width=64, motion_scale=1.0, allow_bald=False):
    """Sample a valid spec with varied identity, hair style and motion."""
    rng = np.random.default_rng(seed)
    low = 0 if allow_bald else 1
    shape = int(rng.integers(low, HAIR_SHAPE_COUNT))
    face = _skin_color(rng)
    for _ in range(16):
        hair = HAIR_PALETTE[int(rng.integers(0, len(HAIR_PALETTE)))] + rng.uniform(-0.04, 0.04, size=3)
        hair = np.clip(hair, 0.0, 1.0)
        if np.abs(hair - face).sum() >= 0.25:
            break
    spec = PortraitSpec(
        identity_seed=int(seed),
        hair_color=tuple(float(c) for c in hair),
        hair_shape_id=shape,
        face_color=tuple(float(c) for c in face),
        background_pattern_id=int(rng.integers(0, 5)),
        pose_trajectory=smooth_trajectory(rng, num_frames, height, width, motion_scale),
        height=height,
        width=width,
    )
    return validate_spec(spec)


# -- hair bank ---------------------------------------------------------------

_BANK_FACE = (0.82, 0.64, 0.52)
_BANK_BG = 0


def build_hair_bank(height=64, width=64):
    """All 8 styled silhouettes in all 8 palette colors, rendered at identity pose."""
    entries = []
    for shape_id in range(1, HAIR_SHAPE_COUNT):
        for color in HAIR_PALETTE:
            spec = PortraitSpec(
                identity_seed=0,
                hair_color=tuple(float(c) for c in color),
                hair_shape_id=shape_id,
                face_color=_BANK_FACE,
                background_pattern_id=_BANK_BG,
                pose_trajectory=(IDENTITY_POSE,),
                height=height,
                width=width,
            )
            frame, hair_mask, face_mask = render_frame(spec, IDENTITY_POSE)
            entries.append(
                HairBankEntry(
                    frame=frame,
                    hair_mask=hair_mask,
                    face_mask=face_mask,
                    pose=IDENTITY_POSE,
                    hair_shape_id=shape_id,
                    hair_color=tuple(float(c) for c in color),
                )
            )
    return entries


def _same_style(entry, spec):
    return entry.hair_shape_id == spec.hair_shape_id and np.abs(np.asarray(entry.hair_color) - np.asarray(spec.hair_color)).sum() < 0.12


def sample_training_triplet(video, hair_bank, rng):
    """Draw (I_s, I_d, R_random): an ordered frame pair plus a wrong-hair reference.

    The frame pair is uniform over ordered pairs with distinct timestamps and
    the reference is uniform over bank entries whose style differs from the
    video's own hair.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    t = video.num_frames
    if t < 2:
        raise ValueError("triplet sampling needs a video with at least two frames")
    eligible = [k for k, e in enumerate(hair_bank) if not _same_style(e, video.spec)]
    if not eligible:
        raise ValueError("hair bank holds no style different from the video's own hair")
    i = int(rng.integers(0, t))
    j = int(rng.integers(0, t - 1))
    if j >= i:
        j += 1
    bank_index = eligible[int(rng.integers(0, len(eligible)))]
    return TrainingTriplet(
        i_s=video.frames[i],
        i_d=video.frames[j],
        r_random=hair_bank[bank_index].frame,
        source_index=i,
        driving_index=j,
        bank_index=bank_index,
    )


# -- pose algebra ------------------------------------------------------------


def pose_affine(pose, height, width):
    """Homogeneous 3x3 mapping canonical head coordinates to image (x, y) pixels."""
    unit = min(height, width) / _CANVAS
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    c, s = np.cos(pose.yaw), np.sin(pose.yaw)
    su = pose.scale * unit
    return np.array(
        [
            [su * c, -su * s, cx + pose.dx],
            [su * s, su * c, cy + pose.dy],
            [0.0, 0.0, 1.0],
        ]
    )


def pose_transfer_matrix(pose_src, pose_dst, height, width):
    """Image-space similarity sending content at pose_src to pose_dst (x, y convention)."""
    if pose_src == pose_dst:
        return np.eye(3)
    a_src = pose_affine(pose_src, height, width)
    a_dst = pose_affine(pose_dst, height, width)
    return a_dst @ np.linalg.inv(a_src)


# -- persistence ---------------------------------------------------------------

_FRAME_FMT = "frame_%05d.png"
_HAIR_FMT = "hair_%05d.png"
_FACE_FMT = "face_%05d.png"


def _save_png(path, array):
    arr = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _load_png(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def load_image(path):
    """Read any PNG as a float array in [0, 1] (grayscale stays 2-D)."""
    return _load_png(path)


def save_image(path, array):
    """Write a float array in [0, 1] as an 8-bit PNG."""
    _save_png(path, array)


def save_frame_files(out_dir, index, frame, hair_mask, face_mask):
    """Write one frame's three PNGs; callers stream long videos this way."""
    _save_png(os.path.join(out_dir, _FRAME_FMT % index), frame)
    _save_png(os.path.join(out_dir, _HAIR_FMT % index), hair_mask)
    _save_png(os.path.join(out_dir, _FACE_FMT % index), face_mask)


def write_manifest(out_dir, spec):
    t = len(spec.pose_trajectory)
    lines = [
        f"T={t} H={spec.height} W={spec.width}",
        f"identity_seed={spec.identity_seed}",
        f"hair_shape_id={spec.hair_shape_id}",
        f"background_pattern_id={spec.background_pattern_id}",
        "hair_color=" + " ".join(repr(float(c)) for c in spec.hair_color),
        "face_color=" + " ".join(repr(float(c)) for c in spec.face_color),
    ]
    for k, p in enumerate(spec.pose_trajectory):
        lines.append(f"pose {k} {p.yaw!r} {p.dx!r} {p.dy!r} {p.scale!r} {p.expression_phase!r}")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def save_video_dir(video, out_dir):
    """Write frames and masks as PNGs plus a plain-text manifest."""
    os.makedirs(out_dir, exist_ok=True)
    for k in range(video.num_frames):
        save_frame_files(out_dir, k, video.frames[k], video.hair_masks[k], video.face_masks[k])
    write_manifest(out_dir, video.spec)


def read_manifest(in_dir):
    """Parse a frame directory's manifest into a PortraitSpec, without pixels."""
    manifest = os.path.join(in_dir, "manifest.txt")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no manifest.txt under {in_dir}")
    fields = {}
    poses = {}
    with open(manifest) as fh:
        header = fh.readline().strip()
        m = re.match(r"T=(\d+) H=(\d+) W=(\d+)$", header)
        if not m:
            raise ValueError(f"malformed manifest header: {header!r}")
        t, h, w = (int(g) for g in m.groups())
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("pose "):
                parts = line.split()
                poses[int(parts[1])] = PoseParams(*(float(v) for v in parts[2:7]))
            else:
                key, _, val = line.partition("=")
                fields[key] = val
    if len(poses) != t:
        raise ValueError(f"manifest lists {len(poses)} poses for {t} frames")
    return PortraitSpec(
        identity_seed=int(fields["identity_seed"]),
        hair_color=tuple(float(v) for v in fields["hair_color"].split()),
        hair_shape_id=int(fields["hair_shape_id"]),
        face_color=tuple(float(v) for v in fields["face_color"].split()),
        background_pattern_id=int(fields["background_pattern_id"]),
        pose_trajectory=tuple(poses[k] for k in range(t)),
        height=h,
        width=w,
    )


def load_frame(in_dir, index, kind="frame"):
    """Load one PNG from a frame directory; kind is frame, hair or face."""
    fmt = {"frame": _FRAME_FMT, "hair": _HAIR_FMT, "face": _FACE_FMT}[kind]
    arr = _load_png(os.path.join(in_dir, fmt % index))
    return arr if kind == "frame" else np.round(arr)


def load_video_dir(in_dir):
    """Reconstruct a PortraitVideo from a directory written by save_video_dir."""
    spec = read_manifest(in_dir)
    t = len(spec.pose_trajectory)
    frames = np.stack([load_frame(in_dir, k) for k in range(t)])
    hair = np.stack([load_frame(in_dir, k, "hair") for k in range(t)])
    face = np.stack([load_frame(in_dir, k, "face") for k in range(t)])
    return PortraitVideo(frames=frames, hair_masks=hair, face_masks=face, spec=spec)
