"""Generator assembly: hair/context encoders, feature warper, decoder.

One AnimationModel owns every trainable piece of the generator. Parameter
names group as encoders.hair.*, encoders.context.*, encoders.motion.* (only
in learned-motion mode) and decoder.*, which is also the naming contract of
saved checkpoints.
"""

import numpy as np

from . import autograd as ag
from . import checkpoint
from .decoder import Decoder, DecoderConfig
from .encoders import ConvEncoder, EncoderConfig, MotionRegressor, estimate_motion, warp_features

MOTION_MODES = ("passthrough", "learned")


def frame_to_tensor(frame, dtype=np.float32):
    """(H, W, 3) image in [0, 1] to a (1, 3, H, W) constant tensor."""
    arr = np.asarray(frame, dtype=dtype)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) frame, got {arr.shape}")
    return ag.Tensor(np.transpose(arr, (2, 0, 1))[None], requires_grad=False)


def tensor_to_frame(t):
    """(1, 3, H, W) tensor back to an (H, W, 3) float image."""
    data = t.data if isinstance(t, ag.Tensor) else np.asarray(t)
    if data.ndim != 4 or data.shape[0] != 1 or data.shape[1] != 3:
        raise ValueError(f"expected a (1, 3, H, W) tensor, got {data.shape}")
    return np.transpose(data[0], (1, 2, 0)).astype(np.float64)


class AnimationModel(ag.Module):
    """End-to-end generator I_p = decode(warp(E_H(I_s)), E_C(I_d), m_c)."""

    def __init__(self, rng, enc_cfg=None, dec_cfg=None, motion_mode="passthrough", dtype=np.float32):
        super().__init__()
        if motion_mode not in MOTION_MODES:
            raise ValueError(f"motion_mode must be one of {MOTION_MODES}")
        self.enc_cfg = enc_cfg = EncoderConfig() if enc_cfg is None else enc_cfg
        self.dec_cfg = dec_cfg = DecoderConfig() if dec_cfg is None else dec_cfg
        if enc_cfg.out_channels() != dec_cfg.feature_channels:
            raise ValueError(
                f"encoder emits {enc_cfg.out_channels()} channels but decoder expects {dec_cfg.feature_channels}")
        self.motion_mode = motion_mode
        self.dtype = dtype
        enc = ag.Module()
        enc.add_child("hair", ConvEncoder(enc_cfg, rng, dtype=dtype))
        enc.add_child("context", ConvEncoder(enc_cfg, rng, dtype=dtype))
        if motion_mode == "learned":
            enc.add_child("motion", MotionRegressor(rng, dtype=dtype))
        self.add_child("encoders", enc)
        self.add_child("decoder", Decoder(rng, dec_cfg, dtype=dtype))

    # frames divide by 2**depth for encoding, and the decoder multiplies the
    # feature size back by 2**num_scales; both must land on the same full size
    def check_frame_size(self, hw):
        h, w = hw
        down, up = 2 ** self.enc_cfg.depth, 2 ** self.dec_cfg.num_scales
        if h % down or w % down or (h // down) * up != h or (w // down) * up != w:
            raise ValueError(f"frame size {hw} does not fit the encoder/decoder pyramid")

    def _as_tensor(self, frame):
        if isinstance(frame, ag.Tensor):
            return frame
        return frame_to_tensor(frame, dtype=self.dtype)

    def encode_hair_features(self, frame):
        return self._children["encoders"]._children["hair"](self._as_tensor(frame))

    def encode_context(self, frame):
        return self._children["encoders"]._children["context"](self._as_tensor(frame))

    def describe_motion(self, frame, pose=None):
        return estimate_motion(
            frame,
            pose=pose,
            regressor=self._children["encoders"]._children.get("motion"),
            mode=self.motion_mode,
        )

    def prepare_source(self, source_frame, source_pose=None):
        """Encode the hair-appearance source once for reuse across many frames."""
        src = self._as_tensor(source_frame)
        hw = src.data.shape[2:]
        self.check_frame_size(hw)
        src_nd = source_frame if not isinstance(source_frame, ag.Tensor) else tensor_to_frame(src)
        return {
            "features": self.encode_hair_features(src),
            "motion": self.describe_motion(src_nd, pose=source_pose),
            "image_hw": hw,
        }

    def animate_prepared(self, prepared, driving_frame, driving_pose, m_c, gate_override=None):
        """Generator pass against a prepare_source() result."""
        drv = self._as_tensor(driving_frame)
        hw = prepared["image_hw"]
        if drv.data.shape[2:] != hw:
            raise ValueError("source and driving frames must share one size")
        drv_nd = driving_frame if not isinstance(driving_frame, ag.Tensor) else tensor_to_frame(drv)
        m_d = self.describe_motion(drv_nd, pose=driving_pose)
        f_w = warp_features(prepared["motion"], m_d, prepared["features"], hw)
        f_c = self.encode_context(drv)
        return self._children["decoder"](f_w, f_c, m_c, gate_override=gate_override)

    def animate(self, source_frame, source_pose, driving_frame, driving_pose, m_c, gate_override=None):
        """Full generator pass; returns the (1, 3, H, W) output tensor."""
        prepared = self.prepare_source(source_frame, source_pose)
        return self.animate_prepared(prepared, driving_frame, driving_pose, m_c, gate_override)

    def animate_frame(self, source_frame, source_pose, driving_frame, driving_pose, m_c, gate_override=None):
        out = self.animate(source_frame, source_pose, driving_frame, driving_pose, m_c, gate_override)
        return tensor_to_frame(out)

    def save(self, path, extra_arrays=None, meta=None):
        arrays = self.state_arrays()
        for k, v in (extra_arrays or {}).items():
            if k in arrays:
                raise ValueError(f"extra array name collides with a model parameter: {k}")
            arrays[k] = v
        info = {"motion_mode": self.motion_mode,
                "fusion_mode": self.dec_cfg.fusion_mode,
                "hmg_enabled": str(self.dec_cfg.hmg_enabled),
                "enc_in": str(self.enc_cfg.in_channels),
                "enc_base": str(self.enc_cfg.base_channels),
                "enc_depth": str(self.enc_cfg.depth),
                "dec_channels": ",".join(str(c) for c in self.dec_cfg.channels),
                "dec_gate_kernel": str(self.dec_cfg.gate_conv_kernel),
                "dec_hidden": str(self.dec_cfg.modulation_hidden),
                "dec_upsample": self.dec_cfg.upsample}
        info.update(meta or {})
        checkpoint.save_checkpoint(path, arrays, meta=info)

    def load(self, path):
        """Load matching parameters; returns (leftover arrays, meta)."""
        arrays, meta = checkpoint.load_checkpoint(path)
        own = self.named_params()
        self.load_state({k: v for k, v in arrays.items() if k in own})
        return {k: v for k, v in arrays.items() if k not in own}, meta
