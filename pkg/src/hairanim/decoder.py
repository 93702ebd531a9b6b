"""Two-pathway gated decoder turning warped hair features into frames.

The synthesis pathway carries the warped hair features toward the image.
The context pathway digests the driving frame's features. After each scale's
standard modulated residual block, a gated fusion step decides per element
whether the synthesis stream or the (re-modulated) context stream passes on.
A soft hair mask conditions that decision so hair regions lean on the
synthesis stream and everything else leans on the context stream.
"""

import numpy as np
from dataclasses import dataclass

from . import autograd as ag

FUSION_MODES = ("multi_scale", "single_scale", "none")
UPSAMPLE_MODES = ("nearest", "subpixel")


@dataclass(frozen=True)
class DecoderConfig:
    num_scales: int = 3
    channels: tuple = (64, 32, 16)
    feature_channels: int = 64
    gate_conv_kernel: int = 3
    hmg_enabled: bool = True
    fusion_mode: str = "multi_scale"
    modulation_hidden: int = 32
    upsample: str = "nearest"

    def __post_init__(self):
        if self.num_scales < 1:
            raise ValueError("num_scales must be >= 1")
        if len(self.channels) != self.num_scales:
            raise ValueError("channels must list one width per scale")
        if any(int(c) <= 0 for c in self.channels):
            raise ValueError("channel widths must be positive")
        if self.feature_channels <= 0 or self.modulation_hidden <= 0:
            raise ValueError("feature/hidden widths must be positive")
        if self.gate_conv_kernel < 1 or self.gate_conv_kernel % 2 == 0:
            raise ValueError("gate_conv_kernel must be odd and positive")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.upsample not in UPSAMPLE_MODES:
            raise ValueError(f"upsample must be one of {UPSAMPLE_MODES}")
        if self.upsample == "subpixel" and any(int(c) % 4 for c in self.channels):
            raise ValueError("subpixel upsampling needs channel widths divisible by 4")

    def width_after(self, k):
        """Stream width entering scale k + 1 (or the final conv)."""
        c = int(self.channels[k])
        return c // 4 if self.upsample == "subpixel" else c


class ModulationTrunk(ag.Module):
    """Shared 3x3 trunk mapping conditioning maps to scale/shift fields.

    The scale and shift convolutions start at zero with the scale bias at
    one, so an untrained block modulates nothing: scale 1, shift 0.
    """

    def __init__(self, rng, cond_channels, out_channels, hidden, dtype=np.float32):
        super().__init__()
        self.add_child("shared", ag.Conv2d(cond_channels, hidden, 3, rng, dtype=dtype))
        self.add_child("gamma", ag.Conv2d(hidden, out_channels, 3, rng, dtype=dtype, zero_init=True))
        self.add_child("beta", ag.Conv2d(hidden, out_channels, 3, rng, dtype=dtype, zero_init=True))
        self._children["gamma"].b.data[...] = 1.0

    def __call__(self, cond):
        h = ag.relu(self._children["shared"](cond))
        return self._children["gamma"](h), self._children["beta"](h)


class Spade(ag.Module):
    """Parameter-free spatial normalization followed by learned modulation."""

    def __init__(self, rng, channels, cond_channels, hidden, dtype=np.float32):
        super().__init__()
        self.add_child("trunk", ModulationTrunk(rng, cond_channels, channels, hidden, dtype=dtype))

    def __call__(self, h, cond):
        if h.data.shape[2:] != cond.data.shape[2:]:
            raise ValueError(
                f"conditioning spatial size {cond.data.shape[2:]} does not match activation {h.data.shape[2:]}")
        gamma, beta = self._children["trunk"](cond)
        return gamma * ag.instance_norm(h) + beta


class SpadeResBlock(ag.Module):
    """Residual block with modulated normalization before each convolution.

    The skip path is modulated too (then 1x1-projected) when the channel
    count changes, and is a plain identity otherwise.
    """

    def __init__(self, rng, cin, cout, cond_channels, hidden, dtype=np.float32):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.add_child("spade1", Spade(rng, cin, cond_channels, hidden, dtype=dtype))
        self.add_child("conv1", ag.Conv2d(cin, cout, 3, rng, dtype=dtype))
        self.add_child("spade2", Spade(rng, cout, cond_channels, hidden, dtype=dtype))
        self.add_child("conv2", ag.Conv2d(cout, cout, 3, rng, dtype=dtype))
        if cin != cout:
            self.add_child("spade_s", Spade(rng, cin, cond_channels, hidden, dtype=dtype))
            self.add_child("conv_s", ag.Conv2d(cin, cout, 1, rng, dtype=dtype, bias=False))

    def __call__(self, h, cond):
        c = self._children
        main = c["conv1"](ag.leaky_relu(c["spade1"](h, cond)))
        main = c["conv2"](ag.leaky_relu(c["spade2"](main, cond)))
        skip = h if self.cin == self.cout else c["conv_s"](c["spade_s"](h, cond))
        return main + skip


class GatedFusion(ag.Module):
    """Per-scale fusion of the synthesis stream with modulated context.

    The gate convolution starts at zero so the initial gate is 0.5
    everywhere, an even blend. The trailing convolution starts as an
    identity kernel so an untrained block passes its input through, up to
    the activation.
    """

    def __init__(self, rng, channels, cond_channels, gate_kernel, hidden, dtype=np.float32):
        super().__init__()
        self.add_child("norm", ModulationTrunk(rng, cond_channels + 1, channels, hidden, dtype=dtype))
        self.add_child("gate", ag.Conv2d(2 * channels, channels, gate_kernel, rng, dtype=dtype, zero_init=True))
        tail = ag.Conv2d(channels, channels, 3, rng, dtype=dtype)
        tail.w.data[...] = 0.0
        tail.w.data[np.arange(channels), np.arange(channels), 1, 1] = 1.0
        self.add_child("tail", tail)


def context_modulate(h_c_bar, f_c, mask_plane, trunk, hmg_enabled=True):
    """Modulate the normalized context activation by (features, mask).

    With the mask guidance disabled the mask channel is zeroed, which is
    exactly equivalent to convolving over the features alone while keeping
    parameter shapes independent of the switch.
    """
    n, _, h, w = f_c.data.shape
    if h_c_bar.data.shape[2:] != (h, w):
        raise ValueError("context activation and conditioning sizes differ")
    if not hmg_enabled:
        mask_plane = np.zeros((n, 1, h, w), dtype=f_c.data.dtype)
    else:
        mask_plane = np.asarray(mask_plane, dtype=f_c.data.dtype).reshape(n, 1, h, w)
    f_n = ag.concat_channels([f_c, ag.Tensor(mask_plane, requires_grad=False)])
    gamma, beta = trunk(f_n)
    return gamma * h_c_bar + beta


def compute_gate(h_w, h_c_mod, gate_conv):
    """Sigmoid of one convolution over the two concatenated streams."""
    if h_w.data.shape != h_c_mod.data.shape:
        raise ValueError(f"gate inputs differ in shape: {h_w.data.shape} vs {h_c_mod.data.shape}")
    return ag.sigmoid(gate_conv(ag.concat_channels([h_w, h_c_mod])))


def gated_fuse(h_c_mod, h_w, gate):
    """Elementwise convex blend: gate 1 keeps the synthesis stream."""
    g = gate.data if isinstance(gate, ag.Tensor) else np.asarray(gate)
    if h_c_mod.data.shape != h_w.data.shape or g.shape != h_w.data.shape:
        raise ValueError("fusion inputs must share one shape")
    if g.min() < 0.0 or g.max() > 1.0:
        raise ValueError("gate values must lie in [0, 1]")
    if not isinstance(gate, ag.Tensor):
        gate = ag.Tensor(g, requires_grad=False)
    return (1.0 - gate) * h_c_mod + gate * h_w


def resample_guidance(features, mask, target_hw):
    """Bring conditioning to a block's scale: features bilinearly, the mask
    by area averaging so soft coverage fractions survive downsampling."""
    th, tw = int(target_hw[0]), int(target_hw[1])
    if th < 1 or tw < 1:
        raise ValueError("target size must be positive")
    out_f = features
    if features is not None and features.data.shape[2:] != (th, tw):
        out_f = ag.bilinear_resize(features, (th, tw))
    out_m = mask
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        h, w = m.shape[-2:]
        if (h, w) != (th, tw):
            if h % th or w % tw:
                raise ValueError(f"mask size {(h, w)} is not a multiple of target {(th, tw)}")
            lead = m.shape[:-2]
            out_m = m.reshape(lead + (th, h // th, tw, w // tw)).mean(axis=(-3, -1))
    return out_f, out_m


class Decoder(ag.Module):
    """K-scale decoder; each scale runs both pathways then fuses them.

    Activations upsample x2 after every scale, so the output resolution is
    the feature resolution times 2**num_scales. The final convolution plus a
    sigmoid maps to RGB in [0, 1].
    """

    def __init__(self, rng, cfg=None, dtype=np.float32):
        super().__init__()
        self.cfg = cfg = DecoderConfig() if cfg is None else cfg
        ctx, syn, gf = ag.Module(), ag.Module(), ag.Module()
        cin = cfg.feature_channels
        for k, cout in enumerate(cfg.channels):
            syn.add_child(f"b{k}", SpadeResBlock(rng, cin, cout, cfg.feature_channels, cfg.modulation_hidden, dtype=dtype))
            ctx.add_child(f"b{k}", SpadeResBlock(rng, cin, cout, cfg.feature_channels, cfg.modulation_hidden, dtype=dtype))
            gf.add_child(f"b{k}", GatedFusion(rng, cout, cfg.feature_channels, cfg.gate_conv_kernel, cfg.modulation_hidden, dtype=dtype))
            cin = cfg.width_after(k)
        syn.add_child("final", ag.Conv2d(cfg.width_after(cfg.num_scales - 1), 3, 3, rng, dtype=dtype))
        self.add_child("context", ctx)
        self.add_child("synthesis", syn)
        self.add_child("gf", gf)

    def _fusion_scales(self):
        mode = self.cfg.fusion_mode
        if mode == "none":
            return set()
        if mode == "single_scale":
            return {0}
        return set(range(self.cfg.num_scales))

    def __call__(self, f_w, f_c, m_c, gate_override=None, return_trace=False):
        cfg = self.cfg
        if gate_override not in (None, 0, 1):
            raise ValueError("gate_override must be None, 0 or 1")
        if f_w.data.shape != f_c.data.shape:
            raise ValueError("feature volumes must share one shape")
        n, c, h0, w0 = f_w.data.shape
        if c != cfg.feature_channels:
            raise ValueError(f"expected {cfg.feature_channels} feature channels, got {c}")
        full = (h0 * 2 ** cfg.num_scales, w0 * 2 ** cfg.num_scales)
        mask = np.asarray(m_c, dtype=np.float64)
        if mask.ndim == 2:
            mask = np.broadcast_to(mask, (n,) + mask.shape)
        if mask.shape != (n,) + full:
            raise ValueError(f"mask shape {mask.shape} does not match output {(n,) + full}")

        active = self._fusion_scales()
        last_ctx = max(active) if active else -1
        h_w, h_c = f_w, f_c
        trace = []
        for k in range(cfg.num_scales):
            target = (h0 * 2 ** k, w0 * 2 ** k)
            f_w_k, _ = resample_guidance(f_w, None, target)
            f_c_k, m_k = resample_guidance(f_c, mask, target)
            h_w = self._children["synthesis"]._children[f"b{k}"](h_w, f_w_k)
            entry = {"h_w": h_w, "h_c": None, "h_c_mod": None, "gate": None}
            if k <= last_ctx:
                h_c = self._children["context"]._children[f"b{k}"](h_c, f_c_k)
                entry["h_c"] = h_c
            gfk = self._children["gf"]._children[f"b{k}"]
            if k in active:
                h_c_mod = context_modulate(
                    ag.instance_norm(h_c), f_c_k, m_k, gfk._children["norm"], hmg_enabled=cfg.hmg_enabled)
                entry["h_c_mod"] = h_c_mod
                if gate_override is None:
                    gate = compute_gate(h_w, h_c_mod, gfk._children["gate"])
                    entry["gate"] = gate
                    fused = gated_fuse(h_c_mod, h_w, gate)
                else:
                    entry["gate"] = float(gate_override)
                    fused = h_w if gate_override == 1 else h_c_mod
            else:
                fused = h_w
            entry["fused"] = fused
            up = ag.pixel_shuffle2 if cfg.upsample == "subpixel" else ag.upsample_nearest2
            h_w = up(ag.leaky_relu(gfk._children["tail"](fused)))
            if k < cfg.num_scales - 1 and k < last_ctx:
                h_c = up(h_c)
            entry["out"] = h_w
            trace.append(entry)
        out = ag.sigmoid(self._children["synthesis"]._children["final"](h_w))
        return (out, trace) if return_trace else out

    def decode_frame(self, f_w, f_c, m_c, gate_override=None):
        """Run one sample through and return an (H, W, 3) frame in [0, 1]."""
        out = self(f_w, f_c, m_c, gate_override=gate_override)
        return np.transpose(out.data[0], (1, 2, 0)).astype(np.float64)
