"""Decoupled training: reconstruction against the true driving frame while the
context input carries deliberately wrong hair, so hair appearance can only be
learned from the source pathway.

Runs in two phases. Phase A warm-trains the hair encoder, warper, context
pathway and synthesis trunk on plain reconstruction (the driving frame itself
is the context input). Phase B freezes those and trains only the context
encoder and the gated fusion blocks on pseudo driving frames.
"""

import dataclasses
import io
import os
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .compositor import CompositeConfig, make_pseudo_driving
from .decoder import FUSION_MODES, DecoderConfig
from .metrics import masked_ssim
from .model import AnimationModel, frame_to_tensor
from .synthdata import sample_training_triplet

_EPS = 1e-8

PHASE_A_FREEZE = ("encoders.context.", "decoder.gf.")
PHASE_B_FREEZE = ("encoders.hair.", "encoders.motion.", "decoder.context.", "decoder.synthesis.")

CSV_HEADER = "step,adv,p,rec,hair,face,total"

ABLATION_SETTINGS = {
    1: {"fusion_mode": "none", "hmg_enabled": True, "pixel_blend": False},
    2: {"fusion_mode": "none", "hmg_enabled": True, "pixel_blend": True},
    3: {"fusion_mode": "single_scale", "hmg_enabled": True, "pixel_blend": False},
    4: {"fusion_mode": "multi_scale", "hmg_enabled": False, "pixel_blend": False},
    5: {"fusion_mode": "multi_scale", "hmg_enabled": True, "pixel_blend": False},
}


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries the offending step's terms."""


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    lambda_p: float = 1.0
    lambda_rec: float = 1.0
    lambda_hair: float = 1.0
    lambda_face: float = 1.0

    def __post_init__(self):
        for name, v in self.as_dict().items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


@dataclass
class LossReport:
    step: int
    adv: float
    perceptual: float
    rec: float
    hair: float
    face: float
    total: float

    def csv_row(self):
        vals = (self.adv, self.perceptual, self.rec, self.hair, self.face, self.total)
        return f"{self.step}," + ",".join(f"{v:.8g}" for v in vals)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-5
    batch_size: int = 4
    epochs: int = 1
    seed: int = 0
    freeze: tuple = ()
    ablation_setting: int = 5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.ablation_setting not in ABLATION_SETTINGS:
            raise ValueError(f"ablation_setting must be in 1..5, got {self.ablation_setting}")


# -- loss terms ---------------------------------------------------------------


def _as_image_tensor(x, dtype=np.float32):
    if isinstance(x, ag.Tensor):
        return x
    return frame_to_tensor(x, dtype)


def _mask_plane(mask, like):
    m = np.asarray(mask, dtype=np.float64)
    n, _, h, w = like.data.shape
    if m.shape == (h, w):
        m = np.broadcast_to(m, (n, 1, h, w))
    if m.shape != (n, 1, h, w):
        raise ValueError(f"mask shape {np.asarray(mask).shape} does not match frames {(h, w)}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("mask values must lie in [0, 1]")
    return m


def localized_l1(i_d, i_p, mask, raw_sum=False):
    """Mask-weighted L1 between frames, averaged over masked elements.

    The raw_sum flag skips the normalization and returns the plain weighted
    sum. Accepts (H, W, 3) arrays or (N, 3, H, W) tensors.
    """
    d = _as_image_tensor(i_d)
    p = _as_image_tensor(i_p)
    if d.data.shape != p.data.shape:
        raise ValueError(f"frame shapes differ: {d.data.shape} vs {p.data.shape}")
    m = _mask_plane(mask, p)
    weighted = (p - d).abs() * m.astype(p.data.dtype)
    if raw_sum:
        return weighted.sum()
    return weighted.sum() / (float(m.sum()) * 3.0 + _EPS)


def reconstruction_l1(i_d, i_p):
    """Plain mean absolute difference over all pixels and channels."""
    d = _as_image_tensor(i_d)
    p = _as_image_tensor(i_p)
    if d.data.shape != p.data.shape:
        raise ValueError(f"frame shapes differ: {d.data.shape} vs {p.data.shape}")
    return (p - d).abs().mean()


class FeatureExtractor(ag.Module):
    """Fixed random-weight conv pyramid used as the perceptual feature space.

    The weights are derived from one hard-coded seed and never trained;
    gradients still flow through them into the compared frames. Random conv
    features are a serviceable stand-in for a pretrained perceptual net at
    this scale.
    """

    SEED = 90901
    _CHANNELS = (12, 24, 32)

    def __init__(self, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(self.SEED)
        cin = 3
        for i, cout in enumerate(self._CHANNELS):
            self.add_child(f"c{i}", ag.Conv2d(cin, cout, 3, rng, dtype=dtype))
            cin = cout
        for t in self.named_params().values():
            t.requires_grad = False

    def levels(self, x):
        outs = []
        h = x
        for i in range(len(self._CHANNELS)):
            h = ag.leaky_relu(self._children[f"c{i}"](h))
            outs.append(h)
            if i < len(self._CHANNELS) - 1:
                h = ag.avg_pool2(h)
        return outs


_feature_net = None


def default_feature_extractor():
    global _feature_net
    if _feature_net is None:
        _feature_net = FeatureExtractor()
    return _feature_net


def perceptual_loss(i_d, i_p, feature_net=None):
    """Sum over extractor levels of the mean absolute feature difference."""
    net = feature_net if feature_net is not None else default_feature_extractor()
    d = _as_image_tensor(i_d)
    p = _as_image_tensor(i_p)
    total = None
    for fd, fp in zip(net.levels(d), net.levels(p)):
        term = (fp - fd).abs().mean()
        total = term if total is None else total + term
    return total


class PatchDiscriminator(ag.Module):
    """Four-layer conv net scoring overlapping patches; logits, no sigmoid."""

    def __init__(self, rng, base=32, dtype=np.float32):
        super().__init__()
        self.add_child("c0", ag.Conv2d(3, base, 3, rng, dtype=dtype))
        self.add_child("c1", ag.Conv2d(base, base * 2, 3, rng, dtype=dtype))
        self.add_child("c2", ag.Conv2d(base * 2, base * 2, 3, rng, dtype=dtype))
        self.add_child("c3", ag.Conv2d(base * 2, 1, 3, rng, dtype=dtype))

    def __call__(self, x):
        h = ag.avg_pool2(ag.leaky_relu(self._children["c0"](x)))
        h = ag.avg_pool2(ag.leaky_relu(self._children["c1"](h)))
        h = ag.leaky_relu(self._children["c2"](h))
        return self._children["c3"](h)


def adversarial_losses(i_d, i_p, discriminator):
    """Hinge losses: (generator term, discriminator term).

    The discriminator term sees the generated frame detached, so stepping it
    never pushes gradients into the generator, and vice versa.
    """
    real = _as_image_tensor(i_d)
    fake = _as_image_tensor(i_p)
    d_real = discriminator(real)
    d_fake_detached = discriminator(fake.detach())
    disc_loss = ag.relu(1.0 - d_real).mean() + ag.relu(1.0 + d_fake_detached).mean()
    gen_loss = -(discriminator(fake).mean())
    return gen_loss, disc_loss


def _scalar(v):
    return float(v.data) if isinstance(v, ag.Tensor) else float(v)


def total_loss(terms, weights, step=0):
    """Fold the five loss terms into a LossReport with the weighted total."""
    vals = {k: _scalar(terms[k]) for k in ("adv", "perceptual", "rec", "hair", "face")}
    w = weights.as_dict()
    total = (
        w["lambda_adv"] * vals["adv"]
        + w["lambda_p"] * vals["perceptual"]
        + w["lambda_rec"] * vals["rec"]
        + w["lambda_hair"] * vals["hair"]
        + w["lambda_face"] * vals["face"]
    )
    return LossReport(step=step, total=total, **vals)


def weighted_total_tensor(terms, weights):
    """Same weighting as total_loss but kept in the graph for backward."""
    order = (("adv", "lambda_adv"), ("perceptual", "lambda_p"), ("rec", "lambda_rec"), ("hair", "lambda_hair"), ("face", "lambda_face"))
    total = None
    for key, lam in order:
        term = terms[key] * float(getattr(weights, lam))
        total = term if total is None else total + term
    return total


# -- optimizer plumbing --------------------------------------------------------


def partition_params(model, freeze_prefixes):
    """Split named parameters into (trainable, frozen) by name prefix."""
    trainable, frozen = {}, {}
    for name, t in model.named_params().items():
        (frozen if any(name.startswith(p) for p in freeze_prefixes) else trainable)[name] = t
    return trainable, frozen


def build_optimizers(model, discriminator, cfg):
    trainable, _ = partition_params(model, cfg.freeze)
    if not trainable:
        raise ValueError("freeze set leaves no trainable generator parameters")
    opt_g = ag.Adam(trainable, lr=cfg.learning_rate)
    opt_d = ag.Adam(discriminator.named_params(), lr=cfg.learning_rate) if discriminator else None
    return opt_g, opt_d


# -- stepping ------------------------------------------------------------------


def train_step(batch, model, discriminator, opt_g, opt_d, weights=LossWeights(), feature_net=None, step=0):
    """One generator update plus one discriminator update on a sample batch.

    Each batch item is a dict with source / source_pose / driving /
    driving_pose / target / m_c / m_hair / m_face. Losses average over the
    batch. Raises TrainingDiverged on a non-finite total.
    """
    if not batch:
        raise ValueError("batch is empty")
    sums = {}
    disc_sum = None
    for s in batch:
        out = model.animate(s["source"], s["source_pose"], s["driving"], s["driving_pose"], s["m_c"])
        target = frame_to_tensor(s["target"], model.dtype)
        gen_adv, disc_adv = adversarial_losses(target, out, discriminator)
        terms = {
            "adv": gen_adv,
            "perceptual": perceptual_loss(target, out, feature_net),
            "rec": reconstruction_l1(target, out),
            "hair": localized_l1(target, out, s["m_hair"]),
            "face": localized_l1(target, out, s["m_face"]),
        }
        for k, t in terms.items():
            sums[k] = t if k not in sums else sums[k] + t
        disc_sum = disc_adv if disc_sum is None else disc_sum + disc_adv

    inv = 1.0 / len(batch)
    avg = {k: t * inv for k, t in sums.items()}
    total_t = weighted_total_tensor(avg, weights)
    report = total_loss(avg, weights, step=step)

    checked = [report.total, _scalar(disc_sum) * inv]
    if not all(np.isfinite(v) for v in checked):
        raise TrainingDiverged(f"non-finite loss at step {step}: generator {checked[0]}, discriminator {checked[1]}, terms {avg and {k: _scalar(v) for k, v in avg.items()}}")

    opt_g.zero_grad()
    total_t.backward()
    opt_g.step()
    if opt_d is not None:
        opt_d.zero_grad()
        (disc_sum * inv).backward()
        opt_d.step()
    return report


def sample_batch(videos, bank, batch_size, rng, pseudo, comp_cfg=CompositeConfig()):
    """Draw training samples; pseudo=True swaps the context input's hair."""
    items = []
    for _ in range(batch_size):
        v = videos[int(rng.integers(len(videos)))]
        tri = sample_training_triplet(v, bank, rng)
        i, j = tri.source_index, tri.driving_index
        poses = v.spec.pose_trajectory
        if pseudo:
            driving, m_c = make_pseudo_driving(v.frames[j], v.hair_masks[j], poses[j], bank[tri.bank_index], comp_cfg)
            m_c = m_c.astype(np.float64)
        else:
            driving, m_c = v.frames[j], v.hair_masks[j]
        items.append(
            {
                "source": v.frames[i],
                "source_pose": poses[i],
                "driving": driving,
                "driving_pose": poses[j],
                "target": v.frames[j],
                "m_c": m_c,
                "m_hair": v.hair_masks[j],
                "m_face": v.face_masks[j],
            }
        )
    return items


def append_loss_csv(path, reports):
    """Append LossReports to a CSV, writing the header on first use."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with io.open(path, "a", encoding="ascii") as f:
        if fresh:
            f.write(CSV_HEADER + "\n")
        for r in reports:
            f.write(r.csv_row() + "\n")


def train_loop(videos, bank, model, discriminator, cfg, steps, pseudo=False, weights=LossWeights(), feature_net=None, comp_cfg=CompositeConfig(), curve_path=None, rng=None, step_offset=0):
    """Run fixed-count training steps; returns the LossReport history."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    opt_g, opt_d = build_optimizers(model, discriminator, cfg)
    history = []
    for k in range(steps):
        batch = sample_batch(videos, bank, cfg.batch_size, rng, pseudo, comp_cfg)
        history.append(train_step(batch, model, discriminator, opt_g, opt_d, weights, feature_net, step=step_offset + k))
    if curve_path is not None:
        append_loss_csv(curve_path, history)
    return history


def two_phase_train(videos, bank, model, discriminator, cfg=TrainConfig(), steps_a=300, steps_b=300, weights=LossWeights(), feature_net=None, comp_cfg=CompositeConfig(), curve_path=None):
    """Warm-train the reconstruction pathways, then the fusion pathway.

    Phase A: plain reconstruction, context encoder and gated fusion frozen at
    their benign initialization. Phase B: pseudo driving frames, with only the
    context encoder and gated fusion blocks trainable. One seeded stream
    drives both phases, so runs are reproducible end to end.
    """
    rng = np.random.default_rng(cfg.seed)
    cfg_a = dataclasses.replace(cfg, freeze=PHASE_A_FREEZE)
    cfg_b = dataclasses.replace(cfg, freeze=PHASE_B_FREEZE)
    hist_a = train_loop(videos, bank, model, discriminator, cfg_a, steps_a, pseudo=False, weights=weights, feature_net=feature_net, comp_cfg=comp_cfg, curve_path=curve_path, rng=rng)
    hist_b = train_loop(videos, bank, model, discriminator, cfg_b, steps_b, pseudo=True, weights=weights, feature_net=feature_net, comp_cfg=comp_cfg, curve_path=curve_path, rng=rng, step_offset=steps_a)
    return {"phase_a": hist_a, "phase_b": hist_b}


# -- ablation ------------------------------------------------------------------


def ablation_decoder_config(setting, base=None):
    """Decoder configuration for one ablation setting."""
    if setting not in ABLATION_SETTINGS:
        raise ValueError(f"ablation setting must be in 1..5, got {setting}")
    base = base if base is not None else DecoderConfig()
    s = ABLATION_SETTINGS[setting]
    return dataclasses.replace(base, fusion_mode=s["fusion_mode"], hmg_enabled=s["hmg_enabled"])


def apply_pixel_blend(generated, driving, hair_mask, sigma=1.0):
    """Composite generated hair onto the driving frame through a blurred mask.

    Outside the blur support the result is the driving frame bit-exactly
    (the Gaussian kernel is finite, so far-away weights are true zeros).
    """
    from scipy.ndimage import gaussian_filter

    gen = np.asarray(generated, dtype=np.float64)
    drv = np.asarray(driving, dtype=np.float64)
    if gen.shape != drv.shape:
        raise ValueError(f"frame shapes differ: {gen.shape} vs {drv.shape}")
    m = np.clip(np.asarray(hair_mask, dtype=np.float64), 0.0, 1.0)
    g = np.clip(gaussian_filter(m, sigma), 0.0, 1.0) if sigma > 0 else m
    return g[..., None] * gen + (1.0 - g[..., None]) * drv


def heldout_ssim(model, videos, bank, rng, samples=20, comp_cfg=CompositeConfig(), pixel_blend=False, blur_sigma=1.0):
    """Mean non-hair masked SSIM of pseudo-frame reconstructions."""
    scores = []
    for _ in range(samples):
        v = videos[int(rng.integers(len(videos)))]
        tri = sample_training_triplet(v, bank, rng)
        i, j = tri.source_index, tri.driving_index
        poses = v.spec.pose_trajectory
        driving, m_c = make_pseudo_driving(v.frames[j], v.hair_masks[j], poses[j], bank[tri.bank_index], comp_cfg)
        out = model.animate_frame(v.frames[i], poses[i], driving, poses[j], m_c.astype(np.float64))
        if pixel_blend:
            out = apply_pixel_blend(out, driving, m_c.astype(np.float64), blur_sigma)
        s = masked_ssim(out, v.frames[j], 1.0 - v.hair_masks[j])
        if s is not None:
            scores.append(s)
    return float(np.mean(scores))


def run_ablation(setting, videos, bank, heldout_videos, cfg=TrainConfig(), steps_a=300, steps_b=300, weights=LossWeights(), eval_samples=20, comp_cfg=CompositeConfig(), image_hw=64):
    """Train one ablation setting end to end and score it on held-out videos.

    Returns (model, report). The report's masked_ssim drives trend
    comparisons across settings.
    """
    s = ABLATION_SETTINGS.get(setting)
    if s is None:
        raise ValueError(f"ablation setting must be in 1..5, got {setting}")
    cfg = dataclasses.replace(cfg, ablation_setting=setting)
    dec_cfg = ablation_decoder_config(setting)
    rng = np.random.default_rng(cfg.seed)
    model = AnimationModel(rng, dec_cfg=dec_cfg)
    disc = PatchDiscriminator(rng)
    model.check_frame_size((image_hw, image_hw))
    two_phase_train(videos, bank, model, disc, cfg=cfg, steps_a=steps_a, steps_b=steps_b, weights=weights, comp_cfg=comp_cfg)
    eval_rng = np.random.default_rng(cfg.seed + 7777)
    score = heldout_ssim(model, heldout_videos, bank, eval_rng, samples=eval_samples, comp_cfg=comp_cfg, pixel_blend=s["pixel_blend"], blur_sigma=comp_cfg.blur_sigma)
    report = {
        "setting": setting,
        "fusion_mode": s["fusion_mode"],
        "hmg_enabled": s["hmg_enabled"],
        "pixel_blend": s["pixel_blend"],
        "masked_ssim": score,
    }
    return model, report


# -- key=value config files ------------------------------------------------------


def parse_kv(text):
    """Parse `key = value` lines; blank lines and # comments are skipped."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ValueError(f"line {ln}: empty key")
        out[key] = value.strip()
    return out


def format_kv(mapping):
    return "".join(f"{k}={mapping[k]}\n" for k in sorted(mapping))


_TRAIN_FIELDS = {
    "learning_rate": float,
    "batch_size": int,
    "epochs": int,
    "seed": int,
    "ablation_setting": int,
}
_WEIGHT_FIELDS = ("lambda_adv", "lambda_p", "lambda_rec", "lambda_hair", "lambda_face")


def train_settings_from_kv(kv):
    """Split a parsed config into (TrainConfig, LossWeights, leftover keys)."""
    cfg_kwargs, weight_kwargs, extras = {}, {}, {}
    for key, value in kv.items():
        if key in _TRAIN_FIELDS:
            cfg_kwargs[key] = _TRAIN_FIELDS[key](value)
        elif key == "freeze":
            cfg_kwargs["freeze"] = tuple(p for p in (s.strip() for s in value.split(",")) if p)
        elif key in _WEIGHT_FIELDS:
            weight_kwargs[key] = float(value)
        else:
            extras[key] = value
    return TrainConfig(**cfg_kwargs), LossWeights(**weight_kwargs), extras
