"""Evaluation suite: masked fidelity, identity similarity, temporal proxies,
Fréchet feature distances and the amortized anchor-cost model.

Every metric is a pure function. The flicker / smoothness / background /
coherence scores are simple proxies, monotone in the phenomenon they track,
and are labeled `*_proxy` in reports to make that explicit.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .checkpoint import load_checkpoint, save_checkpoint

PSNR_CAP = 99.0
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2
_EPS = 1e-8


# -- masked fidelity ---------------------------------------------------------


def _frame_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W[, C]) frames, got {a.shape}")
    return a, b


def _mask_for(a, mask):
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match frame {a.shape[:2]}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("mask values must lie in [0, 1]")
    return m


def masked_l1(a, b, mask):
    """Mean absolute difference over mask-weighted pixels; empty mask -> None."""
    a, b = _frame_pair(a, b)
    m = _mask_for(a, mask)
    wsum = float(m.sum())
    if wsum == 0.0:
        return None
    num = float((np.abs(a - b) * m[..., None]).sum())
    return num / (wsum * a.shape[2] + _EPS)


def masked_psnr(a, b, mask):
    """Peak signal-to-noise ratio over the masked region, in dB, capped at 99.

    Inputs are expected in [0, 1]. An empty mask leaves the value undefined
    and returns None so reports can mark it absent.
    """
    a, b = _frame_pair(a, b)
    m = _mask_for(a, mask)
    wsum = float(m.sum())
    if wsum == 0.0:
        return None
    mse = float((((a - b) ** 2) * m[..., None]).sum() / (wsum * a.shape[2]))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def _gaussian_window(size=7, sigma=1.5):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _window_moments(plane, win):
    # valid-mode correlation keeps only centers whose window fits entirely
    from scipy.signal import correlate

    return correlate(plane, win, mode="valid")


def masked_ssim(a, b, mask):
    """Structural similarity averaged over mask-selected window centers.

    Uses a 7x7 Gaussian window (sigma 1.5) and the usual stability constants
    for a unit dynamic range. Only centers whose full window fits inside the
    frame participate; a mask with no interior centers returns None.
    """
    a, b = _frame_pair(a, b)
    m = _mask_for(a, mask)
    win = _gaussian_window()
    pad = win.shape[0] // 2
    if a.shape[0] < win.shape[0] or a.shape[1] < win.shape[1]:
        raise ValueError("frame smaller than the SSIM window")
    centers = m[pad:-pad, pad:-pad] >= 0.5
    if not centers.any():
        return None
    total = 0.0
    for c in range(a.shape[2]):
        pa, pb = a[:, :, c], b[:, :, c]
        mu_a = _window_moments(pa, win)
        mu_b = _window_moments(pb, win)
        var_a = _window_moments(pa * pa, win) - mu_a * mu_a
        var_b = _window_moments(pb * pb, win) - mu_b * mu_b
        cov = _window_moments(pa * pb, win) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
        den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
        total += float((num / den)[centers].mean())
    return total / a.shape[2]


# -- identity embedding ------------------------------------------------------

EMBED_DIM = 32
_EMBED_CHANNELS = (16, 24, 32, EMBED_DIM)
_ASSET_NAME = "identity_embedder.ckpt"


class IdentityEmbedder(ag.Module):
    """Four-layer convolutional face embedder with a 32-dim pooled output.

    Trained once on synthetic identities with a triplet margin loss and
    shipped frozen; inputs are face-masked frames in [0, 1]. Embeddings are
    centered by a stored mean vector, which sharpens cosine contrast without
    touching the distances the margin loss was trained on.
    """

    def __init__(self, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        cin = 3
        for i, cout in enumerate(_EMBED_CHANNELS):
            self.add_child(f"c{i}", ag.Conv2d(cin, cout, 3, rng, dtype=dtype))
            cin = cout
        self.center = self.add_param("center", np.zeros(EMBED_DIM, dtype=dtype))
        self.center.requires_grad = False
        self.dtype = dtype

    def __call__(self, x):
        h = x
        for i in range(len(_EMBED_CHANNELS)):
            h = ag.leaky_relu(self._children[f"c{i}"](h))
            if i < len(_EMBED_CHANNELS) - 1:
                h = ag.avg_pool2(h)
        return ag.global_avg_pool(h)

    def embed(self, frame, mask=None):
        """Embed one (H, W, 3) frame, optionally face-masked, to a (32,) vector."""
        f = np.asarray(frame, dtype=np.float64)
        if f.ndim != 3 or f.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) frame, got {f.shape}")
        if mask is not None:
            f = f * _mask_for(f, mask)[..., None]
        x = ag.Tensor(f.transpose(2, 0, 1)[None].astype(self.dtype), requires_grad=False)
        return self(x).data[0].astype(np.float64) - self.center.data.astype(np.float64)


def save_identity_embedder(embedder, path):
    arrays = {k: t.data for k, t in embedder.named_params().items()}
    save_checkpoint(path, arrays, {"kind": "identity_embedder", "dim": str(EMBED_DIM)})


def load_identity_embedder(path=None):
    """Load the frozen face embedder, by default the copy shipped in the package."""
    if path is None:
        from importlib import resources

        path = resources.files("hairanim").joinpath("assets", _ASSET_NAME)
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "identity_embedder":
        raise ValueError(f"{path} is not an identity embedder checkpoint")
    emb = IdentityEmbedder()
    emb.load_state(arrays)
    for t in emb.named_params().values():
        t.requires_grad = False
    return emb


def train_identity_embedder(
    videos,
    labels,
    face_masks=None,
    steps=400,
    batch_size=8,
    margin=0.5,
    norm_penalty=0.05,
    lr=1e-3,
    seed=0,
):
    """Fit the embedder with a triplet margin loss over identity labels.

    videos: list of (T, H, W, 3) frame arrays, one per subject; labels give
    the subject id per video; face_masks optionally pre-mask each frame.
    Returns the trained embedder with its center vector filled in.

    The squared-norm penalty matters: without it the margin can be met by
    inflating embedding norms while directions collapse together.
    """
    if len(videos) != len(labels) or len(videos) < 2:
        raise ValueError("need at least two labeled subjects")
    by_label = {}
    for v, lab, msk in zip(videos, labels, face_masks or [None] * len(videos)):
        frames = np.asarray(v, dtype=np.float64)
        if msk is not None:
            frames = frames * np.asarray(msk, dtype=np.float64)[..., None]
        by_label.setdefault(lab, []).extend(frames)
    labs = sorted(by_label)
    pools = {k: np.stack(v) for k, v in by_label.items()}
    if any(len(p) < 2 for p in pools.values()):
        raise ValueError("every subject needs at least two frames")

    rng = np.random.default_rng(seed)
    emb = IdentityEmbedder(rng)
    opt = ag.Adam(emb.named_params(), lr=lr, betas=(0.9, 0.999))
    ones = ag.Tensor(np.ones((EMBED_DIM, 1), dtype=emb.dtype), requires_grad=False)

    def batch_tensor(frames):
        arr = np.stack(frames).transpose(0, 3, 1, 2).astype(emb.dtype)
        return ag.Tensor(arr, requires_grad=False)

    for _ in range(steps):
        anchors, positives, negatives = [], [], []
        for _ in range(batch_size):
            ia = int(rng.integers(len(labs)))
            ib = int(rng.integers(len(labs) - 1))
            if ib >= ia:
                ib += 1
            la, ln = labs[ia], labs[ib]
            pa = pools[la]
            i = int(rng.integers(len(pa)))
            j = int(rng.integers(len(pa) - 1))
            if j >= i:
                j += 1
            anchors.append(pa[i])
            positives.append(pa[j])
            negatives.append(pools[ln][int(rng.integers(len(pools[ln])))])
        ea = emb(batch_tensor(anchors))
        ep = emb(batch_tensor(positives))
        en = emb(batch_tensor(negatives))
        dp = ag.linear((ea - ep) * (ea - ep), ones)
        dn = ag.linear((ea - en) * (ea - en), ones)
        loss = ag.relu(dp - dn + margin).mean()
        loss = loss + ((ea * ea).mean() + (ep * ep).mean() + (en * en).mean()) * norm_penalty
        opt.zero_grad()
        loss.backward()
        opt.step()

    # up to two frames per subject give a stable, cheap estimate of the mean
    samples = [p[k] for p in pools.values() for k in range(min(2, len(p)))]
    emb.center.data[...] = 0.0
    center = np.mean([emb.embed(f) for f in samples], axis=0)
    emb.center.data[...] = center.astype(emb.dtype)
    return emb


def identity_similarity(a, b, embedder=None, mask_a=None, mask_b=None):
    """Cosine similarity of L2-normalized face embeddings of two frames."""
    if embedder is None:
        embedder = load_identity_embedder()
    ea = embedder.embed(a, mask_a)
    eb = embedder.embed(b, mask_b)
    na, nb = float(np.linalg.norm(ea)), float(np.linalg.norm(eb))
    if na < _EPS or nb < _EPS:
        return 1.0 if np.array_equal(ea, eb) else 0.0
    return float(np.clip(np.dot(ea, eb) / (na * nb), -1.0, 1.0))


# -- temporal proxies --------------------------------------------------------


def _video_array(video, min_frames):
    v = np.asarray(getattr(video, "frames", video), dtype=np.float64)
    if v.ndim != 4:
        raise ValueError(f"expected (T, H, W, C) frames, got shape {v.shape}")
    if v.shape[0] < min_frames:
        raise ValueError(f"need at least {min_frames} frames, got {v.shape[0]}")
    return v


def temporal_flicker(video):
    """1 minus the mean absolute frame-to-frame change; static video scores 1."""
    v = _video_array(video, 2)
    d = float(np.abs(np.diff(v, axis=0)).mean())
    return float(np.clip(1.0 - d, 0.0, 1.0))


def motion_smoothness(video):
    """1 minus the mean second-difference magnitude; linear fades score 1."""
    v = _video_array(video, 3)
    d2 = v[2:] - 2.0 * v[1:-1] + v[:-2]
    return float(np.clip(1.0 - float(np.abs(d2).mean()), 0.0, 1.0))


def background_consistency(video, nonbackground_masks):
    """Flicker score restricted to pixels outside every frame's subject mask.

    nonbackground_masks holds, per frame, 1 where the subject (face or hair)
    sits; the score averages |frame difference| where consecutive frames are
    both background. Returns None when no background pixel pair exists.
    """
    v = _video_array(video, 2)
    m = np.asarray(nonbackground_masks, dtype=np.float64)
    if m.shape != v.shape[:3]:
        raise ValueError(f"mask shape {m.shape} does not match video {v.shape[:3]}")
    bg = 1.0 - np.clip(m, 0.0, 1.0)
    w = bg[:-1] * bg[1:]
    den = float(w.sum()) * v.shape[3]
    if den == 0.0:
        return None
    num = float((np.abs(np.diff(v, axis=0)) * w[..., None]).sum())
    return float(np.clip(1.0 - num / den, 0.0, 1.0))


def frame_coherence(video, embedder=None):
    """Mean cosine similarity of consecutive-frame feature embeddings.

    Returns None for single-frame input (no consecutive pairs). embedder may
    be any frame -> vector callable; defaults to the fixed frame extractor.
    """
    v = np.asarray(getattr(video, "frames", video), dtype=np.float64)
    if v.ndim != 4:
        raise ValueError(f"expected (T, H, W, C) frames, got shape {v.shape}")
    if v.shape[0] < 2:
        return None
    fn = embedder if embedder is not None else frame_features
    feats = np.stack([np.asarray(fn(f), dtype=np.float64) for f in v])
    sims = []
    for t in range(len(feats) - 1):
        na, nb = np.linalg.norm(feats[t]), np.linalg.norm(feats[t + 1])
        if na < _EPS or nb < _EPS:
            sims.append(1.0 if np.array_equal(feats[t], feats[t + 1]) else 0.0)
        else:
            sims.append(float(np.dot(feats[t], feats[t + 1]) / (na * nb)))
    return float(np.clip(np.mean(sims), 0.0, 1.0))


# -- feature extractors for distributional scores ----------------------------

FRAME_FEATURE_DIM = 8
CLIP_LENGTH = 8
CLIP_FEATURE_DIM = 16

_frame_net = None


def _get_frame_net():
    global _frame_net
    if _frame_net is None:
        rng = np.random.default_rng(61409)
        net = ag.Module()
        net.add_child("c0", ag.Conv2d(3, 8, 3, rng))
        net.add_child("c1", ag.Conv2d(8, FRAME_FEATURE_DIM, 3, rng))
        for t in net.named_params().values():
            t.requires_grad = False
        _frame_net = net
    return _frame_net


def frame_features(frame):
    """Fixed random-weight conv features of one frame, an 8-dim vector."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) frame, got {f.shape}")
    if f.shape[0] % 4 or f.shape[1] % 4:
        raise ValueError("frame sides must be multiples of 4")
    net = _get_frame_net()
    x = ag.Tensor(f.transpose(2, 0, 1)[None].astype(np.float32), requires_grad=False)
    h = ag.avg_pool2(ag.leaky_relu(net._children["c0"](x)))
    h = ag.avg_pool2(ag.leaky_relu(net._children["c1"](h)))
    return ag.global_avg_pool(h).data[0].astype(np.float64)


def clip_features(clip):
    """Features of one 8-frame clip: per-dim mean plus mean absolute change."""
    v = _video_array(clip, CLIP_LENGTH)
    if v.shape[0] != CLIP_LENGTH:
        raise ValueError(f"clips are exactly {CLIP_LENGTH} frames, got {v.shape[0]}")
    feats = np.stack([frame_features(f) for f in v])
    return np.concatenate([feats.mean(axis=0), np.abs(np.diff(feats, axis=0)).mean(axis=0)])


def video_clip_features(video):
    """Non-overlapping 8-frame clip features, (num_clips, 16); remainder dropped."""
    v = _video_array(video, 1)
    clips = v.shape[0] // CLIP_LENGTH
    return np.stack([clip_features(v[k * CLIP_LENGTH : (k + 1) * CLIP_LENGTH]) for k in range(clips)]) if clips else np.zeros((0, CLIP_FEATURE_DIM))


def frechet_distance(features_a, features_b):
    """Fréchet distance between two Gaussian fits of feature samples.

    ||mu_a - mu_b||^2 + Tr(Ca + Cb - 2 (Ca Cb)^(1/2)); the matrix square
    root goes through symmetric eigendecompositions with eigenvalues floored
    at zero. Each sample set needs at least dim+1 rows.
    """
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValueError("feature sets must be 2-D with a common dimension")
    dim = fa.shape[1]
    if fa.shape[0] < dim + 1 or fb.shape[0] < dim + 1:
        raise ValueError(f"need at least {dim + 1} samples per set for a {dim}-dim covariance")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    ca = np.atleast_2d(np.cov(fa, rowvar=False))
    cb = np.atleast_2d(np.cov(fb, rowvar=False))

    def sym_sqrt(mat):
        vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
        return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T

    sa = sym_sqrt(ca)
    cross_vals = np.linalg.eigvalsh((lambda m: (m + m.T) / 2.0)(sa @ cb @ sa))
    trace_cross = float(np.sqrt(np.maximum(cross_vals, 0.0)).sum())
    fd = float(((mu_a - mu_b) ** 2).sum() + ca.trace() + cb.trace() - 2.0 * trace_cross)
    return max(fd, 0.0)


# -- amortized cost ----------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    """One-time anchor synthesis cost plus steady per-frame animation cost."""

    anchor_cost_tflops: float = 74.23
    per_frame_tflops: float = 1.57

    def __post_init__(self):
        if self.anchor_cost_tflops <= 0 or self.per_frame_tflops <= 0:
            raise ValueError("cost terms must be positive")


def amortized_cost(n, model=CostModel()):
    """Average TFLOPs per generated frame when the anchor cost spreads over n frames."""
    if n < 1:
        raise ValueError(f"frame count must be at least 1, got {n}")
    return (model.anchor_cost_tflops + model.per_frame_tflops * n) / n


# -- report assembly ---------------------------------------------------------

REPORT_KEYS = (
    "psnr_nonhair",
    "ssim_nonhair",
    "l1_nonhair",
    "ids",
    "temporal_flicker_proxy",
    "background_consistency_proxy",
    "motion_smoothness_proxy",
    "frame_coherence_proxy",
    "frechet_frame",
    "frechet_video",
    "empty_mask_frames",
)

_TABLE_GROUPS = (
    ("quality", ("ids", "frechet_frame", "frechet_video")),
    ("non-hair fidelity", ("psnr_nonhair", "ssim_nonhair", "l1_nonhair")),
    (
        "temporal",
        (
            "temporal_flicker_proxy",
            "background_consistency_proxy",
            "motion_smoothness_proxy",
            "frame_coherence_proxy",
        ),
    ),
)


@dataclass
class EvalReport:
    per_video: list
    aggregate: dict

    def to_json(self):
        return json.dumps({"per_video": self.per_video, "aggregate": self.aggregate}, sort_keys=True, indent=2)

    def format_table(self):
        return format_report_table(self)


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_pair(generated, driving, hair_masks, face_masks, embedder=None):
    """Score one generated video against its driving video.

    Non-hair fidelity uses the complement of the driving hair mask; identity
    uses the driving face mask on both sides. Fréchet scores appear only when
    the video is long enough to fit the required sample counts.
    """
    gen = _video_array(generated, 1)
    drv = _video_array(driving, 1)
    if gen.shape != drv.shape:
        raise ValueError(f"video shapes differ: {gen.shape} vs {drv.shape}")
    hair = np.asarray(hair_masks, dtype=np.float64)
    face = np.asarray(face_masks, dtype=np.float64)
    t = gen.shape[0]

    psnrs, ssims, l1s, idss = [], [], [], []
    empty = []
    for k in range(t):
        nonhair = 1.0 - hair[k]
        psnrs.append(masked_psnr(gen[k], drv[k], nonhair))
        ssims.append(masked_ssim(gen[k], drv[k], nonhair))
        l1s.append(masked_l1(gen[k], drv[k], nonhair))
        if embedder is not None:
            idss.append(identity_similarity(gen[k], drv[k], embedder, face[k], face[k]))
        if float(hair[k].sum()) == 0.0:
            empty.append(k)

    subject = np.clip(hair + face, 0.0, 1.0)
    row = {
        "psnr_nonhair": _mean_or_none(psnrs),
        "ssim_nonhair": _mean_or_none(ssims),
        "l1_nonhair": _mean_or_none(l1s),
        "ids": _mean_or_none(idss),
        "temporal_flicker_proxy": temporal_flicker(gen) if t >= 2 else None,
        "background_consistency_proxy": background_consistency(gen, subject) if t >= 2 else None,
        "motion_smoothness_proxy": motion_smoothness(gen) if t >= 3 else None,
        "frame_coherence_proxy": frame_coherence(gen),
        "frechet_frame": None,
        "frechet_video": None,
        "empty_mask_frames": empty,
    }
    if t >= FRAME_FEATURE_DIM + 1:
        row["frechet_frame"] = frechet_distance(
            np.stack([frame_features(f) for f in gen]),
            np.stack([frame_features(f) for f in drv]),
        )
    if t // CLIP_LENGTH >= CLIP_FEATURE_DIM + 1:
        row["frechet_video"] = frechet_distance(video_clip_features(gen), video_clip_features(drv))
    return row


def evaluate_videos(pairs, embedder=None):
    """Build an EvalReport over (generated, driving, hair_masks, face_masks) tuples.

    The aggregate section averages per-video scores and re-pools frame and
    clip features across all videos, so Fréchet scores may exist in the
    aggregate even when every single video is too short for them.
    """
    per_video = []
    gen_f, drv_f, gen_c, drv_c = [], [], [], []
    for generated, driving, hair_masks, face_masks in pairs:
        per_video.append(evaluate_pair(generated, driving, hair_masks, face_masks, embedder))
        gen = _video_array(generated, 1)
        drv = _video_array(driving, 1)
        gen_f.extend(frame_features(f) for f in gen)
        drv_f.extend(frame_features(f) for f in drv)
        gen_c.extend(video_clip_features(gen))
        drv_c.extend(video_clip_features(drv))

    aggregate = {k: _mean_or_none([row[k] for row in per_video]) for k in REPORT_KEYS if k != "empty_mask_frames"}
    aggregate["empty_mask_frames"] = sorted(set(t for row in per_video for t in row["empty_mask_frames"]))
    if len(gen_f) >= FRAME_FEATURE_DIM + 1 and len(drv_f) >= FRAME_FEATURE_DIM + 1:
        aggregate["frechet_frame"] = frechet_distance(np.stack(gen_f), np.stack(drv_f))
    if len(gen_c) >= CLIP_FEATURE_DIM + 1 and len(drv_c) >= CLIP_FEATURE_DIM + 1:
        aggregate["frechet_video"] = frechet_distance(np.stack(gen_c), np.stack(drv_c))
    return EvalReport(per_video=per_video, aggregate=aggregate)


def _fmt(value):
    if value is None:
        return "-"
    if isinstance(value, list):
        return str(len(value))
    return f"{value:.4f}"


def format_report_table(report):
    """Aligned text table, one row per video plus an aggregate row."""
    cols = [key for _, keys in _TABLE_GROUPS for key in keys]
    short = {
        "ids": "ids",
        "frechet_frame": "fre_f",
        "frechet_video": "fre_v",
        "psnr_nonhair": "psnr",
        "ssim_nonhair": "ssim",
        "l1_nonhair": "l1",
        "temporal_flicker_proxy": "tf*",
        "background_consistency_proxy": "bc*",
        "motion_smoothness_proxy": "ms*",
        "frame_coherence_proxy": "fc*",
    }
    width = 9
    group_line = "video".ljust(8)
    for name, keys in _TABLE_GROUPS:
        group_line += ("| " + name).ljust(width * len(keys) + 2)
    head = "".ljust(8)
    for _, keys in _TABLE_GROUPS:
        head += "| " + "".join(short[k].ljust(width) for k in keys)
    lines = [group_line.rstrip(), head.rstrip(), "-" * len(head)]
    rows = [(str(i), row) for i, row in enumerate(report.per_video)] + [("all", report.aggregate)]
    for name, row in rows:
        line = name.ljust(8)
        for _, keys in _TABLE_GROUPS:
            line += "| " + "".join(_fmt(row[k]).ljust(width) for k in keys)
        lines.append(line.rstrip())
    lines.append("* proxy scores, not the published metric definitions")
    return "\n".join(lines)
