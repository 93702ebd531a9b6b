"""Session fixtures shared by the acceptance suite and the trained-model tests.

One toy training run feeds every test that needs a working model; it is
deliberately small (32x32 frames, a few hundred steps) so the whole suite
stays desk-sized.
"""

import time

import numpy as np
import pytest

from hairanim import synthdata as sd
from hairanim import training as tr
from hairanim.compositor import CompositeConfig, make_pseudo_driving
from hairanim.metrics import masked_l1, masked_ssim
from hairanim.model import AnimationModel

ACCEPT_HW = 32
TRAIN_SEED_BASE = 500
HELDOUT_SEED_BASE = 600


def make_videos(base, count, frames=16, hw=ACCEPT_HW):
    return [
        sd.generate_portrait_video(
            sd.random_portrait_spec(base + i, num_frames=frames, height=hw, width=hw))
        for i in range(count)
    ]


@pytest.fixture(scope="session")
def trained_setup():
    """Two-phase toy training; returns the model plus everything around it."""
    train_videos = make_videos(TRAIN_SEED_BASE, 8)
    heldout = make_videos(HELDOUT_SEED_BASE, 4)
    bank = sd.build_hair_bank(height=ACCEPT_HW, width=ACCEPT_HW)
    cfg = tr.TrainConfig(learning_rate=1e-3, batch_size=4, seed=0)
    weights = tr.LossWeights(lambda_adv=0.1)
    model = AnimationModel(np.random.default_rng(cfg.seed))
    disc = tr.PatchDiscriminator(np.random.default_rng(cfg.seed + 1))
    start = time.time()
    history = tr.two_phase_train(train_videos, bank, model, disc, cfg=cfg,
                                 steps_a=300, steps_b=300, weights=weights)
    return {
        "model": model,
        "discriminator": disc,
        "videos": train_videos,
        "heldout": heldout,
        "bank": bank,
        "cfg": cfg,
        "weights": weights,
        "history": history,
        "train_seconds": time.time() - start,
        "hw": ACCEPT_HW,
    }


@pytest.fixture(scope="session")
def heldout_eval(trained_setup):
    """Shared 200-triplet held-out evaluation of the trained model.

    Each triplet pairs a raw source frame with a hair-swapped pseudo driving
    frame of the same subject; the model must put the source hair back while
    copying everything outside the hair region from the driving frame.
    """
    model = trained_setup["model"]
    heldout = trained_setup["heldout"]
    bank = trained_setup["bank"]
    comp = CompositeConfig()
    rng = np.random.default_rng(123)
    out_colors, src_colors, pseudo_colors, ssims, l1s = [], [], [], [], []
    for _ in range(200):
        v = heldout[int(rng.integers(len(heldout)))]
        tri = sd.sample_training_triplet(v, bank, rng)
        i, j = tri.source_index, tri.driving_index
        poses = v.spec.pose_trajectory
        pseudo, m_c = make_pseudo_driving(
            v.frames[j], v.hair_masks[j], poses[j], bank[tri.bank_index], comp)
        out = model.animate_frame(v.frames[i], poses[i], pseudo, poses[j],
                                  m_c.astype(np.float64))
        m_hair = v.hair_masks[j]
        out_colors.append(out[m_hair.astype(bool)].mean(axis=0))
        src_colors.append(v.frames[i][v.hair_masks[i].astype(bool)].mean(axis=0))
        pseudo_colors.append(pseudo[m_c.astype(bool)].mean(axis=0))
        ssims.append(masked_ssim(out, v.frames[j], 1.0 - m_hair))
        l1s.append(masked_l1(out, v.frames[j], 1.0 - m_hair))
    return {
        "out_colors": np.asarray(out_colors),
        "src_colors": np.asarray(src_colors),
        "pseudo_colors": np.asarray(pseudo_colors),
        "ssims": np.asarray(ssims, dtype=np.float64),
        "l1s": np.asarray(l1s, dtype=np.float64),
    }
