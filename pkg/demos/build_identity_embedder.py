"""Train the frozen face embedder that ships with the package.

Run from anywhere:

    python3 demos/build_identity_embedder.py

Renders a few dozen synthetic subjects, fits the triplet-margin embedder,
verifies the same-identity vs cross-identity cosine gap on held-out subjects
and writes src/hairanim/assets/identity_embedder.ckpt. Takes about a minute.
"""

import pathlib

import numpy as np

from hairanim import metrics as mx
from hairanim import synthdata as sd

TRAIN_SEED_BASE = 100_000
HELDOUT_SEED_BASE = 200_000
REQUIRED_GAP = 0.3


def build_set(seed0, n_ids, frames=4):
    vids, labels, masks = [], [], []
    for k in range(n_ids):
        spec = sd.random_portrait_spec(seed0 + k, num_frames=frames, motion_scale=1.2)
        v = sd.generate_portrait_video(spec)
        vids.append(v.frames)
        labels.append(k)
        masks.append(v.face_masks)
    return vids, labels, masks


def cosine_gap(emb, vids, masks, pairs=100, seed=1):
    rng = np.random.default_rng(seed)
    same, cross = [], []
    for _ in range(pairs):
        i = int(rng.integers(len(vids)))
        t1, t2 = rng.choice(len(vids[i]), size=2, replace=False)
        same.append(mx.identity_similarity(vids[i][t1], vids[i][t2], emb, masks[i][t1], masks[i][t2]))
        j = int(rng.integers(len(vids) - 1))
        j += j >= i
        t3 = int(rng.integers(len(vids[j])))
        cross.append(mx.identity_similarity(vids[i][t1], vids[j][t3], emb, masks[i][t1], masks[j][t3]))
    return float(np.mean(same)), float(np.mean(cross))


def main():
    print("rendering 60 training subjects ...")
    vids, labels, masks = build_set(TRAIN_SEED_BASE, 60)
    print("training embedder (400 triplet steps) ...")
    emb = mx.train_identity_embedder(vids, labels, masks, steps=400, batch_size=8, seed=0)

    hv, _, hm = build_set(HELDOUT_SEED_BASE, 25, frames=5)
    same, cross = cosine_gap(emb, hv, hm)
    gap = same - cross
    print(f"held-out cosine: same-identity {same:.4f}, cross-identity {cross:.4f}, gap {gap:.4f}")
    if gap < REQUIRED_GAP:
        raise SystemExit(f"gap {gap:.4f} below the required {REQUIRED_GAP}; not saving")

    out = pathlib.Path(__file__).resolve().parents[1] / "src" / "hairanim" / "assets" / mx._ASSET_NAME
    out.parent.mkdir(parents=True, exist_ok=True)
    mx.save_identity_embedder(emb, out)
    print(f"saved {out}")


if __name__ == "__main__":
    main()
