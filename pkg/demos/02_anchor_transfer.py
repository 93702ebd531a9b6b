"""Build an anchor frame: reference hair composited onto a driving identity.

The anchor synthesizer is the deterministic image-level oracle the video
pipeline leans on. It aligns the reference hair to the target pose, feathers
the seam, and returns the new frame plus its hair mask. The pseudo-driving
helper reuses the same machinery to make "same person, wrong hair" training
frames.
"""
from pathlib import Path

import numpy as np

from hairanim import synthdata as sd
from hairanim.compositor import CompositeConfig, make_pseudo_driving, synthesize_anchor

OUT = Path(__file__).parent / "out" / "anchor"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    ref = sd.generate_portrait_video(sd.random_portrait_spec(7, num_frames=1, height=64, width=64))
    drv = sd.generate_portrait_video(sd.random_portrait_spec(8, num_frames=6, height=64, width=64))

    anchor, anchor_mask = synthesize_anchor(
        drv.frames[2], drv.hair_masks[2], drv.spec.pose_trajectory[2],
        ref.frames[0], ref.hair_masks[0], ref.spec.pose_trajectory[0], CompositeConfig())
    sd.save_image(OUT / "reference.png", ref.frames[0])
    sd.save_image(OUT / "driving.png", drv.frames[2])
    sd.save_image(OUT / "anchor.png", anchor)

    # the anchor should carry the reference hair color inside its hair mask
    ref_color = ref.frames[0][ref.hair_masks[0].astype(bool)].mean(0)
    anc_color = anchor[anchor_mask.astype(bool)].mean(0)
    print("reference hair color", np.round(ref_color, 3))
    print("anchor hair color   ", np.round(anc_color, 3))

    pseudo, m_c = make_pseudo_driving(
        drv.frames[2], drv.hair_masks[2], drv.spec.pose_trajectory[2],
        sd.build_hair_bank(height=64, width=64)[0], CompositeConfig())
    sd.save_image(OUT / "pseudo_driving.png", pseudo)
    print(f"pseudo driving hair mask fill {m_c.mean():.3f} ->", OUT)


if __name__ == "__main__":
    main()
