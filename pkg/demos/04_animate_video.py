"""Animate a driving video with reference hair, end to end.

Anchor selection picks the driving frame whose pose sits closest to the
reference pose, the anchor synthesizer transplants the hair once, and the
generator carries that anchor across every frame while streaming outputs to
disk. Uses the checkpoint from demo 03 when present, otherwise trains a
throwaway model for a few steps just to exercise the plumbing.
"""
from pathlib import Path

import numpy as np

from hairanim import synthdata as sd
from hairanim import training as tr
from hairanim.model import AnimationModel
from hairanim.pipeline import PipelineConfig, load_animation_model, run_inference, select_anchor_frame

HERE = Path(__file__).parent
OUT = HERE / "out" / "animate"
CKPT = HERE / "out" / "train" / "model.ckpt"


def get_model():
    if CKPT.exists():
        model, _ = load_animation_model(CKPT)
        print("loaded", CKPT)
        return model
    print("no checkpoint from demo 03, training a 40-step stand-in")
    videos = [sd.generate_portrait_video(sd.random_portrait_spec(300 + i, num_frames=8, height=32, width=32))
              for i in range(2)]
    bank = sd.build_hair_bank(height=32, width=32)
    model = AnimationModel(np.random.default_rng(0))
    disc = tr.PatchDiscriminator(np.random.default_rng(1))
    tr.two_phase_train(videos, bank, model, disc, tr.TrainConfig(seed=0), steps_a=20, steps_b=20)
    return model


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    model = get_model()
    drv = sd.generate_portrait_video(sd.random_portrait_spec(41, num_frames=10, height=32, width=32))
    ref = sd.generate_portrait_video(sd.random_portrait_spec(42, num_frames=1, height=32, width=32))

    anchor = select_anchor_frame(drv, ref.spec.pose_trajectory[0])
    print("anchor frame", anchor)

    cfg = PipelineConfig(output_dir=OUT / "generated")
    res = run_inference(drv, ref.frames[0], ref.hair_masks[0],
                        ref.spec.pose_trajectory[0], cfg, model=model)
    print(f"{res.num_frames} frames written, anchor {res.anchor_index}")
    if res.flagged_frames:
        print("non-hair drift flagged on frames", res.flagged_frames)
    sd.save_image(OUT / "anchor.png", res.anchor_frame)
    print("->", OUT)


if __name__ == "__main__":
    main()
