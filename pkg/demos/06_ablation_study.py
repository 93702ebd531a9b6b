"""Train and score one ablation setting of the fusion architecture.

Settings 1 to 5 toggle fusion mode (none / single gate / multi-scale gates),
hair-mask guidance, and the optional pixel-space blend. Each run trains a
fresh model with the shared two-phase recipe and reports held-out non-hair
masked SSIM, so settings are comparable. Demo-sized step counts keep this
quick; the full study lives in the acceptance suite.
"""
import numpy as np

from hairanim import synthdata as sd
from hairanim import training as tr


def main():
    videos = [sd.generate_portrait_video(sd.random_portrait_spec(400 + i, num_frames=8, height=32, width=32))
              for i in range(3)]
    heldout = [sd.generate_portrait_video(sd.random_portrait_spec(450 + i, num_frames=8, height=32, width=32))
               for i in range(2)]
    bank = sd.build_hair_bank(height=32, width=32)
    cfg = tr.TrainConfig(learning_rate=1e-3, batch_size=4, seed=0)

    for setting in (1, 5):
        _, report = tr.run_ablation(setting, videos, bank, heldout, cfg,
                                    steps_a=30, steps_b=30,
                                    eval_samples=8, image_hw=32)
        print({k: (round(v, 4) if isinstance(v, float) else v) for k, v in report.items()})


if __name__ == "__main__":
    main()
