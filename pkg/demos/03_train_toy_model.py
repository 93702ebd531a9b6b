"""Train the animation generator with the two-phase decoupling protocol.

Phase A teaches reconstruction on matching source/driving pairs while the
context-facing blocks stay at their benign initialization. Phase B swaps in
pseudo driving frames (right person, wrong hair) and trains only the context
encoder and gated fusion, so hair comes from the source and everything else
from the driving frame. Step counts here are demo-sized; raise them for
real quality (see the acceptance fixture for a calibrated recipe).
"""
from pathlib import Path

import numpy as np

from hairanim import synthdata as sd
from hairanim import training as tr
from hairanim.model import AnimationModel

OUT = Path(__file__).parent / "out" / "train"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    videos = [sd.generate_portrait_video(sd.random_portrait_spec(200 + i, num_frames=8, height=32, width=32))
              for i in range(4)]
    bank = sd.build_hair_bank(height=32, width=32)

    cfg = tr.TrainConfig(learning_rate=1e-3, batch_size=4, seed=0)
    weights = tr.LossWeights(lambda_adv=0.1)
    model = AnimationModel(np.random.default_rng(cfg.seed))
    disc = tr.PatchDiscriminator(np.random.default_rng(cfg.seed + 1))

    history = tr.two_phase_train(videos, bank, model, disc, cfg,
                                 steps_a=60, steps_b=60, weights=weights,
                                 curve_path=OUT / "curve.csv")
    for phase in ("phase_a", "phase_b"):
        first, last = history[phase][0], history[phase][-1]
        print(f"{phase}: total {first.total:.4f} -> {last.total:.4f}")

    model.save(OUT / "model.ckpt", meta={"demo": "03"})
    print("checkpoint ->", OUT / "model.ckpt")
    print("loss curve ->", OUT / "curve.csv")


if __name__ == "__main__":
    main()
