"""Command line front end.

Subcommands: synth (generate a dataset), train, infer, eval, ablate, cost.
Every subcommand reads an optional key=value config file; flags override the
file. Exit codes: 0 success, 2 bad configuration or usage, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .metrics import amortized_cost, evaluate_videos, load_identity_embedder
from .model import AnimationModel
from .pipeline import PipelineConfig, load_animation_model, run_inference
from .synthdata import (
    PoseParams,
    build_hair_bank,
    generate_portrait_video,
    load_frame,
    load_image,
    load_video_dir,
    random_portrait_spec,
    read_manifest,
    save_video_dir,
)
from .training import (
    PatchDiscriminator,
    ablation_decoder_config,
    parse_kv,
    train_settings_from_kv,
    two_phase_train,
    run_ablation,
    TrainConfig,
)
from .compositor import CompositeConfig

__all__ = ["cli_dispatch", "main", "ConfigError"]


class ConfigError(Exception):
    """Bad flag or config-file value; maps to exit code 2."""


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(value):
    if isinstance(value, bool):
        return value
    low = str(value).strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def _read_config(path):
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            return parse_kv(fh.read())
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def _merge_flags(kv, args, keys):
    """CLI flags override config-file entries; everything funnels into kv strings."""
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            kv[key] = value if isinstance(value, str) else str(value)
    return kv


def _take(kv, key, cast, default=None, required=False):
    if key not in kv:
        if required:
            raise ConfigError(f"missing required setting {key!r}")
        return default
    raw = kv.pop(key)
    try:
        return cast(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def _require_dir(path, what):
    if not os.path.isdir(path):
        raise ConfigError(f"{what} directory not found: {path}")
    return path


def _reject_unknown(kv):
    if kv:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(kv))}")


# -- synth --------------------------------------------------------------------

def _cmd_synth(args):
    kv = _merge_flags(_read_config(args.config), args,
                      ("out", "seed", "num_videos", "frames", "height", "width", "motion_scale"))
    out = _take(kv, "out", str, required=True)
    seed = _take(kv, "seed", int, 0)
    count = _take(kv, "num_videos", int, 4)
    frames = _take(kv, "frames", int, 16)
    height = _take(kv, "height", int, 64)
    width = _take(kv, "width", int, 64)
    motion = _take(kv, "motion_scale", float, 1.0)
    _reject_unknown(kv)
    if count < 1 or frames < 1:
        raise ConfigError("num_videos and frames must be positive")

    for i in range(count):
        spec = random_portrait_spec(seed + i, num_frames=frames, height=height,
                                    width=width, motion_scale=motion)
        save_video_dir(generate_portrait_video(spec), os.path.join(out, f"video_{i:03d}"))
    print(f"wrote {count} videos of {frames} frames under {out}")
    return 0


# -- train --------------------------------------------------------------------

def _video_dirs(root):
    names = sorted(n for n in os.listdir(root) if os.path.isdir(os.path.join(root, n)))
    dirs = [os.path.join(root, n) for n in names if os.path.isfile(os.path.join(root, n, "manifest.txt"))]
    if not dirs:
        raise ConfigError(f"no frame directories with a manifest under {root}")
    return dirs


def _load_videos(root, what):
    return [load_video_dir(p) for p in _video_dirs(_require_dir(root, what))]


def _cmd_train(args):
    kv = _merge_flags(_read_config(args.config), args,
                      ("data", "out", "steps_a", "steps_b", "curve",
                       "learning_rate", "batch_size", "epochs", "seed", "ablation_setting",
                       "lambda_adv", "lambda_p", "lambda_rec", "lambda_hair", "lambda_face"))
    data = _take(kv, "data", str, required=True)
    out = _take(kv, "out", str, required=True)
    steps_a = _take(kv, "steps_a", int, 300)
    steps_b = _take(kv, "steps_b", int, 300)
    curve = _take(kv, "curve", str)
    try:
        cfg, weights, extras = train_settings_from_kv(kv)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    _reject_unknown(extras)
    _require_dir(data, "training data")

    videos = [load_video_dir(p) for p in _video_dirs(data)]
    h, w = videos[0].spec.height, videos[0].spec.width
    bank = build_hair_bank(height=h, width=w)
    model = AnimationModel(np.random.default_rng(cfg.seed),
                           dec_cfg=ablation_decoder_config(cfg.ablation_setting))
    disc = PatchDiscriminator(np.random.default_rng(cfg.seed + 1))
    history = two_phase_train(videos, bank, model, disc, cfg=cfg,
                              steps_a=steps_a, steps_b=steps_b, weights=weights,
                              curve_path=curve)
    extras_arrays = {f"discriminator.{k}": v for k, v in disc.state_arrays().items()}
    model.save(out, extra_arrays=extras_arrays,
               meta={"steps_a": steps_a, "steps_b": steps_b,
                     "ablation_setting": cfg.ablation_setting, "seed": cfg.seed})
    for phase in ("phase_a", "phase_b"):
        reports = history[phase]
        if reports:
            print(f"{phase}: {len(reports)} steps, final total loss {reports[-1].total:.4f}")
        else:
            print(f"{phase}: skipped")
    print(f"checkpoint written to {out}")
    return 0


# -- infer --------------------------------------------------------------------

def _parse_pose(text):
    parts = text.split()
    if len(parts) != 5:
        raise ConfigError(f"a pose needs 5 numbers (yaw dx dy scale phase), got {text!r}")
    return PoseParams(*(float(p) for p in parts))


def _parse_pose_weights(text):
    parts = text.replace(",", " ").split()
    if len(parts) != 3:
        raise ConfigError(f"pose_weights needs 3 numbers, got {text!r}")
    return tuple(float(p) for p in parts)


def _resolve_reference(kv, model):
    """Reference hair image: a frame directory plus index, or a PNG pair."""
    ref_dir = _take(kv, "reference", str)
    index = _take(kv, "reference_index", int, 0)
    png = _take(kv, "reference_frame", str)
    mask_png = _take(kv, "reference_mask", str)
    pose_text = _take(kv, "reference_pose", str)

    if ref_dir is not None:
        if png is not None or mask_png is not None:
            raise ConfigError("give either a reference directory or PNG files, not both")
        _require_dir(ref_dir, "reference")
        spec = read_manifest(ref_dir)
        if not 0 <= index < len(spec.pose_trajectory):
            raise ConfigError(f"reference_index {index} outside video of {len(spec.pose_trajectory)} frames")
        pose = _parse_pose(pose_text) if pose_text is not None else spec.pose_trajectory[index]
        return load_frame(ref_dir, index), load_frame(ref_dir, index, "hair"), pose

    if png is None or mask_png is None:
        raise ConfigError("reference requires either reference=DIR or reference_frame= plus reference_mask=")
    for p in (png, mask_png):
        if not os.path.isfile(p):
            raise ConfigError(f"reference image not found: {p}")
    pose = _parse_pose(pose_text) if pose_text is not None else None
    if pose is None and model.motion_mode != "learned":
        raise ConfigError("reference_pose is required when the model cannot estimate motion")
    return load_image(png), np.round(load_image(mask_png)), pose


def _cmd_infer(args):
    kv = _merge_flags(_read_config(args.config), args,
                      ("checkpoint", "driving", "out", "reference", "reference_index",
                       "reference_frame", "reference_mask", "reference_pose",
                       "anchor_strategy", "anchor_index", "pose_weights", "read_ahead",
                       "nonhair_l1_threshold", "pixel_blend", "blur_sigma", "alignment_mode",
                       "motion_mode", "fusion_mode", "hmg_enabled"))
    checkpoint = _take(kv, "checkpoint", str, required=True)
    driving = _take(kv, "driving", str, required=True)
    out = _take(kv, "out", str)
    if not os.path.isfile(checkpoint):
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    _require_dir(driving, "driving video")

    composite = CompositeConfig(
        alignment_mode=_take(kv, "alignment_mode", str, "pose_aware"),
        blur_sigma=_take(kv, "blur_sigma", float, 1.0),
    )
    try:
        cfg = PipelineConfig(
            checkpoint=checkpoint,
            motion_mode=_take(kv, "motion_mode", str),
            fusion_mode=_take(kv, "fusion_mode", str),
            hmg_enabled=_take(kv, "hmg_enabled", _parse_bool),
            anchor_strategy=_take(kv, "anchor_strategy", str, "pose_similar"),
            anchor_index=_take(kv, "anchor_index", int, 0),
            composite=composite,
            pose_weights=_take(kv, "pose_weights", _parse_pose_weights, (1.0, 0.5, 0.5)),
            read_ahead=_take(kv, "read_ahead", int, 4),
            nonhair_l1_threshold=_take(kv, "nonhair_l1_threshold", float, 0.05),
            pixel_blend=_take(kv, "pixel_blend", _parse_bool, False),
            output_dir=out,
        )
        model, _ = load_animation_model(checkpoint, motion_mode=cfg.motion_mode,
                                        fusion_mode=cfg.fusion_mode, hmg_enabled=cfg.hmg_enabled)
        ref_frame, ref_mask, ref_pose = _resolve_reference(kv, model)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _reject_unknown(kv)

    result = run_inference(driving, ref_frame, ref_mask, ref_pose, cfg, model=model)
    print(f"anchor frame {result.anchor_index}, generated {result.num_frames} frames"
          + (f" under {result.output_dir}" if result.output_dir else " in memory"))
    if result.empty_mask_frames:
        print(f"warning: empty hair mask on frames {result.empty_mask_frames}")
    if result.flagged_frames:
        print(f"warning: non-hair L1 above {cfg.nonhair_l1_threshold} on frames {result.flagged_frames}")
    else:
        print(f"non-hair L1 below {cfg.nonhair_l1_threshold} on every frame")
    return 0


# -- eval ---------------------------------------------------------------------

def _cmd_eval(args):
    kv = _merge_flags(_read_config(args.config), args,
                      ("generated", "driving", "json_out", "identity"))
    gen_dir = _take(kv, "generated", str, required=True)
    drv_dir = _take(kv, "driving", str, required=True)
    json_out = _take(kv, "json_out", str)
    use_identity = _take(kv, "identity", _parse_bool, True)
    _reject_unknown(kv)
    _require_dir(gen_dir, "generated video")
    _require_dir(drv_dir, "driving video")

    gen = load_video_dir(gen_dir)
    drv = load_video_dir(drv_dir)
    embedder = load_identity_embedder() if use_identity else None
    report = evaluate_videos([(gen.frames, drv.frames, drv.hair_masks, drv.face_masks)],
                             embedder=embedder)
    print(report.format_table())
    if json_out is not None:
        with open(json_out, "w") as fh:
            fh.write(report.to_json() + "\n")
        print(f"json report written to {json_out}")
    return 0


# -- ablate -------------------------------------------------------------------

def _cmd_ablate(args):
    kv = _merge_flags(_read_config(args.config), args,
                      ("setting", "data", "heldout", "steps_a", "steps_b", "seed",
                       "eval_samples", "json_out"))
    setting = _take(kv, "setting", int, required=True)
    data = _take(kv, "data", str, required=True)
    heldout = _take(kv, "heldout", str, required=True)
    steps_a = _take(kv, "steps_a", int, 300)
    steps_b = _take(kv, "steps_b", int, 300)
    seed = _take(kv, "seed", int, 0)
    samples = _take(kv, "eval_samples", int, 20)
    json_out = _take(kv, "json_out", str)
    _reject_unknown(kv)

    videos = _load_videos(data, "training data")
    heldout_videos = _load_videos(heldout, "held-out data")
    h, w = videos[0].spec.height, videos[0].spec.width
    bank = build_hair_bank(height=h, width=w)
    try:
        cfg = TrainConfig(seed=seed, ablation_setting=setting)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _, report = run_ablation(setting, videos, bank, heldout_videos, cfg=cfg,
                             steps_a=steps_a, steps_b=steps_b,
                             eval_samples=samples, image_hw=h)
    for key in sorted(report):
        print(f"{key}={report[key]}")
    if json_out is not None:
        with open(json_out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


# -- cost ---------------------------------------------------------------------

def _cmd_cost(args):
    kv = _read_config(args.config)
    frames = args.frames
    if frames is None:
        text = _take(kv, "frames", str, required=True)
        frames = [int(p) for p in text.replace(",", " ").split()]
    _reject_unknown(kv)
    if not frames or any(n < 1 for n in frames):
        raise ConfigError("frame counts must be positive integers")
    print(f"{'frames':>10}  {'TFLOPs/frame':>12}")
    for n in frames:
        print(f"{n:>10d}  {amortized_cost(n):>12.2f}")
    return 0


# -- dispatch -----------------------------------------------------------------

def _add_config_flag(sub):
    sub.add_argument("--config", help="key=value config file; flags override it")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="hairanim",
        description="Synthetic-portrait hair transfer: data synthesis, training, "
                    "inference, evaluation, ablations and cost accounting.",
    )
    subs = parser.add_subparsers(dest="command", metavar="command")

    p = subs.add_parser("synth", help="generate a synthetic portrait-video dataset")
    _add_config_flag(p)
    p.add_argument("--out", help="output dataset directory")
    p.add_argument("--seed", type=int, help="base seed; video i uses seed+i (default 0)")
    p.add_argument("--num-videos", dest="num_videos", type=int, help="number of videos (default 4)")
    p.add_argument("--frames", type=int, help="frames per video (default 16)")
    p.add_argument("--height", type=int, help="frame height (default 64)")
    p.add_argument("--width", type=int, help="frame width (default 64)")
    p.add_argument("--motion-scale", dest="motion_scale", type=float,
                   help="pose trajectory amplitude multiplier (default 1.0)")
    p.set_defaults(func=_cmd_synth)

    p = subs.add_parser("train", help="run the two-phase training loop on a dataset")
    _add_config_flag(p)
    p.add_argument("--data", help="dataset directory from `synth`")
    p.add_argument("--out", help="checkpoint path to write")
    p.add_argument("--steps-a", dest="steps_a", type=int, help="reconstruction phase steps (default 300)")
    p.add_argument("--steps-b", dest="steps_b", type=int, help="pseudo-frame phase steps (default 300)")
    p.add_argument("--learning-rate", dest="learning_rate", type=float, help="Adam learning rate (default 2e-5)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="samples per step (default 4)")
    p.add_argument("--epochs", type=int, help="dataset passes, informational (default 1)")
    p.add_argument("--seed", type=int, help="training seed (default 0)")
    p.add_argument("--ablation-setting", dest="ablation_setting", type=int,
                   help="decoder variant 1..5 (default 5, the full model)")
    p.add_argument("--curve", help="CSV path for per-step losses")
    for name in ("adv", "p", "rec", "hair", "face"):
        p.add_argument(f"--lambda-{name}", dest=f"lambda_{name}", type=float,
                       help=f"weight of the {name} loss term (default 1)")
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("infer", help="animate a driving video with a reference hair image")
    _add_config_flag(p)
    p.add_argument("--checkpoint", help="trained checkpoint path")
    p.add_argument("--driving", help="driving video frame directory")
    p.add_argument("--out", help="output frame directory; omit to keep frames in memory")
    p.add_argument("--reference", help="frame directory holding the reference hair image")
    p.add_argument("--reference-index", dest="reference_index", type=int,
                   help="frame index inside --reference (default 0)")
    p.add_argument("--reference-frame", dest="reference_frame", help="reference PNG (instead of --reference)")
    p.add_argument("--reference-mask", dest="reference_mask", help="hair mask PNG for --reference-frame")
    p.add_argument("--reference-pose", dest="reference_pose",
                   help="'yaw dx dy scale phase'; read from the manifest or estimated when omitted")
    p.add_argument("--anchor-strategy", dest="anchor_strategy",
                   choices=("pose_similar", "first_frame", "explicit_index"),
                   help="how to pick the anchor frame (default pose_similar)")
    p.add_argument("--anchor-index", dest="anchor_index", type=int,
                   help="anchor frame for the explicit_index strategy")
    p.add_argument("--pose-weights", dest="pose_weights",
                   help="three numbers weighting yaw/translation/scale distance (default '1.0 0.5 0.5')")
    p.add_argument("--read-ahead", dest="read_ahead", type=int, help="frame prefetch depth (default 4)")
    p.add_argument("--nonhair-l1-threshold", dest="nonhair_l1_threshold", type=float,
                   help="per-frame non-hair L1 alarm level (default 0.05)")
    p.add_argument("--pixel-blend", dest="pixel_blend", nargs="?", const="true",
                   help="paste driving pixels outside the blurred hair band (true/false)")
    p.add_argument("--blur-sigma", dest="blur_sigma", type=float, help="compositor blur width (default 1.0)")
    p.add_argument("--alignment-mode", dest="alignment_mode", choices=("pose_aware", "none"),
                   help="hair alignment used for the anchor composite (default pose_aware)")
    p.add_argument("--motion-mode", dest="motion_mode", choices=("passthrough", "learned"),
                   help="override the checkpoint's motion mode")
    p.add_argument("--fusion-mode", dest="fusion_mode", choices=("none", "single_scale", "multi_scale"),
                   help="override the checkpoint's decoder fusion mode")
    p.add_argument("--hmg-enabled", dest="hmg_enabled", nargs="?", const="true",
                   help="override the checkpoint's mask-guidance switch (true/false)")
    p.set_defaults(func=_cmd_infer)

    p = subs.add_parser("eval", help="score a generated video against its driving video")
    _add_config_flag(p)
    p.add_argument("--generated", help="generated frame directory")
    p.add_argument("--driving", help="driving frame directory")
    p.add_argument("--json", dest="json_out", help="also write the report as JSON here")
    p.add_argument("--identity", nargs="?", const="true",
                   help="score identity similarity with the shipped embedder (default true)")
    p.set_defaults(func=_cmd_eval)

    p = subs.add_parser("ablate", help="train one decoder variant and report held-out SSIM")
    _add_config_flag(p)
    p.add_argument("--setting", type=int, help="decoder variant 1..5")
    p.add_argument("--data", help="training dataset directory")
    p.add_argument("--heldout", help="held-out dataset directory")
    p.add_argument("--steps-a", dest="steps_a", type=int, help="phase A steps (default 300)")
    p.add_argument("--steps-b", dest="steps_b", type=int, help="phase B steps (default 300)")
    p.add_argument("--seed", type=int, help="training seed (default 0)")
    p.add_argument("--eval-samples", dest="eval_samples", type=int,
                   help="held-out probe reconstructions (default 20)")
    p.add_argument("--json", dest="json_out", help="write the report as JSON here")
    p.set_defaults(func=_cmd_ablate)

    p = subs.add_parser("cost", help="amortized per-frame cost for given video lengths")
    _add_config_flag(p)
    p.add_argument("--frames", type=int, nargs="+", help="video lengths to tabulate")
    p.set_defaults(func=_cmd_cost)

    return parser


def cli_dispatch(argv):
    """Run one CLI invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/help
        code = exc.code
        return code if isinstance(code, int) else 2
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 2
    try:
        return int(args.func(args) or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # noqa: BLE001 - CLI boundary reports and exits
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
