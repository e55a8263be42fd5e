"""Command-line entry point: train, fuse, fuse-video, eval, ablate.

Every run directory receives a ``manifest.json`` capturing the resolved
config, seed and artifact version so a run can be reproduced from its
manifest alone. Failures exit nonzero with one machine-parsable line:
``error: <category>: <message>``.
"""

import argparse
import json
import os
import sys

from . import __version__
from .data import ImagePair, load_image, load_pair_dataset, load_video_sequence, save_image
from .errors import DaeFuseError
from .metrics import METRIC_VARIANTS, evaluate
from .training import (
    TrainingConfig,
    fuse_pair,
    fuse_video,
    train,
    training_config_from_dict,
    training_config_to_dict,
)

ABLATION_PRESETS = ("no-disc-p1", "no-disc-p2", "no-cross-attn")


def load_config_file(path):
    """Read a TrainingConfig from a JSON or TOML file."""
    if path is None:
        return TrainingConfig()
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        data = tomllib.loads(raw.decode("utf-8"))
    else:
        data = json.loads(raw.decode("utf-8"))
    return training_config_from_dict(data)


def apply_ablation(config, preset):
    """Return a copy of the config with one ablation preset applied."""
    if preset not in ABLATION_PRESETS:
        raise ValueError(f"unknown ablation preset '{preset}'")
    d = training_config_to_dict(config)
    if preset == "no-disc-p1":
        d["disc_phase1"] = False
    elif preset == "no-disc-p2":
        d["disc_phase2"] = False
    else:
        d["cross_attention"] = False
    return training_config_from_dict(d)


def _apply_seed_override(config):
    env = os.environ.get("DAEFUSE_SEED")
    if env is None:
        return config
    d = training_config_to_dict(config)
    d["seed"] = int(env)
    return training_config_from_dict(d)


def write_manifest(out_dir, verb, config=None, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"artifact_version": __version__, "command": verb}
    if config is not None:
        manifest["config"] = training_config_to_dict(config)
        manifest["seed"] = config.seed
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def build_parser():
    parser = argparse.ArgumentParser(
        prog="daefuse",
        description="Two-phase discriminative autoencoder for image fusion",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_train = sub.add_parser("train", help="run the full two-phase training")
    p_train.add_argument("--config", help="JSON or TOML config file")
    p_train.add_argument("--data", required=True, help="dataset root with a/ and b/")
    p_train.add_argument("--out", required=True, help="run output directory")
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.add_argument(
        "--video", action="store_true",
        help="treat --data subdirectories as video frame folders",
    )

    p_fuse = sub.add_parser("fuse", help="fuse one registered image pair")
    p_fuse.add_argument("--ckpt", required=True)
    p_fuse.add_argument("--a", required=True, dest="img_a")
    p_fuse.add_argument("--b", required=True, dest="img_b")
    p_fuse.add_argument("--out", required=True, help="output image path")

    p_video = sub.add_parser("fuse-video", help="fuse a frame sequence")
    p_video.add_argument("--ckpt", required=True)
    p_video.add_argument("--a", required=True, dest="dir_a")
    p_video.add_argument("--b", required=True, dest="dir_b")
    p_video.add_argument("--out", required=True, help="output frame directory")
    p_video.add_argument("--tau", type=float, default=None,
                         help="shallow-feature EMA coefficient override")

    p_eval = sub.add_parser("eval", help="score fused images against sources")
    p_eval.add_argument("--fused", required=True)
    p_eval.add_argument("--a", required=True, dest="dir_a")
    p_eval.add_argument("--b", required=True, dest="dir_b")
    p_eval.add_argument("--report", required=True, help="report output directory")

    p_abl = sub.add_parser(
        "ablate", help="train with an ablation preset applied to the config"
    )
    p_abl.add_argument("--preset", required=True, choices=ABLATION_PRESETS)
    p_abl.add_argument("--config", help="JSON or TOML config file")
    p_abl.add_argument("--data", required=True)
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--video", action="store_true")

    return parser


def _load_dataset(root, video):
    if video:
        return load_video_sequence(os.path.join(root, "a"), os.path.join(root, "b"))
    return load_pair_dataset(root)


def _cmd_train(args, preset=None):
    config = _apply_seed_override(load_config_file(args.config))
    if preset is not None:
        config = apply_ablation(config, preset)
    dataset = _load_dataset(args.data, args.video)
    write_manifest(args.out, "train" if preset is None else f"ablate:{preset}", config)
    ckpt, log = train(dataset, config, args.out, resume=getattr(args, "resume", None))
    print(f"final checkpoint: {ckpt}")
    print(f"log: {os.path.join(args.out, 'train_log.jsonl')} ({len(log.records)} steps)")
    return 0


def _cmd_fuse(args):
    pair = ImagePair(load_image(args.img_a), load_image(args.img_b))
    fused = fuse_pair(args.ckpt, pair)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save_image(fused, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_fuse_video(args):
    seq = load_video_sequence(args.dir_a, args.dir_b)
    frames = fuse_video(args.ckpt, seq, tau=args.tau)
    os.makedirs(args.out, exist_ok=True)
    width = max(4, len(str(len(frames))))
    for i, frame in enumerate(frames):
        save_image(frame, os.path.join(args.out, f"{i:0{width}d}.png"))
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def _cmd_eval(args):
    report = evaluate(args.fused, args.dir_a, args.dir_b)
    os.makedirs(args.report, exist_ok=True)
    report.write_csv(os.path.join(args.report, "report.csv"))
    report.write_json(os.path.join(args.report, "report.json"))
    write_manifest(
        args.report, "eval", extra={"metric_variants": METRIC_VARIANTS}
    )
    cols = ["en", "sd", "sf", "mi", "scd", "vif", "qabf", "ssim"]
    print("  ".join(f"{c.upper()}={report.aggregate[c]:.4f}" for c in cols))
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.verb == "train":
            return _cmd_train(args)
        if args.verb == "fuse":
            return _cmd_fuse(args)
        if args.verb == "fuse-video":
            return _cmd_fuse_video(args)
        if args.verb == "eval":
            return _cmd_eval(args)
        if args.verb == "ablate":
            return _cmd_train(args, preset=args.preset)
        parser.error(f"unknown verb {args.verb}")
    except DaeFuseError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
