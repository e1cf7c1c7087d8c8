"""Command-line entry point.

    vdblur make-synthetic --out data/synth --n 5
    vdblur train --dataset-root data/synth --out runs/p1 --config toy.json
    vdblur finetune-gan --dataset-root data/synth --checkpoint runs/p1/checkpoints/generator_latest.ckpt --out runs/gan
    vdblur deblur --input data/synth/blurry/clip000 --checkpoint runs/gan/checkpoints/gan_latest.ckpt --out runs/d
    vdblur eval --dataset-root data/synth --checkpoint ... --out runs/e
    vdblur ablation --dataset-root data/synth --out runs/abl --seeds 0 1 2
    vdblur window-study --dataset-root data/synth --out runs/win

Every run directory gets ``config.json`` (the effective settings) next to its
``checkpoints/``, ``logs/``, ``reports/`` and ``frames/`` outputs.
Exit status: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .errors import ConfigurationError, DatasetError, TrainingError

log = logging.getLogger("vdblur")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _existing(kind: str):
    def check(value: str) -> Path:
        p = Path(value)
        if not p.exists():
            raise argparse.ArgumentTypeError(f"{kind} not found: {value}")
        return p

    return check


def build_parser() -> argparse.ArgumentParser:
    from .data import LAYOUTS, SPLITS
    from .model import VARIANTS

    p = _Parser(prog="vdblur", description="Video deblurring with spatio-temporal 3D convolutions.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--out", type=Path, help="run directory (default runs/<command>-<timestamp>)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)

    data = _Parser(add_help=False)
    data.add_argument("--dataset-root", type=_existing("dataset root"), required=True)
    data.add_argument("--layout", choices=LAYOUTS, default="generic_pairs")
    data.add_argument("--split", choices=SPLITS, default="all",
                      help="train/test videos of the VideoDeblurring split (matched by clip name)")

    train_opts = _Parser(add_help=False)
    train_opts.add_argument("--config", type=_existing("config file"), help="JSON file of training settings")
    train_opts.add_argument("--toy", action="store_true", help="start from the desk-scale settings")
    train_opts.add_argument("--steps", type=int, help="total steps (overrides max_steps)")
    train_opts.add_argument("--variant", choices=VARIANTS)
    train_opts.add_argument("--window-T", type=int)

    s = sub.add_parser("make-synthetic", parents=[common], help="write a synthetic blurry/sharp dataset")
    s.add_argument("--n", type=int, default=5, help="number of clips")
    s.add_argument("--frames", type=int, default=24)
    s.add_argument("--size", type=int, nargs=2, default=[64, 64], metavar=("H", "W"))
    s.add_argument("--blur-n", type=int, default=5)
    s.add_argument("--max-speed", type=float, default=1.5, help="camera speed in pixels per frame")

    s = sub.add_parser("train", parents=[common, data, train_opts], help="phase 1: content-loss training")
    s.add_argument("--resume", type=_existing("checkpoint"))

    s = sub.add_parser("finetune-gan", parents=[common, data, train_opts], help="phase 2: adversarial fine-tuning")
    s.add_argument("--checkpoint", type=_existing("checkpoint"), help="phase-1 checkpoint")
    s.add_argument("--alpha", type=float)
    s.add_argument("--resume", type=_existing("checkpoint"))

    s = sub.add_parser("deblur", parents=[common], help="restore one clip directory of frames")
    s.add_argument("--input", type=_existing("input clip"), required=True)
    _model_flags(s)

    s = sub.add_parser("eval", parents=[common, data], help="PSNR report on paired clips")
    _model_flags(s, allow_baseline=True)
    s.add_argument("--method", default="DBLRNet", help="row label for the model")
    s.add_argument("--dump-frames", action="store_true", help="write input|output|truth strips")

    s = sub.add_parser("ablation", parents=[common, data, train_opts], help="single2d / multi2d / net3d / gan")
    s.add_argument("--variants", nargs="+", default=["single2d", "multi2d", "net3d", "gan"],
                   choices=["single2d", "multi2d", "net3d", "gan"])
    s.add_argument("--seeds", type=int, nargs="+")

    s = sub.add_parser("window-study", parents=[common, data, train_opts], help="PSNR versus window length")
    s.add_argument("--T-list", type=int, nargs="+", default=[3, 5, 7, 9, 11])
    s.add_argument("--seeds", type=int, nargs="+")
    return p


def _model_flags(s, allow_baseline: bool = False) -> None:
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint", type=_existing("checkpoint"))
    g.add_argument("--identity-model", action="store_true", help="debug passthrough model (returns the input)")
    if allow_baseline:
        g.add_argument("--input-baseline", action="store_true", help="score the blurry input only")
    s.add_argument("--window-T", type=int, default=5, help="window length for --identity-model")


# ---------------------------------------------------------------------------


def _run_dir(args) -> Path:
    out = args.out or Path("runs") / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, settings: dict) -> None:
    (out / "config.json").write_text(json.dumps(settings, indent=2, sort_keys=True, default=str) + "\n")


def _train_config(args, **extra):
    from .training import TrainConfig, toy_config

    over = {}
    if args.config:
        over.update(json.loads(Path(args.config).read_text()))
    for flag, key in (("seed", "seed"), ("workers", "workers"), ("steps", "max_steps"), ("variant", "variant"),
                      ("window_T", "window_T"), ("alpha", "alpha")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    over.update(extra)
    try:
        return toy_config(**over) if args.toy else TrainConfig.from_dict(over)
    except (TypeError, ConfigurationError) as e:
        raise UsageError(f"invalid configuration: {e}") from e


def _pairs(args):
    from .data import load_dataset, select_split

    return select_split(load_dataset(args.dataset_root, args.layout, lazy=True), args.split)


def _progress(every: int = 100):
    t0 = time.time()

    def cb(state, row):
        if state.step % every == 0:
            extra = f" val {row['val_psnr']:.2f} dB" if row.get("val_psnr") is not None else ""
            log.info("%s step %d loss %.5f lr %g%s (%.0fs)", state.phase, state.step, row["content_loss"], state.lr,
                     extra, time.time() - t0)

    return cb


def cmd_make_synthetic(args) -> None:
    from .data import make_synthetic_dataset

    out = _run_dir(args)
    seed = 0 if args.seed is None else args.seed
    settings = dict(n_clips=args.n, n_frames=args.frames, size=tuple(args.size), blur_n=args.blur_n, seed=seed,
                    max_speed=args.max_speed)
    try:
        make_synthetic_dataset(out, **settings)
    except ConfigurationError as e:
        raise UsageError(str(e)) from e
    _snapshot(out, {"command": "make-synthetic", **settings})
    log.info("wrote %d clips to %s", args.n, out)


def cmd_train(args) -> None:
    from .data import split_pairs
    from .training import train_generator

    config = _train_config(args)
    pairs = _pairs(args)
    train, val = split_pairs(pairs, config.val_clips if config.eval_every else 0)
    out = _run_dir(args)
    _snapshot(out, {"command": "train", "dataset_root": str(args.dataset_root), "layout": args.layout,
                    "resume": str(args.resume) if args.resume else None, "config": config.to_dict()})
    st = train_generator(config, train, out_dir=out, val_pairs=val, resume=args.resume, callback=_progress())
    log.info("finished at step %d; checkpoints in %s", st.step, out / "checkpoints")


def cmd_finetune_gan(args) -> None:
    from .data import split_pairs
    from .training import train_gan

    if args.checkpoint is None and args.resume is None:
        raise UsageError("finetune-gan needs --checkpoint (phase-1 weights) or --resume")
    config = _train_config(args)
    pairs = _pairs(args)
    train, val = split_pairs(pairs, config.val_clips)
    out = _run_dir(args)
    _snapshot(out, {"command": "finetune-gan", "dataset_root": str(args.dataset_root), "layout": args.layout,
                    "checkpoint": str(args.checkpoint), "resume": str(args.resume) if args.resume else None,
                    "config": config.to_dict()})
    st = train_gan(config, train, args.checkpoint, out_dir=out, val_pairs=val, resume=args.resume,
                   callback=_progress())
    if st.best_psnr is not None:
        log.info("best validation PSNR %.2f dB at step %d", st.best_psnr, st.best_step)


def _model(args):
    from .evaluation import IdentityModel
    from .training import load_generator

    if args.identity_model:
        return IdentityModel(args.window_T)
    return load_generator(args.checkpoint)


def cmd_deblur(args) -> None:
    from .data import load_clip, write_frame
    from .evaluation import iter_deblurred

    model = _model(args)
    out = _run_dir(args)
    _snapshot(out, {"command": "deblur", "input": str(args.input),
                    "checkpoint": str(args.checkpoint) if args.checkpoint else None,
                    "identity_model": args.identity_model})
    clip = load_clip(args.input, lazy=True)
    frames_dir = out / "frames"
    for i, frame in enumerate(iter_deblurred(model, clip)):
        write_frame(frames_dir / f"{i:05d}.png", frame)
    log.info("wrote %d frames to %s", len(clip), frames_dir)


def cmd_eval(args) -> None:
    from .evaluation import EvalReport, evaluate, input_scores

    pairs = _pairs(args)
    model = None if args.input_baseline else _model(args)
    out = _run_dir(args)
    meta = {"command": "eval", "dataset_root": str(args.dataset_root), "layout": args.layout, "split": args.split,
            "checkpoint": str(args.checkpoint) if args.checkpoint else None,
            "identity_model": args.identity_model, "input_baseline": args.input_baseline}
    _snapshot(out, meta)
    if model is None:
        report = EvalReport([input_scores(pairs)], meta)
    else:
        method = "identity" if args.identity_model else args.method
        report = evaluate(model, pairs, method=method, dump_dir=out / "frames" if args.dump_frames else None,
                          metadata=meta)
    report.write(out / "reports", "eval")
    sys.stdout.write(report.to_text())


def _study_split(args, config):
    from .data import split_pairs

    pairs = _pairs(args)
    train, val = split_pairs(pairs, max(config.val_clips, 1))
    if not val:
        raise UsageError("studies need at least two clips (one is held out for scoring)")
    return train, val


def cmd_ablation(args) -> None:
    from .evaluation import ablation_study

    config = _train_config(args, eval_every=0)
    train, val = _study_split(args, config)
    seeds = args.seeds or [config.seed]
    out = _run_dir(args)
    _snapshot(out, {"command": "ablation", "dataset_root": str(args.dataset_root), "layout": args.layout,
                    "variants": args.variants, "seeds": seeds, "config": config.to_dict()})
    res = ablation_study(config, train, val, variants=args.variants, seeds=seeds)
    res.write(out / "reports", "ablation")
    sys.stdout.write(res.to_text())


def cmd_window_study(args) -> None:
    from .evaluation import window_study

    if any(t < 1 or t % 2 == 0 for t in args.T_list):
        raise UsageError(f"window lengths must be positive odd integers, got {args.T_list}")
    config = _train_config(args, eval_every=0)
    train, val = _study_split(args, config)
    seeds = args.seeds or [config.seed]
    out = _run_dir(args)
    _snapshot(out, {"command": "window-study", "dataset_root": str(args.dataset_root), "layout": args.layout,
                    "T_list": args.T_list, "seeds": seeds, "config": config.to_dict()})
    res = window_study(config, train, val, T_list=args.T_list, seeds=seeds)
    res.write(out / "reports", "window_study")
    sys.stdout.write(res.to_text())


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "train": cmd_train,
    "finetune-gan": cmd_finetune_gan,
    "deblur": cmd_deblur,
    "eval": cmd_eval,
    "ablation": cmd_ablation,
    "window-study": cmd_window_study,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", datefmt="%H:%M:%S")
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"vdblur {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, DatasetError, TrainingError, OSError, ValueError) as e:
        print(f"vdblur {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
