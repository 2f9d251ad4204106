"""Command-line entry point: ``miqa <subcommand> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 task data error,
4 checkpoint error, 5 training failure, 6 evaluation error, 7 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from miqa import __version__
from miqa import autodiff as ad
from miqa import evaluate as E
from miqa import harness as H
from miqa import metalearn as ML
from miqa import model as M
from miqa import optimizer as opt
from miqa import taskgen as tg

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_TRAINING = 5
EXIT_EVALUATION = 6
EXIT_IO = 7

_ERROR_CODES = [
    (H.ConfigError, EXIT_USAGE),
    (H.CheckpointError, EXIT_CHECKPOINT),
    (M.IncompatibleParams, EXIT_CHECKPOINT),
    (tg.TaskGenError, EXIT_DATA),
    (tg.TaskError, EXIT_DATA),
    (E.UndefinedCorrelation, EXIT_EVALUATION),
    (E.EvalError, EXIT_EVALUATION),
    (ML.MetaError, EXIT_TRAINING),
    (opt.OptimizerError, EXIT_TRAINING),
    (ad.AutodiffError, EXIT_TRAINING),
    (M.ModelError, EXIT_TRAINING),
    (OSError, EXIT_IO),
]


def exit_code_for(exc: BaseException) -> int:
    for cls, code in _ERROR_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def _common(suppress):
    p = argparse.ArgumentParser(add_help=False)
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="INI experiment config")
    p.add_argument("--seed", type=int, default=default, help="run a single seed")
    p.add_argument("--out", default=default, help="output directory")
    p.add_argument("--desk", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="start from the desk-scale preset instead of the published defaults")
    p.add_argument("-v", "--verbose", action="store_true",
                   default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="miqa", parents=[_common(False)],
                                     description="Meta-learned no-reference quality regression.")
    parser.add_argument("--version", action="version", version=f"miqa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common(True)

    p = sub.add_parser("gen-tasks", parents=[common], help="export synthetic distortion tasks")

    p = sub.add_parser("meta-train", parents=[common], help="train a quality prior")
    p.add_argument("--held-out", help="family excluded from meta-training")
    p.add_argument("--checkpoint", help="output checkpoint (default OUT/prior.ckpt)")

    p = sub.add_parser("fine-tune", parents=[common], help="adapt a prior to a target family")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--held-out", required=True, help="target family")
    p.add_argument("--output", help="fine-tuned checkpoint (default OUT/finetuned.ckpt)")

    p = sub.add_parser("evaluate", parents=[common], help="PLCC/SROCC on a target test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--held-out", required=True, help="target family")

    for name, help_text in [("lodo", "leave-one-distortion-out cross validation"),
                            ("random-split", "80/20 random split on a mixed target pool"),
                            ("ablation", "meta prior vs conventional training")]:
        sub.add_parser(name, parents=[common], help=help_text)

    p = sub.add_parser("sweep", parents=[common], help="grid over mini-batch size k and steps S")
    p.add_argument("--k", help="comma-separated k values")
    p.add_argument("--S", dest="S_values", help="comma-separated S values")

    p = sub.add_parser("saliency", parents=[common], help="gradient saliency map as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="PPM/PGM input (default: a generated image)")
    p.add_argument("--family", help="distort the generated image with this family")
    p.add_argument("--level", type=int, default=4)
    p.add_argument("--output", help="PGM path (default OUT/saliency.pgm)")
    return parser


def _config(args, protocol=None) -> H.ExperimentConfig:
    base = H.desk_config() if args.desk else H.ExperimentConfig()
    cfg = H.load_config(args.config, base)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if protocol is not None:
        cfg = replace(cfg, protocol=protocol)
    return cfg.validate()


def _out_dir(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _target(cfg, family):
    if family not in cfg.tasks.families:
        raise H.ConfigError(f"family {family!r} is not configured")
    _, target = H.lodo_tasks(cfg, cfg.seeds[0], family)
    return target


def cmd_gen_tasks(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    bases = tg.gen_base_images(cfg.tasks.bases, cfg.tasks.resolution, seed=cfg.seeds[0],
                               channels=cfg.backbone.in_channels)
    manifest = tg.export_tasks(out, cfg.tasks.family_objects(), bases, cfg.tasks.tau)
    print(f"wrote {manifest}")


def cmd_meta_train(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    seed = cfg.seeds[0]
    if args.held_out:
        if args.held_out not in cfg.tasks.families:
            raise H.ConfigError(f"family {args.held_out!r} is not configured")
        meta_set, _ = H.lodo_tasks(cfg, seed, args.held_out)
    else:
        meta_set, _ = H.random_split_tasks(cfg, seed)
    meta_cfg = replace(cfg.meta, seed=seed)

    def progress(entry):
        logging.info("epoch %d support %.6f query %.6f", entry.epoch, entry.support_loss,
                     entry.query_loss)

    init = M.build_model(cfg.backbone, seed=seed)
    theta, logs = ML.meta_train(meta_set, meta_cfg, init, callback=progress)
    path = Path(args.checkpoint) if args.checkpoint else out / "prior.ckpt"
    H.save_checkpoint(theta, path, cfg.digest(), cfg.meta.epochs)
    print(f"wrote {path} (final query loss {logs[-1].query_loss:.6f})")


def cmd_fine_tune(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    prior = H.load_checkpoint(args.checkpoint, cfg.backbone)
    target = _target(cfg, args.held_out)
    tuned = E.fine_tune(prior, target, cfg.finetune.P, cfg.finetune.alpha_f, cfg.finetune.adam,
                        cfg.backbone)
    path = Path(args.output) if args.output else out / "finetuned.ckpt"
    H.save_checkpoint(tuned, path, cfg.digest())
    print(f"wrote {path}")


def cmd_evaluate(args):
    cfg = _config(args)
    theta = H.load_checkpoint(args.checkpoint, cfg.backbone)
    report = E.evaluate_model(theta, _target(cfg, args.held_out))
    fmt = lambda v: "undefined" if v is None else f"{v:.6f}"
    print(f"n={report.n} plcc={fmt(report.plcc)} srocc={fmt(report.srocc)} "
          f"loss={report.loss:.6f}")


def _print_summary(output):
    for r in output.table.sorted_rows():
        if r.seed == "all":
            s = "undefined" if r.srocc is None else f"{r.srocc:.4f}"
            p = "undefined" if r.plcc is None else f"{r.plcc:.4f}"
            print(f"{r.run_id:<16} {r.phase:<20} srocc {s}  plcc {p}")
    print(f"results: {output.results_path}")


def _cmd_protocol(name):
    def run(args):
        cfg = _config(args, name)
        kw = {}
        if name == "sweep":
            if args.k:
                kw["k_values"] = [int(v) for v in args.k.split(",")]
            if args.S_values:
                kw["S_values"] = [int(v) for v in args.S_values.split(",")]
        _print_summary(H.run_protocol(cfg, **kw))
    return run


def cmd_saliency(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    theta = H.load_checkpoint(args.checkpoint, cfg.backbone)
    if args.image:
        pixels = tg.read_pnm(args.image)
        if pixels.shape[2] == 1:
            pixels = np.repeat(pixels, 3, axis=2)
    else:
        base = tg.gen_base_images(1, cfg.backbone.input_size, seed=cfg.seeds[0])[0]
        pixels = base.pixels
        if args.family:
            pixels = tg.apply_distortion(base, args.family, args.level)
    if pixels.shape[:2] != cfg.backbone.input_size:
        raise E.EvalError(f"saliency needs a {cfg.backbone.input_size} image, "
                          f"got {pixels.shape[:2]}")
    sal = E.saliency_map(theta, tg.as_model_image(pixels))
    path = Path(args.output) if args.output else out / "saliency.pgm"
    E.write_pgm(path, sal)
    print(f"wrote {path}")


COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "meta-train": cmd_meta_train,
    "fine-tune": cmd_fine_tune,
    "evaluate": cmd_evaluate,
    "lodo": _cmd_protocol("lodo"),
    "random-split": _cmd_protocol("random-split"),
    "ablation": _cmd_protocol("ablation"),
    "sweep": _cmd_protocol("sweep"),
    "saliency": cmd_saliency,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # mapped to category-coded exit statuses
        code = exit_code_for(exc)
        if code == 1:
            raise
        print(f"miqa: error: {exc}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
