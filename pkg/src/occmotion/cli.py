"""Command-line entry point: ``occmotion <subcommand> ...``.

Exit codes: 0 ok, 1 usage/config, 2 data, 3 numeric.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys

from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import pipeline
from .config import PipelineConfig
from .errors import OccMotionError

log = logging.getLogger("occmotion")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors share exit code 1 with config errors
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="occmotion", description="Occlusion-robust human motion recovery.")
    p.add_argument("--config", help="JSON config file (unknown keys are errors)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 for bit-reproducible runs)")
    p.add_argument("--f64", action="store_true", help="compute in float64")
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic clip corpus")
    s.add_argument("out", help="dataset directory")

    s = sub.add_parser("pretrain", help="train detector, lifter and predictor")
    s.add_argument("data")
    s.add_argument("out", help="checkpoint directory")
    s.add_argument("--resume", action="store_true")

    s = sub.add_parser("train", help="train fusion, regression and refinement")
    s.add_argument("data")
    s.add_argument("pretrained", help="directory holding the pre-trained checkpoints")
    s.add_argument("out")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--unfreeze", action="store_true", help="fine-tune lifter and predictor as well")

    s = sub.add_parser("complete", help="detect occlusions, lift and complete one sequence")
    s.add_argument("sequence")
    s.add_argument("checkpoints")
    s.add_argument("out", help="output sequence file")

    s = sub.add_parser("recover", help="recover body parameters for one sequence")
    s.add_argument("sequence")
    s.add_argument("checkpoints")
    s.add_argument("out", help="output directory")
    s.add_argument("--features", help="per-frame feature file")
    s.add_argument("--synth-features", action="store_true",
                   help="fabricate features from ground truth stored in the sequence")
    s.add_argument("--export-obj", action="store_true", help="write one OBJ mesh per frame")

    s = sub.add_parser("eval", help="metrics on the held-out split")
    s.add_argument("data")
    s.add_argument("checkpoints")
    s.add_argument("out")
    s.add_argument("--predictions", help="directory of <clip id>.json body-parameter files to score instead")

    s = sub.add_parser("gradcheck", help="finite-difference gradient check")
    s.add_argument("module", choices=pipeline.GRADCHECK_MODULES + ("all",))
    s.add_argument("--samples", type=int, default=3)
    return p


def run(args) -> int:
    cfg = _config(args)
    info = (lambda *_: None) if args.quiet else log.info
    if args.command == "synth":
        pipeline.cmd_synth(cfg, args.out, log=info)
    elif args.command == "pretrain":
        summary = pipeline.cmd_pretrain(cfg, args.data, args.out, resume=args.resume, log=info)
        for k, v in summary.items():
            print(f"{k}: {v:.4f}")
    elif args.command == "train":
        if args.unfreeze:
            cfg.freeze_deocclusion = False
        summary = pipeline.cmd_train(cfg, args.data, args.pretrained, args.out, resume=args.resume, log=info)
        for k, v in summary.get("final", {}).items():
            print(f"final {k}: {v:.6f}")
    elif args.command == "complete":
        print(pipeline.cmd_complete(cfg, args.sequence, args.checkpoints, args.out))
    elif args.command == "recover":
        print(pipeline.cmd_recover(cfg, args.sequence, args.checkpoints, args.out, args.features,
                                   args.synth_features, args.export_obj))
    elif args.command == "eval":
        reports = pipeline.cmd_eval(cfg, args.data, args.checkpoints, args.out, args.predictions)
        print(f"{len(reports)} clips scored; metrics in {args.out}")
    elif args.command == "gradcheck":
        names = pipeline.GRADCHECK_MODULES if args.module == "all" else (args.module,)
        ok = True
        with ad.float64_mode():
            for name in names:
                rep = pipeline.gradcheck_module(name, seed=cfg.seed, samples=args.samples)
                worst, err = rep.worst
                print(f"{'PASS' if rep.passed else 'FAIL'} {name}: max rel err {err:.2e} ({worst})")
                ok &= rep.passed
        return 0 if ok else 3
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    limits = threadpool_limits(limits=args.threads)
    f64 = ad.float64_mode() if args.f64 else contextlib.nullcontext()
    try:
        with limits, f64:
            return run(args)
    except OccMotionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
