"""Command-line entry point.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .gradcheck_suite import format_table, run_all
from .pnm import PnmFormatError
from .training import (LOG_HEADER, STUDIES, NumericFailure, Trainer, TrunkModified, ablate, audit_parameters,
                       dump_failure, evaluate, format_ablation, infer_sequence, load_model, write_report)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rgbd-vsod", description="Prompt-free RGB-D video salient object detection (numpy).")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", help="checkpoint directory (default: out_dir from the config)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset root")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="fail if this config disagrees with the checkpoint")
    e.add_argument("--out", help="write the report here as well as to stdout")

    i = sub.add_parser("infer", help="write predicted masks for one sequence")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--seq", required=True)
    i.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of the registered ops")
    g.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate", help="rerun toy training along one study axis")
    a.add_argument("--study", required=True, choices=sorted(STUDIES))
    a.add_argument("--config", required=True)

    s = sub.add_parser("synth", help="generate a synthetic RGB-D video suite")
    s.add_argument("--out", required=True)
    s.add_argument("--sequences", type=int, default=40)
    s.add_argument("--length", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--prefix", default="seq")
    return p


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    trainer = Trainer.resume(args.resume, cfg=cfg) if args.resume else Trainer(cfg)
    print(f"# {audit_parameters(trainer.model).summary()}")
    print(LOG_HEADER)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss.csv", "a") as log_file:
        def log(line: str) -> None:
            print(line, flush=True)
            log_file.write(line + "\n")
        trainer.run(log=log, ckpt_dir=out)
    return EXIT_OK


def cmd_eval(args) -> int:
    expected = load_config(args.config) if args.config else None
    model, cfg = load_model(args.ckpt, expected)
    result = evaluate(model, args.data, cfg)
    for line in result.lines():
        print(line)
    print(f"# {result.table()}", file=sys.stderr)
    if args.out:
        write_report(result, args.out)
    return EXIT_OK


def cmd_infer(args) -> int:
    model, cfg = load_model(args.ckpt)
    paths = infer_sequence(model, cfg, args.seq, args.out)
    print(f"wrote {len(paths)} masks to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(args.seed)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    rows = ablate(cfg, args.study, log=lambda s: print(f"# {s}", flush=True))
    print(format_ablation(args.study, rows))
    return EXIT_OK


def cmd_synth(args) -> int:
    names = data.generate_suite(args.out, args.sequences, args.length, args.size, args.seed, args.prefix)
    print(f"wrote {len(names)} sequences to {args.out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "gradcheck": cmd_gradcheck,
            "ablate": cmd_ablate, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PnmFormatError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        dump_failure(exc)
        return EXIT_NUMERIC
    except TrunkModified as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
