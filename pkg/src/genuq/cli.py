"""Command-line surface.

Every command reads one config file and drives the pipeline up to its
stage; earlier stages are reused from cache when their inputs are
unchanged. Exit codes: 0 success, 2 config error, 3 numeric failure,
4 cache or hash mismatch.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import ConfigError, GenUqError, exit_code_for
from .pipeline import Pipeline

COMMANDS = ("gen-dataset", "train", "fit-laplace", "score", "filter", "eval", "plot", "run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genuq",
        description=(
            "Train small diffusion/flow models, score generations by "
            "posterior disagreement, filter, and evaluate."
        ),
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--output-dir", default=None, help="override output directory")
    parser.add_argument("--threads", type=int, default=None, help="worker thread count")
    return parser


def _dispatch(command: str, pipe: Pipeline) -> None:
    if command == "gen-dataset":
        pipe.run_dataset()
    elif command == "train":
        pipe.run_train()
    elif command == "fit-laplace":
        if pipe.cfg.posterior.kind != "laplace":
            raise ConfigError("fit-laplace requires posterior.kind = laplace")
        pipe.run_posterior()
    elif command == "score":
        pipe.run_score()
    elif command == "filter":
        pipe.run_filter()
    elif command == "eval":
        pipe.run_eval()
    elif command == "plot":
        pipe.run_plot()
    else:
        pipe.run_all()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir,
                          threads=args.threads)
        pipe = Pipeline(cfg)
        _dispatch(args.command, pipe)
    except GenUqError as exc:
        print(f"genuq: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    cached = [name for name, rec in pipe.manifest["stages"].items() if rec["cached"]]
    ran = [name for name, rec in pipe.manifest["stages"].items() if not rec["cached"]]
    print(f"genuq {args.command}: ok (ran: {', '.join(ran) or 'none'}; "
          f"cached: {', '.join(cached) or 'none'})")
    print(f"output: {pipe.out / 'manifest.json'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
