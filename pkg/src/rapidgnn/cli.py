"""Command line front end.

    python -m rapidgnn run    [--config FILE] [--workers 4 --mode baseline ...]
    python -m rapidgnn scale  --scale-workers 2,3,4 [...]
    python -m rapidgnn verify [...]

Every ExperimentConfig field has a ``--dashed-name`` flag; flags override the
config file. Exit codes: 0 success, 1 configuration error, 2 oracle failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .harness import (
    ConfigError,
    ExperimentConfig,
    coerce,
    fetch_wait_ratio,
    load_config_file,
    run_experiment,
    run_scaling,
    verify_oracles,
)

EXIT_OK, EXIT_CONFIG, EXIT_ORACLE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; command line flags take precedence")
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if isinstance(default, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper(),
                           help=f"default: {','.join(map(str, default)) if isinstance(default, tuple) else default}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rapidgnn", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="train once and write metrics.csv")
    run.add_argument("--compare", action="store_true",
                     help="also run the baseline with the same seeds and print the fetch-wait ratio")
    _add_config_flags(run)
    scale = sub.add_parser("scale", help="makespan and speedup over worker counts")
    scale.add_argument("--scale-workers", default="2,3,4")
    _add_config_flags(scale)
    ver = sub.add_parser("verify", help="run the replay oracles on a small configuration")
    _add_config_flags(ver)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config_file(args.config) if args.config else ExperimentConfig()
    updates = {}
    for f in dataclasses.fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is None:
            continue
        updates[f.name] = v if isinstance(v, bool) else coerce(f.name, v)
    return cfg.replace(**updates).validate()


def _summary(rep) -> str:
    lines = []
    times = rep.epoch_times()
    rpc = rep.per_epoch("rpc")
    for e, (t, n, acc) in enumerate(zip(times, rpc, rep.accuracy)):
        lines.append(f"epoch {e}: time {t:.4f}s rpc {n} accuracy {acc:.4f}")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "run":
            rep = run_experiment(cfg)
            print(_summary(rep))
            if args.compare and cfg.mode == "rapidgnn":
                base = run_experiment(cfg.replace(mode="baseline", out=None))
                print(f"fetch-wait ratio (baseline/rapidgnn): {fetch_wait_ratio(base, rep):.3f}")
            if cfg.out:
                print(f"wrote {cfg.out}/metrics.csv")
            return EXIT_OK
        if args.command == "scale":
            counts = [int(x) for x in args.scale_workers.split(",") if x.strip()]
            if not counts or min(counts) < 1:
                raise ConfigError("--scale-workers needs positive worker counts")
            for row in run_scaling(cfg, counts):
                print(f"P={row['workers']}: makespan {row['makespan']:.4f}s speedup {row['speedup']:.3f}")
            return EXIT_OK
        results = verify_oracles(cfg)
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name}" + (f": {r.detail}" if r.detail else ""))
        return EXIT_OK if all(r.passed for r in results) else EXIT_ORACLE
    except (ConfigError, FileNotFoundError) as exc:
        print(f"rapidgnn: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
