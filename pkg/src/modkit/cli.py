"""Command-line experiment runner.

Subcommands: ``gen-data``, ``train-eval``, ``self-train``, ``attribute``,
``report``. Settings merge defaults < config file < ``key=value`` overrides
< dedicated flags; the merged result is echoed into the run directory so any
run reproduces from its own output. Exit codes: 0 success, 2 configuration
or usage error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from . import experiments
from .config import RunConfig, make_config, parse_config_file, parse_overrides
from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    NumericsError,
    ParseError,
)
from .metrics import format_number

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_COMMANDS = (
    ("gen-data", "generate a seeded synthetic dataset and tabulate class counts"),
    ("train-eval", "train the selected architectures and report accuracy"),
    ("self-train", "run the pseudo-labeling loop and any configured sweeps"),
    ("attribute", "write attribution heatmaps for a saved model and image"),
    ("report", "consolidate a run directory's tables into report.txt"),
)

# self-train is the only subcommand whose natural task differs from the
# schema default; the file and flags still override this.
_TASK_DEFAULTS = {"self-train": {"task": "shoulder-segment"}}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modkit",
        description="gated modular classifiers, self-training segmentation, "
                    "and attribution maps",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMANDS:
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", metavar="PATH",
                         help="flat key = value config file")
        sub.add_argument("--seed", type=int, metavar="U64", help="root seed")
        sub.add_argument("--out", metavar="DIR", help="run output directory")
        sub.add_argument("--threads", type=int, metavar="N",
                         help="worker threads for data generation")
        if name == "attribute":
            sub.add_argument("--model", required=True, metavar="PATH",
                             help="saved .bin parameters (with .json sidecar)")
            sub.add_argument("--image", required=True, metavar="PATH",
                             help="input image (P5/P6 pixmap)")
            sub.add_argument("--method", metavar="NAME",
                             help="attribution method (gradcam | sobol)")
            sub.add_argument("--class", dest="target_class", type=int,
                             metavar="K", help="target class index")
        sub.add_argument("overrides", nargs="*", metavar="key=value",
                         help="config overrides")
    return parser


def effective_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, config file, key=value overrides, and flags."""
    sources = [dict(_TASK_DEFAULTS.get(args.command, {}))]
    if args.config:
        sources.append(parse_config_file(args.config))
    sources.append(parse_overrides(args.overrides))
    flags = {}
    for key in ("seed", "out", "threads"):
        value = getattr(args, key)
        if value is not None:
            flags[key] = value
    if getattr(args, "method", None) is not None:
        flags["attribute.method"] = args.method
    if getattr(args, "target_class", None) is not None:
        flags["attribute.target_class"] = args.target_class
    sources.append(flags)
    return make_config(*sources)


def _cmd_gen_data(config: RunConfig, args) -> None:
    result = experiments.run_gen_data(config)
    for name, count in result["counts"].items():
        print(f"{name} {count}")
    print(f"dataset written to {result['dataset']}")


def _cmd_train_eval(config: RunConfig, args) -> None:
    result = experiments.run_train_eval(config)
    print("architecture accuracy ci_lower ci_upper")
    for name, ci in result["rows"]:
        print(f"{name} {format_number(ci.estimate)} "
              f"{format_number(ci.lower)} {format_number(ci.upper)}")
    print(f"reports written to {result['run_dir']}")


def _cmd_self_train(config: RunConfig, args) -> None:
    result = experiments.run_self_train(config)
    for row in result["history"]:
        print(f"round {row['round']}: selected={row['selected']} "
              f"labeled={row['pool_labeled']} pseudo={row['pool_pseudo']} "
              f"unlabeled={row['pool_unlabeled']} "
              f"accuracy={format_number(row['test_accuracy'])} "
              f"iou={format_number(row['mean_iou'])}")
    print(f"reports written to {result['run_dir']}")


def _cmd_attribute(config: RunConfig, args) -> None:
    result = experiments.run_attribute(config, args.model, args.image)
    if result["map"].degenerate:
        print("warning: model output has zero variance; map is identically zero")
    print(f"overlay written to {result['overlay']}")
    print(f"raw map written to {result['raw']}")


def _cmd_report(config: RunConfig, args) -> None:
    print(experiments.run_report(config), end="")


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train-eval": _cmd_train_eval,
    "self-train": _cmd_self_train,
    "attribute": _cmd_attribute,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = effective_config(args)
        _HANDLERS[args.command](config, args)
    except (ConfigError, ContractError, DegenerateInputError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except NumericsError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
