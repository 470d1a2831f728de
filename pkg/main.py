"""
Disentangle - CLI Entry Point
Subcommands: run, verify, reference, decompose
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config import (
    DEFAULT_CONFIG_PATH,
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_TASK_FAILURE,
    PROJECT_NAME,
    parse_config,
)
from core.artifact import verify_artifact
from core.dgp import DgpSpec
from core.errors import ArtifactError, ConfigError, HarnessError
from harness import Harness, decompose_grid_file, setup_logging

logger = logging.getLogger(__name__)


def _overrides(args: argparse.Namespace) -> List[str]:
    """Translate the convenience flags into `key.path=value` overrides so they pass validation"""
    out = list(getattr(args, "set", None) or [])
    if getattr(args, "output_dir", None):
        out.append(f"experiment.output_dir={json.dumps(str(args.output_dir))}")
    if getattr(args, "parallelism", None):
        out.append(f"experiment.parallelism={args.parallelism}")
    if getattr(args, "methods", None):
        names = [m.strip() for m in args.methods.split(",") if m.strip()]
        out.append(f"experiment.methods={json.dumps(names)}")
    if getattr(args, "seed", None) is not None:
        out.append(f"experiment.run_seeds=[{args.seed}]")
    if getattr(args, "sizes", None):
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
        out.append(f"experiment.sample_sizes={json.dumps(sizes)}")
    return out


def _config_path(args: argparse.Namespace) -> Optional[Path]:
    if args.config:
        return Path(args.config)
    return DEFAULT_CONFIG_PATH if DEFAULT_CONFIG_PATH.exists() else None


def _load(args: argparse.Namespace):
    return parse_config(_config_path(args), _overrides(args))


def _sized_batches(cfg_overrides: List[str], args: argparse.Namespace) -> List[str]:
    """`--sizes` must keep batch_sizes parallel; pick each size's default batch size"""
    if not getattr(args, "sizes", None):
        return cfg_overrides
    base = parse_config(_config_path(args))
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    batches = [base.batch_sizes[base.sample_sizes.index(n)] if n in base.sample_sizes else 32 for n in sizes]
    return cfg_overrides + [f"experiment.batch_sizes={json.dumps(batches)}"]


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    artifact = Harness(cfg).run()
    print(f"{PROJECT_NAME}: run written to {artifact.run_dir} ({len(artifact.failures)} failed tasks)")
    return EXIT_OK if artifact.ok else EXIT_TASK_FAILURE


def cmd_reference(args: argparse.Namespace) -> int:
    cfg = parse_config(_config_path(args), _sized_batches(_overrides(args), args))
    artifact = Harness(cfg).run_reference()
    print(f"{PROJECT_NAME}: reference written to {artifact.run_dir} ({len(artifact.failures)} failed tasks)")
    return EXIT_OK if artifact.ok else EXIT_TASK_FAILURE


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        report = verify_artifact(Path(args.dir))
    except ArtifactError as e:
        print(f"FAIL {args.dir}: {e}")
        return EXIT_TASK_FAILURE
    for line in report.lines():
        print(line)
    return EXIT_OK if report.ok else EXIT_TASK_FAILURE


def cmd_decompose(args: argparse.Namespace) -> int:
    cfg = _load(args)
    try:
        out = decompose_grid_file(Path(args.grid), DgpSpec(**cfg.dgp))
    except HarnessError as e:
        print(f"FAIL {args.grid}: {e}")
        return EXIT_TASK_FAILURE
    print(f"Breakdown written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disentangle",
                                     description="Simulation harness for aleatoric/epistemic uncertainty methods")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p: argparse.ArgumentParser):
        p.add_argument("--config", help="experiment document (TOML); defaults to config.toml")
        p.add_argument("--output-dir", dest="output_dir", help="run directory")
        p.add_argument("--parallelism", type=int, help="maximum concurrent trainings")
        p.add_argument("--methods", help="comma-separated method names")
        p.add_argument("--seed", type=int, help="single run seed replacing run_seeds")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE", help="inline override (repeatable)")

    run = sub.add_parser("run", help="run the full protocol")
    experiment_flags(run)
    run.set_defaults(func=cmd_run)

    reference = sub.add_parser("reference", help="run only the reference protocol")
    experiment_flags(reference)
    reference.add_argument("--sizes", help="comma-separated sample sizes, e.g. 50,100")
    reference.set_defaults(func=cmd_reference)

    verify = sub.add_parser("verify", help="check a run directory against its manifest")
    verify.add_argument("dir")
    verify.set_defaults(func=cmd_verify)

    decompose = sub.add_parser("decompose", help="recompute the breakdown of a stored reference grid")
    decompose.add_argument("--grid", required=True, help="reference_grid CSV")
    decompose.add_argument("--config", help="experiment document supplying the data-generating process")
    decompose.add_argument("--set", action="append", metavar="KEY.PATH=VALUE")
    decompose.set_defaults(func=cmd_decompose)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point"""
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
