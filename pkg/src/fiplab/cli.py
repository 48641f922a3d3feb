"""Command-line entry point: ``fiplab <stage> [--config FILE] [--force]``.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 numerical failure (including an SVD that does not converge).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .errors import ConfigError, NumericalError, PrerequisiteError, SchemaMismatchError, SvdConvergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQUISITE = 3
EXIT_NUMERICAL = 4


def _stage_parser(sub, name, help_text):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", help="JSON file merged over the bundled defaults")
    p.add_argument("--out", help=f"output directory (overrides ${pipeline.OUTPUT_ENV} and the config)")
    p.add_argument("--force", action="store_true", help="rerun even if artifacts are current")
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="fiplab", description="Backdoor sharpness analysis and Fisher-guided purification.")
    sub = parser.add_subparsers(dest="command", required=True)
    _stage_parser(sub, "gen-data", "generate or load the datasets and poison the training split")
    _stage_parser(sub, "train", "train the benign and backdoored models")
    _stage_parser(sub, "analyze", "Hessian smoothness of both trained models")
    _stage_parser(sub, "purify", "purify the backdoored model (fip, ffip or vanilla-ft)")
    _stage_parser(sub, "report", "write report.json and the CSV tables")
    _stage_parser(sub, "run", "all stages in order")
    d = sub.add_parser("diff", help="drops from report A (no defense) to report B")
    d.add_argument("a")
    d.add_argument("b")
    d.add_argument("--row", default="after", choices=["benign", "before", "after"])
    d.add_argument("--json", action="store_true", help="print the deltas as JSON")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "diff":
            delta = pipeline.diff_reports(args.a, args.b, row=args.row)
            print(json.dumps(delta.deltas, indent=2) if args.json else delta.text())
            return EXIT_OK
        stages = "all" if args.command == "run" else args.command
        result = pipeline.run(args.config, stages, force=args.force, out_dir=args.out)
    except (ConfigError, SchemaMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except (NumericalError, SvdConvergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for stage, seconds in result.seconds.items():
        state = "cached" if result.cached[stage] else f"{seconds:.2f}s"
        print(f"{stage:<9s} {state}")
    if result.report is not None:
        print(f"report    {result.out_dir / 'report.json'} sha256={result.report_checksum[:16]}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
