"""Command-line entry point.

    rcmhomlab run <config.json>          execute any configured experiment
    rcmhomlab ahom <config.json>         representative-volume A_hom estimate
    rcmhomlab audit <config.json>        moment or inequality audit
    rcmhomlab plot <csv> <spec> [-o OUT] render a CSV series as an SVG chart

Exit codes: 0 success, 2 validation error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ParameterError, RcmHomLabError, SolverError
from .harness import emit_plot, load_config, run


def _run_config(path: str, allowed: tuple[str, ...] | None = None) -> int:
    config = load_config(path)
    if allowed is not None and config.experiment not in allowed:
        raise ParameterError(
            f"this subcommand expects an experiment in {allowed}, got {config.experiment!r}"
        )
    manifest = run(config)
    if manifest.failure:
        print(f"FAILED ({manifest.failure_kind}): {manifest.failure}", file=sys.stderr)
        return 3 if manifest.failure_kind == "solver" else 2
    for name, digest in manifest.outputs.items():
        print(f"{name}  sha256={digest[:16]}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rcmhomlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")

    p_ahom = sub.add_parser("ahom", help="run an ahom-estimate config")
    p_ahom.add_argument("config")

    p_audit = sub.add_parser("audit", help="run a moment/inequality audit config")
    p_audit.add_argument("config")

    p_plot = sub.add_parser("plot", help="plot a CSV series")
    p_plot.add_argument("csv")
    p_plot.add_argument("spec", help="loglog:<xcol>:<ycol> or semilogy:<xcol>:<ycol>")
    p_plot.add_argument("-o", "--output", default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _run_config(args.config)
        if args.command == "ahom":
            return _run_config(args.config, allowed=("ahom-estimate",))
        if args.command == "audit":
            return _run_config(args.config, allowed=("moment-audit", "inequality-audit"))
        if args.command == "plot":
            result = emit_plot(args.csv, args.spec, out_path=args.output)
            if result.slope is not None:
                print(f"{result.path}  slope={result.slope:.4f}")
            else:
                print(result.path)
            return 0
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except RcmHomLabError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 2
    return 2  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
