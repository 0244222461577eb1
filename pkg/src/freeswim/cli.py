"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 runtime or numeric error. Errors
are reported as one JSON line on stderr, and no report file is written.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .pipeline import REPORT_DIR_ENV, ConfigError, execute, parse_config, write_report

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="freeswim", description="Two-stage toy pipeline with inward window attention and "
                                              "dual-path cross-attention override.")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--native-grid", metavar="FxHxW")
    p.add_argument("--target-grid", metavar="FxHxW")
    p.add_argument("--window", metavar="WxH", help="even window extents (default: native extents)")
    p.add_argument("--steps", help="number of inference steps (50)")
    p.add_argument("--strength", help="SDEdit strength in (0, 1] (0.7)")
    p.add_argument("--guidance-scale", help="CFG scale (5.0)")
    p.add_argument("--flow-shift", help="sigma schedule shift (9.0)")
    p.add_argument("--lambda", dest="lambda_", metavar="LAMBDA", help="override strength in [0, 1] (1.0)")
    p.add_argument("--cache-period", help="full-branch refresh period P (2)")
    p.add_argument("--dual-path-on-uncond", action="store_const", const=True, default=None,
                   help="also run the full branch for the unconditional pass")
    p.add_argument("--scale-mode", help="inverse-sqrt-d | entropy")
    p.add_argument("--weight-seed")
    p.add_argument("--noise-seed")
    p.add_argument("--upsample", help="nearest | trilinear")
    p.add_argument("--model-dim")
    p.add_argument("--head-dim")
    p.add_argument("--heads")
    p.add_argument("--blocks")
    p.add_argument("--text-len")
    p.add_argument("--text-dim")
    p.add_argument("--channels")
    p.add_argument("--report", metavar="PATH", help=f"report path (default: ${REPORT_DIR_ENV}/report.json or stdout)")
    p.add_argument("--bench-only", action="store_const", const=True, default=None,
                   help="only compute mask statistics and FLOPs, no denoising")
    return p


def _fail(code: int, kind: str, message: str, key: str | None = None) -> int:
    payload = {"error": kind, "message": message}
    if key is not None:
        payload["key"] = key
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {k: v for k, v in vars(args).items() if k != "config"}
        overrides["lambda"] = overrides.pop("lambda_")
        config = parse_config(args.config, overrides)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), exc.key)

    try:
        report = execute(config).report
    except (ArithmeticError, ValueError, MemoryError) as exc:
        return _fail(EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}")

    target = config.report
    if target is None and os.environ.get(REPORT_DIR_ENV):
        target = str(Path(os.environ[REPORT_DIR_ENV]) / "report.json")
    if target is None:
        sys.stdout.write(report.to_json())
    else:
        try:
            write_report(report, target)
        except OSError as exc:
            return _fail(EXIT_RUNTIME, "runtime", f"cannot write report: {exc}")
        print(target)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
