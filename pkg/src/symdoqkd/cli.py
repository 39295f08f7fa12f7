"""``simulate`` command line entry point."""

import argparse
import json
import logging
import sys

from symdoqkd.config import SCENARIOS, ScenarioConfig, load_config
from symdoqkd.scenarios import run_scenario


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simulate", description="Symmetric DO-QKD network simulator")
    p.add_argument("--config", help="INI config file or a bundle's manifest.json (default: calibration defaults)")
    p.add_argument("--scenario", choices=SCENARIOS, help="overrides [run] scenario")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit), overrides [run] seed")
    p.add_argument("--out", required=True, help="output directory for the report bundle")
    p.add_argument("--workers", type=int, default=1, help="worker processes (output does not depend on it)")
    p.add_argument("--blind", action="store_true", help="strip ground-truth origin columns from event exports")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ScenarioConfig()
        changes = {}
        if args.scenario:
            changes["scenario"] = args.scenario
        if args.seed is not None:
            changes["seed"] = args.seed
        if changes:
            cfg = cfg.with_run(**changes)
        if args.workers < 1:
            raise ValueError("--workers must be >= 1")
        run_scenario(cfg, args.out, workers=args.workers, blind=args.blind)
    except Exception as exc:  # reported as machine-readable JSON
        err = {"error": type(exc).__name__, "message": str(exc)}
        line = getattr(exc, "line", None)
        if line is not None:
            err["line"] = line
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
