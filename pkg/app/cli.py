from __future__ import annotations

import argparse
import sys
from typing import Any, Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, Field, ValidationError

from .config import parse_overrides, settings_with_overrides
from .errors import TldmError
from .mcp_server import (
    EXIT_INPUT,
    METHODS,
    calibrate_dcv,
    compare_methods,
    gen_scenario,
    run_method,
    run_oracle,
)
from .utils import init_logging, logger


Command = Literal["gen-scenario", "run", "compare", "oracle", "calibrate-dcv", "serve"]


class CliConfig(BaseModel):
    """Validated command line."""

    command: Command
    scenario_path: Optional[str] = None
    building_path: Optional[str] = None
    out_dir: str = Field(default="runs/out")
    methods: List[str] = Field(default_factory=list)
    seed: int = Field(default=0)
    zones: int = Field(default=5, ge=1)
    profile: Literal["benchmark5", "office"] = Field(default="benchmark5")
    steps: Optional[int] = Field(default=None, ge=1)
    flow_levels: int = Field(default=21, ge=1)
    dr_levels: int = Field(default=11, ge=1)
    variant: Literal["I", "II"] = Field(default="I")
    overrides: Dict[str, Any] = Field(default_factory=dict)
    log_level: Optional[str] = None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hvac-tldm",
        description="Two-level distributed MPC for multi-zone HVAC: scenarios, runs, comparisons and oracles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, needs_files: bool = True) -> None:
        if needs_files:
            p.add_argument("--scenario", dest="scenario_path", required=True, help="Path to scenario.json.")
            p.add_argument("--building", dest="building_path", required=True, help="Path to building.json.")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="Setting override (repeatable).")
        p.add_argument("--log-level", dest="log_level", default=None, help="Logging level (default from settings).")

    gen = sub.add_parser("gen-scenario", help="Write building.json and scenario.json.")
    gen.add_argument("--zones", type=int, default=5)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--profile", choices=["benchmark5", "office"], default="benchmark5")
    gen.add_argument("--out", dest="out_dir", required=True)
    common(gen, needs_files=False)

    run = sub.add_parser("run", help="Run one method over the scenario day.")
    common(run)
    run.add_argument("--method", choices=METHODS, default="tldm")
    run.add_argument("--steps", type=int, default=None, help="Simulate only the first N steps.")
    run.add_argument("--out", dest="out_dir", required=True)

    compare = sub.add_parser("compare", help="Run several methods and write the comparison table.")
    common(compare)
    compare.add_argument("--method", dest="methods", action="append", choices=METHODS, help="Method to include (repeatable; default all).")
    compare.add_argument("--steps", type=int, default=None)
    compare.add_argument("--out", dest="out_dir", required=True)

    oracle = sub.add_parser("oracle", help="Brute-force grid optimum of a tiny instance.")
    common(oracle)
    oracle.add_argument("--flow-levels", type=int, default=21)
    oracle.add_argument("--dr-levels", type=int, default=11)

    calib = sub.add_parser("calibrate-dcv", help="Tune the DCV per-person rate on a scenario.")
    common(calib)
    calib.add_argument("--variant", choices=["I", "II"], default="I")
    calib.add_argument("--steps", type=int, default=None)

    serve = sub.add_parser("serve", help="Serve the HTTP API with uvicorn.")
    common(serve, needs_files=False)
    return parser


def parse_config(argv: Optional[Sequence[str]] = None) -> CliConfig:
    args = vars(build_parser().parse_args(argv))
    args["overrides"] = parse_overrides(args.get("overrides"))
    if args.get("methods") is None:
        args["methods"] = [] if args["command"] != "compare" else list(METHODS)
    if "method" in args:
        args["methods"] = [args.pop("method")]
    return CliConfig.model_validate({k: v for k, v in args.items() if v is not None})


def dispatch(cfg: CliConfig) -> Dict[str, Any]:
    if cfg.command == "gen-scenario":
        return gen_scenario(cfg.out_dir, cfg.zones, cfg.seed, cfg.profile)
    if cfg.command == "run":
        return run_method(cfg.building_path, cfg.scenario_path, cfg.out_dir, cfg.methods[0], cfg.steps, cfg.overrides)
    if cfg.command == "compare":
        return compare_methods(cfg.building_path, cfg.scenario_path, cfg.out_dir, cfg.methods, cfg.steps, cfg.overrides)
    if cfg.command == "oracle":
        return run_oracle(cfg.building_path, cfg.scenario_path, cfg.flow_levels, cfg.dr_levels, 0, cfg.overrides)
    return calibrate_dcv(cfg.building_path, cfg.scenario_path, cfg.variant, cfg.steps, cfg.overrides)


def serve(cfg: CliConfig) -> int:
    import uvicorn

    settings = settings_with_overrides(cfg.overrides)
    uvicorn.run("app.main:app", host=settings.host, port=settings.port, log_level=settings.log_level.lower())
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cfg = parse_config(argv)
        settings = settings_with_overrides(cfg.overrides)
    except (TldmError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    init_logging(cfg.log_level or settings.log_level, settings.epoch_log)

    if cfg.command == "serve":
        return serve(cfg)
    result = dispatch(cfg)
    if not result.get("success"):
        logger.error(result.get("message", "Unknown error"))
    else:
        print(result["message"])
        for path in result.get("files") or []:
            print(f"  wrote {path}")
    return int(result.get("exit_code", 0 if result.get("success") else EXIT_INPUT))


if __name__ == "__main__":
    sys.exit(main())
