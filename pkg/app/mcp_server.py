from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from mcp.server.fastmcp import FastMCP

from . import baselines, reports, scenarios
from .config import Settings, settings_with_overrides
from .controller import mpc_run
from .errors import EpochError, InfeasibleError, InputError, TldmError
from .model import PlantState, RunReport
from .schemas import Building, Scenario
from .utils import format_error, logger


# FastMCP instance that owns the tool registry for MCP clients.
server = FastMCP("hvac-tldm")

METHODS = ("tldm", "centralized", "fixed", "dcv1", "dcv2")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NONCONVERGED = 3
EXIT_COMFORT = 4


def _failure(exc: Exception) -> Dict[str, Any]:
    payload = format_error(str(exc))
    payload["exit_code"] = EXIT_COMFORT if isinstance(exc, (InfeasibleError, EpochError)) else EXIT_INPUT
    return payload


def exit_code_for(run_reports: List[RunReport]) -> int:
    """Comfort infeasibility outranks solver non-convergence."""

    if any(r.infeasible_epochs for r in run_reports):
        return EXIT_COMFORT
    if any(r.nonconverged_epochs for r in run_reports):
        return EXIT_NONCONVERGED
    return EXIT_OK


def _load(building_path: str, scenario_path: str) -> Tuple[Building, Scenario]:
    building = scenarios.load_building(building_path)
    return building, scenarios.load_scenario(scenario_path, building)


def run_method_report(
    method: str, building: Building, scen: Scenario, settings: Settings, steps: Optional[int] = None
) -> RunReport:
    cfg = settings.tldm_config()
    if method == "tldm":
        return mpc_run(scen, building, cfg, steps)
    if method == "centralized":
        return mpc_run(scen, building, cfg.model_copy(update={"centralized": True}), steps)
    if method == "fixed":
        return baselines.run_fixed_vent(scen, building, cfg, steps)
    if method in ("dcv1", "dcv2"):
        dcv = settings.dcv_config("I" if method == "dcv1" else "II", building.zone_count)
        return baselines.run_dcv(scen, building, dcv, cfg, steps)
    raise InputError(f"Unknown method '{method}'. Expected one of: {', '.join(METHODS)}.")


def _write_method_outputs(report: RunReport, out_dir: Path) -> List[str]:
    files = [reports.write_report_csv(report, out_dir / f"{report.method}.csv")]
    epochs = out_dir / f"{report.method}_epochs.csv"
    reports.epoch_frame(report).to_csv(epochs, index=False, float_format=reports.FLOAT_FORMAT)
    files.append(epochs)
    if report.diagnostics:
        files.append(reports.write_diagnostics(report.diagnostics, out_dir / f"{report.method}_llc_diagnostics.csv"))
    return [str(f) for f in files]


@server.tool(name="gen_scenario", description="Generate building and scenario JSON files (benchmark5 or office profile)")
def gen_scenario(out_dir: str, zones: int = 5, seed: int = 0, profile: str = "benchmark5") -> Dict[str, Any]:
    """
    Write building.json and scenario.json for a generated case.
    """
    try:
        if profile not in ("benchmark5", "office"):
            raise InputError(f"Unknown profile '{profile}'.")
        building, scen = scenarios.gen_scenario(zones, seed, profile)  # type: ignore[arg-type]
        paths = scenarios.write_scenario_files(building, scen, out_dir)
    except (TldmError, OSError) as exc:
        return _failure(exc)

    return {
        "success": True,
        "message": f"Generated {profile} scenario with {building.zone_count} zones.",
        "files": [str(p) for p in paths],
        "metadata": {"zones": building.zone_count, "steps": scen.length, "seed": seed, "profile": profile},
        "exit_code": EXIT_OK,
    }


@server.tool(name="run_method", description="Run one controller (tldm, centralized, fixed, dcv1, dcv2) over a scenario and write CSV reports")
def run_method(
    building: str,
    scenario: str,
    out_dir: str,
    method: str = "tldm",
    steps: Optional[int] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Simulate a full day (or the first ``steps`` steps) under one controller.
    """
    try:
        settings = settings_with_overrides(overrides)
        building_obj, scen = _load(building, scenario)
        report = run_method_report(method, building_obj, scen, settings, steps)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = _write_method_outputs(report, out)
        summary = reports.summary_row(report, building_obj.zones)
    except (TldmError, OSError) as exc:
        logger.error(f"run_method failed: {exc}")
        return _failure(exc)

    return {
        "success": True,
        "message": f"{method}: cost {report.total_cost:.4f} over {report.steps} steps.",
        "summary": [summary],
        "files": files,
        "metadata": {
            "nonconverged_epochs": report.nonconverged_epochs,
            "infeasible_epochs": report.infeasible_epochs,
        },
        "exit_code": exit_code_for([report]),
    }


@server.tool(name="compare_methods", description="Run several controllers on one scenario and write the comparison table")
def compare_methods(
    building: str,
    scenario: str,
    out_dir: str,
    methods: Optional[List[str]] = None,
    steps: Optional[int] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Run each method; a failing method is recorded in the table and the others continue.
    """
    methods = list(METHODS) if methods is None else list(methods)
    try:
        if not methods:
            raise InputError("At least one method is required for a comparison.")
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise InputError(f"Unknown method(s): {', '.join(unknown)}.")
        settings = settings_with_overrides(overrides)
        building_obj, scen = _load(building, scenario)
    except TldmError as exc:
        return _failure(exc)

    def run_one(method: str) -> Tuple[str, Optional[RunReport], Optional[TldmError]]:
        try:
            return method, run_method_report(method, building_obj, scen, settings, steps), None
        except TldmError as exc:
            logger.error(f"compare: {method} failed: {exc}")
            return method, None, exc

    if settings.workers > 1 and len(methods) > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as executor:
            outcomes = list(executor.map(run_one, methods))
    else:
        outcomes = [run_one(m) for m in methods]

    run_reports = {m: r for m, r, _ in outcomes if r is not None}
    errors = {m: err for m, _, err in outcomes if err is not None}
    failures = {m: str(err) for m, err in errors.items()}
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        frame = reports.comparison_frame(run_reports, building_obj.zones, failures, order=methods)
        files = [str(p) for p in reports.write_comparison(frame, run_reports, out)]
        for report in run_reports.values():
            files.extend(_write_method_outputs(report, out))
    except (TldmError, OSError) as exc:
        return _failure(exc)

    codes = [exit_code_for(list(run_reports.values()))] + [_failure(err)["exit_code"] for err in errors.values()]
    code = next((c for c in (EXIT_INPUT, EXIT_COMFORT, EXIT_NONCONVERGED) if c in codes), EXIT_OK)
    return {
        "success": bool(run_reports),
        "message": f"Compared {len(methods)} method(s); {len(failures)} failed.",
        "summary": frame.astype(object).where(frame.notna(), None).to_dict(orient="records"),
        "files": files,
        "metadata": {"failures": failures},
        "exit_code": code,
    }


@server.tool(name="run_oracle", description="Brute-force the cheapest grid plan of a tiny instance (<= 2 zones, horizon <= 3)")
def run_oracle(
    building: str,
    scenario: str,
    flow_levels: int = 21,
    dr_levels: int = 11,
    start: int = 0,
    overrides: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Exhaustive search over the discretized controls of one horizon window.
    """
    try:
        settings = settings_with_overrides(overrides)
        building_obj, scen = _load(building, scenario)
        state = None
        if start:
            state = PlantState(scen.initial_temps, scen.initial_co2, start)
        result = baselines.brute_force_oracle(
            scen, building_obj, flow_levels, dr_levels, state, settings.oracle_max_combinations
        )
    except TldmError as exc:
        return _failure(exc)

    if not result.feasible:
        return {
            "success": True,
            "message": f"No feasible plan among {result.evaluated} grid plans.",
            "metadata": {"evaluated": result.evaluated, "feasible_count": 0},
            "exit_code": EXIT_COMFORT,
        }
    return {
        "success": True,
        "message": f"Oracle cost {result.cost:.6f} ({result.feasible_count} of {result.evaluated} plans feasible).",
        "metadata": {
            "cost": result.cost,
            "evaluated": result.evaluated,
            "feasible_count": result.feasible_count,
            "flows": result.plan.flows.tolist(),
            "dr": result.plan.vent_fraction.tolist(),
        },
        "exit_code": EXIT_OK,
    }


@server.tool(name="calibrate_dcv", description="Bisect the DCV per-person rate until peak CO2 sits just below the cap")
def calibrate_dcv(
    building: str,
    scenario: str,
    variant: str = "I",
    steps: Optional[int] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Offline tuning of the DCV rates on a calibration scenario.
    """
    try:
        if variant not in ("I", "II"):
            raise InputError("variant must be 'I' or 'II'")
        settings = settings_with_overrides(overrides)
        building_obj, scen = _load(building, scenario)
        result = baselines.calibrate_dcv(scen, building_obj, variant, settings.tldm_config(), steps)  # type: ignore[arg-type]
    except TldmError as exc:
        return _failure(exc)

    return {
        "success": True,
        "message": (
            f"DCV {variant}: R_p={result.config.per_person_rate:.3f} L/s per person, "
            f"R_a={result.config.per_area_rate:.3f} L/s per m2, peak CO2 {result.max_co2:.1f} ppm."
        ),
        "metadata": {
            "per_person_rate": result.config.per_person_rate,
            "per_area_rate": result.config.per_area_rate,
            "max_co2_ppm": result.max_co2,
            "iterations": result.iterations,
            "within_band": result.within_band,
        },
        "exit_code": EXIT_OK if result.within_band else EXIT_NONCONVERGED,
    }
