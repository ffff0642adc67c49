from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import InputError
from .model import RunReport, check_comfort
from .schemas import ZoneParams


FLOAT_FORMAT = "%.6f"
COMPARISON_COLUMNS = [
    "method",
    "cost",
    "max_co2_ppm",
    "max_temp_violation_C",
    "thermal_comfort",
    "iaq",
    "error",
]
# wall-clock columns, kept out of comparison.csv so that file stays reproducible
TIMING_COLUMNS = ["method", "epochs", "mean_epoch_ms", "max_epoch_ms"]
# comfort scoring skips the pre-cooling transient at the start of the day
TRANSIENT_HOURS = 2.0


def report_frame(report: RunReport) -> pd.DataFrame:
    """Long-format trajectory table: one row per executed step and zone.

    Temperatures and CO2 are the states reached after the step's controls.
    """

    steps, zones = report.flow_traj.shape
    if steps == 0:
        return pd.DataFrame(
            columns=["time_index", "zone", "temp_C", "co2_ppm", "flow_kg_s", "dr", "P_c_kW", "P_f_kW", "price", "step_cost"]
        )
    step_index = np.repeat(np.arange(steps) + report.start_index, zones)
    return pd.DataFrame(
        {
            "time_index": step_index,
            "zone": np.tile(np.arange(zones), steps),
            "temp_C": report.temp_traj[1:].ravel(),
            "co2_ppm": report.co2_traj[1:].ravel(),
            "flow_kg_s": report.flow_traj.ravel(),
            "dr": np.repeat(report.dr_traj, zones),
            "P_c_kW": np.repeat(report.cooling_power, zones),
            "P_f_kW": np.repeat(report.fan_power, zones),
            "price": np.repeat(report.price, zones),
            "step_cost": np.repeat(report.step_cost, zones),
        }
    )


def write_report_csv(report: RunReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report_frame(report).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def epoch_frame(report: RunReport) -> pd.DataFrame:
    """Per-epoch solver statistics; the volatile wall time is left out."""

    rows = [{k: v for k, v in stats.items() if k != "wall_ms"} for stats in report.solver_stats]
    frame = pd.DataFrame(rows)
    if "dr" in frame:
        frame["dr"] = frame["dr"].map(lambda values: " ".join(f"{v:.4f}" for v in values) if isinstance(values, list) else values)
    return frame


def comfort_exempt_steps(step_hours: float) -> int:
    return int(round(TRANSIENT_HOURS / step_hours))


def summary_row(report: RunReport, zones: Sequence[ZoneParams], tolerance: float = 0.1) -> Dict[str, Any]:
    comfort = check_comfort(report, zones, tolerance, comfort_exempt_steps(report.step_hours))
    return {
        "method": report.method,
        "cost": report.total_cost,
        "max_co2_ppm": report.max_co2,
        "max_temp_violation_C": comfort.max_temp_violation,
        "thermal_comfort": "Y" if comfort.temp_satisfied else "N",
        "iaq": "Y" if comfort.max_co2_violation <= 1.0 else "N",
        "error": "",
    }


def comparison_frame(
    reports: Mapping[str, RunReport],
    zones: Sequence[ZoneParams],
    failures: Optional[Mapping[str, str]] = None,
    order: Optional[Sequence[str]] = None,
) -> pd.DataFrame:
    failures = failures or {}
    order = list(order) if order is not None else list(reports) + [m for m in failures if m not in reports]
    if not order:
        raise InputError("At least one method is required for a comparison.")
    rows: List[Dict[str, Any]] = []
    for method in order:
        if method in reports:
            rows.append(summary_row(reports[method], zones))
        else:
            rows.append({"method": method, "error": failures.get(method, "not run")})
    return pd.DataFrame(rows, columns=COMPARISON_COLUMNS)


def timing_frame(reports: Mapping[str, RunReport]) -> pd.DataFrame:
    """Epoch wall times per method. Varies between identical runs."""

    rows = []
    for method, report in reports.items():
        times = [s["wall_ms"] for s in report.solver_stats if "wall_ms" in s]
        rows.append(
            {
                "method": method,
                "epochs": len(times),
                "mean_epoch_ms": report.mean_epoch_ms,
                "max_epoch_ms": max(times) if times else 0.0,
            }
        )
    return pd.DataFrame(rows, columns=TIMING_COLUMNS)


def write_comparison(
    frame: pd.DataFrame, reports: Mapping[str, RunReport], out_dir: str | Path
) -> List[Path]:
    """comparison.csv, timing.csv and comparison.xlsx (summary, timing and one sheet per method).

    comparison.csv is byte-identical across repeated runs; timing.csv is not.
    """

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "comparison.csv"
    frame.to_csv(csv_path, index=False, float_format=FLOAT_FORMAT)
    timing = timing_frame(reports)
    timing_path = out / "timing.csv"
    timing.to_csv(timing_path, index=False, float_format="%.3f")
    xlsx_path = out / "comparison.xlsx"
    try:
        with pd.ExcelWriter(xlsx_path, engine="openpyxl") as writer:
            frame.to_excel(writer, sheet_name="summary", index=False)
            timing.to_excel(writer, sheet_name="timing", index=False)
            for method, report in reports.items():
                report_frame(report).to_excel(writer, sheet_name=method[:31], index=False)
    except Exception as exc:
        raise InputError(f"Failed to save Excel workbook: {exc}") from exc
    return [csv_path, timing_path, xlsx_path]


def diagnostics_frame(rows: Sequence[Mapping[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=["step", "outer", "inner", "residual", "objective"])


def write_diagnostics(rows: Sequence[Mapping[str, Any]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    diagnostics_frame(rows).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path
