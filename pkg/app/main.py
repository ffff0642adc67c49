from __future__ import annotations

from typing import Any, Dict

from fastapi import FastAPI, HTTPException

from .config import get_settings
from .errors import InputError
from .mcp_server import compare_methods, gen_scenario, run_method, run_oracle
from .schemas import (
    CompareRequest,
    GenScenarioRequest,
    HealthResponse,
    OperationResponse,
    OracleRequest,
    RunRequest,
)
from .utils import ensure_path_within_workspace, init_logging


settings = get_settings()
init_logging(settings.log_level, settings.epoch_log)

app = FastAPI(
    title=settings.app_name,
    version="1.0.0",
    description="Two-level distributed MPC for multi-zone HVAC, served with FastAPI.",
)


def _workspace_path(path: str) -> str:
    try:
        return str(ensure_path_within_workspace(path, settings.workspace_dir))
    except InputError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


def _respond(result: Dict[str, Any]) -> OperationResponse:
    if not result.get("success"):
        raise HTTPException(status_code=400, detail=result.get("message", "Unknown error"))
    metadata = dict(result.get("metadata") or {})
    metadata["exit_code"] = result.get("exit_code", 0)
    return OperationResponse(
        success=True,
        message=result["message"],
        metadata=metadata,
        summary=result.get("summary"),
        files=result.get("files"),
    )


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", app=settings.app_name)


@app.get("/")
def root():
    return {
        "message": "HVAC TLDM server is running",
        "version": "1.0.0",
        "endpoints": {
            "health": "/health",
            "gen_scenario": "/tldm/gen-scenario",
            "run": "/tldm/run",
            "compare": "/tldm/compare",
            "oracle": "/tldm/oracle",
        },
    }


@app.post("/tldm/gen-scenario", response_model=OperationResponse)
def gen_scenario_endpoint(payload: GenScenarioRequest) -> OperationResponse:
    out_dir = _workspace_path(payload.out_dir)
    return _respond(gen_scenario(out_dir, payload.zones, payload.seed, payload.profile))


@app.post("/tldm/run", response_model=OperationResponse)
def run_endpoint(payload: RunRequest) -> OperationResponse:
    result = run_method(
        _workspace_path(payload.building),
        _workspace_path(payload.scenario),
        _workspace_path(payload.out_dir),
        payload.method,
        payload.steps,
        payload.overrides,
    )
    return _respond(result)


@app.post("/tldm/compare", response_model=OperationResponse)
def compare_endpoint(payload: CompareRequest) -> OperationResponse:
    result = compare_methods(
        _workspace_path(payload.building),
        _workspace_path(payload.scenario),
        _workspace_path(payload.out_dir),
        list(payload.methods),
        payload.steps,
        payload.overrides,
    )
    return _respond(result)


@app.post("/tldm/oracle", response_model=OperationResponse)
def oracle_endpoint(payload: OracleRequest) -> OperationResponse:
    result = run_oracle(
        _workspace_path(payload.building),
        _workspace_path(payload.scenario),
        payload.flow_levels,
        payload.dr_levels,
        payload.start,
    )
    return _respond(result)
