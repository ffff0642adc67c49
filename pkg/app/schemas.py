from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, PrivateAttr, field_validator, model_validator
from pydantic_core import PydanticCustomError


Method = Literal["tldm", "centralized", "fixed", "dcv1", "dcv2"]
Profile = Literal["benchmark5", "office"]

# error type of a zone whose air mass cannot absorb one step of full supply flow
EULER_ERROR = "euler_stability"


# ---------------------------------------------------------------------------
# Building and scenario data (file-backed)
# ---------------------------------------------------------------------------


class HorizonConfig(BaseModel):
    """Sampling step, MPC look-ahead and simulated day length."""

    step_seconds: float = Field(default=1800.0, gt=0)
    horizon_steps: int = Field(default=10, ge=1)
    day_steps: int = Field(default=48, ge=1)

    @property
    def step_hours(self) -> float:
        return self.step_seconds / 3600.0

    @model_validator(mode="after")
    def _day_covers_horizon(self) -> "HorizonConfig":
        if self.day_steps < self.horizon_steps:
            raise ValueError("day_steps must be >= horizon_steps")
        return self


class ZoneParams(BaseModel):
    heat_capacity: float = Field(default=1500.0, gt=0, description="kJ/K")
    air_mass: float = Field(default=1000.0, gt=0, description="kg")
    area: float = Field(default=100.0, gt=0, description="m^2")
    resistance_to_outside: float = Field(default=50.0, gt=0, description="K/kW")
    flow_min: float = Field(default=0.0, ge=0, description="kg/s")
    flow_max: float = Field(default=0.5, gt=0, description="kg/s")
    temp_min: float = Field(default=24.0)
    temp_max: float = Field(default=26.0)
    co2_max: float = Field(default=800.0, gt=0, description="ppm")

    @model_validator(mode="after")
    def _ordered_bounds(self) -> "ZoneParams":
        if self.flow_min >= self.flow_max:
            raise ValueError("flow_min must be < flow_max")
        if self.temp_min >= self.temp_max:
            raise ValueError("temp_min must be < temp_max")
        return self


class Adjacency(BaseModel):
    i: int = Field(..., ge=0)
    j: int = Field(..., ge=0)
    resistance: float = Field(default=14.0, gt=0, description="K/kW")


class BuildingTopology(BaseModel):
    """Zone count plus unordered adjacent pairs; R_ij = R_ji by construction."""

    zone_count: int = Field(..., ge=1)
    adjacency: List[Adjacency] = Field(default_factory=list)

    @model_validator(mode="after")
    def _valid_pairs(self) -> "BuildingTopology":
        seen: set[Tuple[int, int]] = set()
        for edge in self.adjacency:
            if edge.i == edge.j:
                raise ValueError(f"self-loop on zone {edge.i}")
            if edge.i >= self.zone_count or edge.j >= self.zone_count:
                raise ValueError(f"adjacency ({edge.i}, {edge.j}) references a zone >= {self.zone_count}")
            key = (min(edge.i, edge.j), max(edge.i, edge.j))
            if key in seen:
                raise ValueError(f"duplicate adjacency {key}")
            seen.add(key)
        return self

    def neighbors(self, zone: int) -> List[Tuple[int, float]]:
        result = []
        for edge in self.adjacency:
            if edge.i == zone:
                result.append((edge.j, edge.resistance))
            elif edge.j == zone:
                result.append((edge.i, edge.resistance))
        return sorted(result)

    def degree(self, zone: int) -> int:
        return len(self.neighbors(zone))


class AhuParams(BaseModel):
    supply_temp: float = Field(default=15.0, description="T_c, degC")
    fan_coeff: float = Field(default=0.08, ge=0, description="kW/(kg/s)^2")
    cop_inverse: float = Field(default=1.0, gt=0)
    total_flow_max: float = Field(default=2.25, gt=0, description="kg/s")
    dr_min: float = Field(default=0.0, ge=0, le=1)
    dr_max: float = Field(default=0.9, ge=0, le=1)
    dr_step: float = Field(default=0.05, gt=0)
    specific_heat: float = Field(default=1.012, gt=0, description="kJ/(kg K)")
    air_density: float = Field(default=1.2, gt=0, description="kg/m^3")

    @model_validator(mode="after")
    def _ordered_fraction(self) -> "AhuParams":
        if self.dr_min >= self.dr_max:
            raise ValueError("dr_min must be < dr_max")
        return self


class Building(BaseModel):
    zones: List[ZoneParams]
    topology: BuildingTopology
    ahu: AhuParams = Field(default_factory=AhuParams)
    horizon: HorizonConfig = Field(default_factory=HorizonConfig)

    @model_validator(mode="after")
    def _consistent(self) -> "Building":
        if self.topology.zone_count != len(self.zones):
            raise ValueError("topology.zone_count must equal the number of zones")
        if self.ahu.supply_temp >= min(z.temp_min for z in self.zones):
            raise ValueError("supply_temp must be below every zone's temp_min")
        step = self.horizon.step_seconds
        for index, zone in enumerate(self.zones):
            if zone.air_mass < zone.flow_max * step:
                raise PydanticCustomError(
                    EULER_ERROR,
                    "zone {zone}: air_mass {mass} kg is below flow_max x step_seconds = {needed} kg",
                    {"zone": index, "mass": zone.air_mass, "needed": zone.flow_max * step},
                )
        return self

    @property
    def zone_count(self) -> int:
        return len(self.zones)

    def column(self, name: str) -> np.ndarray:
        """One ZoneParams field across all zones."""

        return np.array([getattr(z, name) for z in self.zones], dtype=float)


@dataclass(frozen=True, eq=False)
class ScenarioArrays:
    outdoor_temp: np.ndarray  # (T,)
    outdoor_co2: np.ndarray  # (T,)
    occupancy: np.ndarray  # (T, I)
    internal_gain: np.ndarray  # (T, I)
    price: np.ndarray  # (T,)


class Scenario(BaseModel):
    """Exogenous series. Per-zone series are stored zone-major: ``occupancy[i][t]``."""

    outdoor_temp: List[float]
    outdoor_co2: List[float]
    occupancy: List[List[int]]
    internal_gain: List[List[float]]
    price: List[float]
    co2_gen_rate: float = Field(default=40.0, ge=0, description="g/h per person")
    initial_temps: List[float]
    initial_co2: List[float]

    _arrays: Optional[ScenarioArrays] = PrivateAttr(default=None)

    @field_validator("outdoor_temp", "price", "internal_gain", "initial_temps")
    @classmethod
    def _finite(cls, value: Any) -> Any:
        if not np.all(np.isfinite(np.asarray(value, dtype=float))):
            raise ValueError("series must be finite")
        return value

    @field_validator("outdoor_co2")
    @classmethod
    def _positive_co2(cls, value: List[float]) -> List[float]:
        if any(not math.isfinite(v) or v <= 0 for v in value):
            raise ValueError("outdoor_co2 must be finite and > 0")
        return value

    @field_validator("price")
    @classmethod
    def _nonnegative_price(cls, value: List[float]) -> List[float]:
        if any(v < 0 for v in value):
            raise ValueError("price must be >= 0")
        return value

    @field_validator("occupancy")
    @classmethod
    def _nonnegative_occupancy(cls, value: List[List[int]]) -> List[List[int]]:
        if any(n < 0 for row in value for n in row):
            raise ValueError("occupancy must be >= 0")
        return value

    @field_validator("initial_co2")
    @classmethod
    def _valid_initial_co2(cls, value: List[float]) -> List[float]:
        if any(not math.isfinite(v) or v < 0 for v in value):
            raise ValueError("initial_co2 must be finite and >= 0")
        return value

    @model_validator(mode="after")
    def _consistent_lengths(self) -> "Scenario":
        length = len(self.outdoor_temp)
        if len(self.outdoor_co2) != length or len(self.price) != length:
            raise ValueError("outdoor_temp, outdoor_co2 and price must have equal length")
        zones = len(self.occupancy)
        if len(self.internal_gain) != zones or len(self.initial_temps) != zones or len(self.initial_co2) != zones:
            raise ValueError("per-zone series must agree on the zone count")
        for row in list(self.occupancy) + list(self.internal_gain):
            if len(row) != length:
                raise ValueError("per-zone series must match the outdoor series length")
        return self

    @property
    def length(self) -> int:
        return len(self.outdoor_temp)

    @property
    def zone_count(self) -> int:
        return len(self.occupancy)

    def arrays(self) -> ScenarioArrays:
        """Time-major numpy views, built once."""

        if self._arrays is None:
            self._arrays = ScenarioArrays(
                outdoor_temp=np.asarray(self.outdoor_temp, dtype=float),
                outdoor_co2=np.asarray(self.outdoor_co2, dtype=float),
                occupancy=np.asarray(self.occupancy, dtype=float).T.copy(),
                internal_gain=np.asarray(self.internal_gain, dtype=float).T.copy(),
                price=np.asarray(self.price, dtype=float),
            )
        return self._arrays

    def covers(self, horizon: HorizonConfig) -> bool:
        return self.length >= horizon.day_steps + horizon.horizon_steps


# ---------------------------------------------------------------------------
# HTTP request / response models
# ---------------------------------------------------------------------------


class GenScenarioRequest(BaseModel):
    out_dir: str = Field(..., description="Output directory inside the workspace")
    zones: int = Field(default=5, ge=1)
    seed: int = Field(default=0)
    profile: Profile = Field(default="benchmark5")


class RunRequest(BaseModel):
    building: str = Field(..., description="Relative path to building.json inside the workspace")
    scenario: str = Field(..., description="Relative path to scenario.json inside the workspace")
    out_dir: str = Field(..., description="Output directory inside the workspace")
    method: Method = Field(default="tldm")
    steps: Optional[int] = Field(default=None, ge=1, description="Simulate only the first N steps")
    overrides: Dict[str, Any] = Field(default_factory=dict)


class CompareRequest(BaseModel):
    building: str
    scenario: str
    out_dir: str
    methods: List[Method] = Field(default_factory=lambda: ["tldm", "centralized", "fixed", "dcv1", "dcv2"])
    steps: Optional[int] = Field(default=None, ge=1)
    overrides: Dict[str, Any] = Field(default_factory=dict)


class OracleRequest(BaseModel):
    building: str
    scenario: str
    flow_levels: int = Field(default=21, ge=1)
    dr_levels: int = Field(default=11, ge=1)
    start: int = Field(default=0, ge=0)


class OperationResponse(BaseModel):
    success: bool
    message: str
    metadata: Optional[Dict[str, Any]] = None
    summary: Optional[List[Dict[str, Any]]] = None
    files: Optional[List[str]] = None


class HealthResponse(BaseModel):
    status: str
    app: str
