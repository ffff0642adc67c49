from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from .errors import InputError, ParameterError
from .model import estimate_internal_gain
from .schemas import EULER_ERROR, Adjacency, AhuParams, Building, BuildingTopology, HorizonConfig, Profile, Scenario, ZoneParams


BUILDING_FILE = "building.json"
SCENARIO_FILE = "scenario.json"

BENCHMARK_INITIAL_TEMPS = [29.0, 30.0, 31.0, 30.0, 29.0]
BENCHMARK_PEAK_OCCUPANCY = [12, 11, 12, 10, 9]
GAIN_PER_PERSON_KW = 0.3
GAIN_BASELINE_KW = 0.2
PEAK_PRICE = 0.20
OFFPEAK_PRICE = 0.12
AREA_PER_PERSON = 25.0
MAX_DEGREE = 4


def _hours(horizon: HorizonConfig, length: int) -> np.ndarray:
    """Hour of day of each step, wrapping after one simulated day."""

    return (np.arange(length) % horizon.day_steps) * (24.0 / horizon.day_steps)


def office_occupancy_shape(hours: np.ndarray) -> np.ndarray:
    """Fraction of peak head count: ramp 08-09, lunch dip 12-13, ramp-down 17-19."""

    shape = np.zeros_like(hours, dtype=float)
    shape = np.where((hours >= 8) & (hours < 9), hours - 8, shape)
    shape = np.where((hours >= 9) & (hours < 17), 1.0, shape)
    shape = np.where((hours >= 12) & (hours < 13), 0.6, shape)
    shape = np.where((hours >= 17) & (hours < 19), 1.0 - (hours - 17) / 2.0, shape)
    return shape


def outdoor_temperature(hours: np.ndarray, low: float = 26.0, high: float = 33.0, peak_hour: float = 15.0) -> np.ndarray:
    mid, amplitude = 0.5 * (low + high), 0.5 * (high - low)
    return mid + amplitude * np.cos(2 * np.pi * (hours - peak_hour) / 24.0)


def tou_price(hours: np.ndarray) -> np.ndarray:
    return np.where((hours >= 8) & (hours < 20), PEAK_PRICE, OFFPEAK_PRICE)


def random_adjacency(zones: int, rng: np.random.Generator, max_degree: int = MAX_DEGREE) -> List[Adjacency]:
    """Connected random graph: a shuffled chain plus extra edges while degrees allow."""

    order = rng.permutation(zones)
    degree = np.zeros(zones, dtype=int)
    edges: set[Tuple[int, int]] = set()

    def add(i: int, j: int) -> None:
        edges.add((min(i, j), max(i, j)))
        degree[i] += 1
        degree[j] += 1

    for a, b in zip(order[:-1], order[1:]):
        add(int(a), int(b))
    for _ in range(zones):
        i, j = (int(v) for v in rng.integers(0, zones, size=2))
        if i == j or (min(i, j), max(i, j)) in edges:
            continue
        if degree[i] < max_degree and degree[j] < max_degree:
            add(i, j)
    resistances = rng.uniform(10.0, 20.0, size=len(edges))
    return [Adjacency(i=i, j=j, resistance=float(round(r, 3))) for (i, j), r in zip(sorted(edges), resistances)]


def _scenario(
    horizon: HorizonConfig,
    peaks: np.ndarray,
    initial_temps: List[float],
    rng: Optional[np.random.Generator] = None,
) -> Scenario:
    length = horizon.day_steps + horizon.horizon_steps
    hours = _hours(horizon, length)
    shape = office_occupancy_shape(hours)
    occupancy = np.rint(np.outer(peaks, shape)).astype(int)
    t_out = outdoor_temperature(hours)
    if rng is not None:
        t_out = t_out + rng.normal(0.0, 0.3, size=length)
    gains = estimate_internal_gain(occupancy, GAIN_PER_PERSON_KW, GAIN_BASELINE_KW)
    zones = len(peaks)
    return Scenario(
        outdoor_temp=[round(float(v), 4) for v in t_out],
        outdoor_co2=[400.0] * length,
        occupancy=occupancy.tolist(),
        internal_gain=[[round(float(v), 4) for v in row] for row in gains],
        price=[float(v) for v in tou_price(hours)],
        initial_temps=list(initial_temps),
        initial_co2=[400.0] * zones,
    )


def gen_scenario(
    zones: int = 5, seed: int = 0, profile: Profile = "benchmark5", horizon: Optional[HorizonConfig] = None
) -> Tuple[Building, Scenario]:
    """Building and one day (plus a look-ahead window) of exogenous series."""

    horizon = horizon or HorizonConfig()
    if profile == "benchmark5":
        count = 5
        edges = [Adjacency(i=i, j=(i + 1) % count, resistance=14.0) for i in range(count)]
        building = Building(
            zones=[ZoneParams() for _ in range(count)],
            topology=BuildingTopology(zone_count=count, adjacency=edges),
            ahu=AhuParams(total_flow_max=0.45 * count),
            horizon=horizon,
        )
        scen = _scenario(horizon, np.array(BENCHMARK_PEAK_OCCUPANCY), BENCHMARK_INITIAL_TEMPS)
        return building, scen

    if zones < 1:
        raise InputError("zones must be >= 1")
    rng = np.random.default_rng(seed)
    areas = np.round(rng.uniform(60.0, 140.0, size=zones), 1)
    building = Building(
        zones=[ZoneParams(area=float(a), heat_capacity=float(round(15.0 * a, 1))) for a in areas],
        topology=BuildingTopology(zone_count=zones, adjacency=random_adjacency(zones, rng) if zones > 1 else []),
        ahu=AhuParams(total_flow_max=round(0.45 * zones, 4)),
        horizon=horizon,
    )
    peaks = np.floor(areas / AREA_PER_PERSON)
    initial = [float(round(v, 2)) for v in rng.uniform(27.0, 31.0, size=zones)]
    return building, _scenario(horizon, peaks, initial, rng)


def write_scenario_files(building: Building, scen: Scenario, out_dir: str | Path) -> Tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    building_path = out / BUILDING_FILE
    scenario_path = out / SCENARIO_FILE
    building_path.write_text(building.model_dump_json(indent=2), encoding="utf-8")
    scenario_path.write_text(scen.model_dump_json(indent=2), encoding="utf-8")
    return building_path, scenario_path


def load_building(path: str | Path) -> Building:
    path = Path(path)
    if not path.exists():
        raise InputError(f"Building file '{path}' does not exist.")
    try:
        return Building.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        first = exc.errors()[0]
        if first["type"] == EULER_ERROR:
            raise ParameterError(f"Invalid building file '{path}': {first['msg']}") from exc
        raise InputError(f"Invalid building file '{path}': {first['msg']}") from exc


def load_scenario(path: str | Path, building: Optional[Building] = None) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise InputError(f"Scenario file '{path}' does not exist.")
    try:
        scen = Scenario.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise InputError(f"Invalid scenario file '{path}': {exc.errors()[0]['msg']}") from exc
    if building is not None:
        if scen.zone_count != building.zone_count:
            raise InputError("scenario and building disagree on the zone count")
        if not scen.covers(building.horizon):
            raise InputError("scenario must cover day_steps + horizon_steps")
    return scen
