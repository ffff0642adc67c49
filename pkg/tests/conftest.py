from __future__ import annotations

from typing import List, Optional, Sequence

import pytest

from app.schemas import Adjacency, AhuParams, Building, BuildingTopology, HorizonConfig, Scenario, ZoneParams


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def make_building(
    zones: int = 2,
    horizon_steps: int = 3,
    day_steps: int = 4,
    adjacent: bool = True,
    total_flow_max: Optional[float] = None,
    **zone_fields,
) -> Building:
    """Small building with Table-I zones; consecutive zones share a wall when ``adjacent``."""

    edges = [Adjacency(i=i, j=i + 1, resistance=14.0) for i in range(zones - 1)] if adjacent else []
    return Building(
        zones=[ZoneParams(**zone_fields) for _ in range(zones)],
        topology=BuildingTopology(zone_count=zones, adjacency=edges),
        ahu=AhuParams(total_flow_max=total_flow_max if total_flow_max is not None else 0.45 * zones),
        horizon=HorizonConfig(horizon_steps=horizon_steps, day_steps=day_steps),
    )


def make_scenario(
    building: Building,
    outdoor_temp: float = 30.0,
    occupancy: int | Sequence[int] = 0,
    gain: float = 0.2,
    price: float = 0.2,
    initial_temps: float | List[float] = 25.0,
    initial_co2: float | List[float] = 400.0,
    length: Optional[int] = None,
) -> Scenario:
    """Constant exogenous series covering one day plus the look-ahead window."""

    zones = building.zone_count
    length = length or building.horizon.day_steps + building.horizon.horizon_steps
    heads = [occupancy] * zones if isinstance(occupancy, int) else list(occupancy)
    temps = [initial_temps] * zones if isinstance(initial_temps, (int, float)) else list(initial_temps)
    co2 = [initial_co2] * zones if isinstance(initial_co2, (int, float)) else list(initial_co2)
    return Scenario(
        outdoor_temp=[outdoor_temp] * length,
        outdoor_co2=[400.0] * length,
        occupancy=[[n] * length for n in heads],
        internal_gain=[[gain] * length for _ in range(zones)],
        price=[price] * length,
        initial_temps=[float(t) for t in temps],
        initial_co2=[float(c) for c in co2],
    )


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


@pytest.fixture
def building() -> Building:
    return make_building()


@pytest.fixture
def empty_scenario(building: Building) -> Scenario:
    """Nobody in the building: CO2 stays at the outdoor level."""

    return make_scenario(building)


@pytest.fixture
def scenario_files(tmp_path, building, empty_scenario):
    from app.scenarios import write_scenario_files

    building_path, scenario_path = write_scenario_files(building, empty_scenario, tmp_path / "case")
    return building_path, scenario_path
