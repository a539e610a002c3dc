# app/models/scenario.py

"""
Escenarios de nivel de servicio y tablas de demanda
===================================================

Un `Scenario` describe, para cada par origen-destino, la distancia, los modos
ofrecidos y el nivel de servicio de cada modo. Las tablas de demanda y el
informe de viajes inducidos son los productos del pronóstico.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Mapping, Optional, Tuple

import pandas as pd

from app.errors import ScenarioError
from app.models.choice_model import Mode, Region

LOS_FIELDS = ("travel_cost", "in_vehicle_time", "access_egress_time", "frequency")


@dataclass(frozen=True)
class LevelOfService:
    """Costo en Mil VND, tiempos en horas y frecuencia en servicios por día."""
    travel_cost: float
    in_vehicle_time: float
    access_egress_time: float
    frequency: float = 0.0

    def __post_init__(self):
        for name in LOS_FIELDS:
            value = getattr(self, name)
            if not value >= 0 or value == float("inf"):
                raise ScenarioError(f"Nivel de servicio inválido: {name}={value}")

    def attributes(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in LOS_FIELDS}


@dataclass(frozen=True)
class ODPair:
    origin: int
    destination: int
    distance_km: float
    available_modes: FrozenSet[Mode]

    def __post_init__(self):
        if not self.distance_km > 0:
            raise ScenarioError(
                f"Distancia no positiva en el par {self.origin}->{self.destination}: {self.distance_km}")


@dataclass(frozen=True)
class Scenario:
    name: str
    regions: Mapping[int, Region]
    od_pairs: Mapping[Tuple[int, int], ODPair]
    level_of_service: Mapping[Tuple[int, int, Mode], LevelOfService]

    def __post_init__(self):
        for (origin, destination), pair in self.od_pairs.items():
            for region_id in (origin, destination):
                if region_id not in self.regions:
                    raise ScenarioError(f"El escenario '{self.name}' referencia la región desconocida {region_id}")
            for mode in pair.available_modes:
                if (origin, destination, mode) not in self.level_of_service:
                    raise ScenarioError(
                        f"El escenario '{self.name}' no tiene nivel de servicio para "
                        f"{mode.value} en {origin}->{destination}")

    def destinations(self, origin: int) -> Tuple[int, ...]:
        return tuple(sorted(d for (o, d) in self.od_pairs if o == origin))

    def pair(self, origin: int, destination: int) -> ODPair:
        try:
            return self.od_pairs[(origin, destination)]
        except KeyError:
            raise ScenarioError(f"El escenario '{self.name}' no define el par {origin}->{destination}")

    def los(self, origin: int, destination: int, mode: Mode) -> LevelOfService:
        try:
            return self.level_of_service[(origin, destination, mode)]
        except KeyError:
            raise ScenarioError(
                f"El escenario '{self.name}' no tiene nivel de servicio para {mode.value} en {origin}->{destination}")

    @property
    def modes(self) -> FrozenSet[Mode]:
        return frozenset(mode for pair in self.od_pairs.values() for mode in pair.available_modes)


DEMAND_COLUMNS = ["origin", "destination", "mode", "trips", "vmt"]
PERSON_TRIP_COLUMNS = ["person_id", "purpose", "origin", "destination", "mode", "trips"]


@dataclass(frozen=True)
class DemandTable:
    """
    Viajes anuales esperados por celda (origen, destino, modo) y su VMT.

    `person_trips` conserva la asignación por persona, de la que se derivan
    el balance de generación y la matriz de transferencia modal.
    """
    scenario: str
    cells: pd.DataFrame
    person_trips: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=PERSON_TRIP_COLUMNS))
    generated: Mapping[str, float] = field(default_factory=dict)
    clamped_persons: Tuple[str, ...] = ()

    @property
    def total_trips(self) -> float:
        return float(self.cells["trips"].sum()) if len(self.cells) else 0.0

    @property
    def total_vmt(self) -> float:
        return float(self.cells["vmt"].sum()) if len(self.cells) else 0.0

    def trips_by_mode(self) -> pd.Series:
        if not len(self.cells):
            return pd.Series(dtype=float)
        return self.cells.groupby("mode", sort=True)["trips"].sum()

    def vmt_by_mode(self) -> pd.Series:
        if not len(self.cells):
            return pd.Series(dtype=float)
        return self.cells.groupby("mode", sort=True)["vmt"].sum()

    def trips_by_region(self) -> pd.Series:
        if not len(self.cells):
            return pd.Series(dtype=float)
        return self.cells.groupby("destination", sort=True)["trips"].sum()

    def regions(self) -> FrozenSet[int]:
        if not len(self.cells):
            return frozenset()
        return frozenset(int(r) for r in self.cells["origin"]) | frozenset(int(r) for r in self.cells["destination"])


@dataclass(frozen=True)
class InducedTravelReport:
    base_scenario: str
    alt_scenario: str
    base_trips: float
    alt_trips: float
    base_vmt: float
    alt_vmt: float
    by_mode: pd.DataFrame
    shift_matrix: pd.DataFrame

    @property
    def delta_trips(self) -> float:
        return self.alt_trips - self.base_trips

    @property
    def delta_vmt(self) -> float:
        return self.alt_vmt - self.base_vmt

    @property
    def pct_trips(self) -> Optional[float]:
        return _percentage(self.delta_trips, self.base_trips)

    @property
    def pct_vmt(self) -> Optional[float]:
        return _percentage(self.delta_vmt, self.base_vmt)

    def model_dump(self) -> Dict[str, Any]:
        return {
            "base_scenario": self.base_scenario,
            "alt_scenario": self.alt_scenario,
            "total": {
                "base_trips": self.base_trips,
                "alt_trips": self.alt_trips,
                "delta_trips": self.delta_trips,
                "pct_trips": self.pct_trips,
                "base_vmt": self.base_vmt,
                "alt_vmt": self.alt_vmt,
                "delta_vmt": self.delta_vmt,
                "pct_vmt": self.pct_vmt,
            },
            "by_mode": [
                {key: (None if pd.isna(value) else value) for key, value in row.items()}
                for row in self.by_mode.to_dict(orient="records")
            ],
            "shift_matrix": {
                str(origin_mode): {str(k): float(v) for k, v in row.items()}
                for origin_mode, row in self.shift_matrix.to_dict(orient="index").items()
            },
        }


def _percentage(delta: float, base: float) -> Optional[float]:
    if base == 0:
        return None if delta != 0 else 0.0
    return 100.0 * delta / base
