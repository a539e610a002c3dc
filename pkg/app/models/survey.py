# app/models/survey.py

from dataclasses import dataclass, field
from typing import Any, ClassVar, Dict, Iterable, Mapping, Optional, Tuple

from app.models.choice_model import DatasetKind, Mode, Purpose, Region

GENDERS = ("male", "female")
MARITAL_STATUSES = ("single", "married", "other")
OCCUPATION_CLASSES = ("official", "laborer", "merchant", "homemaker", "student", "other")
EDUCATION_LEVELS = ("high_school", "vocational", "bachelor", "postgraduate", "other")
UNIVERSITY_LEVELS = frozenset({"bachelor", "postgraduate"})


@dataclass(frozen=True)
class Person:
    """
    Persona encuestada.

    Los ingresos se expresan en Mil VND por mes y la edad en años cumplidos.
    """
    id: str
    age: float
    gender: str
    marital: str
    occupation_class: str
    education: str
    income: float
    working: int
    home_region: int

    def __post_init__(self):
        if not self.id:
            raise ValueError("id es requerido")
        if self.age < 18:
            raise ValueError(f"La persona {self.id} tiene edad {self.age} < 18")
        if self.income < 0:
            raise ValueError(f"La persona {self.id} tiene ingreso negativo: {self.income}")
        if self.gender not in GENDERS:
            raise ValueError(f"Género inválido: '{self.gender}'")
        if self.marital not in MARITAL_STATUSES:
            raise ValueError(f"Estado civil inválido: '{self.marital}'")
        if self.occupation_class not in OCCUPATION_CLASSES:
            raise ValueError(f"Ocupación inválida: '{self.occupation_class}'")
        if self.education not in EDUCATION_LEVELS:
            raise ValueError(f"Nivel educativo inválido: '{self.education}'")
        if self.working not in (0, 1):
            raise ValueError(f"working debe ser 0 o 1, se recibió {self.working}")

    def attributes(self) -> Dict[str, float]:
        """Atributos numéricos derivados para utilidades, enlace λ y generación de viajes."""
        return {
            "age": float(self.age),
            "income": float(self.income),
            "male": 1.0 if self.gender == "male" else 0.0,
            "married": 1.0 if self.marital == "married" else 0.0,
            "working": float(self.working),
            "official": 1.0 if self.occupation_class == "official" else 0.0,
            "university": 1.0 if self.education in UNIVERSITY_LEVELS else 0.0,
        }

    def model_dump(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "age": self.age,
            "gender": self.gender,
            "marital": self.marital,
            "occupation_class": self.occupation_class,
            "education": self.education,
            "income": self.income,
            "working": self.working,
            "home_region": self.home_region,
        }


@dataclass(frozen=True)
class ChoiceLeaf:
    """Hoja del árbol de elección: un modo dentro del nido de un destino."""
    destination: int
    mode: Mode
    attributes: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class ChoiceObservation:
    """
    Situación de elección con sus hojas (destino, modo) disponibles.

    `covariates` reúne los atributos de la persona y de la observación
    (incluidas las interacciones declaradas, calculadas al cargar) y
    `destination_attributes` los atributos de cada destino del conjunto.
    En pronóstico no hay alternativa elegida.
    """
    id: str
    person_id: str
    purpose: Purpose
    leaves: Tuple[ChoiceLeaf, ...]
    destination_attributes: Mapping[int, Mapping[str, float]]
    covariates: Mapping[str, float]
    chosen_destination: Optional[int] = None
    chosen_mode: Optional[Mode] = None

    KIND: ClassVar[DatasetKind] = DatasetKind.FORECAST

    @property
    def kind(self) -> DatasetKind:
        return self.KIND

    def destinations(self) -> Tuple[int, ...]:
        return tuple(sorted({leaf.destination for leaf in self.leaves}))

    def leaves_for(self, destination: int) -> Tuple[ChoiceLeaf, ...]:
        return tuple(leaf for leaf in self.leaves if leaf.destination == destination)

    def chosen_leaf(self) -> Optional[ChoiceLeaf]:
        for leaf in self.leaves:
            if leaf.destination == self.chosen_destination and leaf.mode == self.chosen_mode:
                return leaf
        return None

    def indicators(self) -> Tuple[int, ...]:
        """Columna δ: 1 en la hoja elegida, 0 en las demás."""
        chosen = self.chosen_leaf()
        return tuple(1 if leaf is chosen else 0 for leaf in self.leaves)


@dataclass(frozen=True)
class RPObservation(ChoiceObservation):
    season: str = "other"
    travel_party: str = "other"

    KIND: ClassVar[DatasetKind] = DatasetKind.RP


@dataclass(frozen=True)
class SPObservation(ChoiceObservation):
    scenario: str = ""
    rp_chosen_mode: Optional[Mode] = None

    KIND: ClassVar[DatasetKind] = DatasetKind.SP


@dataclass(frozen=True)
class ChoiceDataset:
    observations: Tuple[ChoiceObservation, ...] = ()
    regions: Mapping[int, Region] = field(default_factory=dict)

    KIND: ClassVar[DatasetKind] = DatasetKind.FORECAST

    @property
    def kind(self) -> DatasetKind:
        return self.KIND

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    @property
    def n_observations(self) -> int:
        return len(self.observations)

    @property
    def n_persons(self) -> int:
        return len({obs.person_id for obs in self.observations})

    @classmethod
    def empty(cls, regions: Optional[Mapping[int, Region]] = None):
        return cls((), dict(regions or {}))


@dataclass(frozen=True)
class RPDataset(ChoiceDataset):
    KIND: ClassVar[DatasetKind] = DatasetKind.RP


@dataclass(frozen=True)
class SPDataset(ChoiceDataset):
    KIND: ClassVar[DatasetKind] = DatasetKind.SP

    @property
    def n_respondents(self) -> int:
        return self.n_persons

    @property
    def n_scenarios(self) -> int:
        return len({(obs.person_id, getattr(obs, "scenario", "")) for obs in self.observations})


@dataclass(frozen=True)
class TripGenRecord:
    person_id: str
    annual_trip_count: int
    covariates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if int(self.annual_trip_count) != self.annual_trip_count or self.annual_trip_count < 0:
            raise ValueError(
                f"annual_trip_count debe ser un entero ≥ 0 (persona {self.person_id}): {self.annual_trip_count}")

    def covariate(self, name: str) -> float:
        if name not in self.covariates:
            raise KeyError(name)
        return float(self.covariates[name])


def persons_by_id(persons: Iterable[Person]) -> Dict[str, Person]:
    return {person.id: person for person in persons}
