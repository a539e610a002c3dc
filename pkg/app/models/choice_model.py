# app/models/choice_model.py

"""
Tipos declarativos del modelo de elección
=========================================

Define los modos, regiones, términos de utilidad y la especificación completa
(`ModelSpec`) que permite ejecutar el modelo de viajes de negocio y el de
viajes no laborales con el mismo motor de logit anidado, además del vector de
parámetros libres (`ParameterVector`) con su disposición por nombre.

Todos los tipos son inmutables después de construirse.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from app import config
from app.utils.hash_utils import calculate_document_digest

LOG_SCALE = "log_scale"


class Mode(str, Enum):
    BUS = "Bus"
    CONVENTIONAL_RAIL = "ConventionalRail"
    AIRLINE = "Airline"
    LCC = "LCC"
    CAR = "Car"
    HSR = "HSR"

    @classmethod
    def parse(cls, text: Union[str, "Mode"]) -> "Mode":
        """Convierte un texto (insensible a mayúsculas, admite alias) en un modo."""
        if isinstance(text, Mode):
            return text
        key = str(text).strip().lower().replace(" ", "").replace("_", "")
        if key in _MODE_ALIASES:
            return _MODE_ALIASES[key]
        raise ValueError(f"Modo desconocido: '{text}'")

    @property
    def order(self) -> int:
        return MODE_ORDER.index(self)


MODE_ORDER: Tuple[Mode, ...] = tuple(Mode)

_MODE_ALIASES: Dict[str, Mode] = {
    "bus": Mode.BUS,
    "conventionalrail": Mode.CONVENTIONAL_RAIL,
    "rail": Mode.CONVENTIONAL_RAIL,
    "airline": Mode.AIRLINE,
    "airlines": Mode.AIRLINE,
    "lcc": Mode.LCC,
    "car": Mode.CAR,
    "hsr": Mode.HSR,
}


class Purpose(str, Enum):
    BUSINESS = "business"
    NON_BUSINESS = "non_business"

    @classmethod
    def parse(cls, text: Union[str, "Purpose"]) -> "Purpose":
        if isinstance(text, Purpose):
            return text
        key = str(text).strip().lower().replace("-", "_").replace(" ", "_")
        if key in ("nonbusiness", "non_business"):
            return cls.NON_BUSINESS
        if key == "business":
            return cls.BUSINESS
        raise ValueError(f"Propósito desconocido: '{text}'")


class DatasetKind(str, Enum):
    """Ámbito de evaluación: datos RP, datos SP o pronóstico sobre escenarios."""
    RP = "RP"
    SP = "SP"
    FORECAST = "FORECAST"


class TermScope(str, Enum):
    RP = "RP"
    SP = "SP"
    ALL = "All"

    @classmethod
    def parse(cls, text: Union[str, "TermScope"]) -> "TermScope":
        if isinstance(text, TermScope):
            return text
        for scope in cls:
            if scope.value.lower() == str(text).strip().lower():
                return scope
        raise ValueError(f"Ámbito desconocido: '{text}'")

    def covers(self, kind: DatasetKind) -> bool:
        if self is TermScope.ALL:
            return True
        if kind is DatasetKind.FORECAST:
            return self is TermScope.RP
        return self.value == kind.value


class AttributeSource(str, Enum):
    ALTERNATIVE_ATTRIBUTE = "alternative-attribute"
    PERSON_ATTRIBUTE = "person-attribute"
    INTERACTION = "interaction"
    CONSTANT = "constant"
    STATE_DEPENDENCE = "state-dependence-dummy"
    LOGSUM = "logsum"

    @classmethod
    def parse(cls, text: Union[str, "AttributeSource"]) -> "AttributeSource":
        if isinstance(text, AttributeSource):
            return text
        key = str(text).strip().lower()
        for source in cls:
            if source.value == key:
                return source
        raise ValueError(f"Fuente de atributo desconocida: '{text}'")


class SpStructure(str, Enum):
    MODE_ONLY_MNL = "mode_only_mnl"
    NESTED_DESTINATION_MODE = "nested_destination_mode"


class ScaleParameterization(str, Enum):
    """`log`: μ libre guardado como log(μ). `fixed`: μ = 1 sin parámetro."""
    LOG = "log"
    FIXED = "fixed"


# Atributos de la persona y de la observación disponibles para utilidades y λ
PERSON_ATTRIBUTES: FrozenSet[str] = frozenset(
    {"age", "income", "male", "married", "working", "official", "university"})
OBSERVATION_ATTRIBUTES: FrozenSet[str] = frozenset({"summer", "with_family"})
COVARIATE_ATTRIBUTES: FrozenSet[str] = PERSON_ATTRIBUTES | OBSERVATION_ATTRIBUTES

# Atributos de nivel de servicio de cada alternativa (unidades: Mil VND, horas, servicios/día)
LEAF_ATTRIBUTES: FrozenSet[str] = frozenset(
    {"travel_cost", "in_vehicle_time", "access_egress_time", "frequency"})
DESTINATION_ATTRIBUTES: FrozenSet[str] = frozenset(
    {"log_gdp", "gdp", "tourist_count", "attraction_score", "attraction_eval"})


def covariate_key(factors: Iterable[str]) -> str:
    """Nombre canónico de una interacción declarada como producto explícito."""
    return "*".join(factors)


@dataclass(frozen=True)
class Region:
    id: int
    gdp: float
    tourist_count: float
    attraction_score: float
    distance_from_origin: float
    name: str = ""

    def __post_init__(self):
        if self.id < 1:
            raise ValueError(f"id de región inválido: {self.id}")
        if not self.gdp > 0:
            raise ValueError(f"La región {self.id} debe tener gdp > 0")
        if self.distance_from_origin < 0:
            raise ValueError(f"La región {self.id} tiene distancia negativa")

    def attributes(self) -> Dict[str, float]:
        """Atributos de destino usados por los términos de destino."""
        return {
            "gdp": self.gdp,
            "log_gdp": math.log(self.gdp),
            "tourist_count": self.tourist_count,
            "attraction_score": self.attraction_score,
        }

    def model_dump(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "gdp": self.gdp,
            "tourist_count": self.tourist_count,
            "attraction_score": self.attraction_score,
            "distance_from_origin": self.distance_from_origin,
        }


Alternative = Union[Mode, int]


@dataclass(frozen=True)
class UtilityTerm:
    """
    Término lineal de una utilidad sistemática.

    Attributes:
        coefficient_name: Nombre del coeficiente en el vector de parámetros.
            Varios términos pueden compartir nombre (coeficiente genérico).
        source: Origen del valor multiplicado por el coeficiente.
        factors: Atributos cuyo producto forma el valor; vacío para
            constantes, dummies de dependencia de estado y logsum.
        applies_to: Modos (términos de modo) o regiones (términos de destino)
            a los que aplica; vacío significa todas las alternativas.
        scope: Conjunto de datos en el que participa (RP, SP o ambos).
    """
    coefficient_name: str
    source: AttributeSource
    factors: Tuple[str, ...] = ()
    applies_to: FrozenSet[Alternative] = frozenset()
    scope: TermScope = TermScope.ALL

    def __post_init__(self):
        if not self.coefficient_name:
            raise ValueError("coefficient_name es requerido")
        needs_factors = self.source in (AttributeSource.ALTERNATIVE_ATTRIBUTE,
                                         AttributeSource.PERSON_ATTRIBUTE,
                                         AttributeSource.INTERACTION)
        if needs_factors and not self.factors:
            raise ValueError(f"El término '{self.coefficient_name}' requiere al menos un atributo")
        if not needs_factors and self.factors:
            raise ValueError(f"El término '{self.coefficient_name}' ({self.source.value}) no admite atributos")

    @property
    def is_structural(self) -> bool:
        return self.source is AttributeSource.LOGSUM

    def applies(self, alternative: Alternative) -> bool:
        return not self.applies_to or alternative in self.applies_to

    def model_dump(self) -> Dict[str, Any]:
        return {
            "coefficient_name": self.coefficient_name,
            "source": self.source.value,
            "factors": list(self.factors),
            "applies_to": sorted(_alternative_label(a) for a in self.applies_to),
            "scope": self.scope.value,
        }


@dataclass(frozen=True)
class LambdaCovariate:
    """Covariable k del enlace logístico del parámetro logsum; sin factores es la constante."""
    coefficient_name: str
    factors: Tuple[str, ...] = ()
    scope: TermScope = TermScope.ALL

    @property
    def key(self) -> str:
        return covariate_key(self.factors)

    def model_dump(self) -> Dict[str, Any]:
        return {"coefficient_name": self.coefficient_name, "factors": list(self.factors),
                "scope": self.scope.value}


@dataclass(frozen=True)
class ChoiceSetRules:
    short_distance_km: float = config.SHORT_DISTANCE_KM
    long_distance_km: float = config.LONG_DISTANCE_KM
    short_excluded: FrozenSet[Mode] = frozenset({Mode.AIRLINE, Mode.LCC})
    long_excluded: FrozenSet[Mode] = frozenset({Mode.CAR})
    sp_only: FrozenSet[Mode] = frozenset({Mode.HSR})

    def model_dump(self) -> Dict[str, Any]:
        return {
            "short_distance_km": self.short_distance_km,
            "long_distance_km": self.long_distance_km,
            "short_excluded": mode_labels(self.short_excluded),
            "long_excluded": mode_labels(self.long_excluded),
            "sp_only": mode_labels(self.sp_only),
        }


@dataclass(frozen=True)
class ModelSpec:
    """
    Descripción declarativa de la forma de un modelo.

    El modelo de negocio usa `sp_structure = MODE_ONLY_MNL` (los datos SP solo
    eligen modo) y el no laboral `NESTED_DESTINATION_MODE`. El modo base no
    lleva constante específica.
    """
    purpose: Purpose
    destination_terms: Tuple[UtilityTerm, ...] = ()
    mode_terms: Tuple[UtilityTerm, ...] = ()
    lambda_covariates: Tuple[LambdaCovariate, ...] = ()
    sp_structure: SpStructure = SpStructure.MODE_ONLY_MNL
    base_mode: Mode = Mode.LCC
    scale_parameterization: ScaleParameterization = ScaleParameterization.LOG
    rp_universe: FrozenSet[Mode] = frozenset()
    sp_universe: FrozenSet[Mode] = frozenset()
    rules: ChoiceSetRules = field(default_factory=ChoiceSetRules)

    @property
    def has_free_scale(self) -> bool:
        return bool(self.sp_universe) and self.scale_parameterization is ScaleParameterization.LOG

    @property
    def sp_nested(self) -> bool:
        return self.sp_structure is SpStructure.NESTED_DESTINATION_MODE

    def parameter_layout(self) -> Dict[str, int]:
        """
        Disposición de los parámetros libres: términos de destino, términos de
        modo, log(μ) y coeficientes del enlace λ, en ese orden y sin repetir
        los coeficientes genéricos compartidos.
        """
        names: List[str] = []
        for term in self.destination_terms + self.mode_terms:
            if not term.is_structural and term.coefficient_name not in names:
                names.append(term.coefficient_name)
        if self.has_free_scale:
            names.append(LOG_SCALE)
        for covariate in self.lambda_covariates:
            if covariate.coefficient_name not in names:
                names.append(covariate.coefficient_name)
        return {name: index for index, name in enumerate(names)}

    def universe(self, kind: DatasetKind) -> FrozenSet[Mode]:
        if kind is DatasetKind.SP:
            return self.sp_universe
        if kind is DatasetKind.FORECAST:
            return self.rp_universe | self.sp_universe
        return self.rp_universe

    def nested(self, kind: DatasetKind) -> bool:
        return kind is not DatasetKind.SP or self.sp_nested

    def referenced_attributes(self) -> FrozenSet[str]:
        """Atributos de alternativa que los términos requieren en los datos."""
        used = set()
        for term in self.mode_terms + self.destination_terms:
            if term.source in (AttributeSource.ALTERNATIVE_ATTRIBUTE, AttributeSource.INTERACTION):
                used.update(f for f in term.factors if f in LEAF_ATTRIBUTES | DESTINATION_ATTRIBUTES)
        return frozenset(used)

    def has_state_dependence(self) -> bool:
        return any(t.source is AttributeSource.STATE_DEPENDENCE for t in self.mode_terms)

    def model_dump(self) -> Dict[str, Any]:
        return {
            "purpose": self.purpose.value,
            "destination_terms": [t.model_dump() for t in self.destination_terms],
            "mode_terms": [t.model_dump() for t in self.mode_terms],
            "lambda_covariates": [c.model_dump() for c in self.lambda_covariates],
            "sp_structure": self.sp_structure.value,
            "base_mode": self.base_mode.value,
            "scale_parameterization": self.scale_parameterization.value,
            "rp_universe": mode_labels(self.rp_universe),
            "sp_universe": mode_labels(self.sp_universe),
            "rules": self.rules.model_dump(),
        }

    @property
    def digest(self) -> str:
        return calculate_document_digest(self.model_dump())

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelSpec":
        """Reconstruye la especificación desde `model_dump()`."""
        def term(raw: Mapping[str, Any], destination: bool) -> UtilityTerm:
            applies = frozenset(int(a) if destination else Mode.parse(a) for a in raw["applies_to"])
            return UtilityTerm(raw["coefficient_name"], AttributeSource.parse(raw["source"]),
                               tuple(raw["factors"]), applies, TermScope.parse(raw["scope"]))

        rules = data.get("rules", {})
        return cls(
            purpose=Purpose.parse(data["purpose"]),
            destination_terms=tuple(term(t, True) for t in data["destination_terms"]),
            mode_terms=tuple(term(t, False) for t in data["mode_terms"]),
            lambda_covariates=tuple(
                LambdaCovariate(c["coefficient_name"], tuple(c["factors"]), TermScope.parse(c["scope"]))
                for c in data["lambda_covariates"]),
            sp_structure=SpStructure(data["sp_structure"]),
            base_mode=Mode.parse(data["base_mode"]),
            scale_parameterization=ScaleParameterization(data["scale_parameterization"]),
            rp_universe=frozenset(Mode.parse(m) for m in data["rp_universe"]),
            sp_universe=frozenset(Mode.parse(m) for m in data["sp_universe"]),
            rules=ChoiceSetRules(
                short_distance_km=float(rules.get("short_distance_km", config.SHORT_DISTANCE_KM)),
                long_distance_km=float(rules.get("long_distance_km", config.LONG_DISTANCE_KM)),
                short_excluded=frozenset(Mode.parse(m) for m in rules.get("short_excluded", ["Airline", "LCC"])),
                long_excluded=frozenset(Mode.parse(m) for m in rules.get("long_excluded", ["Car"])),
                sp_only=frozenset(Mode.parse(m) for m in rules.get("sp_only", ["HSR"])),
            ),
        )


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """
    Vector de parámetros libres con disposición nombre → índice.

    La escala se guarda como `log_scale` = log(μ) y los coeficientes del
    enlace λ (ω) se guardan tal cual; el vector es el espacio no restringido
    en el que trabaja el optimizador.
    """
    values: np.ndarray
    layout: Mapping[str, int]

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", dict(self.layout))
        if sorted(self.layout.values()) != list(range(len(self.layout))):
            raise ValueError("La disposición no es una biyección sobre 0..K-1")
        if len(values) != len(self.layout):
            raise ValueError(
                f"Longitud del vector ({len(values)}) distinta de la disposición ({len(self.layout)})")

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(sorted(self.layout, key=self.layout.__getitem__))

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.layout[name]])

    def as_dict(self) -> Dict[str, float]:
        return {name: float(self.values[index]) for name, index in
                sorted(self.layout.items(), key=lambda item: item[1])}

    def with_values(self, values: Iterable[float]) -> "ParameterVector":
        return ParameterVector(np.asarray(list(values), dtype=float), self.layout)

    @property
    def scale(self) -> float:
        """μ en escala natural (1 si la especificación no tiene escala libre; inf si desborda)."""
        if LOG_SCALE not in self.layout:
            return 1.0
        with np.errstate(over="ignore"):
            return float(np.exp(self[LOG_SCALE]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"ParameterVector(K={len(self)})"


@dataclass(frozen=True)
class Diagnostic:
    """Diagnóstico de identificación devuelto por `validate_spec`."""
    code: str
    message: str
    subject: Optional[str] = None


def _alternative_label(alternative: Alternative) -> str:
    return alternative.value if isinstance(alternative, Mode) else str(alternative)


def mode_labels(modes: Iterable[Mode]) -> List[str]:
    return [m.value for m in sorted(modes, key=lambda m: m.order)]
