# app/parsers/survey_loader.py

"""
Carga y escritura de los archivos CSV de la encuesta
====================================================

Esquemas (documentados en docs/formats.md):

- regions.csv: region_id, name, gdp, tourist_count, attraction_score, distance_km
- persons.csv: person_id, age, gender, marital, occupation_class, education,
  income_mil_vnd, working, home_region
- rp_trips.csv: una fila por (observación, destino, modo) con la marca `chosen`
- sp_choices.csv: una fila por (respondente, escenario, destino, modo)
- tripgen.csv: person_id, annual_trip_count y las covariables

Los datos de elección usan el formato largo, de modo que los conjuntos de
elección de distinto tamaño no requieren relleno. Los conjuntos se regeneran
con las reglas de distancia de la especificación: las filas de modos fuera
del conjunto se descartan, salvo que sean la elección (error).

Los números de fila de los errores cuentan el encabezado como fila 1.
"""

import math
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import pandas as pd

from app.errors import ChoiceSetError, LoadError
from app.models.choice_model import (
    DatasetKind,
    LEAF_ATTRIBUTES,
    Mode,
    ModelSpec,
    Purpose,
    Region,
)
from app.models.survey import (
    ChoiceDataset,
    ChoiceLeaf,
    Person,
    RPDataset,
    RPObservation,
    SPDataset,
    SPObservation,
    TripGenRecord,
    persons_by_id,
)
from app.parsers.results_io import publish_frame
from app.service.choice_sets import build_choice_set
from app.service.nested_logit import with_interactions
from app.utils.logger import get_logger

logger = get_logger(__name__)

HEADER_ROW_OFFSET = 2

# Encabezado con sufijo de unidad → nombre canónico
UNIT_COLUMNS = {
    "travel_cost_mil_vnd": "travel_cost",
    "in_vehicle_time_h": "in_vehicle_time",
    "access_egress_time_h": "access_egress_time",
    "frequency_per_day": "frequency",
    "income_mil_vnd": "income",
}
UNIT_CHECKED = frozenset(UNIT_COLUMNS.values())
LOS_ORDER = ("travel_cost", "in_vehicle_time", "access_egress_time", "frequency")

REGION_COLUMNS = ["region_id", "name", "gdp", "tourist_count", "attraction_score", "distance_km"]
PERSON_COLUMNS = ["person_id", "age", "gender", "marital", "occupation_class", "education",
                  "income", "working", "home_region"]
RP_COLUMNS = ["obs_id", "person_id", "purpose", "season", "travel_party", "destination", "mode", "chosen"]
SP_COLUMNS = ["person_id", "scenario", "purpose", "rp_chosen_mode", "destination", "mode", "chosen"]
TRIPGEN_COLUMNS = ["person_id", "annual_trip_count"]


Persons = Union[Mapping[str, Person], Iterable[Person]]


# --- Utilidades comunes -----------------------------------------------------

def _canonical_columns(frame: pd.DataFrame, path: str) -> pd.DataFrame:
    """Normaliza los encabezados con sufijo de unidad y rechaza unidades distintas."""
    renamed = {}
    for column in frame.columns:
        name = str(column).strip()
        if name in UNIT_COLUMNS:
            renamed[column] = UNIT_COLUMNS[name]
            continue
        for base in UNIT_CHECKED:
            if name.startswith(base + "_"):
                expected = next(k for k, v in UNIT_COLUMNS.items() if v == base)
                raise LoadError(f"Unidad no admitida en la columna '{name}' de {path}; se espera '{expected}'",
                                row=1, path=path)
        renamed[column] = name
    frame = frame.rename(columns=renamed)
    duplicated = frame.columns[frame.columns.duplicated()].tolist()
    if duplicated:
        raise LoadError(f"Columnas repetidas en {path}: {', '.join(duplicated)}", row=1, path=path)
    return frame


def _read_csv(path: str, required: Sequence[str]) -> pd.DataFrame:
    if not path:
        raise ValueError("Ruta del archivo no puede ser None")
    logger.info(f"Cargando datos desde: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError as e:
        raise LoadError(f"No existe el archivo {path}", path=path) from e
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise LoadError(f"CSV mal formado en {path}: {e}", path=path) from e
    except pd.errors.EmptyDataError as e:
        raise LoadError(f"El archivo {path} no tiene encabezado", row=1, path=path) from e
    frame = _canonical_columns(frame, path)
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise LoadError(f"Faltan columnas en {path}: {', '.join(missing)}", row=1, path=path)
    return frame.reset_index(drop=True)


def _row(index: int) -> int:
    return int(index) + HEADER_ROW_OFFSET


def _number(value: str, column: str, index: int, path: str, integer: bool = False,
            minimum: Optional[float] = None, required: bool = True) -> Optional[float]:
    text = str(value).strip()
    if text == "":
        if required:
            raise LoadError(f"Valor vacío en la columna '{column}' de {path}", _row(index), path)
        return None
    try:
        number = float(text)
    except ValueError:
        raise LoadError(f"Valor no numérico '{text}' en la columna '{column}' de {path}", _row(index), path)
    if not math.isfinite(number):
        raise LoadError(f"Valor no finito en la columna '{column}' de {path}", _row(index), path)
    if integer and number != int(number):
        raise LoadError(f"Se esperaba un entero en la columna '{column}' de {path}: '{text}'", _row(index), path)
    if minimum is not None and number < minimum:
        raise LoadError(f"Valor fuera de rango en la columna '{column}' de {path}: {text} < {minimum:g}",
                        _row(index), path)
    return int(number) if integer else number


def _mode(value: str, column: str, index: int, path: str) -> Mode:
    try:
        return Mode.parse(value)
    except ValueError as e:
        raise LoadError(f"{e} en la columna '{column}' de {path}", _row(index), path) from e


# --- Regiones y personas ----------------------------------------------------

def load_regions(path: str) -> Dict[int, Region]:
    """
    Carga la tabla de regiones.

    Raises:
        LoadError: Columna faltante, valor inválido o id repetido, con la fila.
    """
    frame = _read_csv(path, REGION_COLUMNS)
    regions: Dict[int, Region] = {}
    for index, row in frame.iterrows():
        region_id = _number(row["region_id"], "region_id", index, path, integer=True, minimum=1)
        if region_id in regions:
            raise LoadError(f"Región repetida {region_id} en {path}", _row(index), path)
        try:
            regions[region_id] = Region(
                id=region_id,
                gdp=_number(row["gdp"], "gdp", index, path),
                tourist_count=_number(row["tourist_count"], "tourist_count", index, path, minimum=0),
                attraction_score=_number(row["attraction_score"], "attraction_score", index, path),
                distance_from_origin=_number(row["distance_km"], "distance_km", index, path),
                name=str(row["name"]).strip(),
            )
        except LoadError:
            raise
        except ValueError as e:
            raise LoadError(f"Región inválida en {path}: {e}", _row(index), path) from e
    logger.info(f"✅ {len(regions)} regiones cargadas")
    return regions


def load_persons(path: str) -> List[Person]:
    """
    Carga las personas de la encuesta, una por fila.

    Raises:
        LoadError: Id repetido, campo no interpretable o columna faltante,
            siempre con el número de fila.
    """
    frame = _read_csv(path, PERSON_COLUMNS)
    persons: List[Person] = []
    seen = set()
    for index, row in frame.iterrows():
        person_id = str(row["person_id"]).strip()
        if not person_id:
            raise LoadError(f"person_id vacío en {path}", _row(index), path)
        if person_id in seen:
            raise LoadError(f"person_id repetido '{person_id}' en {path}", _row(index), path)
        seen.add(person_id)
        try:
            persons.append(Person(
                id=person_id,
                age=_number(row["age"], "age", index, path, integer=True),
                gender=str(row["gender"]).strip().lower(),
                marital=str(row["marital"]).strip().lower(),
                occupation_class=str(row["occupation_class"]).strip().lower(),
                education=str(row["education"]).strip().lower(),
                income=_number(row["income"], "income", index, path),
                working=_number(row["working"], "working", index, path, integer=True),
                home_region=_number(row["home_region"], "home_region", index, path, integer=True),
            ))
        except LoadError:
            raise
        except ValueError as e:
            raise LoadError(f"Persona inválida en {path}: {e}", _row(index), path) from e
    if not persons:
        logger.warning(f"El archivo {path} no contiene personas")
    logger.info(f"✅ {len(persons)} personas cargadas")
    return persons


# --- Datos de elección ------------------------------------------------------

def _leaf_attributes(row: pd.Series, index: int, path: str, required: Iterable[str]) -> Dict[str, float]:
    attributes = {}
    required = set(required)
    for name in LOS_ORDER:
        if name not in row.index:
            continue
        value = _number(row[name], name, index, path, minimum=0, required=name in required)
        if value is not None:
            attributes[name] = value
    return attributes


def _covariates(person: Person, spec: ModelSpec, summer: float, with_family: float) -> Dict[str, float]:
    return with_interactions({**person.attributes(), "summer": summer, "with_family": with_family}, spec)


def _flag(row: pd.Series, column: str, index: int, path: str, truthy: str = "") -> float:
    if column not in row.index:
        return 0.0
    text = str(row[column]).strip().lower().replace("-", "_")
    if truthy and text == truthy:
        return 1.0
    if text in ("", "0", "other", "false"):
        return 0.0
    if text in ("1", "true"):
        return 1.0
    raise LoadError(f"Valor inválido '{row[column]}' en la columna '{column}' de {path}", _row(index), path)


class _ObservationBuilder:
    """Arma observaciones a partir de los bloques de filas del formato largo."""

    def __init__(self, path: str, persons: Mapping[str, Person], spec: ModelSpec,
                 regions: Mapping[int, Region], kind: DatasetKind):
        self.path = path
        self.persons = persons
        self.spec = spec
        self.regions = regions
        self.kind = kind
        required_columns = set(spec.referenced_attributes()) & LEAF_ATTRIBUTES
        self.required = required_columns
        self.dropped = 0

    def check_columns(self, frame: pd.DataFrame) -> None:
        missing = sorted(self.required - set(frame.columns))
        if missing:
            raise LoadError(f"Faltan atributos requeridos por la especificación en {self.path}: "
                            f"{', '.join(missing)}", row=1, path=self.path)

    def person(self, row: pd.Series, index: int) -> Person:
        person_id = str(row["person_id"]).strip()
        if person_id not in self.persons:
            raise LoadError(f"Persona desconocida '{person_id}' en {self.path}", _row(index), self.path)
        return self.persons[person_id]

    def region(self, row: pd.Series, index: int) -> int:
        destination = _number(row["destination"], "destination", index, self.path, integer=True)
        if destination not in self.regions:
            raise LoadError(f"Región desconocida {destination} en {self.path}", _row(index), self.path)
        return destination

    def leaves(self, block: pd.DataFrame, label: str, reference: Optional[Mode] = None):
        """Filtra las filas por el conjunto de elección y devuelve (hojas, elección)."""
        by_destination: Dict[int, List] = {}
        chosen = None
        for index, row in block.iterrows():
            destination = self.region(row, index)
            mode = _mode(row["mode"], "mode", index, self.path)
            is_chosen = _number(row["chosen"], "chosen", index, self.path, integer=True, minimum=0) == 1
            if is_chosen:
                if chosen is not None:
                    raise LoadError(f"La observación {label} tiene más de una alternativa elegida",
                                    _row(index), self.path)
                chosen = (destination, mode, index)
            by_destination.setdefault(destination, []).append((index, row, mode, is_chosen))

        if chosen is None:
            raise LoadError(f"La observación {label} no tiene alternativa elegida",
                            _row(block.index[0]), self.path)

        leaves = []
        for destination in sorted(by_destination):
            rows = by_destination[destination]
            distance = self.regions[destination].distance_from_origin
            try:
                allowed = build_choice_set(distance, self.spec.universe(self.kind), self.kind, self.spec.rules)
            except (ChoiceSetError, ValueError) as e:
                raise LoadError(f"Conjunto de elección inválido para {label}, destino {destination}: {e}",
                                _row(rows[0][0]), self.path) from e
            present = set()
            for index, row, mode, is_chosen in rows:
                if mode in present:
                    raise LoadError(f"Alternativa {mode.value} repetida en {label}, destino {destination}",
                                    _row(index), self.path)
                present.add(mode)
                if mode not in allowed:
                    if is_chosen:
                        raise LoadError(f"chosen mode not in choice set: {mode.value} en {label} "
                                        f"(destino {destination}, {distance:g} km)", _row(index), self.path)
                    self.dropped += 1
                    continue
                attributes = _leaf_attributes(row, index, self.path, self.required)
                if self.kind is DatasetKind.SP:
                    attributes["state_dependence"] = 1.0 if reference is not None and mode == reference else 0.0
                leaves.append(ChoiceLeaf(destination, mode, attributes))
            absent = allowed - present
            if absent:
                names = ", ".join(m.value for m in sorted(absent, key=lambda m: m.order))
                raise LoadError(f"Bloque incompleto {label}: faltan las alternativas {names} "
                                f"del destino {destination}", _row(rows[-1][0]), self.path)
        return tuple(leaves), chosen

    def destination_attributes(self, block: pd.DataFrame, destinations: Iterable[int]) -> Dict[int, Dict[str, float]]:
        attributes = {d: self.regions[d].attributes() for d in destinations}
        if "attraction_eval" in block.columns:
            for index, row in block.iterrows():
                value = _number(row["attraction_eval"], "attraction_eval", index, self.path, required=False)
                destination = int(float(row["destination"]))
                if value is not None and destination in attributes:
                    attributes[destination]["attraction_eval"] = value
        return attributes


def _resolve_persons(persons: Persons) -> Mapping[str, Person]:
    return persons if isinstance(persons, Mapping) else persons_by_id(persons)


def _purpose_rows(frame: pd.DataFrame, spec: ModelSpec, path: str) -> pd.DataFrame:
    keep = []
    for index, value in frame["purpose"].items():
        try:
            keep.append(Purpose.parse(value) is spec.purpose)
        except ValueError as e:
            raise LoadError(f"{e} en {path}", _row(index), path) from e
    selected = frame[pd.Series(keep, index=frame.index, dtype=bool)]
    skipped = len(frame) - len(selected)
    if skipped:
        logger.info(f"Se omiten {skipped} filas de otro propósito en {path}")
    return selected


def load_rp_dataset(path: str, persons: Persons, spec: ModelSpec,
                    regions: Mapping[int, Region]) -> RPDataset:
    """
    Carga el diario de viajes RP en formato largo.

    Cada `obs_id` es un viaje; su conjunto de elección se regenera por
    destino con `build_choice_set`. Se conservan solo las filas del
    propósito de la especificación.

    Args:
        path (str): Ruta de rp_trips.csv.
        persons: Personas de la encuesta (lista o mapa por id).
        spec (ModelSpec): Especificación que define los atributos requeridos.
        regions: Tabla de regiones.

    Returns:
        RPDataset: Observaciones en el orden de aparición en el archivo.

    Raises:
        LoadError: Modo elegido fuera del conjunto, región o persona
            desconocida, bloque incompleto o valor inválido.
    """
    frame = _read_csv(path, RP_COLUMNS)
    persons = _resolve_persons(persons)
    builder = _ObservationBuilder(path, persons, spec, regions, DatasetKind.RP)
    builder.check_columns(frame)
    frame = _purpose_rows(frame, spec, path)

    observations = []
    for obs_id, block in frame.groupby("obs_id", sort=False):
        first_index, first = block.index[0], block.iloc[0]
        person = builder.person(first, first_index)
        leaves, (destination, mode, _) = builder.leaves(block, f"'{obs_id}'")
        season = str(first["season"]).strip().lower() or "other"
        party = str(first["travel_party"]).strip().lower() or "other"
        observations.append(RPObservation(
            id=str(obs_id),
            person_id=person.id,
            purpose=spec.purpose,
            leaves=leaves,
            destination_attributes=builder.destination_attributes(block, {leaf.destination for leaf in leaves}),
            covariates=_covariates(person, spec,
                                   _flag(first, "season", first_index, path, truthy="summer"),
                                   _flag(first, "travel_party", first_index, path, truthy="with_family")),
            chosen_destination=destination,
            chosen_mode=mode,
            season=season,
            travel_party=party,
        ))

    if not observations:
        logger.warning(f"El archivo {path} no contiene viajes RP de propósito {spec.purpose.value}")
    if builder.dropped:
        logger.info(f"Se descartaron {builder.dropped} filas fuera del conjunto de elección en {path}")
    logger.info(f"✅ {len(observations)} observaciones RP cargadas")
    return RPDataset(tuple(observations), dict(regions))


def load_sp_dataset(path: str, persons: Persons, spec: ModelSpec,
                    regions: Mapping[int, Region]) -> SPDataset:
    """
    Carga las respuestas SP; cada (person_id, scenario) es una observación.

    La dummy de dependencia de estado de cada alternativa vale 1 solo en el
    modo que la persona eligió en RP (`rp_chosen_mode`).

    Raises:
        LoadError: Escenario incompleto (nombrando el escenario), modo elegido
            fuera del conjunto o `rp_chosen_mode` ausente cuando la
            especificación tiene dependencia de estado.
    """
    frame = _read_csv(path, SP_COLUMNS)
    persons = _resolve_persons(persons)
    builder = _ObservationBuilder(path, persons, spec, regions, DatasetKind.SP)
    builder.check_columns(frame)
    frame = _purpose_rows(frame, spec, path)

    observations = []
    for (person_id, scenario), block in frame.groupby(["person_id", "scenario"], sort=False):
        first_index, first = block.index[0], block.iloc[0]
        person = builder.person(first, first_index)
        reference_text = str(first["rp_chosen_mode"]).strip()
        reference = _mode(reference_text, "rp_chosen_mode", first_index, path) if reference_text else None
        if reference is None and spec.has_state_dependence():
            raise LoadError(f"El escenario '{scenario}' de {person_id} no tiene rp_chosen_mode",
                            _row(first_index), path)
        leaves, (destination, mode, _) = builder.leaves(block, f"escenario '{scenario}' de {person_id}", reference)
        obs_id = str(first["obs_id"]).strip() if "obs_id" in block.columns else ""
        observations.append(SPObservation(
            id=obs_id or f"{person_id}:{scenario}",
            person_id=person.id,
            purpose=spec.purpose,
            leaves=leaves,
            destination_attributes=builder.destination_attributes(block, {leaf.destination for leaf in leaves}),
            covariates=_covariates(person, spec,
                                   _flag(first, "summer", first_index, path),
                                   _flag(first, "with_family", first_index, path)),
            chosen_destination=destination,
            chosen_mode=mode,
            scenario=str(scenario),
            rp_chosen_mode=reference,
        ))

    dataset = SPDataset(tuple(observations), dict(regions))
    if not observations:
        logger.warning(f"El archivo {path} no contiene escenarios SP de propósito {spec.purpose.value}")
    logger.info(f"✅ {dataset.n_scenarios} escenarios SP de {dataset.n_respondents} respondentes cargados")
    return dataset


# --- Generación de viajes ---------------------------------------------------

def load_tripgen_records(path: str) -> List[TripGenRecord]:
    """Carga conteos anuales de viajes; toda columna extra es una covariable numérica."""
    frame = _read_csv(path, TRIPGEN_COLUMNS)
    covariate_columns = [c for c in frame.columns if c not in TRIPGEN_COLUMNS]
    records = []
    for index, row in frame.iterrows():
        count = _number(row["annual_trip_count"], "annual_trip_count", index, path, integer=True, minimum=0)
        covariates = {c: _number(row[c], c, index, path) for c in covariate_columns}
        records.append(TripGenRecord(str(row["person_id"]).strip(), count, covariates))
    logger.info(f"✅ {len(records)} registros de generación cargados")
    return records


def derive_tripgen_records(persons: Iterable[Person], rp: ChoiceDataset,
                           accessibility: Union[float, Mapping[str, float]],
                           purpose: Optional[Purpose] = None,
                           region: Optional[int] = None) -> List[TripGenRecord]:
    """
    Cuenta los viajes anuales de cada persona residente a partir del diario RP.

    Las personas sin viajes cuentan con 0. `accessibility` es un valor común o
    un mapa por persona; se agrega como covariable `accessibility`.
    """
    counts: Dict[str, int] = {}
    for observation in rp:
        if purpose is None or observation.purpose is purpose:
            counts[observation.person_id] = counts.get(observation.person_id, 0) + 1
    records = []
    for person in persons:
        if region is not None and person.home_region != region:
            continue
        value = accessibility[person.id] if isinstance(accessibility, Mapping) else accessibility
        covariates = {**person.attributes(), "accessibility": float(value)}
        records.append(TripGenRecord(person.id, counts.get(person.id, 0), covariates))
    return records


# --- Escritura --------------------------------------------------------------

def write_regions(regions: Mapping[int, Region], path: str) -> None:
    rows = [{"region_id": r.id, "name": r.name, "gdp": r.gdp, "tourist_count": r.tourist_count,
             "attraction_score": r.attraction_score, "distance_km": r.distance_from_origin}
            for _, r in sorted(regions.items())]
    publish_frame(pd.DataFrame(rows, columns=REGION_COLUMNS), path)


def write_persons(persons: Iterable[Person], path: str) -> None:
    rows = [{**{c: getattr(p, c) for c in PERSON_COLUMNS if c not in ("person_id", "income")},
             "person_id": p.id, "income": p.income} for p in persons]
    frame = pd.DataFrame(rows, columns=PERSON_COLUMNS).rename(columns={"income": "income_mil_vnd"})
    publish_frame(frame, path)


def _los_columns(observations: Sequence) -> List[str]:
    present = {name for obs in observations for leaf in obs.leaves for name in leaf.attributes}
    return [name for name in LOS_ORDER if name in present]


def _unit_header(columns: Sequence[str]) -> Dict[str, str]:
    inverse = {v: k for k, v in UNIT_COLUMNS.items()}
    return {c: inverse.get(c, c) for c in columns}


def write_rp_dataset(dataset: RPDataset, path: str) -> None:
    """Escribe el diario RP en el mismo formato largo que lee `load_rp_dataset`."""
    los = _los_columns(dataset.observations)
    rows = []
    for obs in dataset:
        for leaf in sorted(obs.leaves, key=lambda l: (l.destination, l.mode.order)):
            rows.append({
                "obs_id": obs.id, "person_id": obs.person_id, "purpose": obs.purpose.value,
                "season": getattr(obs, "season", "other"), "travel_party": getattr(obs, "travel_party", "other"),
                "destination": leaf.destination, "mode": leaf.mode.value,
                "chosen": int(leaf.destination == obs.chosen_destination and leaf.mode == obs.chosen_mode),
                **{name: leaf.attributes.get(name) for name in los},
            })
    frame = pd.DataFrame(rows, columns=RP_COLUMNS + los).rename(columns=_unit_header(los))
    publish_frame(frame, path)


def write_sp_dataset(dataset: SPDataset, path: str) -> None:
    """Escribe las respuestas SP en formato largo, con la evaluación de atractivo si existe."""
    los = _los_columns(dataset.observations)
    columns = ["obs_id"] + SP_COLUMNS + ["summer", "with_family"] + los + ["attraction_eval"]
    rows = []
    for obs in dataset:
        for leaf in sorted(obs.leaves, key=lambda l: (l.destination, l.mode.order)):
            rows.append({
                "obs_id": obs.id, "person_id": obs.person_id, "scenario": obs.scenario,
                "purpose": obs.purpose.value,
                "rp_chosen_mode": obs.rp_chosen_mode.value if obs.rp_chosen_mode else "",
                "destination": leaf.destination, "mode": leaf.mode.value,
                "chosen": int(leaf.destination == obs.chosen_destination and leaf.mode == obs.chosen_mode),
                "summer": int(obs.covariates.get("summer", 0)),
                "with_family": int(obs.covariates.get("with_family", 0)),
                **{name: leaf.attributes.get(name) for name in los},
                "attraction_eval": obs.destination_attributes.get(leaf.destination, {}).get("attraction_eval"),
            })
    frame = pd.DataFrame(rows, columns=columns).rename(columns=_unit_header(los))
    publish_frame(frame, path)


def write_tripgen_records(records: Sequence[TripGenRecord], path: str) -> None:
    covariates = sorted({name for record in records for name in record.covariates})
    rows = [{"person_id": r.person_id, "annual_trip_count": r.annual_trip_count,
             **{name: r.covariates.get(name) for name in covariates}} for r in records]
    publish_frame(pd.DataFrame(rows, columns=TRIPGEN_COLUMNS + covariates), path)
