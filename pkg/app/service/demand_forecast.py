# app/service/demand_forecast.py

"""
Accesibilidad logsum y pronóstico de demanda
============================================

Encadena nivel de servicio → probabilidades del logit anidado → accesibilidad
→ generación de viajes → demanda origen-destino por modo, y compara dos
escenarios para informar los viajes inducidos.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from app import config
from app.errors import ChoiceSetError, ScenarioError
from app.models.choice_model import (
    COVARIATE_ATTRIBUTES,
    DatasetKind,
    Mode,
    ModelSpec,
    ParameterVector,
    Purpose,
)
from app.models.results import RegressionFit
from app.models.scenario import (
    DEMAND_COLUMNS,
    PERSON_TRIP_COLUMNS,
    DemandTable,
    InducedTravelReport,
    Scenario,
)
from app.models.survey import ChoiceLeaf, ChoiceObservation, Person
from app.service.choice_sets import build_choice_set
from app.service.nested_logit import evaluate_nests, with_interactions
from app.service.trip_generation import predict_trips_for_demand
from app.utils.logger import get_logger

logger = get_logger(__name__)


def expected_maximum_utility(utilities: Sequence[float], mu3: float = config.ACCESSIBILITY_MU3) -> float:
    """(1/μ₃)·ln Σ exp(μ₃·V), estabilizado por el máximo."""
    values = np.asarray(list(utilities), dtype=float)
    if values.size == 0:
        raise ScenarioError("El conjunto de destinos está vacío")
    if not mu3 > 0:
        raise ValueError(f"μ₃ debe ser positivo, se recibió {mu3}")
    return float(logsumexp(mu3 * values) / mu3)


def person_covariates(person: Optional[Person], spec: ModelSpec) -> Dict[str, float]:
    base = {name: 0.0 for name in COVARIATE_ATTRIBUTES}
    if person is not None:
        base.update(person.attributes())
    return with_interactions(base, spec)


def scenario_observation(person: Optional[Person], scenario: Scenario, spec: ModelSpec,
                         origin: Optional[int] = None) -> ChoiceObservation:
    """
    Situación de elección que enfrenta una persona en un escenario.

    Cada destino alcanzable desde el origen aporta un nido con los modos
    ofrecidos en el par, filtrados por el universo del modelo y por las reglas
    de distancia. Los destinos sin modos se omiten.

    Raises:
        ScenarioError: Si ningún destino queda disponible.
    """
    if origin is None:
        if person is None:
            raise ScenarioError("Se requiere el origen o una persona con región de residencia")
        origin = person.home_region
    universe = spec.universe(DatasetKind.FORECAST)
    leaves: List[ChoiceLeaf] = []
    destination_attributes: Dict[int, Dict[str, float]] = {}
    for destination in scenario.destinations(origin):
        pair = scenario.pair(origin, destination)
        offered = pair.available_modes & universe
        if not offered:
            continue
        try:
            modes = build_choice_set(pair.distance_km, offered, DatasetKind.FORECAST, spec.rules)
        except ChoiceSetError as e:
            logger.debug(f"Destino {destination} omitido: {e}")
            continue
        for mode in sorted(modes, key=lambda m: m.order):
            leaves.append(ChoiceLeaf(destination, mode, scenario.los(origin, destination, mode).attributes()))
        destination_attributes[destination] = scenario.regions[destination].attributes()

    if not leaves:
        raise ScenarioError(f"El escenario '{scenario.name}' no ofrece destinos desde la región {origin}")
    person_id = person.id if person is not None else f"origen-{origin}"
    return ChoiceObservation(
        id=f"{scenario.name}:{person_id}",
        person_id=person_id,
        purpose=spec.purpose,
        leaves=tuple(leaves),
        destination_attributes=destination_attributes,
        covariates=person_covariates(person, spec),
    )


def accessibility(origin: int, scenario: Scenario, params: ParameterVector, spec: ModelSpec,
                  mu3: float = config.ACCESSIBILITY_MU3, person: Optional[Person] = None) -> float:
    """
    Accesibilidad del origen como utilidad máxima esperada sobre destinos.

    V_ij es la utilidad del destino con su término logsum (λ′C_d + λΓ_d) según
    el modelo estimado; el propósito lo fija la especificación.
    """
    observation = scenario_observation(person, scenario, spec, origin)
    nests = evaluate_nests(observation, params, spec, DatasetKind.FORECAST)
    return expected_maximum_utility([nest.utility for nest in nests], mu3)


def _person_allocation(person: Person, purpose: Purpose, scenario: Scenario, params: ParameterVector,
                       spec: ModelSpec, fit: RegressionFit, mu3: float) -> Dict:
    observation = scenario_observation(person, scenario, spec)
    nests = evaluate_nests(observation, params, spec, DatasetKind.FORECAST)
    access = expected_maximum_utility([nest.utility for nest in nests], mu3)
    covariates = {**person.attributes(), "accessibility": access}
    frequency, clamped = predict_trips_for_demand(fit, covariates)

    rows = []
    for nest in nests:
        for mode, probability in nest.conditional_probs.items():
            rows.append((person.id, purpose.value, person.home_region, nest.destination, mode.value,
                         frequency * nest.marginal_prob * probability))
    return {"rows": rows, "frequency": frequency, "clamped": clamped, "accessibility": access}


def forecast_demand(population: Iterable[Person], scenario: Scenario,
                    choice_params: Mapping[Purpose, ParameterVector],
                    tripgen_fits: Mapping[Purpose, RegressionFit],
                    specs: Mapping[Purpose, ModelSpec],
                    mu3: float = config.ACCESSIBILITY_MU3,
                    threads: int = config.THREADS) -> DemandTable:
    """
    Pronóstico de demanda anual esperada por (origen, destino, modo).

    Para cada persona y propósito: accesibilidad en el escenario, frecuencia de
    viajes con el ajuste del mismo propósito y reparto de esa frecuencia con las
    probabilidades del logit anidado. Los viajes son esperanzas (sin redondeo).

    Args:
        population: Personas a pronosticar (origen = región de residencia).
        scenario (Scenario): Escenario de nivel de servicio.
        choice_params: Parámetros estimados por propósito.
        tripgen_fits: Ajuste de generación por propósito.
        specs: Especificación del modelo por propósito.
        mu3 (float): Parámetro inclusivo de la accesibilidad.
        threads (int): Hilos para el cálculo por persona.

    Returns:
        DemandTable: Celdas agregadas, asignación por persona y frecuencias generadas.

    Raises:
        ScenarioError: Si falta el ajuste o la especificación de un propósito.
        ParameterError: Si una persona no tiene las covariables del ajuste.
    """
    purposes = sorted(choice_params, key=lambda p: p.value)
    for purpose in purposes:
        if purpose not in tripgen_fits or purpose not in specs:
            raise ScenarioError(f"Falta el ajuste de generación o la especificación para {purpose.value}")

    tasks = [(person, purpose) for person in population for purpose in purposes]

    def run(task):
        person, purpose = task
        return _person_allocation(person, purpose, scenario, choice_params[purpose], specs[purpose],
                                  tripgen_fits[purpose], mu3)

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            allocations = list(executor.map(run, tasks))
    else:
        allocations = [run(task) for task in tasks]

    rows, generated, clamped = [], {}, []
    for (person, purpose), allocation in zip(tasks, allocations):
        rows.extend(allocation["rows"])
        key = f"{person.id}:{purpose.value}"
        generated[key] = allocation["frequency"]
        if allocation["clamped"]:
            clamped.append(key)
    if clamped:
        logger.warning(f"Predicción lineal recortada en 0 para {len(clamped)} persona(s)")

    person_trips = pd.DataFrame(rows, columns=PERSON_TRIP_COLUMNS)
    return DemandTable(
        scenario=scenario.name,
        cells=aggregate_cells(person_trips, scenario),
        person_trips=person_trips,
        generated=generated,
        clamped_persons=tuple(clamped),
    )


def aggregate_cells(person_trips: pd.DataFrame, scenario: Optional[Scenario] = None) -> pd.DataFrame:
    if person_trips.empty:
        return pd.DataFrame(columns=DEMAND_COLUMNS)
    cells = (person_trips.groupby(["origin", "destination", "mode"], sort=False)["trips"]
             .sum().reset_index())
    if scenario is not None:
        distances = [scenario.pair(int(o), int(d)).distance_km for o, d in zip(cells["origin"], cells["destination"])]
    else:
        distances = [math.nan] * len(cells)
    cells["vmt"] = cells["trips"] * np.asarray(distances, dtype=float)
    cells["_order"] = [Mode.parse(m).order for m in cells["mode"]]
    cells = cells.sort_values(["origin", "destination", "_order"], kind="mergesort").drop(columns="_order")
    return cells.reset_index(drop=True)[DEMAND_COLUMNS]


def _mode_totals(person_trips: pd.DataFrame) -> pd.DataFrame:
    if person_trips.empty:
        return pd.DataFrame()
    keys = person_trips["person_id"].astype(str) + ":" + person_trips["purpose"].astype(str)
    return person_trips.assign(key=keys).pivot_table(
        index="key", columns="mode", values="trips", aggfunc="sum", fill_value=0.0)


def mode_shift_matrix(base: DemandTable, alt: DemandTable, modes: Sequence[str]) -> pd.DataFrame:
    """
    Matriz de transferencia modal desde la reasignación por persona.

    Las pérdidas de cada modo se reparten entre los modos que ganan viajes en
    proporción a sus ganancias. La fila `induced` recoge las ganancias que no
    provienen de ningún modo y la columna `suppressed` las pérdidas sin destino.
    """
    index = list(modes) + ["induced"]
    columns = list(modes) + ["suppressed"]
    matrix = pd.DataFrame(0.0, index=index, columns=columns)
    base_totals = _mode_totals(base.person_trips)
    alt_totals = _mode_totals(alt.person_trips)
    keys = sorted(set(base_totals.index) | set(alt_totals.index))
    base_totals = base_totals.reindex(index=keys, columns=list(modes), fill_value=0.0)
    alt_totals = alt_totals.reindex(index=keys, columns=list(modes), fill_value=0.0)

    for key in keys:
        delta = alt_totals.loc[key].to_numpy() - base_totals.loc[key].to_numpy()
        losses = np.clip(-delta, 0.0, None)
        gains = np.clip(delta, 0.0, None)
        total_loss, total_gain = losses.sum(), gains.sum()
        transferred = min(total_loss, total_gain)
        if transferred > 0:
            matrix.iloc[:len(modes), :len(modes)] += np.outer(losses / total_loss, gains / total_gain) * transferred
        if total_gain > 0:
            matrix.iloc[len(modes), :len(modes)] += gains * (1.0 - transferred / total_gain)
        if total_loss > 0:
            matrix.iloc[:len(modes), len(modes)] += losses * (1.0 - transferred / total_loss)
    return matrix


def induced_travel(base: DemandTable, alt: DemandTable) -> InducedTravelReport:
    """
    Diferencias de viajes y VMT entre dos tablas de demanda (total y por modo),
    participaciones modales y matriz de transferencia modal.

    Raises:
        ScenarioError: Si las tablas no cubren las mismas regiones o personas.
    """
    if base.regions() != alt.regions():
        raise ScenarioError(
            f"Las regiones de '{base.scenario}' y '{alt.scenario}' no coinciden: "
            f"{sorted(base.regions())} vs {sorted(alt.regions())}")
    if set(base.generated) != set(alt.generated):
        raise ScenarioError("Las tablas de demanda no corresponden a la misma población")

    modes = sorted(set(base.cells["mode"]) | set(alt.cells["mode"]), key=lambda m: Mode.parse(m).order)
    base_trips = base.trips_by_mode().reindex(modes, fill_value=0.0)
    alt_trips = alt.trips_by_mode().reindex(modes, fill_value=0.0)
    base_vmt = base.vmt_by_mode().reindex(modes, fill_value=0.0)
    alt_vmt = alt.vmt_by_mode().reindex(modes, fill_value=0.0)

    def pct(delta, reference):
        return np.where(reference != 0, 100.0 * delta / np.where(reference != 0, reference, 1.0),
                        np.where(delta == 0, 0.0, np.nan))

    base_total, alt_total = base.total_trips, alt.total_trips
    by_mode = pd.DataFrame({
        "mode": modes,
        "base_trips": base_trips.to_numpy(),
        "alt_trips": alt_trips.to_numpy(),
        "delta_trips": (alt_trips - base_trips).to_numpy(),
        "pct_trips": pct((alt_trips - base_trips).to_numpy(), base_trips.to_numpy()),
        "base_vmt": base_vmt.to_numpy(),
        "alt_vmt": alt_vmt.to_numpy(),
        "delta_vmt": (alt_vmt - base_vmt).to_numpy(),
        "pct_vmt": pct((alt_vmt - base_vmt).to_numpy(), base_vmt.to_numpy()),
        "base_share": base_trips.to_numpy() / base_total if base_total else np.zeros(len(modes)),
        "alt_share": alt_trips.to_numpy() / alt_total if alt_total else np.zeros(len(modes)),
    })
    by_mode["share_shift"] = by_mode["alt_share"] - by_mode["base_share"]

    report = InducedTravelReport(
        base_scenario=base.scenario,
        alt_scenario=alt.scenario,
        base_trips=base_total,
        alt_trips=alt_total,
        base_vmt=base.total_vmt,
        alt_vmt=alt.total_vmt,
        by_mode=by_mode,
        shift_matrix=mode_shift_matrix(base, alt, modes),
    )
    logger.info(f"Viajes inducidos {alt.scenario} vs {base.scenario}: "
                f"{report.delta_trips:+.4f} ({report.pct_trips if report.pct_trips is not None else 'n/a'} %)")
    return report