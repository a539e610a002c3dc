# app/service/synthetic.py

"""
Oráculos sintéticos
===================

Genera poblaciones y datos de elección a partir de parámetros conocidos,
enumera probabilidades por aritmética exponencial directa (sin log-sum-exp) y
ejecuta pruebas de recuperación simular → estimar → comparar.

El corredor de referencia tiene siete regiones ordenadas por distancia desde
el origen de la encuesta (región 1).
"""

import itertools
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.errors import ChoiceSetError, DemandModelError
from app.models.choice_model import (
    DatasetKind,
    Mode,
    ModelSpec,
    ParameterVector,
    Purpose,
    Region,
)
from app.models.results import EstimationControls, ParameterRecovery, RecoveryReport
from app.models.scenario import LevelOfService, ODPair, Scenario
from app.models.survey import (
    ChoiceLeaf,
    ChoiceObservation,
    Person,
    RPDataset,
    RPObservation,
    SPDataset,
    SPObservation,
)
from app.service.choice_sets import build_choice_set
from app.service.estimation import estimate
from app.service.nested_logit import (
    UtilityContext,
    evaluate_nests,
    observation_lambda,
    systematic_utility,
    with_interactions,
)
from app.service.parameters import coerce_parameters
from app.utils.logger import get_logger

logger = get_logger(__name__)

MAX_BRUTEFORCE_LEAVES = 64
MARGINAL_TOLERANCE = 1e-3

# Participaciones (%) de la muestra de la encuesta por atributo. Edad en años
# e ingreso en Mil VND/mes, como bandas (mínimo, máximo).
SURVEY_MARGINALS: Dict[str, Tuple[Tuple[object, float], ...]] = {
    "age": (((18, 19), 6.03), ((20, 29), 37.36), ((30, 39), 28.37),
            ((40, 49), 12.07), ((50, 59), 10.01), ((60, 75), 6.16)),
    "gender": (("male", 53.15), ("female", 46.85)),
    "marital": (("single", 35.94), ("married", 61.49), ("other", 2.57)),
    "occupation_class": (("official", 37.48), ("laborer", 7.83), ("merchant", 7.83),
                         ("homemaker", 11.04), ("student", 18.87), ("other", 16.94)),
    "education": (("high_school", 14.51), ("vocational", 18.61), ("bachelor", 56.61),
                  ("postgraduate", 5.01), ("other", 5.26)),
    "income": (((0.5, 1.6), 11.04), ((1.6, 3.0), 19.38), ((3.0, 5.0), 21.57), ((5.0, 10.0), 27.98),
               ((10.0, 15.0), 10.53), ((15.0, 20.0), 6.55), ((20.0, 30.0), 2.95)),
}

NON_WORKING_OCCUPATIONS = frozenset({"homemaker", "student"})

SP_LEVELS = (0.6, 1.0, 1.4)
SP_ATTRIBUTES = ("travel_cost", "in_vehicle_time", "access_egress_time", "frequency")
SP_DESIGN: Tuple[Tuple[float, ...], ...] = tuple(itertools.product(SP_LEVELS, repeat=len(SP_ATTRIBUTES)))
RP_JITTER = (0.75, 1.25)
SUMMER_SHARE = 0.3
WITH_FAMILY_SHARE = 0.4
SURVEY_ORIGIN = 1

_REFERENCE_REGIONS = (
    # id, nombre, gdp (10⁶ Mil VND), turistas (millones), atractivo, km desde el origen
    (1, "Delta del Río Rojo", 0.55, 12.0, 3.4, 110.0),
    (2, "Thanh Hoa - Ninh Binh", 0.12, 4.5, 3.1, 160.0),
    (3, "Nghe An - Ha Tinh", 0.09, 3.2, 3.6, 290.0),
    (4, "Hue - Quang Tri", 0.07, 5.8, 4.2, 660.0),
    (5, "Da Nang - Quang Nam", 0.10, 4.1, 3.5, 880.0),
    (6, "Khanh Hoa - Binh Dinh", 0.06, 3.6, 4.4, 1280.0),
    (7, "Ho Chi Minh", 0.85, 14.5, 3.9, 1720.0),
)

_EXISTING_MODES = frozenset({Mode.BUS, Mode.CONVENTIONAL_RAIL, Mode.AIRLINE, Mode.LCC, Mode.CAR})


def reference_regions() -> Dict[int, Region]:
    return {
        rid: Region(id=rid, name=name, gdp=gdp, tourist_count=tourists, attraction_score=score,
                    distance_from_origin=km)
        for rid, name, gdp, tourists, score, km in _REFERENCE_REGIONS
    }


def reference_los(mode: Mode, distance_km: float) -> LevelOfService:
    """Nivel de servicio de referencia de un modo en función de la distancia."""
    d = float(distance_km)
    if mode is Mode.BUS:
        return LevelOfService(0.05 + 0.0005 * d, d / 50.0, 0.75, 20.0)
    if mode is Mode.CONVENTIONAL_RAIL:
        return LevelOfService(0.05 + 0.0007 * d, d / 55.0, 0.75, 6.0)
    if mode is Mode.AIRLINE:
        return LevelOfService(0.6 + 0.0012 * d, 0.5 + d / 700.0, 2.0, 10.0)
    if mode is Mode.LCC:
        return LevelOfService(0.3 + 0.0007 * d, 0.5 + d / 700.0, 2.25, 6.0)
    if mode is Mode.CAR:
        return LevelOfService(0.0015 * d, d / 60.0, 0.0, 24.0)
    return LevelOfService(0.2 + 0.0009 * d, 0.2 + d / 250.0, 1.0, 30.0)


def reference_scenario(include_hsr: bool = False, name: Optional[str] = None,
                       regions: Optional[Mapping[int, Region]] = None,
                       origin: int = SURVEY_ORIGIN) -> Scenario:
    """Escenario del corredor de referencia desde `origin` hacia las siete regiones."""
    regions = dict(regions or reference_regions())
    modes = _EXISTING_MODES | ({Mode.HSR} if include_hsr else frozenset())
    od_pairs, level_of_service = {}, {}
    for destination, region in sorted(regions.items()):
        od_pairs[(origin, destination)] = ODPair(origin, destination, region.distance_from_origin, frozenset(modes))
        for mode in modes:
            level_of_service[(origin, destination, mode)] = reference_los(mode, region.distance_from_origin)
    return Scenario(name or ("hsr" if include_hsr else "base"), regions, od_pairs, level_of_service)


def _normalized(shares: Sequence[float], attribute: str) -> np.ndarray:
    values = np.asarray(shares, dtype=float)
    if np.any(values < 0):
        raise ValueError(f"Participaciones negativas en '{attribute}'")
    total = values.sum() / 100.0
    if abs(total - 1.0) > MARGINAL_TOLERANCE:
        raise ValueError(f"Las participaciones de '{attribute}' suman {100 * total:.4f} %, no 100 %")
    return values / values.sum()


def simulate_population(n: int, marginals: Optional[Mapping] = None, seed: int = 0,
                        home_region: int = SURVEY_ORIGIN) -> List[Person]:
    """
    Población sintética con atributos independientes según las marginales.

    Edad e ingreso se sortean uniformes dentro de la banda; `working` es 0 para
    amas de casa, desempleados, jubilados y estudiantes.

    Raises:
        ValueError: Si n < 0 o alguna marginal no suma 100 % (tolerancia 1e-3).
    """
    if n < 0:
        raise ValueError("n debe ser ≥ 0")
    marginals = dict(marginals or SURVEY_MARGINALS)
    missing = [a for a in SURVEY_MARGINALS if a not in marginals]
    if missing:
        raise ValueError(f"Faltan marginales: {', '.join(missing)}")
    rng = np.random.default_rng(seed)

    draws = {}
    for attribute in SURVEY_MARGINALS:
        categories = [category for category, _ in marginals[attribute]]
        probabilities = _normalized([share for _, share in marginals[attribute]], attribute)
        draws[attribute] = (categories, rng.choice(len(categories), size=n, p=probabilities))

    age_bands, age_index = draws["age"]
    ages = [rng.integers(age_bands[i][0], age_bands[i][1] + 1) for i in age_index]
    income_bands, income_index = draws["income"]
    incomes = [round(float(rng.uniform(*income_bands[i])), 2) for i in income_index]

    people = []
    for row in range(n):
        occupation = draws["occupation_class"][0][draws["occupation_class"][1][row]]
        people.append(Person(
            id=f"P{row + 1:05d}",
            age=int(ages[row]),
            gender=draws["gender"][0][draws["gender"][1][row]],
            marital=draws["marital"][0][draws["marital"][1][row]],
            occupation_class=occupation,
            education=draws["education"][0][draws["education"][1][row]],
            income=incomes[row],
            working=0 if occupation in NON_WORKING_OCCUPATIONS else 1,
            home_region=home_region,
        ))
    return people


def _scaled_attributes(los: LevelOfService, factors: Sequence[float]) -> Dict[str, float]:
    base = los.attributes()
    return {name: base[name] * factor for name, factor in zip(SP_ATTRIBUTES, factors)}


def _draw_leaf(observation: ChoiceObservation, params: ParameterVector, spec: ModelSpec,
               kind: DatasetKind, rng: np.random.Generator) -> Tuple[int, Mode]:
    """Muestreo secuencial: destino según P_d y luego modo según P_{m|d}."""
    nests = evaluate_nests(observation, params, spec, kind)
    marginal = np.array([nest.marginal_prob for nest in nests])
    nest = nests[int(rng.choice(len(nests), p=marginal / marginal.sum()))]
    modes = list(nest.conditional_probs)
    conditional = np.array([nest.conditional_probs[m] for m in modes])
    mode = modes[int(rng.choice(len(modes), p=conditional / conditional.sum()))]
    if spec.nested(kind):
        return nest.destination, mode
    return observation.chosen_destination, mode


def _rp_observation(person: Person, trip: int, scenario: Scenario, spec: ModelSpec,
                    covariates: Dict[str, float], season: str, party: str,
                    rng: np.random.Generator) -> RPObservation:
    leaves, destination_attributes = [], {}
    origin = person.home_region
    for destination in scenario.destinations(origin):
        pair = scenario.pair(origin, destination)
        offered = pair.available_modes & spec.rp_universe
        if not offered:
            continue
        try:
            modes = build_choice_set(pair.distance_km, offered, DatasetKind.RP, spec.rules)
        except ChoiceSetError:
            continue
        for mode in sorted(modes, key=lambda m: m.order):
            base = scenario.los(origin, destination, mode).attributes()
            jitter = rng.uniform(*RP_JITTER, size=len(base))
            leaves.append(ChoiceLeaf(destination, mode,
                                     {name: value * f for (name, value), f in zip(base.items(), jitter)}))
        destination_attributes[destination] = scenario.regions[destination].attributes()
    return RPObservation(
        id=f"RP-{person.id}-{trip + 1}",
        person_id=person.id,
        purpose=spec.purpose,
        leaves=tuple(leaves),
        destination_attributes=destination_attributes,
        covariates=covariates,
        season=season,
        travel_party=party,
    )


def sp_pivot(scenario: Scenario, origin: int, destination: int, mode: Mode) -> LevelOfService:
    """
    Nivel de servicio sobre el que pivota el diseño SP: el del escenario si
    ofrece el modo en el par, o el de referencia para la distancia del par.
    """
    pair = scenario.pair(origin, destination)
    if mode in pair.available_modes and (origin, destination, mode) in scenario.level_of_service:
        return scenario.los(origin, destination, mode)
    return reference_los(mode, pair.distance_km)


def _sp_observation(person: Person, number: int, scenario: Scenario, spec: ModelSpec,
                    covariates: Dict[str, float], reference: Mode, rp_destination: int,
                    rng: np.random.Generator) -> Optional[SPObservation]:
    origin = person.home_region
    destinations = scenario.destinations(origin) if spec.sp_nested else (rp_destination,)
    leaves, destination_attributes = [], {}
    for destination in destinations:
        pair = scenario.pair(origin, destination)
        try:
            modes = build_choice_set(pair.distance_km, spec.sp_universe, DatasetKind.SP, spec.rules)
        except (ChoiceSetError, ValueError):
            continue
        for mode in sorted(modes, key=lambda m: m.order):
            profile = SP_DESIGN[int(rng.integers(len(SP_DESIGN)))]
            attributes = _scaled_attributes(sp_pivot(scenario, origin, destination, mode), profile)
            attributes["state_dependence"] = 1.0 if mode == reference else 0.0
            leaves.append(ChoiceLeaf(destination, mode, attributes))
        attributes = scenario.regions[destination].attributes()
        attributes["attraction_eval"] = float(rng.integers(1, 6))
        destination_attributes[destination] = attributes
    if not leaves:
        return None
    return SPObservation(
        id=f"SP-{person.id}-{number + 1}",
        person_id=person.id,
        purpose=spec.purpose,
        leaves=tuple(leaves),
        destination_attributes=destination_attributes,
        covariates=covariates,
        chosen_destination=rp_destination if not spec.sp_nested else None,
        scenario=f"S{number + 1}",
        rp_chosen_mode=reference,
    )


def default_sp_scenarios(spec: ModelSpec) -> int:
    return 4 if spec.purpose is Purpose.BUSINESS else 2


def simulate_choices(population: Sequence[Person], scenario: Scenario, params_true, spec: ModelSpec,
                     trips_per_person: int, seed: int,
                     sp_scenarios: Optional[int] = None) -> Tuple[RPDataset, SPDataset]:
    """
    Simula datos RP y SP a partir de probabilidades exactas del logit anidado.

    Cada persona usa su propio generador derivado de (seed, índice), de modo
    que el resultado no depende del orden ni del paralelismo. Las situaciones
    SP se arman con un diseño factorial completo de tres niveles por atributo
    alrededor del nivel de servicio del escenario (`sp_pivot`), submuestreado
    por respondente, y la dependencia de estado se conecta al
    último modo elegido en RP.

    Raises:
        ValueError: Si trips_per_person es negativo.
    """
    if trips_per_person < 0:
        raise ValueError("trips_per_person debe ser ≥ 0")
    params = coerce_parameters(params_true, spec)
    sp_count = default_sp_scenarios(spec) if sp_scenarios is None else sp_scenarios
    rp_observations, sp_observations = [], []

    for index, person in enumerate(population):
        rng = np.random.default_rng([seed, index])
        last: Optional[Tuple[int, Mode]] = None
        for trip in range(trips_per_person):
            summer = spec.purpose is Purpose.NON_BUSINESS and rng.random() < SUMMER_SHARE
            family = spec.purpose is Purpose.NON_BUSINESS and rng.random() < WITH_FAMILY_SHARE
            covariates = with_interactions(
                {**person.attributes(), "summer": float(summer), "with_family": float(family)}, spec)
            observation = _rp_observation(person, trip, scenario, spec, covariates,
                                          "summer" if summer else "other",
                                          "with_family" if family else "other", rng)
            if not observation.leaves:
                continue
            destination, mode = _draw_leaf(observation, params, spec, DatasetKind.RP, rng)
            rp_observations.append(_with_choice(observation, destination, mode))
            last = (destination, mode)

        if last is None:
            continue
        for number in range(sp_count):
            family = spec.purpose is Purpose.NON_BUSINESS and rng.random() < WITH_FAMILY_SHARE
            covariates = with_interactions(
                {**person.attributes(), "summer": 0.0, "with_family": float(family)}, spec)
            observation = _sp_observation(person, number, scenario, spec, covariates, last[1], last[0], rng)
            if observation is None:
                continue
            destination, mode = _draw_leaf(observation, params, spec, DatasetKind.SP, rng)
            sp_observations.append(_with_choice(observation, destination, mode))

    regions = dict(scenario.regions)
    logger.info(f"Simulación: {len(rp_observations)} observaciones RP, {len(sp_observations)} SP "
                f"({len(population)} personas, semilla {seed})")
    return RPDataset(tuple(rp_observations), regions), SPDataset(tuple(sp_observations), regions)


def _with_choice(observation: ChoiceObservation, destination: int, mode: Mode) -> ChoiceObservation:
    return replace(observation, chosen_destination=destination, chosen_mode=mode)


def bruteforce_prob(observation: ChoiceObservation, params, spec: ModelSpec,
                    kind: Optional[DatasetKind] = None) -> Dict[Tuple[int, Mode], float]:
    """
    Enumera todas las hojas y calcula los pesos anidados con exponenciales directas.

    Peso de la hoja (d, m): exp(C_d) · S_d^(λ−1) · exp(V_m/λ), con
    S_d = Σ exp(V_m′/λ); en la estructura SP de solo modo, exp(V_m).

    Raises:
        ValueError: Si la observación tiene más de 64 hojas.
    """
    if len(observation.leaves) > MAX_BRUTEFORCE_LEAVES:
        raise ValueError(f"Instancia demasiado grande: {len(observation.leaves)} hojas (máximo 64)")
    ctx = UtilityContext.build(observation, params, spec, kind)
    weights: Dict[Tuple[int, Mode], float] = {}
    if not spec.nested(ctx.kind):
        for leaf in observation.leaves:
            weights[(leaf.destination, leaf.mode)] = math.exp(systematic_utility(ctx, leaf))
    else:
        lam = observation_lambda(ctx)
        for destination in observation.destinations():
            leaves = observation.leaves_for(destination)
            exps = [math.exp(systematic_utility(ctx, leaf) / lam) for leaf in leaves]
            nest_sum = sum(exps)
            outer = math.exp(systematic_utility(ctx, destination)) * nest_sum ** (lam - 1.0)
            for leaf, value in zip(leaves, exps):
                weights[(leaf.destination, leaf.mode)] = outer * value
    total = sum(weights.values())
    return {key: value / total for key, value in weights.items()}


@dataclass(frozen=True)
class RecoveryTolerances:
    """z_max: errores estándar admitidos; relative: error relativo para |verdadero| > 0.1."""
    z_max: float = 3.0
    relative: Optional[float] = None
    parameters: Optional[Tuple[str, ...]] = None


def recovery_test(spec: ModelSpec, params_true, n: int, seed: int,
                  tolerances: Optional[RecoveryTolerances] = None,
                  trips_per_person: int = 1, scenario: Optional[Scenario] = None,
                  controls: Optional[EstimationControls] = None) -> RecoveryReport:
    """
    Simula con parámetros conocidos, estima desde cero y compara.

    Un fallo de la estimación produce un informe fallido, nunca una excepción.
    """
    tolerances = tolerances or RecoveryTolerances()
    truth = coerce_parameters(params_true, spec)
    scenario = scenario or reference_scenario(include_hsr=True)
    try:
        population = simulate_population(n, seed=seed)
        rp, sp = simulate_choices(population, scenario, truth, spec, trips_per_person, seed)
        result = estimate(rp, sp, spec, controls=controls)
    except DemandModelError as e:
        logger.warning(f"Recuperación fallida (n={n}, semilla={seed}): {e}")
        return RecoveryReport(n_persons=n, seed=seed, error=str(e))
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        logger.warning(f"Recuperación fallida (n={n}, semilla={seed}): {e}")
        return RecoveryReport(n_persons=n, seed=seed, error=str(e))

    names = tolerances.parameters or truth.names
    checks = []
    for name in names:
        index = result.estimates.layout[name]
        true_value = truth[name]
        estimated = float(result.estimates.values[index])
        se = float(result.std_errors[index])
        passed = math.isfinite(se) and abs(estimated - true_value) <= tolerances.z_max * se
        if passed and tolerances.relative is not None and abs(true_value) > 0.1:
            passed = abs(estimated - true_value) <= tolerances.relative * abs(true_value)
        checks.append(ParameterRecovery(name, true_value, estimated, se, passed))
    return RecoveryReport(n_persons=n, seed=seed, parameters=tuple(checks),
                          converged=result.converged, result=result)
