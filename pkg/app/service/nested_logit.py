# app/service/nested_logit.py

"""
Motor de logit anidado destino → modo
=====================================

Calcula utilidades sistemáticas, el parámetro logsum individual λ (enlace
logístico sobre covariables de la persona), los valores inclusivos Γ_d y las
probabilidades marginales, condicionales y conjuntas para las estructuras RP,
SP y de pronóstico.

Hay dos caminos de evaluación que comparten `term_value`:

- Escalar (`systematic_utility`, `evaluate_nests`, `joint_prob`): una
  observación a la vez, para consultas y pruebas.
- Vectorizado (`compile_observations` + `evaluate_arrays`): matrices de
  diseño por hoja, nido y observación, con log-verosimilitud y gradiente
  analítico por bloques. Es el que usa la estimación.

Todas las normalizaciones usan desplazamiento por el máximo (log-sum-exp).
"""

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp

from app.errors import LikelihoodError, UtilityError
from app.models.choice_model import (
    LOG_SCALE,
    AttributeSource,
    DatasetKind,
    LambdaCovariate,
    Mode,
    ModelSpec,
    ParameterVector,
    TermScope,
    UtilityTerm,
)
from app.models.survey import ChoiceLeaf, ChoiceObservation
from app.service.parameters import coerce_parameters

# Cotas de λ en punto flotante: estrictamente dentro de (0, 1)
LAMBDA_FLOOR = 1e-10
LAMBDA_CEILING = float(np.nextafter(1.0, 0.0))
# Sobre este log(μ) la exponencial desborda el punto flotante
MAX_LOG_SCALE = 700.0


def lambda_link(omega: Sequence[float], k: Sequence[float]) -> float:
    """
    Enlace logístico del parámetro logsum: exp(ω′k) / (1 + exp(ω′k)).

    Args:
        omega: Coeficientes del enlace.
        k: Covariables de la persona (mismo largo que `omega`).

    Returns:
        float: λ en (0, 1), sin desbordamiento para |ω′k| grandes.

    Raises:
        UtilityError: Si las dimensiones no coinciden o hay covariables no finitas.
    """
    omega = np.asarray(omega, dtype=float).reshape(-1)
    k = np.asarray(k, dtype=float).reshape(-1)
    if omega.shape != k.shape:
        raise UtilityError(f"ω ({omega.size}) y k ({k.size}) no son conformables")
    if not np.all(np.isfinite(k)) or not np.all(np.isfinite(omega)):
        raise UtilityError("Covariable no finita en el enlace λ")
    return float(np.clip(expit(float(omega @ k)), LAMBDA_FLOOR, LAMBDA_CEILING))


def _check_lambda(lam: float) -> None:
    if not 0 < lam <= 1:
        raise ValueError(f"λ debe estar en (0, 1], se recibió {lam}")


def logsum(utilities: Sequence[float], lam: float) -> float:
    """Valor inclusivo ln Σ exp(V_m/λ) con estabilización por el máximo."""
    values = np.asarray(list(utilities), dtype=float)
    if values.size == 0:
        raise ValueError("El vector de utilidades está vacío")
    _check_lambda(lam)
    return float(logsumexp(values / lam))


def _as_mapping(utilities) -> Dict:
    if isinstance(utilities, Mapping):
        return dict(utilities)
    return dict(enumerate(utilities))


def conditional_mode_prob(utilities: Union[Mapping, Sequence[float]], lam: float, mode) -> float:
    """P(m | d) = exp(V_m/λ) / Σ exp(V_m′/λ); con λ = 1 es un MNL simple."""
    values = _as_mapping(utilities)
    if mode not in values:
        raise UtilityError(f"La alternativa {mode} no está en el nido")
    _check_lambda(lam)
    keys = list(values)
    scaled = np.array([values[key] for key in keys], dtype=float) / lam
    return float(math.exp(scaled[keys.index(mode)] - logsumexp(scaled)))


def marginal_destination_prob(dest_utilities: Mapping[int, float], nest_logsums: Mapping[int, float],
                              lambdas: Mapping[int, float], destination: int) -> float:
    """Softmax sobre V_d = λ′C_d + λ_d·Γ_d."""
    if not (set(dest_utilities) == set(nest_logsums) == set(lambdas)):
        raise ValueError("Los vectores de destino no son conformables")
    if destination not in dest_utilities:
        raise UtilityError(f"El destino {destination} no está en el conjunto")
    keys = sorted(dest_utilities)
    totals = np.array([dest_utilities[d] + lambdas[d] * nest_logsums[d] for d in keys])
    return float(math.exp(totals[keys.index(destination)] - logsumexp(totals)))


# --- Selección de términos -------------------------------------------------

def active_mode_terms(spec: ModelSpec, kind: DatasetKind, mode: Mode) -> Iterator[UtilityTerm]:
    """
    Términos de modo que participan en la utilidad de `mode` para el ámbito dado.

    En pronóstico se usan los términos RP y genéricos; los modos que no existen
    en RP (HSR) toman además sus términos SP sin escala, y la dependencia de
    estado vale cero.
    """
    rp_absent = kind is DatasetKind.FORECAST and mode not in spec.rp_universe
    for term in spec.mode_terms:
        if term.is_structural or not term.applies(mode):
            continue
        if kind is DatasetKind.FORECAST and term.source is AttributeSource.STATE_DEPENDENCE:
            continue
        if term.scope.covers(kind) or (rp_absent and term.scope is TermScope.SP):
            yield term


def active_destination_terms(spec: ModelSpec, kind: DatasetKind, destination: int) -> Iterator[UtilityTerm]:
    if not spec.nested(kind):
        return
    for term in spec.destination_terms:
        if not term.is_structural and term.applies(destination) and term.scope.covers(kind):
            yield term


def active_lambda_covariates(spec: ModelSpec, kind: DatasetKind) -> Iterator[LambdaCovariate]:
    for covariate in spec.lambda_covariates:
        if covariate.scope.covers(kind):
            yield covariate


def _alternative_label(leaf: Optional[ChoiceLeaf], destination: Optional[int]) -> str:
    if leaf is not None:
        return f"{leaf.mode.value}@{leaf.destination}"
    return f"destino {destination}"


def _factor_value(factor: str, term_name: str, observation: ChoiceObservation,
                  leaf: Optional[ChoiceLeaf], destination: Optional[int]) -> float:
    if leaf is not None and factor in leaf.attributes:
        return float(leaf.attributes[factor])
    if destination is not None:
        attributes = observation.destination_attributes.get(destination, {})
        if factor in attributes:
            return float(attributes[factor])
    if factor in observation.covariates:
        return float(observation.covariates[factor])
    raise UtilityError(
        f"Falta el atributo '{factor}' del coeficiente '{term_name}' "
        f"para la alternativa {_alternative_label(leaf, destination)} (observación {observation.id})")


def term_value(term: UtilityTerm, observation: ChoiceObservation, leaf: Optional[ChoiceLeaf] = None,
               destination: Optional[int] = None) -> float:
    """Valor que multiplica al coeficiente del término en una alternativa."""
    if term.source is AttributeSource.CONSTANT:
        return 1.0
    if term.source is AttributeSource.STATE_DEPENDENCE:
        return float(leaf.attributes.get("state_dependence", 0.0)) if leaf is not None else 0.0
    if destination is None and leaf is not None:
        destination = leaf.destination
    value = 1.0
    for factor in term.factors:
        value *= _factor_value(factor, term.coefficient_name, observation, leaf, destination)
    return value


def covariate_value(covariate: LambdaCovariate, observation: ChoiceObservation) -> float:
    if not covariate.factors:
        return 1.0
    if covariate.key in observation.covariates:
        value = float(observation.covariates[covariate.key])
    else:
        value = 1.0
        for factor in covariate.factors:
            if factor not in observation.covariates:
                raise UtilityError(
                    f"Falta la covariable '{factor}' del enlace λ ({covariate.coefficient_name}) "
                    f"en la observación {observation.id}")
            value *= float(observation.covariates[factor])
    if not math.isfinite(value):
        raise UtilityError(f"Covariable λ no finita '{covariate.key}' en la observación {observation.id}")
    return value


# --- Camino escalar ---------------------------------------------------------

@dataclass(frozen=True)
class UtilityContext:
    observation: ChoiceObservation
    parameters: Mapping[str, float]
    kind: DatasetKind
    spec: ModelSpec

    def __post_init__(self):
        layout = self.spec.parameter_layout()
        missing = [name for name in layout if name not in self.parameters]
        if missing:
            raise UtilityError(f"Coeficientes sin valor en el contexto: {', '.join(missing)}")

    @property
    def scale(self) -> float:
        if self.kind is DatasetKind.SP and LOG_SCALE in self.parameters:
            return math.exp(self.parameters[LOG_SCALE])
        return 1.0

    @classmethod
    def build(cls, observation: ChoiceObservation, params, spec: ModelSpec,
              kind: Optional[DatasetKind] = None) -> "UtilityContext":
        vector = coerce_parameters(params, spec)
        return cls(observation, vector.as_dict(), kind or observation.kind, spec)


def _find_leaf(observation: ChoiceObservation, mode: Mode, destination: Optional[int]) -> ChoiceLeaf:
    matches = [leaf for leaf in observation.leaves
               if leaf.mode == mode and (destination is None or leaf.destination == destination)]
    if len(matches) == 1:
        return matches[0]
    if not matches:
        raise UtilityError(f"La observación {observation.id} no tiene la alternativa {mode.value}")
    raise UtilityError(f"La alternativa {mode.value} es ambigua en la observación {observation.id}; indique el destino")


def systematic_utility(ctx: UtilityContext, alternative: Union[Mode, int, ChoiceLeaf],
                       destination: Optional[int] = None) -> float:
    """
    Parte sistemática lineal de la utilidad de un modo o de un destino.

    Para un destino se devuelve solo la parte λ′C_d; el término λ_d·Γ_d se
    agrega al armar la probabilidad marginal. En SP toda la utilidad se
    multiplica por la escala μ.
    """
    obs = ctx.observation
    total = 0.0
    if isinstance(alternative, ChoiceLeaf) or isinstance(alternative, Mode):
        leaf = alternative if isinstance(alternative, ChoiceLeaf) else _find_leaf(obs, alternative, destination)
        for term in active_mode_terms(ctx.spec, ctx.kind, leaf.mode):
            total += ctx.parameters[term.coefficient_name] * term_value(term, obs, leaf)
    else:
        for term in active_destination_terms(ctx.spec, ctx.kind, int(alternative)):
            total += ctx.parameters[term.coefficient_name] * term_value(term, obs, destination=int(alternative))
    return ctx.scale * total


def observation_lambda(ctx: UtilityContext) -> float:
    """λ individual de la observación; 1 cuando la estructura no es anidada."""
    if not ctx.spec.nested(ctx.kind):
        return 1.0
    covariates = list(active_lambda_covariates(ctx.spec, ctx.kind))
    omega = [ctx.parameters[c.coefficient_name] for c in covariates]
    k = [covariate_value(c, ctx.observation) for c in covariates]
    return lambda_link(omega, k)


@dataclass(frozen=True)
class NestEvaluation:
    """Evaluación de un nido de destino para una observación."""
    destination: int
    lam: float
    logsum: float
    utility: float
    conditional_probs: Mapping[Mode, float]
    marginal_prob: float


def evaluate_nests(observation: ChoiceObservation, params, spec: ModelSpec,
                   kind: Optional[DatasetKind] = None) -> Tuple[NestEvaluation, ...]:
    """
    Evalúa todos los nidos de la observación.

    En la estructura SP de solo modo todas las hojas forman un único nido
    con λ = 1 y utilidad de destino nula (MNL sobre modos).
    """
    ctx = UtilityContext.build(observation, params, spec, kind)
    lam = observation_lambda(ctx)
    nested = spec.nested(ctx.kind)

    groups: Dict[int, List[ChoiceLeaf]] = {}
    if nested:
        for destination in observation.destinations():
            groups[destination] = list(observation.leaves_for(destination))
    else:
        groups[observation.chosen_destination or observation.destinations()[0]] = list(observation.leaves)

    partial = []
    for destination, leaves in groups.items():
        utilities = {leaf.mode: systematic_utility(ctx, leaf) for leaf in leaves}
        gamma = logsum(list(utilities.values()), lam)
        base = systematic_utility(ctx, destination) if nested else 0.0
        conditional = {mode: conditional_mode_prob(utilities, lam, mode) for mode in utilities}
        partial.append((destination, gamma, base + lam * gamma if nested else gamma, conditional))

    totals = np.array([item[2] for item in partial])
    shares = np.exp(totals - logsumexp(totals))
    return tuple(
        NestEvaluation(destination, lam, gamma, utility, conditional, float(share))
        for (destination, gamma, utility, conditional), share in zip(partial, shares)
    )


def leaf_probabilities(observation: ChoiceObservation, params, spec: ModelSpec,
                       kind: Optional[DatasetKind] = None) -> Dict[Tuple[int, Mode], float]:
    """Tabla de probabilidades conjuntas (destino, modo) de la observación."""
    table: Dict[Tuple[int, Mode], float] = {}
    nests = evaluate_nests(observation, params, spec, kind)
    nested = spec.nested(kind or observation.kind)
    for nest in nests:
        for leaf in (observation.leaves_for(nest.destination) if nested else observation.leaves):
            table[(leaf.destination, leaf.mode)] = nest.marginal_prob * nest.conditional_probs[leaf.mode]
    return table


def joint_prob(observation: ChoiceObservation, params, spec: ModelSpec,
               kind: Optional[DatasetKind] = None) -> float:
    """P(d, m) = P_d · P_{m|d} de la alternativa elegida (MNL sobre modos en SP de negocio)."""
    if observation.chosen_mode is None:
        raise UtilityError(f"La observación {observation.id} no tiene alternativa elegida")
    table = leaf_probabilities(observation, params, spec, kind)
    key = (observation.chosen_destination, observation.chosen_mode)
    if key not in table:
        raise UtilityError(f"La alternativa elegida {key} no está en el conjunto de la observación {observation.id}")
    return table[key]


# --- Camino vectorizado -----------------------------------------------------

@dataclass(frozen=True)
class ChoiceArrays:
    """
    Matrices de diseño de un bloque de observaciones.

    Las hojas están agrupadas contiguamente por nido y los nidos por
    observación; `nest_starts` y `obs_nest_starts` son los desplazamientos de
    inicio de cada grupo.
    """
    kind: DatasetKind
    nested: bool
    scale_index: Optional[int]
    x_leaf: np.ndarray
    x_nest: np.ndarray
    x_lambda: np.ndarray
    leaf_nest: np.ndarray
    leaf_obs: np.ndarray
    nest_obs: np.ndarray
    nest_starts: np.ndarray
    obs_nest_starts: np.ndarray
    chosen_leaf: np.ndarray
    chosen_nest: np.ndarray
    observation_ids: Tuple[str, ...]

    @property
    def n_observations(self) -> int:
        return len(self.observation_ids)


def compile_observations(observations: Sequence[ChoiceObservation], spec: ModelSpec, kind: DatasetKind,
                         require_choice: bool = True) -> ChoiceArrays:
    """
    Construye las matrices de diseño previas a la escala.

    Raises:
        UtilityError: Si falta un atributo requerido por un término.
        LikelihoodError: Si la alternativa elegida no está entre las hojas.
    """
    layout = spec.parameter_layout()
    k = len(layout)
    nested = spec.nested(kind)
    scale_index = layout.get(LOG_SCALE) if kind is DatasetKind.SP else None
    lambda_terms = list(active_lambda_covariates(spec, kind)) if nested else []

    leaf_rows, nest_rows, lambda_rows = [], [], []
    leaf_nest, leaf_obs, nest_obs = [], [], []
    nest_starts, obs_nest_starts = [], []
    chosen_leaf, chosen_nest = [], []

    for obs_index, obs in enumerate(observations):
        obs_nest_starts.append(len(nest_rows))
        row = np.zeros(k)
        for covariate in lambda_terms:
            row[layout[covariate.coefficient_name]] += covariate_value(covariate, obs)
        lambda_rows.append(row)

        if nested:
            groups = [(d, obs.leaves_for(d)) for d in obs.destinations()]
        else:
            groups = [(obs.chosen_destination, tuple(sorted(obs.leaves, key=lambda leaf: leaf.mode.order)))]

        chosen_at = None
        for destination, leaves in groups:
            nest_index = len(nest_rows)
            nest_starts.append(len(leaf_rows))
            nest_obs.append(obs_index)
            row = np.zeros(k)
            if nested:
                for term in active_destination_terms(spec, kind, destination):
                    row[layout[term.coefficient_name]] += term_value(term, obs, destination=destination)
            nest_rows.append(row)
            for leaf in sorted(leaves, key=lambda leaf: leaf.mode.order):
                row = np.zeros(k)
                for term in active_mode_terms(spec, kind, leaf.mode):
                    row[layout[term.coefficient_name]] += term_value(term, obs, leaf)
                if leaf.mode == obs.chosen_mode and (not nested or leaf.destination == obs.chosen_destination):
                    chosen_at = (len(leaf_rows), nest_index)
                leaf_rows.append(row)
                leaf_nest.append(nest_index)
                leaf_obs.append(obs_index)

        if chosen_at is None:
            if require_choice:
                raise LikelihoodError(
                    f"La alternativa elegida no pertenece al conjunto de la observación {obs.id}", obs.id)
            chosen_at = (nest_starts[obs_nest_starts[-1]], obs_nest_starts[-1])
        chosen_leaf.append(chosen_at[0])
        chosen_nest.append(chosen_at[1])

    def matrix(rows) -> np.ndarray:
        return np.vstack(rows) if rows else np.zeros((0, k))

    def index(values) -> np.ndarray:
        return np.asarray(values, dtype=np.intp)

    return ChoiceArrays(
        kind=kind,
        nested=nested,
        scale_index=scale_index,
        x_leaf=matrix(leaf_rows),
        x_nest=matrix(nest_rows),
        x_lambda=matrix(lambda_rows),
        leaf_nest=index(leaf_nest),
        leaf_obs=index(leaf_obs),
        nest_obs=index(nest_obs),
        nest_starts=index(nest_starts),
        obs_nest_starts=index(obs_nest_starts),
        chosen_leaf=index(chosen_leaf),
        chosen_nest=index(chosen_nest),
        observation_ids=tuple(obs.id for obs in observations),
    )


def segment_logsumexp(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """log-sum-exp por segmentos contiguos que empiezan en `starts`."""
    if values.size == 0:
        return np.zeros(0)
    peak = np.maximum.reduceat(values, starts)
    counts = np.diff(np.append(starts, values.size))
    shifted = np.exp(values - np.repeat(peak, counts))
    return peak + np.log(np.add.reduceat(shifted, starts))


@dataclass(frozen=True)
class ArrayEvaluation:
    loglik: float
    gradient: Optional[np.ndarray]
    obs_loglik: np.ndarray
    leaf_probs: np.ndarray


def evaluate_arrays(arrays: ChoiceArrays, theta: np.ndarray, with_gradient: bool = True) -> ArrayEvaluation:
    """
    Log-verosimilitud y gradiente analítico de un bloque.

    Con a = V/λ, Γ_d = LSE(a), W_d = C_d + λΓ_d, el aporte de cada
    observación es ℓ = a_c − Γ_d* + W_d* − LSE(W). La regla de la cadena
    atraviesa el enlace logístico de λ y la transformación log(μ).
    """
    theta = np.asarray(theta, dtype=float)
    k = theta.size
    n = arrays.n_observations
    if n == 0:
        return ArrayEvaluation(0.0, np.zeros(k) if with_gradient else None, np.zeros(0), np.zeros(0))

    mu = 1.0
    if arrays.scale_index is not None:
        log_scale = float(theta[arrays.scale_index])
        if not log_scale <= MAX_LOG_SCALE:
            raise LikelihoodError(f"log(μ) = {log_scale:.6g} desborda la escala")
        mu = math.exp(log_scale)
    with np.errstate(over="ignore", invalid="ignore"):
        v = mu * (arrays.x_leaf @ theta)
        c = mu * (arrays.x_nest @ theta)
    if arrays.nested:
        raw = expit(arrays.x_lambda @ theta)
        lam = np.clip(raw, LAMBDA_FLOOR, LAMBDA_CEILING)
        # Derivada nula donde λ queda recortada
        lam_slope = np.where((raw > LAMBDA_FLOOR) & (raw < LAMBDA_CEILING), raw * (1.0 - raw), 0.0)
    else:
        lam = np.ones(n)

    lam_leaf = lam[arrays.leaf_obs]
    lam_nest = lam[arrays.nest_obs]
    a = v / lam_leaf
    gamma = segment_logsumexp(a, arrays.nest_starts)
    w = c + lam_nest * gamma
    inclusive = segment_logsumexp(w, arrays.obs_nest_starts)

    obs_ll = a[arrays.chosen_leaf] - gamma[arrays.chosen_nest] + w[arrays.chosen_nest] - inclusive
    if not np.all(np.isfinite(obs_ll)):
        bad = int(np.flatnonzero(~np.isfinite(obs_ll))[0])
        raise LikelihoodError(
            f"Probabilidad nula o no finita para la alternativa elegida (observación {arrays.observation_ids[bad]})",
            arrays.observation_ids[bad])

    q = np.exp(a - gamma[arrays.leaf_nest])
    p_nest = np.exp(w - inclusive[arrays.nest_obs])
    leaf_probs = q * p_nest[arrays.leaf_nest]
    loglik = float(np.sum(obs_ll))
    if not with_gradient:
        return ArrayEvaluation(loglik, None, obs_ll, leaf_probs)

    in_chosen_nest = arrays.leaf_nest == arrays.chosen_nest[arrays.leaf_obs]
    weight = (lam_leaf - 1.0) * q * in_chosen_nest - lam_leaf * leaf_probs
    weight[arrays.chosen_leaf] += 1.0
    nest_weight = -p_nest
    nest_weight[arrays.chosen_nest] += 1.0

    leaf_weight = weight / lam_leaf
    grad = mu * (leaf_weight @ arrays.x_leaf + nest_weight @ arrays.x_nest)
    if arrays.nested:
        d_lam = (np.bincount(arrays.nest_obs, weights=nest_weight * gamma, minlength=n)
                 - np.bincount(arrays.leaf_obs, weights=leaf_weight * v / lam_leaf, minlength=n))
        grad = grad + (d_lam * lam_slope) @ arrays.x_lambda
    if arrays.scale_index is not None:
        grad[arrays.scale_index] += leaf_weight @ v + nest_weight @ c

    if not np.all(np.isfinite(grad)):
        raise LikelihoodError("Gradiente no finito")
    return ArrayEvaluation(loglik, grad, obs_ll, leaf_probs)


def observation_loglik(observation: ChoiceObservation, params: ParameterVector, spec: ModelSpec,
                       kind: Optional[DatasetKind] = None) -> float:
    arrays = compile_observations([observation], spec, kind or observation.kind)
    return evaluate_arrays(arrays, coerce_parameters(params, spec).values, with_gradient=False).loglik


def with_interactions(covariates: Mapping[str, float], spec: ModelSpec) -> Dict[str, float]:
    """Agrega a las covariables los productos declarados `a*b` de la especificación."""
    enriched = dict(covariates)
    products = [c.factors for c in spec.lambda_covariates if len(c.factors) > 1]
    products += [t.factors for t in spec.mode_terms + spec.destination_terms
                 if t.source is AttributeSource.INTERACTION and len(t.factors) > 1]
    for factors in products:
        if all(f in enriched for f in factors):
            enriched["*".join(factors)] = float(np.prod([enriched[f] for f in factors]))
    return enriched
