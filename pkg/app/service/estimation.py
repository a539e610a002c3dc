# app/service/estimation.py

"""
Estimación conjunta RP+SP por máxima verosimilitud
==================================================

Este módulo arma la log-verosimilitud conjunta ln L = ln L_RP + ln L_SP, su
gradiente analítico, el optimizador cuasi-Newton, el Hessiano numérico para
los errores estándar, los estadísticos de ajuste (LL0, LL1, ρ, ρ ajustado) y
el valor del tiempo.

Características principales:
- Evaluación por bloques de observaciones en un pool de hilos
- Reducción en orden fijo de bloques para resultados reproducibles bit a bit
- L-BFGS-B con parada por norma máxima del gradiente o mejora relativa de LL
- Refinamiento de Newton con Hessiano numérico hasta la tolerancia del gradiente
- Logging estructurado con el ID de ejecución

Ejemplo de uso:
    >>> from app.service.estimation import estimate
    >>> result = estimate(rp, sp, spec)
    >>> print(f"LL1={result.ll1:.2f} rho={result.rho:.4f} convergió={result.converged}")
"""

import math
import time
import uuid
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize, stats

from app import config
from app.errors import (
    EstimationError,
    LikelihoodError,
    ParameterError,
    SingularHessianError,
    StartPointError,
)
from app.models.choice_model import (
    AttributeSource,
    DatasetKind,
    ModelSpec,
    ParameterVector,
)
from app.models.results import EstimationControls, EstimationResult, significance_code
from app.models.survey import ChoiceDataset, RPDataset, SPDataset
from app.service.nested_logit import ChoiceArrays, compile_observations, evaluate_arrays
from app.service.parameters import coerce_parameters, zero_parameters
from app.utils.logger import StructuredLogger, get_logger

logger = get_logger(__name__)

VOT_UNITS_PER_MIL = 1e6
TIME_ATTRIBUTES = ("in_vehicle_time", "access_egress_time")
COST_ATTRIBUTE = "travel_cost"
# Búsqueda lineal del refinamiento de Newton
NEWTON_MIN_STEP = 1e-4
NEWTON_LL_NOISE = 1e-12

__all__ = [
    "LikelihoodEvaluator",
    "FitStats",
    "loglik_rp",
    "loglik_sp",
    "loglik_joint",
    "gradient",
    "estimate",
    "fit_stats",
    "standard_errors",
    "value_of_time",
    "significance_code",
    "gradient_check",
    "newton_refine",
]


class LikelihoodEvaluator:
    """
    Evaluador por bloques de la log-verosimilitud conjunta y su gradiente.

    Las observaciones RP y SP se compilan una sola vez en bloques de
    `chunk_size` observaciones. Cada evaluación reparte los bloques en un pool
    de `threads` hilos; en modo determinista las contribuciones se suman en el
    orden de los bloques, por lo que el resultado no depende del número de
    hilos.

    Args:
        rp (RPDataset, optional): Datos de preferencias reveladas.
        sp (SPDataset, optional): Datos de preferencias declaradas.
        spec (ModelSpec): Especificación del modelo.
        threads (int): Hilos de evaluación.
        chunk_size (int): Observaciones por bloque.
        deterministic (bool): Reducción en orden fijo.

    Example:
        >>> with LikelihoodEvaluator(rp, sp, spec, threads=4) as evaluator:
        ...     ll, grad = evaluator.evaluate(theta)
    """

    def __init__(self, rp: Optional[ChoiceDataset], sp: Optional[ChoiceDataset], spec: ModelSpec,
                 threads: int = config.THREADS, chunk_size: int = config.CHUNK_OBSERVATIONS,
                 deterministic: bool = config.DETERMINISTIC):
        if threads < 1 or chunk_size < 1:
            raise ValueError("threads y chunk_size deben ser al menos 1")
        self.spec = spec
        self.layout = spec.parameter_layout()
        self.threads = threads
        self.deterministic = deterministic
        self.chunks: List[ChoiceArrays] = []
        for dataset, kind in ((rp, DatasetKind.RP), (sp, DatasetKind.SP)):
            if dataset is None:
                continue
            observations = list(dataset.observations)
            for start in range(0, len(observations), chunk_size):
                self.chunks.append(compile_observations(observations[start:start + chunk_size], spec, kind))
        self._executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    @property
    def k(self) -> int:
        return len(self.layout)

    def evaluate(self, theta: Sequence[float], with_gradient: bool = True) -> Tuple[float, Optional[np.ndarray]]:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.k:
            raise ParameterError(f"Vector de longitud {theta.size}; se esperaban {self.k}")

        def run(chunk: ChoiceArrays):
            return evaluate_arrays(chunk, theta, with_gradient)

        if self._executor is None:
            evaluations = [run(chunk) for chunk in self.chunks]
        elif self.deterministic:
            evaluations = list(self._executor.map(run, self.chunks))
        else:
            futures = [self._executor.submit(run, chunk) for chunk in self.chunks]
            evaluations = [future.result() for future in as_completed(futures)]

        total = 0.0
        grad = np.zeros(self.k) if with_gradient else None
        for evaluation in evaluations:
            total += evaluation.loglik
            if with_gradient:
                grad += evaluation.gradient
        return total, grad

    def observation_logliks(self, theta: Sequence[float]) -> np.ndarray:
        """ln P de la alternativa elegida por observación: primero RP y luego SP, en orden de archivo."""
        theta = np.asarray(theta, dtype=float)
        parts = [evaluate_arrays(chunk, theta, False).obs_loglik for chunk in self.chunks]
        return np.concatenate(parts) if parts else np.zeros(0)

    def column_scales(self) -> np.ndarray:
        """Máximo |x| de cada parámetro en las matrices de diseño (hojas, nidos y enlace λ)."""
        scales = np.zeros(self.k)
        for chunk in self.chunks:
            for matrix in (chunk.x_leaf, chunk.x_nest, chunk.x_lambda):
                if matrix.size:
                    scales = np.maximum(scales, np.max(np.abs(matrix), axis=0))
        return scales

    def loglik(self, theta: Sequence[float]) -> float:
        return self.evaluate(theta, with_gradient=False)[0]

    def gradient(self, theta: Sequence[float]) -> np.ndarray:
        return self.evaluate(theta, with_gradient=True)[1]


def _evaluator(rp, sp, spec, threads=None, deterministic=None) -> LikelihoodEvaluator:
    return LikelihoodEvaluator(rp, sp, spec,
                               threads=threads or config.THREADS,
                               deterministic=config.DETERMINISTIC if deterministic is None else deterministic)


def loglik_rp(dataset: RPDataset, params, spec: ModelSpec, threads: Optional[int] = None) -> float:
    """
    Log-verosimilitud RP: Σ_n [ln P_{m|d} + ln P_d] de las alternativas elegidas.

    Raises:
        LikelihoodError: Si una alternativa elegida tiene probabilidad nula; lleva
            el id de la observación.
    """
    theta = coerce_parameters(params, spec).values
    with _evaluator(dataset, None, spec, threads) as evaluator:
        return evaluator.loglik(theta)


def loglik_sp(dataset: SPDataset, params, spec: ModelSpec, threads: Optional[int] = None) -> float:
    """Log-verosimilitud SP: MNL de modos (negocio) o anidada destino → modo (no laboral)."""
    theta = coerce_parameters(params, spec).values
    with _evaluator(None, dataset, spec, threads) as evaluator:
        return evaluator.loglik(theta)


def loglik_joint(rp: Optional[RPDataset], sp: Optional[SPDataset], params, spec: ModelSpec,
                 threads: Optional[int] = None) -> float:
    theta = coerce_parameters(params, spec).values
    with _evaluator(rp, sp, spec, threads) as evaluator:
        return evaluator.loglik(theta)


def gradient(rp: Optional[RPDataset], sp: Optional[SPDataset], params, spec: ModelSpec,
             threads: Optional[int] = None) -> np.ndarray:
    """Gradiente analítico de `loglik_joint` respecto del vector libre (largo K)."""
    theta = coerce_parameters(params, spec).values
    with _evaluator(rp, sp, spec, threads) as evaluator:
        return evaluator.gradient(theta)


@dataclass(frozen=True)
class FitStats:
    ll0: float
    rho: float
    rho_adj: float


def fit_stats(ll1: float, rp: Optional[RPDataset], sp: Optional[SPDataset], k: int,
              spec: Optional[ModelSpec] = None, ll0: Optional[float] = None) -> FitStats:
    """
    Estadísticos de ajuste: ρ = 1 − LL1/LL0 y ρ ajustado = 1 − (LL1 − K)/LL0.

    LL0 es la log-verosimilitud en el modelo nulo (todos los parámetros libres
    en 0: μ = 1 y λ = 0.5). Si se entrega `ll0` se usa directamente.

    Raises:
        ValueError: Si K es negativo.
        EstimationError: Si LL0 es 0.
    """
    if k < 0:
        raise ValueError("K debe ser ≥ 0")
    if ll0 is None:
        if spec is None:
            raise EstimationError("Se requiere la especificación para calcular LL0")
        ll0 = loglik_joint(rp, sp, zero_parameters(spec), spec)
    if ll0 == 0:
        raise EstimationError("LL0 = 0: no se pueden calcular los índices ρ")
    return FitStats(ll0=ll0, rho=1.0 - ll1 / ll0, rho_adj=1.0 - (ll1 - k) / ll0)


def value_of_time(params: Mapping[str, float], time_coef: str, cost_coef: str) -> float:
    """
    Valor del tiempo en VND por hora: (β_tiempo / β_costo) × 10⁶.

    El costo se mide en Mil VND (10⁶ VND) y el tiempo en horas.

    Raises:
        ParameterError: Si el coeficiente de costo es cero o falta algún nombre.
    """
    missing = [name for name in (time_coef, cost_coef) if name not in params]
    if missing:
        raise ParameterError(f"Coeficientes ausentes: {', '.join(missing)}", missing)
    if params[cost_coef] == 0:
        raise ParameterError(f"El coeficiente de costo '{cost_coef}' es cero", [cost_coef])
    return params[time_coef] / params[cost_coef] * VOT_UNITS_PER_MIL


def _generic_coefficient(spec: ModelSpec, attribute: str) -> Optional[str]:
    for term in spec.mode_terms:
        if (term.source is AttributeSource.ALTERNATIVE_ATTRIBUTE and term.factors == (attribute,)
                and not term.applies_to):
            return term.coefficient_name
    return None


def vot_rows(spec: ModelSpec, params: Mapping[str, float]) -> Dict[str, float]:
    """VOT de cada atributo de tiempo genérico presente en la especificación."""
    cost = _generic_coefficient(spec, COST_ATTRIBUTE)
    rows: Dict[str, float] = {}
    if cost is None or params.get(cost, 0.0) == 0:
        return rows
    for attribute in TIME_ATTRIBUTES:
        coefficient = _generic_coefficient(spec, attribute)
        if coefficient is not None:
            rows[attribute] = value_of_time(params, coefficient, cost)
    return rows


def numerical_hessian(evaluator: LikelihoodEvaluator, theta: np.ndarray,
                      step: float = config.HESSIAN_STEP) -> np.ndarray:
    """Hessiano por diferencias centrales del gradiente analítico, simetrizado."""
    k = theta.size
    hessian = np.zeros((k, k))
    for j in range(k):
        h = step * max(1.0, abs(theta[j]))
        forward = theta.copy()
        backward = theta.copy()
        forward[j] += h
        backward[j] -= h
        hessian[:, j] = (evaluator.gradient(forward) - evaluator.gradient(backward)) / (2.0 * h)
    return 0.5 * (hessian + hessian.T)


@dataclass(frozen=True)
class NewtonRefinement:
    theta: np.ndarray
    loglik: float
    gradient: np.ndarray
    steps: int


def newton_refine(evaluator: LikelihoodEvaluator, theta: np.ndarray, loglik: float, grad: np.ndarray,
                  tolerance: float, max_steps: int = config.NEWTON_STEPS,
                  step: float = config.HESSIAN_STEP) -> NewtonRefinement:
    """
    Pasos de Newton con el Hessiano numérico y búsqueda lineal hacia atrás.

    Se detiene cuando la norma del gradiente baja de `tolerance`, cuando el
    Hessiano no es definido negativo o cuando ningún paso mejora el punto.
    Un paso se acepta si sube LL, o si deja LL igual dentro del ruido de
    redondeo y reduce la norma del gradiente.
    """
    theta = np.asarray(theta, dtype=float).copy()
    steps = 0
    while steps < max_steps and np.max(np.abs(grad)) >= tolerance:
        try:
            hessian = numerical_hessian(evaluator, theta, step)
            factor = linalg.cho_factor(-hessian)
        except (LikelihoodError, ArithmeticError, ValueError, linalg.LinAlgError) as e:
            logger.debug(f"Refinamiento de Newton detenido: {e}")
            break
        direction = linalg.cho_solve(factor, grad)
        noise = NEWTON_LL_NOISE * max(1.0, abs(loglik))
        norm = np.max(np.abs(grad))
        accepted = None
        t = 1.0
        while accepted is None and t >= NEWTON_MIN_STEP:
            candidate = theta + t * direction
            t *= 0.5
            try:
                ll_candidate, grad_candidate = evaluator.evaluate(candidate)
            except (LikelihoodError, ArithmeticError):
                continue
            if ll_candidate > loglik or (ll_candidate >= loglik - noise
                                         and np.max(np.abs(grad_candidate)) < norm):
                accepted = (candidate, ll_candidate, grad_candidate)
        if accepted is None:
            break
        theta, loglik, grad = accepted
        steps += 1
    return NewtonRefinement(theta, loglik, grad, steps)


def _collinear_pairs(information: np.ndarray, names: Sequence[str],
                     threshold: float = 0.99) -> List[Tuple[str, str]]:
    diagonal = np.sqrt(np.abs(np.diag(information)))
    pairs = [(names[i], names[i]) for i in range(len(names)) if diagonal[i] == 0]
    safe = np.where(diagonal > 0, diagonal, 1.0)
    correlation = information / np.outer(safe, safe)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            if diagonal[i] > 0 and diagonal[j] > 0 and abs(correlation[i, j]) >= threshold:
                pairs.append((names[i], names[j]))
    if not pairs and len(names) > 1:
        _, vectors = linalg.eigh(information)
        loadings = np.abs(vectors[:, 0])
        first, second = np.argsort(-loadings)[:2]
        pairs.append((names[first], names[second]))
    return pairs


def standard_errors(rp: Optional[RPDataset], sp: Optional[SPDataset], params_hat, spec: ModelSpec,
                    evaluator: Optional[LikelihoodEvaluator] = None,
                    step: float = config.HESSIAN_STEP) -> np.ndarray:
    """
    Errores estándar: raíz de la diagonal de la inversa del Hessiano negativo.

    Raises:
        SingularHessianError: Si el Hessiano es singular o no definido
            negativo; `pairs` lista los parámetros casi colineales.
    """
    vector = coerce_parameters(params_hat, spec)
    names = vector.names
    own = evaluator is None
    evaluator = evaluator or _evaluator(rp, sp, spec)
    try:
        information = -numerical_hessian(evaluator, vector.values.copy(), step)
    finally:
        if own:
            evaluator.close()

    if information.size == 0:
        return np.zeros(0)
    eigenvalues = linalg.eigvalsh(information)
    scale = max(float(np.max(np.abs(eigenvalues))), 1e-300)
    if eigenvalues[0] <= 1e-10 * scale:
        pairs = _collinear_pairs(information, names)
        raise SingularHessianError(
            "Hessiano singular; parámetros casi colineales: "
            + ", ".join(f"{a}~{b}" for a, b in pairs), pairs)
    covariance = linalg.inv(information)
    variances = np.diag(covariance)
    if np.any(variances <= 0):
        pairs = _collinear_pairs(information, names)
        raise SingularHessianError("Varianzas no positivas en la inversa del Hessiano", pairs)
    return np.sqrt(variances)


def gradient_check(evaluator: LikelihoodEvaluator, theta: Sequence[float], step: float = 1e-6) -> float:
    """
    Máximo error relativo entre el gradiente analítico y diferencias centrales.

    El paso es relativo (step·max(1, |θ_j|)) y el error se normaliza por
    max(1, |g_analítico|, |g_numérico|).
    """
    theta = np.asarray(theta, dtype=float)
    analytic = evaluator.gradient(theta)
    worst = 0.0
    for j in range(theta.size):
        h = step * max(1.0, abs(theta[j]))
        forward = theta.copy()
        backward = theta.copy()
        forward[j] += h
        backward[j] -= h
        numeric = (evaluator.loglik(forward) - evaluator.loglik(backward)) / (2.0 * h)
        error = abs(analytic[j] - numeric) / max(1.0, abs(analytic[j]), abs(numeric))
        worst = max(worst, error)
    return worst


def estimate(rp: Optional[RPDataset], sp: Optional[SPDataset], spec: ModelSpec,
             start: Optional[ParameterVector] = None, controls: Optional[EstimationControls] = None,
             execution_id: Optional[str] = None) -> EstimationResult:
    """
    Maximiza la log-verosimilitud conjunta con L-BFGS-B.

    L-BFGS-B se detiene por la norma máxima del gradiente o por una mejora
    relativa de LL menor que `relative_ll_tolerance`; si el gradiente sigue
    sobre la tolerancia se refina con pasos de Newton. Solo se declara
    convergencia con la norma del gradiente bajo la tolerancia. Agotar las
    iteraciones o no alcanzar la tolerancia produce `converged=False`, nunca
    una excepción.

    Args:
        rp: Datos RP (puede ser None o vacío).
        sp: Datos SP (puede ser None o vacío).
        spec (ModelSpec): Especificación del modelo.
        start (ParameterVector, optional): Punto inicial; por defecto ceros.
        controls (EstimationControls, optional): Tolerancias, iteraciones e hilos.
        execution_id (str, optional): ID para el logging estructurado.

    Returns:
        EstimationResult: Estimaciones, errores estándar, ajuste, VOT y diagnóstico.

    Raises:
        StartPointError: Si el objetivo no es finito en el punto inicial.
    """
    controls = controls or EstimationControls()
    execution_id = execution_id or str(uuid.uuid4())[:8]
    slog = StructuredLogger(logger, execution_id)
    start = coerce_parameters(start, spec) if start is not None else zero_parameters(spec)
    names = start.names
    notes: List[str] = []

    evaluator = LikelihoodEvaluator(rp, sp, spec, threads=controls.threads,
                                    chunk_size=controls.chunk_size, deterministic=controls.deterministic)
    try:
        try:
            ll_start, grad_start = evaluator.evaluate(start.values)
        except (LikelihoodError, ArithmeticError) as e:
            raise StartPointError(f"Objetivo no finito en el punto inicial: {e}") from e
        if not math.isfinite(ll_start) or not np.all(np.isfinite(grad_start)):
            raise StartPointError("Objetivo no finito en el punto inicial")

        slog.info("Estimación iniciada",
                  proposito=spec.purpose.value,
                  parametros=len(names),
                  observaciones_rp=0 if rp is None else rp.n_observations,
                  observaciones_sp=0 if sp is None else sp.n_observations,
                  ll_inicial=ll_start,
                  hilos=controls.threads)

        def objective(theta):
            try:
                ll, grad = evaluator.evaluate(theta)
            except (LikelihoodError, ArithmeticError) as e:
                logger.debug(f"Punto de prueba no finito: {e}")
                return np.inf, np.zeros_like(theta)
            return -ll, -grad

        started = time.time()
        if len(names) == 0:
            theta_hat, iterations, success, message = start.values.copy(), 0, True, "sin parámetros libres"
        else:
            solution = optimize.minimize(
                objective, start.values.copy(), jac=True, method="L-BFGS-B",
                options={
                    "maxiter": controls.max_iterations,
                    "gtol": controls.gradient_tolerance,
                    "ftol": controls.relative_ll_tolerance,
                    "maxfun": max(15000, 20 * controls.max_iterations),
                },
            )
            theta_hat, iterations = solution.x, int(solution.nit)
            success = bool(solution.success)
            message = str(solution.message)

        try:
            ll1, grad_hat = evaluator.evaluate(theta_hat)
        except (LikelihoodError, ArithmeticError):
            ll1, grad_hat = -math.inf, grad_start
        if ll1 < ll_start:
            theta_hat, ll1, grad_hat = start.values.copy(), ll_start, grad_start
            notes.append("el optimizador no mejoró el punto inicial; se conserva el inicio")

        exhausted = iterations >= controls.max_iterations
        newton_steps = 0
        if not exhausted and grad_hat.size and np.max(np.abs(grad_hat)) >= controls.gradient_tolerance:
            refined = newton_refine(evaluator, theta_hat, ll1, grad_hat,
                                    controls.gradient_tolerance, controls.newton_steps)
            theta_hat, ll1, grad_hat, newton_steps = refined.theta, refined.loglik, refined.gradient, refined.steps

        gradient_norm = float(np.max(np.abs(grad_hat))) if grad_hat.size else 0.0
        converged = gradient_norm < controls.gradient_tolerance
        if converged:
            reason = "gradient"
        elif exhausted:
            reason = "max_iterations"
        else:
            reason = "objective" if success else "failure"
            notes.append(f"norma del gradiente {gradient_norm:.3g} sobre la tolerancia "
                         f"{controls.gradient_tolerance:.3g} tras {newton_steps} paso(s) de Newton")

        estimates = ParameterVector(theta_hat, start.layout)
        k = len(names)
        std_errors = np.full(k, math.nan)
        if controls.compute_standard_errors and k:
            try:
                std_errors = standard_errors(rp, sp, estimates, spec, evaluator=evaluator)
            except SingularHessianError as e:
                notes.append(str(e))
                slog.warning("Hessiano singular", pares=[list(p) for p in e.pairs])
            except (LikelihoodError, ArithmeticError, ValueError, linalg.LinAlgError) as e:
                notes.append(f"errores estándar no calculables: {e}")
                slog.warning("Errores estándar no calculables", mensaje_error=str(e))
        ll0 = evaluator.loglik(np.zeros(k))
    finally:
        evaluator.close()

    z = np.divide(theta_hat, std_errors, out=np.full(k, math.nan), where=std_errors > 0)
    p_values = np.where(np.isfinite(z), 2.0 * stats.norm.sf(np.abs(z)), math.nan)
    stats_fit = fit_stats(ll1, rp, sp, k, ll0=ll0)
    named = estimates.as_dict()

    result = EstimationResult(
        estimates=estimates,
        std_errors=std_errors,
        t_stats=z,
        p_values=p_values,
        significance=tuple(significance_code(p) for p in p_values),
        ll0=stats_fit.ll0,
        ll1=ll1,
        rho=stats_fit.rho,
        rho_adj=stats_fit.rho_adj,
        vot=vot_rows(spec, named),
        iterations=iterations,
        converged=converged,
        gradient_norm=gradient_norm,
        convergence_reason=reason,
        optimizer_message=message,
        n_rp=0 if rp is None else rp.n_observations,
        n_sp=0 if sp is None else sp.n_observations,
        spec=spec,
        notes=tuple(notes),
    )

    log = slog.info if converged else slog.warning
    log("Estimación finalizada",
        convergio=converged,
        razon=reason,
        iteraciones=iterations,
        pasos_newton=newton_steps,
        ll1=ll1,
        rho=result.rho,
        norma_gradiente=gradient_norm,
        segundos_optimizacion=round(time.time() - started, 3))
    return result
