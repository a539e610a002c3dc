# app/service/trip_generation.py

"""
Modelos de generación de viajes: regresión lineal (viajes no laborales) y
binomial negativa NB2 con enlace log (viajes de negocio). Ambos usan la
accesibilidad logsum como covariable.
"""

import math
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import statsmodels.api as sm
from scipy import linalg

from app.errors import CollinearityError, EstimationError, ParameterError
from app.models.results import RegressionFit
from app.models.survey import TripGenRecord
from app.utils.logger import get_logger

logger = get_logger(__name__)

INTERCEPT = "intercept"
INTERCEPT_MODES = ("free", "fixed-zero")


def _design(records: Sequence[TripGenRecord], covariate_names: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    rows = []
    for record in records:
        missing = [name for name in covariate_names if name not in record.covariates]
        if missing:
            raise ParameterError(
                f"La persona {record.person_id} no tiene las covariables: {', '.join(missing)}", missing)
        rows.append([float(record.covariates[name]) for name in covariate_names])
    x = np.asarray(rows, dtype=float).reshape(len(records), len(covariate_names))
    y = np.asarray([record.annual_trip_count for record in records], dtype=float)
    return x, y


def _check_rank(x: np.ndarray, names: Sequence[str]) -> None:
    """Detecta columnas linealmente dependientes con QR con pivoteo."""
    if x.shape[1] == 0:
        return
    _, r, pivots = linalg.qr(x, mode="economic", pivoting=True)
    diagonal = np.abs(np.diag(r))
    tolerance = max(x.shape) * np.finfo(float).eps * (diagonal[0] if diagonal.size else 0.0)
    rank = int(np.sum(diagonal > tolerance))
    if rank < x.shape[1]:
        dependent = [names[i] for i in pivots[rank:]]
        raise CollinearityError(
            f"Matriz de diseño sin rango completo; columnas colineales: {', '.join(dependent)}",
            dependent)


def _named(names: Sequence[str], values) -> Dict[str, Optional[float]]:
    return {name: (None if value is None or not math.isfinite(value) else float(value))
            for name, value in zip(names, values)}


def fit_linear(records: Sequence[TripGenRecord], covariate_names: Sequence[str],
               intercept_mode: str = "free") -> RegressionFit:
    """
    Regresión lineal por mínimos cuadrados ordinarios.

    Con `intercept_mode="fixed-zero"` el intercepto se informa como 0 sin
    inferencia y el R² es el no centrado, como en una regresión por el origen.

    Raises:
        ValueError: Si n no supera el número de covariables o el modo es inválido.
        CollinearityError: Si la matriz de diseño no tiene rango completo.
    """
    if intercept_mode not in INTERCEPT_MODES:
        raise ValueError(f"intercept_mode inválido: '{intercept_mode}'")
    covariate_names = list(covariate_names)
    x, y = _design(records, covariate_names)
    names = list(covariate_names)
    if intercept_mode == "free":
        x = np.column_stack([np.ones(len(y)), x])
        names = [INTERCEPT] + names
    if len(y) <= x.shape[1]:
        raise ValueError(f"Se requieren más observaciones ({len(y)}) que regresores ({x.shape[1]})")
    _check_rank(x, names)

    results = sm.OLS(y, x).fit()
    coefficients = dict(zip(names, (float(v) for v in results.params)))
    std_errors = _named(names, results.bse)
    t_values = _named(names, results.tvalues)
    p_values = _named(names, results.pvalues)
    if intercept_mode == "fixed-zero":
        coefficients = {INTERCEPT: 0.0, **coefficients}
        std_errors = {INTERCEPT: None, **std_errors}
        t_values = {INTERCEPT: None, **t_values}
        p_values = {INTERCEPT: None, **p_values}
        names = [INTERCEPT] + names

    logger.info(f"OLS ajustado: n={len(y)}, R²={results.rsquared:.6f}")
    return RegressionFit(
        kind="linear",
        names=tuple(names),
        coefficients=coefficients,
        std_errors=std_errors,
        t_values=t_values,
        p_values=p_values,
        n=len(y),
        intercept_mode=intercept_mode,
        r2=float(results.rsquared),
        adj_r2=float(results.rsquared_adj),
        sigma=float(math.sqrt(results.scale)),
    )


def fit_negbin(records: Sequence[TripGenRecord], covariate_names: Sequence[str],
               theta: Optional[float] = None, max_iterations: int = 200) -> RegressionFit:
    """
    Regresión binomial negativa NB2: E[Y] = exp(x′δ), Var[Y] = m + m²/θ.

    Con `theta` fijo se ajusta un GLM binomial negativo con α = 1/θ; en otro
    caso θ se estima por máxima verosimilitud junto con δ. Siempre incluye
    intercepto.

    Args:
        records: Registros con el conteo anual de viajes.
        covariate_names: Covariables del predictor lineal.
        theta (float, optional): Dispersión fija.
        max_iterations (int): Tope de iteraciones del optimizador.

    Returns:
        RegressionFit: Coeficientes, θ y su error estándar, 2·loglik y devianzas
            nula y residual. La falta de convergencia queda en `converged`.

    Raises:
        EstimationError: Si todos los conteos son cero.
        ValueError: Si los conteos no son enteros no negativos o faltan observaciones.
    """
    covariate_names = list(covariate_names)
    x, y = _design(records, covariate_names)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("Los conteos deben ser enteros no negativos")
    if len(y) and not np.any(y > 0):
        raise EstimationError("Todos los conteos son cero; la binomial negativa no es estimable")
    if len(y) <= len(covariate_names) + 1:
        raise ValueError(f"Se requieren más de {len(covariate_names) + 1} observaciones, hay {len(y)}")
    if theta is not None and not theta > 0:
        raise ValueError(f"theta debe ser positivo, se recibió {theta}")

    names = [INTERCEPT] + covariate_names
    x = np.column_stack([np.ones(len(y)), x])
    _check_rank(x, names)

    if theta is None:
        results = sm.NegativeBinomial(y, x, loglike_method="nb2").fit(disp=0, maxiter=max_iterations)
        converged = bool(results.mle_retvals.get("converged", True))
        params = np.asarray(results.params)
        alpha = float(params[-1])
        if not alpha > 0:
            raise EstimationError(f"Dispersión estimada no positiva (α={alpha})")
        alpha_se = float(np.asarray(results.bse)[-1])
        theta_hat = 1.0 / alpha
        theta_se = alpha_se / alpha ** 2
        coefficients = params[:-1]
        bse, zvalues, pvalues = (np.asarray(v)[:-1] for v in (results.bse, results.tvalues, results.pvalues))
        loglik = float(results.llf)
        deviance_fit = sm.GLM(y, x, family=sm.families.NegativeBinomial(alpha=alpha)).fit(start_params=coefficients)
    else:
        theta_hat, theta_se = float(theta), None
        deviance_fit = sm.GLM(y, x, family=sm.families.NegativeBinomial(alpha=1.0 / theta)).fit(
            maxiter=max_iterations)
        converged = bool(getattr(deviance_fit, "converged", True))
        coefficients = np.asarray(deviance_fit.params)
        bse, zvalues, pvalues = (np.asarray(v) for v in (deviance_fit.bse, deviance_fit.tvalues,
                                                         deviance_fit.pvalues))
        loglik = float(deviance_fit.llf)

    if not converged:
        logger.warning(f"La binomial negativa no convergió en {max_iterations} iteraciones")
    logger.info(f"Binomial negativa ajustada: n={len(y)}, θ={theta_hat:.4f}, 2·loglik={2 * loglik:.4f}")
    return RegressionFit(
        kind="negbin",
        names=tuple(names),
        coefficients=dict(zip(names, (float(v) for v in coefficients))),
        std_errors=_named(names, bse),
        t_values=_named(names, zvalues),
        p_values=_named(names, pvalues),
        n=len(y),
        theta=theta_hat,
        theta_se=theta_se,
        theta_fixed=theta is not None,
        two_loglik=2.0 * loglik,
        null_deviance=float(deviance_fit.null_deviance),
        residual_deviance=float(deviance_fit.deviance),
        converged=converged,
    )


def linear_predictor(fit: RegressionFit, covariates: Mapping[str, float]) -> float:
    missing = [name for name in fit.covariate_names if name not in covariates]
    if missing:
        raise ParameterError(f"Faltan covariables para la predicción: {', '.join(missing)}", missing)
    value = fit.coefficients.get(INTERCEPT, 0.0)
    for name in fit.covariate_names:
        value += fit.coefficients[name] * float(covariates[name])
    return value


def predict_trips(fit: RegressionFit, covariates: Mapping[str, float]) -> float:
    """Viajes esperados: x′δ (lineal, sin recorte) o exp(x′δ) (binomial negativa)."""
    eta = linear_predictor(fit, covariates)
    return math.exp(eta) if fit.kind == "negbin" else eta


def predict_trips_for_demand(fit: RegressionFit, covariates: Mapping[str, float]) -> Tuple[float, bool]:
    """Predicción para pronóstico: la lineal se recorta en 0 y se informa si hubo recorte."""
    value = predict_trips(fit, covariates)
    if value < 0:
        return 0.0, True
    return value, False
