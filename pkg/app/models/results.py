# app/models/results.py

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from app import config
from app.models.choice_model import LOG_SCALE, ModelSpec, ParameterVector


@dataclass(frozen=True)
class EstimationControls:
    """
    Controles del optimizador.

    Attributes:
        gradient_tolerance: Norma máxima del gradiente para declarar convergencia.
        relative_ll_tolerance: Mejora relativa mínima de la log-verosimilitud.
        max_iterations: Tope de iteraciones del cuasi-Newton.
        threads: Hilos del evaluador de verosimilitud.
        deterministic: Reducción en orden fijo de bloques (bit a bit reproducible).
        chunk_size: Observaciones por bloque de evaluación.
        newton_steps: Pasos de Newton para refinar el óptimo del cuasi-Newton.
        compute_standard_errors: Calcula el Hessiano numérico al terminar.
    """
    gradient_tolerance: float = config.GRADIENT_TOLERANCE
    relative_ll_tolerance: float = config.RELATIVE_LL_TOLERANCE
    max_iterations: int = config.MAX_ITERATIONS
    threads: int = config.THREADS
    deterministic: bool = config.DETERMINISTIC
    chunk_size: int = config.CHUNK_OBSERVATIONS
    newton_steps: int = config.NEWTON_STEPS
    compute_standard_errors: bool = True

    def __post_init__(self):
        if self.gradient_tolerance <= 0 or self.relative_ll_tolerance <= 0:
            raise ValueError("Las tolerancias deben ser positivas")
        if self.max_iterations < 1:
            raise ValueError("max_iterations debe ser al menos 1")
        if self.threads < 1 or self.chunk_size < 1:
            raise ValueError("threads y chunk_size deben ser al menos 1")
        if self.newton_steps < 0:
            raise ValueError("newton_steps no puede ser negativo")


REGRESSION_KINDS = ("linear", "negbin")

# Códigos de significancia: 0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1
SIGNIFICANCE_THRESHOLDS = ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, "."))


def significance_code(p_value: Optional[float]) -> str:
    if p_value is None or not math.isfinite(p_value):
        return ""
    for threshold, code in SIGNIFICANCE_THRESHOLDS:
        if p_value < threshold:
            return code
    return " "


def _float_or_none(value: float) -> Optional[float]:
    return None if value is None or not math.isfinite(value) else float(value)


def _array_from(values) -> np.ndarray:
    return np.array([math.nan if v is None else float(v) for v in values], dtype=float)


@dataclass(frozen=True, eq=False)
class EstimationResult:
    """Resultado completo de una estimación conjunta RP+SP."""
    estimates: ParameterVector
    std_errors: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    significance: Tuple[str, ...]
    ll0: float
    ll1: float
    rho: float
    rho_adj: float
    vot: Mapping[str, float]
    iterations: int
    converged: bool
    gradient_norm: float
    convergence_reason: str
    optimizer_message: str
    n_rp: int
    n_sp: int
    spec: ModelSpec
    notes: Tuple[str, ...] = ()

    @property
    def names(self) -> Tuple[str, ...]:
        return self.estimates.names

    @property
    def k(self) -> int:
        return len(self.estimates)

    @property
    def scale(self) -> float:
        return self.estimates.scale

    @property
    def spec_digest(self) -> str:
        return self.spec.digest

    def to_frame(self):
        """Tabla de estimaciones con el formato de los cuadros de resultados."""
        rows = []
        for index, name in enumerate(self.names):
            rows.append({
                "parametro": name,
                "estimacion": self.estimates.values[index],
                "error_std": self.std_errors[index],
                "z": self.t_stats[index],
                "p": self.p_values[index],
                "signif": self.significance[index],
            })
        if LOG_SCALE in self.estimates.layout:
            rows.append({"parametro": "mu (escala)", "estimacion": self.scale,
                         "error_std": math.nan, "z": math.nan, "p": math.nan, "signif": ""})
        return pd.DataFrame(rows, columns=["parametro", "estimacion", "error_std", "z", "p", "signif"])

    def model_dump(self) -> Dict[str, Any]:
        estimates = []
        for index, name in enumerate(self.names):
            estimates.append({
                "name": name,
                "estimate": float(self.estimates.values[index]),
                "std_error": _float_or_none(self.std_errors[index]),
                "z": _float_or_none(self.t_stats[index]),
                "p_value": _float_or_none(self.p_values[index]),
                "signif": self.significance[index],
            })
        return {
            "estimates": estimates,
            "scale_mu": _float_or_none(self.scale),
            "fit": {
                "ll0": self.ll0,
                "ll1": self.ll1,
                "rho": self.rho,
                "rho_adj": self.rho_adj,
                "k": self.k,
                "n_rp": self.n_rp,
                "n_sp": self.n_sp,
            },
            "vot_vnd_per_hour": dict(self.vot),
            "convergence": {
                "converged": self.converged,
                "iterations": self.iterations,
                "gradient_norm": self.gradient_norm,
                "reason": self.convergence_reason,
                "optimizer_message": self.optimizer_message,
            },
            "notes": list(self.notes),
            "spec": self.spec.model_dump(),
            "spec_digest": self.spec_digest,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EstimationResult":
        entries = data["estimates"]
        layout = {entry["name"]: index for index, entry in enumerate(entries)}
        fit = data["fit"]
        convergence = data["convergence"]
        return cls(
            estimates=ParameterVector(np.array([e["estimate"] for e in entries], dtype=float), layout),
            std_errors=_array_from(e["std_error"] for e in entries),
            t_stats=_array_from(e["z"] for e in entries),
            p_values=_array_from(e["p_value"] for e in entries),
            significance=tuple(e["signif"] for e in entries),
            ll0=float(fit["ll0"]),
            ll1=float(fit["ll1"]),
            rho=float(fit["rho"]),
            rho_adj=float(fit["rho_adj"]),
            vot={k: float(v) for k, v in data.get("vot_vnd_per_hour", {}).items()},
            iterations=int(convergence["iterations"]),
            converged=bool(convergence["converged"]),
            gradient_norm=float(convergence["gradient_norm"]),
            convergence_reason=convergence["reason"],
            optimizer_message=convergence.get("optimizer_message", ""),
            n_rp=int(fit["n_rp"]),
            n_sp=int(fit["n_sp"]),
            spec=ModelSpec.from_dict(data["spec"]),
            notes=tuple(data.get("notes", ())),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EstimationResult):
            return NotImplemented
        return self.model_dump() == other.model_dump()


@dataclass(frozen=True)
class RegressionFit:
    """
    Ajuste de un modelo de generación de viajes.

    Para el modelo lineal se informan r2, adj_r2 y sigma; para el binomial
    negativo theta, su error estándar, 2·loglik y las devianzas. Los
    coeficientes fijados (intercepto nulo) llevan `None` en las columnas
    de inferencia.
    """
    kind: str
    names: Tuple[str, ...]
    coefficients: Mapping[str, float]
    std_errors: Mapping[str, Optional[float]]
    t_values: Mapping[str, Optional[float]]
    p_values: Mapping[str, Optional[float]]
    n: int
    intercept_mode: str = "free"
    theta: Optional[float] = None
    theta_se: Optional[float] = None
    theta_fixed: bool = False
    r2: Optional[float] = None
    adj_r2: Optional[float] = None
    sigma: Optional[float] = None
    two_loglik: Optional[float] = None
    null_deviance: Optional[float] = None
    residual_deviance: Optional[float] = None
    converged: bool = True

    def __post_init__(self):
        if self.kind not in REGRESSION_KINDS:
            raise ValueError(f"Tipo de regresión desconocido: '{self.kind}'")
        if self.theta is not None and not self.theta > 0:
            raise ValueError(f"theta debe ser positivo, se recibió {self.theta}")
        if self.r2 is not None and self.adj_r2 is not None and self.adj_r2 > self.r2 + 1e-12:
            raise ValueError("adj_r2 no puede superar a r2")

    @property
    def covariate_names(self) -> Tuple[str, ...]:
        return tuple(n for n in self.names if n != "intercept")

    def significance(self) -> Dict[str, str]:
        return {name: significance_code(self.p_values.get(name)) for name in self.names}

    def model_dump(self) -> Dict[str, Any]:
        codes = self.significance()
        return {
            "kind": self.kind,
            "intercept_mode": self.intercept_mode,
            "coefficients": [
                {
                    "name": name,
                    "estimate": float(self.coefficients[name]),
                    "std_error": self.std_errors.get(name),
                    "stat": self.t_values.get(name),
                    "p_value": self.p_values.get(name),
                    "signif": codes[name],
                }
                for name in self.names
            ],
            "n": self.n,
            "theta": self.theta,
            "theta_se": self.theta_se,
            "theta_fixed": self.theta_fixed,
            "r2": self.r2,
            "adj_r2": self.adj_r2,
            "sigma": self.sigma,
            "two_loglik": self.two_loglik,
            "null_deviance": self.null_deviance,
            "residual_deviance": self.residual_deviance,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RegressionFit":
        rows = data["coefficients"]
        return cls(
            kind=data["kind"],
            names=tuple(r["name"] for r in rows),
            coefficients={r["name"]: float(r["estimate"]) for r in rows},
            std_errors={r["name"]: r.get("std_error") for r in rows},
            t_values={r["name"]: r.get("stat") for r in rows},
            p_values={r["name"]: r.get("p_value") for r in rows},
            n=int(data["n"]),
            intercept_mode=data.get("intercept_mode", "free"),
            theta=data.get("theta"),
            theta_se=data.get("theta_se"),
            theta_fixed=bool(data.get("theta_fixed", False)),
            r2=data.get("r2"),
            adj_r2=data.get("adj_r2"),
            sigma=data.get("sigma"),
            two_loglik=data.get("two_loglik"),
            null_deviance=data.get("null_deviance"),
            residual_deviance=data.get("residual_deviance"),
            converged=bool(data.get("converged", True)),
        )


@dataclass(frozen=True)
class ParameterRecovery:
    name: str
    true_value: float
    estimate: float
    std_error: float
    passed: bool

    @property
    def bias(self) -> float:
        return self.estimate - self.true_value

    @property
    def z_error(self) -> float:
        if not self.std_error > 0:
            return math.nan
        return self.bias / self.std_error

    def model_dump(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "true_value": self.true_value,
            "estimate": self.estimate,
            "std_error": _float_or_none(self.std_error),
            "bias": self.bias,
            "z_error": _float_or_none(self.z_error),
            "passed": self.passed,
        }


@dataclass(frozen=True)
class RecoveryReport:
    """Informe simular → estimar → comparar."""
    n_persons: int
    seed: int
    parameters: Tuple[ParameterRecovery, ...] = ()
    converged: bool = False
    error: Optional[str] = None
    result: Optional[EstimationResult] = field(default=None, compare=False)

    @property
    def passed(self) -> bool:
        return self.error is None and bool(self.parameters) and all(p.passed for p in self.parameters)

    def get(self, name: str) -> ParameterRecovery:
        for parameter in self.parameters:
            if parameter.name == name:
                return parameter
        raise KeyError(name)

    def model_dump(self) -> Dict[str, Any]:
        return {
            "n_persons": self.n_persons,
            "seed": self.seed,
            "converged": self.converged,
            "passed": self.passed,
            "error": self.error,
            "parameters": [p.model_dump() for p in self.parameters],
        }
