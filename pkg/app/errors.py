"""Jerarquía de excepciones del modelo de demanda interurbana."""

from typing import Optional, Sequence, Tuple


class DemandModelError(Exception):
    """Error base de la aplicación."""


class ConfigurationError(DemandModelError, ValueError):
    """Configuración del modelo inválida o inconsistente."""


class ChoiceSetError(ConfigurationError):
    """Una regla de distancia dejó vacío el conjunto de elección."""

    def __init__(self, message: str, rule: str):
        super().__init__(message)
        self.rule = rule


class SpecError(ConfigurationError):
    """Archivo de especificación mal formado."""


class ParameterError(DemandModelError, ValueError):
    """Vector de parámetros incompleto o incompatible con la especificación."""

    def __init__(self, message: str, offenders: Sequence[str] = ()):
        super().__init__(message)
        self.offenders = tuple(offenders)


class LoadError(DemandModelError, ValueError):
    """Error al cargar un archivo de datos, con la fila del archivo si se conoce."""

    def __init__(self, message: str, row: Optional[int] = None, path: Optional[str] = None):
        location = f" (fila {row})" if row is not None else ""
        super().__init__(f"{message}{location}")
        self.row = row
        self.path = path


class ScenarioError(DemandModelError, ValueError):
    """Escenario incompleto o incompatible con el modelo."""


class UtilityError(DemandModelError, ValueError):
    """Falta un atributo requerido por un término de utilidad."""


class LikelihoodError(DemandModelError):
    """Probabilidad nula o no finita para una alternativa elegida."""

    def __init__(self, message: str, observation_id: Optional[str] = None):
        super().__init__(message)
        self.observation_id = observation_id


class EstimationError(DemandModelError):
    """La estimación no puede arrancar o producir un resultado."""


class StartPointError(EstimationError, ValueError):
    """El objetivo no es finito en el punto inicial entregado."""


class SingularHessianError(EstimationError):
    """Hessiano singular; incluye los pares de parámetros casi colineales."""

    def __init__(self, message: str, pairs: Sequence[Tuple[str, str]] = ()):
        super().__init__(message)
        self.pairs = tuple(pairs)


class CollinearityError(EstimationError, ValueError):
    """Matriz de diseño sin rango completo; nombra las columnas colineales."""

    def __init__(self, message: str, columns: Sequence[str] = ()):
        super().__init__(message)
        self.columns = tuple(columns)
