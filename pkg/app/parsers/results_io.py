# app/parsers/results_io.py

"""
Documentos de resultados: estimaciones, ajustes de generación, tablas de
demanda y reportes de viajes inducidos.

Los documentos JSON se escriben con claves ordenadas e indentación fija, de
modo que el mismo resultado produce siempre los mismos bytes. Cualquier
destino `s3://bucket/clave` se publica en S3.
"""

import io
import json
from typing import Any, Dict, Mapping, Union

import pandas as pd

from app.errors import LoadError
from app.models.choice_model import ModelSpec, ParameterVector, Purpose
from app.models.results import EstimationResult, RegressionFit
from app.models.scenario import DemandTable, InducedTravelReport
from app.service.parameters import pack_parameters
from app.utils.logger import get_logger
from app.utils.uploader import publish_document

logger = get_logger(__name__)

FLOAT_FORMAT = "%.12g"


def dumps_document(document: Mapping[str, Any]) -> str:
    return json.dumps(document, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def _read_document(path: str) -> Dict[str, Any]:
    if not path:
        raise ValueError("Ruta del documento no puede ser None")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise LoadError(f"No existe el documento {path}", path=path) from e
    except json.JSONDecodeError as e:
        raise LoadError(f"Documento JSON mal formado en {path}: {e.msg}", row=e.lineno, path=path) from e


def write_results(result: EstimationResult, path: str) -> None:
    """
    Escribe el documento de una estimación.

    Incluye estimaciones, errores estándar, códigos de significancia, LL0,
    LL1, ρ, ρ ajustado, VOT, el registro de convergencia y el digest de la
    especificación.

    Raises:
        OSError: Si la ruta no es escribible.
    """
    publish_document(dumps_document(result.model_dump()), path)
    logger.info(f"Resultados escritos: K={result.k}, LL1={result.ll1:.4f}")


def load_results(path: str) -> EstimationResult:
    document = _read_document(path)
    try:
        return EstimationResult.from_dict(document)
    except (KeyError, TypeError, ValueError) as e:
        raise LoadError(f"Documento de resultados inválido {path}: {e}", path=path) from e


def write_regression_fits(fits: Mapping[Purpose, RegressionFit], path: str) -> None:
    """Escribe los ajustes de generación, uno por propósito de viaje."""
    document = {purpose.value: fit.model_dump() for purpose, fit in fits.items()}
    publish_document(dumps_document(document), path)


def write_regression_fit(fit: RegressionFit, path: str, purpose: Union[Purpose, str]) -> None:
    write_regression_fits({Purpose.parse(purpose): fit}, path)


def load_regression_fits(path: str) -> Dict[Purpose, RegressionFit]:
    document = _read_document(path)
    fits = {}
    for key, data in document.items():
        try:
            fits[Purpose.parse(key)] = RegressionFit.from_dict(data)
        except (KeyError, TypeError, ValueError) as e:
            raise LoadError(f"Ajuste de generación inválido '{key}' en {path}: {e}", path=path) from e
    return fits


def load_regression_fit(path: str, purpose: Union[Purpose, str]) -> RegressionFit:
    fits = load_regression_fits(path)
    purpose = Purpose.parse(purpose)
    if purpose not in fits:
        raise LoadError(f"El documento {path} no tiene ajuste para {purpose.value}", path=path)
    return fits[purpose]


def publish_frame(frame: pd.DataFrame, path: str) -> None:
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    publish_document(buffer.getvalue(), path, content_type="text/csv")


def write_demand_table(table: DemandTable, path: str) -> None:
    """Tabla OD: origin, destination, mode, trips, vmt."""
    publish_frame(table.cells, path)


def write_person_trips(table: DemandTable, path: str) -> None:
    publish_frame(table.person_trips, path)


def load_demand_cells(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except FileNotFoundError as e:
        raise LoadError(f"No existe la tabla de demanda {path}", path=path) from e


def write_induced_report(report: InducedTravelReport, path: str) -> None:
    publish_document(dumps_document(report.model_dump()), path)
    logger.info(f"Reporte de viajes inducidos escrito: Δviajes={report.delta_trips:.4f}")


def write_parameters(params: ParameterVector, path: str) -> None:
    """Mapa nombre → valor, el mismo formato que acepta `load_parameters`."""
    publish_document(dumps_document({"parameters": params.as_dict()}), path)


def load_parameters(path: str, spec: ModelSpec) -> ParameterVector:
    """
    Lee un punto del espacio de parámetros para la especificación dada.

    Acepta un documento de resultados (toma sus estimaciones), un documento
    `{"parameters": {...}}` o un mapa plano nombre → valor.

    Raises:
        LoadError: Si el documento no contiene un mapa de parámetros.
        ParameterError: Si los nombres no coinciden con la especificación.
    """
    document = _read_document(path)
    if "estimates" in document:
        named = {entry["name"]: entry["estimate"] for entry in document["estimates"]}
    else:
        named = document.get("parameters", document)
    if not isinstance(named, dict):
        raise LoadError(f"El documento {path} no contiene un mapa de parámetros", path=path)
    try:
        values = {name: float(value) for name, value in named.items()}
    except (TypeError, ValueError) as e:
        raise LoadError(f"Valor de parámetro inválido en {path}: {e}", path=path) from e
    return pack_parameters(spec, values)
