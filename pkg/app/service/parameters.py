# app/service/parameters.py

from typing import Dict, List, Mapping, Sequence, Union

import numpy as np

from app.errors import ParameterError
from app.models.choice_model import (
    COVARIATE_ATTRIBUTES,
    DESTINATION_ATTRIBUTES,
    LEAF_ATTRIBUTES,
    AttributeSource,
    Diagnostic,
    ModelSpec,
    ParameterVector,
    Purpose,
    SpStructure,
    TermScope,
    UtilityTerm,
)


def parameter_layout(spec: ModelSpec) -> Dict[str, int]:
    return spec.parameter_layout()


def zero_parameters(spec: ModelSpec) -> ParameterVector:
    """Punto nulo: todos los parámetros libres en 0 (μ = 1, λ = 0.5)."""
    layout = spec.parameter_layout()
    return ParameterVector(np.zeros(len(layout)), layout)


def pack_parameters(spec: ModelSpec, named: Mapping[str, float]) -> ParameterVector:
    """
    Empaqueta un mapa nombre → valor en el vector libre de la especificación.

    Raises:
        ParameterError: Si faltan parámetros o sobran nombres desconocidos;
            `offenders` lista los nombres problemáticos.
    """
    layout = spec.parameter_layout()
    missing = [name for name in layout if name not in named]
    unknown = sorted(name for name in named if name not in layout)
    if missing:
        raise ParameterError(f"Faltan parámetros: {', '.join(missing)}", missing)
    if unknown:
        raise ParameterError(f"Parámetros desconocidos: {', '.join(unknown)}", unknown)

    values = np.empty(len(layout))
    for name, index in layout.items():
        values[index] = float(named[name])
    return ParameterVector(values, layout)


def unpack_parameters(vec: Union[ParameterVector, Sequence[float]], spec: ModelSpec) -> Dict[str, float]:
    """Inversa de `pack_parameters`."""
    layout = spec.parameter_layout()
    if isinstance(vec, ParameterVector):
        if dict(vec.layout) != layout:
            raise ParameterError("La disposición del vector no coincide con la especificación",
                                 sorted(set(vec.layout) ^ set(layout)))
        values = vec.values
    else:
        values = np.asarray(vec, dtype=float).reshape(-1)
        if len(values) != len(layout):
            raise ParameterError(
                f"Vector de longitud {len(values)} para una disposición de {len(layout)} parámetros")
    return {name: float(values[index]) for name, index in layout.items()}


def coerce_parameters(params: Union[ParameterVector, Mapping[str, float]], spec: ModelSpec) -> ParameterVector:
    if isinstance(params, ParameterVector):
        unpack_parameters(params, spec)
        return params
    return pack_parameters(spec, params)


def _scopes_overlap(a: TermScope, b: TermScope) -> bool:
    return a is TermScope.ALL or b is TermScope.ALL or a is b


def _attribute_diagnostics(term: UtilityTerm, level: str) -> List[Diagnostic]:
    allowed_alternative = LEAF_ATTRIBUTES if level == "mode" else DESTINATION_ATTRIBUTES
    if level == "mode":
        allowed_alternative = allowed_alternative | DESTINATION_ATTRIBUTES
    diagnostics = []
    for factor in term.factors:
        if term.source is AttributeSource.PERSON_ATTRIBUTE:
            known = factor in COVARIATE_ATTRIBUTES
        elif term.source is AttributeSource.ALTERNATIVE_ATTRIBUTE:
            known = factor in allowed_alternative
        else:
            known = factor in allowed_alternative | COVARIATE_ATTRIBUTES
        if not known:
            diagnostics.append(Diagnostic(
                "unknown_attribute",
                f"El término '{term.coefficient_name}' usa el atributo desconocido '{factor}'",
                term.coefficient_name))
    return diagnostics


def validate_spec(spec: ModelSpec) -> List[Diagnostic]:
    """
    Revisa la identificación de la especificación normalizada.

    Devuelve la lista de diagnósticos (vacía si la especificación es
    identificable); nunca lanza excepciones ni corrige la especificación.
    """
    diagnostics: List[Diagnostic] = []

    for term in spec.mode_terms:
        if term.source is AttributeSource.CONSTANT and term.applies(spec.base_mode):
            diagnostics.append(Diagnostic(
                "base_mode_constant",
                f"base-mode constant must be fixed: '{term.coefficient_name}' aplica al modo base "
                f"{spec.base_mode.value}",
                term.coefficient_name))
        if term.source is AttributeSource.LOGSUM:
            diagnostics.append(Diagnostic(
                "logsum_misplaced",
                f"El término logsum '{term.coefficient_name}' solo puede ir entre los términos de destino",
                term.coefficient_name))
        diagnostics.extend(_attribute_diagnostics(term, "mode"))

    for term in spec.destination_terms:
        if term.source is AttributeSource.STATE_DEPENDENCE:
            diagnostics.append(Diagnostic(
                "state_dependence_misplaced",
                f"El término '{term.coefficient_name}' de dependencia de estado debe ser de modo",
                term.coefficient_name))
        diagnostics.extend(_attribute_diagnostics(term, "destination"))

    generic = [t for t in spec.mode_terms
               if t.source is AttributeSource.ALTERNATIVE_ATTRIBUTE and not t.applies_to]
    for i, first in enumerate(generic):
        for second in generic[i + 1:]:
            if (first.factors == second.factors and first.coefficient_name != second.coefficient_name
                    and _scopes_overlap(first.scope, second.scope)):
                diagnostics.append(Diagnostic(
                    "duplicate_generic",
                    f"El atributo '{'*'.join(first.factors)}' tiene dos coeficientes genéricos: "
                    f"'{first.coefficient_name}' y '{second.coefficient_name}'",
                    second.coefficient_name))

    for covariate in spec.lambda_covariates:
        unknown = [f for f in covariate.factors if f not in COVARIATE_ATTRIBUTES]
        if unknown:
            diagnostics.append(Diagnostic(
                "unknown_lambda_covariate",
                f"La covariable λ '{covariate.coefficient_name}' referencia atributos inexistentes: "
                f"{', '.join(unknown)}",
                covariate.coefficient_name))

    expected = (SpStructure.MODE_ONLY_MNL if spec.purpose is Purpose.BUSINESS
                else SpStructure.NESTED_DESTINATION_MODE)
    if spec.sp_structure is not expected:
        diagnostics.append(Diagnostic(
            "structure_purpose",
            f"El propósito {spec.purpose.value} requiere sp_structure = {expected.value}"))

    if spec.base_mode not in (spec.rp_universe | spec.sp_universe):
        diagnostics.append(Diagnostic(
            "base_mode_universe", f"El modo base {spec.base_mode.value} no pertenece a ningún universo"))

    return diagnostics
