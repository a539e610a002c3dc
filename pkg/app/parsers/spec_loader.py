# app/parsers/spec_loader.py

"""
Lectura de archivos de especificación de modelo (formato INI por secciones).

Secciones: [model], [universe], [normalization], [choice_set_rules],
[destination_terms], [mode_terms] y [lambda]. Cada término se escribe

    nombre = fuente | factores | aplica_a | ámbito

donde los factores se separan con `*` y `aplica_a` con comas. Un mismo
coeficiente puede repetirse en varias líneas agregando un sufijo `~etiqueta`
a la clave (por ejemplo `summer_dest~2`). El formato completo está en
docs/formats.md.
"""

import configparser
from typing import Iterable, List, Tuple

from app import config
from app.errors import SpecError
from app.models.choice_model import (
    AttributeSource,
    ChoiceSetRules,
    LambdaCovariate,
    Mode,
    ModelSpec,
    Purpose,
    ScaleParameterization,
    SpStructure,
    TermScope,
    UtilityTerm,
    mode_labels,
)
from app.utils.logger import get_logger

logger = get_logger(__name__)

REQUIRED_SECTIONS = ("model", "universe", "mode_terms")
TAG_SEPARATOR = "~"


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    return parser


def _modes(text: str, context: str) -> frozenset:
    try:
        return frozenset(Mode.parse(part) for part in _split(text, ","))
    except ValueError as e:
        raise SpecError(f"{context}: {e}") from e


def _split(text: str, separator: str) -> List[str]:
    return [part.strip() for part in str(text).split(separator) if part.strip()]


def _coefficient(key: str) -> str:
    return key.split(TAG_SEPARATOR, 1)[0].strip()


def _term(key: str, value: str, destination: bool) -> UtilityTerm:
    fields = [part.strip() for part in value.split("|")]
    if len(fields) != 4:
        raise SpecError(f"El término '{key}' debe tener 4 campos 'fuente | factores | aplica_a | ámbito'")
    source_text, factors_text, applies_text, scope_text = fields
    try:
        source = AttributeSource.parse(source_text)
        scope = TermScope.parse(scope_text or "All")
        if destination:
            applies = frozenset(int(part) for part in _split(applies_text, ","))
        else:
            applies = frozenset(Mode.parse(part) for part in _split(applies_text, ","))
        return UtilityTerm(_coefficient(key), source, tuple(_split(factors_text, "*")), applies, scope)
    except ValueError as e:
        raise SpecError(f"Término '{key}' inválido: {e}") from e


def _lambda_covariate(key: str, value: str) -> LambdaCovariate:
    fields = [part.strip() for part in value.split("|")]
    if len(fields) != 2:
        raise SpecError(f"La covariable λ '{key}' debe tener 2 campos 'factores | ámbito'")
    try:
        return LambdaCovariate(_coefficient(key), tuple(_split(fields[0], "*")),
                               TermScope.parse(fields[1] or "All"))
    except ValueError as e:
        raise SpecError(f"Covariable λ '{key}' inválida: {e}") from e


def parse_spec(text: str, source: str = "<texto>") -> ModelSpec:
    """
    Construye un `ModelSpec` a partir del contenido de un archivo INI.

    Raises:
        SpecError: Si falta una sección obligatoria o algún término es inválido.
    """
    parser = _parser()
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise SpecError(f"Especificación mal formada en {source}: {e}") from e

    missing = [section for section in REQUIRED_SECTIONS if not parser.has_section(section)]
    if missing:
        raise SpecError(f"Faltan secciones en {source}: {', '.join(missing)}")

    model = parser["model"]
    try:
        purpose = Purpose.parse(model.get("purpose", ""))
        default_structure = (SpStructure.MODE_ONLY_MNL if purpose is Purpose.BUSINESS
                             else SpStructure.NESTED_DESTINATION_MODE)
        sp_structure = SpStructure(model.get("sp_structure", default_structure.value))
        normalization = parser["normalization"] if parser.has_section("normalization") else {}
        base_mode = Mode.parse(normalization.get("base_mode", Mode.LCC.value))
        scale = ScaleParameterization(normalization.get("scale", ScaleParameterization.LOG.value))
    except ValueError as e:
        raise SpecError(f"Sección [model]/[normalization] inválida en {source}: {e}") from e

    universe = parser["universe"]
    rules_section = parser["choice_set_rules"] if parser.has_section("choice_set_rules") else {}
    try:
        rules = ChoiceSetRules(
            short_distance_km=float(rules_section.get("short_distance_km", config.SHORT_DISTANCE_KM)),
            long_distance_km=float(rules_section.get("long_distance_km", config.LONG_DISTANCE_KM)),
            short_excluded=_modes(rules_section.get("short_excluded", "Airline, LCC"), "short_excluded"),
            long_excluded=_modes(rules_section.get("long_excluded", "Car"), "long_excluded"),
            sp_only=_modes(rules_section.get("sp_only", "HSR"), "sp_only"),
        )
    except ValueError as e:
        raise SpecError(f"Sección [choice_set_rules] inválida en {source}: {e}") from e
    if not 0 < rules.short_distance_km < rules.long_distance_km:
        raise SpecError("Se requiere 0 < short_distance_km < long_distance_km")

    def section_items(name: str) -> Iterable[Tuple[str, str]]:
        return parser.items(name) if parser.has_section(name) else ()

    spec = ModelSpec(
        purpose=purpose,
        destination_terms=tuple(_term(k, v, True) for k, v in section_items("destination_terms")),
        mode_terms=tuple(_term(k, v, False) for k, v in section_items("mode_terms")),
        lambda_covariates=tuple(_lambda_covariate(k, v) for k, v in section_items("lambda")),
        sp_structure=sp_structure,
        base_mode=base_mode,
        scale_parameterization=scale,
        rp_universe=_modes(universe.get("rp", ""), "universe.rp"),
        sp_universe=_modes(universe.get("sp", ""), "universe.sp"),
        rules=rules,
    )
    logger.info(f"Especificación {purpose.value} leída de {source}: K={len(spec.parameter_layout())}")
    return spec


def load_spec(path: str) -> ModelSpec:
    """Lee la especificación desde un archivo."""
    if not path:
        raise ValueError("Ruta de la especificación no puede ser None")
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise SpecError(f"No se pudo leer la especificación {path}: {e}") from e
    return parse_spec(text, source=path)


def dump_spec(spec: ModelSpec) -> str:
    """Serializa la especificación en el mismo formato INI que lee `parse_spec`."""
    lines = [
        "[model]",
        f"purpose = {spec.purpose.value}",
        f"sp_structure = {spec.sp_structure.value}",
        "",
        "[universe]",
        f"rp = {', '.join(mode_labels(spec.rp_universe))}",
        f"sp = {', '.join(mode_labels(spec.sp_universe))}",
        "",
        "[normalization]",
        f"base_mode = {spec.base_mode.value}",
        f"scale = {spec.scale_parameterization.value}",
        "",
        "[choice_set_rules]",
        f"short_distance_km = {spec.rules.short_distance_km:g}",
        f"long_distance_km = {spec.rules.long_distance_km:g}",
        f"short_excluded = {', '.join(mode_labels(spec.rules.short_excluded))}",
        f"long_excluded = {', '.join(mode_labels(spec.rules.long_excluded))}",
        f"sp_only = {', '.join(mode_labels(spec.rules.sp_only))}",
    ]
    for section, terms in (("destination_terms", spec.destination_terms), ("mode_terms", spec.mode_terms)):
        lines += ["", f"[{section}]"]
        seen = {}
        for term in terms:
            count = seen.get(term.coefficient_name, 0)
            seen[term.coefficient_name] = count + 1
            key = term.coefficient_name if count == 0 else f"{term.coefficient_name}{TAG_SEPARATOR}{count}"
            applies = term.model_dump()["applies_to"]
            lines.append(f"{key} = {term.source.value} | {'*'.join(term.factors)} | "
                         f"{', '.join(applies)} | {term.scope.value}")
    lines += ["", "[lambda]"]
    for covariate in spec.lambda_covariates:
        lines.append(f"{covariate.coefficient_name} = {covariate.key} | {covariate.scope.value}")
    return "\n".join(lines) + "\n"
