# app/parsers/scenario_loader.py

"""
Archivos de escenario (INI por secciones).

    [scenario]          name
    [region.N]          name, gdp, tourist_count, attraction_score, distance_km
    [od.O.D]            distance_km, modes
    [los.O.D.Modo]      travel_cost, in_vehicle_time, access_egress_time, frequency

Las claves de nivel de servicio admiten los sufijos de unidad de los CSV
(`_mil_vnd`, `_h`, `_per_day`). Si el escenario no trae secciones de región,
se usa la tabla de regiones recibida.
"""

import configparser
from typing import Dict, Mapping, Optional

from app.errors import ScenarioError
from app.models.choice_model import Mode, Region, mode_labels
from app.models.scenario import LOS_FIELDS, LevelOfService, ODPair, Scenario
from app.utils.logger import get_logger
from app.utils.uploader import publish_document

logger = get_logger(__name__)

LOS_KEYS = {
    "travel_cost": "travel_cost", "travel_cost_mil_vnd": "travel_cost",
    "in_vehicle_time": "in_vehicle_time", "in_vehicle_time_h": "in_vehicle_time",
    "access_egress_time": "access_egress_time", "access_egress_time_h": "access_egress_time",
    "frequency": "frequency", "frequency_per_day": "frequency",
}


def _float(section: configparser.SectionProxy, key: str, default: Optional[float] = None) -> float:
    if key not in section:
        if default is None:
            raise ScenarioError(f"Falta '{key}' en [{section.name}]")
        return default
    try:
        return float(section[key])
    except ValueError as e:
        raise ScenarioError(f"Valor inválido para '{key}' en [{section.name}]: {section[key]}") from e


def _ids(section_name: str, parts: int):
    pieces = section_name.split(".")
    if len(pieces) != parts:
        raise ScenarioError(f"Nombre de sección inválido: [{section_name}]")
    return pieces[1:]


def parse_scenario(text: str, regions: Optional[Mapping[int, Region]] = None,
                   source: str = "<texto>") -> Scenario:
    """
    Construye un `Scenario` desde el contenido de un archivo.

    Raises:
        ScenarioError: Sección mal nombrada, valor inválido o nivel de
            servicio faltante para un modo ofrecido.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ScenarioError(f"Escenario mal formado en {source}: {e}") from e

    name = parser.get("scenario", "name", fallback=source)
    table: Dict[int, Region] = dict(regions or {})
    od_pairs, level_of_service = {}, {}
    for section_name in parser.sections():
        section = parser[section_name]
        try:
            if section_name.startswith("region."):
                (region_id,) = _ids(section_name, 2)
                table[int(region_id)] = Region(
                    id=int(region_id),
                    gdp=_float(section, "gdp"),
                    tourist_count=_float(section, "tourist_count", 0.0),
                    attraction_score=_float(section, "attraction_score", 0.0),
                    distance_from_origin=_float(section, "distance_km", 0.0),
                    name=section.get("name", ""),
                )
            elif section_name.startswith("od."):
                origin, destination = (int(v) for v in _ids(section_name, 3))
                modes = frozenset(Mode.parse(m) for m in section.get("modes", "").split(",") if m.strip())
                od_pairs[(origin, destination)] = ODPair(origin, destination, _float(section, "distance_km"), modes)
            elif section_name.startswith("los."):
                origin, destination, mode = _ids(section_name, 4)
                values = {}
                for key, value in section.items():
                    if key not in LOS_KEYS:
                        raise ScenarioError(f"Clave desconocida '{key}' en [{section_name}]")
                    values[LOS_KEYS[key]] = _float(section, key)
                missing = [f for f in LOS_FIELDS[:3] if f not in values]
                if missing:
                    raise ScenarioError(f"Faltan {', '.join(missing)} en [{section_name}]")
                level_of_service[(int(origin), int(destination), Mode.parse(mode))] = LevelOfService(**values)
            elif section_name != "scenario":
                raise ScenarioError(f"Sección desconocida [{section_name}] en {source}")
        except ScenarioError:
            raise
        except ValueError as e:
            raise ScenarioError(f"Sección [{section_name}] inválida en {source}: {e}") from e

    if not od_pairs:
        raise ScenarioError(f"El escenario {source} no define pares origen-destino")
    scenario = Scenario(name, table, od_pairs, level_of_service)
    logger.info(f"Escenario '{name}' leído: {len(od_pairs)} pares, modos {', '.join(mode_labels(scenario.modes))}")
    return scenario


def load_scenario(path: str, regions: Optional[Mapping[int, Region]] = None) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ScenarioError(f"No se pudo leer el escenario {path}: {e}") from e
    return parse_scenario(text, regions, source=path)


def dump_scenario(scenario: Scenario, include_regions: bool = True) -> str:
    """Serializa el escenario en el formato que lee `parse_scenario`."""
    lines = ["[scenario]", f"name = {scenario.name}"]
    if include_regions:
        for region_id, region in sorted(scenario.regions.items()):
            lines += ["", f"[region.{region_id}]", f"name = {region.name}", f"gdp = {region.gdp!r}",
                      f"tourist_count = {region.tourist_count!r}",
                      f"attraction_score = {region.attraction_score!r}",
                      f"distance_km = {region.distance_from_origin!r}"]
    for (origin, destination), pair in sorted(scenario.od_pairs.items()):
        lines += ["", f"[od.{origin}.{destination}]", f"distance_km = {pair.distance_km!r}",
                  f"modes = {', '.join(mode_labels(pair.available_modes))}"]
        for mode in mode_labels(pair.available_modes):
            los = scenario.los(origin, destination, Mode.parse(mode))
            lines += ["", f"[los.{origin}.{destination}.{mode}]"]
            lines += [f"{name} = {value!r}" for name, value in los.attributes().items()]
    return "\n".join(lines) + "\n"


def write_scenario(scenario: Scenario, path: str) -> None:
    publish_document(dump_scenario(scenario), path, content_type="text/plain")
