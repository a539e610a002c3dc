# app/service/choice_sets.py

from typing import FrozenSet, Iterable, Optional

from app.errors import ChoiceSetError
from app.models.choice_model import ChoiceSetRules, DatasetKind, Mode
from app.utils.logger import get_logger

logger = get_logger(__name__)


def build_choice_set(distance_km: float, universe: Iterable[Mode], dataset: DatasetKind,
                     rules: Optional[ChoiceSetRules] = None) -> FrozenSet[Mode]:
    """
    Genera el conjunto de elección de un viaje aplicando las reglas de distancia.

    Las reglas se aplican en orden: modos exclusivos de SP fuera de RP, aéreos
    fuera de los viajes cortos y auto fuera de los viajes largos.

    Args:
        distance_km (float): Distancia del viaje en km (> 0).
        universe: Modos disponibles antes de aplicar las reglas.
        dataset (DatasetKind): RP o SP.
        rules (ChoiceSetRules, optional): Umbrales y modos excluidos;
            por defecto los de configuración (300/1300 km).

    Returns:
        frozenset[Mode]: Conjunto de elección no vacío.

    Raises:
        ValueError: Si la distancia no es positiva o el universo está vacío.
        ChoiceSetError: Si una regla deja el conjunto vacío; `rule` nombra la regla.

    Example:
        >>> sorted(m.value for m in build_choice_set(250, {Mode.BUS, Mode.AIRLINE}, DatasetKind.RP))
        ['Bus']
    """
    rules = rules or ChoiceSetRules()
    modes = frozenset(Mode.parse(m) for m in universe)
    if not distance_km > 0:
        raise ValueError(f"La distancia debe ser positiva, se recibió {distance_km}")
    if not modes:
        raise ValueError("El universo de modos está vacío")

    steps = []
    if dataset is DatasetKind.RP:
        steps.append(("rp_excluye_modos_sp", rules.sp_only))
    if distance_km < rules.short_distance_km:
        steps.append((f"distancia_menor_a_{rules.short_distance_km:g}_km", rules.short_excluded))
    if distance_km > rules.long_distance_km:
        steps.append((f"distancia_mayor_a_{rules.long_distance_km:g}_km", rules.long_excluded))

    for rule, excluded in steps:
        modes = modes - excluded
        if not modes:
            logger.debug(f"Regla {rule} vació el conjunto de elección a {distance_km} km")
            raise ChoiceSetError(
                f"La regla '{rule}' dejó vacío el conjunto de elección ({distance_km:g} km, {dataset.value})",
                rule=rule)
    return modes
