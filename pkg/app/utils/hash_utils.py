import hashlib
import json
from typing import Any, Mapping


def calculate_text_hash(text: str) -> str:
    """
    Calcula el hash SHA256 de un texto codificado en UTF-8.

    Args:
        text (str): Contenido a resumir.

    Returns:
        str: Valor hash en formato hexadecimal.
    """
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def calculate_document_digest(document: Mapping[str, Any]) -> str:
    """
    Huella canónica de un documento JSON: claves ordenadas, sin espacios.

    Dos especificaciones equivalentes producen el mismo digest aunque
    provengan de archivos con distinto orden o comentarios.
    """
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return calculate_text_hash(canonical)
