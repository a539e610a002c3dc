import os
from typing import Tuple

import boto3
from botocore.exceptions import ClientError

from app.utils.logger import get_logger
from app import config

logger = get_logger("s3-uploader")

S3_SCHEME = "s3://"


def is_s3_uri(path: str) -> bool:
    return str(path).startswith(S3_SCHEME)


def split_s3_uri(uri: str) -> Tuple[str, str]:
    """
    Separa una URI s3://bucket/clave en (bucket, clave).

    Raises:
        ValueError: Si la URI no tiene bucket o clave.
    """
    remainder = uri[len(S3_SCHEME):]
    bucket, _, key = remainder.partition("/")
    if not bucket or not key:
        raise ValueError(f"URI de S3 inválida: {uri}")
    return bucket, key


def _s3_client():
    if config.ENVIRONMENT == "lambda":
        return boto3.client("s3")
    return boto3.client(
        "s3",
        aws_access_key_id=config.AWS_ACCESS_KEY_ID,
        aws_secret_access_key=config.AWS_SECRET_ACCESS_KEY,
        region_name=config.AWS_REGION,
    )


def upload_document_to_s3(content: str, bucket_name: str, key: str,
                          content_type: str = "application/json") -> bool:
    """
    Sube un documento de texto a S3.

    Args:
        content (str): Documento ya serializado.
        bucket_name (str): Nombre del bucket S3 destino.
        key (str): Clave del objeto (ej. 'results/business.json').
        content_type (str): Tipo MIME del objeto.

    Returns:
        bool: True si la operación fue exitosa, False en caso de error.
    """
    if not content:
        logger.warning("El documento está vacío; no se sube a S3.")
        return False

    try:
        s3 = _s3_client()
        s3.put_object(
            Bucket=bucket_name,
            Key=key,
            Body=content.encode("utf-8"),
            ContentType=content_type,
        )
        logger.info(f"Documento subido a s3://{bucket_name}/{key}")
        return True

    except ClientError as e:
        logger.error(
            f"Error AWS al subir archivo a S3: {e.response.get('Error', {}).get('Message')}")
        return False


def publish_document(content: str, destination: str, content_type: str = "application/json") -> None:
    """
    Escribe un documento en disco o lo publica en S3 según el destino.

    Args:
        content (str): Documento serializado.
        destination (str): Ruta local o URI s3://bucket/clave.

    Raises:
        OSError: Si la ruta local no es escribible o la subida a S3 falla.
    """
    if is_s3_uri(destination):
        bucket, key = split_s3_uri(destination)
        if not upload_document_to_s3(content, bucket, key, content_type):
            raise OSError(f"No se pudo publicar el documento en {destination}")
        return

    directory = os.path.dirname(os.path.abspath(destination))
    os.makedirs(directory, exist_ok=True)
    # newline="" conserva los bytes exactos entre plataformas
    with open(destination, "w", encoding="utf-8", newline="") as f:
        f.write(content)
    logger.info(f"Documento guardado en: {destination}")
