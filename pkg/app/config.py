import os


def _float_env(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"❌ {name} debe ser numérico, se recibió '{raw}'.")


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"❌ {name} debe ser entero, se recibió '{raw}'.")


# === Reglas del conjunto de elección ===
SHORT_DISTANCE_KM = _float_env("SHORT_DISTANCE_KM", 300.0)
LONG_DISTANCE_KM = _float_env("LONG_DISTANCE_KM", 1300.0)

if not 0 < SHORT_DISTANCE_KM < LONG_DISTANCE_KM:
    raise ValueError("❌ SHORT_DISTANCE_KM debe ser positivo y menor que LONG_DISTANCE_KM.")

# === Estimación ===
GRADIENT_TOLERANCE = _float_env("GRADIENT_TOLERANCE", 1e-6)
RELATIVE_LL_TOLERANCE = _float_env("RELATIVE_LL_TOLERANCE", 1e-10)
MAX_ITERATIONS = _int_env("MAX_ITERATIONS", 500)
HESSIAN_STEP = _float_env("HESSIAN_STEP", 1e-5)
NEWTON_STEPS = _int_env("NEWTON_STEPS", 20)

if NEWTON_STEPS < 0:
    raise ValueError("❌ NEWTON_STEPS no puede ser negativo.")

# === Accesibilidad ===
ACCESSIBILITY_MU3 = _float_env("ACCESSIBILITY_MU3", 1.0)

if ACCESSIBILITY_MU3 <= 0:
    raise ValueError("❌ ACCESSIBILITY_MU3 debe ser mayor que cero.")

# === Paralelismo ===
THREADS = _int_env("THREADS", 1)
DETERMINISTIC = os.getenv("DETERMINISTIC", "true").lower() in ("true", "1")
CHUNK_OBSERVATIONS = _int_env("CHUNK_OBSERVATIONS", 512)

if THREADS < 1 or CHUNK_OBSERVATIONS < 1:
    raise ValueError("❌ THREADS y CHUNK_OBSERVATIONS deben ser al menos 1.")

# === Publicación de resultados ===
AWS_REGION = os.getenv("AWS_REGION", "us-east-1")
AWS_ACCESS_KEY_ID = os.getenv("AWS_ACCESS_KEY_ID")
AWS_SECRET_ACCESS_KEY = os.getenv("AWS_SECRET_ACCESS_KEY")

# === Entorno ===
ENVIRONMENT = os.getenv("ENVIRONMENT", "local")
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
