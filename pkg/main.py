# main.py

"""
Línea de comandos del modelo de demanda interurbana.

    python main.py estimate      --spec --rp --sp --persons --regions --out [--start] [--tol] [--max-iter]
    python main.py forecast      --model --tripgen --scenario --base-scenario --population --out [--regions]
    python main.py validate      --spec --rp --sp --persons --regions [--points] [--seed] [--replay] [--out]
    python main.py tripgen       --records --kind --covariates --purpose --out [--intercept] [--theta]
    python main.py accessibility --model --scenario --out [--regions] [--persons] [--mu3]
    python main.py simulate      --spec --params --n --out [--seed] [--trips-per-person] [--scenario]

Las tablas legibles van a la salida estándar y los mensajes a la salida de
error. Códigos de salida: 0 éxito, 1 error de entrada o de uso, 2 la
estimación no convergió, 3 falló la validación.
"""

import argparse
import os
import sys
from typing import List, Optional, Sequence

from app.service.model_runner import EXIT_INPUT_ERROR, ModelRunner, RunResult
from app.utils.logger import get_logger

logger = get_logger(__name__)

# (flag, atributo) de cada archivo de entrada por comando
INPUT_FLAGS = {
    "estimate": (("--spec", "spec"), ("--rp", "rp"), ("--sp", "sp"), ("--persons", "persons"),
                 ("--regions", "regions"), ("--start", "start")),
    "forecast": (("--model", "model"), ("--tripgen", "tripgen"), ("--scenario", "scenario"),
                 ("--base-scenario", "base_scenario"), ("--population", "population"), ("--regions", "regions")),
    "validate": (("--spec", "spec"), ("--rp", "rp"), ("--sp", "sp"), ("--persons", "persons"),
                 ("--regions", "regions"), ("--replay", "replay")),
    "tripgen": (("--records", "records"),),
    "accessibility": (("--model", "model"), ("--scenario", "scenario"), ("--regions", "regions"),
                      ("--persons", "persons")),
    "simulate": (("--spec", "spec"), ("--params", "params"), ("--scenario", "scenario"), ("--regions", "regions")),
}


class CliArgumentParser(argparse.ArgumentParser):
    """ArgumentParser cuyos errores de uso terminan con código 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT_ERROR, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"debe ser un entero ≥ 1, se recibió {text}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"debe ser un entero ≥ 0, se recibió {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"debe ser positivo, se recibió {text}")
    return value


def _csv_list(text: str) -> List[str]:
    values = [part.strip() for part in text.split(",") if part.strip()]
    if not values:
        raise argparse.ArgumentTypeError("la lista está vacía")
    return values


def _add_runtime_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help="hilos de evaluación (por defecto THREADS)")
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="reducción en orden fijo, salidas idénticas byte a byte (por defecto DETERMINISTIC)")


def build_parser() -> argparse.ArgumentParser:
    parser = CliArgumentParser(prog="main.py", description="Modelo integrado de demanda de viajes interurbanos")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMANDO")

    estimate = commands.add_parser("estimate", help="estimación conjunta RP+SP")
    estimate.add_argument("--spec", required=True, help="archivo de especificación (.ini)")
    estimate.add_argument("--rp", help="viajes RP (CSV largo)")
    estimate.add_argument("--sp", help="respuestas SP (CSV largo)")
    estimate.add_argument("--persons", required=True, help="tabla de personas (CSV)")
    estimate.add_argument("--regions", required=True, help="tabla de regiones (CSV)")
    estimate.add_argument("--out", required=True, help="documento de resultados (JSON, local o s3://)")
    estimate.add_argument("--start", help="punto inicial: resultados previos o mapa de parámetros")
    estimate.add_argument("--tol", type=_positive_float, help="tolerancia de la norma del gradiente")
    estimate.add_argument("--max-iter", type=_positive_int, help="tope de iteraciones")
    _add_runtime_flags(estimate)

    forecast = commands.add_parser("forecast", help="pronóstico de demanda y viajes inducidos")
    forecast.add_argument("--model", required=True, action="append", help="resultados de estimación (uno por propósito)")
    forecast.add_argument("--tripgen", required=True, action="append", help="ajustes de generación de viajes")
    forecast.add_argument("--scenario", required=True, help="escenario alternativo (.ini)")
    forecast.add_argument("--base-scenario", required=True, help="escenario base (.ini)")
    forecast.add_argument("--population", required=True, help="personas a pronosticar (CSV)")
    forecast.add_argument("--regions", help="tabla de regiones si los escenarios no la incluyen")
    forecast.add_argument("--mu3", type=_positive_float, help="parámetro de la accesibilidad (por defecto 1)")
    forecast.add_argument("--out", required=True, help="directorio de salida")
    _add_runtime_flags(forecast)

    validate = commands.add_parser("validate", help="gradiente y probabilidades contra oráculos")
    validate.add_argument("--spec", required=True)
    validate.add_argument("--rp")
    validate.add_argument("--sp")
    validate.add_argument("--persons", required=True)
    validate.add_argument("--regions", required=True)
    validate.add_argument("--points", type=_positive_int, default=10, help="puntos aleatorios a evaluar")
    validate.add_argument("--seed", type=int, default=0)
    validate.add_argument("--replay", help="punto fallido serializado por una validación anterior")
    validate.add_argument("--out", help="informe de validación (JSON)")
    _add_runtime_flags(validate)

    tripgen = commands.add_parser("tripgen", help="regresión de generación de viajes")
    tripgen.add_argument("--records", required=True, help="registros de conteos anuales (CSV)")
    tripgen.add_argument("--kind", required=True, choices=("linear", "negbin"))
    tripgen.add_argument("--covariates", required=True, type=_csv_list, help="covariables separadas por coma")
    tripgen.add_argument("--purpose", required=True, help="Business o NonBusiness")
    tripgen.add_argument("--intercept", choices=("free", "fixed-zero"), default="free")
    tripgen.add_argument("--theta", type=_positive_float, help="dispersión fija de la binomial negativa")
    tripgen.add_argument("--out", required=True, help="documento del ajuste (JSON)")
    _add_runtime_flags(tripgen)

    access = commands.add_parser("accessibility", help="accesibilidad logsum por origen o persona")
    access.add_argument("--model", required=True, help="resultados de estimación")
    access.add_argument("--scenario", required=True)
    access.add_argument("--regions")
    access.add_argument("--persons", help="calcula por persona en su región de residencia")
    access.add_argument("--mu3", type=_positive_float)
    access.add_argument("--out", required=True, help="tabla de accesibilidad (CSV)")
    _add_runtime_flags(access)

    simulate = commands.add_parser("simulate", help="encuesta sintética con parámetros conocidos")
    simulate.add_argument("--spec", required=True)
    simulate.add_argument("--params", required=True, help="parámetros verdaderos (JSON)")
    simulate.add_argument("--n", required=True, type=_non_negative_int, help="personas a simular")
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--trips-per-person", type=_non_negative_int, default=1)
    simulate.add_argument("--sp-scenarios", type=_non_negative_int, help="escenarios SP por respondente")
    simulate.add_argument("--scenario", help="escenario de nivel de servicio (por defecto el corredor de referencia)")
    simulate.add_argument("--regions")
    simulate.add_argument("--no-hsr", action="store_true", help="corredor de referencia sin HSR")
    simulate.add_argument("--out", required=True, help="directorio de salida")
    _add_runtime_flags(simulate)
    return parser


def _missing_inputs(args: argparse.Namespace) -> List[str]:
    problems = []
    for flag, attribute in INPUT_FLAGS[args.command]:
        value = getattr(args, attribute, None)
        for path in (value if isinstance(value, list) else [value]):
            if path and not os.path.isfile(path):
                problems.append(f"{flag}: no existe el archivo {path}")
    return problems


def run(args: argparse.Namespace) -> RunResult:
    runner = ModelRunner(threads=args.threads, deterministic=args.deterministic)
    if args.command == "estimate":
        return runner.estimate(args.spec, args.rp, args.sp, args.persons, args.regions, args.out,
                               start_path=args.start, tolerance=args.tol, max_iterations=args.max_iter)
    if args.command == "forecast":
        return runner.forecast(args.model, args.tripgen, args.scenario, args.base_scenario, args.population,
                               args.out, regions_path=args.regions, mu3=args.mu3)
    if args.command == "validate":
        return runner.validate(args.spec, args.rp, args.sp, args.persons, args.regions, points=args.points,
                               seed=args.seed, replay_path=args.replay, out_path=args.out)
    if args.command == "tripgen":
        return runner.tripgen(args.records, args.kind, args.covariates, args.out, args.purpose,
                              intercept=args.intercept, theta=args.theta)
    if args.command == "accessibility":
        return runner.accessibility(args.model, args.scenario, args.out, regions_path=args.regions,
                                    persons_path=args.persons, mu3=args.mu3)
    return runner.simulate(args.spec, args.params, args.n, args.seed, args.out,
                           trips_per_person=args.trips_per_person, sp_scenarios=args.sp_scenarios,
                           scenario_path=args.scenario, regions_path=args.regions, include_hsr=not args.no_hsr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    problems = _missing_inputs(args)
    if problems:
        for problem in problems:
            print(f"❌ {problem}", file=sys.stderr)
        return EXIT_INPUT_ERROR

    result = run(args)
    if result.report:
        print(result.report)
    symbol = "✅" if result.success else "❌"
    print(f"{symbol} {result.message}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
