# app/service/model_runner.py

"""
Ejecución de los comandos del modelo de demanda
===============================================

`ModelRunner` lleva cada comando de punta a punta: carga las entradas
nombradas, llama al servicio correspondiente, escribe las salidas y devuelve
un `RunResult` con el código de salida y la tabla legible para la consola.
Las excepciones no escapan del runner: se registran con contexto y se
convierten en un resultado fallido.

Códigos de salida:
    0  éxito
    1  error de entrada o de uso
    2  la estimación no convergió
    3  falló la validación numérica

Ejemplo de uso:
    >>> runner = ModelRunner(threads=4)
    >>> result = runner.estimate("fixtures/business.ini", "rp.csv", "sp.csv",
    ...                          "persons.csv", "fixtures/regions.csv", "out/business.json")
    >>> print(result.exit_code, result.message)
"""

import math
import os
import posixpath
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app import config
from app.errors import DemandModelError, EstimationError, LikelihoodError, ScenarioError
from app.models.choice_model import LOG_SCALE, DatasetKind, ModelSpec, ParameterVector, Purpose, mode_labels
from app.models.results import EstimationControls, EstimationResult, RegressionFit
from app.models.scenario import Scenario
from app.parsers.results_io import (
    dumps_document,
    load_parameters,
    load_regression_fits,
    load_results,
    publish_frame,
    write_demand_table,
    write_induced_report,
    write_person_trips,
    write_regression_fit,
    write_results,
)
from app.parsers.scenario_loader import load_scenario
from app.parsers.spec_loader import load_spec
from app.parsers.survey_loader import (
    derive_tripgen_records,
    load_persons,
    load_regions,
    load_rp_dataset,
    load_sp_dataset,
    load_tripgen_records,
    write_persons,
    write_regions,
    write_rp_dataset,
    write_sp_dataset,
    write_tripgen_records,
)
from app.service.demand_forecast import accessibility, forecast_demand, induced_travel
from app.service.estimation import LikelihoodEvaluator, estimate, gradient_check
from app.service.synthetic import (
    MAX_BRUTEFORCE_LEAVES,
    bruteforce_prob,
    reference_scenario,
    simulate_choices,
    simulate_population,
)
from app.service.trip_generation import fit_linear, fit_negbin
from app.utils.logger import StructuredLogger, get_logger
from app.utils.uploader import is_s3_uri, publish_document

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_NOT_CONVERGED = 2
EXIT_VALIDATION_FAILED = 3

GRADIENT_CHECK_TOLERANCE = 1e-6
PROBABILITY_CHECK_TOLERANCE = 1e-10
RANDOM_POINT_SD = 0.5
RANDOM_SCALE_RANGE = (0.2, 5.0)

SIGNIFICANCE_LEGEND = "Signif.: 0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1 ' ' 1"

FORECAST_FILES = {
    "base_cells": "demand_base.csv",
    "alt_cells": "demand_alt.csv",
    "base_persons": "person_trips_base.csv",
    "alt_persons": "person_trips_alt.csv",
    "induced": "induced_travel.json",
}
SIMULATION_FILES = {
    "regions": "regions.csv",
    "persons": "persons.csv",
    "rp": "rp_trips.csv",
    "sp": "sp_responses.csv",
    "tripgen": "tripgen_records.csv",
}

Outcome = Tuple[int, str, str]


@dataclass
class RunResult:
    """
    Resultado de un comando.

    Attributes:
        success (bool): True si el comando terminó con código 0.
        exit_code (int): Código de salida del proceso (0, 1, 2 o 3).
        message (str): Mensaje descriptivo del resultado.
        execution_id (str): Identificador único de la ejecución.
        execution_time (float): Tiempo total de ejecución en segundos.
        outputs (list): Rutas escritas, en orden de escritura.
        report (str): Tabla legible destinada a la salida estándar.

    Example:
        >>> result = ModelRunner().tripgen("tripgen.csv", "negbin", ["accessibility"], "fit.json", "Business")
        >>> if not result.success:
        ...     print(f"❌ {result.message}")
    """
    success: bool
    exit_code: int
    message: str
    execution_id: str
    execution_time: float
    outputs: List[str] = field(default_factory=list)
    report: str = ""


def is_expected_error(error: BaseException) -> bool:
    """Errores del dominio o de entrada; el resto son fallos internos."""
    return isinstance(error, (DemandModelError, ValueError, OSError, KeyError))


def exit_code_for(error: BaseException) -> int:
    """
    Errores de entrada (incluido un punto inicial no finito) → 1; fallos
    numéricos de la estimación → 2; fallos internos → 1.
    """
    if isinstance(error, (ValueError, OSError, KeyError)):
        return EXIT_INPUT_ERROR
    if isinstance(error, (EstimationError, LikelihoodError)):
        return EXIT_NOT_CONVERGED
    return EXIT_INPUT_ERROR


def output_path(directory: str, name: str) -> str:
    if is_s3_uri(directory):
        return posixpath.join(directory, name)
    return os.path.join(directory, name)


def random_points(spec: ModelSpec, count: int, seed: int,
                  column_scales: Optional[Sequence[float]] = None) -> List[np.ndarray]:
    """
    Puntos aleatorios del espacio libre: N(0, 0.5²) por coordenada dividida
    por max(1, escala de su columna de diseño) y μ uniforme en escala log
    entre 0.2 y 5.
    """
    rng = np.random.default_rng(seed)
    layout = spec.parameter_layout()
    divisor = np.ones(len(layout))
    if column_scales is not None:
        divisor = np.maximum(1.0, np.asarray(column_scales, dtype=float))
    points = []
    for _ in range(count):
        theta = rng.normal(0.0, RANDOM_POINT_SD, len(layout)) / divisor
        if LOG_SCALE in layout:
            low, high = RANDOM_SCALE_RANGE
            theta[layout[LOG_SCALE]] = rng.uniform(math.log(low), math.log(high))
        points.append(theta)
    return points


def format_estimation_table(result: EstimationResult) -> str:
    """Estimación, error estándar, z, p y código de significancia, seguidos del ajuste y el VOT."""
    frame = result.to_frame()
    lines = [
        f"Modelo {result.spec.purpose.value} ({result.spec.sp_structure.value})",
        frame.to_string(index=False, float_format=lambda v: f"{v:.6g}", na_rep="-"),
        "",
        f"LL0                 {result.ll0:.2f}",
        f"LL1                 {result.ll1:.2f}",
        f"rho                 {result.rho:.4f}",
        f"rho ajustado        {result.rho_adj:.4f}",
        f"K                   {result.k}",
        f"Observaciones RP/SP {result.n_rp}/{result.n_sp}",
    ]
    for name, value in result.vot.items():
        lines.append(f"VOT {name} (VND/h)  {value:,.2f}")
    status = "sí" if result.converged else "no"
    lines += [f"Convergió: {status} ({result.convergence_reason}, {result.iterations} iteraciones)",
              SIGNIFICANCE_LEGEND]
    return "\n".join(lines)


def _or_nan(value: Optional[float]) -> float:
    return math.nan if value is None else float(value)


def format_regression_table(fit: RegressionFit, purpose: Purpose) -> str:
    codes = fit.significance()
    frame = pd.DataFrame({
        "variable": list(fit.names),
        "coeficiente": [fit.coefficients[name] for name in fit.names],
        "error_std": [_or_nan(fit.std_errors.get(name)) for name in fit.names],
        "estadistico": [_or_nan(fit.t_values.get(name)) for name in fit.names],
        "p": [_or_nan(fit.p_values.get(name)) for name in fit.names],
        "signif": [codes[name] for name in fit.names],
    })
    lines = [f"Generación de viajes {purpose.value} ({fit.kind}, n={fit.n})",
             frame.to_string(index=False, float_format=lambda v: f"{v:.6g}", na_rep="-"), ""]
    if fit.kind == "linear":
        lines += [f"R²           {fit.r2:.4f}", f"R² ajustado  {fit.adj_r2:.4f}", f"sigma        {fit.sigma:.4f}"]
    else:
        fixed = " (fijo)" if fit.theta_fixed else ""
        lines += [f"theta        {fit.theta:.4f}{fixed}", f"2·loglik     {fit.two_loglik:.3f}",
                  f"devianza nula / residual  {fit.null_deviance:.3f} / {fit.residual_deviance:.3f}"]
    lines.append(SIGNIFICANCE_LEGEND)
    return "\n".join(lines)


def check_scenario(scenario: Scenario, spec: ModelSpec) -> None:
    """
    Raises:
        ScenarioError: Si el escenario ofrece modos que el modelo no estimó.
    """
    unknown = scenario.modes - spec.universe(DatasetKind.FORECAST)
    if unknown:
        raise ScenarioError(
            f"El escenario '{scenario.name}' ofrece modos sin utilidad en el modelo "
            f"{spec.purpose.value}: {', '.join(mode_labels(unknown))}")


class ModelRunner:
    """
    Servicio que ejecuta los comandos de la herramienta.

    Args:
        execution_id (str, optional): ID de la ejecución; por defecto un UUID corto.
        threads (int, optional): Hilos de evaluación; por defecto `config.THREADS`.
        deterministic (bool, optional): Reducción en orden fijo; por defecto
            `config.DETERMINISTIC`.

    Example:
        >>> runner = ModelRunner(threads=2, deterministic=True)
        >>> result = runner.validate("fixtures/business.ini", "rp.csv", "sp.csv",
        ...                          "persons.csv", "fixtures/regions.csv", points=5)
        >>> print(result.report)
    """

    def __init__(self, execution_id: Optional[str] = None, threads: Optional[int] = None,
                 deterministic: Optional[bool] = None):
        self.execution_id = execution_id or str(uuid.uuid4())[:8]
        self.logger = StructuredLogger(logger, self.execution_id)
        self.start_time = time.time()
        self.threads = threads or config.THREADS
        self.deterministic = config.DETERMINISTIC if deterministic is None else deterministic
        self.outputs: List[str] = []
        if self.threads < 1:
            raise ValueError("threads debe ser al menos 1")

    # --- Comandos -----------------------------------------------------------

    def estimate(self, spec_path: str, rp_path: Optional[str], sp_path: Optional[str],
                 persons_path: str, regions_path: str, out_path: str,
                 start_path: Optional[str] = None, tolerance: Optional[float] = None,
                 max_iterations: Optional[int] = None) -> RunResult:
        """
        Estima el modelo conjunto y escribe el documento de resultados.

        Si la estimación no converge el documento se escribe igual (resultado
        parcial) y el código de salida es 2.

        Args:
            spec_path (str): Archivo de especificación.
            rp_path (str, optional): Viajes RP en formato largo.
            sp_path (str, optional): Respuestas SP en formato largo.
            persons_path (str): Tabla de personas.
            regions_path (str): Tabla de regiones.
            out_path (str): Documento de resultados (local o s3://).
            start_path (str, optional): Punto inicial (resultados o mapa de parámetros).
            tolerance (float, optional): Tolerancia de la norma del gradiente.
            max_iterations (int, optional): Tope de iteraciones.

        Returns:
            RunResult: Código 0 si converge, 2 si no, 1 ante errores de entrada.
        """
        def action() -> Outcome:
            spec = load_spec(spec_path)
            regions = load_regions(regions_path)
            persons = load_persons(persons_path)
            rp = load_rp_dataset(rp_path, persons, spec, regions) if rp_path else None
            sp = load_sp_dataset(sp_path, persons, spec, regions) if sp_path else None
            if rp is None and sp is None:
                raise ValueError("Se requiere al menos un archivo de datos (--rp o --sp)")
            start = load_parameters(start_path, spec) if start_path else None
            controls = EstimationControls(
                gradient_tolerance=tolerance or config.GRADIENT_TOLERANCE,
                max_iterations=max_iterations or config.MAX_ITERATIONS,
                threads=self.threads,
                deterministic=self.deterministic,
            )
            result = estimate(rp, sp, spec, start=start, controls=controls, execution_id=self.execution_id)
            self._write(write_results, result, out_path)
            report = format_estimation_table(result)
            if not result.converged:
                return (EXIT_NOT_CONVERGED,
                        f"La estimación no convergió ({result.convergence_reason}, {result.iterations} "
                        f"iteraciones); resultados parciales en {out_path}", report)
            return EXIT_OK, f"Estimación convergida: LL1={result.ll1:.4f}, rho={result.rho:.4f}", report

        return self._run("estimate", action)

    def tripgen(self, records_path: str, kind: str, covariates: Sequence[str], out_path: str,
                purpose: str, intercept: str = "free", theta: Optional[float] = None) -> RunResult:
        """Ajusta la regresión de generación de viajes de un propósito y escribe el ajuste."""
        def action() -> Outcome:
            target = Purpose.parse(purpose)
            records = load_tripgen_records(records_path)
            if kind == "linear":
                fit = fit_linear(records, covariates, intercept_mode=intercept)
            elif kind == "negbin":
                fit = fit_negbin(records, covariates, theta=theta)
            else:
                raise ValueError(f"Modelo de generación desconocido: '{kind}'")
            self._write(write_regression_fit, fit, out_path, target)
            return EXIT_OK, f"Ajuste {fit.kind} de {target.value} escrito (n={fit.n})", \
                format_regression_table(fit, target)

        return self._run("tripgen", action)

    def accessibility(self, model_path: str, scenario_path: str, out_path: str,
                      regions_path: Optional[str] = None, persons_path: Optional[str] = None,
                      mu3: Optional[float] = None) -> RunResult:
        """
        Accesibilidad logsum por origen del escenario o, con `persons_path`,
        por persona en su región de residencia.
        """
        def action() -> Outcome:
            result = load_results(model_path)
            spec, params = result.spec, result.estimates
            regions = load_regions(regions_path) if regions_path else None
            scenario = load_scenario(scenario_path, regions)
            check_scenario(scenario, spec)
            scale = config.ACCESSIBILITY_MU3 if mu3 is None else mu3
            rows = []
            if persons_path:
                for person in load_persons(persons_path):
                    rows.append((person.home_region, person.id, spec.purpose.value,
                                 accessibility(person.home_region, scenario, params, spec, scale, person)))
            else:
                for origin in sorted({origin for origin, _ in scenario.od_pairs}):
                    rows.append((origin, "", spec.purpose.value,
                                 accessibility(origin, scenario, params, spec, scale)))
            frame = pd.DataFrame(rows, columns=["origin", "person_id", "purpose", "accessibility"])
            self._write(publish_frame, frame, out_path)
            report = frame.to_string(index=False, float_format=lambda v: f"{v:.6f}")
            return EXIT_OK, f"Accesibilidad calculada para {len(frame)} fila(s)", report

        return self._run("accessibility", action)

    def forecast(self, model_paths: Sequence[str], tripgen_paths: Sequence[str], scenario_path: str,
                 base_scenario_path: str, population_path: str, out_dir: str,
                 regions_path: Optional[str] = None, mu3: Optional[float] = None) -> RunResult:
        """
        Pronostica la demanda en el escenario base y en el alternativo y
        escribe ambas tablas más el informe de viajes inducidos.

        Args:
            model_paths: Documentos de resultados, uno por propósito.
            tripgen_paths: Documentos de ajustes de generación.
            scenario_path (str): Escenario alternativo.
            base_scenario_path (str): Escenario base.
            population_path (str): Personas a pronosticar.
            out_dir (str): Directorio (o prefijo s3://) de salida.
            regions_path (str, optional): Tabla de regiones si los escenarios no la traen.
            mu3 (float, optional): Parámetro de la accesibilidad.

        Returns:
            RunResult: Código 1 si modelos, ajustes y escenarios no son compatibles.
        """
        def action() -> Outcome:
            models: Dict[Purpose, EstimationResult] = {}
            for path in model_paths:
                result = load_results(path)
                purpose = result.spec.purpose
                if purpose in models:
                    raise ScenarioError(f"Hay dos modelos para el propósito {purpose.value}")
                models[purpose] = result
            fits: Dict[Purpose, RegressionFit] = {}
            for path in tripgen_paths:
                fits.update(load_regression_fits(path))
            missing = [purpose.value for purpose in models if purpose not in fits]
            if missing:
                raise ScenarioError(f"Faltan ajustes de generación para: {', '.join(missing)}")

            regions = load_regions(regions_path) if regions_path else None
            base = load_scenario(base_scenario_path, regions)
            alt = load_scenario(scenario_path, regions)
            for scenario in (base, alt):
                for result in models.values():
                    check_scenario(scenario, result.spec)
            population = load_persons(population_path)

            specs = {purpose: result.spec for purpose, result in models.items()}
            params = {purpose: result.estimates for purpose, result in models.items()}
            selected = {purpose: fits[purpose] for purpose in models}
            scale = config.ACCESSIBILITY_MU3 if mu3 is None else mu3
            self.logger.info("Pronóstico iniciado", personas=len(population),
                             propositos=[p.value for p in models], base=base.name, alternativo=alt.name)
            base_table = forecast_demand(population, base, params, selected, specs, scale, self.threads)
            alt_table = forecast_demand(population, alt, params, selected, specs, scale, self.threads)
            report = induced_travel(base_table, alt_table)

            self._write(write_demand_table, base_table, output_path(out_dir, FORECAST_FILES["base_cells"]))
            self._write(write_demand_table, alt_table, output_path(out_dir, FORECAST_FILES["alt_cells"]))
            self._write(write_person_trips, base_table, output_path(out_dir, FORECAST_FILES["base_persons"]))
            self._write(write_person_trips, alt_table, output_path(out_dir, FORECAST_FILES["alt_persons"]))
            self._write(write_induced_report, report, output_path(out_dir, FORECAST_FILES["induced"]))

            table = "\n".join([
                f"Escenario base '{base.name}' vs alternativo '{alt.name}'",
                report.by_mode.to_string(index=False, float_format=lambda v: f"{v:.4f}", na_rep="-"),
                "",
                "Transferencia modal",
                report.shift_matrix.to_string(float_format=lambda v: f"{v:.4f}"),
                "",
                f"Δ viajes {report.delta_trips:+.4f}   Δ VMT {report.delta_vmt:+.4f}",
            ])
            return EXIT_OK, f"Pronóstico escrito en {out_dir}: Δ viajes={report.delta_trips:+.4f}", table

        return self._run("forecast", action)

    def validate(self, spec_path: str, rp_path: Optional[str], sp_path: Optional[str],
                 persons_path: str, regions_path: str, points: int = 10, seed: int = 0,
                 replay_path: Optional[str] = None, out_path: Optional[str] = None) -> RunResult:
        """
        Verifica el motor en puntos aleatorios del espacio de parámetros.

        En cada punto compara el gradiente analítico con diferencias centrales
        (error relativo < 1e-6) y la probabilidad de cada alternativa elegida
        con la enumeración directa (diferencia < 1e-10). El primer punto que
        falla se serializa para reproducirlo con `replay_path`.

        Returns:
            RunResult: Código 0 si todos los puntos pasan, 3 si alguno falla.
        """
        def action() -> Outcome:
            if replay_path is None and points < 1:
                raise ValueError("--points debe ser al menos 1")
            spec = load_spec(spec_path)
            regions = load_regions(regions_path)
            persons = load_persons(persons_path)
            rp = load_rp_dataset(rp_path, persons, spec, regions) if rp_path else None
            sp = load_sp_dataset(sp_path, persons, spec, regions) if sp_path else None
            if rp is None and sp is None:
                raise ValueError("Se requiere al menos un archivo de datos (--rp o --sp)")
            observations = [(o, DatasetKind.RP) for o in (rp or ())] + [(o, DatasetKind.SP) for o in (sp or ())]
            names = list(spec.parameter_layout())

            worst_gradient = worst_probability = 0.0
            failure = None
            with LikelihoodEvaluator(rp, sp, spec, threads=self.threads, deterministic=self.deterministic) as ev:
                if replay_path:
                    thetas = [load_parameters(replay_path, spec).values]
                else:
                    thetas = random_points(spec, points, seed, ev.column_scales())
                for index, theta in enumerate(thetas):
                    try:
                        gradient_error = gradient_check(ev, theta)
                        probability_error = self._probability_error(ev, theta, observations, spec)
                    except (LikelihoodError, OverflowError) as e:
                        gradient_error = probability_error = math.inf
                        self.logger.warning("Punto no evaluable", punto=index, error=str(e))
                    worst_gradient = max(worst_gradient, gradient_error)
                    worst_probability = max(worst_probability, probability_error)
                    failed = (gradient_error >= GRADIENT_CHECK_TOLERANCE
                              or probability_error >= PROBABILITY_CHECK_TOLERANCE)
                    if failed and failure is None:
                        failure = {
                            "point": index,
                            "seed": seed,
                            "gradient_error": gradient_error,
                            "probability_error": probability_error,
                            "parameters": dict(zip(names, (float(v) for v in theta))),
                        }

            summary = {
                "points": len(thetas),
                "seed": seed,
                "worst_gradient_error": worst_gradient,
                "worst_probability_error": worst_probability,
                "passed": failure is None,
                "failure": failure,
            }
            if out_path:
                self._write(publish_document, dumps_document(summary), out_path)
            lines = [f"Puntos evaluados            {len(thetas)}",
                     f"Peor error del gradiente    {worst_gradient:.3e}",
                     f"Peor error de probabilidad  {worst_probability:.3e}"]
            if failure is not None:
                lines += ["", "Punto fallido (usar con --replay):", dumps_document(failure["parameters"]).rstrip()]
                return EXIT_VALIDATION_FAILED, f"La validación falló en el punto {failure['point']}", "\n".join(lines)
            return EXIT_OK, f"Validación superada en {len(thetas)} punto(s)", "\n".join(lines)

        return self._run("validate", action)

    def simulate(self, spec_path: str, params_path: str, n: int, seed: int, out_dir: str,
                 trips_per_person: int = 1, sp_scenarios: Optional[int] = None,
                 scenario_path: Optional[str] = None, regions_path: Optional[str] = None,
                 include_hsr: bool = True) -> RunResult:
        """
        Simula una encuesta completa con parámetros conocidos y la escribe en
        los formatos que leen los cargadores: regiones, personas, viajes RP,
        respuestas SP y registros de generación (con la accesibilidad de cada
        persona bajo los mismos parámetros).
        """
        def action() -> Outcome:
            spec = load_spec(spec_path)
            params = load_parameters(params_path, spec)
            if scenario_path:
                regions = load_regions(regions_path) if regions_path else None
                scenario = load_scenario(scenario_path, regions)
            else:
                scenario = reference_scenario(include_hsr=include_hsr)
            population = simulate_population(n, seed=seed)
            rp, sp = simulate_choices(population, scenario, params, spec, trips_per_person, seed, sp_scenarios)
            access = {person.id: accessibility(person.home_region, scenario, params, spec, person=person)
                      for person in population}
            records = derive_tripgen_records(population, rp, access, purpose=spec.purpose)

            self._write(write_regions, scenario.regions, output_path(out_dir, SIMULATION_FILES["regions"]))
            self._write(write_persons, population, output_path(out_dir, SIMULATION_FILES["persons"]))
            self._write(write_rp_dataset, rp, output_path(out_dir, SIMULATION_FILES["rp"]))
            self._write(write_sp_dataset, sp, output_path(out_dir, SIMULATION_FILES["sp"]))
            self._write(write_tripgen_records, records, output_path(out_dir, SIMULATION_FILES["tripgen"]))
            report = "\n".join([f"Personas            {len(population)}",
                                f"Observaciones RP    {rp.n_observations}",
                                f"Escenarios SP       {sp.n_observations}",
                                f"Semilla             {seed}"])
            return EXIT_OK, f"Simulación escrita en {out_dir}", report

        return self._run("simulate", action)

    # --- Auxiliares ---------------------------------------------------------

    def _probability_error(self, evaluator: LikelihoodEvaluator, theta: np.ndarray,
                           observations, spec: ModelSpec) -> float:
        engine = np.exp(evaluator.observation_logliks(theta))
        params = ParameterVector(np.asarray(theta, dtype=float), spec.parameter_layout())
        worst = 0.0
        for (observation, kind), probability in zip(observations, engine):
            if len(observation.leaves) > MAX_BRUTEFORCE_LEAVES:
                continue
            table = bruteforce_prob(observation, params, spec, kind)
            expected = table[(observation.chosen_destination, observation.chosen_mode)]
            worst = max(worst, abs(expected - float(probability)))
        return worst

    def _write(self, writer: Callable, payload, path: str, *args) -> None:
        writer(payload, path, *args)
        self.outputs.append(path)

    def _run(self, command: str, action: Callable[[], Outcome]) -> RunResult:
        self.logger.info("Comando iniciado", comando=command)
        try:
            exit_code, message, report = action()
        except Exception as e:
            code = exit_code_for(e)
            if not is_expected_error(e):
                self.logger.exception("Error inesperado", comando=command, tipo_error=type(e).__name__,
                                      mensaje_error=str(e))
                return self._create_result(code, f"Error inesperado en {command}: {type(e).__name__}: {e}")
            log = self.logger.error if code == EXIT_INPUT_ERROR else self.logger.exception
            log("Falló el comando", comando=command, tipo_error=type(e).__name__, mensaje_error=str(e))
            return self._create_result(code, f"Error en {command}: {e}")
        return self._create_result(exit_code, message, report)

    def _create_result(self, exit_code: int, message: str, report: str = "") -> RunResult:
        execution_time = time.time() - self.start_time
        result = RunResult(
            success=exit_code == EXIT_OK,
            exit_code=exit_code,
            message=message,
            execution_id=self.execution_id,
            execution_time=round(execution_time, 3),
            outputs=list(self.outputs),
            report=report,
        )
        self.logger.info("Comando completado",
                         exitoso=result.success,
                         codigo_salida=exit_code,
                         salidas=len(result.outputs),
                         tiempo_ejecucion=execution_time)
        return result
