import json
import os
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from app.errors import LikelihoodError, LoadError, SingularHessianError, StartPointError
from app.models.survey import TripGenRecord
from app.parsers.results_io import load_regression_fit, load_results
from app.parsers.survey_loader import write_tripgen_records
from app.service import model_runner
from app.service.model_runner import (
    EXIT_INPUT_ERROR,
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    EXIT_VALIDATION_FAILED,
    FORECAST_FILES,
    SIMULATION_FILES,
)
from main import main
from tests.conftest import BUSINESS_TRUE, FIXTURES

BUSINESS_SPEC = str(FIXTURES / "business.ini")


def survey_args(survey):
    return ["--spec", BUSINESS_SPEC, "--rp", survey["rp"], "--sp", survey["sp"],
            "--persons", survey["persons"], "--regions", survey["regions"]]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def survey(workdir):
    """Encuesta simulada por la línea de comandos, igual a la del fixture de negocio."""
    params = workdir / "truth.json"
    params.write_text(json.dumps(BUSINESS_TRUE), encoding="utf-8")
    out = workdir / "survey"
    code = main(["simulate", "--spec", BUSINESS_SPEC, "--params", str(params), "--n", "150",
                 "--seed", "11", "--trips-per-person", "2", "--out", str(out)])
    assert code == EXIT_OK
    return {name: str(out / filename) for name, filename in SIMULATION_FILES.items()}


@pytest.fixture(scope="module")
def fitted_model(workdir, survey):
    path = str(workdir / "business_results.json")
    code = main(["estimate", *survey_args(survey), "--out", path])
    assert code == EXIT_OK
    return path


@pytest.fixture(scope="module")
def tripgen_records(workdir):
    rng = np.random.default_rng(4)
    accessibility = rng.uniform(0.0, 4.0, 400)
    mean = np.exp(-0.5 + 0.4 * accessibility)
    counts = rng.negative_binomial(2.0, 2.0 / (2.0 + mean))
    records = [TripGenRecord(f"P{i:05d}", int(c), {"accessibility": float(a), "age": float(30 + i % 40)})
               for i, (c, a) in enumerate(zip(counts, accessibility))]
    path = str(workdir / "tripgen_records.csv")
    write_tripgen_records(records, path)
    return path


class TestSimulate:
    def test_writes_every_survey_file(self, survey):
        for path in survey.values():
            assert os.path.isfile(path)
        persons = pd.read_csv(survey["persons"])
        assert len(persons) == 150
        assert "income_mil_vnd" in persons.columns
        assert len(pd.read_csv(survey["tripgen"])) == 150

    def test_same_seed_same_bytes(self, workdir, survey):
        out = workdir / "survey_again"
        params = workdir / "truth.json"
        code = main(["simulate", "--spec", BUSINESS_SPEC, "--params", str(params), "--n", "150",
                     "--seed", "11", "--trips-per-person", "2", "--out", str(out)])
        assert code == EXIT_OK
        for name, filename in SIMULATION_FILES.items():
            with open(survey[name], "rb") as first, open(out / filename, "rb") as second:
                assert first.read() == second.read()


class TestEstimate:
    def test_converged_document(self, fitted_model):
        result = load_results(fitted_model)
        assert result.converged
        assert result.k == 16
        assert result.ll1 >= result.ll0

    def test_report_goes_to_stdout(self, workdir, survey, capsys):
        path = str(workdir / "reported.json")
        assert main(["estimate", *survey_args(survey), "--out", path, "--max-iter", "3"]) in (EXIT_OK,
                                                                                              EXIT_NOT_CONVERGED)
        captured = capsys.readouterr()
        assert "travel_cost" in captured.out
        assert captured.err.strip()

    def test_iteration_cap_still_writes_the_document(self, workdir, survey):
        path = str(workdir / "partial.json")
        assert main(["estimate", *survey_args(survey), "--out", path, "--max-iter", "1"]) == EXIT_NOT_CONVERGED
        result = load_results(path)
        assert not result.converged
        assert result.convergence_reason == "max_iterations"

    def test_restart_from_previous_results(self, workdir, survey, fitted_model):
        path = str(workdir / "restarted.json")
        assert main(["estimate", *survey_args(survey), "--out", path, "--start", fitted_model]) == EXIT_OK
        assert load_results(path).ll1 == pytest.approx(load_results(fitted_model).ll1, abs=1e-6)

    def test_thread_count_does_not_change_the_document(self, workdir, survey):
        documents = []
        for threads in ("1", "2", "8"):
            path = workdir / f"threads_{threads}.json"
            code = main(["estimate", *survey_args(survey), "--out", str(path), "--max-iter", "25",
                         "--threads", threads])
            assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
            documents.append(path.read_bytes())
        assert documents[0] == documents[1] == documents[2]

    def test_malformed_persons_file(self, workdir, survey):
        broken = workdir / "broken_persons.csv"
        lines = Path(survey["persons"]).read_text(encoding="utf-8").splitlines()
        fields = lines[2].split(",")
        fields[1] = "abc"
        lines[2] = ",".join(fields)
        broken.write_text("\n".join(lines) + "\n", encoding="utf-8")
        args = survey_args({**survey, "persons": str(broken)})
        assert main(["estimate", *args, "--out", str(workdir / "never.json")]) == EXIT_INPUT_ERROR
        assert not (workdir / "never.json").exists()

    def test_missing_input_file(self, workdir, survey):
        args = survey_args({**survey, "rp": str(workdir / "no_existe.csv")})
        assert main(["estimate", *args, "--out", str(workdir / "never.json")]) == EXIT_INPUT_ERROR

    def test_far_start_writes_a_document(self, workdir, survey):
        start = workdir / "far_start.json"
        far = {**BUSINESS_TRUE, "asc_bus_rp": -1e6, "asc_rail_rp": -1e6, "asc_car_rp": -1e6}
        start.write_text(json.dumps(far), encoding="utf-8")
        path = workdir / "far_start_results.json"
        code = main(["estimate", *survey_args(survey), "--out", str(path), "--start", str(start),
                     "--max-iter", "60"])
        assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
        result = load_results(str(path))
        assert (code == EXIT_OK) == result.converged
        assert not result.converged or result.gradient_norm < 1e-6

    def test_overflowing_start_is_an_input_error(self, workdir, survey):
        start = workdir / "overflow_start.json"
        start.write_text(json.dumps({**BUSINESS_TRUE, "log_scale": 800.0}), encoding="utf-8")
        path = workdir / "overflow_results.json"
        code = main(["estimate", *survey_args(survey), "--out", str(path), "--start", str(start)])
        assert code == EXIT_INPUT_ERROR
        assert not path.exists()

    def test_internal_failure_is_logged_with_traceback(self, workdir, survey, monkeypatch):
        def broken_estimate(*args, **kwargs):
            raise ZeroDivisionError("división por cero")

        monkeypatch.setattr(model_runner, "estimate", broken_estimate)
        runner = model_runner.ModelRunner(execution_id="fallo-interno")
        logged = []
        monkeypatch.setattr(runner.logger, "exception", lambda message, **context: logged.append(context))
        result = runner.estimate(BUSINESS_SPEC, survey["rp"], survey["sp"], survey["persons"],
                                 survey["regions"], str(workdir / "never_internal.json"))
        assert result.exit_code == EXIT_INPUT_ERROR
        assert result.message.startswith("Error inesperado en estimate")
        assert [entry["tipo_error"] for entry in logged] == ["ZeroDivisionError"]

    def test_usage_error(self):
        with pytest.raises(SystemExit) as info:
            main(["estimate", "--spec", BUSINESS_SPEC])
        assert info.value.code == EXIT_INPUT_ERROR


class TestValidate:
    def test_engine_passes(self, workdir, survey):
        report = workdir / "validation.json"
        code = main(["validate", *survey_args(survey), "--points", "3", "--seed", "5", "--out", str(report)])
        assert code == EXIT_OK
        summary = json.loads(report.read_text(encoding="utf-8"))
        assert summary["passed"] is True
        assert summary["points"] == 3
        assert summary["failure"] is None
        assert summary["worst_gradient_error"] < 1e-6
        assert summary["worst_probability_error"] < 1e-10

    def test_failure_is_serialized_and_replayable(self, workdir, survey, monkeypatch):
        report = workdir / "failed_validation.json"
        monkeypatch.setattr(model_runner, "gradient_check", lambda evaluator, theta: 1.0)
        code = main(["validate", *survey_args(survey), "--points", "2", "--seed", "9", "--out", str(report)])
        assert code == EXIT_VALIDATION_FAILED
        failure = json.loads(report.read_text(encoding="utf-8"))["failure"]
        assert failure["point"] == 0
        assert failure["seed"] == 9
        assert len(failure["parameters"]) == 16

        replay = workdir / "replay.json"
        replay.write_text(json.dumps({"parameters": failure["parameters"]}), encoding="utf-8")
        monkeypatch.undo()
        assert main(["validate", *survey_args(survey), "--replay", str(replay)]) == EXIT_OK

    def test_points_must_be_positive(self, survey):
        with pytest.raises(SystemExit) as info:
            main(["validate", *survey_args(survey), "--points", "0"])
        assert info.value.code == EXIT_INPUT_ERROR


class TestTripGeneration:
    def test_negbin_fit(self, workdir, tripgen_records):
        path = str(workdir / "tripgen_business.json")
        code = main(["tripgen", "--records", tripgen_records, "--kind", "negbin",
                     "--covariates", "accessibility", "--purpose", "business", "--out", path])
        assert code == EXIT_OK
        fit = load_regression_fit(path, "business")
        assert fit.kind == "negbin"
        assert fit.names == ("intercept", "accessibility")
        assert fit.coefficients["accessibility"] > 0

    def test_linear_fit_with_fixed_intercept(self, workdir, tripgen_records):
        path = str(workdir / "tripgen_linear.json")
        code = main(["tripgen", "--records", tripgen_records, "--kind", "linear", "--intercept", "fixed-zero",
                     "--covariates", "accessibility,age", "--purpose", "non_business", "--out", path])
        assert code == EXIT_OK
        fit = load_regression_fit(path, "non_business")
        assert fit.coefficients["intercept"] == 0.0

    def test_unknown_covariate(self, workdir, tripgen_records):
        code = main(["tripgen", "--records", tripgen_records, "--kind", "linear", "--covariates", "income",
                     "--purpose", "business", "--out", str(workdir / "never.json")])
        assert code == EXIT_INPUT_ERROR


class TestForecast:
    @pytest.fixture(scope="class")
    def business_fit_path(self, workdir, tripgen_records):
        path = str(workdir / "tripgen_forecast.json")
        code = main(["tripgen", "--records", tripgen_records, "--kind", "negbin",
                     "--covariates", "accessibility", "--purpose", "business", "--out", path])
        assert code == EXIT_OK
        return path

    def test_accessibility_by_origin_and_person(self, workdir, fitted_model, survey):
        by_origin = workdir / "access.csv"
        args = ["accessibility", "--model", fitted_model, "--scenario", str(FIXTURES / "scenario_hsr.ini")]
        assert main([*args, "--out", str(by_origin)]) == EXIT_OK
        frame = pd.read_csv(by_origin)
        assert list(frame["origin"]) == [1]
        by_person = workdir / "access_persons.csv"
        assert main([*args, "--persons", survey["persons"], "--out", str(by_person)]) == EXIT_OK
        assert len(pd.read_csv(by_person)) == 150

    def test_forecast_writes_tables_and_induced_report(self, workdir, fitted_model, business_fit_path, survey):
        out = workdir / "forecast"
        code = main(["forecast", "--model", fitted_model, "--tripgen", business_fit_path,
                     "--scenario", str(FIXTURES / "scenario_hsr.ini"),
                     "--base-scenario", str(FIXTURES / "scenario_base.ini"),
                     "--population", survey["persons"], "--out", str(out)])
        assert code == EXIT_OK
        for filename in FORECAST_FILES.values():
            assert (out / filename).is_file()
        base = pd.read_csv(out / FORECAST_FILES["base_cells"])
        alt = pd.read_csv(out / FORECAST_FILES["alt_cells"])
        assert "HSR" not in set(base["mode"])
        assert "HSR" in set(alt["mode"])
        induced = json.loads((out / FORECAST_FILES["induced"]).read_text(encoding="utf-8"))
        assert induced["total"]["delta_trips"] == pytest.approx(alt["trips"].sum() - base["trips"].sum(),
                                                               abs=1e-6)

    def test_missing_trip_generation_fit(self, workdir, fitted_model, tripgen_records, survey):
        linear = str(workdir / "tripgen_only_non_business.json")
        assert main(["tripgen", "--records", tripgen_records, "--kind", "linear", "--covariates", "accessibility",
                     "--purpose", "non_business", "--out", linear]) == EXIT_OK
        code = main(["forecast", "--model", fitted_model, "--tripgen", linear,
                     "--scenario", str(FIXTURES / "scenario_hsr.ini"),
                     "--base-scenario", str(FIXTURES / "scenario_base.ini"),
                     "--population", survey["persons"], "--out", str(workdir / "never")])
        assert code == EXIT_INPUT_ERROR


class TestExitCodes:
    @pytest.mark.parametrize("error, code", [
        (LoadError("fila inválida", row=3), EXIT_INPUT_ERROR),
        (StartPointError("objetivo no finito"), EXIT_INPUT_ERROR),
        (SingularHessianError("singular"), EXIT_NOT_CONVERGED),
        (LikelihoodError("probabilidad nula"), EXIT_NOT_CONVERGED),
        (ZeroDivisionError("interno"), EXIT_INPUT_ERROR),
    ])
    def test_error_mapping(self, error, code):
        assert model_runner.exit_code_for(error) == code

    def test_internal_errors_are_not_expected(self):
        assert model_runner.is_expected_error(StartPointError("x"))
        assert model_runner.is_expected_error(FileNotFoundError("x"))
        assert not model_runner.is_expected_error(OverflowError("x"))
