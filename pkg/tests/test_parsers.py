import json

import pytest
from botocore.exceptions import ClientError

from app.errors import LoadError, ParameterError, ScenarioError, SpecError
from app.models.choice_model import Mode, Purpose
from app.models.results import EstimationControls
from app.parsers.results_io import (
    load_parameters,
    load_regression_fit,
    load_results,
    write_parameters,
    write_regression_fit,
    write_results,
)
from app.parsers.scenario_loader import dump_scenario, load_scenario, parse_scenario
from app.parsers.spec_loader import dump_spec, load_spec, parse_spec
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
from app.service.estimation import estimate, loglik_joint
from app.service.synthetic import reference_scenario, simulate_choices, simulate_population
from app.service.trip_generation import fit_linear
from app.utils import uploader
from tests.conftest import BUSINESS_TRUE, FIXTURES

RP_HEADER = ("obs_id,person_id,purpose,season,travel_party,destination,mode,chosen,"
             "travel_cost_mil_vnd,in_vehicle_time_h,access_egress_time_h")

PERSON_HEADER = "person_id,age,gender,marital,occupation_class,education,income_mil_vnd,working,home_region"

MINIMAL_SPEC = """
[model]
purpose = business

[universe]
rp = Bus, Car
sp = Bus, Car, HSR

[normalization]
base_mode = Car

[mode_terms]
travel_cost = alternative-attribute | travel_cost | | All
asc_bus = constant | | Bus | RP
asc_bus~sp = constant | | Bus | SP
"""

MINIMAL_SCENARIO = """
[scenario]
name = mínimo

[od.1.2]
distance_km = 160
modes = Bus

[los.1.2.Bus]
travel_cost_mil_vnd = 0.25
in_vehicle_time_h = 3.5
access_egress_time = 0.5
"""


def write_text(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def rp_rows(*rows):
    lines = [RP_HEADER]
    for destination, mode, chosen in rows:
        lines.append(f"v1,P00001,business,other,other,{destination},{mode},{chosen},0.2,3.0,0.5")
    return "\n".join(lines) + "\n"


@pytest.fixture(scope="module")
def loaded_persons(business_files):
    return load_persons(business_files["persons"])


@pytest.fixture(scope="module")
def loaded_regions(business_files):
    return load_regions(business_files["regions"])


class TestSpecFiles:
    @pytest.mark.parametrize("filename", ["business.ini", "nonbusiness.ini"])
    def test_dump_and_parse_agree(self, filename):
        spec = load_spec(str(FIXTURES / filename))
        assert parse_spec(dump_spec(spec)) == spec

    def test_fixture_sizes(self, business_spec, non_business_spec):
        assert len(business_spec.parameter_layout()) == 16
        assert len(non_business_spec.parameter_layout()) == 33

    def test_tagged_keys_share_a_coefficient(self):
        spec = parse_spec(MINIMAL_SPEC)
        assert [t.coefficient_name for t in spec.mode_terms].count("asc_bus") == 2
        assert list(spec.parameter_layout())[:2] == ["travel_cost", "asc_bus"]
        assert spec.base_mode is Mode.CAR

    def test_missing_section(self):
        text = MINIMAL_SPEC.replace("[universe]", "[universo]")
        with pytest.raises(SpecError, match="universe"):
            parse_spec(text)

    def test_term_needs_four_fields(self):
        text = MINIMAL_SPEC.replace("asc_bus = constant | | Bus | RP", "asc_bus = constant | Bus | RP")
        with pytest.raises(SpecError):
            parse_spec(text)

    def test_lambda_covariate_needs_two_fields(self):
        with pytest.raises(SpecError):
            parse_spec(MINIMAL_SPEC + "\n[lambda]\nlambda_age = age\n")

    def test_unknown_mode(self):
        with pytest.raises(SpecError):
            parse_spec(MINIMAL_SPEC.replace("rp = Bus, Car", "rp = Bus, Ferry"))

    def test_distance_thresholds_must_be_ordered(self):
        rules = "\n[choice_set_rules]\nshort_distance_km = 900\nlong_distance_km = 300\n"
        with pytest.raises(SpecError):
            parse_spec(MINIMAL_SPEC + rules)

    def test_missing_file(self, tmp_path):
        with pytest.raises(SpecError):
            load_spec(str(tmp_path / "no_existe.ini"))


class TestScenarioFiles:
    def test_minimal_scenario_uses_the_region_table(self, regions):
        scenario = parse_scenario(MINIMAL_SCENARIO, regions)
        los = scenario.los(1, 2, Mode.BUS)
        assert scenario.name == "mínimo"
        assert (los.travel_cost, los.in_vehicle_time, los.access_egress_time) == (0.25, 3.5, 0.5)
        assert los.frequency == 0.0
        assert scenario.modes == frozenset({Mode.BUS})

    @pytest.mark.parametrize("include_hsr", [False, True])
    def test_dump_and_parse_agree(self, include_hsr):
        scenario = reference_scenario(include_hsr)
        parsed = parse_scenario(dump_scenario(scenario))
        assert parsed.od_pairs == scenario.od_pairs
        assert parsed.level_of_service == scenario.level_of_service
        assert parsed.regions == scenario.regions

    def test_unknown_section(self, regions):
        with pytest.raises(ScenarioError):
            parse_scenario(MINIMAL_SCENARIO + "\n[tarifas]\nx = 1\n", regions)

    def test_bad_section_name(self, regions):
        with pytest.raises(ScenarioError):
            parse_scenario(MINIMAL_SCENARIO + "\n[od.1]\ndistance_km = 10\n", regions)

    def test_unknown_level_of_service_key(self, regions):
        with pytest.raises(ScenarioError, match="speed"):
            parse_scenario(MINIMAL_SCENARIO + "speed = 80\n", regions)

    def test_incomplete_level_of_service(self, regions):
        text = MINIMAL_SCENARIO.replace("access_egress_time = 0.5\n", "")
        with pytest.raises(ScenarioError, match="access_egress_time"):
            parse_scenario(text, regions)

    def test_offered_mode_without_level_of_service(self, regions):
        text = MINIMAL_SCENARIO.replace("modes = Bus", "modes = Bus, Car")
        with pytest.raises(ScenarioError):
            parse_scenario(text, regions)

    def test_no_od_pairs(self, regions):
        with pytest.raises(ScenarioError):
            parse_scenario("[scenario]\nname = vacío\n", regions)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioError):
            load_scenario(str(tmp_path / "no_existe.ini"))


class TestSurveyFiles:
    def test_written_survey_reloads_with_the_same_likelihood(self, business_files, business_survey,
                                                             business_spec, business_truth,
                                                             loaded_persons, loaded_regions):
        population, rp, sp = business_survey
        loaded_rp = load_rp_dataset(business_files["rp"], loaded_persons, business_spec, loaded_regions)
        loaded_sp = load_sp_dataset(business_files["sp"], loaded_persons, business_spec, loaded_regions)
        assert len(loaded_persons) == len(population)
        assert [o.id for o in loaded_rp] == [o.id for o in rp]
        assert [(o.chosen_destination, o.chosen_mode) for o in loaded_sp] == \
            [(o.chosen_destination, o.chosen_mode) for o in sp]
        original = loglik_joint(rp, sp, business_truth, business_spec)
        reloaded = loglik_joint(loaded_rp, loaded_sp, business_truth, business_spec)
        assert reloaded == pytest.approx(original, rel=1e-8)

    def test_survey_sized_files(self, tmp_path, business_spec, business_truth, non_business_spec,
                                non_business_truth, hsr_scenario):
        business_people = simulate_population(608, seed=3)
        _, sp = simulate_choices(business_people, hsr_scenario, business_truth, business_spec, 1, seed=3)
        non_business_people = simulate_population(446, seed=4)
        rp, _ = simulate_choices(non_business_people, hsr_scenario, non_business_truth, non_business_spec, 1,
                                 seed=4, sp_scenarios=0)
        paths = {name: str(tmp_path / f"{name}.csv") for name in ("regions", "business", "sp", "people", "rp")}
        write_regions(hsr_scenario.regions, paths["regions"])
        write_persons(business_people, paths["business"])
        write_persons(non_business_people, paths["people"])
        write_sp_dataset(sp, paths["sp"])
        write_rp_dataset(rp, paths["rp"])
        regions = load_regions(paths["regions"])

        loaded_sp = load_sp_dataset(paths["sp"], load_persons(paths["business"]), business_spec, regions)
        assert loaded_sp.n_scenarios == 2432
        assert loaded_sp.n_respondents == 608
        loaded_rp = load_rp_dataset(paths["rp"], load_persons(paths["people"]), non_business_spec, regions)
        assert loaded_rp.n_observations == 446

    def test_empty_data_section(self, tmp_path, business_spec, loaded_persons, regions):
        path = write_text(tmp_path / "rp.csv", RP_HEADER + "\n")
        assert load_rp_dataset(path, loaded_persons, business_spec, regions).n_observations == 0

    def test_regions(self, regions):
        assert sorted(regions) == list(range(1, 8))
        assert regions[7].distance_from_origin == 1720.0

    def test_non_numeric_value_reports_the_row(self, tmp_path):
        path = write_text(tmp_path / "persons.csv", "\n".join([
            PERSON_HEADER,
            "P1,40,male,married,official,bachelor,8.5,1,1",
            "P2,abc,female,single,official,bachelor,6.0,1,1",
        ]) + "\n")
        with pytest.raises(LoadError) as info:
            load_persons(path)
        assert info.value.row == 3
        assert "age" in str(info.value)

    def test_duplicate_person(self, tmp_path):
        path = write_text(tmp_path / "persons.csv", "\n".join([
            PERSON_HEADER,
            "P1,40,male,married,official,bachelor,8.5,1,1",
            "P1,41,male,married,official,bachelor,8.5,1,1",
        ]) + "\n")
        with pytest.raises(LoadError) as info:
            load_persons(path)
        assert info.value.row == 3

    def test_unsupported_unit_suffix(self, tmp_path):
        header = PERSON_HEADER.replace("income_mil_vnd", "income_usd")
        path = write_text(tmp_path / "persons.csv", header + "\nP1,40,male,married,official,bachelor,8.5,1,1\n")
        with pytest.raises(LoadError, match="Unidad no admitida") as info:
            load_persons(path)
        assert info.value.row == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(LoadError):
            load_persons(str(tmp_path / "no_existe.csv"))

    def test_rows_outside_the_choice_set_are_dropped(self, tmp_path, business_spec, loaded_persons, regions):
        path = write_text(tmp_path / "rp.csv", rp_rows(
            (2, "Bus", 1), (2, "ConventionalRail", 0), (2, "Car", 0), (2, "Airline", 0)))
        dataset = load_rp_dataset(path, loaded_persons, business_spec, regions)
        assert dataset.n_observations == 1
        assert {leaf.mode for leaf in dataset.observations[0].leaves} == \
            {Mode.BUS, Mode.CONVENTIONAL_RAIL, Mode.CAR}

    def test_chosen_mode_outside_the_choice_set(self, tmp_path, business_spec, loaded_persons, regions):
        path = write_text(tmp_path / "rp.csv", rp_rows(
            (2, "Bus", 0), (2, "ConventionalRail", 0), (2, "Car", 0), (2, "Airline", 1)))
        with pytest.raises(LoadError, match="chosen mode not in choice set") as info:
            load_rp_dataset(path, loaded_persons, business_spec, regions)
        assert info.value.row == 5

    def test_incomplete_block(self, tmp_path, business_spec, loaded_persons, regions):
        path = write_text(tmp_path / "rp.csv", rp_rows((2, "Bus", 1), (2, "Car", 0)))
        with pytest.raises(LoadError, match="Bloque incompleto") as info:
            load_rp_dataset(path, loaded_persons, business_spec, regions)
        assert "ConventionalRail" in str(info.value)

    def test_unknown_person(self, tmp_path, business_spec, loaded_persons, regions):
        path = write_text(tmp_path / "rp.csv", rp_rows((2, "Bus", 1)).replace("P00001", "P99999"))
        with pytest.raises(LoadError, match="Persona desconocida") as info:
            load_rp_dataset(path, loaded_persons, business_spec, regions)
        assert info.value.row == 2

    def test_unknown_region(self, tmp_path, business_spec, loaded_persons, regions):
        path = write_text(tmp_path / "rp.csv", rp_rows((9, "Bus", 1)))
        with pytest.raises(LoadError, match="Región desconocida"):
            load_rp_dataset(path, loaded_persons, business_spec, regions)

    def test_tripgen_records(self, tmp_path, business_survey):
        population, rp, _ = business_survey
        records = derive_tripgen_records(population, rp, 3.5, Purpose.BUSINESS)
        assert len(records) == len(population)
        assert sum(r.annual_trip_count for r in records) == rp.n_observations
        path = str(tmp_path / "tripgen.csv")
        write_tripgen_records(records, path)
        loaded = load_tripgen_records(path)
        assert [r.annual_trip_count for r in loaded] == [r.annual_trip_count for r in records]
        assert loaded[0].covariates == pytest.approx(records[0].covariates)
        assert loaded[0].covariates["accessibility"] == 3.5


class TestResultDocuments:
    @pytest.fixture(scope="class")
    def short_fit(self, business_survey, business_spec):
        _, rp, sp = business_survey
        controls = EstimationControls(max_iterations=3, compute_standard_errors=False)
        return estimate(rp, sp, business_spec, controls=controls, execution_id="test-io")

    def test_results_rewrite_is_byte_identical(self, tmp_path, short_fit):
        first, second = tmp_path / "a.json", tmp_path / "b.json"
        write_results(short_fit, str(first))
        loaded = load_results(str(first))
        write_results(loaded, str(second))
        assert first.read_bytes() == second.read_bytes()
        assert loaded.ll1 == short_fit.ll1
        assert loaded.estimates == short_fit.estimates

    def test_documents_have_sorted_keys(self, tmp_path, short_fit):
        path = tmp_path / "a.json"
        write_results(short_fit, str(path))
        document = json.loads(path.read_text(encoding="utf-8"))
        assert list(document) == sorted(document)
        assert document["spec_digest"] == short_fit.spec_digest

    def test_parameters_round_trip(self, tmp_path, business_spec, business_truth):
        path = str(tmp_path / "params.json")
        write_parameters(business_truth, path)
        assert load_parameters(path, business_spec) == business_truth

    def test_parameters_from_a_flat_map_and_a_result(self, tmp_path, business_spec, business_truth, short_fit):
        flat = write_text(tmp_path / "flat.json", json.dumps(BUSINESS_TRUE))
        assert load_parameters(flat, business_spec) == business_truth
        result_path = str(tmp_path / "result.json")
        write_results(short_fit, result_path)
        assert load_parameters(result_path, business_spec) == short_fit.estimates

    def test_parameters_must_be_a_map(self, tmp_path, business_spec):
        path = write_text(tmp_path / "params.json", json.dumps({"parameters": [1.0, 2.0]}))
        with pytest.raises(LoadError):
            load_parameters(path, business_spec)

    def test_parameters_must_match_the_spec(self, tmp_path, business_spec):
        path = write_text(tmp_path / "params.json", json.dumps({"parameters": {"travel_cost": -1.0}}))
        with pytest.raises(ParameterError):
            load_parameters(path, business_spec)

    def test_regression_fit_round_trip(self, tmp_path, business_survey):
        population, rp, _ = business_survey
        records = derive_tripgen_records(population, rp, 2.0, Purpose.BUSINESS)
        fit = fit_linear(records, ["age", "income"])
        path = str(tmp_path / "tripgen.json")
        write_regression_fit(fit, path, Purpose.BUSINESS)
        assert load_regression_fit(path, "business") == fit
        with pytest.raises(LoadError):
            load_regression_fit(path, Purpose.NON_BUSINESS)

    def test_malformed_json_reports_the_line(self, tmp_path, business_spec):
        path = write_text(tmp_path / "bad.json", '{\n  "parameters": {\n    "x": ,\n  }\n}\n')
        with pytest.raises(LoadError) as info:
            load_parameters(path, business_spec)
        assert info.value.row == 3

    def test_missing_document(self, tmp_path):
        with pytest.raises(LoadError):
            load_results(str(tmp_path / "no_existe.json"))


class FakeS3:
    def __init__(self, error=None):
        self.error = error
        self.calls = []

    def put_object(self, **kwargs):
        if self.error:
            raise self.error
        self.calls.append(kwargs)


class TestPublishing:
    def test_split_s3_uri(self):
        assert uploader.is_s3_uri("s3://bucket/results/a.json")
        assert not uploader.is_s3_uri("/tmp/a.json")
        assert uploader.split_s3_uri("s3://bucket/results/a.json") == ("bucket", "results/a.json")
        with pytest.raises(ValueError):
            uploader.split_s3_uri("s3://bucket")

    def test_local_destination_creates_directories(self, tmp_path):
        path = tmp_path / "nested" / "dir" / "doc.json"
        uploader.publish_document('{"a": 1}\n', str(path))
        assert path.read_text(encoding="utf-8") == '{"a": 1}\n'

    def test_s3_destination(self, monkeypatch, business_truth):
        client = FakeS3()
        monkeypatch.setattr(uploader, "_s3_client", lambda: client)
        write_parameters(business_truth, "s3://demanda/runs/params.json")
        (call,) = client.calls
        assert (call["Bucket"], call["Key"]) == ("demanda", "runs/params.json")
        assert call["ContentType"] == "application/json"
        assert json.loads(call["Body"].decode("utf-8"))["parameters"] == business_truth.as_dict()

    def test_failed_upload_is_an_os_error(self, monkeypatch):
        error = ClientError({"Error": {"Code": "500", "Message": "boom"}}, "PutObject")
        monkeypatch.setattr(uploader, "_s3_client", lambda: FakeS3(error))
        with pytest.raises(OSError):
            uploader.publish_document("{}", "s3://demanda/x.json")

    def test_empty_documents_are_not_uploaded(self, monkeypatch):
        client = FakeS3()
        monkeypatch.setattr(uploader, "_s3_client", lambda: client)
        assert uploader.upload_document_to_s3("", "demanda", "x.json") is False
        assert client.calls == []
