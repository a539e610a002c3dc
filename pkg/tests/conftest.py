# tests/conftest.py

import math
from pathlib import Path

import pytest

from app.parsers.spec_loader import load_spec
from app.parsers.survey_loader import (
    load_regions,
    write_persons,
    write_regions,
    write_rp_dataset,
    write_sp_dataset,
)
from app.service.parameters import pack_parameters
from app.service.synthetic import reference_scenario, simulate_choices, simulate_population

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

# Coeficientes de referencia del modelo de negocio
BUSINESS_REFERENCE = {
    "log_gdp": 0.84697,
    "travel_cost": -1.0421,
    "in_vehicle_time": -0.033467,
    "access_egress_time": -0.070339,
    "asc_bus_rp": -1.3365,
    "asc_rail_rp": -1.6237,
    "asc_airline_rp": 0.96742,
    "asc_car_rp": -1.5442,
    "asc_hsr_sp": 2.0118,
    "asc_airline_sp": 3.3378,
    "sd_airline": 61.556,
    "sd_lcc": 41.279,
    "log_scale": math.log(0.27038),
    "lambda_official_age": -0.0032074,
    "lambda_university_income": -0.053349,
    "lambda_constant": 1.5872,
}

# Coeficientes de referencia del modelo no laboral
NON_BUSINESS_REFERENCE = {
    "tourist_count": 0.0240,
    "summer_dest2": -0.2019,
    "summer_dest3": 1.0391,
    "summer_dest4": 1.0152,
    "summer_dest5": -0.6064,
    "summer_dest6": 0.4542,
    "summer_dest7": 0.7474,
    "attraction_eval": 0.3553,
    "travel_cost": -0.1378,
    "in_vehicle_time": -0.0243,
    "income_bus": -0.0505,
    "income_rail": -0.0340,
    "income_airline": 0.0134,
    "income_car": -0.0043,
    "income_hsr": 0.0051,
    "asc_bus_rp": 1.1401,
    "asc_rail_rp": 0.9473,
    "asc_airline_rp": 0.9216,
    "asc_car_rp": 1.6841,
    "asc_bus_sp": 0.6378,
    "asc_rail_sp": 0.5581,
    "asc_airline_sp": 0.2939,
    "asc_car_sp": 0.1946,
    "asc_hsr_sp": 0.2943,
    "sd_bus": 49.251,
    "sd_rail": 71.786,
    "sd_airline": 37.700,
    "sd_lcc": 74.581,
    "log_scale": math.log(4.6683),
    "lambda_married_age": -0.0125,
    "lambda_income_family": 1.5469,
    "lambda_working": -0.1470,
    "lambda_constant": 1.0696,
}

# Parámetros moderados para simular encuestas con variación en todas las alternativas
BUSINESS_TRUE = {
    "log_gdp": 0.6,
    "travel_cost": -0.8,
    "in_vehicle_time": -0.08,
    "access_egress_time": -0.3,
    "asc_bus_rp": -0.5,
    "asc_rail_rp": -0.7,
    "asc_airline_rp": 0.4,
    "asc_car_rp": -0.6,
    "asc_hsr_sp": 0.5,
    "asc_airline_sp": 0.6,
    "sd_airline": 0.8,
    "sd_lcc": 0.5,
    "log_scale": math.log(0.8),
    "lambda_official_age": -0.01,
    "lambda_university_income": -0.03,
    "lambda_constant": 0.8,
}

NON_BUSINESS_TRUE = {
    "tourist_count": 0.05,
    "summer_dest2": 0.3,
    "summer_dest3": -0.2,
    "summer_dest4": 0.4,
    "summer_dest5": 0.1,
    "summer_dest6": -0.3,
    "summer_dest7": 0.2,
    "attraction_eval": 0.3,
    "travel_cost": -0.6,
    "in_vehicle_time": -0.06,
    "income_bus": -0.05,
    "income_rail": -0.03,
    "income_airline": 0.02,
    "income_car": 0.01,
    "income_hsr": 0.01,
    "asc_bus_rp": 0.5,
    "asc_rail_rp": 0.4,
    "asc_airline_rp": 0.3,
    "asc_car_rp": 0.6,
    "asc_bus_sp": 0.3,
    "asc_rail_sp": 0.2,
    "asc_airline_sp": 0.1,
    "asc_car_sp": 0.1,
    "asc_hsr_sp": 0.3,
    "sd_bus": 0.6,
    "sd_rail": 0.5,
    "sd_airline": 0.7,
    "sd_lcc": 0.4,
    "log_scale": math.log(1.3),
    "lambda_married_age": -0.005,
    "lambda_income_family": 0.05,
    "lambda_working": -0.1,
    "lambda_constant": 0.6,
}


@pytest.fixture(scope="session")
def business_spec():
    return load_spec(str(FIXTURES / "business.ini"))


@pytest.fixture(scope="session")
def non_business_spec():
    return load_spec(str(FIXTURES / "nonbusiness.ini"))


@pytest.fixture(scope="session")
def regions():
    return load_regions(str(FIXTURES / "regions.csv"))


@pytest.fixture(scope="session")
def business_truth(business_spec):
    return pack_parameters(business_spec, BUSINESS_TRUE)


@pytest.fixture(scope="session")
def non_business_truth(non_business_spec):
    return pack_parameters(non_business_spec, NON_BUSINESS_TRUE)


@pytest.fixture(scope="session")
def hsr_scenario():
    return reference_scenario(include_hsr=True)


@pytest.fixture(scope="session")
def business_survey(business_spec, business_truth, hsr_scenario):
    """(personas, RP, SP) simulados con el modelo de negocio."""
    population = simulate_population(150, seed=11)
    rp, sp = simulate_choices(population, hsr_scenario, business_truth, business_spec, 2, seed=11)
    return population, rp, sp


@pytest.fixture(scope="session")
def non_business_survey(non_business_spec, non_business_truth, hsr_scenario):
    population = simulate_population(40, seed=5)
    rp, sp = simulate_choices(population, hsr_scenario, non_business_truth, non_business_spec, 1, seed=5)
    return population, rp, sp


@pytest.fixture(scope="session")
def business_files(tmp_path_factory, business_survey, hsr_scenario):
    """Encuesta de negocio escrita en los CSV que leen los cargadores."""
    population, rp, sp = business_survey
    directory = tmp_path_factory.mktemp("business_survey")
    paths = {name: str(directory / filename) for name, filename in (
        ("regions", "regions.csv"), ("persons", "persons.csv"), ("rp", "rp_trips.csv"), ("sp", "sp_responses.csv"))}
    write_regions(hsr_scenario.regions, paths["regions"])
    write_persons(population, paths["persons"])
    write_rp_dataset(rp, paths["rp"])
    write_sp_dataset(sp, paths["sp"])
    return paths
