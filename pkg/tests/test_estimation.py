import math

import numpy as np
import pytest

from app.errors import EstimationError, LikelihoodError, ParameterError, SingularHessianError, StartPointError
from app.models.choice_model import Mode
from app.models.results import EstimationControls, EstimationResult
from app.models.survey import RPDataset
from app.service.estimation import (
    LikelihoodEvaluator,
    estimate,
    fit_stats,
    gradient,
    gradient_check,
    loglik_joint,
    loglik_rp,
    loglik_sp,
    newton_refine,
    standard_errors,
    value_of_time,
    vot_rows,
)
from app.service.parameters import pack_parameters, zero_parameters
from tests.builders import nested_observation, toy_params, toy_spec
from tests.conftest import BUSINESS_REFERENCE, BUSINESS_TRUE, NON_BUSINESS_REFERENCE

MODES = list(Mode)


def toy_dataset(seed: int, n: int = 40, with_destination_values: bool = True) -> RPDataset:
    rng = np.random.default_rng(seed)
    observations = []
    for index in range(n):
        nests = {}
        for destination in range(1, int(rng.integers(2, 5)) + 1):
            picks = rng.choice(len(MODES), size=int(rng.integers(1, 4)), replace=False)
            nests[destination] = {MODES[int(i)]: float(rng.uniform(-2, 2)) for i in picks}
        values = {d: float(rng.uniform(-2, 2)) for d in nests} if with_destination_values else None
        leaves = [(d, m) for d, modes in nests.items() for m in modes]
        chosen = leaves[int(rng.integers(len(leaves)))]
        observations.append(nested_observation(nests, chosen=chosen, destination_values=values,
                                               obs_id=f"obs-{index}"))
    return RPDataset(tuple(observations))


@pytest.fixture(scope="module")
def business_fit(business_spec, business_survey):
    _, rp, sp = business_survey
    return estimate(rp, sp, business_spec, execution_id="test-est")


class TestFitStats:
    def test_business_fit_indices(self):
        stats = fit_stats(-2914.43, None, None, 16, ll0=-4043.02)
        assert stats.rho == pytest.approx(0.2791, abs=5e-4)
        assert stats.rho_adj == pytest.approx(0.2751, abs=5e-4)

    def test_non_business_fit_indices(self):
        stats = fit_stats(-3830.42, None, None, 33, ll0=-5053.84)
        assert stats.rho == pytest.approx(0.24208, abs=5e-5)
        assert stats.rho_adj == pytest.approx(0.23555, abs=5e-5)

    def test_rho_is_an_exact_identity(self):
        stats = fit_stats(-700.0, None, None, 10, ll0=-1000.0)
        assert stats.rho == 1.0 - (-700.0) / (-1000.0)
        assert stats.rho_adj == 1.0 - (-710.0) / (-1000.0)

    def test_null_loglik_from_the_data(self, business_spec, business_survey):
        _, rp, sp = business_survey
        stats = fit_stats(-1.0, rp, sp, 16, spec=business_spec)
        assert stats.ll0 == pytest.approx(loglik_joint(rp, sp, zero_parameters(business_spec), business_spec))

    def test_zero_null_loglik(self):
        with pytest.raises(EstimationError):
            fit_stats(0.0, None, None, 1, ll0=0.0)

    def test_negative_parameter_count(self):
        with pytest.raises(ValueError):
            fit_stats(-1.0, None, None, -1, ll0=-2.0)


class TestValueOfTime:
    def test_business_in_vehicle_time(self):
        vot = value_of_time(BUSINESS_REFERENCE, "in_vehicle_time", "travel_cost")
        assert vot == pytest.approx(32114.9, abs=0.5)

    def test_business_access_time(self):
        vot = value_of_time(BUSINESS_REFERENCE, "access_egress_time", "travel_cost")
        assert vot == pytest.approx(0.070339 / 1.0421 * 1e6, rel=1e-12)
        assert vot == pytest.approx(67497, rel=1e-4)

    def test_non_business_in_vehicle_time(self):
        vot = value_of_time(NON_BUSINESS_REFERENCE, "in_vehicle_time", "travel_cost")
        assert vot == pytest.approx(176342, rel=1e-5)

    def test_zero_cost_coefficient(self):
        with pytest.raises(ParameterError) as info:
            value_of_time({"t": -0.1, "c": 0.0}, "t", "c")
        assert info.value.offenders == ("c",)

    def test_missing_coefficient(self):
        with pytest.raises(ParameterError):
            value_of_time({"t": -0.1}, "t", "c")

    def test_rows_follow_the_generic_time_terms(self, business_spec, non_business_spec):
        assert set(vot_rows(business_spec, BUSINESS_REFERENCE)) == {"in_vehicle_time", "access_egress_time"}
        assert set(vot_rows(non_business_spec, NON_BUSINESS_REFERENCE)) == {"in_vehicle_time"}
        assert vot_rows(business_spec, {**BUSINESS_REFERENCE, "travel_cost": 0.0}) == {}


class TestLoglik:
    def test_joint_is_the_sum_of_both_surveys(self, business_spec, business_survey, business_truth):
        _, rp, sp = business_survey
        joint = loglik_joint(rp, sp, business_truth, business_spec)
        parts = loglik_rp(rp, business_truth, business_spec) + loglik_sp(sp, business_truth, business_spec)
        assert joint == pytest.approx(parts, rel=1e-12)
        assert joint < 0

    def test_flat_sp_at_zero_gives_equal_shares(self, business_spec, business_survey):
        _, _, sp = business_survey
        expected = -sum(math.log(len(obs.leaves)) for obs in sp.observations)
        assert loglik_sp(sp, zero_parameters(business_spec), business_spec) == pytest.approx(expected, rel=1e-12)

    def test_empty_datasets(self, business_spec):
        assert loglik_joint(None, None, zero_parameters(business_spec), business_spec) == 0.0

    def test_accepts_named_parameters(self, business_spec, business_survey, business_truth):
        _, rp, _ = business_survey
        assert loglik_rp(rp, business_truth.as_dict(), business_spec) == loglik_rp(rp, business_truth, business_spec)

    def test_wrong_length_theta(self, business_spec, business_survey):
        _, rp, sp = business_survey
        with LikelihoodEvaluator(rp, sp, business_spec) as evaluator:
            with pytest.raises(ParameterError):
                evaluator.evaluate(np.zeros(3))

    def test_evaluator_rejects_zero_threads(self, business_spec):
        with pytest.raises(ValueError):
            LikelihoodEvaluator(None, None, business_spec, threads=0)

    def test_overflowing_scale_is_a_likelihood_error(self, business_spec, business_survey):
        _, rp, sp = business_survey
        params = pack_parameters(business_spec, {**BUSINESS_TRUE, "log_scale": 800.0})
        assert params.scale == math.inf
        with pytest.raises(LikelihoodError):
            loglik_joint(rp, sp, params, business_spec)


class TestGradient:
    def test_toy_gradient_matches_differences(self):
        spec = toy_spec()
        with LikelihoodEvaluator(toy_dataset(1), None, spec) as evaluator:
            rng = np.random.default_rng(7)
            for _ in range(5):
                theta = rng.uniform(-1.5, 1.5, size=evaluator.k)
                assert gradient_check(evaluator, theta) < 1e-6

    def test_business_gradient_at_random_points(self, business_spec, business_survey, business_truth):
        _, rp, sp = business_survey
        rng = np.random.default_rng(12)
        with LikelihoodEvaluator(rp, sp, business_spec) as evaluator:
            scales = np.maximum(1.0, evaluator.column_scales())
            for _ in range(3):
                theta = business_truth.values + rng.normal(0.0, 0.2, evaluator.k) / scales
                assert gradient_check(evaluator, theta) < 1e-5

    def test_non_business_gradient_at_random_points(self, non_business_spec, non_business_survey,
                                                    non_business_truth):
        _, rp, sp = non_business_survey
        rng = np.random.default_rng(13)
        with LikelihoodEvaluator(rp, sp, non_business_spec) as evaluator:
            scales = np.maximum(1.0, evaluator.column_scales())
            for _ in range(3):
                theta = non_business_truth.values + rng.normal(0.0, 0.2, evaluator.k) / scales
                assert gradient_check(evaluator, theta) < 1e-5

    def test_gradient_function_matches_evaluator(self, business_spec, business_survey, business_truth):
        _, rp, sp = business_survey
        with LikelihoodEvaluator(rp, sp, business_spec) as evaluator:
            expected = evaluator.gradient(business_truth.values)
        np.testing.assert_allclose(gradient(rp, sp, business_truth, business_spec), expected, rtol=1e-12)

    def test_null_is_not_stationary(self, business_spec, business_survey):
        _, rp, sp = business_survey
        assert np.max(np.abs(gradient(rp, sp, zero_parameters(business_spec), business_spec))) > 1e-3

    def test_saturated_lambda_has_no_slope(self):
        spec = toy_spec()
        theta = pack_parameters(spec, toy_params(omega=60.0)).values
        with LikelihoodEvaluator(toy_dataset(2), None, spec) as evaluator:
            grad = evaluator.gradient(theta)
            assert grad[spec.parameter_layout()["omega"]] == 0.0
            assert gradient_check(evaluator, theta) < 1e-6


class TestDeterminism:
    @pytest.mark.parametrize("threads", [2, 8])
    def test_thread_count_does_not_change_results(self, business_spec, business_survey, business_truth, threads):
        _, rp, sp = business_survey
        with LikelihoodEvaluator(rp, sp, business_spec, threads=1, chunk_size=7) as serial:
            ll_serial, grad_serial = serial.evaluate(business_truth.values)
        with LikelihoodEvaluator(rp, sp, business_spec, threads=threads, chunk_size=7) as parallel:
            ll_parallel, grad_parallel = parallel.evaluate(business_truth.values)
        assert ll_parallel == ll_serial
        assert np.array_equal(grad_parallel, grad_serial)

    def test_unordered_reduction_agrees_to_rounding(self, business_spec, business_survey, business_truth):
        _, rp, sp = business_survey
        with LikelihoodEvaluator(rp, sp, business_spec, threads=4, chunk_size=5, deterministic=False) as fast:
            ll_fast = fast.loglik(business_truth.values)
        assert ll_fast == pytest.approx(loglik_joint(rp, sp, business_truth, business_spec), rel=1e-12)

    def test_observation_logliks_add_up(self, business_spec, business_survey, business_truth):
        _, rp, sp = business_survey
        with LikelihoodEvaluator(rp, sp, business_spec, chunk_size=11) as evaluator:
            per_observation = evaluator.observation_logliks(business_truth.values)
            assert per_observation.size == rp.n_observations + sp.n_observations
            assert per_observation.sum() == pytest.approx(evaluator.loglik(business_truth.values), rel=1e-12)


class TestStandardErrors:
    def test_constant_zero_column_is_reported(self):
        spec = toy_spec()
        dataset = toy_dataset(3, n=60, with_destination_values=False)
        with pytest.raises(SingularHessianError) as info:
            standard_errors(dataset, None, toy_params(omega=0.3), spec)
        assert ("phi", "phi") in info.value.pairs

    def test_survey_fit_has_finite_errors(self, business_fit):
        assert np.all(np.isfinite(business_fit.std_errors))
        assert np.all(business_fit.std_errors > 0)
        assert business_fit.notes == ()


class TestEstimate:
    def test_converges_on_simulated_survey(self, business_fit):
        assert business_fit.converged
        assert business_fit.convergence_reason in ("gradient", "objective")
        assert business_fit.k == 16
        assert business_fit.ll1 >= business_fit.ll0
        assert 0.0 <= business_fit.rho < 1.0

    def test_fit_counts_observations(self, business_fit, business_survey):
        _, rp, sp = business_survey
        assert business_fit.n_rp == rp.n_observations
        assert business_fit.n_sp == sp.n_observations

    def test_rho_matches_its_definition(self, business_fit):
        assert business_fit.rho == 1.0 - business_fit.ll1 / business_fit.ll0

    def test_vot_rows_are_reported(self, business_fit):
        assert set(business_fit.vot) == {"in_vehicle_time", "access_egress_time"}

    def test_frame_adds_the_scale_row(self, business_fit):
        frame = business_fit.to_frame()
        assert len(frame) == 17
        assert frame.iloc[-1]["parametro"] == "mu (escala)"
        assert frame.iloc[-1]["estimacion"] == pytest.approx(business_fit.scale)

    def test_document_round_trip(self, business_fit):
        restored = EstimationResult.from_dict(business_fit.model_dump())
        assert restored == business_fit
        assert restored.spec_digest == business_fit.spec_digest

    def test_iteration_cap_is_not_an_exception(self, business_spec, business_survey):
        _, rp, sp = business_survey
        controls = EstimationControls(max_iterations=1, compute_standard_errors=False)
        result = estimate(rp, sp, business_spec, controls=controls)
        assert not result.converged
        assert result.convergence_reason == "max_iterations"
        assert math.isnan(result.std_errors[0])

    def test_start_point_is_respected(self, business_spec, business_survey, business_fit):
        _, rp, sp = business_survey
        controls = EstimationControls(compute_standard_errors=False)
        restarted = estimate(rp, sp, business_spec, start=business_fit.estimates, controls=controls)
        assert restarted.ll1 == pytest.approx(business_fit.ll1, abs=1e-4)

    def test_reference_start_point(self, business_spec, business_survey):
        _, rp, sp = business_survey
        start = pack_parameters(business_spec, BUSINESS_REFERENCE)
        controls = EstimationControls(max_iterations=2, compute_standard_errors=False)
        result = estimate(rp, sp, business_spec, start=start, controls=controls)
        assert result.ll1 >= loglik_joint(rp, sp, start, business_spec)

    def test_converged_means_gradient_below_tolerance(self, business_fit):
        assert business_fit.converged
        assert business_fit.gradient_norm < EstimationControls().gradient_tolerance

    def test_loose_objective_stop_is_not_convergence(self, business_spec, business_survey):
        _, rp, sp = business_survey
        controls = EstimationControls(relative_ll_tolerance=1e-3, newton_steps=0, compute_standard_errors=False)
        result = estimate(rp, sp, business_spec, controls=controls)
        assert not result.converged
        assert result.gradient_norm >= controls.gradient_tolerance
        assert result.convergence_reason in ("objective", "failure")
        assert any("norma del gradiente" in note for note in result.notes)

    def test_loose_objective_stop_is_refined(self, business_spec, business_survey, business_fit):
        _, rp, sp = business_survey
        controls = EstimationControls(relative_ll_tolerance=1e-3, compute_standard_errors=False)
        result = estimate(rp, sp, business_spec, controls=controls)
        assert not result.converged or result.gradient_norm < controls.gradient_tolerance
        if result.converged:
            assert result.ll1 == pytest.approx(business_fit.ll1, abs=1e-4)

    def test_far_start_returns_a_result(self, business_spec, business_survey):
        _, rp, sp = business_survey
        far = {**BUSINESS_TRUE, "asc_bus_rp": -1e6, "asc_rail_rp": -1e6, "asc_car_rp": -1e6}
        controls = EstimationControls(max_iterations=60, compute_standard_errors=False)
        result = estimate(rp, sp, business_spec, start=pack_parameters(business_spec, far), controls=controls)
        assert np.all(np.isfinite(result.estimates.values))
        assert math.isfinite(result.ll1)
        assert not result.converged or result.gradient_norm < controls.gradient_tolerance

    def test_non_finite_start_is_an_input_error(self, business_spec, business_survey):
        _, rp, sp = business_survey
        start = pack_parameters(business_spec, {**BUSINESS_TRUE, "log_scale": 800.0})
        with pytest.raises(StartPointError) as info:
            estimate(rp, sp, business_spec, start=start)
        assert isinstance(info.value, ValueError)
        assert isinstance(info.value, EstimationError)


class TestNewtonRefine:
    def test_reaches_tolerance_near_the_optimum(self, business_spec, business_survey, business_fit):
        _, rp, sp = business_survey
        rng = np.random.default_rng(31)
        with LikelihoodEvaluator(rp, sp, business_spec) as evaluator:
            scales = np.maximum(1.0, evaluator.column_scales())
            theta = business_fit.estimates.values + rng.normal(0.0, 0.01, evaluator.k) / scales
            ll, grad = evaluator.evaluate(theta)
            refined = newton_refine(evaluator, theta, ll, grad, tolerance=1e-6)
        assert refined.steps >= 1
        assert np.max(np.abs(refined.gradient)) < 1e-6
        assert refined.loglik >= ll
        assert refined.loglik == pytest.approx(business_fit.ll1, abs=1e-6)

    def test_no_steps_when_already_below_tolerance(self, business_spec, business_survey, business_fit):
        _, rp, sp = business_survey
        with LikelihoodEvaluator(rp, sp, business_spec) as evaluator:
            ll, grad = evaluator.evaluate(business_fit.estimates.values)
            refined = newton_refine(evaluator, business_fit.estimates.values, ll, grad, tolerance=1e-6)
        assert refined.steps == 0
        assert np.array_equal(refined.theta, business_fit.estimates.values)
