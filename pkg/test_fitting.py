#!/usr/bin/env python3
"""
Tests for CI / CIH least-squares fitting
"""
import os
import sys

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from src.fitting import (
    DegenerateFitError,
    EmptySampleError,
    FitResult,
    LeastSquaresAccumulator,
    ModelKind,
    cih_from_ci,
    fit_ci,
    fit_cih,
    fit_per_environment,
    fit_result_from_params,
    model_evaluator,
    rma_evaluator,
    rmse,
    solve_btx_from_ci,
)
from src.models import (
    CihParams,
    CiParams,
    Environment,
    PathLossDomainError,
    ci_path_loss,
    cih_path_loss,
    published_model,
)
from src.settings import load_settings
from src.simulation import SampleSet, ScenarioStream, environment_code, generate_samples


def synthetic(f_c, d_3d, h_bs, pl, env=Environment.LOS) -> SampleSet:
    f_c = np.broadcast_to(np.asarray(f_c, dtype=float), np.shape(pl))
    h_bs = np.broadcast_to(np.asarray(h_bs, dtype=float), np.shape(pl))
    return SampleSet(
        f_c=f_c,
        d_2d=d_3d,
        d_3d=d_3d,
        h_bs=h_bs,
        h_ut=np.full(np.shape(pl), 1.5),
        env_code=np.full(np.shape(pl), environment_code(env), dtype=np.int8),
        pl=pl,
    )


def noiseless_ci(n: float, size: int = 200, seed: int = 0) -> SampleSet:
    rng = np.random.default_rng(seed)
    f_c = rng.choice([1.0, 28.0, 73.0], size)
    d = rng.uniform(10.0, 5000.0, size)
    return synthetic(f_c, d, 35.0, ci_path_loss(CiParams(n=n), f_c, d))


def noiseless_cih(params: CihParams, size: int = 400, seed: int = 0) -> SampleSet:
    rng = np.random.default_rng(seed)
    f_c = rng.choice([1.0, 28.0, 73.0], size)
    d = rng.uniform(10.0, 5000.0, size)
    h_bs = rng.choice([10.0, 35.0, 80.0, 150.0], size)
    return synthetic(f_c, d, h_bs, cih_path_loss(params, f_c, d, h_bs))


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=1.5, max_value=4.5))
def test_noiseless_ci_fit_recovers_exponent(n):
    result = fit_ci(noiseless_ci(n))
    assert result.model_kind is ModelKind.CI
    assert abs(result.n - n) < 1e-10
    assert result.sigma < 1e-9
    assert result.sample_count == 200


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=2.0, max_value=3.5), st.floats(min_value=-0.06, max_value=0.02))
def test_noiseless_cih_fit_recovers_parameters(n, b_tx):
    params = CihParams(n=n, b_tx=b_tx, h_b0=35.0)
    result = fit_cih(noiseless_cih(params))
    assert abs(result.n - n) < 1e-10
    assert abs(result.b_tx - b_tx) < 1e-10
    assert result.h_b0 == 35.0
    assert result.sigma < 1e-9


def test_ci_fit_closed_form():
    """n = sum(A B) / sum(B^2) with A = PL - FSPL(1 m), B = 10 log10 d"""
    pl = np.array([100.0, 120.0, 135.0])
    d = np.array([100.0, 1000.0, 3000.0])
    samples = synthetic(28.0, d, 35.0, pl)
    a = pl - (32.4 + 20 * np.log10(28.0))
    b = 10 * np.log10(d)
    assert fit_ci(samples).n == pytest.approx(np.sum(a * b) / np.sum(b * b), abs=1e-12)


def test_streamed_fit_matches_in_memory():
    cfg = load_settings().scenario("two", Environment.NLOS, seed=3, samples_per_cell=200)
    in_memory = fit_cih(generate_samples(cfg))
    streamed = fit_cih(ScenarioStream(cfg))
    one_pass = fit_cih(iter(ScenarioStream(cfg)))
    assert streamed.n == pytest.approx(in_memory.n, abs=1e-9)
    assert streamed.b_tx == pytest.approx(in_memory.b_tx, abs=1e-9)
    assert streamed.sigma == pytest.approx(in_memory.sigma, abs=1e-9)
    assert one_pass.sigma == pytest.approx(in_memory.sigma, abs=1e-6)


def test_empty_samples():
    with pytest.raises(EmptySampleError):
        fit_ci(SampleSet.empty())
    with pytest.raises(EmptySampleError):
        rmse(SampleSet.empty(), model_evaluator(CiParams(n=2.0)))


def test_all_samples_at_one_meter_is_degenerate():
    samples = synthetic(28.0, np.ones(5), 35.0, np.full(5, 61.34))
    with pytest.raises(DegenerateFitError):
        fit_ci(samples)


def test_cih_needs_two_heights():
    with pytest.raises(DegenerateFitError):
        fit_cih(noiseless_ci(2.5))


def test_sub_meter_distance_rejected():
    samples = synthetic(28.0, np.array([0.5, 10.0]), 35.0, np.array([60.0, 80.0]))
    with pytest.raises(PathLossDomainError):
        fit_ci(samples)


def test_rmse_against_generating_model():
    params = CiParams(n=2.5)
    samples = noiseless_ci(2.5)
    assert rmse(samples, model_evaluator(params)) == pytest.approx(0.0, abs=1e-9)
    shifted = synthetic(samples.f_c, samples.d_3d, samples.h_bs, samples.pl + 3.0)
    assert rmse(shifted, model_evaluator(params)) == pytest.approx(3.0, abs=1e-9)


def test_rma_evaluator_scores_generated_samples():
    cfg = load_settings().scenario("one", Environment.NLOS, seed=5, samples_per_cell=2000)
    score = rmse(generate_samples(cfg), rma_evaluator(Environment.NLOS))
    assert score == pytest.approx(8.0, abs=0.2)


def test_btx_back_solve():
    assert solve_btx_from_ci(2.16, 2.31, 110.0, 35.0) == pytest.approx(-0.030, abs=0.001)
    assert solve_btx_from_ci(2.75, 3.07, 110.0, 35.0) == pytest.approx(-0.049, abs=0.001)
    with pytest.raises(PathLossDomainError):
        solve_btx_from_ci(2.16, 2.31, 35.0, 35.0)


@given(st.floats(min_value=1.5, max_value=4.0), st.floats(min_value=1.5, max_value=4.0),
       st.floats(min_value=40.0, max_value=150.0))
def test_back_solved_btx_reproduces_ci_exponent(ple_ci, n_cih, h_bs):
    b_tx = solve_btx_from_ci(ple_ci, n_cih, h_bs, 35.0)
    assert n_cih * (1 + b_tx * (h_bs - 35.0) / 35.0) == pytest.approx(ple_ci, rel=1e-12)


def test_cih_from_ci_builds_measured_row():
    ci = fit_result_from_params(published_model("ci-rma-nlos").params, 17)
    cih = fit_result_from_params(published_model("cih-3gpp-nlos").params, 13_050_000)
    derived = cih_from_ci(ci, cih, 110.0)
    assert derived.model_kind is ModelKind.CIH
    assert derived.n == 3.07
    assert derived.b_tx == pytest.approx(-0.0486, abs=1e-4)
    assert derived.sigma == 6.7
    assert derived.sample_count == 17
    with pytest.raises(ValueError):
        cih_from_ci(cih, ci, 110.0)


def test_fit_result_schema():
    with pytest.raises(ValidationError):
        FitResult(model_kind=ModelKind.CIH, n=3.0, sigma=1.0, sample_count=5)
    with pytest.raises(ValidationError):
        FitResult(model_kind=ModelKind.CI, n=3.0, b_tx=0.1, sigma=1.0, sample_count=5)
    result = FitResult.model_validate({"model_kind": "CIH", "n": 3.07, "b_tx": -0.06,
                                       "h_B0": 35.0, "sigma": 8.7, "sample_count": 9})
    assert result.h_b0 == 35.0
    assert isinstance(result.to_params(), CihParams)


def test_fit_per_environment():
    los = noiseless_ci(2.0)
    nlos = synthetic(los.f_c, los.d_3d, los.h_bs,
                     ci_path_loss(CiParams(n=3.0), los.f_c, los.d_3d), Environment.NLOS)
    fits = fit_per_environment(SampleSet.concat([los, nlos]), ModelKind.CI)
    assert [round(f.n, 6) for f in fits] == [2.0, 3.0]


def test_accumulator_rejects_bad_reference_height():
    with pytest.raises(PathLossDomainError):
        LeastSquaresAccumulator(h_b0=0.0)


@pytest.fixture(scope="module")
def case_two_nlos_sample():
    cfg = load_settings().scenario("two", Environment.NLOS, samples_per_cell=300, seed=42)
    return generate_samples(cfg)


@pytest.mark.parametrize("dn, db", [(0.01, 0.0), (-0.01, 0.0), (0.0, 0.01), (0.0, -0.01),
                                    (0.01, 0.01), (-0.01, -0.01)])
def test_cih_fit_minimises_rmse(case_two_nlos_sample, dn, db):
    fit = fit_cih(case_two_nlos_sample)
    moved = CihParams(n=fit.n + dn, b_tx=fit.b_tx + db, h_b0=fit.h_b0)
    assert rmse(case_two_nlos_sample, model_evaluator(moved)) > fit.sigma


@pytest.mark.parametrize("dn", [0.01, -0.01])
def test_ci_fit_minimises_rmse(case_two_nlos_sample, dn):
    fit = fit_ci(case_two_nlos_sample)
    assert rmse(case_two_nlos_sample, model_evaluator(CiParams(n=fit.n + dn))) > fit.sigma


@settings(max_examples=25, deadline=None)
@given(st.floats(min_value=1.5, max_value=4.5))
def test_ci_fit_beats_any_fixed_ple(n):
    cfg = load_settings().scenario("one", Environment.NLOS, samples_per_cell=200, seed=9)
    samples = generate_samples(cfg)
    fit = fit_ci(samples)
    assert fit.sigma <= rmse(samples, model_evaluator(CiParams(n=n))) + 1e-9


def test_fit_ignores_sample_order(case_two_nlos_sample):
    order = np.random.default_rng(5).permutation(len(case_two_nlos_sample))
    shuffled = case_two_nlos_sample.select(order)
    fit, refit = fit_cih(case_two_nlos_sample), fit_cih(shuffled)
    assert refit.n == pytest.approx(fit.n, rel=1e-9)
    assert refit.b_tx == pytest.approx(fit.b_tx, rel=1e-9)
    assert refit.sigma == pytest.approx(fit.sigma, rel=1e-9)


def test_fit_ignores_duplicated_set(case_two_nlos_sample):
    twice = SampleSet.concat([case_two_nlos_sample, case_two_nlos_sample])
    fit, refit = fit_cih(case_two_nlos_sample), fit_cih(twice)
    assert refit.sample_count == 2 * fit.sample_count
    assert refit.n == pytest.approx(fit.n, rel=1e-9)
    assert refit.b_tx == pytest.approx(fit.b_tx, rel=1e-9)
    assert refit.sigma == pytest.approx(fit.sigma, rel=1e-9)
    assert fit_ci(twice).n == pytest.approx(fit_ci(case_two_nlos_sample).n, rel=1e-9)


def test_case_one_los():
    cfg = load_settings().scenario("one", Environment.LOS, seed=42)
    result = fit_ci(ScenarioStream(cfg))
    assert result.sample_count == 450_000
    assert result.n == pytest.approx(2.31, abs=0.10)
    assert result.sigma == pytest.approx(5.9, abs=0.4)


def test_case_one_nlos():
    cfg = load_settings().scenario("one", Environment.NLOS, seed=42)
    result = fit_ci(ScenarioStream(cfg))
    assert result.n == pytest.approx(3.04, abs=0.10)
    # published sigma is 8.2 dB; a single CI slope cannot follow the NLOS curvature,
    # so about 3.5 dB of model misfit adds to the 8 dB shadow fading
    assert result.sigma == pytest.approx(8.74, abs=0.15)
    generator_rmse = rmse(ScenarioStream(cfg), rma_evaluator(Environment.NLOS))
    assert generator_rmse == pytest.approx(8.0, abs=0.05)


@pytest.mark.slow
def test_case_two_los():
    cfg = load_settings().scenario("two", Environment.LOS, seed=42)
    result = fit_cih(ScenarioStream(cfg, workers=4))
    assert result.sample_count == 13_050_000
    assert result.n == pytest.approx(2.31, abs=0.10)
    assert result.b_tx == pytest.approx(-0.006, abs=0.010)
    assert result.sigma == pytest.approx(5.6, abs=0.5)


@pytest.mark.slow
def test_case_two_nlos():
    cfg = load_settings().scenario("two", Environment.NLOS, seed=42)
    result = fit_cih(ScenarioStream(cfg, workers=4))
    assert result.n == pytest.approx(3.07, abs=0.10)
    assert result.b_tx == pytest.approx(-0.060, abs=0.015)
    # published sigma is 8.7 dB; same single-slope misfit as the Case One NLOS fit
    assert result.sigma == pytest.approx(9.28, abs=0.2)
