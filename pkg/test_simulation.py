#!/usr/bin/env python3
"""
Tests for Monte Carlo sample generation
"""
import os
import sys

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest
from pydantic import ValidationError

from src.models import ApplicabilityError, DataSource, Environment, PathLossDomainError
from src.settings import load_settings
from src.simulation import (
    DistanceSampling,
    PathLossSample,
    SampleSet,
    ScenarioConfig,
    ScenarioStream,
    derive_3d_distance,
    generate_cell,
    generate_samples,
    iter_cells,
    load_scenario_config,
    residual_shadow_fading,
)


def small_config(**overrides) -> ScenarioConfig:
    values = dict(frequencies=[6.0, 28.0, 73.0], d2d_min=10.0, d2d_max=5000.0,
                  environment=Environment.NLOS, samples_per_cell=500,
                  h_bs_sweep=[20.0, 35.0], seed=42)
    values.update(overrides)
    return ScenarioConfig(**values)


def test_derive_3d_distance():
    assert derive_3d_distance(10_000.0, 35.0, 1.5) == pytest.approx(10_000.056, abs=1e-3)
    d = derive_3d_distance(np.array([10.0, 100.0]), 35.0, 1.5)
    assert np.all(d >= np.array([10.0, 100.0]))
    with pytest.raises(PathLossDomainError):
        derive_3d_distance(0.0, 35.0, 1.5)


def test_config_validation():
    with pytest.raises(ValidationError):
        small_config(d2d_min=6000.0)
    with pytest.raises(ValidationError):
        small_config(frequencies=[])
    with pytest.raises(ValidationError):
        small_config(h_bs_sweep=[-10.0])
    with pytest.raises(ValidationError):
        small_config(seed=2 ** 64)


def test_cells_are_frequency_major():
    cfg = small_config()
    assert cfg.cells() == [(6.0, 20.0), (6.0, 35.0), (28.0, 20.0), (28.0, 35.0),
                           (73.0, 20.0), (73.0, 35.0)]
    assert cfg.total_samples == 3000


def test_generate_samples_layout():
    cfg = small_config()
    samples = generate_samples(cfg)
    assert len(samples) == cfg.total_samples
    assert samples.source is DataSource.SIMULATED
    assert samples.environments() == {Environment.NLOS}
    assert np.all(samples.f_c[:1000] == 6.0)
    assert np.all(samples.h_bs[:500] == 20.0)
    assert np.all(samples.h_bs[500:1000] == 35.0)
    assert np.all((samples.d_2d >= 10.0) & (samples.d_2d <= 5000.0))
    assert np.all(samples.d_3d >= samples.d_2d)
    assert np.all(np.isfinite(samples.pl))


def test_same_seed_same_samples():
    a = generate_samples(small_config())
    b = generate_samples(small_config())
    for column in ("f_c", "d_2d", "d_3d", "h_bs", "pl"):
        assert np.array_equal(getattr(a, column), getattr(b, column))


def test_worker_count_does_not_change_output():
    serial = generate_samples(small_config())
    threaded = generate_samples(small_config(), workers=4)
    assert np.array_equal(serial.pl, threaded.pl)
    assert np.array_equal(serial.d_2d, threaded.d_2d)


def test_different_seed_changes_samples():
    a = generate_samples(small_config(seed=1))
    b = generate_samples(small_config(seed=2))
    assert not np.array_equal(a.pl, b.pl)


def test_cells_are_independent_of_the_sweep():
    """Cell 0 does not depend on how many other cells follow it"""
    short = generate_cell(small_config(frequencies=[6.0]), 0)
    long = generate_cell(small_config(), 0)
    assert np.array_equal(short.pl, long.pl)


def test_zero_samples_gives_empty_set():
    samples = generate_samples(small_config(samples_per_cell=0))
    assert len(samples) == 0


def test_out_of_range_scenario_needs_force(caplog):
    cfg = small_config(d2d_max=6000.0)
    with pytest.raises(ApplicabilityError):
        generate_samples(cfg)
    forced = generate_samples(cfg.model_copy(update={"force": True}))
    assert len(forced) == cfg.total_samples
    assert "outside the RMa applicability ranges" in caplog.text


def test_log_distance_sampling_stays_in_range():
    cfg = small_config(distance_sampling=DistanceSampling.LOG, samples_per_cell=2000,
                       frequencies=[28.0], h_bs_sweep=[35.0])
    samples = generate_samples(cfg)
    assert samples.d_2d.min() >= 10.0
    assert samples.d_2d.max() <= 5000.0
    # log-uniform puts half the draws below the geometric midpoint
    assert np.median(samples.d_2d) == pytest.approx(np.sqrt(10.0 * 5000.0), rel=0.15)


def test_shadow_fading_matches_model_sigma():
    n = 10_000
    nlos = generate_samples(small_config(samples_per_cell=n, frequencies=[28.0],
                                         h_bs_sweep=[35.0]))
    residual = residual_shadow_fading(nlos)
    assert residual.mean() == pytest.approx(0.0, abs=4 * 8.0 / np.sqrt(n))
    assert residual.std() == pytest.approx(8.0, abs=0.2)

    los = generate_samples(small_config(samples_per_cell=n, frequencies=[1.0],
                                        h_bs_sweep=[35.0], environment=Environment.LOS,
                                        d2d_max=1000.0))
    # every LOS draw is before the 1 GHz breakpoint (1.1 km)
    residual = residual_shadow_fading(los)
    assert residual.mean() == pytest.approx(0.0, abs=4 * 4.0 / np.sqrt(n))
    assert residual.std() == pytest.approx(4.0, abs=0.15)


def test_shadow_fading_over_a_full_case_one_sweep():
    cfg = load_settings().scenario("one", Environment.NLOS, samples_per_cell=50_000, seed=42)
    residual = residual_shadow_fading(generate_samples(cfg))
    assert len(residual) == 450_000
    assert residual.mean() == pytest.approx(0.0, abs=4 * 8.0 / np.sqrt(len(residual)))
    assert residual.std() == pytest.approx(8.0, rel=0.02)


def test_stream_is_reiterable():
    cfg = small_config()
    stream = ScenarioStream(cfg)
    first = SampleSet.concat(stream)
    second = SampleSet.concat(stream)
    assert len(stream) == cfg.total_samples
    assert np.array_equal(first.pl, second.pl)
    assert len(list(iter_cells(cfg))) == len(cfg.cells())


def test_sample_set_is_read_only():
    samples = generate_samples(small_config(samples_per_cell=10))
    with pytest.raises(ValueError):
        samples.pl[0] = 0.0


def test_sample_set_records_round_trip():
    samples = generate_samples(small_config(samples_per_cell=5))
    records = list(samples.records())
    assert all(isinstance(r, PathLossSample) for r in records)
    rebuilt = SampleSet.from_records(records)
    assert np.array_equal(rebuilt.pl, samples.pl)
    assert rebuilt.environments() == {Environment.NLOS}


def test_filter_and_concat():
    los = generate_samples(small_config(environment=Environment.LOS, samples_per_cell=10))
    nlos = generate_samples(small_config(samples_per_cell=20))
    both = SampleSet.concat([los, nlos])
    assert len(both) == len(los) + len(nlos)
    assert both.environments() == {Environment.LOS, Environment.NLOS}
    assert len(both.filter(Environment.NLOS)) == len(nlos)
    assert np.array_equal(both.filter("los").pl, los.pl)


def test_path_loss_sample_must_be_finite():
    with pytest.raises(ValidationError):
        PathLossSample(f_c=6.0, d_2d=100.0, d_3d=105.0, h_bs=35.0, h_ut=1.5,
                       environment=Environment.LOS, pl=float("nan"))


def test_load_scenario_config(tmp_path):
    path = tmp_path / "case.env"
    path.write_text(
        "FREQUENCIES=1,2,6\n"
        "D2D_MAX=10000\n"
        "ENVIRONMENT=los\n"
        "SAMPLES_PER_CELL=100\n"
        "H_BS_SWEEP=10,35,150\n"
        "SEED=7\n"
        "DISTANCE_SAMPLING=log\n"
        "FORCE=false\n"
    )
    cfg = load_scenario_config(path)
    assert cfg.frequencies == [1.0, 2.0, 6.0]
    assert cfg.h_bs_sweep == [10.0, 35.0, 150.0]
    assert cfg.environment is Environment.LOS
    assert cfg.distance_sampling is DistanceSampling.LOG
    assert cfg.d2d_min == 10.0
    assert cfg.force is False


def test_bundled_scenario_files_load():
    root = os.path.dirname(os.path.abspath(__file__))
    one = load_scenario_config(os.path.join(root, "rma", "scenarios", "case_one_los.env"))
    two = load_scenario_config(os.path.join(root, "rma", "scenarios", "case_two_nlos.env"))
    assert one.total_samples == 450_000
    assert two.total_samples == 13_050_000
