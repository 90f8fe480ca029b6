#!/usr/bin/env python3
"""
Integration test for the measurement -> simulation -> fit -> table pipeline
"""

import csv
import json
import sys
import os
import tempfile
from pathlib import Path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from setup_measurement_data import write_measurements
from src.cli import EXIT_OK, run


def _measurement_file(workdir: Path) -> Path:
    return write_measurements(workdir, seed=73)


def test_measured_fits(tmp_path):
    """Fit the synthetic 73 GHz campaign per environment"""
    print("📡 Testing measured CI fits...")
    measurements = _measurement_file(tmp_path)

    for env, count in (("los", 14), ("nlos", 17)):
        out = tmp_path / f"ci_{env}.json"
        assert run(["fit", "--model", "ci", "--env", env, "--in", str(measurements),
                    "--out", str(out)]) == EXIT_OK
        fit = json.loads(out.read_text())
        print(f"✅ {env.upper()}: PLE={fit['n']} sigma={fit['sigma']} dB ({fit['sample_count']} points)")
        assert fit["sample_count"] == count
        assert 1.5 < fit["n"] < 4.0


def test_simulated_pipeline(tmp_path):
    """simulate -> fit -> export, CSV and JSON agree"""
    print("🎲 Testing simulated pipeline...")
    samples_csv = tmp_path / "case_two_los.csv"
    assert run(["simulate", "--case", "two", "--env", "los", "--seed", "42",
                "--samples", "50", "--out", str(samples_csv)]) == EXIT_OK

    samples_json = tmp_path / "case_two_los.json"
    assert run(["export", "--in", str(samples_csv), "--format", "json",
                "--out", str(samples_json)]) == EXIT_OK

    fits = {}
    for source in (samples_csv, samples_json):
        out = tmp_path / f"fit_{source.suffix[1:]}.json"
        assert run(["fit", "--model", "cih", "--env", "los", "--in", str(source),
                    "--out", str(out)]) == EXIT_OK
        fits[source.suffix] = json.loads(out.read_text())
    print(f"✅ CIH LOS: n={fits['.csv']['n']} b_tx={fits['.csv']['b_tx']}")
    assert fits[".csv"] == fits[".json"]
    assert fits[".csv"]["sample_count"] == 50 * 9 * 29


def test_parameter_table_with_measurements(tmp_path):
    """analyze --table with the measurement file fills the measured rows from data"""
    print("📊 Testing parameter table...")
    measurements = _measurement_file(tmp_path)
    table = tmp_path / "table.csv"
    assert run(["analyze", "--table", "--in", str(measurements), "--samples", "100",
                "--seed", "3", "--out", str(table)]) == EXIT_OK

    rows = {r["name"]: r for r in csv.DictReader(open(table))}
    print(f"✅ Table rows: {', '.join(rows)}")
    assert len(rows) == 8
    assert rows["ci-rma-los"]["sample_count"] == "14"
    assert rows["cih-rma-nlos"]["sample_count"] == "17"
    assert rows["ci-rma-los"]["rmse_db"] != ""
    assert float(rows["cih-rma-nlos"]["b_tx"]) < 0
    assert float(rows["cih-rma-nlos"]["n"]) == float(rows["cih-3gpp-nlos"]["n"])


def main():
    """Run all integration tests"""
    print("📶 RMa Path Loss Integration Tests")
    print("=" * 50)

    try:
        with tempfile.TemporaryDirectory() as workdir:
            test_measured_fits(Path(workdir))
        with tempfile.TemporaryDirectory() as workdir:
            test_simulated_pipeline(Path(workdir))
        with tempfile.TemporaryDirectory() as workdir:
            test_parameter_table_with_measurements(Path(workdir))

        print("🎉 All integration tests completed successfully!")

    except Exception as e:
        print(f"❌ Test failed with error: {e}")
        import traceback
        traceback.print_exc()
        return 1

    return 0

if __name__ == "__main__":
    sys.exit(main())
