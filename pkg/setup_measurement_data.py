"""
Setup script for the synthetic 73 GHz rural measurement file.

Writes rma/input/measurements_73ghz.csv: 14 LOS and 17 NLOS locations drawn
from the measured CI models, plus LOS-diffraction and censored rows so the
loader's dropping rules have something to act on.
"""
from pathlib import Path
import argparse

import numpy as np

from src.dataset_io import CSV_HEADER, LinkBudget, atomic_write
from src.models import published_model, sample_ci_path_loss
from src.simulation import derive_3d_distance

INPUT_DIR = Path("rma") / "input"
F_C = 73.0
H_BS = 110.0


def create_input_directory() -> Path:
    INPUT_DIR.mkdir(parents=True, exist_ok=True)
    print(f"Created measurement directory: {INPUT_DIR}")
    return INPUT_DIR


def _locations(rng: np.random.Generator, count: int, low: float, high: float):
    d_2d = np.sort(10 ** rng.uniform(np.log10(low), np.log10(high), count))
    h_ut = rng.uniform(1.6, 2.0, count)
    return d_2d, h_ut


def build_rows(seed: int = 73):
    rng = np.random.default_rng(seed)
    budget = LinkBudget.default()
    rows = []
    for env, prefix, count, (low, high) in [
        ("los", "L", 14, (33.0, 10_800.0)),
        ("nlos", "N", 17, (3_400.0, 10_600.0)),
    ]:
        params = published_model(f"ci-rma-{env}").params
        d_2d, h_ut = _locations(rng, count, low, high)
        d_3d = derive_3d_distance(d_2d, H_BS, h_ut)
        pl = np.minimum(sample_ci_path_loss(params, F_C, d_3d, rng),
                        budget.max_measurable_pl_db - 0.5)
        for i in range(count):
            rows.append([f"{prefix}{i + 1:02d}", f"{F_C:.4f}", f"{d_2d[i]:.3f}", f"{H_BS:.3f}",
                         f"{h_ut[i]:.3f}", env, f"{pl[i]:.4f}", "", "false"])

    # LOS-diffraction points, recorded as received power
    los = published_model("ci-rma-los").params
    for i, d in enumerate([1_200.0, 2_700.0, 4_900.0]):
        d_3d = derive_3d_distance(d, H_BS, 1.8)
        pl = float(sample_ci_path_loss(los, F_C, d_3d, rng)[0]) + 12.0
        p_rx = budget.eirp_dbm + budget.rx_gain_dbi - pl
        rows.append([f"D{i + 1:02d}", f"{F_C:.4f}", f"{d:.3f}", f"{H_BS:.3f}", "1.800",
                     "los-diffraction", "", f"{p_rx:.4f}", "false"])

    # No signal above the 190 dB ceiling
    for i, d in enumerate([11_500.0, 12_900.0]):
        rows.append([f"X{i + 1:02d}", f"{F_C:.4f}", f"{d:.3f}", f"{H_BS:.3f}", "1.800",
                     "nlos", "", "", "true"])
    return rows


def write_measurements(input_dir: Path, seed: int) -> Path:
    path = input_dir / "measurements_73ghz.csv"
    rows = build_rows(seed)
    with atomic_write(path) as handle:
        handle.write(",".join(CSV_HEADER) + "\n")
        for row in rows:
            handle.write(",".join(row) + "\n")
    print(f"Created: {path} ({len(rows)} rows)")
    return path


def main():
    parser = argparse.ArgumentParser(description="Write the synthetic 73 GHz measurement file")
    parser.add_argument("--seed", type=int, default=73)
    args = parser.parse_args()

    print("Setting up synthetic 73 GHz rural measurements...")
    input_dir = create_input_directory()
    path = write_measurements(input_dir, args.seed)

    print("\nMeasurement setup complete!")
    print("\nNext steps:")
    print("1. Install dependencies: pip install -r requirements.txt")
    print(f"2. Fit the measured LOS model: python main.py fit --model ci --env los --in {path}")
    print(f"3. Build the parameter table: python main.py analyze --table --in {path}")


if __name__ == "__main__":
    main()
