from typing import Dict, List, Optional, Tuple
from pathlib import Path
import logging
import os

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.dataset_io import LinkBudget
from src.models import Environment
from src.simulation import DistanceSampling, ScenarioConfig

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS_PATH = Path(__file__).resolve().parent.parent / "rma" / "settings" / "settings.json"


def axis(low: float, high: float, step: float) -> List[float]:
    """Inclusive evenly spaced axis, rounded so 0.1 steps print cleanly"""
    if step <= 0 or high < low:
        raise ValueError(f"bad axis [{low}, {high}] step {step}")
    count = int(round((high - low) / step)) + 1
    return [round(float(v), 9) for v in np.linspace(low, low + step * (count - 1), count)]


class CasePreset(BaseModel):
    model_config = ConfigDict(frozen=True)

    frequencies: List[float] = Field(min_length=1)
    h_bs_sweep: List[float] = Field(min_length=1)
    samples_per_cell: int = Field(ge=0)


class GeometryDefaults(BaseModel):
    model_config = ConfigDict(frozen=True)

    h: float = Field(default=5.0, gt=0)
    w: float = Field(default=20.0, gt=0)
    h_ut: float = Field(default=1.5, gt=0)


class MeasurementCampaign(BaseModel):
    """Fixed facts of the 73 GHz rural campaign"""

    model_config = ConfigDict(frozen=True)

    f_c_ghz: float = 73.0
    h_bs: float = Field(default=110.0, gt=0)
    h_b0: float = Field(default=35.0, gt=0)
    los_locations: int = 14
    nlos_locations: int = 17


class HeightGainSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    distances: List[float] = Field(default_factory=lambda: [150.0, 500.0, 1000.0, 2500.0, 5000.0])
    h_bs_min: float = 10.0
    h_bs_max: float = 150.0
    h_bs_step: float = 5.0
    f_c_ghz: float = 1.0
    h_ut: float = 1.5

    def heights(self) -> List[float]:
        return axis(self.h_bs_min, self.h_bs_max, self.h_bs_step)


class FeasibilitySettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    f_min_ghz: float = 0.5
    f_max_ghz: float = 100.0
    f_step_ghz: float = 0.1
    h_bs_min: float = 10.0
    h_bs_max: float = 150.0
    h_bs_step: float = 1.0
    h_ut: float = 1.5
    d_max: float = 10_000.0

    def frequencies(self) -> List[float]:
        return axis(self.f_min_ghz, self.f_max_ghz, self.f_step_ghz)

    def heights(self) -> List[float]:
        return axis(self.h_bs_min, self.h_bs_max, self.h_bs_step)


class Settings(BaseModel):
    """Experiment presets read from rma/settings/settings.json"""

    model_config = ConfigDict(frozen=True)

    cases: Dict[str, CasePreset]
    d2d_range: Dict[Environment, Tuple[float, float]]
    geometry: GeometryDefaults = GeometryDefaults()
    seed: int = Field(default=0, ge=0)
    distance_sampling: DistanceSampling = DistanceSampling.LINEAR
    link_budget: LinkBudget = LinkBudget.default()
    measurement: MeasurementCampaign = MeasurementCampaign()
    height_gain: HeightGainSettings = HeightGainSettings()
    feasibility: FeasibilitySettings = FeasibilitySettings()

    @model_validator(mode="after")
    def _complete(self) -> "Settings":
        missing = {"one", "two"} - set(self.cases)
        if missing:
            raise ValueError(f"settings lack case preset(s): {', '.join(sorted(missing))}")
        if set(self.d2d_range) != set(Environment):
            raise ValueError("settings need a d2d_range for both los and nlos")
        return self

    def scenario(self, case: str, environment: Environment, seed: Optional[int] = None,
                 samples_per_cell: Optional[int] = None,
                 distance_sampling: Optional[DistanceSampling] = None,
                 force: bool = False) -> ScenarioConfig:
        """ScenarioConfig for Case One or Case Two in one environment"""
        try:
            preset = self.cases[case]
        except KeyError:
            raise ValueError(f"Unknown case '{case}'; choose from {', '.join(self.cases)}") from None
        environment = Environment(environment)
        d2d_min, d2d_max = self.d2d_range[environment]
        return ScenarioConfig(
            frequencies=preset.frequencies,
            d2d_min=d2d_min,
            d2d_max=d2d_max,
            environment=environment,
            samples_per_cell=preset.samples_per_cell if samples_per_cell is None else samples_per_cell,
            h_bs_sweep=preset.h_bs_sweep,
            h=self.geometry.h,
            w=self.geometry.w,
            h_ut=self.geometry.h_ut,
            seed=self.seed if seed is None else seed,
            distance_sampling=distance_sampling or self.distance_sampling,
            force=force,
        )


def load_settings(path=None) -> Settings:
    """Load presets from path, $RMA_SETTINGS, or the bundled settings.json"""
    path = Path(path or os.getenv("RMA_SETTINGS") or DEFAULT_SETTINGS_PATH)
    settings = Settings.model_validate_json(path.read_text(encoding="utf-8"))
    logger.debug(f"Loaded settings from {path}")
    return settings
