from typing import Dict, Iterable, Iterator, List, Optional, Set, Tuple
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
import logging

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.models import (
    APPLICABILITY,
    ApplicabilityError,
    DataSource,
    Environment,
    PathLossDomainError,
    Violation,
    draw_shadow_fading,
    rma_los_mean,
    rma_nlos_mean,
)

logger = logging.getLogger(__name__)

_ENV_CODES = {Environment.LOS: 0, Environment.NLOS: 1}
_CODE_ENVS = {code: env for env, code in _ENV_CODES.items()}
_FLOAT_COLUMNS = ("f_c", "d_2d", "d_3d", "h_bs", "h_ut", "pl")
_ALL_COLUMNS = ("f_c", "d_2d", "d_3d", "h_bs", "h_ut", "env_code", "pl")


class DistanceSampling(str, Enum):
    LINEAR = "linear"
    LOG = "log"


class ScenarioConfig(BaseModel):
    """One Monte Carlo experiment: frequency x base-station-height cells of i.i.d. samples"""

    model_config = ConfigDict(frozen=True)

    frequencies: List[float] = Field(min_length=1)
    d2d_min: float = Field(default=10.0, gt=0)
    d2d_max: float = Field(gt=0)
    environment: Environment
    samples_per_cell: int = Field(ge=0)
    h_bs_sweep: List[float] = Field(default_factory=lambda: [35.0], min_length=1)
    h: float = Field(default=5.0, gt=0)
    w: float = Field(default=20.0, gt=0)
    h_ut: float = Field(default=1.5, gt=0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    distance_sampling: DistanceSampling = DistanceSampling.LINEAR
    force: bool = False

    @field_validator("frequencies", "h_bs_sweep")
    @classmethod
    def _positive_entries(cls, values: List[float]) -> List[float]:
        if any(v <= 0 for v in values):
            raise ValueError("frequencies and heights must be positive")
        return values

    @model_validator(mode="after")
    def _ordered_range(self) -> "ScenarioConfig":
        if self.d2d_min > self.d2d_max:
            raise ValueError(f"d2d_min={self.d2d_min} exceeds d2d_max={self.d2d_max}")
        return self

    @property
    def d2d_range(self) -> Tuple[float, float]:
        return self.d2d_min, self.d2d_max

    def cells(self) -> List[Tuple[float, float]]:
        """(frequency, h_BS) pairs in output order: frequency-major, then height"""
        return [(f_c, h_bs) for f_c in self.frequencies for h_bs in self.h_bs_sweep]

    @property
    def total_samples(self) -> int:
        return self.samples_per_cell * len(self.frequencies) * len(self.h_bs_sweep)

    def violations(self) -> List[Violation]:
        """Applicability problems with the distance range, heights, street width"""
        table = APPLICABILITY[self.environment]
        found = []
        for name, value, interval in [
            ("d_2d", self.d2d_min, table.d_2d),
            ("d_2d", self.d2d_max, table.d_2d),
            ("h", self.h, table.h),
            ("w", self.w, table.w),
            ("h_ut", self.h_ut, table.h_ut),
        ] + [("h_bs", h_bs, table.h_bs) for h_bs in self.h_bs_sweep]:
            if not interval.contains(value):
                found.append(Violation(parameter=name, value=value, interval=interval,
                                       environment=self.environment))
        return found


class PathLossSample(BaseModel):
    """A single simulated or measured path loss observation"""

    model_config = ConfigDict(frozen=True)

    f_c: float = Field(gt=0)
    d_2d: float = Field(gt=0)
    d_3d: float = Field(gt=0)
    h_bs: float = Field(gt=0)
    h_ut: float = Field(gt=0)
    environment: Environment
    pl: float
    source: DataSource = DataSource.SIMULATED
    location: Optional[str] = None

    @field_validator("pl")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not np.isfinite(value):
            raise ValueError("path loss must be finite")
        return value


def _frozen(values, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Columnar, read-only collection of path loss samples in generation order"""

    f_c: np.ndarray
    d_2d: np.ndarray
    d_3d: np.ndarray
    h_bs: np.ndarray
    h_ut: np.ndarray
    env_code: np.ndarray
    pl: np.ndarray
    source: DataSource = DataSource.SIMULATED
    location: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in _FLOAT_COLUMNS:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "env_code", _frozen(self.env_code, dtype=np.int8))
        if self.location is not None:
            object.__setattr__(self, "location", _frozen(self.location, dtype=object))
        sizes = {getattr(self, name).shape for name in _FLOAT_COLUMNS + ("env_code",)}
        if self.location is not None:
            sizes.add(self.location.shape)
        if len(sizes) > 1:
            raise ValueError(f"sample columns have mismatched shapes: {sorted(sizes)}")

    def __len__(self) -> int:
        return int(self.pl.shape[0])

    @classmethod
    def empty(cls, source: DataSource = DataSource.SIMULATED) -> "SampleSet":
        nothing = np.empty(0)
        return cls(nothing, nothing, nothing, nothing, nothing, np.empty(0, dtype=np.int8),
                   nothing, source=source)

    @classmethod
    def from_records(cls, records: Iterable[PathLossSample]) -> "SampleSet":
        records = list(records)
        if not records:
            return cls.empty()
        sources = {r.source for r in records}
        source = DataSource.SIMULATED if sources == {DataSource.SIMULATED} else DataSource.MEASURED
        locations = None
        if any(r.location is not None for r in records):
            locations = [r.location or "" for r in records]
        return cls(
            f_c=[r.f_c for r in records],
            d_2d=[r.d_2d for r in records],
            d_3d=[r.d_3d for r in records],
            h_bs=[r.h_bs for r in records],
            h_ut=[r.h_ut for r in records],
            env_code=[_ENV_CODES[r.environment] for r in records],
            pl=[r.pl for r in records],
            source=source,
            location=locations,
        )

    @classmethod
    def concat(cls, sets: Iterable["SampleSet"]) -> "SampleSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        if len(sets) == 1:
            return sets[0]
        sources = {s.source for s in sets}
        source = DataSource.SIMULATED if sources == {DataSource.SIMULATED} else DataSource.MEASURED
        locations = None
        if any(s.location is not None for s in sets):
            locations = np.concatenate([
                s.location if s.location is not None else np.full(len(s), "", dtype=object)
                for s in sets
            ])
        return cls(
            *(np.concatenate([getattr(s, name) for s in sets])
              for name in _ALL_COLUMNS),
            source=source,
            location=locations,
        )

    def environments(self) -> Set[Environment]:
        return {_CODE_ENVS[int(code)] for code in np.unique(self.env_code)}

    def environment_at(self, index: int) -> Environment:
        return _CODE_ENVS[int(self.env_code[index])]

    def select(self, mask: np.ndarray) -> "SampleSet":
        return SampleSet(
            *(getattr(self, name)[mask]
              for name in _ALL_COLUMNS),
            source=self.source,
            location=None if self.location is None else self.location[mask],
        )

    def filter(self, environment: Environment) -> "SampleSet":
        return self.select(self.env_code == _ENV_CODES[Environment(environment)])

    def records(self) -> Iterator[PathLossSample]:
        for i in range(len(self)):
            yield PathLossSample(
                f_c=float(self.f_c[i]),
                d_2d=float(self.d_2d[i]),
                d_3d=float(self.d_3d[i]),
                h_bs=float(self.h_bs[i]),
                h_ut=float(self.h_ut[i]),
                environment=self.environment_at(i),
                pl=float(self.pl[i]),
                source=self.source,
                location=None if self.location is None else self.location[i],
            )


def environment_code(environment: Environment) -> int:
    return _ENV_CODES[Environment(environment)]


def derive_3d_distance(d_2d, h_bs, h_ut):
    """3D T-R separation from the ground distance and the two antenna heights"""
    d_2d = np.asarray(d_2d, dtype=float)
    h_bs = np.asarray(h_bs, dtype=float)
    h_ut = np.asarray(h_ut, dtype=float)
    if not np.all(d_2d > 0):
        raise PathLossDomainError("2D distance must be positive")
    if not np.all((h_bs > 0) & (h_ut > 0)):
        raise PathLossDomainError("antenna heights must be positive")
    d_3d = np.hypot(d_2d, h_bs - h_ut)
    return float(d_3d) if np.ndim(d_3d) == 0 else d_3d


def cell_rng(seed: int, cell_index: int) -> np.random.Generator:
    """Independent PCG64 stream per cell, derived from (master seed, cell index)"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(cell_index,))))


def _draw_distances(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    low, high = cfg.d2d_range
    if cfg.distance_sampling is DistanceSampling.LOG:
        return 10 ** rng.uniform(np.log10(low), np.log10(high), cfg.samples_per_cell)
    return rng.uniform(low, high, cfg.samples_per_cell)


def generate_cell(cfg: ScenarioConfig, cell_index: int) -> SampleSet:
    """Samples for one (frequency, h_BS) cell"""
    f_c, h_bs = cfg.cells()[cell_index]
    n = cfg.samples_per_cell
    rng = cell_rng(cfg.seed, cell_index)
    d_2d = _draw_distances(cfg, rng)
    d_3d = derive_3d_distance(d_2d, h_bs, cfg.h_ut)
    if cfg.environment is Environment.LOS:
        mean, sigma, _ = rma_los_mean(d_2d, d_3d, f_c, cfg.h, h_bs, cfg.h_ut)
    else:
        mean, _ = rma_nlos_mean(d_2d, d_3d, f_c, cfg.h, cfg.w, h_bs, cfg.h_ut)
        sigma = 8.0
    pl = mean + draw_shadow_fading(sigma, n, rng)
    logger.debug(f"Cell {cell_index}: f_c={f_c} GHz h_BS={h_bs} m, {n} samples")
    return SampleSet(
        f_c=np.full(n, f_c),
        d_2d=d_2d,
        d_3d=d_3d,
        h_bs=np.full(n, h_bs),
        h_ut=np.full(n, cfg.h_ut),
        env_code=np.full(n, _ENV_CODES[cfg.environment], dtype=np.int8),
        pl=pl,
    )


def check_scenario(cfg: ScenarioConfig) -> List[Violation]:
    violations = cfg.violations()
    if violations and not cfg.force:
        raise ApplicabilityError(violations)
    if violations:
        logger.warning("⚠️ Scenario outside the RMa applicability ranges, generating anyway: "
                       + "; ".join(str(v) for v in violations))
    return violations


def iter_cells(cfg: ScenarioConfig, workers: int = 1) -> Iterator[SampleSet]:
    """Yield each cell's samples in (frequency, height) order.

    With workers > 1 cells are generated on a thread pool in bounded batches;
    per-cell seeding keeps the output independent of the worker count.
    """
    check_scenario(cfg)
    n_cells = len(cfg.cells())
    if workers <= 1:
        for index in range(n_cells):
            yield generate_cell(cfg, index)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        batch = workers * 2
        for start in range(0, n_cells, batch):
            indices = range(start, min(start + batch, n_cells))
            yield from pool.map(lambda i: generate_cell(cfg, i), indices)


class ScenarioStream:
    """Re-iterable view of a scenario; each pass regenerates identical cells"""

    def __init__(self, cfg: ScenarioConfig, workers: int = 1):
        self.cfg = cfg
        self.workers = workers

    def __iter__(self) -> Iterator[SampleSet]:
        return iter_cells(self.cfg, self.workers)

    def __len__(self) -> int:
        return self.cfg.total_samples


def generate_samples(cfg: ScenarioConfig, workers: int = 1) -> SampleSet:
    """All samples for cfg, ordered by (frequency index, height index, sample index)"""
    samples = SampleSet.concat(iter_cells(cfg, workers))
    logger.info(
        f"✅ Generated {len(samples)} {cfg.environment.value.upper()} samples "
        f"({len(cfg.frequencies)} frequencies x {len(cfg.h_bs_sweep)} heights)"
    )
    return samples


def _split_floats(raw: str) -> List[float]:
    return [float(item) for item in raw.replace(";", ",").split(",") if item.strip()]


def load_scenario_config(path) -> ScenarioConfig:
    """Read a key-value scenario file (KEY=value lines, lists comma-separated)"""
    path = Path(path)
    raw = {k.lower(): v for k, v in dotenv_values(path).items() if v is not None}
    if not raw:
        raise ValueError(f"Scenario file {path} has no settings")
    values: Dict[str, object] = dict(raw)
    for key in ("frequencies", "h_bs_sweep"):
        if key in values:
            values[key] = _split_floats(raw[key])
    if "force" in values:
        values["force"] = raw["force"].strip().lower() in ("1", "true", "yes", "on")
    logger.info(f"Loaded scenario config from {path}")
    return ScenarioConfig.model_validate(values)


def residual_shadow_fading(samples: SampleSet, h: float = 5.0, w: float = 20.0) -> np.ndarray:
    """Sample path loss minus the 3GPP mean that generated it"""
    residual = np.empty(len(samples))
    for env in samples.environments():
        mask = samples.env_code == _ENV_CODES[env]
        s = samples.select(mask)
        if env is Environment.LOS:
            mean, _, _ = rma_los_mean(s.d_2d, s.d_3d, s.f_c, h, s.h_bs, s.h_ut)
        else:
            mean, _ = rma_nlos_mean(s.d_2d, s.d_3d, s.f_c, h, w, s.h_bs, s.h_ut)
        residual[mask] = s.pl - mean
    return residual
