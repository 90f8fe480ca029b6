from typing import Dict, List, Optional, Tuple, Union
from enum import Enum
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

# Free-space constant used by the 3GPP breakpoint formula (not CODATA)
SPEED_OF_LIGHT = 3e8
FSPL_1M_1GHZ = 32.4
# Heights over which a CIH model must keep a positive effective PLE
CIH_HEIGHT_RANGE = (10.0, 150.0)

ArrayLike = Union[float, np.ndarray]


class PathLossDomainError(ValueError):
    """Raised when a model is evaluated outside its mathematical domain"""


class Environment(str, Enum):
    LOS = "los"
    NLOS = "nlos"


class Segment(str, Enum):
    PL1 = "PL1"
    PL2 = "PL2"


class DataSource(str, Enum):
    SIMULATED = "simulated"
    MEASURED = "measured"


class GeometryParams(BaseModel):
    """3GPP RMa link geometry; heights and distances in meters"""

    model_config = ConfigDict(frozen=True)

    d_2d: float = Field(gt=0)
    h_bs: float = Field(default=35.0, gt=0)
    h_ut: float = Field(default=1.5, gt=0)
    h: float = Field(default=5.0, gt=0)
    w: float = Field(default=20.0, gt=0)

    @property
    def d_3d(self) -> float:
        return float(np.hypot(self.d_2d, self.h_bs - self.h_ut))

    @classmethod
    def from_3d(cls, d_3d: float, **kwargs) -> "GeometryParams":
        """Build a geometry whose 3D separation is d_3d for the given heights"""
        h_bs = kwargs.get("h_bs", 35.0)
        h_ut = kwargs.get("h_ut", 1.5)
        dh = h_bs - h_ut
        if d_3d <= abs(dh):
            raise PathLossDomainError(
                f"d_3D={d_3d} m is not longer than the height difference {abs(dh)} m"
            )
        return cls(d_2d=float(np.sqrt(d_3d ** 2 - dh ** 2)), **kwargs)


class Interval(BaseModel):
    model_config = ConfigDict(frozen=True)

    low: float
    high: float

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high

    def __str__(self) -> str:
        return f"[{self.low:g}, {self.high:g}]"


class Violation(BaseModel):
    """One parameter outside its RMa applicability interval"""

    model_config = ConfigDict(frozen=True)

    parameter: str
    value: float
    interval: Interval
    environment: Environment

    def __str__(self) -> str:
        return (
            f"{self.parameter}={self.value:g} m outside {self.interval} m "
            f"({self.environment.value.upper()})"
        )


class ApplicabilityError(ValueError):
    """Raised when a geometry violates the RMa applicability ranges and the caller did not force evaluation"""

    def __init__(self, violations: List[Violation]):
        self.violations = list(violations)
        report = "; ".join(str(v) for v in self.violations)
        super().__init__(f"Geometry outside 3GPP RMa applicability: {report}")


class ApplicabilityRange(BaseModel):
    """RMa applicability intervals and default values for one environment"""

    model_config = ConfigDict(frozen=True)

    environment: Environment
    d_2d: Interval
    h: Interval
    w: Interval
    h_bs: Interval
    h_ut: Interval
    defaults: Dict[str, float]

    @model_validator(mode="after")
    def _defaults_inside(self) -> "ApplicabilityRange":
        for name, value in self.defaults.items():
            if not getattr(self, name).contains(value):
                raise ValueError(f"default {name}={value} lies outside {getattr(self, name)}")
        return self

    def intervals(self) -> Dict[str, Interval]:
        return {
            "d_2d": self.d_2d,
            "h": self.h,
            "w": self.w,
            "h_bs": self.h_bs,
            "h_ut": self.h_ut,
        }


RMA_DEFAULTS = {"h_bs": 35.0, "h_ut": 1.5, "w": 20.0, "h": 5.0}

APPLICABILITY: Dict[Environment, ApplicabilityRange] = {
    Environment.LOS: ApplicabilityRange(
        environment=Environment.LOS,
        d_2d=Interval(low=10.0, high=10_000.0),
        h=Interval(low=5.0, high=50.0),
        w=Interval(low=5.0, high=50.0),
        h_bs=Interval(low=10.0, high=150.0),
        h_ut=Interval(low=1.0, high=10.0),
        defaults=RMA_DEFAULTS,
    ),
    Environment.NLOS: ApplicabilityRange(
        environment=Environment.NLOS,
        d_2d=Interval(low=10.0, high=5_000.0),
        h=Interval(low=5.0, high=50.0),
        w=Interval(low=5.0, high=50.0),
        h_bs=Interval(low=10.0, high=150.0),
        h_ut=Interval(low=1.0, high=10.0),
        defaults=RMA_DEFAULTS,
    ),
}


class CiParams(BaseModel):
    """Close-in free space reference distance model, d_0 = 1 m"""

    model_config = ConfigDict(frozen=True)

    n: float = Field(gt=0)
    sigma: float = Field(default=0.0, ge=0)
    d_0: float = 1.0

    @model_validator(mode="after")
    def _unit_reference(self) -> "CiParams":
        if self.d_0 != 1.0:
            raise ValueError("the CI reference distance is fixed at 1 m")
        return self


class CihParams(BaseModel):
    """CI model with a base-station-height dependent path loss exponent"""

    model_config = ConfigDict(frozen=True)

    n: float = Field(gt=0)
    b_tx: float
    h_b0: float = Field(default=35.0, gt=0)
    sigma: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _positive_effective_ple(self) -> "CihParams":
        # Effective PLE is linear in h_BS, so the endpoints bound it
        for h_bs in CIH_HEIGHT_RANGE:
            if self.n * (1 + self.b_tx * (h_bs - self.h_b0) / self.h_b0) <= 0:
                raise ValueError(f"effective PLE is not positive at h_BS={h_bs} m")
        return self


class SakagamiParams(BaseModel):
    """Inputs of the Sakagami-Kuboi urban model; f in MHz, d in km, heights in meters"""

    model_config = ConfigDict(frozen=True)

    w: float = Field(gt=0)
    theta: float = Field(ge=0, le=90)
    h_s: float = Field(gt=0)
    h_avg: float = Field(gt=0)
    h_building: float = Field(gt=0)
    h_b0: float = Field(gt=0)
    h_b: float = Field(gt=0)
    f_mhz: float = Field(gt=0)
    d_km: float = Field(gt=0)
    h_m: float = Field(default=1.5, gt=0)


class LosPathLoss(BaseModel):
    mean: float
    sigma: float
    segment: Segment
    breakpoint_m: float
    violations: List[Violation] = Field(default_factory=list)


class NlosPathLoss(BaseModel):
    mean: float
    sigma: float
    nlos_component: float
    los_mean: float
    violations: List[Violation] = Field(default_factory=list)


class PublishedModel(BaseModel):
    """A fitted CI or CIH model as reported for the 73 GHz rural campaign"""

    model_config = ConfigDict(frozen=True)

    name: str
    data_source: DataSource
    environment: Environment
    params: Union[CihParams, CiParams]


PUBLISHED_MODELS: Dict[str, PublishedModel] = {
    model.name: model
    for model in [
        PublishedModel(name="ci-3gpp-los", data_source=DataSource.SIMULATED,
                       environment=Environment.LOS, params=CiParams(n=2.31, sigma=5.9)),
        PublishedModel(name="ci-rma-los", data_source=DataSource.MEASURED,
                       environment=Environment.LOS, params=CiParams(n=2.16, sigma=1.7)),
        PublishedModel(name="ci-3gpp-nlos", data_source=DataSource.SIMULATED,
                       environment=Environment.NLOS, params=CiParams(n=3.04, sigma=8.2)),
        PublishedModel(name="ci-rma-nlos", data_source=DataSource.MEASURED,
                       environment=Environment.NLOS, params=CiParams(n=2.75, sigma=6.7)),
        PublishedModel(name="cih-3gpp-los", data_source=DataSource.SIMULATED,
                       environment=Environment.LOS,
                       params=CihParams(n=2.31, b_tx=-0.006, h_b0=35.0, sigma=5.6)),
        PublishedModel(name="cih-rma-los", data_source=DataSource.MEASURED,
                       environment=Environment.LOS,
                       params=CihParams(n=2.31, b_tx=-0.03, h_b0=35.0, sigma=1.7)),
        PublishedModel(name="cih-3gpp-nlos", data_source=DataSource.SIMULATED,
                       environment=Environment.NLOS,
                       params=CihParams(n=3.07, b_tx=-0.06, h_b0=35.0, sigma=8.7)),
        PublishedModel(name="cih-rma-nlos", data_source=DataSource.MEASURED,
                       environment=Environment.NLOS,
                       params=CihParams(n=3.07, b_tx=-0.049, h_b0=35.0, sigma=6.7)),
    ]
}


def _scalar_or_array(value: np.ndarray) -> ArrayLike:
    return float(value) if np.ndim(value) == 0 else value


def _require(condition, message: str):
    if not np.all(condition):
        raise PathLossDomainError(message)


def fspl(f_c: ArrayLike, d: ArrayLike) -> ArrayLike:
    """Friis free space path loss in dB; f_c in GHz, d in meters (d >= 1)"""
    f_c = np.asarray(f_c, dtype=float)
    d = np.asarray(d, dtype=float)
    _require(f_c > 0, "frequency must be positive")
    _require(d >= 1, "distance must be at least 1 m")
    return _scalar_or_array(FSPL_1M_1GHZ + 20 * np.log10(f_c) + 20 * np.log10(d))


def ci_path_loss(p: CiParams, f_c: ArrayLike, d: ArrayLike) -> ArrayLike:
    """Mean CI path loss in dB (shadow fading excluded)"""
    f_c = np.asarray(f_c, dtype=float)
    d = np.asarray(d, dtype=float)
    _require(f_c > 0, "frequency must be positive")
    _require(d >= 1, "CI model requires d >= 1 m")
    return _scalar_or_array(FSPL_1M_1GHZ + 20 * np.log10(f_c) + 10 * p.n * np.log10(d))


def effective_ple(p: CihParams, h_bs: ArrayLike) -> ArrayLike:
    h_bs = np.asarray(h_bs, dtype=float)
    _require(h_bs > 0, "base station height must be positive")
    return _scalar_or_array(p.n * (1 + p.b_tx * (h_bs - p.h_b0) / p.h_b0))


def cih_path_loss(p: CihParams, f_c: ArrayLike, d: ArrayLike, h_bs: ArrayLike) -> ArrayLike:
    """Mean CIH path loss in dB (shadow fading excluded)"""
    f_c = np.asarray(f_c, dtype=float)
    d = np.asarray(d, dtype=float)
    _require(f_c > 0, "frequency must be positive")
    _require(d >= 1, "CIH model requires d >= 1 m")
    ple = np.asarray(effective_ple(p, h_bs))
    return _scalar_or_array(FSPL_1M_1GHZ + 20 * np.log10(f_c) + 10 * ple * np.log10(d))


def breakpoint_distance(h_bs: ArrayLike, h_ut: ArrayLike, f_c_hz: ArrayLike) -> ArrayLike:
    """LOS breakpoint distance in meters; f_c in Hz"""
    h_bs = np.asarray(h_bs, dtype=float)
    h_ut = np.asarray(h_ut, dtype=float)
    f_c_hz = np.asarray(f_c_hz, dtype=float)
    _require((h_bs > 0) & (h_ut > 0) & (f_c_hz > 0), "breakpoint inputs must be positive")
    return _scalar_or_array(2 * np.pi * h_bs * h_ut * f_c_hz / SPEED_OF_LIGHT)


def los_pl1(d: ArrayLike, f_c: ArrayLike, h: ArrayLike) -> ArrayLike:
    """RMa LOS path loss before the breakpoint"""
    d = np.asarray(d, dtype=float)
    h = np.asarray(h, dtype=float)
    return _scalar_or_array(
        20 * np.log10(40 * np.pi * d * np.asarray(f_c, dtype=float) / 3)
        + np.minimum(0.03 * h ** 1.72, 10) * np.log10(d)
        - np.minimum(0.044 * h ** 1.72, 14.77)
        + 0.002 * np.log10(h) * d
    )


def los_pl2(d: ArrayLike, d_bp: ArrayLike, f_c: ArrayLike, h: ArrayLike) -> ArrayLike:
    """RMa LOS path loss beyond the breakpoint, anchored on PL1 at d_bp"""
    d = np.asarray(d, dtype=float)
    d_bp = np.asarray(d_bp, dtype=float)
    return _scalar_or_array(np.asarray(los_pl1(d_bp, f_c, h)) + 40 * np.log10(d / d_bp))


def rma_los_mean(d_2d, d_3d, f_c, h, h_bs, h_ut) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized RMa LOS model; returns (mean dB, sigma dB, beyond-breakpoint mask)"""
    d_2d = np.asarray(d_2d, dtype=float)
    d_3d = np.asarray(d_3d, dtype=float)
    f_c = np.asarray(f_c, dtype=float)
    _require(f_c > 0, "frequency must be positive")
    _require((d_2d > 0) & (d_3d > 0), "distances must be positive")
    _require(np.asarray(h) > 0, "average building height must be positive")
    d_bp = np.asarray(breakpoint_distance(h_bs, h_ut, f_c * 1e9))
    beyond = d_2d > d_bp
    mean = np.where(beyond, los_pl2(d_3d, d_bp, f_c, h), los_pl1(d_3d, f_c, h))
    sigma = np.where(beyond, 6.0, 4.0)
    return mean, sigma, beyond


def hata_mobile_correction(h_m: ArrayLike) -> ArrayLike:
    """Okumura-Hata mobile antenna height correction a(h_m) in dB"""
    h_m = np.asarray(h_m, dtype=float)
    _require(h_m > 0, "mobile height must be positive")
    return _scalar_or_array(3.2 * np.log10(11.75 * h_m) ** 2 - 4.97)


def rma_nlos_height_terms(d_3d, h, h_bs) -> ArrayLike:
    """The h_BS dependent part of the 3GPP NLOS term; nothing in it depends on frequency"""
    d_3d = np.asarray(d_3d, dtype=float)
    h = np.asarray(h, dtype=float)
    h_bs = np.asarray(h_bs, dtype=float)
    _require(d_3d > 0, "distance must be positive")
    _require((h > 0) & (h_bs > 0), "heights must be positive")
    return _scalar_or_array(
        -(24.37 - 3.7 * (h / h_bs) ** 2) * np.log10(h_bs)
        + (43.42 - 3.1 * np.log10(h_bs)) * (np.log10(d_3d) - 3)
    )


def rma_nlos_component(d_3d, f_c, h, w, h_bs, h_ut) -> ArrayLike:
    """The PL_RMa-NLOS term of the 3GPP NLOS model, before the max with LOS"""
    d_3d = np.asarray(d_3d, dtype=float)
    f_c = np.asarray(f_c, dtype=float)
    h = np.asarray(h, dtype=float)
    w = np.asarray(w, dtype=float)
    h_bs = np.asarray(h_bs, dtype=float)
    _require(f_c > 0, "frequency must be positive")
    _require(d_3d > 0, "distance must be positive")
    _require((h > 0) & (w > 0) & (h_bs > 0), "heights and street width must be positive")
    return _scalar_or_array(
        161.04
        - 7.1 * np.log10(w)
        + 7.5 * np.log10(h)
        + np.asarray(rma_nlos_height_terms(d_3d, h, h_bs))
        + 20 * np.log10(f_c)
        - np.asarray(hata_mobile_correction(h_ut))
    )


def rma_nlos_mean(d_2d, d_3d, f_c, h, w, h_bs, h_ut) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized 3GPP NLOS mean; returns (max(LOS, NLOS) dB, NLOS component dB)"""
    component = np.asarray(rma_nlos_component(d_3d, f_c, h, w, h_bs, h_ut))
    los_mean, _, _ = rma_los_mean(d_2d, d_3d, f_c, h, h_bs, h_ut)
    return np.maximum(los_mean, component), component


def validate_applicability(g: GeometryParams, env: Environment) -> List[Violation]:
    """List every geometry parameter outside its RMa applicability interval; never raises"""
    violations = []
    for name, interval in APPLICABILITY[Environment(env)].intervals().items():
        value = getattr(g, name)
        if not interval.contains(value):
            violations.append(
                Violation(parameter=name, value=value, interval=interval, environment=env)
            )
    return violations


def _checked(g: GeometryParams, env: Environment, force: bool) -> List[Violation]:
    violations = validate_applicability(g, env)
    if violations:
        if not force:
            raise ApplicabilityError(violations)
        logger.warning(f"⚠️ Forced {env.value.upper()} evaluation outside the RMa applicability ranges: "
                       + "; ".join(str(v) for v in violations))
    return violations


def rma_los_path_loss(g: GeometryParams, f_c: float, force: bool = False) -> LosPathLoss:
    """3GPP RMa LOS two-slope model; f_c in GHz"""
    violations = _checked(g, Environment.LOS, force)
    mean, sigma, beyond = rma_los_mean(g.d_2d, g.d_3d, f_c, g.h, g.h_bs, g.h_ut)
    return LosPathLoss(
        mean=float(mean),
        sigma=float(sigma),
        segment=Segment.PL2 if bool(beyond) else Segment.PL1,
        breakpoint_m=float(breakpoint_distance(g.h_bs, g.h_ut, f_c * 1e9)),
        violations=violations,
    )


def rma_nlos_path_loss(g: GeometryParams, f_c: float, force: bool = False) -> NlosPathLoss:
    """3GPP RMa NLOS model with the max-operator patch applied to means"""
    violations = _checked(g, Environment.NLOS, force)
    los_mean, _, _ = rma_los_mean(g.d_2d, g.d_3d, f_c, g.h, g.h_bs, g.h_ut)
    component = float(rma_nlos_component(g.d_3d, f_c, g.h, g.w, g.h_bs, g.h_ut))
    return NlosPathLoss(
        mean=max(float(los_mean), component),
        sigma=8.0,
        nlos_component=component,
        los_mean=float(los_mean),
        violations=violations,
    )


def sakagami_path_loss(p: SakagamiParams, extended: bool = False) -> float:
    """Sakagami-Kuboi path loss in dB.

    The extended form uses a 20 log10(f) frequency term and subtracts the Hata
    mobile correction, which is how the 3GPP NLOS model composes it.
    """
    freq_coeff = 20.0 if extended else 20.4
    pl = (
        100
        - 7.1 * np.log10(p.w)
        + 0.023 * p.theta
        + 1.4 * np.log10(p.h_s)
        + 6.1 * np.log10(p.h_avg)
        - (24.37 - 3.7 * (p.h_building / p.h_b0) ** 2) * np.log10(p.h_b)
        + (43.42 - 3.1 * np.log10(p.h_b)) * np.log10(p.d_km)
        + freq_coeff * np.log10(p.f_mhz)
    )
    if extended:
        pl -= hata_mobile_correction(p.h_m)
    return float(pl)


def draw_shadow_fading(sigma: ArrayLike, size: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian shadow fading in dB"""
    return rng.normal(0.0, 1.0, size) * np.asarray(sigma, dtype=float)


def sample_ci_path_loss(p: CiParams, f_c, d, rng: np.random.Generator) -> np.ndarray:
    mean = np.atleast_1d(ci_path_loss(p, f_c, d))
    return mean + draw_shadow_fading(p.sigma, mean.size, rng)


def sample_cih_path_loss(p: CihParams, f_c, d, h_bs, rng: np.random.Generator) -> np.ndarray:
    mean = np.atleast_1d(cih_path_loss(p, f_c, d, h_bs))
    return mean + draw_shadow_fading(p.sigma, mean.size, rng)


def published_model(name: str) -> PublishedModel:
    try:
        return PUBLISHED_MODELS[name]
    except KeyError:
        raise ValueError(
            f"Unknown published model '{name}'; choose from {', '.join(PUBLISHED_MODELS)}"
        ) from None


def applicability_defaults(d_2d: Optional[float] = None, d_3d: Optional[float] = None,
                           **overrides: Optional[float]) -> GeometryParams:
    """Geometry at the RMa default values, with any non-None override applied.

    Exactly one of d_2d and d_3d places the user terminal.
    """
    if (d_2d is None) == (d_3d is None):
        raise ValueError("give exactly one of d_2d and d_3d")
    values = dict(RMA_DEFAULTS)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if d_3d is not None:
        return GeometryParams.from_3d(d_3d, **values)
    return GeometryParams(d_2d=d_2d, **values)
