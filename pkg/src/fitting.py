from typing import Callable, Iterable, Iterator, List, Optional, Set, Union
from enum import Enum
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.models import (
    CihParams,
    CiParams,
    Environment,
    PathLossDomainError,
    ci_path_loss,
    cih_path_loss,
    fspl,
    rma_los_mean,
    rma_nlos_mean,
)
from src.simulation import SampleSet, environment_code

logger = logging.getLogger(__name__)

SampleSource = Union[SampleSet, Iterable[SampleSet]]
ModelEvaluator = Callable[[SampleSet], np.ndarray]


class DegenerateFitError(ValueError):
    """Raised when the samples cannot identify the model parameters"""


class EmptySampleError(ValueError):
    """Raised when an operation needs at least one sample"""


class ModelKind(str, Enum):
    CI = "CI"
    CIH = "CIH"


class FitResult(BaseModel):
    """Minimum-RMSE CI or CIH parameters; sigma is the biased residual RMSE"""

    model_config = ConfigDict(frozen=True, protected_namespaces=(), populate_by_name=True)

    model_kind: ModelKind
    n: float
    b_tx: Optional[float] = None
    h_b0: Optional[float] = Field(default=None, alias="h_B0")
    sigma: float = Field(ge=0)
    sample_count: int = Field(ge=1)

    @model_validator(mode="after")
    def _fields_match_kind(self) -> "FitResult":
        if self.model_kind is ModelKind.CIH and (self.b_tx is None or self.h_b0 is None):
            raise ValueError("a CIH fit needs b_tx and h_B0")
        if self.model_kind is ModelKind.CI and (self.b_tx is not None or self.h_b0 is not None):
            raise ValueError("a CI fit has no b_tx or h_B0")
        return self

    def to_params(self) -> Union[CiParams, CihParams]:
        if self.model_kind is ModelKind.CI:
            return CiParams(n=self.n, sigma=self.sigma)
        return CihParams(n=self.n, b_tx=self.b_tx, h_b0=self.h_b0, sigma=self.sigma)

    def evaluator(self) -> ModelEvaluator:
        if self.model_kind is ModelKind.CI:
            return _cih_mean(self.n, 0.0, 1.0)
        return _cih_mean(self.n, self.b_tx, self.h_b0)


def _chunks(samples: SampleSource) -> Iterable[SampleSet]:
    return [samples] if isinstance(samples, SampleSet) else samples


def _reiterable(samples: SampleSource) -> bool:
    return isinstance(samples, SampleSet) or not isinstance(samples, Iterator)


class LeastSquaresAccumulator:
    """Normal equations of the CI/CIH regression, accumulated chunk by chunk.

    The response is A = PL - FSPL(f_c, 1 m); regressors are X1 = 10 log10(d)
    and, for CIH, X2 = X1 (h_BS - h_B0) / h_B0.
    """

    def __init__(self, h_b0: Optional[float] = None):
        if h_b0 is not None and h_b0 <= 0:
            raise PathLossDomainError("reference height h_B0 must be positive")
        self.h_b0 = h_b0
        size = 1 if h_b0 is None else 2
        self.gram = np.zeros((size, size))
        self.moment = np.zeros(size)
        self.response_sq = 0.0
        self.count = 0
        self.heights: Set[float] = set()

    def _design(self, samples: SampleSet):
        if len(samples) and np.min(samples.d_3d) < 1:
            raise PathLossDomainError("CI/CIH fitting needs every distance >= 1 m")
        response = samples.pl - np.asarray(fspl(samples.f_c, 1.0))
        x1 = 10 * np.log10(samples.d_3d)
        if self.h_b0 is None:
            return response, [x1]
        return response, [x1, x1 * (samples.h_bs - self.h_b0) / self.h_b0]

    def add(self, samples: SampleSet) -> None:
        if not len(samples):
            return
        response, columns = self._design(samples)
        for i, xi in enumerate(columns):
            self.moment[i] += np.sum(xi * response)
            for j, xj in enumerate(columns):
                self.gram[i, j] += np.sum(xi * xj)
        self.response_sq += float(np.sum(response * response))
        self.count += len(samples)
        self.heights.update(np.unique(samples.h_bs).tolist())

    def solve(self) -> np.ndarray:
        if self.count == 0:
            raise EmptySampleError("no samples to fit")
        if self.h_b0 is None:
            if self.gram[0, 0] == 0:
                raise DegenerateFitError("every sample sits at d = 1 m; the PLE is unidentifiable")
            return self.moment / self.gram[0, 0]
        if len(self.heights) < 2:
            raise DegenerateFitError(
                "CIH fit needs at least two distinct h_BS values; use fit_ci instead"
            )
        if np.linalg.cond(self.gram) > 1e12:
            raise DegenerateFitError("CIH design matrix is singular")
        return np.linalg.solve(self.gram, self.moment)

    def residual_rmse(self, theta: np.ndarray) -> float:
        """RMSE from the accumulated sums alone (single-pass fits)"""
        ssr = self.response_sq - 2 * theta @ self.moment + theta @ self.gram @ theta
        return float(np.sqrt(max(ssr, 0.0) / self.count))


def _fit(samples: SampleSource, h_b0: Optional[float]):
    acc = LeastSquaresAccumulator(h_b0)
    for chunk in _chunks(samples):
        acc.add(chunk)
    theta = acc.solve()
    return acc, theta


def fit_ci(samples: SampleSource) -> FitResult:
    """Closed-form least-squares PLE of the CI model"""
    acc, theta = _fit(samples, None)
    n = float(theta[0])
    if _reiterable(samples):
        sigma = rmse(samples, _cih_mean(n, 0.0, 1.0))
    else:
        sigma = acc.residual_rmse(theta)
    result = FitResult(model_kind=ModelKind.CI, n=n, sigma=sigma, sample_count=acc.count)
    logger.info(f"✅ CI fit over {acc.count} samples: n={n:.4f}, sigma={sigma:.4f} dB")
    return result


def fit_cih(samples: SampleSource, h_b0: float = 35.0) -> FitResult:
    """Exact least squares for CIH through the substitution (alpha, beta) = (n, n b_tx)"""
    acc, theta = _fit(samples, h_b0)
    alpha, beta = float(theta[0]), float(theta[1])
    if alpha == 0:
        raise DegenerateFitError("fitted distance coefficient is zero; b_tx is undefined")
    n, b_tx = alpha, beta / alpha
    if _reiterable(samples):
        sigma = rmse(samples, _cih_mean(n, b_tx, h_b0))
    else:
        sigma = acc.residual_rmse(theta)
    result = FitResult(model_kind=ModelKind.CIH, n=n, b_tx=b_tx, h_b0=h_b0, sigma=sigma,
                       sample_count=acc.count)
    logger.info(
        f"✅ CIH fit over {acc.count} samples ({len(acc.heights)} heights): "
        f"n={n:.4f}, b_tx={b_tx:.5f}, sigma={sigma:.4f} dB"
    )
    return result


def _cih_mean(n: float, b_tx: float, h_b0: float) -> ModelEvaluator:
    # Raw formula, so a fit is scored even when its PLE would turn negative at 150 m
    def evaluate(s: SampleSet) -> np.ndarray:
        ple = n * (1 + b_tx * (s.h_bs - h_b0) / h_b0)
        return np.asarray(fspl(s.f_c, 1.0)) + 10 * ple * np.log10(s.d_3d)

    return evaluate


def rmse(samples: SampleSource, evaluator: ModelEvaluator) -> float:
    """Root mean squared difference between sample path loss and a model mean"""
    total = 0.0
    count = 0
    for chunk in _chunks(samples):
        if not len(chunk):
            continue
        residual = chunk.pl - evaluator(chunk)
        total += float(np.sum(residual * residual))
        count += len(chunk)
    if count == 0:
        raise EmptySampleError("RMSE needs at least one sample")
    return float(np.sqrt(total / count))


def model_evaluator(params: Union[CiParams, CihParams]) -> ModelEvaluator:
    if isinstance(params, CihParams):
        return lambda s: np.asarray(cih_path_loss(params, s.f_c, s.d_3d, s.h_bs))
    return lambda s: np.asarray(ci_path_loss(params, s.f_c, s.d_3d))


def rma_evaluator(environment: Environment, h: float = 5.0, w: float = 20.0) -> ModelEvaluator:
    """3GPP RMa mean path loss at each sample's own geometry"""
    environment = Environment(environment)

    def evaluate(s: SampleSet) -> np.ndarray:
        if np.any(s.env_code != environment_code(environment)):
            logger.warning(f"⚠️ Scoring mixed-environment samples with the "
                           f"{environment.value.upper()} 3GPP model")
        if environment is Environment.LOS:
            return rma_los_mean(s.d_2d, s.d_3d, s.f_c, h, s.h_bs, s.h_ut)[0]
        return rma_nlos_mean(s.d_2d, s.d_3d, s.f_c, h, w, s.h_bs, s.h_ut)[0]

    return evaluate


def solve_btx_from_ci(ple_ci: float, n_cih: float, h_bs: float, h_b0: float) -> float:
    """b_tx that makes the CIH effective PLE at h_bs equal a CI PLE"""
    if n_cih <= 0:
        raise PathLossDomainError("n of the CIH model must be positive")
    if h_b0 <= 0:
        raise PathLossDomainError("reference height h_B0 must be positive")
    if h_bs == h_b0:
        raise PathLossDomainError("h_BS equals h_B0, so every b_tx satisfies the equality")
    return (ple_ci / n_cih - 1) * h_b0 / (h_bs - h_b0)


def cih_from_ci(ci_fit: FitResult, cih_fit: FitResult, h_bs: float) -> FitResult:
    """CIH model for single-height data: n from a multi-height CIH fit, b_tx back-solved"""
    if ci_fit.model_kind is not ModelKind.CI or cih_fit.model_kind is not ModelKind.CIH:
        raise ValueError("cih_from_ci expects a CI fit and a CIH fit")
    b_tx = solve_btx_from_ci(ci_fit.n, cih_fit.n, h_bs, cih_fit.h_b0)
    return FitResult(
        model_kind=ModelKind.CIH,
        n=cih_fit.n,
        b_tx=b_tx,
        h_b0=cih_fit.h_b0,
        sigma=ci_fit.sigma,
        sample_count=ci_fit.sample_count,
    )


def fit_result_from_params(params: Union[CiParams, CihParams], sample_count: int) -> FitResult:
    """Wrap published parameters as a FitResult"""
    if isinstance(params, CihParams):
        return FitResult(model_kind=ModelKind.CIH, n=params.n, b_tx=params.b_tx,
                         h_b0=params.h_b0, sigma=params.sigma, sample_count=sample_count)
    return FitResult(model_kind=ModelKind.CI, n=params.n, sigma=params.sigma,
                     sample_count=sample_count)


def fit_per_environment(samples: SampleSet, kind: ModelKind,
                        h_b0: float = 35.0) -> List[FitResult]:
    fits = []
    for env in sorted(samples.environments(), key=lambda e: e.value):
        subset = samples.filter(env)
        fits.append(fit_ci(subset) if kind is ModelKind.CI else fit_cih(subset, h_b0))
    return fits
