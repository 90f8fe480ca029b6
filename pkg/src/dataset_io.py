from typing import Any, Dict, Iterable, Iterator, List, Optional, TextIO
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
import csv
import io
import itertools
import json
import logging
import math
import os
import re
import sys
import tempfile

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.fitting import FitResult
from src.models import DataSource, Environment, GeometryParams, validate_applicability
from src.simulation import SampleSet, derive_3d_distance, environment_code

logger = logging.getLogger(__name__)

CSV_HEADER = ("location", "f_c_ghz", "d_2d_m", "h_bs_m", "h_ut_m", "env", "pl_db",
              "p_rx_dbm", "censored")
SIMULATED_LOCATION = "simulated"
STDIO = "-"


class SchemaError(ValueError):
    """Malformed input file; the message names the offending line"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnitError(ValueError):
    """Distances or heights that cannot be physical"""


class RecordEnvironment(str, Enum):
    LOS = "los"
    NLOS = "nlos"
    LOS_DIFFRACTION = "los-diffraction"


class LinkBudget(BaseModel):
    """Transmit EIRP, receive antenna gain and the sounder's path loss ceiling"""

    model_config = ConfigDict(frozen=True)

    eirp_dbm: float = 41.7
    rx_gain_dbi: float = 0.0
    max_measurable_pl_db: float = Field(default=190.0, gt=0)

    @classmethod
    def default(cls) -> "LinkBudget":
        return cls(eirp_dbm=dbw_to_dbm(11.7), rx_gain_dbi=0.0, max_measurable_pl_db=190.0)


class LinkBudgetResult(BaseModel):
    pl_db: float
    censored: bool


class MeasurementRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    location: str = ""
    f_c: float = Field(gt=0)
    d_2d: float
    h_bs: float
    h_ut: float
    environment: RecordEnvironment
    pl: Optional[float] = None
    p_rx: Optional[float] = None
    censored: bool = False

    @model_validator(mode="after")
    def _one_observation(self) -> "MeasurementRecord":
        if self.pl is not None and self.p_rx is not None:
            raise ValueError("record carries both pl_db and p_rx_dbm")
        if not self.censored and self.pl is None and self.p_rx is None:
            raise ValueError("uncensored record needs pl_db or p_rx_dbm")
        return self


def dbw_to_dbm(value_dbw: float) -> float:
    return value_dbw + 30.0


def path_loss_from_link_budget(b: LinkBudget, p_rx: float) -> LinkBudgetResult:
    """Path loss implied by a received power; censored above the measurable ceiling"""
    if not math.isfinite(p_rx):
        raise ValueError("received power must be finite")
    pl = b.eirp_dbm + b.rx_gain_dbi - p_rx
    return LinkBudgetResult(pl_db=pl, censored=pl > b.max_measurable_pl_db)


@dataclass
class LoadResult:
    samples: SampleSet
    warnings: List[str] = field(default_factory=list)
    out_of_range: List[str] = field(default_factory=list)
    rows_read: int = 0


def _optional_float(raw: str) -> Optional[float]:
    raw = raw.strip()
    return float(raw) if raw else None


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("", "0", "false", "no"):
        return False
    if value in ("1", "true", "yes"):
        return True
    raise ValueError(f"not a boolean: {raw!r}")


@contextmanager
def _open_source(source) -> Iterator[TextIO]:
    if isinstance(source, (str, Path)):
        if str(source) == STDIO:
            yield sys.stdin
            return
        with open(source, newline="", encoding="utf-8") as handle:
            yield handle
    else:
        yield source


class MeasurementReader:
    """Streams a path loss CSV into SampleSet chunks, collecting warnings"""

    def __init__(self, source, link_budget: Optional[LinkBudget] = None,
                 include_diffraction: bool = False, chunk_size: int = 100_000):
        self.source = source
        self.link_budget = link_budget or LinkBudget.default()
        self.include_diffraction = include_diffraction
        self.chunk_size = chunk_size
        self.warnings: List[str] = []
        self.out_of_range: List[str] = []
        self.rows_read = 0

    def _warn(self, message: str) -> None:
        self.warnings.append(message)
        logger.warning(f"⚠️ {message}")

    def _parse(self, row: List[str], line: int) -> MeasurementRecord:
        values = dict(zip(CSV_HEADER, row))
        try:
            record = MeasurementRecord(
                location=values["location"].strip(),
                f_c=float(values["f_c_ghz"]),
                d_2d=float(values["d_2d_m"]),
                h_bs=float(values["h_bs_m"]),
                h_ut=float(values["h_ut_m"]),
                environment=values["env"].strip().lower(),
                pl=_optional_float(values["pl_db"]),
                p_rx=_optional_float(values["p_rx_dbm"]),
                censored=_parse_bool(values["censored"]),
            )
        except ValidationError as e:
            problems = "; ".join(err["msg"] for err in e.errors())
            raise SchemaError(f"invalid record ({values['location'] or 'no location'}): {problems}",
                              line) from None
        except ValueError as e:
            raise SchemaError(str(e), line) from None
        if record.d_2d <= 0 or record.h_bs <= 0 or record.h_ut <= 0:
            raise UnitError(f"line {line}: distances and heights must be positive")
        return record

    def _over_ceiling(self, label: str, pl: float) -> bool:
        if pl <= self.link_budget.max_measurable_pl_db:
            return False
        self._warn(f"Dropping record {label}: {pl:.1f} dB exceeds the "
                   f"{self.link_budget.max_measurable_pl_db:g} dB ceiling")
        return True

    def _accept(self, record: MeasurementRecord, line: int) -> Optional[Dict[str, Any]]:
        label = record.location or f"line {line}"
        # simulated draws are never censored by the sounder
        measured = record.location != SIMULATED_LOCATION
        if record.censored:
            self._warn(f"Dropping censored record {label}")
            return None
        if record.environment is RecordEnvironment.LOS_DIFFRACTION and not self.include_diffraction:
            self._warn(f"Dropping LOS-diffraction record {label}")
            return None
        pl = record.pl
        if record.p_rx is not None:
            pl = path_loss_from_link_budget(self.link_budget, record.p_rx).pl_db
        if measured and self._over_ceiling(label, pl):
            return None
        env = (Environment.NLOS if record.environment is RecordEnvironment.NLOS
               else Environment.LOS)
        geometry = GeometryParams(d_2d=record.d_2d, h_bs=record.h_bs, h_ut=record.h_ut)
        for violation in validate_applicability(geometry, env):
            if violation.parameter in ("d_2d", "h_bs", "h_ut"):
                note = f"Record {label} outside the RMa applicability ranges: {violation}"
                self.out_of_range.append(note)
                logger.warning(f"⚠️ {note}")
        return {
            "location": record.location,
            "f_c": record.f_c,
            "d_2d": record.d_2d,
            "h_bs": record.h_bs,
            "h_ut": record.h_ut,
            "env_code": environment_code(env),
            "pl": pl,
        }

    @staticmethod
    def _to_set(rows: List[Dict[str, Any]]) -> SampleSet:
        locations = [r["location"] for r in rows]
        simulated = all(loc == SIMULATED_LOCATION for loc in locations)
        d_2d = np.array([r["d_2d"] for r in rows])
        h_bs = np.array([r["h_bs"] for r in rows])
        h_ut = np.array([r["h_ut"] for r in rows])
        return SampleSet(
            f_c=[r["f_c"] for r in rows],
            d_2d=d_2d,
            d_3d=derive_3d_distance(d_2d, h_bs, h_ut),
            h_bs=h_bs,
            h_ut=h_ut,
            env_code=[r["env_code"] for r in rows],
            pl=[r["pl"] for r in rows],
            source=DataSource.SIMULATED if simulated else DataSource.MEASURED,
            location=None if simulated else locations,
        )

    def _frames(self, handle) -> Iterator[pd.DataFrame]:
        """Raw string cells, header row included, chunk_size rows at a time"""
        header_error = SchemaError(f"header must be {','.join(CSV_HEADER)}", 1)
        try:
            frames = pd.read_csv(handle, header=None, dtype=str, keep_default_na=False,
                                 skipinitialspace=True, chunksize=self.chunk_size)
            with frames:
                yield from frames
        except pd.errors.EmptyDataError:
            raise header_error from None
        except pd.errors.ParserError as e:
            found = re.search(r"line (\d+)", str(e))
            raise SchemaError(f"expected {len(CSV_HEADER)} fields per row",
                              int(found.group(1)) if found else None) from None

    def __iter__(self) -> Iterator[SampleSet]:
        self.warnings = []
        self.out_of_range = []
        self.rows_read = 0
        pending: List[Dict[str, Any]] = []
        with _open_source(self.source) as handle:
            for frame in self._frames(handle):
                # trailing fields missing from a short row come back as NaN
                short = frame.isna().any(axis=1).to_numpy()
                for index, is_short, row in zip(frame.index, short,
                                                 frame.itertuples(index=False, name=None)):
                    line = int(index) + 1
                    if line == 1:
                        if tuple(str(cell).strip() for cell in row) != CSV_HEADER:
                            raise SchemaError(f"header must be {','.join(CSV_HEADER)}", 1)
                        continue
                    if is_short:
                        found = sum(1 for cell in row if isinstance(cell, str))
                        raise SchemaError(f"expected {len(CSV_HEADER)} fields, found {found}",
                                          line)
                    if all(not cell.strip() for cell in row):
                        continue
                    self.rows_read += 1
                    accepted = self._accept(self._parse(list(row), line), line)
                    if accepted is not None:
                        pending.append(accepted)
                    if len(pending) >= self.chunk_size:
                        yield self._to_set(pending)
                        pending = []
        if pending:
            yield self._to_set(pending)


def load_measurements(source, link_budget: Optional[LinkBudget] = None,
                      include_diffraction: bool = False) -> LoadResult:
    """Parse a path loss CSV into samples, dropping censored and diffraction rows"""
    reader = MeasurementReader(source, link_budget, include_diffraction)
    samples = SampleSet.concat(list(reader))
    if not len(samples):
        samples = SampleSet.empty(DataSource.MEASURED)
    logger.info(f"✅ Loaded {len(samples)} samples from {reader.rows_read} rows "
                f"({len(reader.warnings)} warnings)")
    return LoadResult(samples=samples, warnings=list(reader.warnings),
                      out_of_range=list(reader.out_of_range), rows_read=reader.rows_read)


def _db(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.4f}"


def _m(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.3f}"


def _round(value: Optional[float], places: int) -> Optional[float]:
    return None if value is None else round(float(value), places)


@contextmanager
def atomic_write(sink) -> Iterator[TextIO]:
    """Write to a temp file next to sink and rename it into place on success"""
    if sink is None or str(sink) == STDIO:
        yield sys.stdout
        return
    if not isinstance(sink, (str, Path)):
        yield sink
        return
    path = Path(sink)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as handle:
            yield handle
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.info(f"✅ Wrote {path}")


def _write_csv(rows: Iterable[Iterable[Any]], header: Iterable[str], sink) -> None:
    with atomic_write(sink) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(payload: Any, sink) -> None:
    with atomic_write(sink) as handle:
        handle.write(json.dumps(payload, indent=2, ensure_ascii=False))
        handle.write("\n")


def _sample_rows(samples: SampleSet) -> Iterator[List[str]]:
    envs = {environment_code(env): env.value for env in Environment}
    for i in range(len(samples)):
        if samples.location is not None:
            location = samples.location[i]
        else:
            location = SIMULATED_LOCATION if samples.source is DataSource.SIMULATED else ""
        yield [location, f"{samples.f_c[i]:.4f}", _m(samples.d_2d[i]), _m(samples.h_bs[i]),
               _m(samples.h_ut[i]), envs[int(samples.env_code[i])], _db(samples.pl[i]), "",
               "false"]


def export_samples(samples, sink, fmt: str = "csv") -> None:
    """Samples in the measurement CSV schema, or as a JSON list.

    samples is a SampleSet or an iterable of them; CSV output streams chunk by chunk.
    """
    chunks = [samples] if isinstance(samples, SampleSet) else samples
    if fmt == "csv":
        _write_csv(itertools.chain.from_iterable(_sample_rows(c) for c in chunks), CSV_HEADER,
                   sink)
        return
    records = [
        {
            "location": row[0],
            "f_c_ghz": float(row[1]),
            "d_2d_m": float(row[2]),
            "h_bs_m": float(row[3]),
            "h_ut_m": float(row[4]),
            "env": row[5],
            "pl_db": float(row[6]),
        }
        for chunk in chunks
        for row in _sample_rows(chunk)
    ]
    _write_json({"samples": records}, sink)


def load_samples_json(source) -> SampleSet:
    with _open_source(source) as handle:
        payload = json.load(handle)
    rows = payload.get("samples", [])
    if not rows:
        return SampleSet.empty()
    frame = pd.DataFrame(rows).reindex(columns=list(CSV_HEADER))
    frame["p_rx_dbm"] = ""
    frame["censored"] = "false"
    text = io.StringIO(frame.to_csv(index=False, lineterminator="\n"))
    return load_measurements(text).samples


def fit_payload(fit) -> Dict[str, Any]:
    payload = fit.model_dump(mode="json", by_alias=True, exclude_none=True)
    for key in ("n", "b_tx", "sigma"):
        if key in payload:
            payload[key] = _round(payload[key], 4)
    if "h_B0" in payload:
        payload["h_B0"] = _round(payload["h_B0"], 3)
    return payload


def export_fit(fit, sink, fmt: str = "json") -> None:
    payload = fit_payload(fit)
    if fmt == "json":
        _write_json(payload, sink)
        return
    header = ["model_kind", "n", "b_tx", "h_B0", "sigma", "sample_count"]
    row = [payload["model_kind"], _db(fit.n), _db(fit.b_tx), _m(fit.h_b0), _db(fit.sigma),
           str(fit.sample_count)]
    _write_csv([row], header, sink)


def load_fit(source) -> FitResult:
    with _open_source(source) as handle:
        return FitResult.model_validate(json.load(handle))


TABLE_HEADER = ("name", "model", "data", "env", "ple", "n", "b_tx", "sigma_db", "rmse_db",
                "sample_count")


def export_table(rows, sink, fmt: str = "csv") -> None:
    """Parameter-table style comparison rows"""
    if fmt == "json":
        _write_json({"rows": [row.as_dict() for row in rows]}, sink)
        return
    _write_csv(
        ([r.name, r.model.value, r.data.value, r.env.value, _db(r.ple), _db(r.n), _db(r.b_tx),
          _db(r.sigma), _db(r.rmse), str(r.sample_count)] for r in rows),
        TABLE_HEADER,
        sink,
    )


def export_feasibility(grid, sink, fmt: str = "csv", boundary_only: bool = True) -> None:
    """Breakpoint feasibility: the analytic boundary, or one row per raster cell"""
    if fmt == "json":
        _write_json(grid.model_dump(mode="json"), sink)
        return
    if boundary_only:
        _write_csv(([_m(h), _db(f)] for h, f in zip(grid.heights_m, grid.boundary_ghz)),
                   ("h_bs_m", "boundary_ghz"), sink)
        return
    _write_csv(
        ([_db(f), _m(h), "true" if grid.cells[i][j] else "false"]
         for i, h in enumerate(grid.heights_m) for j, f in enumerate(grid.frequencies_ghz)),
        ("f_c_ghz", "h_bs_m", "single_slope"),
        sink,
    )


def export_height_gain(gains, sink, fmt: str = "csv") -> None:
    """Height-gain curves, one row per (distance, h_BS) point; average rows have distance 'average'"""
    if fmt == "json":
        _write_json(gains.model_dump(mode="json"), sink)
        return
    rows = []
    for curve in list(gains.curves) + [gains.average]:
        distance = "average" if curve.distance_m is None else _m(curve.distance_m)
        rows.extend([curve.model.value, distance, _m(p.h_bs), _db(p.reduction_db)]
                    for p in curve.points)
    _write_csv(rows, ("model", "distance_m", "h_bs_m", "reduction_db"), sink)


def export_summary(summary, sink, fmt: str = "json") -> None:
    payload = summary.model_dump(mode="json")
    if fmt == "json":
        _write_json(payload, sink)
        return
    _write_csv(([key, _db(value)] for key, value in payload.items()), ("quantity", "value_db"), sink)
