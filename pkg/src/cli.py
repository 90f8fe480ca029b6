from typing import Any, Callable, Dict, Iterator, List, Optional, Set
from pathlib import Path
import argparse
import csv
import itertools
import json
import logging
import os
import sys

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field

from src import analysis, dataset_io, fitting, models
from src.models import ApplicabilityError, Environment
from src.settings import Settings, load_settings
from src.simulation import (
    DistanceSampling,
    SampleSet,
    ScenarioStream,
    check_scenario,
    load_scenario_config,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2

FORCE_WARNING = "warning: --force set, evaluating outside the 3GPP RMa applicability ranges"
_BOOLEAN_FLAGS = {"force", "defaults", "table", "summary", "extended", "include-diffraction"}


class CommandSpec(BaseModel):
    """A fully specified invocation: flags merged with the optional config file"""

    model_config = ConfigDict(frozen=True)

    subcommand: str
    options: Dict[str, Any] = Field(default_factory=dict)
    input: Optional[str] = None
    output: Optional[str] = None
    format: Optional[str] = None
    force: bool = False

    def get(self, name: str, default: Any = None) -> Any:
        value = self.options.get(name)
        return default if value is None else value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _floats(raw: str) -> List[float]:
    try:
        return [float(item) for item in str(raw).split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {raw!r}")


def _seed(raw: str) -> int:
    value = int(raw)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _add_io(p: argparse.ArgumentParser, default_format: Optional[str] = None) -> None:
    p.add_argument("--in", dest="input", help="input path ('-' for stdin)")
    p.add_argument("--out", dest="output", help="output path ('-' or omitted for stdout)")
    p.add_argument("--format", choices=["csv", "json"], default=default_format)
    p.add_argument("--config", help="key-value file whose keys are flag names")
    p.add_argument("--settings", help="settings.json with experiment presets")
    p.add_argument("--force", action="store_true", help="evaluate outside the RMa applicability ranges")


def _add_geometry(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hbs", type=float, help="base station height, m")
    p.add_argument("--hut", type=float, help="user terminal height, m")
    p.add_argument("--h", type=float, help="average building height, m")
    p.add_argument("--w", type=float, help="street width, m")


def build_parser() -> _Parser:
    parser = _Parser(prog="rma", description="Rural macrocell path loss models, "
                     "Monte Carlo fits and figure data")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    compute = sub.add_parser("compute", help="evaluate a path loss model")
    compute.add_argument("--model", choices=["fspl", "ci", "cih", "rma-los", "rma-nlos",
                                             "sakagami"])
    compute.add_argument("--preset", choices=sorted(models.PUBLISHED_MODELS),
                         help="published CI/CIH parameters")
    compute.add_argument("--f", type=_floats, help="carrier frequency, GHz")
    compute.add_argument("--d2d", type=_floats, help="2D distance, m")
    compute.add_argument("--d3d", type=_floats, help="3D distance, m; used directly by "
                         "fspl, ci and cih")
    _add_geometry(compute)
    compute.add_argument("--n", type=float, help="path loss exponent (ci, cih)")
    compute.add_argument("--btx", type=float, help="height weighting factor (cih)")
    compute.add_argument("--hb0", type=float, default=35.0, help="reference height, m")
    compute.add_argument("--theta", type=float, default=0.0, help="street angle, deg")
    compute.add_argument("--extended", action="store_true",
                         help="Sakagami with 20 log f and the Hata correction")
    compute.add_argument("--defaults", action="store_true", help="RMa default geometry for "
                         "every unset geometry parameter")
    _add_io(compute)

    simulate = sub.add_parser("simulate", help="generate Monte Carlo samples")
    simulate.add_argument("--case", choices=["one", "two"])
    simulate.add_argument("--scenario", help="key-value ScenarioConfig file")
    simulate.add_argument("--env", choices=[e.value for e in Environment])
    simulate.add_argument("--seed", type=_seed)
    simulate.add_argument("--samples", type=int, help="samples per (f, h_BS) cell")
    simulate.add_argument("--sampling", choices=[s.value for s in DistanceSampling])
    simulate.add_argument("--workers", type=int)
    _add_io(simulate, "csv")

    fit = sub.add_parser("fit", help="fit CI or CIH parameters to samples")
    fit.add_argument("--model", choices=["ci", "cih"])
    fit.add_argument("--env", choices=[e.value for e in Environment])
    fit.add_argument("--hb0", type=float, default=35.0, help="CIH reference height, m")
    fit.add_argument("--include-diffraction", action="store_true")
    _add_io(fit, "json")

    analyze = sub.add_parser("analyze", help="figure and table data")
    analyze.add_argument("--figure", choices=["1", "2", "4"])
    analyze.add_argument("--table", action="store_true", help="CI/CIH parameter table")
    analyze.add_argument("--summary", action="store_true", help="average height gains")
    analyze.add_argument("--dmax", type=float, help="breakpoint threshold distance, m")
    analyze.add_argument("--hut", type=float, help="user terminal height, m")
    analyze.add_argument("--preset", choices=sorted(m for m in models.PUBLISHED_MODELS
                                                    if m.startswith("cih")))
    analyze.add_argument("--n", type=float)
    analyze.add_argument("--btx", type=float)
    analyze.add_argument("--hb0", type=float, default=35.0)
    analyze.add_argument("--seed", type=_seed)
    analyze.add_argument("--samples", type=int, help="samples per cell for --table")
    analyze.add_argument("--workers", type=int)
    _add_io(analyze)

    export = sub.add_parser("export", help="convert samples or fits between CSV and JSON")
    _add_io(export)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser: _Parser, argv: List[str],
                  args: argparse.Namespace) -> argparse.Namespace:
    """Re-parse with config-file values as defaults so explicit flags win"""
    if not Path(args.config).is_file():
        raise FileNotFoundError(f"Config file {args.config} not found")
    values = {k: v for k, v in dotenv_values(args.config).items() if v is not None}
    if not values:
        return args
    sub = _subparser(parser, args.command)
    dests = {opt.lstrip("-"): action.dest
             for action in sub._actions for opt in action.option_strings}
    defaults = {}
    for key, raw in values.items():
        key = key.lower().replace("_", "-")
        if key not in dests or key == "config":
            raise ValueError(f"Unknown key '{key}' in config file {args.config}")
        defaults[dests[key]] = (raw.strip().lower() in ("1", "true", "yes", "on")
                                if key in _BOOLEAN_FLAGS else raw)
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def parse_command(argv: List[str]) -> CommandSpec:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        args = _apply_config(parser, argv, args)
    options = {k: v for k, v in vars(args).items()
               if k not in ("command", "input", "output", "format", "force")}
    return CommandSpec(subcommand=args.command, options=options, input=args.input,
                       output=args.output, format=args.format, force=args.force)


def _workers(spec: CommandSpec) -> int:
    return int(spec.get("workers") or os.getenv("RMA_WORKERS", "1"))


def _settings(spec: CommandSpec) -> Settings:
    return load_settings(spec.get("settings"))


def _compute_params(spec: CommandSpec, kind: str):
    preset = spec.get("preset")
    if preset:
        params = models.published_model(preset).params
        if kind == "ci" and not isinstance(params, models.CiParams):
            raise ValueError(f"preset {preset} is not a CI model")
        if kind == "cih" and not isinstance(params, models.CihParams):
            raise ValueError(f"preset {preset} is not a CIH model")
        return params
    if spec.get("n") is None:
        raise ValueError(f"--model {kind} needs --n or --preset")
    if kind == "ci":
        return models.CiParams(n=spec.get("n"))
    if spec.get("btx") is None:
        raise ValueError("--model cih needs --btx")
    return models.CihParams(n=spec.get("n"), b_tx=spec.get("btx"), h_b0=spec.get("hb0"))


_CLOSE_IN_MODELS = ("fspl", "ci", "cih")


def _compute_record(spec: CommandSpec, kind: str, params, f_c: float,
                    d_2d: Optional[float] = None,
                    d_3d: Optional[float] = None) -> Dict[str, Any]:
    given = {"h_bs": spec.get("hbs"), "h_ut": spec.get("hut"), "h": spec.get("h"),
             "w": spec.get("w")}
    direct = d_3d is not None and kind in _CLOSE_IN_MODELS
    if direct:
        # d_3D alone places the terminal; only CIH reads a height
        given = {"h_bs": given["h_bs"]} if kind == "cih" else {}
    missing = [name for name, value in given.items() if value is None]
    if missing and not spec.get("defaults"):
        raise ValueError(f"no value for {', '.join(missing)}; set them or pass --defaults")
    geometry = None
    if direct:
        record: Dict[str, Any] = {"model": kind, "f_c_ghz": f_c, "d_3d_m": d_3d}
        h_bs = models.RMA_DEFAULTS["h_bs"] if given.get("h_bs") is None else given["h_bs"]
    else:
        geometry = models.applicability_defaults(d_2d, d_3d, **given)
        record = {"model": kind, "f_c_ghz": f_c,
                  "d_2d_m": d_2d if d_2d is not None else round(geometry.d_2d, 3),
                  "d_3d_m": round(geometry.d_3d, 3)}
        d_3d, h_bs = geometry.d_3d, geometry.h_bs
    if kind == "rma-los":
        r = models.rma_los_path_loss(geometry, f_c, force=spec.force)
        record.update(pl_db=r.mean, sigma_db=r.sigma, segment=r.segment.value,
                      d_bp_m=round(r.breakpoint_m, 3))
    elif kind == "rma-nlos":
        r = models.rma_nlos_path_loss(geometry, f_c, force=spec.force)
        record.update(pl_db=r.mean, sigma_db=r.sigma, nlos_db=r.nlos_component,
                      los_db=r.los_mean)
    elif kind == "fspl":
        record["pl_db"] = models.fspl(f_c, d_3d)
    elif kind == "ci":
        record["pl_db"] = models.ci_path_loss(params, f_c, d_3d)
    elif kind == "cih":
        record["pl_db"] = models.cih_path_loss(params, f_c, d_3d, h_bs)
        record["ple_eff"] = models.effective_ple(params, h_bs)
    else:
        sakagami = models.SakagamiParams(
            w=geometry.w, theta=spec.get("theta"), h_s=geometry.h, h_avg=geometry.h,
            h_building=geometry.h, h_b0=geometry.h_bs, h_b=geometry.h_bs - geometry.h_ut,
            f_mhz=f_c * 1000, d_km=geometry.d_3d / 1000, h_m=geometry.h_ut,
        )
        record["pl_db"] = models.sakagami_path_loss(sakagami, extended=bool(spec.get("extended")))
    return {k: round(v, 4) if isinstance(v, float) and k.endswith(("_db", "eff")) else v
            for k, v in record.items()}


def _compute_line(record: Dict[str, Any]) -> str:
    extras = " ".join(f"{k}={v}" for k, v in record.items()
                      if k not in ("model", "f_c_ghz", "d_2d_m", "d_3d_m", "pl_db"))
    ground = f"d_2d={record['d_2d_m']:g} m " if "d_2d_m" in record else ""
    line = (f"{record['model']} f_c={record['f_c_ghz']:g} GHz {ground}"
            f"d_3d={record['d_3d_m']:.3f} m PL={record['pl_db']:.4f} dB")
    return f"{line} {extras}" if extras else line


def cmd_compute(spec: CommandSpec) -> int:
    kind = spec.get("model")
    preset = spec.get("preset")
    if preset:
        preset_kind = "cih" if preset.startswith("cih") else "ci"
        if kind and kind != preset_kind:
            raise ValueError(f"--preset {preset} is a {preset_kind} model, not {kind}")
        kind = preset_kind
    if not kind:
        raise ValueError("compute needs --model or --preset")
    if not spec.get("f") or bool(spec.get("d2d")) == bool(spec.get("d3d")):
        raise ValueError("compute needs --f and exactly one of --d2d or --d3d")
    params = _compute_params(spec, kind) if kind in ("ci", "cih") else None
    if spec.get("d3d"):
        records = [_compute_record(spec, kind, params, f_c, d_3d=d_3d)
                   for f_c, d_3d in itertools.product(spec.get("f"), spec.get("d3d"))]
    else:
        records = [_compute_record(spec, kind, params, f_c, d_2d=d_2d)
                   for f_c, d_2d in itertools.product(spec.get("f"), spec.get("d2d"))]
    if spec.format == "json":
        with dataset_io.atomic_write(spec.output) as handle:
            handle.write(json.dumps({"results": records}, indent=2) + "\n")
    elif spec.format == "csv":
        columns = list(dict.fromkeys(k for r in records for k in r))
        with dataset_io.atomic_write(spec.output) as handle:
            writer = csv.DictWriter(handle, columns, lineterminator="\n")
            writer.writeheader()
            writer.writerows(records)
    else:
        with dataset_io.atomic_write(spec.output) as handle:
            for record in records:
                handle.write(_compute_line(record) + "\n")
    return EXIT_OK


def _scenario_from_spec(spec: CommandSpec):
    overrides = {"force": spec.force}
    if spec.get("seed") is not None:
        overrides["seed"] = spec.get("seed")
    if spec.get("samples") is not None:
        overrides["samples_per_cell"] = spec.get("samples")
    if spec.get("sampling"):
        overrides["distance_sampling"] = spec.get("sampling")
    if spec.get("scenario"):
        cfg = load_scenario_config(spec.get("scenario"))
        if spec.get("env"):
            overrides["environment"] = spec.get("env")
        return cfg.model_validate({**cfg.model_dump(), **overrides})
    if not spec.get("case") or not spec.get("env"):
        raise ValueError("simulate needs --case and --env, or --scenario")
    settings = _settings(spec)
    return settings.scenario(spec.get("case"), spec.get("env"),
                             seed=overrides.get("seed"),
                             samples_per_cell=overrides.get("samples_per_cell"),
                             distance_sampling=overrides.get("distance_sampling"),
                             force=spec.force)


def cmd_simulate(spec: CommandSpec) -> int:
    cfg = _scenario_from_spec(spec)
    check_scenario(cfg)
    stream = ScenarioStream(cfg, _workers(spec))
    logger.info(f"Simulating {cfg.total_samples} {cfg.environment.value.upper()} samples "
                f"over {len(cfg.cells())} cells (seed {cfg.seed})")
    dataset_io.export_samples(stream, spec.output, spec.format or "csv")
    return EXIT_OK


class _EnvironmentFilter:
    """Re-iterable chunk source restricted to one environment, noting what it saw"""

    def __init__(self, chunks, environment: Optional[Environment]):
        self.chunks = chunks
        self.environment = environment
        self.seen: Set[Environment] = set()

    def __iter__(self) -> Iterator[SampleSet]:
        for chunk in self.chunks:
            self.seen.update(chunk.environments())
            yield chunk if self.environment is None else chunk.filter(self.environment)


def _sample_source(spec: CommandSpec):
    if not spec.input:
        raise ValueError("--in is required")
    path = spec.input
    include = bool(spec.get("include_diffraction"))
    if path != dataset_io.STDIO and Path(path).suffix.lower() == ".json":
        return [dataset_io.load_samples_json(path)]
    if path == dataset_io.STDIO:
        return [dataset_io.load_measurements(path, include_diffraction=include).samples]
    return dataset_io.MeasurementReader(path, _settings(spec).link_budget, include)


def cmd_fit(spec: CommandSpec) -> int:
    if not spec.get("model"):
        raise ValueError("fit needs --model ci or --model cih")
    env = Environment(spec.get("env")) if spec.get("env") else None
    source = _EnvironmentFilter(_sample_source(spec), env)
    # one pass over the input; the RMSE comes from the accumulated sums
    if spec.get("model") == "ci":
        result = fitting.fit_ci(iter(source))
    else:
        result = fitting.fit_cih(iter(source), h_b0=spec.get("hb0"))
    if env is None and len(source.seen) > 1:
        logger.warning("⚠️ Fitted LOS and NLOS samples together; pass --env to separate them")
    dataset_io.export_fit(result, spec.output, spec.format or "json")
    return EXIT_OK


def _figure_1(spec: CommandSpec, settings: Settings) -> None:
    feas = settings.feasibility
    grid = analysis.breakpoint_feasibility(feas.frequencies(), feas.heights(),
                                           h_ut=spec.get("hut", feas.h_ut),
                                           d_max=spec.get("dmax", feas.d_max))
    fmt = spec.format or "csv"
    dataset_io.export_feasibility(grid, spec.output, fmt, boundary_only=True)
    if spec.output and spec.output != dataset_io.STDIO:
        out = Path(spec.output)
        grid_path = out.with_name(f"{out.stem}_grid{out.suffix}")
        dataset_io.export_feasibility(grid, grid_path, fmt, boundary_only=False)


def _cih_params(spec: CommandSpec) -> models.CihParams:
    if spec.get("n") is not None and spec.get("btx") is not None:
        return models.CihParams(n=spec.get("n"), b_tx=spec.get("btx"), h_b0=spec.get("hb0"))
    return models.published_model(spec.get("preset", "cih-rma-nlos")).params


def cmd_analyze(spec: CommandSpec) -> int:
    chosen = [bool(spec.get("figure")), bool(spec.get("table")), bool(spec.get("summary"))]
    if sum(chosen) != 1:
        raise ValueError("analyze needs exactly one of --figure, --table, --summary")
    settings = _settings(spec)
    figure = spec.get("figure")
    if figure == "1":
        _figure_1(spec, settings)
    elif figure in ("2", "4"):
        hg = settings.height_gain
        model = (analysis.HeightGainModel.THREEGPP_NLOS if figure == "2"
                 else analysis.HeightGainModel.CIH)
        gains = analysis.height_gain_curves(
            model, params=_cih_params(spec) if figure == "4" else None,
            distances=hg.distances, heights=hg.heights(), h_ut=spec.get("hut", hg.h_ut),
            f_c=hg.f_c_ghz, force=spec.force,
        )
        dataset_io.export_height_gain(gains, spec.output, spec.format or "csv")
    elif spec.get("table"):
        measured = None
        if spec.input:
            measured = dataset_io.load_measurements(spec.input, settings.link_budget).samples
        rows = analysis.reproduce_parameter_table(settings, seed=spec.get("seed"),
                                                  samples_per_cell=spec.get("samples"),
                                                  measured=measured, workers=_workers(spec))
        dataset_io.export_table(rows, spec.output, spec.format or "csv")
    else:
        dataset_io.export_summary(analysis.average_height_gain(), spec.output,
                                  spec.format or "json")
    return EXIT_OK


def cmd_export(spec: CommandSpec) -> int:
    if not spec.input or not spec.format:
        raise ValueError("export needs --in and --format")
    if Path(spec.input).suffix.lower() == ".json":
        with open(spec.input, encoding="utf-8") as handle:
            payload = json.load(handle)
        if "model_kind" in payload:
            dataset_io.export_fit(fitting.FitResult.model_validate(payload), spec.output,
                                  spec.format)
            return EXIT_OK
        samples = dataset_io.load_samples_json(spec.input)
    else:
        samples = dataset_io.load_measurements(spec.input, _settings(spec).link_budget).samples
    dataset_io.export_samples(samples, spec.output, spec.format)
    return EXIT_OK


COMMANDS: Dict[str, Callable[[CommandSpec], int]] = {
    "compute": cmd_compute,
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "analyze": cmd_analyze,
    "export": cmd_export,
}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse argv, dispatch the subcommand and map failures to exit codes"""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        spec = parse_command(argv)
        logger.debug(f"Command: {spec.model_dump()}")
        if spec.force:
            sys.stderr.write(FORCE_WARNING + "\n")
        return COMMANDS[spec.subcommand](spec)
    except SystemExit as e:
        if e.code is None:
            return EXIT_OK
        return e.code if isinstance(e.code, int) else EXIT_VALIDATION
    except ApplicabilityError as e:
        sys.stderr.write(f"error: {e}\n")
        for violation in e.violations:
            sys.stderr.write(f"  {violation}\n")
        sys.stderr.write("  pass --force to evaluate anyway\n")
        return EXIT_VALIDATION
    except ValueError as e:
        logger.debug("Validation failure", exc_info=True)
        sys.stderr.write(f"error: {e}\n")
        return EXIT_VALIDATION
    except OSError as e:
        logger.debug("I/O failure", exc_info=True)
        sys.stderr.write(f"error: {e}\n")
        return EXIT_IO
