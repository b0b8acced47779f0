"""Command line entry point: ingest load CSVs, solve, sweep, verify, serve.

The CLI is a thin client over the service handlers: by default they run
in-process; with --server the same request models are POSTed to a running
instance and the identical response models are emitted. File I/O (load
ingestion, result emission) always stays on the client side.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence, Union

from .model import LoadProfile
from .presets import BATTERY_PRESETS, TARIFF_PRESETS, GridMisalignment, preset_battery, preset_tariff
from .schemas import (
    AlphaSweepRequest,
    AlphaSweepResponse,
    BatteryModel,
    CapacitySweepRequest,
    CapacitySweepResponse,
    InstanceModel,
    SolveRequest,
    SolveResponse,
    TariffModel,
    VerifyRequest,
)
from .service import create_app, handle_alpha_sweep, handle_capacity_sweep, handle_solve, handle_verify

__all__ = [
    "EmptyFile",
    "NonMonotoneTimestamps",
    "NegativeReading",
    "RunConfig",
    "ingest_load",
    "emit",
    "main",
    "preset_battery",
    "preset_tariff",
]

RAW_CADENCE_SECONDS = 6.0  # fixed sample spacing assumed for index,kw files

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NOT_OPTIMAL = 3
EXIT_IO = 4


class EmptyFile(ValueError):
    """The load CSV contains no data rows."""


class NonMonotoneTimestamps(ValueError):
    """Row keys do not strictly increase."""


class NegativeReading(ValueError):
    def __init__(self, row: int, value: float):
        super().__init__(f"negative reading {value} at data row {row}")
        self.row = row


@dataclass(frozen=True)
class RunConfig:
    """One CLI invocation's worth of knobs; exactly one of alpha/alphas is set."""

    load_path: str
    resample_minutes: int = 1
    tariff: str = "tide-uk"
    battery: str = "powervault-g200"
    alpha: Optional[float] = None
    alphas: Optional[tuple[float, ...]] = None
    selling: bool = False
    target_mode: str = "piecewise"
    output_path: str = "solution.csv"
    output_format: str = "csv"

    def __post_init__(self) -> None:
        if (self.alpha is None) == (self.alphas is None):
            raise ValueError("exactly one of alpha / alphas must be given")
        if self.output_format not in ("csv", "json"):
            raise ValueError(f"unknown output format {self.output_format!r}")
        if self.resample_minutes < 1:
            raise ValueError("resample_minutes must be a positive integer")


def _parse_key(text: str, mode: str, row: int) -> float:
    text = text.strip()
    try:
        if mode == "index":
            return float(int(text))
        try:
            return float(text)
        except ValueError:
            return datetime.fromisoformat(text).timestamp()
    except ValueError as exc:
        raise ValueError(f"data row {row}: cannot parse {mode} {text!r}") from exc


def ingest_load(path: Union[str, Path], resample_minutes: int = 1) -> LoadProfile:
    """Read an `index,kw` or `timestamp,kw` CSV and average it into buckets.

    Buckets span resample_minutes; each slot's demand is the mean power of
    the samples inside it, and a partial trailing bucket is averaged over
    the samples actually present (so the last slot's energy is extrapolated
    rather than conserved exactly). Index files are taken at the fixed
    6-second cadence; timestamp files (unix seconds or ISO-8601) bucket by
    elapsed time from the first stamp.
    """
    if resample_minutes < 1:
        raise ValueError("resample_minutes must be a positive integer")
    keys: list[float] = []
    readings: list[float] = []
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path}: no rows")
        columns = [c.strip().lower() for c in header]
        if columns == ["index", "kw"]:
            mode = "index"
        elif columns == ["timestamp", "kw"]:
            mode = "timestamp"
        else:
            raise ValueError(f"{path}: expected header 'index,kw' or 'timestamp,kw', got {header!r}")
        for row_num, row in enumerate(reader, start=1):
            if not any(cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise ValueError(f"data row {row_num}: expected 2 columns, got {len(row)}")
            key = _parse_key(row[0], mode, row_num)
            try:
                kw = float(row[1])
            except ValueError as exc:
                raise ValueError(f"data row {row_num}: cannot parse reading {row[1]!r}") from exc
            if kw < 0:
                raise NegativeReading(row_num, kw)
            if keys and key <= keys[-1]:
                raise NonMonotoneTimestamps(f"data row {row_num}: {row[0].strip()!r} does not increase")
            keys.append(key)
            readings.append(kw)
    if not readings:
        raise EmptyFile(f"{path}: no data rows")

    window = resample_minutes * 60.0
    spacing = RAW_CADENCE_SECONDS if mode == "index" else 1.0
    sums: list[float] = []
    counts: list[int] = []
    for key, kw in zip(keys, readings):
        bucket = int((key - keys[0]) * spacing // window)
        while len(sums) <= bucket:
            sums.append(0.0)
            counts.append(0)
        sums[bucket] += kw
        counts[bucket] += 1
    for bucket, count in enumerate(counts):
        if count == 0:
            raise ValueError(f"bucket {bucket + 1} is empty: input has a gap longer than the resample window")
    demand = [s / c for s, c in zip(sums, counts)]
    return LoadProfile(demand_kw=demand, slot_hours=resample_minutes / 60.0)


def _parse_float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.replace(" ", "").split(",") if part)
    except ValueError as exc:
        raise ValueError(f"cannot parse number list {text!r}") from exc


def _tariff_model(spec: str, load: LoadProfile) -> Union[str, TariffModel]:
    """Preset name, `flat:<price>`, or `boundaries=...;prices=...` / `hours=...;prices=...`."""
    if spec in TARIFF_PRESETS:
        return spec
    n = load.n_slots
    if spec.startswith("flat:"):
        return TariffModel(boundaries=[0, n], prices=[float(spec[5:])])
    if "=" in spec:
        fields = dict(part.split("=", 1) for part in spec.split(";") if part)
        prices = list(_parse_float_list(fields.get("prices", "")))
        if "boundaries" in fields:
            boundaries = [int(v) for v in _parse_float_list(fields["boundaries"])]
        elif "hours" in fields:
            boundaries = []
            for hour in _parse_float_list(fields["hours"]):
                slots = hour / load.slot_hours
                if abs(slots - round(slots)) > 1e-9:
                    raise GridMisalignment(f"boundary at {hour} h does not land on the {load.slot_hours} h slot grid")
                boundaries.append(int(round(slots)))
        else:
            raise ValueError(f"tariff spec {spec!r} needs boundaries= or hours=")
        return TariffModel(boundaries=boundaries, prices=prices)
    raise ValueError(f"unknown tariff {spec!r} (presets: {', '.join(sorted(TARIFF_PRESETS))})")


def _battery_model(spec: str) -> Union[str, BatteryModel]:
    """Preset name or an inline `capacity,charge_peak,discharge_peak` triple."""
    if spec in BATTERY_PRESETS:
        return spec
    values = _parse_float_list(spec)
    if len(values) != 3:
        raise ValueError(
            f"unknown battery {spec!r} (presets: {', '.join(sorted(BATTERY_PRESETS))}; "
            "or give capacity,charge_peak,discharge_peak)"
        )
    return BatteryModel(capacity_kwh=values[0], charge_peak_kw=values[1], discharge_peak_kw=values[2])


def _instance_model(config: RunConfig, load: LoadProfile, alpha: float) -> InstanceModel:
    return InstanceModel(
        demand_kw=[float(v) for v in load.demand_kw],
        slot_hours=float(load.slot_hours),
        tariff=_tariff_model(config.tariff, load),
        battery=_battery_model(config.battery),
        alpha=alpha,
        selling=config.selling,
        target_mode=config.target_mode,
    )


def _fmt(value: float) -> str:
    return format(value + 0.0, ".9g")  # +0.0 folds -0.0 into 0.0


def _solution_csv(response: SolveResponse) -> str:
    tariff = response.instance.tariff
    boundaries = tariff.boundaries
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["t", "x_kw", "y_kw", "w_kw", "soc_kwh", "period", "price"])
    period = 1
    solution = response.solution
    for t in range(len(response.instance.demand_kw)):
        while t >= boundaries[period]:
            period += 1
        writer.writerow([
            t + 1,
            _fmt(response.instance.demand_kw[t]),
            _fmt(solution.output_kw[t]),
            _fmt(solution.targets_kw[period - 1]),
            _fmt(solution.soc_kwh[t]),
            period,
            _fmt(tariff.prices[period - 1]),
        ])
    return out.getvalue()


def _points_csv(response: Union[AlphaSweepResponse, CapacitySweepResponse]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    if isinstance(response, AlphaSweepResponse):
        writer.writerow(["alpha", "privacy", "cost", "objective", "status"])
        for p in response.points:
            writer.writerow([_fmt(p.alpha), _fmt(p.privacy), _fmt(p.cost), _fmt(p.objective), p.status])
    else:
        writer.writerow(["b_max", "peak_kw", "privacy", "cost", "objective", "status"])
        for p in response.points:
            writer.writerow([_fmt(p.b_max), _fmt(p.peak_kw), _fmt(p.privacy), _fmt(p.cost), _fmt(p.objective), p.status])
    return out.getvalue()


def emit(
    results: Union[SolveResponse, AlphaSweepResponse, CapacitySweepResponse],
    format: str,
    path: Union[str, Path],
) -> Path:
    """Write results to path as csv or json; refuses to create a file for empty results."""
    if isinstance(results, (AlphaSweepResponse, CapacitySweepResponse)) and not results.points:
        raise ValueError("empty sweep: nothing to emit")
    if format == "json":
        text = results.model_dump_json(indent=2) + "\n"
    elif format == "csv":
        if isinstance(results, SolveResponse):
            text = _solution_csv(results)
        else:
            text = _points_csv(results)
    else:
        raise ValueError(f"unknown output format {format!r}")
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _post(server: str, route: str, payload) -> dict:
    import httpx

    url = server.rstrip("/") + route
    response = httpx.post(url, json=payload.model_dump(mode="json"), timeout=600.0)
    if response.status_code == 422:
        detail = response.json().get("detail", response.text)
        raise ValueError(f"server rejected request: {detail}")
    response.raise_for_status()
    return response.json()


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        load_path=args.load,
        resample_minutes=args.resample_minutes,
        tariff=args.tariff,
        battery=args.battery,
        alpha=getattr(args, "alpha", None),
        alphas=getattr(args, "alphas", None),
        selling=args.sell,
        target_mode=args.target,
        output_path=args.out,
        output_format=args.format,
    )


def _cmd_solve(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    load = ingest_load(config.load_path, config.resample_minutes)
    request = SolveRequest(instance=_instance_model(config, load, config.alpha))
    if args.server:
        response = SolveResponse.model_validate(_post(args.server, "/solve", request))
    else:
        response = handle_solve(request)
    emit(response, config.output_format, config.output_path)
    return EXIT_OK if response.solution.status == "optimal" else EXIT_NOT_OPTIMAL


def _cmd_sweep_alpha(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    load = ingest_load(config.load_path, config.resample_minutes)
    instance = _instance_model(config, load, config.alphas[0])
    request = AlphaSweepRequest(instance=instance, alphas=list(config.alphas))
    if args.server:
        response = AlphaSweepResponse.model_validate(_post(args.server, "/sweep/alpha", request))
    else:
        response = handle_alpha_sweep(request)
    emit(response, config.output_format, config.output_path)
    ok = all(p.status == "optimal" for p in response.points)
    return EXIT_OK if ok else EXIT_NOT_OPTIMAL


def _cmd_sweep_capacity(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    load = ingest_load(config.load_path, config.resample_minutes)
    instance = _instance_model(config, load, config.alpha)
    request = CapacitySweepRequest(instance=instance, capacities=list(args.capacities), alpha=config.alpha)
    if args.server:
        response = CapacitySweepResponse.model_validate(_post(args.server, "/sweep/capacity", request))
    else:
        response = handle_capacity_sweep(request)
    emit(response, config.output_format, config.output_path)
    ok = all(p.status == "optimal" for p in response.points)
    return EXIT_OK if ok else EXIT_NOT_OPTIMAL


def _cmd_verify(args: argparse.Namespace) -> int:
    data = json.loads(Path(args.solution).read_text(encoding="utf-8"))
    parsed = SolveResponse.model_validate(data)
    request = VerifyRequest(instance=parsed.instance, solution=parsed.solution, tolerance=args.tolerance)
    if args.server:
        from .schemas import KktReportModel

        report = KktReportModel.model_validate(_post(args.server, "/verify", request))
    else:
        report = handle_verify(request)
    print(report.model_dump_json(indent=2))
    return EXIT_OK if report.verdict else EXIT_NOT_OPTIMAL


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loadshaper", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--load", required=True, help="CSV with header 'index,kw' or 'timestamp,kw'")
    common.add_argument("--resample-minutes", type=int, default=1, metavar="MIN")
    common.add_argument("--tariff", default="tide-uk",
                        help="preset name, flat:<price>, or boundaries=...;prices=...")
    common.add_argument("--battery", default="powervault-g200",
                        help="preset name or capacity,charge_peak,discharge_peak")
    common.add_argument("--sell", action="store_true", help="allow selling energy back to the grid")
    common.add_argument("--target", choices=["piecewise", "constant"], default="piecewise")
    common.add_argument("--out", required=True, help="output file path")
    common.add_argument("--format", choices=["csv", "json"], default="csv")
    common.add_argument("--server", default=None, help="base URL of a running service; default runs in-process")

    p_solve = sub.add_parser("solve", parents=[common], help="solve one instance")
    p_solve.add_argument("--alpha", type=float, required=True)
    p_solve.set_defaults(func=_cmd_solve)

    p_sa = sub.add_parser("sweep-alpha", parents=[common], help="trace the privacy-cost frontier")
    p_sa.add_argument("--alphas", type=_parse_float_list, required=True, metavar="A1,A2,...")
    p_sa.set_defaults(func=_cmd_sweep_alpha)

    p_sc = sub.add_parser("sweep-capacity", parents=[common], help="sweep battery capacity")
    p_sc.add_argument("--capacities", type=_parse_float_list, required=True, metavar="C1,C2,...")
    p_sc.add_argument("--alpha", type=float, required=True)
    p_sc.set_defaults(func=_cmd_sweep_capacity)

    p_verify = sub.add_parser("verify", help="re-check a solve JSON's optimality conditions")
    p_verify.add_argument("--solution", required=True, help="JSON file produced by solve --format json")
    p_verify.add_argument("--tolerance", type=float, default=1e-5)
    p_verify.add_argument("--server", default=None)
    p_verify.set_defaults(func=_cmd_verify)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(func=_cmd_serve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # httpx network failures land here
        if type(exc).__module__.startswith("httpx"):
            print(f"io error: {exc}", file=sys.stderr)
            return EXIT_IO
        raise


if __name__ == "__main__":
    sys.exit(main())
