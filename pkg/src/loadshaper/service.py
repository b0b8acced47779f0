"""HTTP facade over the optimizer: solve, sweeps and verification as JSON.

The handle_* functions are plain request-model-in, response-model-out and
carry all the behaviour; the FastAPI app only adds routing and error-to-status
mapping. The CLI calls the handlers directly so no server is needed for
file-based runs.
"""

from __future__ import annotations

from dataclasses import asdict

from fastapi import FastAPI, HTTPException

from . import __version__
from .kkt import check
from .presets import BATTERY_PRESETS, TARIFF_PRESETS
from .pipeline import solve_instance
from .schemas import (
    AlphaSweepRequest,
    AlphaSweepResponse,
    CapacityPointModel,
    CapacitySweepRequest,
    CapacitySweepResponse,
    FrontierPointModel,
    HealthResponse,
    InstanceModel,
    KktReportModel,
    SolutionModel,
    SolveRequest,
    SolveResponse,
    VerifyRequest,
)
from .sweep import alpha_sweep, capacity_sweep


def handle_solve(request: SolveRequest) -> SolveResponse:
    instance = request.instance.to_instance()
    settings = None if request.settings is None else request.settings.to_settings()
    solution = solve_instance(instance, settings=settings)
    return SolveResponse(
        instance=InstanceModel.from_instance(instance),
        solution=SolutionModel.from_solution(solution),
    )


def handle_alpha_sweep(request: AlphaSweepRequest) -> AlphaSweepResponse:
    instance = request.instance.to_instance()
    settings = None if request.settings is None else request.settings.to_settings()
    points = alpha_sweep(instance, request.alphas, settings=settings)
    return AlphaSweepResponse(
        instance=InstanceModel.from_instance(instance),
        points=[FrontierPointModel(**asdict(point)) for point in points],
    )


def handle_capacity_sweep(request: CapacitySweepRequest) -> CapacitySweepResponse:
    instance = request.instance.to_instance()
    settings = None if request.settings is None else request.settings.to_settings()
    points = capacity_sweep(instance, request.capacities, request.alpha, settings=settings)
    return CapacitySweepResponse(
        instance=InstanceModel.from_instance(instance),
        alpha=request.alpha,
        points=[CapacityPointModel(**asdict(point)) for point in points],
    )


def handle_verify(request: VerifyRequest) -> KktReportModel:
    instance = request.instance.to_instance()
    solution = request.solution.to_solution()
    report = check(solution, instance, tolerance=request.tolerance)
    return KktReportModel.from_report(report)


def create_app() -> FastAPI:
    app = FastAPI(title="loadshaper", version=__version__)

    def bad_request(exc: Exception) -> HTTPException:
        return HTTPException(status_code=422, detail=str(exc))

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.get("/presets/batteries")
    def batteries() -> dict:
        return {
            name: {"capacity_kwh": cap, "charge_peak_kw": chg, "discharge_peak_kw": dis}
            for name, (cap, chg, dis) in sorted(BATTERY_PRESETS.items())
        }

    @app.get("/presets/tariffs")
    def tariffs() -> dict:
        return {
            name: {"boundary_hours": list(hours), "prices_p_per_kwh": list(prices)}
            for name, (hours, prices) in sorted(TARIFF_PRESETS.items())
        }

    @app.post("/solve", response_model=SolveResponse)
    def solve(request: SolveRequest) -> SolveResponse:
        try:
            return handle_solve(request)
        except ValueError as exc:
            raise bad_request(exc) from exc

    @app.post("/sweep/alpha", response_model=AlphaSweepResponse)
    def sweep_alpha(request: AlphaSweepRequest) -> AlphaSweepResponse:
        try:
            return handle_alpha_sweep(request)
        except ValueError as exc:
            raise bad_request(exc) from exc

    @app.post("/sweep/capacity", response_model=CapacitySweepResponse)
    def sweep_capacity(request: CapacitySweepRequest) -> CapacitySweepResponse:
        try:
            return handle_capacity_sweep(request)
        except ValueError as exc:
            raise bad_request(exc) from exc

    @app.post("/verify", response_model=KktReportModel)
    def verify(request: VerifyRequest) -> KktReportModel:
        try:
            return handle_verify(request)
        except ValueError as exc:
            raise bad_request(exc) from exc

    return app
