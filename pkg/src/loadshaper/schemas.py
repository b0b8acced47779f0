"""Request/response models shared by the HTTP service and the CLI.

The CLI calls the same handlers in-process, so these models double as the
on-disk JSON format: a solve response parses back into the exact solution it
was built from (floats are serialized at full precision).
"""

from __future__ import annotations

from typing import Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .kkt import KktReport
from .model import (
    BatterySpec,
    Duals,
    Instance,
    LoadProfile,
    Solution,
    SolveStatus,
    Tariff,
    TargetMode,
)
from .presets import preset_battery, preset_tariff
from .solver import SolverSettings


class TariffModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    boundaries: List[int]  # M+1 slot indices, 0 .. N
    prices: List[float]    # pence/kWh, one per period


class BatteryModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    capacity_kwh: float
    charge_peak_kw: float
    discharge_peak_kw: float


class InstanceModel(BaseModel):
    """One optimization problem; tariff and battery accept preset names."""

    model_config = ConfigDict(extra="forbid")

    demand_kw: List[float]
    slot_hours: float = 1.0
    tariff: Union[str, TariffModel]
    battery: Union[str, BatteryModel]
    alpha: float = 0.5
    selling: bool = False
    target_mode: Literal["piecewise", "constant"] = "piecewise"
    initial_soc_kwh: float = 0.0

    def to_instance(self) -> Instance:
        if isinstance(self.tariff, str):
            tariff = preset_tariff(self.tariff, self.slot_hours, len(self.demand_kw))
        else:
            tariff = Tariff(boundaries=self.tariff.boundaries, prices=self.tariff.prices)
        if isinstance(self.battery, str):
            battery = preset_battery(self.battery)
        else:
            battery = BatterySpec(
                capacity_kwh=self.battery.capacity_kwh,
                charge_peak_kw=self.battery.charge_peak_kw,
                discharge_peak_kw=self.battery.discharge_peak_kw,
            )
        return Instance(
            load=LoadProfile(demand_kw=self.demand_kw, slot_hours=self.slot_hours),
            tariff=tariff,
            battery=battery,
            alpha=self.alpha,
            selling=self.selling,
            target_mode=TargetMode(self.target_mode),
            initial_soc_kwh=self.initial_soc_kwh,
        )

    @classmethod
    def from_instance(cls, instance: Instance) -> "InstanceModel":
        """Echo with presets resolved inline, so the result is self-contained."""
        return cls(
            demand_kw=[float(v) for v in instance.load.demand_kw],
            slot_hours=float(instance.load.slot_hours),
            tariff=TariffModel(
                boundaries=[int(b) for b in instance.tariff.boundaries],
                prices=[float(p) for p in instance.tariff.prices],
            ),
            battery=BatteryModel(
                capacity_kwh=float(instance.battery.capacity_kwh),
                charge_peak_kw=float(instance.battery.charge_peak_kw),
                discharge_peak_kw=float(instance.battery.discharge_peak_kw),
            ),
            alpha=float(instance.alpha),
            selling=instance.selling,
            target_mode=instance.target_mode.value,
            initial_soc_kwh=float(instance.initial_soc_kwh),
        )


class SettingsModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 100000
    polish: bool = True

    def to_settings(self) -> SolverSettings:
        return SolverSettings(
            eps_abs=self.eps_abs,
            eps_rel=self.eps_rel,
            max_iter=self.max_iter,
            polish=self.polish,
        )


class DualsModel(BaseModel):
    no_deficit: List[float]
    no_overflow: List[float]
    charge_peak: List[float]
    discharge_peak: List[float]
    total_energy: float
    output_nonneg: Optional[List[float]] = None
    target_nonneg: Optional[List[float]] = None

    @classmethod
    def from_duals(cls, duals: Duals) -> "DualsModel":
        return cls(
            no_deficit=duals.no_deficit.tolist(),
            no_overflow=duals.no_overflow.tolist(),
            charge_peak=duals.charge_peak.tolist(),
            discharge_peak=duals.discharge_peak.tolist(),
            total_energy=float(duals.total_energy),
            output_nonneg=None if duals.output_nonneg is None else duals.output_nonneg.tolist(),
            target_nonneg=None if duals.target_nonneg is None else duals.target_nonneg.tolist(),
        )

    def to_duals(self) -> Duals:
        return Duals(
            no_deficit=np.asarray(self.no_deficit, dtype=float),
            no_overflow=np.asarray(self.no_overflow, dtype=float),
            charge_peak=np.asarray(self.charge_peak, dtype=float),
            discharge_peak=np.asarray(self.discharge_peak, dtype=float),
            total_energy=self.total_energy,
            output_nonneg=None if self.output_nonneg is None else np.asarray(self.output_nonneg, dtype=float),
            target_nonneg=None if self.target_nonneg is None else np.asarray(self.target_nonneg, dtype=float),
        )


class KktReportModel(BaseModel):
    stationarity_y: float
    stationarity_w: float
    complementarity: Dict[str, float]
    dual_sign: float
    primal_infeasibility: float
    verdict: bool
    tolerance: float
    missing_duals: bool = False

    @classmethod
    def from_report(cls, report: KktReport) -> "KktReportModel":
        return cls(**report.as_dict())


class SolutionModel(BaseModel):
    output_kw: List[float]
    targets_kw: List[float]
    soc_kwh: List[float]
    privacy: float
    cost: float
    objective: float
    status: Literal["optimal", "max_iterations", "infeasible"]
    duals: Optional[DualsModel] = None
    kkt: Optional[KktReportModel] = None
    iterations: int = 0
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")

    @classmethod
    def from_solution(cls, solution: Solution) -> "SolutionModel":
        kkt = None if solution.kkt is None else KktReportModel.from_report(solution.kkt)
        duals = None if solution.duals is None else DualsModel.from_duals(solution.duals)
        return cls(
            output_kw=solution.output_kw.tolist(),
            targets_kw=solution.targets_kw.tolist(),
            soc_kwh=solution.soc_kwh.tolist(),
            privacy=float(solution.privacy),
            cost=float(solution.cost),
            objective=float(solution.objective),
            status=solution.status.value,
            duals=duals,
            kkt=kkt,
            iterations=solution.iterations,
            primal_residual=float(solution.primal_residual),
            dual_residual=float(solution.dual_residual),
        )

    def to_solution(self) -> Solution:
        kkt = None
        if self.kkt is not None:
            kkt = KktReport(
                stationarity_y=self.kkt.stationarity_y,
                stationarity_w=self.kkt.stationarity_w,
                complementarity=dict(self.kkt.complementarity),
                dual_sign=self.kkt.dual_sign,
                primal_infeasibility=self.kkt.primal_infeasibility,
                verdict=self.kkt.verdict,
                tolerance=self.kkt.tolerance,
                missing_duals=self.kkt.missing_duals,
            )
        return Solution(
            output_kw=np.asarray(self.output_kw, dtype=float),
            targets_kw=np.asarray(self.targets_kw, dtype=float),
            soc_kwh=np.asarray(self.soc_kwh, dtype=float),
            privacy=self.privacy,
            cost=self.cost,
            objective=self.objective,
            status=SolveStatus(self.status),
            duals=None if self.duals is None else self.duals.to_duals(),
            kkt=kkt,
            iterations=self.iterations,
            primal_residual=self.primal_residual,
            dual_residual=self.dual_residual,
        )


class SolveRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    instance: InstanceModel
    settings: Optional[SettingsModel] = None


class SolveResponse(BaseModel):
    instance: InstanceModel  # presets resolved, suitable for standalone verify
    solution: SolutionModel


class AlphaSweepRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    instance: InstanceModel
    alphas: List[float]
    settings: Optional[SettingsModel] = None

    @model_validator(mode="after")
    def _nonempty(self) -> "AlphaSweepRequest":
        if not self.alphas:
            raise ValueError("alphas must be non-empty")
        return self


class FrontierPointModel(BaseModel):
    alpha: float
    privacy: float
    cost: float
    objective: float
    status: str
    note: Optional[str] = None


class AlphaSweepResponse(BaseModel):
    instance: InstanceModel
    points: List[FrontierPointModel]


class CapacitySweepRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    instance: InstanceModel
    capacities: List[float]
    alpha: float
    settings: Optional[SettingsModel] = None

    @model_validator(mode="after")
    def _nonempty(self) -> "CapacitySweepRequest":
        if not self.capacities:
            raise ValueError("capacities must be non-empty")
        return self


class CapacityPointModel(BaseModel):
    b_max: float
    peak_kw: float
    privacy: float
    cost: float
    objective: float
    status: str
    note: Optional[str] = None


class CapacitySweepResponse(BaseModel):
    instance: InstanceModel
    alpha: float
    points: List[CapacityPointModel]


class VerifyRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    instance: InstanceModel
    solution: SolutionModel
    tolerance: float = 1e-5


class HealthResponse(BaseModel):
    status: str
    version: str
