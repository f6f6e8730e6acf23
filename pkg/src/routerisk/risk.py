"""Impact metrics and risk report assembly.

TI measures the relative change of genuine load on one road between the
no-attack equilibrium and an attacked (or mitigated) run; NI averages TI over
a road scope. Reports compare one baseline against any number of attacked and
mitigated runs over the same network and serialise to JSON plus a flat CSV.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .equilibrium import Recommendation
from .network import DomainError

#: loads below this are treated as zero when dividing in TI
EPS_FLOW = 1e-9
#: total-cost slack before the paradox flag trips
PARADOX_TOL = 1e-9


def targeted_impact(x_base: np.ndarray, x_attacked: np.ndarray) -> list[float | None]:
    """Per-road |x' - x| / x; zero-to-zero roads get 0, zero-to-positive get None.

    A None marks a road whose relative change is undefined (no baseline flow);
    such entries are excluded from the network mean.
    """
    x_base = np.asarray(x_base, dtype=float)
    x_attacked = np.asarray(x_attacked, dtype=float)
    if x_base.shape != x_attacked.shape:
        raise DomainError("load vectors have different dimensions")
    if np.any(x_base < -1e-12) or np.any(x_attacked < -1e-12):
        raise DomainError("loads must be nonnegative")
    out: list[float | None] = []
    for b, a in zip(x_base, x_attacked):
        if b >= EPS_FLOW:
            out.append(abs(a - b) / b)
        elif a < EPS_FLOW:
            out.append(0.0)
        else:
            out.append(None)
    return out


def network_impact(ti: list[float | None]) -> float:
    """Mean of the defined TI entries."""
    defined = [v for v in ti if v is not None]
    if not defined:
        raise DomainError("network impact undefined: no road has a defined TI")
    return float(np.mean(defined))


def total_travel_cost(rec: Recommendation, genuine_only: bool = True) -> float:
    """Sum of per-user expected costs, priced at the loads real users create.

    With genuine_only set, fabricated users are dropped from both the load
    vector and the summation; otherwise the full perceived profile is priced.
    """
    x = rec.road_loads(genuine_only=genuine_only)
    costs = rec.network.edge_costs(x)
    path_costs = rec.odS.incidence.T @ costs
    total = 0.0
    for u, p in zip(rec.roster, rec.probs):
        if genuine_only and not u.genuine:
            continue
        total += float(p @ path_costs[rec.odS.path_slice(u.od)])
    return total


@dataclass
class ScenarioRun:
    """One solved pipeline cell: which scenario/mitigation, and what real users did."""

    label: str
    mitigation: str               # "baseline" | "none" | "trust" | "random-update"
    scenario: dict
    genuine_loads: np.ndarray
    total_cost: float
    network_fingerprint: str
    diagnostics: dict = field(default_factory=dict)


@dataclass
class RiskReport:
    scenario: dict
    label: str
    mitigation: str
    road_ids: tuple[str, ...]
    ti: tuple[float | None, ...]
    ni: float
    ni_scope: str
    baseline_loads: tuple[float, ...]
    attacked_loads: tuple[float, ...]
    total_cost_baseline: float
    total_cost_attacked: float
    paradox: bool
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "label": self.label,
            "mitigation": self.mitigation,
            "roads": [
                {
                    "road_id": rid,
                    "ti": self.ti[i],
                    "baseline_load": self.baseline_loads[i],
                    "attacked_load": self.attacked_loads[i],
                }
                for i, rid in enumerate(self.road_ids)
            ],
            "summary": {
                "ni": self.ni,
                "ni_scope": self.ni_scope,
                "total_cost_baseline": self.total_cost_baseline,
                "total_cost_attacked": self.total_cost_attacked,
                "paradox": self.paradox,
            },
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["road_id", "ti", "baseline_load", "attacked_load"])
        for i, rid in enumerate(self.road_ids):
            ti = "undefined" if self.ti[i] is None else repr(float(self.ti[i]))
            writer.writerow([rid, ti, repr(float(self.baseline_loads[i])),
                             repr(float(self.attacked_loads[i]))])
        writer.writerow([])
        writer.writerow(["ni", repr(float(self.ni))])
        writer.writerow(["ni_scope", self.ni_scope])
        writer.writerow(["total_cost_baseline", repr(float(self.total_cost_baseline))])
        writer.writerow(["total_cost_attacked", repr(float(self.total_cost_attacked))])
        writer.writerow(["paradox", str(self.paradox).lower()])
        return buf.getvalue()


def assemble_report(baseline: ScenarioRun, attacked: ScenarioRun,
                    mitigated: tuple[ScenarioRun, ...] = (),
                    road_ids: tuple[str, ...] = (),
                    ni_mask: np.ndarray | None = None,
                    ni_scope: str = "all") -> list[RiskReport]:
    """One report per attacked/mitigated run, all measured against one baseline.

    ni_mask restricts the NI average (and the TI rows carried into it) to a
    road subset, e.g. roads on some OD's feasible path.
    """
    reports = []
    for run in (attacked, *mitigated):
        if run.network_fingerprint != baseline.network_fingerprint:
            raise DomainError(f"run {run.label!r} was solved on a different network than the baseline")
        ti = targeted_impact(baseline.genuine_loads, run.genuine_loads)
        if ni_mask is not None:
            scoped = [v for v, keep in zip(ti, ni_mask) if keep]
        else:
            scoped = ti
        ni = network_impact(scoped)
        reports.append(RiskReport(
            scenario=run.scenario,
            label=run.label,
            mitigation=run.mitigation,
            road_ids=road_ids,
            ti=tuple(ti),
            ni=ni,
            ni_scope=ni_scope,
            baseline_loads=tuple(float(v) for v in baseline.genuine_loads),
            attacked_loads=tuple(float(v) for v in run.genuine_loads),
            total_cost_baseline=baseline.total_cost,
            total_cost_attacked=run.total_cost,
            paradox=bool(run.total_cost < baseline.total_cost - PARADOX_TOL),
            diagnostics=run.diagnostics,
        ))
    return reports
