"""Fabricated-demand attack synthesis.

An attack is a nonnegative fake-demand vector added to the genuine demand
before the recommender solves its equilibrium. Fabricated users receive
recommendations but never drive, so the flow they are assigned evaporates:
per OD pair only the fraction d / (d + d_fake) of the solved path flow is
real. Three attacker types are provided: strategic (bilevel minimisation of
total fake demand subject to a load target on one road), uniform and random
budget spreading over a candidate OD set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .equilibrium import SolverConfig, WeSolution, solve_we
from .network import DemandProfile, DomainError, NetworkFormatError, OdStructure, RoadNetwork

#: slack subtracted from the load target to absorb equilibrium-solver tolerance
LEVEL_SLACK = 1e-6

ATTACK_METHODS = ("sybil", "botnet", "gps-spoof", "mitm", "insider")
ATTACKER_TYPES = ("strategic", "uniform", "random")


class InfeasibleAttackError(ValueError):
    """Requested load level cannot be reached; carries the best achievable level."""

    def __init__(self, message: str, max_achieved: float = 0.0):
        super().__init__(message)
        self.max_achieved = max_achieved


@dataclass(frozen=True)
class AttackScenario:
    method: str
    attacker: str
    target_edge: str
    gamma: float = 0.0
    candidate_ods: tuple[str, ...] = ()
    budget: float | None = None
    seed: int = 0
    integral: bool = True
    label: str = "scenario"

    def __post_init__(self):
        if self.method not in ATTACK_METHODS:
            raise NetworkFormatError(f"unknown attack method {self.method!r}")
        if self.attacker not in ATTACKER_TYPES:
            raise NetworkFormatError(f"unknown attacker type {self.attacker!r}")
        if self.gamma < 0:
            raise NetworkFormatError("gamma must be nonnegative")
        if self.budget is not None and self.budget < 0:
            raise NetworkFormatError("budget must be nonnegative")
        if self.attacker != "strategic" and not self.candidate_ods:
            raise NetworkFormatError(f"{self.attacker} attacker requires a nonempty candidate OD set")


def load_scenario(path: str | Path) -> AttackScenario:
    """Read an attack scenario document (JSON); the filename stem becomes its label."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: invalid JSON ({exc})") from exc
    return parse_scenario(doc, label=path.stem)


def parse_scenario(doc: dict, label: str = "scenario") -> AttackScenario:
    if not isinstance(doc, dict):
        raise NetworkFormatError("scenario document must be a JSON object")
    required = ("method", "attacker_type", "target_edge")
    optional = ("gamma", "candidate_ods", "budget", "seed", "integral")
    unknown = set(doc) - set(required) - set(optional)
    if unknown:
        raise NetworkFormatError(f"scenario document: unknown keys {sorted(unknown)}")
    missing = set(required) - set(doc)
    if missing:
        raise NetworkFormatError(f"scenario document: missing keys {sorted(missing)}")
    return AttackScenario(
        method=doc["method"],
        attacker=doc["attacker_type"],
        target_edge=str(doc["target_edge"]),
        gamma=float(doc.get("gamma", 0.0)),
        candidate_ods=tuple(str(k) for k in doc.get("candidate_ods", ())),
        budget=None if doc.get("budget") is None else float(doc["budget"]),
        seed=int(doc.get("seed", 0)),
        integral=bool(doc.get("integral", True)),
        label=label,
    )


@dataclass
class AttackResult:
    scenario: AttackScenario
    fake: np.ndarray                 # per-OD fabricated demand
    attacker_cost: float             # sum of fake entries
    we_attacked: WeSolution          # equilibrium the recommender actually solved
    genuine_path_flows: np.ndarray
    genuine_road_loads: np.ndarray
    achieved_level: float            # genuine load on the target road
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FeasibilityBounds:
    """Structural bounds on genuine load the attacker can place on a road.

    max_level sums the demand of every OD with at least one path over the
    road; forced_level sums ODs whose every path crosses it. Loads between
    these bounds may still be unreachable, but nothing outside them is.
    """

    max_level: float
    forced_level: float


def genuine_flow(we_attacked: WeSolution, genuine: np.ndarray, fake: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split an attacked equilibrium into the part real users generate.

    Path flows scale per OD by d / (d + d_fake), with 0/0 read as 0; road
    loads are re-aggregated from the scaled flows.
    """
    odS = we_attacked.odS
    genuine = np.asarray(genuine, dtype=float)
    fake = np.asarray(fake, dtype=float)
    if genuine.shape != fake.shape or genuine.shape != (len(odS.od_pairs),):
        raise DomainError("demand vectors do not match the OD structure")
    if np.any(genuine < 0) or np.any(fake < 0):
        raise DomainError("demand entries must be nonnegative")
    total = genuine + fake
    scale = np.divide(genuine, total, out=np.zeros_like(total), where=total > 0)
    y_u = we_attacked.y * odS.expand(scale)
    return y_u, odS.incidence @ y_u


def attack_feasibility(network: RoadNetwork, odS: OdStructure, demands: np.ndarray,
                       target_edge: str) -> FeasibilityBounds:
    """Scan the incidence matrix for the structural load bounds on one road."""
    if target_edge not in network.road_index:
        raise NetworkFormatError(f"unknown target road {target_edge!r}")
    e = network.road_index[target_edge]
    demands = np.asarray(demands, dtype=float)
    max_level = 0.0
    forced = 0.0
    for j, od in enumerate(odS.od_pairs):
        uses = [odS.incidence[e, odS.offsets[j] + p] > 0 for p in range(len(od.paths))]
        if any(uses):
            max_level += demands[j]
        if all(uses):
            forced += demands[j]
    return FeasibilityBounds(max_level, forced)


def _candidate_indices(odS: OdStructure, scenario: AttackScenario) -> list[int]:
    if scenario.candidate_ods:
        idx = []
        for oid in scenario.candidate_ods:
            if oid not in odS.od_index:
                raise NetworkFormatError(f"scenario {scenario.label!r}: unknown candidate OD {oid!r}")
            idx.append(odS.od_index[oid])
        return idx
    return list(range(len(odS.od_pairs)))


def _result(network, odS, demands, scenario, fake, cfg, diagnostics=None, y_init=None) -> AttackResult:
    we = solve_we(network, odS, np.asarray(demands, dtype=float) + fake, cfg, y_init=y_init)
    y_u, x_u = genuine_flow(we, demands, fake)
    e = network.road_index[scenario.target_edge]
    return AttackResult(
        scenario=scenario,
        fake=fake,
        attacker_cost=float(fake.sum()),
        we_attacked=we,
        genuine_path_flows=y_u,
        genuine_road_loads=x_u,
        achieved_level=float(x_u[e]),
        diagnostics=diagnostics or {},
    )


def uniform_attack(network: RoadNetwork, odS: OdStructure, demands: np.ndarray,
                   scenario: AttackScenario, cfg: SolverConfig | None = None) -> AttackResult:
    """Spread the budget evenly across the candidate ODs.

    With the integral flag the split uses largest-remainder rounding; ties go
    to earlier candidates in document order so results are reproducible.
    """
    K = _candidate_indices(odS, scenario)
    if not K:
        raise NetworkFormatError("uniform attack requires a nonempty candidate OD set")
    budget = scenario.budget if scenario.budget is not None else 0.0
    fake = np.zeros(len(odS.od_pairs))
    if scenario.integral:
        budget_i = int(round(budget))
        base, extra = divmod(budget_i, len(K))
        for rank, j in enumerate(K):
            fake[j] = base + (1 if rank < extra else 0)
    else:
        for j in K:
            fake[j] = budget / len(K)
    return _result(network, odS, demands, scenario, fake, cfg)


def random_attack(network: RoadNetwork, odS: OdStructure, demands: np.ndarray,
                  scenario: AttackScenario, cfg: SolverConfig | None = None) -> AttackResult:
    """Assign budget units to candidate ODs by a seeded uniform multinomial draw."""
    K = _candidate_indices(odS, scenario)
    if not K:
        raise NetworkFormatError("random attack requires a nonempty candidate OD set")
    budget = scenario.budget if scenario.budget is not None else 0.0
    rng = np.random.default_rng(scenario.seed)
    fake = np.zeros(len(odS.od_pairs))
    units = int(budget) if scenario.integral else int(budget)
    draw = rng.multinomial(units, np.full(len(K), 1.0 / len(K)))
    for j, n in zip(K, draw):
        fake[j] = float(n)
    remainder = budget - units
    if not scenario.integral and remainder > 0:
        fake[K[rng.integers(len(K))]] += remainder
    return _result(network, odS, demands, scenario, fake, cfg)


def strategic_attack(network: RoadNetwork, odS: OdStructure, demands: np.ndarray,
                     scenario: AttackScenario, cfg: SolverConfig | None = None) -> AttackResult:
    """Minimise total fabricated demand subject to a genuine-load target.

    The lower level (the recommender's equilibrium) is re-solved per probe.
    Pipeline: finite-difference ascent on the candidate coordinates until the
    target level is reached, coordinate-wise upward rounding when integral
    output is required, then greedy single-coordinate reductions. The returned
    point carries a local-optimality certificate: no tested reduction of any
    single coordinate by one grid step stays feasible.
    """
    cfg = cfg or SolverConfig()
    demands = np.asarray(demands, dtype=float)
    d_total = float(demands.sum())
    if scenario.gamma > d_total + 1e-9:
        raise InfeasibleAttackError(
            f"target level {scenario.gamma} exceeds total genuine demand {d_total}")
    bounds = attack_feasibility(network, odS, demands, scenario.target_edge)
    if scenario.gamma > bounds.max_level + 1e-9:
        raise InfeasibleAttackError(
            f"target level {scenario.gamma} exceeds the structural bound "
            f"{bounds.max_level} on road {scenario.target_edge!r}",
            max_achieved=bounds.max_level)

    K = _candidate_indices(odS, scenario)
    e = network.road_index[scenario.target_edge]
    target = scenario.gamma - LEVEL_SLACK
    cap = scenario.budget if scenario.budget is not None else max(100.0 * d_total, 100.0)

    warm = {"y": None}
    cache: dict[tuple, float] = {}

    def level(v: np.ndarray) -> float:
        key = tuple(np.round(v, 9))
        if key in cache:
            return cache[key]
        fake = np.zeros(len(odS.od_pairs))
        fake[K] = v
        we = solve_we(network, odS, demands + fake, cfg, y_init=warm["y"])
        warm["y"] = we.y
        _, x_u = genuine_flow(we, demands, fake)
        cache[key] = float(x_u[e])
        return cache[key]

    solves = 0
    v = np.zeros(len(K))
    g0 = level(v)
    best_level, best_v = g0, v.copy()
    if g0 < target:
        h = max(1.0, d_total / 20.0)
        found = False
        for _outer in range(80):
            g_v = level(v)
            if g_v > best_level:
                best_level, best_v = g_v, v.copy()
            if g_v >= target:
                found = True
                break
            grad = np.array([(level(v + h * ek) - g_v) / h
                             for ek in np.eye(len(K))])
            grad = np.clip(grad, 0.0, None)
            if grad.max() <= 1e-9:
                h *= 4.0
                if h > max(64.0, d_total):
                    break
                continue
            u = grad / grad.sum()
            # probe along u by doubling, then bisect onto the feasibility boundary
            t_prev, g_prev = 0.0, g_v
            t = h
            while True:
                if v.sum() + t > cap:
                    t = cap - v.sum()
                    if t <= t_prev + 1e-12:
                        break
                g_t = level(v + t * u)
                if g_t >= target:
                    lo, hi = t_prev, t
                    while hi - lo > 0.25:
                        mid = 0.5 * (lo + hi)
                        if level(v + mid * u) >= target:
                            hi = mid
                        else:
                            lo = mid
                    v = v + hi * u
                    found = True
                    break
                if g_t <= g_prev + 1e-9 or t >= cap:
                    v = v + t_prev * u
                    break
                t_prev, g_prev = t, g_t
                t *= 2.0
            if found:
                break
        if not found:
            raise InfeasibleAttackError(
                f"target level {scenario.gamma} not reachable on road "
                f"{scenario.target_edge!r} within the probe budget",
                max_achieved=best_level)

    step = 1.0 if scenario.integral else 0.25
    if scenario.integral:
        v = np.ceil(v - 1e-9)
    for _ in range(50):
        if level(v) >= target:
            break
        # rounding can land infeasible when the response is not monotone
        g_v = level(v)
        grad = np.array([(level(v + step * ek) - g_v) for ek in np.eye(len(K))])
        v = v + step * np.eye(len(K))[int(np.argmax(grad))]
    else:
        raise InfeasibleAttackError("could not restore feasibility after rounding",
                                    max_achieved=level(v))

    changed = True
    while changed:
        changed = False
        for k in range(len(K)):
            while v[k] >= step - 1e-12 and level(v - step * np.eye(len(K))[k]) >= target:
                v[k] -= step
                changed = True
    certificate = all(
        v[k] < step - 1e-12 or level(v - step * np.eye(len(K))[k]) < target
        for k in range(len(K))
    )

    fake = np.zeros(len(odS.od_pairs))
    fake[K] = v
    diagnostics = {
        "we_solves": len(cache),
        "local_certificate": bool(certificate),
        "grid_step": step,
    }
    return _result(network, odS, demands, scenario, fake, cfg, diagnostics)
