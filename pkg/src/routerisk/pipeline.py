"""Scenario runs: baseline, attacks, mitigations, sweeps, report files.

A run is driven by a manifest (network document, scenario documents, optional
trust document, output directory, one global seed). The global seed fans out
to per-scenario seeds through counter-keyed seed sequences, so adding a
scenario never changes the draws of the ones before it. Report files carry
the manifest fingerprint, seeds and tolerances, and contain no timestamps:
equal manifest plus seed means byte-identical output.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from .attack import AttackResult, AttackScenario, load_scenario
from .equilibrium import (
    Recommendation,
    SolverConfig,
    WeSolution,
    build_roster,
    solve_ue_fixed_point,
    solve_we,
    we_to_ue,
)
from .network import DemandProfile, DomainError, NetworkFormatError, OdStructure, RoadNetwork, load_network
from .risk import RiskReport, ScenarioRun, assemble_report, total_travel_cost
from .trust import (
    TrustProfile,
    build_trust_profile,
    load_trust_document,
    random_update,
    trust_mechanism,
    user_optimal_value,
)

MITIGATION_METHODS = ("trust", "random-update")


@dataclass
class RunManifest:
    network: Path
    scenarios: tuple[Path, ...]
    trust: Path | None = None
    out: Path = Path("reports")
    seed: int = 0
    tol: float | None = None
    workers: int = 1
    ni_scope: str = "all"

    def validate(self) -> None:
        if not self.network.exists():
            raise FileNotFoundError(f"network file not found: {self.network}")
        for s in self.scenarios:
            if not s.exists():
                raise FileNotFoundError(f"scenario file not found: {s}")
        if self.trust is not None and not self.trust.exists():
            raise FileNotFoundError(f"trust file not found: {self.trust}")
        if self.ni_scope not in ("all", "feasible"):
            raise DomainError(f"unknown NI scope {self.ni_scope!r}")
        if self.workers < 1:
            raise DomainError("workers must be >= 1")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for path in (self.network, *self.scenarios, *((self.trust,) if self.trust else ())):
            h.update(path.name.encode())
            h.update(path.read_bytes())
        h.update(f"seed={self.seed};tol={self.tol};ni_scope={self.ni_scope}".encode())
        return h.hexdigest()[:16]

    def solver_config(self) -> SolverConfig:
        cfg = SolverConfig()
        if self.tol is not None:
            cfg.tol = self.tol
        return cfg


def derive_seed(global_seed: int, index: int, scenario_seed: int = 0) -> int:
    ss = np.random.SeedSequence(entropy=global_seed, spawn_key=(index, scenario_seed))
    return int(ss.generate_state(1)[0])


def feasible_road_mask(network: RoadNetwork, odS: OdStructure, demands: np.ndarray) -> np.ndarray:
    """Roads on at least one path of an OD pair with genuine demand."""
    mask = np.zeros(network.n_roads, dtype=bool)
    for j, od in enumerate(odS.od_pairs):
        if demands[j] > 0:
            sl = odS.path_slice(j)
            mask |= odS.incidence[:, sl].sum(axis=1) > 0
    return mask


@dataclass
class BaselineCase:
    network: RoadNetwork
    odS: OdStructure
    demand: DemandProfile
    roster: list
    we: WeSolution
    rec: Recommendation
    run: ScenarioRun


def prepare_baseline(network_path: Path, cfg: SolverConfig) -> BaselineCase:
    network, odS, demand = load_network(network_path)
    we = solve_we(network, odS, demand.genuine, cfg)
    roster = build_roster(odS, demand.genuine)
    rec = we_to_ue(we, demand.genuine, roster)
    run = ScenarioRun(
        label="baseline",
        mitigation="baseline",
        scenario={"attacker_type": "none"},
        genuine_loads=rec.road_loads(genuine_only=True),
        total_cost=total_travel_cost(rec),
        network_fingerprint=network.fingerprint(),
        diagnostics={"iterations": we.iterations, "relative_gap": we.relative_gap},
    )
    return BaselineCase(network, odS, demand, roster, we, rec, run)


def execute_attack(case: BaselineCase, scenario: AttackScenario, cfg: SolverConfig) -> AttackResult:
    dispatch = {
        "strategic": attack_mod.strategic_attack,
        "uniform": attack_mod.uniform_attack,
        "random": attack_mod.random_attack,
    }
    return dispatch[scenario.attacker](case.network, case.odS, case.demand.genuine, scenario, cfg)


def attack_run(case: BaselineCase, scenario: AttackScenario, result: AttackResult,
               extra_diagnostics: dict | None = None) -> ScenarioRun:
    rec_genuine = _genuine_rec_from_attack(case, result)
    diagnostics = {
        "attacker_cost": result.attacker_cost,
        "achieved_level": result.achieved_level,
        "fake_demand": {case.odS.od_pairs[j].oid: float(v)
                        for j, v in enumerate(result.fake) if v > 0},
        "relative_gap": result.we_attacked.relative_gap,
    }
    diagnostics.update(result.diagnostics)
    diagnostics.update(extra_diagnostics or {})
    return ScenarioRun(
        label=scenario.label,
        mitigation="none",
        scenario=_scenario_dict(scenario),
        genuine_loads=result.genuine_road_loads,
        total_cost=total_travel_cost(rec_genuine),
        network_fingerprint=case.network.fingerprint(),
        diagnostics=diagnostics,
    )


def _scenario_dict(scenario: AttackScenario) -> dict:
    return {
        "label": scenario.label,
        "method": scenario.method,
        "attacker_type": scenario.attacker,
        "target_edge": scenario.target_edge,
        "gamma": scenario.gamma,
        "candidate_ods": list(scenario.candidate_ods),
        "budget": scenario.budget,
        "seed": scenario.seed,
        "integral": scenario.integral,
    }


def _genuine_rec_from_attack(case: BaselineCase, result: AttackResult) -> Recommendation:
    """Recommendation the genuine users follow under attack: attacked WE proportions."""
    perceived = case.demand.genuine + result.fake
    probs = []
    for u in case.roster:
        d = perceived[u.od]
        probs.append(result.we_attacked.y[case.odS.path_slice(u.od)] / d)
    return Recommendation(case.network, case.odS, case.roster, probs)


def trust_mitigation_run(case: BaselineCase, scenario: AttackScenario, result: AttackResult,
                         trust_doc: dict, cfg: SolverConfig, seed: int) -> ScenarioRun:
    """Re-run the attacked instance with the trust mechanism in the loop.

    The perceived roster extends the genuine users with the fabricated ones
    (integral fake demand required); fabricated users accept anything, genuine
    users carry their document trust scores and baseline priors.
    """
    fake_roster = build_roster(case.odS, result.fake, genuine=False, prefix="fake:")
    roster = list(case.roster) + fake_roster
    trust = build_trust_profile(trust_doc, roster, case.odS, baseline=case.rec)
    rec, duals = trust_mechanism(case.network, case.odS, roster, trust, cfg)
    binding = sum(1 for d in duals.values() if d.binding)
    max_kl = max((d.kl for d in duals.values()), default=0.0)
    return ScenarioRun(
        label=scenario.label,
        mitigation="trust",
        scenario=_scenario_dict(scenario),
        genuine_loads=rec.road_loads(genuine_only=True),
        total_cost=total_travel_cost(rec),
        network_fingerprint=case.network.fingerprint(),
        diagnostics={
            "attacker_cost": result.attacker_cost,
            "binding_users": binding,
            "max_kl": max_kl,
            "seed": seed,
        },
    )


def random_update_run(case: BaselineCase, scenario: AttackScenario, result: AttackResult,
                      trust_doc: dict | None, cfg: SolverConfig, seed: int) -> ScenarioRun:
    rec_new = _genuine_rec_from_attack(case, result)
    if trust_doc is not None:
        trust = build_trust_profile(trust_doc, case.roster, case.odS, baseline=case.rec)
        pi = {u.uid: trust.pi(u.uid) for u in case.roster}
    else:
        pi = 0.5
    rec = random_update(rec_new, case.rec, pi, seed=seed)
    return ScenarioRun(
        label=scenario.label,
        mitigation="random-update",
        scenario=_scenario_dict(scenario),
        genuine_loads=rec.road_loads(genuine_only=True),
        total_cost=total_travel_cost(rec),
        network_fingerprint=case.network.fingerprint(),
        diagnostics={"attacker_cost": result.attacker_cost, "seed": seed},
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _write_reports(manifest: RunManifest, reports: list[RiskReport], stdout) -> None:
    manifest.out.mkdir(parents=True, exist_ok=True)
    meta = {
        "manifest_hash": manifest.fingerprint(),
        "seed": manifest.seed,
        "tolerance": manifest.solver_config().tol,
    }
    for report in reports:
        report.diagnostics = dict(report.diagnostics)
        report.diagnostics.update(meta)
        stem = f"{report.label}__{report.mitigation}"
        (manifest.out / f"{stem}.json").write_text(report.to_json())
        (manifest.out / f"{stem}.csv").write_text(report.to_csv())
        print(f"{stem}: NI={report.ni:.6f} total={report.total_cost_attacked:.3f} "
              f"paradox={str(report.paradox).lower()}", file=stdout)


def _write_baseline(manifest: RunManifest, case: BaselineCase, stdout) -> None:
    manifest.out.mkdir(parents=True, exist_ok=True)
    doc = {
        "manifest_hash": manifest.fingerprint(),
        "seed": manifest.seed,
        "tolerance": manifest.solver_config().tol,
        "total_cost": case.run.total_cost,
        "genuine_loads": {r.rid: float(v) for r, v in zip(case.network.roads, case.run.genuine_loads)},
        "diagnostics": case.run.diagnostics,
    }
    (manifest.out / "baseline.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"baseline: total={case.run.total_cost:.3f}", file=stdout)


def _ni_mask(manifest: RunManifest, case: BaselineCase) -> np.ndarray | None:
    if manifest.ni_scope == "feasible":
        return feasible_road_mask(case.network, case.odS, case.demand.genuine)
    return None


def _load_scenarios(manifest: RunManifest) -> list[AttackScenario]:
    return [load_scenario(path) for path in manifest.scenarios]


def _run_cells(manifest: RunManifest, case: BaselineCase, scenarios, cell):
    """Evaluate one callable per scenario, optionally on a thread pool."""
    if manifest.workers > 1 and len(scenarios) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=manifest.workers) as pool:
            return list(pool.map(cell, range(len(scenarios)), scenarios))
    return [cell(i, sc) for i, sc in enumerate(scenarios)]


def cmd_assess(manifest: RunManifest, stdout=None) -> int:
    import sys

    stdout = stdout or sys.stdout
    manifest.validate()
    cfg = manifest.solver_config()
    case = prepare_baseline(manifest.network, cfg)
    scenarios = _load_scenarios(manifest)
    road_ids = tuple(r.rid for r in case.network.roads)
    mask = _ni_mask(manifest, case)

    def cell(i: int, scenario: AttackScenario):
        result = execute_attack(case, scenario, cfg)
        run = attack_run(case, scenario, result,
                         {"seed": derive_seed(manifest.seed, i, scenario.seed)})
        return assemble_report(case.run, run, road_ids=road_ids,
                               ni_mask=mask, ni_scope=manifest.ni_scope)

    all_reports = _run_cells(manifest, case, scenarios, cell)
    _write_baseline(manifest, case, stdout)
    for reports in all_reports:
        _write_reports(manifest, reports, stdout)
    return 0


def cmd_mitigate(manifest: RunManifest, methods: tuple[str, ...] = MITIGATION_METHODS,
                 stdout=None) -> int:
    import sys

    stdout = stdout or sys.stdout
    manifest.validate()
    for m in methods:
        if m not in MITIGATION_METHODS:
            raise DomainError(f"unknown mitigation method {m!r}")
    trust_doc = load_trust_document(manifest.trust) if manifest.trust else None
    if "trust" in methods and trust_doc is None:
        raise DomainError("trust mitigation requires a trust document (--trust)")
    cfg = manifest.solver_config()
    case = prepare_baseline(manifest.network, cfg)
    scenarios = _load_scenarios(manifest)
    road_ids = tuple(r.rid for r in case.network.roads)
    mask = _ni_mask(manifest, case)

    def cell(i: int, scenario: AttackScenario):
        seed = derive_seed(manifest.seed, i, scenario.seed)
        result = execute_attack(case, scenario, cfg)
        unmitigated = attack_run(case, scenario, result, {"seed": seed})
        mitigated = []
        if "trust" in methods:
            mitigated.append(trust_mitigation_run(case, scenario, result, trust_doc, cfg, seed))
        if "random-update" in methods:
            mitigated.append(random_update_run(case, scenario, result, trust_doc, cfg, seed))
        return assemble_report(case.run, unmitigated, tuple(mitigated), road_ids=road_ids,
                               ni_mask=mask, ni_scope=manifest.ni_scope)

    all_reports = _run_cells(manifest, case, scenarios, cell)
    _write_baseline(manifest, case, stdout)
    for reports in all_reports:
        _write_reports(manifest, reports, stdout)
    return 0


def cmd_sweep(manifest: RunManifest, parameter: str, grid: tuple[float, ...], stdout=None) -> int:
    import sys

    stdout = stdout or sys.stdout
    manifest.validate()
    if not grid:
        raise DomainError("sweep grid is empty")
    if list(grid) != sorted(grid):
        raise DomainError("sweep grid must be sorted ascending")
    if not manifest.scenarios:
        raise DomainError("sweep requires at least one scenario")
    cfg = manifest.solver_config()
    case = prepare_baseline(manifest.network, cfg)
    scenario = load_scenario(manifest.scenarios[0])

    if parameter == "gamma":
        rows = _sweep_gamma(case, scenario, grid, cfg)
    elif parameter == "trust":
        rows = _sweep_trust(case, scenario, grid, cfg)
    else:
        raise DomainError(f"unknown sweep parameter {parameter!r}")

    manifest.out.mkdir(parents=True, exist_ok=True)
    header = list(rows[0].keys())
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(row[k]) for k in header))
    text = "\n".join(lines) + "\n"
    (manifest.out / f"sweep_{parameter}.csv").write_text(text)
    doc = {"manifest_hash": manifest.fingerprint(), "seed": manifest.seed,
           "parameter": parameter, "rows": rows}
    (manifest.out / f"sweep_{parameter}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(text, end="", file=stdout)
    return 0


def _csv_cell(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _sweep_gamma(case: BaselineCase, scenario: AttackScenario, grid, cfg) -> list[dict]:
    from dataclasses import replace

    if scenario.attacker != "strategic":
        raise DomainError("gamma sweeps require a strategic scenario")
    rows = []
    for gamma in grid:
        sc = replace(scenario, gamma=float(gamma))
        try:
            result = attack_mod.strategic_attack(case.network, case.odS, case.demand.genuine, sc, cfg)
            rows.append({"gamma": float(gamma), "attacker_cost": result.attacker_cost,
                         "achieved_level": result.achieved_level, "feasible": True})
        except attack_mod.InfeasibleAttackError as exc:
            rows.append({"gamma": float(gamma), "attacker_cost": float("nan"),
                         "achieved_level": exc.max_achieved, "feasible": False})
    return rows


def _sweep_trust(case: BaselineCase, scenario: AttackScenario, grid, cfg) -> list[dict]:
    """Per-user parametric trust sweep against the frozen attacked profile.

    Holding the other users fixed matches the per-user subproblem whose dual
    multiplier the bound uses; row j checks the dual lower bound against every
    other grid point as the base.
    """
    result = execute_attack(case, scenario, cfg)
    fake_roster = build_roster(case.odS, result.fake, genuine=False, prefix="fake:")
    roster = list(case.roster) + fake_roster
    perceived = case.demand.genuine + result.fake
    probs = [result.we_attacked.y[case.odS.path_slice(u.od)] / perceived[u.od] for u in roster]
    rec = Recommendation(case.network, case.odS, roster, probs)
    genuine_idx = [i for i, u in enumerate(roster) if u.genuine]
    priors = {i: case.rec.probs[i] for i in genuine_idx}

    values = {}
    lambdas = {}
    for T in grid:
        vals, lams = [], []
        for i in genuine_idx:
            v, lam = user_optimal_value(rec, i, priors[i], float(T))
            vals.append(v)
            lams.append(lam)
        values[T] = np.array(vals)
        lambdas[T] = np.array(lams)

    rows = []
    for T in grid:
        bound_ok = True
        for T0 in grid:
            if T0 == T:
                continue
            eta = float(T) - float(T0)
            if np.any(values[T] < values[T0] - lambdas[T0] * eta - 1e-6):
                bound_ok = False
        rows.append({
            "trust": float(T),
            "mean_user_value": float(values[T].mean()),
            "max_lambda": float(lambdas[T].max()),
            "bound_ok": bound_ok,
        })
    return rows
