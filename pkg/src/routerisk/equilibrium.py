"""Equilibrium route recommendations.

Two solvers live here. `solve_we` minimises the Beckmann potential
sum_e int_0^{x_e} c_e(z) dz over per-OD path flows; its minimiser equalises
the travel time of all used paths within each OD pair, which is exactly the
equal-cost condition on used paths. `solve_ue_fixed_point` iterates the
projected step p <- proj(p - rho * grad) per user until it reaches a fixed
point of the recommendation map.

A user's path-cost gradient is taken at the loads induced by the full
profile: an individual user is treated as marginal, so deviations (and the
projected-gradient direction) see road costs as fixed. That reading is what
makes per-user fixed points and per-OD Beckmann minimisers induce the same
road loads whenever costs are strictly increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import (
    DomainError,
    OdStructure,
    RoadNetwork,
    all_path_costs,
)

#: default no-deviation tolerance used by verify_ue and the UE solver's gap check
DEVIATION_TOL = 1e-6

_TINY = 1e-300


class ConvergenceError(RuntimeError):
    """Solver ran out of iterations; carries the last relative gap / residual."""

    def __init__(self, message: str, last_gap: float):
        super().__init__(f"{message} (last gap {last_gap:.3e})")
        self.last_gap = last_gap


@dataclass
class SolverConfig:
    """Shared solver knobs.

    `tol` is the relative-gap target for the Beckmann solver and the
    fixed-point residual target for the projected-gradient solver.
    Complementarity is driven to 10*tol so downstream certificates
    (residual checks, no-deviation tests) pass with margin.
    """

    max_iter: int = 100_000
    tol: float = 1e-8
    rho: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.tol <= 0:
            raise DomainError("tolerance must be positive")
        if self.rho <= 0:
            raise DomainError("step size rho must be positive")


# ---------------------------------------------------------------------------
# simplex projection
# ---------------------------------------------------------------------------

def project_simplex(v: np.ndarray, total: float = 1.0) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = total} (sort-and-threshold)."""
    v = np.asarray(v, dtype=float)
    if total <= 0:
        return np.zeros_like(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, v.size + 1)
    cond = u - css / idx > 0
    k = idx[cond][-1]
    tau = css[k - 1] / k
    return np.maximum(v - tau, 0.0)


def _project_rows(m: np.ndarray, total: float = 1.0) -> np.ndarray:
    """Row-wise simplex projection (vectorised sort-and-threshold)."""
    if total <= 0:
        return np.zeros_like(m)
    u = -np.sort(-m, axis=1)
    css = np.cumsum(u, axis=1) - total
    idx = np.arange(1, m.shape[1] + 1)
    cond = u - css / idx > 0
    k = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(m.shape[0]), k] / (k + 1)
    return np.maximum(m - tau[:, None], 0.0)


# ---------------------------------------------------------------------------
# Wardrop equilibrium via the Beckmann program
# ---------------------------------------------------------------------------

@dataclass
class WeSolution:
    """Solved path flows/road loads plus the multipliers recovered from them.

    nu[j] is the equilibrium (minimum) path cost of OD j; mu is the per-path
    slack cost - nu, zero on used paths at optimality.
    """

    network: RoadNetwork
    odS: OdStructure
    demands: np.ndarray
    y: np.ndarray
    x: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    objective: float
    iterations: int
    relative_gap: float
    max_complementarity: float


@dataclass
class KktResidual:
    stationarity: float
    complementarity: float
    feasibility: float

    def max(self) -> float:
        return max(self.stationarity, self.complementarity, self.feasibility)


def _beckmann(network: RoadNetwork, odS: OdStructure, y: np.ndarray) -> float:
    return float(network.edge_cost_integrals(odS.incidence @ y).sum())


def _gap_terms(network, odS, demands, y):
    x = odS.incidence @ y
    costs = all_path_costs(network, odS, x)
    nu = np.array([costs[odS.path_slice(j)].min() for j in range(len(odS.od_pairs))])
    mu = costs - odS.expand(nu)
    total = float(y @ costs)
    lower = float(demands @ nu)
    relgap = (total - lower) / max(lower, 1e-12)
    maxcomp = float(np.max(mu * y)) if y.size else 0.0
    return x, costs, nu, mu, relgap, maxcomp


def _newton_polish(network, odS, demands, y, rounds: int = 60) -> np.ndarray:
    """Equalise used-path costs on the active set with damped Newton steps.

    Works on the reduced variables (active path flows minus one basis path per
    OD); only accepts steps that do not increase the Beckmann potential, so it
    can be called speculatively from any feasible point.
    """
    A = odS.incidence
    n_od = len(odS.od_pairs)
    y = y.copy()
    obj = _beckmann(network, odS, y)
    for _ in range(rounds):
        x = A @ y
        costs = all_path_costs(network, odS, x)
        deriv = network.edge_cost_derivs(x)
        cols = []  # (flat path index, basis flat index)
        drop = set()
        for j in range(n_od):
            if demands[j] <= 0:
                continue
            sl = odS.path_slice(j)
            idxs = np.arange(sl.start, sl.stop)
            active = idxs[(y[idxs] > 1e-11)]
            best = idxs[np.argmin(costs[idxs])]
            if best not in active:
                active = np.append(active, best)
            if active.size < 2:
                continue
            basis = active[np.argmax(y[active])]
            cols.extend((i, basis) for i in active if i != basis)
        if not cols:
            break
        for _retry in range(4):
            use = [c for c in cols if c[0] not in drop]
            if not use:
                break
            W = np.stack([A[:, i] - A[:, b] for i, b in use], axis=1)
            H = W.T @ (deriv[:, None] * W)
            g = np.array([costs[i] - costs[b] for i, b in use])
            ridge = 1e-12 * max(1.0, float(np.trace(H)))
            try:
                delta = np.linalg.solve(H + ridge * np.eye(H.shape[0]), -g)
            except np.linalg.LinAlgError:
                return y
            dy = np.zeros_like(y)
            for (i, b), d in zip(use, delta):
                dy[i] += d
                dy[b] -= d
            shrink = y + dy < 0
            if not np.any(shrink):
                t_max = 1.0
            else:
                t_max = float(np.min(y[shrink] / -dy[shrink]))
            blocked = [c for c in use if y[c[0]] <= 1e-14 and dy[c[0]] < 0]
            if blocked and t_max <= 1e-14:
                drop.update(c[0] for c in blocked)
                continue
            break
        else:
            break
        if not use:
            break
        t = min(1.0, 0.99995 * t_max) if t_max < 1.0 else 1.0
        accepted = False
        for _ls in range(40):
            y_new = np.maximum(y + t * dy, 0.0)
            # restore exact per-OD totals after clipping
            for j in range(n_od):
                sl = odS.path_slice(j)
                s = y_new[sl].sum()
                if s > 0 and demands[j] > 0:
                    y_new[sl] *= demands[j] / s
            obj_new = _beckmann(network, odS, y_new)
            if obj_new <= obj + 1e-13 * (1.0 + abs(obj)):
                accepted = True
                break
            t *= 0.5
        if not accepted or float(np.max(np.abs(y_new - y))) <= 1e-15:
            break
        moved = float(np.max(np.abs(y_new - y)))
        y, obj = y_new, obj_new
        if moved <= 1e-13 * (1.0 + float(np.max(y))):
            break
    return y


def solve_we(network: RoadNetwork, odS: OdStructure, demands: np.ndarray,
             cfg: SolverConfig | None = None, y_init: np.ndarray | None = None) -> WeSolution:
    """Solve the Beckmann program for per-OD demands (genuine plus any fabricated).

    Returns path flows, road loads and recovered multipliers; raises
    ConvergenceError when the relative gap cannot be driven to cfg.tol.
    """
    cfg = cfg or SolverConfig()
    demands = np.asarray(demands, dtype=float)
    if demands.shape != (len(odS.od_pairs),):
        raise DomainError("demand vector does not match the OD structure")
    if np.any(demands < 0):
        raise DomainError("negative demand")

    comp_target = 10.0 * cfg.tol
    if y_init is not None:
        y = np.asarray(y_init, dtype=float).copy()
        if y.shape != (odS.n_paths,):
            raise DomainError("y_init has wrong dimension")
        y = np.maximum(y, 0.0)
        for j in range(len(odS.od_pairs)):
            sl = odS.path_slice(j)
            s = y[sl].sum()
            y[sl] = y[sl] * (demands[j] / s) if s > 0 else demands[j] / odS.counts[j]
    else:
        y = odS.expand(demands / odS.counts)

    obj = _beckmann(network, odS, y)
    eta = 1.0
    iterations = 0
    relgap, maxcomp = np.inf, np.inf
    while iterations < cfg.max_iter:
        y = _newton_polish(network, odS, demands, y)
        x, costs, nu, mu, relgap, maxcomp = _gap_terms(network, odS, demands, y)
        if relgap <= cfg.tol and maxcomp <= comp_target:
            break
        obj = _beckmann(network, odS, y)
        # burst of projected-gradient steps with Armijo backtracking
        for _ in range(40):
            iterations += 1
            costs = all_path_costs(network, odS, odS.incidence @ y)
            y_new = y.copy()
            for j in range(len(odS.od_pairs)):
                sl = odS.path_slice(j)
                y_new[sl] = project_simplex(y[sl] - eta * costs[sl], demands[j])
            step = y_new - y
            sq = float(step @ step)
            if sq <= 1e-30:
                break
            obj_new = _beckmann(network, odS, y_new)
            bt = 0
            while obj_new > obj - 1e-4 / eta * sq and bt < 60:
                eta *= 0.5
                bt += 1
                for j in range(len(odS.od_pairs)):
                    sl = odS.path_slice(j)
                    y_new[sl] = project_simplex(y[sl] - eta * costs[sl], demands[j])
                step = y_new - y
                sq = float(step @ step)
                obj_new = _beckmann(network, odS, y_new)
            y, obj = y_new, obj_new
            if bt == 0:
                eta *= 1.25
            if iterations >= cfg.max_iter:
                break
    else:
        raise ConvergenceError("Beckmann solver did not converge", relgap)

    if relgap > cfg.tol or maxcomp > comp_target:
        raise ConvergenceError("Beckmann solver did not converge", relgap)

    # snap numerical dust to exact zeros so unused paths read as unused
    for j in range(len(odS.od_pairs)):
        sl = odS.path_slice(j)
        block = y[sl]
        block[block < 1e-9 * max(1.0, demands[j])] = 0.0
        s = block.sum()
        if s > 0 and demands[j] > 0:
            block *= demands[j] / s
        y[sl] = block
    x, costs, nu, mu, relgap, maxcomp = _gap_terms(network, odS, demands, y)
    return WeSolution(network=network, odS=odS, demands=demands.copy(), y=y, x=x,
                      nu=nu, mu=mu, objective=_beckmann(network, odS, y),
                      iterations=iterations, relative_gap=relgap,
                      max_complementarity=maxcomp)


def kkt_residual(network: RoadNetwork, odS: OdStructure, demands: np.ndarray,
                 we: WeSolution) -> KktResidual:
    """Evaluate the three optimality blocks at the solution's stored multipliers.

    The road-cost multiplier block is lambda_e = c_e(x_e) by construction, so
    the informative residuals are path stationarity (cost - nu - mu),
    complementary slackness (mu * y) and flow-conservation feasibility.
    """
    demands = np.asarray(demands, dtype=float)
    y = we.y
    costs = all_path_costs(network, odS, odS.incidence @ y)
    stationarity = float(np.max(np.abs(costs - odS.expand(we.nu) - we.mu))) if y.size else 0.0
    complementarity = float(np.max(np.abs(we.mu * y))) if y.size else 0.0
    per_od = np.array([y[odS.path_slice(j)].sum() - demands[j] for j in range(len(odS.od_pairs))])
    feasibility = max(float(np.max(np.abs(per_od))), float(max(0.0, -y.min())) if y.size else 0.0)
    return KktResidual(stationarity, complementarity, feasibility)


# ---------------------------------------------------------------------------
# per-user recommendations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class User:
    uid: str
    od: int
    genuine: bool = True


def build_roster(odS: OdStructure, demands: np.ndarray, genuine: bool = True,
                 prefix: str = "") -> list[User]:
    """One unit-demand user per vehicle; demands must be (near-)integral."""
    roster = []
    for j, od in enumerate(odS.od_pairs):
        d = float(demands[j])
        n = int(round(d))
        if abs(d - n) > 1e-9:
            raise DomainError(f"OD {od.oid!r}: demand {d} is not integral, cannot build a user roster")
        roster.extend(User(f"{prefix}{od.oid}#{i + 1}", j, genuine) for i in range(n))
    return roster


class Recommendation:
    """Per-user mixed strategies over their OD's path set, with induced flow views."""

    def __init__(self, network: RoadNetwork, odS: OdStructure, roster, probs):
        self.network = network
        self.odS = odS
        self.roster: tuple[User, ...] = tuple(roster)
        if len(probs) != len(self.roster):
            raise DomainError("probability list does not match roster")
        cleaned = []
        for u, p in zip(self.roster, probs):
            p = np.asarray(p, dtype=float)
            if p.shape != (int(odS.counts[u.od]),):
                raise DomainError(f"user {u.uid!r}: strategy has wrong length")
            if np.any(p < -1e-9) or abs(p.sum() - 1.0) > 1e-9:
                raise DomainError(f"user {u.uid!r}: strategy is not a probability vector")
            p = np.maximum(p, 0.0)
            p = p / p.sum()
            p.flags.writeable = False
            cleaned.append(p)
        self.probs: tuple[np.ndarray, ...] = tuple(cleaned)

    def path_flows(self, genuine_only: bool = False) -> np.ndarray:
        y = np.zeros(self.odS.n_paths)
        for u, p in zip(self.roster, self.probs):
            if genuine_only and not u.genuine:
                continue
            y[self.odS.path_slice(u.od)] += p
        return y

    def road_loads(self, genuine_only: bool = False) -> np.ndarray:
        return self.odS.incidence @ self.path_flows(genuine_only)

    def user_path_costs(self, u: int, x: np.ndarray | None = None) -> np.ndarray:
        if x is None:
            x = self.road_loads()
        costs = self.network.edge_costs(x)
        sl = self.odS.path_slice(self.roster[u].od)
        return self.odS.incidence[:, sl].T @ costs


def we_to_ue(we: WeSolution, demands: np.ndarray, roster) -> Recommendation:
    """Convert WE path flows into identical per-user mixed strategies y_hat / d."""
    demands = np.asarray(demands, dtype=float)
    probs = []
    for u in roster:
        d = demands[u.od]
        if d <= 0:
            raise DomainError(f"user {u.uid!r} registered on OD with zero demand")
        probs.append(we.y[we.odS.path_slice(u.od)] / d)
    return Recommendation(we.network, we.odS, roster, probs)


def expected_user_cost(rec: Recommendation, u: int, x: np.ndarray | None = None) -> float:
    """Probability-weighted path cost for user u at the profile's induced loads."""
    return float(rec.probs[u] @ rec.user_path_costs(u, x))


def solve_ue_fixed_point(network: RoadNetwork, odS: OdStructure, roster,
                         cfg: SolverConfig | None = None,
                         p_init: list[np.ndarray] | None = None) -> Recommendation:
    """Iterate p <- proj(p - rho * path costs) per user until it is a fixed point.

    Users of one OD pair share the same gradient, so the iteration is run on
    per-OD (users x paths) blocks. Stops when the projected-step residual and
    the best-response deviation gain are both below tolerance.
    """
    cfg = cfg or SolverConfig()
    roster = list(roster)
    n_od = len(odS.od_pairs)
    members: list[list[int]] = [[] for _ in range(n_od)]
    for idx, u in enumerate(roster):
        members[u.od].append(idx)

    blocks = []
    for j in range(n_od):
        k = int(odS.counts[j])
        if p_init is not None:
            block = np.stack([np.asarray(p_init[i], dtype=float) for i in members[j]]) \
                if members[j] else np.zeros((0, k))
        else:
            block = np.full((len(members[j]), k), 1.0 / k)
        blocks.append(block)

    A = odS.incidence
    residual = np.inf
    for _ in range(cfg.max_iter):
        y = np.zeros(odS.n_paths)
        for j in range(n_od):
            if blocks[j].size:
                y[odS.path_slice(j)] = blocks[j].sum(axis=0)
        costs = all_path_costs(network, odS, A @ y)
        residual = 0.0
        gap = 0.0
        new_blocks = []
        for j in range(n_od):
            block = blocks[j]
            if not block.size:
                new_blocks.append(block)
                continue
            c = costs[odS.path_slice(j)]
            nxt = _project_rows(block - cfg.rho * c)
            residual = max(residual, float(np.max(np.abs(nxt - block))))
            gap = max(gap, float(np.max(block @ c) - c.min()))
            new_blocks.append(nxt)
        if residual <= cfg.tol and gap <= DEVIATION_TOL:
            break
        blocks = new_blocks
    else:
        raise ConvergenceError("projected-gradient recommendation solver did not converge", residual)

    probs: list[np.ndarray] = [None] * len(roster)  # type: ignore[list-item]
    for j in range(n_od):
        for row, idx in enumerate(members[j]):
            probs[idx] = blocks[j][row]
    return Recommendation(network, odS, roster, probs)


@dataclass
class VerifyResult:
    passed: bool
    worst_gain: float
    worst_uid: str = ""


def verify_ue(rec: Recommendation, deviation_samples: int = 20, seed: int = 0,
              tol: float = DEVIATION_TOL) -> VerifyResult:
    """No-deviation audit: pure-path and sampled mixed deviations per user.

    Deviations are priced at the profile's current loads (the deviating user
    is marginal). Single-path users pass vacuously.
    """
    rng = np.random.default_rng(seed)
    x = rec.road_loads()
    worst = -np.inf
    worst_uid = ""
    for u, user in enumerate(rec.roster):
        c = rec.user_path_costs(u, x)
        f_u = float(rec.probs[u] @ c)
        gain = f_u - float(c.min())
        for _ in range(deviation_samples if c.size > 1 else 0):
            q = rng.dirichlet(np.ones(c.size))
            gain = max(gain, f_u - float(q @ c))
        if gain > worst:
            worst, worst_uid = gain, user.uid
    if worst == -np.inf:
        worst = 0.0
    return VerifyResult(worst <= tol, worst, worst_uid)
