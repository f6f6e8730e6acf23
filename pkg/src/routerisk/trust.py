"""Trust-constrained recommendations.

Each user carries a prior strategy (the recommendation they followed under
normal conditions) and a trust score T: they only accept a new strategy whose
KL divergence from the prior stays within T. The recommender therefore solves,
per user, min F_u subject to KL(p_u || prior_u) <= T_u. When the constraint
binds, the minimiser has the exponential-tilt closed form

    p*_i  proportional to  prior_i * exp(-C'_i / lambda - 1),

where C'_i is the path cost including the user's own marginal congestion
contribution and lambda > 0 is the constraint multiplier, found by maximising
the one-dimensional concave dual (equivalently: driving KL(p*(lambda)) to T,
since KL is decreasing in lambda).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .equilibrium import ConvergenceError, Recommendation, SolverConfig, solve_ue_fixed_point
from .network import DomainError, NetworkFormatError, OdStructure, RoadNetwork

#: acceptable |KL - T| at a binding solution, and the profile-change threshold
KL_TOL = 1e-6
SWEEP_TOL = 1e-6
#: zero entries of a prior are smoothed away with this mixture weight
PRIOR_SMOOTHING = 1e-6


def kl_divergence(p: np.ndarray, prior: np.ndarray) -> float:
    """KL divergence sum p_i log(p_i / prior_i) in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    prior = np.asarray(prior, dtype=float)
    if p.shape != prior.shape:
        raise DomainError("KL divergence arguments have different lengths")
    if np.any((p > 0) & (prior <= 0)):
        raise DomainError("KL divergence undefined: prior has zero mass on a used path")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / prior[mask])))


def smooth_prior(prior: np.ndarray, delta: float = PRIOR_SMOOTHING) -> np.ndarray:
    """Mix a prior with the uniform strategy so every entry is usably positive.

    Fires on entries below delta/k as well as exact zeros: solver dust on an
    unused path would otherwise leave the KL landscape effectively unbounded.
    """
    prior = np.asarray(prior, dtype=float)
    if np.all(prior > delta / prior.size):
        return prior
    return (1.0 - delta) * prior + delta / prior.size


def tc_perturbation(p: np.ndarray, prior: np.ndarray, eps: np.ndarray) -> float:
    """First-order KL change sum eps_i (log(p_i/prior_i) + 1) for a zero-sum perturbation."""
    p = np.asarray(p, dtype=float)
    prior = np.asarray(prior, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if abs(eps.sum()) > 1e-9:
        raise DomainError("perturbation must sum to zero to stay on the simplex")
    return float(np.sum(eps * (np.log(p / prior) + 1.0)))


def sensitivity_bound_check(v0: float, v_eta: float, lam_star: float, eta: float,
                            tol: float = 1e-6) -> bool:
    """Dual lower bound on the optimal cost after a trust-score change of eta."""
    return v_eta >= v0 - lam_star * eta - tol


def modified_path_costs(rec: Recommendation, u: int, x: np.ndarray | None = None) -> np.ndarray:
    """Path costs plus the user's own marginal congestion term.

    Per edge the term is x^u_e * dc_e/dx with x^u_e the user's expected load
    on the edge; for a BPR road this is beta * x^u * (alpha/k) * (x/k)^(beta-1)
    scaled by the free-flow time, for an affine road simply b * x^u.
    """
    odS = rec.odS
    if x is None:
        x = rec.road_loads()
    sl = odS.path_slice(rec.roster[u].od)
    A_u = odS.incidence[:, sl]
    x_u = A_u @ rec.probs[u]
    marginal = rec.network.edge_costs(x) + x_u * rec.network.edge_cost_derivs(x)
    return A_u.T @ marginal


def trusted_step(cprime: np.ndarray, prior: np.ndarray, lam: float) -> np.ndarray:
    """Exponential-tilt update prior_i * exp(-C'_i/lambda - 1), normalised.

    Computed through a log-sum-exp shift so large cost/lambda ratios cannot
    underflow the numerator.
    """
    if lam <= 0:
        raise DomainError("trusted_step requires lambda > 0; use the non-binding branch")
    cprime = np.asarray(cprime, dtype=float)
    prior = np.asarray(prior, dtype=float)
    if np.any(prior <= 0):
        raise DomainError("trusted_step requires a strictly positive prior")
    z = np.log(prior) - cprime / lam - 1.0
    z -= z.max()
    w = np.exp(z)
    return w / w.sum()


# ---------------------------------------------------------------------------
# per-user constrained subproblem
# ---------------------------------------------------------------------------

class _UserProblem:
    """min_p F_u(p) + lam * KL(p || prior) over one user's simplex.

    x_ext holds the loads produced by everyone else; the user's own
    contribution A_u @ p is added on evaluation.
    """

    def __init__(self, network: RoadNetwork, A_u: np.ndarray, x_ext: np.ndarray,
                 prior: np.ndarray):
        self.network = network
        self.A_u = A_u
        self.x_ext = x_ext
        self.prior = prior

    def cost_vector(self, p: np.ndarray) -> np.ndarray:
        x = self.x_ext + self.A_u @ p
        return self.A_u.T @ self.network.edge_costs(x)

    def cprime(self, p: np.ndarray) -> np.ndarray:
        x_u = self.A_u @ p
        x = self.x_ext + x_u
        marginal = self.network.edge_costs(x) + x_u * self.network.edge_cost_derivs(x)
        return self.A_u.T @ marginal

    def f_value(self, p: np.ndarray) -> float:
        return float(p @ self.cost_vector(p))

    def phi(self, p: np.ndarray, lam: float) -> float:
        return self.f_value(p) + lam * kl_divergence(p, self.prior)

    def _stationarity(self, p: np.ndarray, lam: float) -> np.ndarray:
        """Reduced first-order residual against the last path (zero at the tilt fixed point)."""
        g = self.cprime(p) + lam * (np.log(np.maximum(p, 1e-300) / self.prior) + 1.0)
        return g[:-1] - g[-1]

    def minimize(self, lam: float, p0: np.ndarray, tol: float = 1e-12,
                 max_iter: int = 2_000, strict: bool = True) -> np.ndarray:
        """Solve the penalised subproblem to a fixed point of the tilt map.

        Damped mirror-descent warmup (a full step is the tilt map itself)
        followed by Newton on the reduced stationarity residual in softmax
        coordinates. The warmup damping is sized from the congestion
        curvature; Newton removes the noise floor the pure map hits when its
        local spectral radius exceeds one.
        """
        p = np.maximum(p0, 1e-12)
        p = p / p.sum()
        if p.size == 1:
            return np.array([1.0])
        x = self.x_ext + self.A_u @ p
        curv = self.A_u.T @ (self.network.edge_cost_derivs(x)[:, None] * self.A_u)
        L = 2.0 * float(np.max(curv)) + 1e-12
        omega = min(1.0, lam / (lam + L))
        phi = self.phi(p, lam)
        # short damped warmup; Newton below does the real convergence work
        for _ in range(min(max_iter, 80)):
            q = trusted_step(self.cprime(p), self.prior, lam)
            if float(np.max(np.abs(q - p))) <= 1e-3:
                break
            logp = np.log(p)
            logq = np.log(np.maximum(q, 1e-300))
            moved = False
            while True:
                z = (1.0 - omega) * logp + omega * logq
                z -= z.max()
                p_new = np.exp(z)
                p_new /= p_new.sum()
                phi_new = self.phi(p_new, lam)
                if phi_new <= phi + 1e-13 * (1.0 + abs(phi)):
                    moved = True
                    break
                if omega <= 1e-7:
                    break
                omega *= 0.5
            if not moved or float(np.max(np.abs(p_new - p))) <= 1e-15:
                break
            p, phi = p_new, phi_new
            omega = min(1.0, omega * 1.5)

        # Newton polish on theta = log(p_i / p_last)
        theta = np.log(p[:-1] / p[-1])

        def unpack(th: np.ndarray) -> np.ndarray:
            z = np.concatenate([np.clip(th, -600.0, 600.0), [0.0]])
            z -= z.max()
            w = np.maximum(np.exp(z), 1e-300)
            return w / w.sum()

        r = self._stationarity(p, lam)
        scale = max(lam, 1.0)
        for _ in range(60):
            if float(np.max(np.abs(r))) <= 1e-13 * scale:
                break
            jac = np.empty((r.size, r.size))
            h = 1e-7
            for j in range(r.size):
                th = theta.copy()
                th[j] += h
                jac[:, j] = (self._stationarity(unpack(th), lam) - r) / h
            try:
                step = np.linalg.solve(jac, -r)
            except np.linalg.LinAlgError:
                break
            t = 1.0
            norm0 = float(np.max(np.abs(r)))
            for _ls in range(40):
                th_new = theta + t * step
                p_new = unpack(th_new)
                r_new = self._stationarity(p_new, lam)
                if float(np.max(np.abs(r_new))) < norm0:
                    theta, p, r = th_new, p_new, r_new
                    break
                t *= 0.5
            else:
                break

        residual = float(np.max(np.abs(trusted_step(self.cprime(p), self.prior, lam) - p)))
        eff_tol = max(tol, 5e-14 / max(lam, 1e-15))
        if residual > max(100.0 * eff_tol, 1e-7):
            raise ConvergenceError("trust inner solve did not reach its fixed point", residual)
        return p


@dataclass
class DualState:
    """Multiplier state of one user's trust constraint at the solution."""

    lam: float
    binding: bool
    kl: float
    dual_value: float
    mu_norm: float  # normalisation of the exponential tilt (0 flags over/underflow)


def user_optimal_value(rec: Recommendation, u: int, prior: np.ndarray,
                       trust_score: float) -> tuple[float, float]:
    """Solve one user's trust-constrained subproblem with everyone else frozen.

    Returns the optimal expected cost and the constraint multiplier (0 when
    the trust region does not bind).
    """
    odS = rec.odS
    sl = odS.path_slice(rec.roster[u].od)
    A_u = odS.incidence[:, sl]
    x_ext = rec.road_loads() - A_u @ rec.probs[u]
    prob = _UserProblem(rec.network, A_u, x_ext, smooth_prior(prior))
    if trust_score <= 0.0:
        return prob.f_value(prob.prior), math.inf
    q = _unconstrained_minimize(prob, rec.probs[u])
    if kl_divergence(q, prob.prior) <= trust_score:
        return prob.f_value(q), 0.0
    p, state = _solve_binding(prob, trust_score, rec.probs[u])
    return prob.f_value(p), state.lam


def dual_value(rec: Recommendation, u: int, prior: np.ndarray, lam: float,
               trust_score: float, p0: np.ndarray | None = None) -> float:
    """Evaluate the dual function G(lambda) = min_p F_u + lambda (KL - T)."""
    if lam < 0:
        raise DomainError("lambda must be nonnegative")
    odS = rec.odS
    sl = odS.path_slice(rec.roster[u].od)
    A_u = odS.incidence[:, sl]
    x_ext = rec.road_loads() - A_u @ rec.probs[u]
    prob = _UserProblem(rec.network, A_u, x_ext, smooth_prior(prior))
    start = rec.probs[u] if p0 is None else p0
    if lam == 0.0:
        p = _unconstrained_minimize(prob, start)
        return prob.f_value(p)
    p = prob.minimize(lam, start)
    return prob.f_value(p) + lam * (kl_divergence(p, prob.prior) - trust_score)


def _unconstrained_minimize(prob: _UserProblem, p0: np.ndarray) -> np.ndarray:
    """Projected gradient on F_u alone (the lambda -> 0 limit of the subproblem)."""
    from .equilibrium import project_simplex

    p = np.asarray(p0, dtype=float).copy()
    p = np.maximum(p, 0.0)
    p /= p.sum()
    eta = 1.0
    f = prob.f_value(p)
    for _ in range(20_000):
        g = prob.cprime(p)
        p_new = project_simplex(p - eta * g)
        step = p_new - p
        if float(step @ step) <= 1e-28:
            break
        f_new = prob.f_value(p_new)
        bt = 0
        while f_new > f - 1e-4 / eta * float(step @ step) and bt < 50:
            eta *= 0.5
            bt += 1
            p_new = project_simplex(p - eta * g)
            step = p_new - p
            f_new = prob.f_value(p_new)
        if float(np.max(np.abs(p_new - p))) <= 1e-13:
            p, f = p_new, f_new
            break
        p, f = p_new, f_new
        if bt == 0:
            eta *= 1.25
    return p


def _solve_binding(prob: _UserProblem, trust_score: float, p0: np.ndarray) -> tuple[np.ndarray, DualState]:
    """Bracket and bisect lambda on the monotone residual KL(p*(lambda)) - T.

    Bracketing probes run at a loose inner tolerance; once the multiplier is
    pinned the subproblem is re-solved tightly so the exponential-tilt closed
    form reproduces the returned strategy to high accuracy.
    """
    probe_tol = 1e-10
    lam_hi = 1.0
    p = prob.minimize(lam_hi, p0, tol=probe_tol)
    kl = kl_divergence(p, prob.prior)
    while kl > trust_score and lam_hi < 1e12:
        lam_hi *= 4.0
        p = prob.minimize(lam_hi, p, tol=probe_tol)
        kl = kl_divergence(p, prob.prior)
    if kl > trust_score:
        raise ConvergenceError("trust multiplier bracket failed on the high side", kl - trust_score)
    lam_lo = lam_hi
    p_lo = p
    while lam_lo > 1e-10:
        lam_lo *= 0.25
        p_lo = prob.minimize(lam_lo, p_lo, tol=probe_tol)
        if kl_divergence(p_lo, prob.prior) > trust_score:
            break
    else:
        # even a vanishing multiplier satisfies the constraint: not binding
        p = _unconstrained_minimize(prob, p_lo)
        state = DualState(lam=0.0, binding=False, kl=kl_divergence(p, prob.prior),
                          dual_value=prob.f_value(p), mu_norm=1.0)
        return p, state

    lam, p_mid, kl_mid = lam_hi, p, kl
    for _ in range(200):
        lam = math.sqrt(lam_lo * lam_hi)
        p_mid = prob.minimize(lam, p_mid, tol=probe_tol)
        kl_mid = kl_divergence(p_mid, prob.prior)
        if abs(kl_mid - trust_score) <= 0.5 * KL_TOL:
            break
        if kl_mid > trust_score:
            lam_lo = lam
        else:
            lam_hi = lam
    else:
        raise ConvergenceError("trust multiplier bisection did not close", abs(kl_mid - trust_score))

    p_mid = prob.minimize(lam, p_mid, tol=1e-13)
    kl_mid = kl_divergence(p_mid, prob.prior)
    cprime = prob.cprime(p_mid)
    mu_norm = float(np.sum(prob.prior * np.exp(np.clip(-cprime / lam - 1.0, -700, 700))))
    g_val = prob.f_value(p_mid) + lam * (kl_mid - trust_score)
    return p_mid, DualState(lam=lam, binding=True, kl=kl_mid, dual_value=g_val, mu_norm=mu_norm)


# ---------------------------------------------------------------------------
# trust profile documents
# ---------------------------------------------------------------------------

@dataclass
class TrustProfile:
    """Per-user trust scores, strictly positive priors and update probabilities."""

    scores: dict[str, float]
    priors: dict[str, np.ndarray]
    update_prob: dict[str, float] = field(default_factory=dict)

    def score(self, uid: str) -> float:
        return self.scores.get(uid, math.inf)

    def prior(self, uid: str, k: int) -> np.ndarray:
        if uid in self.priors:
            return self.priors[uid]
        return np.full(k, 1.0 / k)

    def pi(self, uid: str) -> float:
        return self.update_prob.get(uid, 0.5)


def load_trust_document(path: str | Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise NetworkFormatError("trust document must be a JSON object")
    allowed = {"default_trust", "pi", "od_groups", "users"}
    unknown = set(doc) - allowed
    if unknown:
        raise NetworkFormatError(f"trust document: unknown keys {sorted(unknown)}")
    return doc


def build_trust_profile(doc: dict, roster, odS: OdStructure,
                        baseline: Recommendation | None = None) -> TrustProfile:
    """Resolve a trust document against a roster.

    Priors default to the supplied no-attack recommendation; explicit priors
    in the document win. Entries can address single users or whole OD groups.
    Fabricated users (roster entries with genuine=False) trust anything.
    """
    def entry_fields(entry: dict, where: str) -> tuple[float | None, np.ndarray | None, float | None]:
        unknown = set(entry) - {"trust", "prior", "pi"}
        if unknown:
            raise NetworkFormatError(f"trust document {where}: unknown keys {sorted(unknown)}")
        t = entry.get("trust")
        if t is not None and float(t) < 0:
            raise NetworkFormatError(f"trust document {where}: negative trust score")
        prior = entry.get("prior")
        pi = entry.get("pi")
        if pi is not None and not (0.0 < float(pi) < 1.0):
            raise NetworkFormatError(f"trust document {where}: pi must lie strictly between 0 and 1")
        return (None if t is None else float(t),
                None if prior is None else np.asarray(prior, dtype=float),
                None if pi is None else float(pi))

    default_t = doc.get("default_trust")
    if default_t is not None and float(default_t) < 0:
        raise NetworkFormatError("trust document: negative default_trust")
    default_pi = float(doc.get("pi", 0.5))
    if not (0.0 < default_pi < 1.0):
        raise NetworkFormatError("trust document: pi must lie strictly between 0 and 1")

    groups = {}
    for oid, entry in (doc.get("od_groups") or {}).items():
        if oid not in odS.od_index:
            raise NetworkFormatError(f"trust document: unknown OD group {oid!r}")
        groups[oid] = entry_fields(entry, f"od_groups[{oid!r}]")
    users = {uid: entry_fields(entry, f"users[{uid!r}]")
             for uid, entry in (doc.get("users") or {}).items()}

    baseline_probs = {}
    if baseline is not None:
        baseline_probs = {u.uid: p for u, p in zip(baseline.roster, baseline.probs)}

    scores: dict[str, float] = {}
    priors: dict[str, np.ndarray] = {}
    update_prob: dict[str, float] = {}
    for u in roster:
        oid = odS.od_pairs[u.od].oid
        k = int(odS.counts[u.od])
        t, prior, pi = None, None, None
        for source in (groups.get(oid), users.get(u.uid)):
            if source is None:
                continue
            t = source[0] if source[0] is not None else t
            prior = source[1] if source[1] is not None else prior
            pi = source[2] if source[2] is not None else pi
        if not u.genuine:
            scores[u.uid] = math.inf
            priors[u.uid] = np.full(k, 1.0 / k)
            continue
        if t is None:
            t = math.inf if default_t is None else float(default_t)
        if prior is None:
            prior = baseline_probs.get(u.uid, np.full(k, 1.0 / k))
        prior = np.asarray(prior, dtype=float)
        if prior.shape != (k,) or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-6:
            raise NetworkFormatError(f"trust document: prior for {u.uid!r} is not a length-{k} probability vector")
        scores[u.uid] = t
        priors[u.uid] = smooth_prior(prior)
        update_prob[u.uid] = default_pi if pi is None else pi
    return TrustProfile(scores, priors, update_prob)


# ---------------------------------------------------------------------------
# the mechanism
# ---------------------------------------------------------------------------

def trust_mechanism(network: RoadNetwork, odS: OdStructure, roster,
                    trust: TrustProfile, cfg: SolverConfig | None = None,
                    init: Recommendation | None = None,
                    max_sweeps: int = 200) -> tuple[Recommendation, dict[str, DualState]]:
    """Trusted recommendation for the whole roster.

    Starts from the projected-gradient fixed point, then sweeps users in
    roster order: a user whose current strategy already satisfies their trust
    constraint keeps it; otherwise the constrained subproblem is solved with
    the multiplier found by dual bisection. Sweeps repeat until the joint
    profile moves less than SWEEP_TOL.
    """
    cfg = cfg or SolverConfig()
    rec = init if init is not None else solve_ue_fixed_point(network, odS, roster, cfg)
    roster = list(rec.roster)
    probs = [p.copy() for p in rec.probs]
    A = odS.incidence
    slices = [odS.path_slice(u.od) for u in roster]
    x = np.zeros(network.n_roads)
    for p, sl in zip(probs, slices):
        x += A[:, sl] @ p

    duals: dict[str, DualState] = {}
    for _sweep in range(max_sweeps):
        delta = 0.0
        for i, u in enumerate(roster):
            t_u = trust.score(u.uid)
            prior = smooth_prior(trust.prior(u.uid, probs[i].size))
            p_cur = probs[i]
            if t_u <= 0.0:
                p_new = prior.copy()
                duals[u.uid] = DualState(lam=math.inf, binding=True, kl=0.0,
                                         dual_value=float("nan"), mu_norm=1.0)
            elif kl_divergence(p_cur, prior) <= t_u:
                p_new = p_cur
                prob = _UserProblem(network, A[:, slices[i]], x - A[:, slices[i]] @ p_cur, prior)
                duals[u.uid] = DualState(lam=0.0, binding=False,
                                         kl=kl_divergence(p_cur, prior),
                                         dual_value=prob.f_value(p_cur), mu_norm=1.0)
            else:
                x_ext = x - A[:, slices[i]] @ p_cur
                prob = _UserProblem(network, A[:, slices[i]], x_ext, prior)
                p_new, duals[u.uid] = _solve_binding(prob, t_u, p_cur)
            if p_new is not p_cur:
                x += A[:, slices[i]] @ (p_new - p_cur)
                delta = max(delta, float(np.max(np.abs(p_new - p_cur))))
                probs[i] = p_new
        if delta < SWEEP_TOL:
            break
    else:
        raise ConvergenceError("trust mechanism sweeps did not converge", delta)

    return Recommendation(network, odS, roster, probs), duals


def random_update(rec_new: Recommendation, rec_old: Recommendation,
                  pi, seed: int = 0) -> Recommendation:
    """Each user keeps the old strategy with probability 1 - pi_u, seed-deterministic.

    `pi` is either a scalar or a mapping uid -> probability, each strictly
    inside (0, 1). Draws happen in roster order.
    """
    if tuple(u.uid for u in rec_new.roster) != tuple(u.uid for u in rec_old.roster):
        raise DomainError("random_update requires matching rosters")

    def pi_of(uid: str) -> float:
        value = pi.get(uid, 0.5) if isinstance(pi, dict) else float(pi)
        if not (0.0 < value < 1.0):
            raise DomainError(f"update probability for {uid!r} must lie strictly between 0 and 1")
        return value

    rng = np.random.default_rng(seed)
    probs = []
    for i, u in enumerate(rec_new.roster):
        take_new = rng.random() < pi_of(u.uid)
        probs.append(rec_new.probs[i] if take_new else rec_old.probs[i])
    return Recommendation(rec_new.network, rec_new.odS, rec_new.roster, probs)
