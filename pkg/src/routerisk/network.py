"""Road network model: directed graph, per-road cost functions, OD path sets, demand.

Everything in this module is immutable after construction, so networks can be
shared freely between parallel scenario runs. Loads and demands are continuous;
rounding to whole vehicles only happens on attacker outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class NetworkFormatError(ValueError):
    """A network/scenario document is malformed or violates a model invariant."""


class DomainError(ValueError):
    """A numeric argument lies outside its valid domain."""


# ---------------------------------------------------------------------------
# cost models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BprCost:
    """Volume-delay curve t*(1 + alpha*(x/k)^beta): free-flow minutes t, capacity k."""

    t: float
    k: float
    alpha: float = 0.4
    beta: float = 2.0

    def __post_init__(self):
        if self.k <= 0:
            raise NetworkFormatError(f"nonpositive capacity k={self.k}")
        if self.t < 0:
            raise NetworkFormatError(f"negative free-flow time t={self.t}")
        if self.alpha < 0 or self.beta < 0:
            raise NetworkFormatError("BPR alpha and beta must be nonnegative")

    def __call__(self, load: float) -> float:
        if load < 0:
            raise DomainError(f"negative load {load}")
        return self.t * (1.0 + self.alpha * (load / self.k) ** self.beta)


@dataclass(frozen=True)
class AffineCost:
    """Linear delay a + b*load, minutes."""

    a: float
    b: float

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise NetworkFormatError("affine cost coefficients must be nonnegative")

    def __call__(self, load: float) -> float:
        if load < 0:
            raise DomainError(f"negative load {load}")
        return self.a + self.b * load


CostModel = BprCost | AffineCost


def edge_cost(model: CostModel, load: float) -> float:
    """Delay in minutes on a single road carrying `load` vehicles."""
    return model(load)


@dataclass(frozen=True)
class Road:
    rid: str
    tail: str
    head: str
    cost: CostModel


class RoadNetwork:
    """Directed road graph with vectorised cost evaluation.

    Cost parameters are unpacked into parallel arrays so solvers can evaluate
    all edge costs, derivatives and Beckmann integrals in one numpy pass.
    """

    def __init__(self, nodes, roads):
        self.nodes: tuple[str, ...] = tuple(nodes)
        self.roads: tuple[Road, ...] = tuple(roads)
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise NetworkFormatError("duplicate node identifiers")
        self.road_index: dict[str, int] = {}
        for i, r in enumerate(self.roads):
            if r.rid in self.road_index:
                raise NetworkFormatError(f"duplicate road id {r.rid!r}")
            if r.tail not in node_set:
                raise NetworkFormatError(f"road {r.rid!r}: unknown node reference {r.tail!r}")
            if r.head not in node_set:
                raise NetworkFormatError(f"road {r.rid!r}: unknown node reference {r.head!r}")
            self.road_index[r.rid] = i

        n = len(self.roads)
        self._is_bpr = np.zeros(n, dtype=bool)
        # placeholder BPR params (t=0, k=1) on affine rows evaluate to 0
        self._t = np.zeros(n)
        self._k = np.ones(n)
        self._alpha = np.zeros(n)
        self._beta = np.ones(n)
        self._a = np.zeros(n)
        self._b = np.zeros(n)
        for i, r in enumerate(self.roads):
            if isinstance(r.cost, BprCost):
                self._is_bpr[i] = True
                self._t[i] = r.cost.t
                self._k[i] = r.cost.k
                self._alpha[i] = r.cost.alpha
                self._beta[i] = r.cost.beta
            else:
                self._a[i] = r.cost.a
                self._b[i] = r.cost.b
        for arr in (self._is_bpr, self._t, self._k, self._alpha, self._beta, self._a, self._b):
            arr.flags.writeable = False

    @property
    def n_roads(self) -> int:
        return len(self.roads)

    def edge_costs(self, x: np.ndarray) -> np.ndarray:
        """Vector of c_e(x_e) over all roads."""
        x = np.asarray(x, dtype=float)
        if np.any(x < -1e-12):
            raise DomainError("negative load in cost evaluation")
        x = np.maximum(x, 0.0)
        bpr = self._t * (1.0 + self._alpha * (x / self._k) ** self._beta)
        aff = self._a + self._b * x
        return np.where(self._is_bpr, bpr, aff)

    def edge_cost_derivs(self, x: np.ndarray) -> np.ndarray:
        """Vector of dc_e/dx at x. For BPR with beta<1 the derivative at x=0 is taken as 0."""
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        ratio = x / self._k
        with np.errstate(divide="ignore", invalid="ignore"):
            pw = np.where(ratio > 0.0, ratio ** (self._beta - 1.0), np.where(self._beta == 1.0, 1.0, 0.0))
        bpr = self._t * self._alpha * self._beta / self._k * pw
        return np.where(self._is_bpr, bpr, self._b)

    def edge_cost_integrals(self, x: np.ndarray) -> np.ndarray:
        """Vector of int_0^{x_e} c_e(z) dz (Beckmann terms)."""
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        bpr = self._t * x + self._t * self._alpha * self._k / (self._beta + 1.0) * (x / self._k) ** (self._beta + 1.0)
        aff = self._a * x + 0.5 * self._b * x * x
        return np.where(self._is_bpr, bpr, aff)

    def fingerprint(self) -> str:
        parts = [",".join(self.nodes)]
        for r in self.roads:
            parts.append(f"{r.rid}|{r.tail}|{r.head}|{r.cost!r}")
        import hashlib

        return hashlib.sha256(";".join(parts).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# OD structure and demand
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OdPair:
    oid: str
    origin: str
    destination: str
    paths: tuple[tuple[int, ...], ...]  # edge indices, file order (path 1 first)


class OdStructure:
    """Explicit per-OD path sets plus the road x path incidence matrix.

    Paths keep their document order; the i-th path of an OD pair is the one
    labelled "path i+1" in files and reports.
    """

    def __init__(self, network: RoadNetwork, od_pairs):
        self.od_pairs: tuple[OdPair, ...] = tuple(od_pairs)
        self.od_index: dict[str, int] = {}
        counts = []
        for j, od in enumerate(self.od_pairs):
            if od.oid in self.od_index:
                raise NetworkFormatError(f"duplicate OD id {od.oid!r}")
            self.od_index[od.oid] = j
            if not od.paths:
                raise NetworkFormatError(f"OD {od.oid!r}: empty path set")
            for p, path in enumerate(od.paths):
                self._validate_path(network, od, p, path)
            counts.append(len(od.paths))
        self.counts = np.array(counts, dtype=int)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)])
        self.n_paths = int(self.offsets[-1])
        incidence = np.zeros((network.n_roads, self.n_paths))
        for j, od in enumerate(self.od_pairs):
            for p, path in enumerate(od.paths):
                for e in path:
                    incidence[e, self.offsets[j] + p] = 1.0
        incidence.flags.writeable = False
        self.incidence = incidence
        self.counts.flags.writeable = False
        self.offsets.flags.writeable = False

    @staticmethod
    def _validate_path(network: RoadNetwork, od: OdPair, p: int, path) -> None:
        label = f"OD {od.oid!r} path {p + 1}"
        if not path:
            raise NetworkFormatError(f"{label}: empty edge sequence")
        roads = [network.roads[e] for e in path]
        if roads[0].tail != od.origin:
            raise NetworkFormatError(f"{label}: does not start at origin {od.origin!r}")
        if roads[-1].head != od.destination:
            raise NetworkFormatError(f"{label}: does not end at destination {od.destination!r}")
        for a, b in zip(roads, roads[1:]):
            if a.head != b.tail:
                raise NetworkFormatError(f"{label}: not connected at {a.rid!r} -> {b.rid!r}")
        visited = [roads[0].tail] + [r.head for r in roads]
        if len(set(visited)) != len(visited):
            raise NetworkFormatError(f"{label}: contains a loop")

    def path_slice(self, j: int) -> slice:
        return slice(int(self.offsets[j]), int(self.offsets[j + 1]))

    def od_of_path(self) -> np.ndarray:
        """OD index of every flat path index."""
        return np.repeat(np.arange(len(self.od_pairs)), self.counts)

    def expand(self, per_od: np.ndarray) -> np.ndarray:
        """Broadcast a per-OD vector onto the flat path axis."""
        return np.repeat(np.asarray(per_od, dtype=float), self.counts)


@dataclass(frozen=True)
class DemandProfile:
    """Genuine and fabricated per-OD demand; totals follow the genuine side only."""

    genuine: np.ndarray
    fake: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.genuine, dtype=float)
        f = np.asarray(self.fake, dtype=float)
        if g.shape != f.shape:
            raise DomainError("genuine/fake demand dimension mismatch")
        if np.any(g < 0) or np.any(f < 0):
            raise DomainError("demand entries must be nonnegative")
        g.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "genuine", g)
        object.__setattr__(self, "fake", f)

    @property
    def d_total(self) -> float:
        return float(self.genuine.sum())

    @property
    def perceived(self) -> np.ndarray:
        return self.genuine + self.fake

    def with_fake(self, fake: np.ndarray) -> "DemandProfile":
        return DemandProfile(self.genuine, np.asarray(fake, dtype=float))


# ---------------------------------------------------------------------------
# document parsing
# ---------------------------------------------------------------------------

def _check_keys(obj: dict, where: str, required: tuple, optional: tuple = ()) -> None:
    unknown = set(obj) - set(required) - set(optional)
    if unknown:
        raise NetworkFormatError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(obj)
    if missing:
        raise NetworkFormatError(f"{where}: missing keys {sorted(missing)}")


def _parse_cost(spec: dict, where: str) -> CostModel:
    if not isinstance(spec, dict) or "type" not in spec:
        raise NetworkFormatError(f"{where}: cost must be an object with a 'type'")
    kind = spec["type"]
    if kind == "bpr":
        _check_keys(spec, where, ("type", "t", "k"), ("alpha", "beta"))
        return BprCost(float(spec["t"]), float(spec["k"]),
                       float(spec.get("alpha", 0.4)), float(spec.get("beta", 2.0)))
    if kind == "affine":
        _check_keys(spec, where, ("type", "a", "b"))
        return AffineCost(float(spec["a"]), float(spec["b"]))
    raise NetworkFormatError(f"{where}: unknown cost type {kind!r}")


def parse_network(doc: dict) -> tuple[RoadNetwork, OdStructure, DemandProfile]:
    """Build a validated model from an already-decoded network document."""
    if not isinstance(doc, dict):
        raise NetworkFormatError("network document must be a JSON object")
    _check_keys(doc, "network document", ("nodes", "edges", "od_pairs"))

    nodes = doc["nodes"]
    if not isinstance(nodes, list) or not all(isinstance(n, str) for n in nodes):
        raise NetworkFormatError("'nodes' must be a list of string ids")

    roads = []
    for e in doc["edges"]:
        _check_keys(e, f"edge {e.get('id', '?')!r}", ("id", "tail", "head", "cost"))
        roads.append(Road(str(e["id"]), str(e["tail"]), str(e["head"]),
                          _parse_cost(e["cost"], f"edge {e['id']!r}")))
    network = RoadNetwork(nodes, roads)

    od_pairs = []
    demands = []
    for o in doc["od_pairs"]:
        _check_keys(o, f"od_pair {o.get('id', '?')!r}", ("id", "origin", "destination", "demand", "paths"))
        oid = str(o["id"])
        demand = float(o["demand"])
        if demand < 0:
            raise NetworkFormatError(f"od_pair {oid!r}: negative demand")
        paths = []
        for path in o["paths"]:
            edges = []
            for rid in path:
                if rid not in network.road_index:
                    raise NetworkFormatError(f"od_pair {oid!r}: unknown edge reference {rid!r}")
                edges.append(network.road_index[rid])
            paths.append(tuple(edges))
        od_pairs.append(OdPair(oid, str(o["origin"]), str(o["destination"]), tuple(paths)))
        demands.append(demand)
    odS = OdStructure(network, od_pairs)
    profile = DemandProfile(np.array(demands, dtype=float), np.zeros(len(demands)))
    return network, odS, profile


def load_network(path: str | Path) -> tuple[RoadNetwork, OdStructure, DemandProfile]:
    """Load and validate a network document (JSON) from disk."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: invalid JSON ({exc})") from exc
    return parse_network(doc)


# ---------------------------------------------------------------------------
# flow algebra
# ---------------------------------------------------------------------------

def road_loads(y: np.ndarray, odS: OdStructure) -> np.ndarray:
    """Aggregate a flat path-flow vector into per-road loads through the incidence matrix."""
    y = np.asarray(y, dtype=float)
    if y.shape != (odS.n_paths,):
        raise DomainError(f"path-flow vector has shape {y.shape}, expected ({odS.n_paths},)")
    if np.any(y < -1e-12):
        raise DomainError("negative path flow")
    return odS.incidence @ y


def path_cost(network: RoadNetwork, odS: OdStructure, od: int, i: int, x: np.ndarray) -> float:
    """Travel time of path i of OD pair `od` at road loads x."""
    x = np.asarray(x, dtype=float)
    if x.shape != (network.n_roads,):
        raise DomainError("road-load vector has wrong dimension")
    costs = network.edge_costs(x)
    return float(sum(costs[e] for e in odS.od_pairs[od].paths[i]))


def all_path_costs(network: RoadNetwork, odS: OdStructure, x: np.ndarray) -> np.ndarray:
    """Vector of path travel times over the flat path axis."""
    return odS.incidence.T @ network.edge_costs(x)
