"""Communication graphs and doubly stochastic mixing matrices."""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix, second_singular_value

__all__ = [
    "NetworkError",
    "Topology",
    "WeightMatrix",
    "TOPOLOGY_KINDS",
    "build_topology",
    "metropolis_weights",
    "lazy_weights",
    "validate_assumption3",
    "sigma_pair",
    "write_edge_list",
    "read_edge_list",
]

DS_TOL = 1e-12
TOPOLOGY_KINDS = ("ring", "path", "star", "complete", "erdos_renyi")


class NetworkError(ValueError):
    pass


def _components(n, edges):
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = [False] * n
    count = 0
    for root in range(n):
        if seen[root]:
            continue
        count += 1
        seen[root] = True
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
    return count


def is_connected(n, edges):
    """Breadth-first reachability from every unvisited node."""
    return n <= 1 or _components(n, edges) == 1


@dataclass(frozen=True)
class Topology:
    """Undirected simple graph on nodes ``0..n-1``.

    Edges are stored as sorted pairs ``(i, j)`` with ``i < j``.
    """

    node_count: int
    edges: frozenset
    kind: str = "custom"

    def __post_init__(self):
        if self.node_count < 1:
            raise NetworkError("node_count must be >= 1")
        norm = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise NetworkError(f"self-loop ({i}, {j}) not allowed")
            if not (0 <= i < self.node_count and 0 <= j < self.node_count):
                raise NetworkError(f"edge ({i}, {j}) out of range")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(norm))
        if not is_connected(self.node_count, self.edges):
            raise NetworkError(f"{self.kind} topology on {self.node_count} nodes is not connected")

    def degrees(self):
        deg = np.zeros(self.node_count, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def adjacency(self):
        a = np.zeros((self.node_count, self.node_count), dtype=bool)
        for i, j in self.edges:
            a[i, j] = a[j, i] = True
        return a

    def sorted_edges(self):
        return sorted(self.edges)


def build_topology(kind, n, edge_prob=None, seed=0, max_attempts=1000):
    """Build a connected topology of a standard family.

    ``erdos_renyi`` graphs are resampled from a seeded stream until connected.
    """
    if n < 1:
        raise NetworkError("n must be >= 1")
    if kind not in TOPOLOGY_KINDS:
        raise NetworkError(f"unknown topology kind {kind!r}; expected one of {TOPOLOGY_KINDS}")
    if kind == "erdos_renyi":
        if edge_prob is None or not 0.0 < edge_prob <= 1.0:
            raise NetworkError("erdos_renyi needs edge_prob in (0, 1]")
    elif edge_prob is not None:
        raise NetworkError(f"edge_prob only applies to erdos_renyi, not {kind}")

    if kind == "ring":
        if n == 2:
            edges = {(0, 1)}
        else:
            edges = {(i, (i + 1) % n) for i in range(n)} if n > 2 else set()
    elif kind == "path":
        edges = {(i, i + 1) for i in range(n - 1)}
    elif kind == "star":
        edges = {(0, i) for i in range(1, n)}
    elif kind == "complete":
        edges = {(i, j) for i in range(n) for j in range(i + 1, n)}
    else:
        rng = np.random.default_rng(seed)
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        for _ in range(max_attempts):
            keep = rng.random(len(pairs)) < edge_prob
            edges = {p for p, k in zip(pairs, keep) if k}
            if is_connected(n, edges):
                break
        else:
            raise NetworkError(
                f"no connected erdos_renyi({n}, {edge_prob}) sample in {max_attempts} attempts"
            )
    return Topology(n, frozenset(edges), kind)


@dataclass(frozen=True)
class WeightMatrix:
    """Mixing matrix tied to a topology, with its second singular value cached."""

    matrix: np.ndarray
    topology: Topology
    sigma2: float = field(default=None)

    def __post_init__(self):
        m = as_matrix(self.matrix, "weight matrix")
        n = self.topology.node_count
        if m.shape != (n, n):
            raise NetworkError(f"weight matrix shape {m.shape} does not match {n} nodes")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if self.sigma2 is None:
            object.__setattr__(self, "sigma2", second_singular_value(m))

    @property
    def n(self):
        return self.topology.node_count


def metropolis_weights(t):
    """Metropolis-Hastings weights ``1 / (1 + max(deg_i, deg_j))`` on edges."""
    deg = t.degrees()
    w = np.zeros((t.node_count, t.node_count))
    for i, j in t.edges:
        w[i, j] = w[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    w[np.diag_indices_from(w)] = 1.0 - w.sum(axis=1)
    return WeightMatrix(w, t)


def lazy_weights(t, laziness):
    """Slow down mixing: ``(1 - laziness) * metropolis + laziness * I``."""
    if not 0.0 <= laziness < 1.0:
        raise NetworkError(f"laziness must lie in [0, 1), got {laziness}")
    base = metropolis_weights(t)
    if laziness == 0.0:
        return base
    m = (1.0 - laziness) * base.matrix + laziness * np.eye(t.node_count)
    return WeightMatrix(m, t)


def validate_assumption3(wm):
    """Check the doubly stochastic / positive diagonal / connectivity conditions.

    Returns a dict mapping check name to ``{"ok": bool, "detail": ...}`` plus an
    overall ``"ok"`` flag. Nothing is raised; failures are report entries.
    """
    m = np.asarray(wm.matrix)
    t = wm.topology
    adj = t.adjacency()
    off = ~np.eye(t.node_count, dtype=bool)
    row_err = float(np.max(np.abs(m.sum(axis=1) - 1.0)))
    col_err = float(np.max(np.abs(m.sum(axis=0) - 1.0)))
    min_diag = float(np.min(np.diag(m)))
    support = (m > 0) & off
    # weights must be positive exactly on the edges and nonnegative elsewhere
    pattern_ok = bool(np.array_equal(support, adj) and np.all(m >= 0))
    sigma = wm.sigma2
    checks = {
        "row_sums": {"ok": row_err <= DS_TOL, "detail": row_err},
        "column_sums": {"ok": col_err <= DS_TOL, "detail": col_err},
        "positive_diagonal": {"ok": min_diag > 0, "detail": min_diag},
        "edge_pattern": {"ok": pattern_ok, "detail": int(np.sum(support != adj))},
        # a mixing matrix on a connected graph has sigma2 < 1
        "connectivity": {
            "ok": bool(is_connected(t.node_count, t.edges) and (t.node_count == 1 or sigma < 1.0 - 1e-12)),
            "detail": sigma,
        },
    }
    report = {"checks": checks, "sigma2": sigma}
    report["ok"] = all(c["ok"] for c in checks.values())
    return report


def sigma_pair(w, v):
    """Slower of the two mixing rates, ``max(sigma_W, sigma_V)``."""
    sigma = max(w.sigma2, v.sigma2)
    if not 0.0 <= sigma < 1.0:
        raise NetworkError(f"sigma = {sigma} is not in [0, 1); matrices do not mix")
    return sigma


def write_edge_list(t, path):
    with open(path, "w", encoding="utf-8") as fh:
        for i, j in t.sorted_edges():
            fh.write(f"{i} {j}\n")


def read_edge_list(path, node_count):
    edges = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            i, j = line.split()
            edges.add((int(i), int(j)))
    return Topology(node_count, frozenset(edges), "custom")
