"""Communication topologies and the node-location metrics computed on them."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from meshprop.rng import derive_rng

KINDS = ("BA", "WS", "SB", "custom")


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    n: int
    edges: tuple[tuple[int, int], ...]
    kind: str = "custom"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise TopologyError(f"n must be >= 1, got {self.n}")
        if self.kind not in KINDS:
            raise TopologyError(f"unknown topology kind {self.kind!r}")
        canon = set()
        for u, v in self.edges:
            u, v = int(u), int(v)
            if u == v:
                raise TopologyError(f"self-loop on node {u}")
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise TopologyError(f"edge ({u}, {v}) outside node range 0..{self.n - 1}")
            e = (min(u, v), max(u, v))
            if e in canon:
                raise TopologyError(f"duplicate edge {e}")
            canon.add(e)
        object.__setattr__(self, "edges", tuple(sorted(canon)))

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return tuple(tuple(sorted(a)) for a in adj)

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.adjacency[i]

    def neighborhood(self, i: int) -> tuple[int, ...]:
        """Closed neighborhood: neighbors plus ``i`` itself, sorted."""
        return tuple(sorted(self.adjacency[i] + (i,)))

    @cached_property
    def metrics(self) -> NodeMetrics:
        return compute_metrics(self)

    @property
    def planted_communities(self) -> np.ndarray | None:
        if self.kind != "SB":
            return None
        sizes = self.params["sizes"]
        return np.repeat(np.arange(len(sizes)), sizes)

    def label(self) -> str:
        """Short filesystem-safe tag, e.g. ``BA_n33_p2``."""
        if self.kind == "SB":
            sizes = "-".join(str(s) for s in self.params["sizes"])
            return f"SB_{sizes}_pin{self.params['p_in']:g}_pout{self.params['p_out']:g}"
        parts = [self.kind] + [f"{k}{v:g}" if isinstance(v, float) else f"{k}{v}"
                               for k, v in self.params.items() if k != "source"]
        return "_".join(parts)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "kind": self.kind,
            "params": self.params,
            "seed": self.seed,
            "edges": [list(e) for e in self.edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> Topology:
        return cls(
            n=int(d["n"]),
            edges=tuple((int(u), int(v)) for u, v in d["edges"]),
            kind=d.get("kind", "custom"),
            params=dict(d.get("params", {})),
            seed=int(d.get("seed", 0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> Topology:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class NodeMetrics:
    degree: np.ndarray
    betweenness: np.ndarray
    community: np.ndarray
    modularity: float
    planted_modularity: float | None = None


def _check_seed(seed) -> int:
    return int(seed)


def generate_ba(n: int, p: int, seed: int) -> Topology:
    """Barabasi-Albert growth from ``p`` isolated seed nodes.

    Every attachment weight is ``degree + 1`` so the first arriving node,
    facing all-zero degrees, attaches to the ``p`` seed nodes uniformly.
    """
    if not (1 <= p < n):
        raise TopologyError(f"BA requires 1 <= p < n, got p={p}, n={n}")
    rng = derive_rng(_check_seed(seed), -1, -1, "topology:BA")
    deg = np.zeros(n, dtype=np.int64)
    edges = []
    for v in range(p, n):
        w = deg[:v] + 1.0
        targets = rng.choice(v, size=p, replace=False, p=w / w.sum())
        for u in sorted(int(t) for t in targets):
            edges.append((u, v))
            deg[u] += 1
        deg[v] += p
    return Topology(n, tuple(edges), "BA", {"n": n, "p": p}, int(seed))


def generate_ws(n: int, k: int, u: float, seed: int) -> Topology:
    """Watts-Strogatz ring lattice with per-edge rewiring probability ``u``."""
    if k % 2 or not (0 < k < n):
        raise TopologyError(f"WS requires even k with 0 < k < n, got k={k}, n={n}")
    if not (0.0 <= u <= 1.0):
        raise TopologyError(f"WS rewire probability must be in [0, 1], got {u}")
    rng = derive_rng(_check_seed(seed), -1, -1, "topology:WS")
    adj = [set() for _ in range(n)]
    for a in range(n):
        for j in range(1, k // 2 + 1):
            b = (a + j) % n
            adj[a].add(b)
            adj[b].add(a)
    for j in range(1, k // 2 + 1):
        for a in range(n):
            b = (a + j) % n
            if b not in adj[a] or rng.random() >= u:
                continue
            choices = [w for w in range(n) if w != a and w not in adj[a]]
            if not choices:
                continue
            w = choices[int(rng.integers(len(choices)))]
            adj[a].discard(b)
            adj[b].discard(a)
            adj[a].add(w)
            adj[w].add(a)
    edges = tuple((a, b) for a in range(n) for b in adj[a] if a < b)
    return Topology(n, edges, "WS", {"n": n, "k": k, "u": float(u)}, int(seed))


def generate_sb(sizes, p_matrix, seed: int) -> Topology:
    """Stochastic block model: each pair is an independent Bernoulli draw."""
    sizes = [int(s) for s in sizes]
    pm = np.asarray(p_matrix, dtype=float)
    c = len(sizes)
    if c == 0 or any(s < 1 for s in sizes):
        raise TopologyError("SB sizes must be a non-empty list of positive integers")
    if pm.shape != (c, c):
        raise TopologyError(f"SB p_matrix must be {c}x{c}, got shape {pm.shape}")
    if not np.array_equal(pm, pm.T):
        raise TopologyError("SB p_matrix must be symmetric")
    if np.any(pm < 0) or np.any(pm > 1):
        raise TopologyError("SB p_matrix entries must lie in [0, 1]")
    n = sum(sizes)
    block = np.repeat(np.arange(c), sizes)
    iu, ju = np.triu_indices(n, k=1)
    rng = derive_rng(_check_seed(seed), -1, -1, "topology:SB")
    draws = rng.random(iu.size)
    keep = draws < pm[block[iu], block[ju]]
    edges = tuple(zip(iu[keep].tolist(), ju[keep].tolist()))
    params = {"sizes": sizes, "p_matrix": pm.tolist()}
    off = pm[~np.eye(c, dtype=bool)]
    params["p_in"] = float(pm[0, 0])
    params["p_out"] = float(off[0]) if off.size else 0.0
    return Topology(n, edges, "SB", params, int(seed))


def generate(spec: dict, seed: int) -> Topology:
    """Build a topology from a config mapping such as ``{"kind": "BA", "n": 33, "p": 2}``."""
    kind = spec.get("kind")
    seed = spec.get("seed", seed)
    if kind == "BA":
        return generate_ba(int(spec["n"]), int(spec["p"]), seed)
    if kind == "WS":
        return generate_ws(int(spec["n"]), int(spec["k"]), float(spec["u"]), seed)
    if kind == "SB":
        sizes = spec["sizes"]
        if "p_matrix" in spec:
            pm = spec["p_matrix"]
        else:
            c = len(sizes)
            pm = [[spec["p_in"] if i == j else spec["p_out"] for j in range(c)] for i in range(c)]
        return generate_sb(sizes, pm, seed)
    if kind == "custom":
        if "path" in spec:
            return load_edge_list(spec["path"], n=spec.get("n"))
        return Topology(int(spec["n"]), tuple(tuple(e) for e in spec["edges"]), "custom", {}, int(seed))
    raise TopologyError(f"unknown topology kind {kind!r}")


def load_edge_list(path, n: int | None = None) -> Topology:
    """Read whitespace-separated ``u v`` lines (0-based); blank and ``#`` lines skipped."""
    edges = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise TopologyError(f"{path}:{lineno}: expected 'u v', got {line!r}")
        edges.append((int(parts[0]), int(parts[1])))
    top = max((max(e) for e in edges), default=-1) + 1
    return Topology(n if n is not None else max(top, 1), tuple(edges), "custom", {}, 0)


def degree(topology: Topology) -> np.ndarray:
    return np.array([len(a) for a in topology.adjacency], dtype=np.int64)


def betweenness(topology: Topology) -> np.ndarray:
    """Normalized shortest-path betweenness (Brandes accumulation)."""
    n = topology.n
    adj = topology.adjacency
    cb = np.zeros(n, dtype=float)
    if n <= 2:
        return cb
    for s in range(n):
        stack = []
        preds: list[list[int]] = [[] for _ in range(n)]
        sigma = [0] * n
        sigma[s] = 1
        dist = [-1] * n
        dist[s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in adj[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = [0.0] * n
        while stack:
            w = stack.pop()
            coeff = (1.0 + delta[w]) / sigma[w]
            for v in preds[w]:
                delta[v] += sigma[v] * coeff
            if w != s:
                cb[w] += delta[w]
    # each unordered pair was counted from both endpoints
    return cb / ((n - 1) * (n - 2))


def modularity(topology: Topology, labels) -> float:
    """Q = sum over communities of (internal edge fraction - endpoint fraction squared)."""
    m = len(topology.edges)
    if m == 0:
        return 0.0
    labels = np.asarray(labels)
    internal: dict[int, int] = {}
    ends: dict[int, int] = {}
    for u, v in topology.edges:
        cu, cv = int(labels[u]), int(labels[v])
        ends[cu] = ends.get(cu, 0) + 1
        ends[cv] = ends.get(cv, 0) + 1
        if cu == cv:
            internal[cu] = internal.get(cu, 0) + 1
    return float(sum(internal.get(c, 0) / m - (ends[c] / (2 * m)) ** 2 for c in ends))


def communities_and_modularity(topology: Topology) -> tuple[np.ndarray, float]:
    """Greedy (Clauset-Newman-Moore) community labels and their modularity.

    Community ids are assigned in order of each community's smallest node.
    """
    n = topology.n
    if not topology.edges:
        return np.arange(n, dtype=np.int64), 0.0
    import networkx as nx
    from networkx.algorithms.community import greedy_modularity_communities

    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from(topology.edges)
    comms = sorted((sorted(c) for c in greedy_modularity_communities(g)), key=lambda c: c[0])
    labels = np.empty(n, dtype=np.int64)
    for cid, members in enumerate(comms):
        labels[members] = cid
    return labels, modularity(topology, labels)


def compute_metrics(topology: Topology) -> NodeMetrics:
    labels, q = communities_and_modularity(topology)
    planted = topology.planted_communities
    return NodeMetrics(
        degree=degree(topology),
        betweenness=betweenness(topology),
        community=labels,
        modularity=q,
        planted_modularity=None if planted is None else modularity(topology, planted),
    )


def rank_by_degree(topology: Topology, rank: int) -> int:
    """Node with the ``rank``-th largest degree (1-based); ties go to the smaller id."""
    if not (1 <= rank <= topology.n):
        raise TopologyError(f"rank must be in 1..{topology.n}, got {rank}")
    deg = degree(topology)
    order = sorted(range(topology.n), key=lambda i: (-deg[i], i))
    return order[rank - 1]
