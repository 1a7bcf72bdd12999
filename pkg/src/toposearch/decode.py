"""Feasibility-constrained discretization of the relaxed topology.

Layers are indexed from 0 in code; layer ``i`` holds the input pattern of
super node ``i + 1``. Pattern ids are 1-based, column ``j - 1`` of ``eta``.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .relax import EPS
from .space import SearchSpace

BRUTE_FORCE_LIMIT = 10**7
SINK_COST = 0.0

OP_NAMES = ("skip", "conv3x3", "p2d_3x1_1x3", "p2d_1x3_3x1", "conv3x3_dil2")


class DecodeError(RuntimeError):
    pass


class InstanceTooLargeError(ValueError):
    pass


def node_costs(eta) -> np.ndarray:
    return -np.log(np.clip(np.asarray(eta, dtype=np.float64), EPS, 1.0))


@dataclass
class DecodeGraph:
    """Layered DAG with nodes source, sink and one node per (layer, pattern).

    Arcs are implicit in the feasibility table: ``c[i-1][m] -> c[i][j]``
    exists iff ``j in F(m)``; every arc into ``c[i][j]`` costs ``costs[i, j-1]``.
    """

    costs: np.ndarray  # [L, M]
    space: SearchSpace
    sink_cost: float = SINK_COST

    SOURCE = (-1, 0)
    SINK = (1 << 30, 0)

    @property
    def L(self) -> int:
        return self.costs.shape[0]

    @property
    def M(self) -> int:
        return self.costs.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.L * self.M + 2

    def successors(self, node):
        """Yield (next_node, arc_cost) pairs; nodes are (layer, pattern_id) tuples."""
        if node == self.SOURCE:
            for j in range(1, self.M + 1):
                yield (0, j), self.costs[0, j - 1]
            return
        i, j = node
        if i == self.L - 1:
            yield self.SINK, self.sink_cost
            return
        for k in self.space.sets.F[j]:
            yield (i + 1, k), self.costs[i + 1, k - 1]

    def arcs(self):
        yield from ((self.SOURCE, v, c) for v, c in self.successors(self.SOURCE))
        for i in range(self.L):
            for j in range(1, self.M + 1):
                yield from (((i, j), v, c) for v, c in self.successors((i, j)))

    @property
    def num_arcs(self) -> int:
        fan = sum(len(self.space.sets.F[j]) for j in range(1, self.M + 1))
        return self.M + (self.L - 1) * fan + self.M


def build_decode_graph(eta, space: SearchSpace, sink_cost: float = SINK_COST) -> DecodeGraph:
    costs = node_costs(eta)
    if costs.shape[1] != space.M:
        raise ValueError(f"eta has {costs.shape[1]} columns, space has M={space.M}")
    return DecodeGraph(costs, space, sink_cost)


@dataclass
class ArchitectureTopology:
    I: tuple[int, ...]
    ops: dict[tuple[int, int], int]
    D: int
    total_cost: float = float("nan")
    op_names: tuple[str, ...] = field(default=OP_NAMES)

    @property
    def L(self) -> int:
        return len(self.I)

    def indication(self, space: SearchSpace) -> np.ndarray:
        return space.pattern_matrix[np.asarray(self.I) - 1]

    def to_json(self) -> dict:
        return {
            "D": self.D,
            "L": self.L,
            "I": list(self.I),
            "ops": {f"{i},{e}": n for (i, e), n in sorted(self.ops.items())},
            "total_cost": self.total_cost,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ArchitectureTopology":
        ops = {}
        for k, n in obj["ops"].items():
            i, e = (int(s) for s in k.split(","))
            ops[(i, e)] = int(n)
        topo = cls(tuple(int(x) for x in obj["I"]), ops, int(obj["D"]), float(obj.get("total_cost", "nan")))
        if topo.L != int(obj["L"]):
            raise ValueError(f"architecture JSON lists {topo.L} patterns but L={obj['L']}")
        return topo

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "ArchitectureTopology":
        return cls.from_json(json.loads(Path(path).read_text()))

    def active_nodes(self, space: SearchSpace) -> list[tuple[int, int]]:
        """Feature nodes (layer, resolution) carrying data; layer 0 is the stem."""
        nodes = set()
        for i, pid in enumerate(self.I):
            for e in space.pattern(pid).selected:
                ed = space.edges[e]
                nodes.add((i, ed.src_res))
                nodes.add((i + 1, ed.dst_res))
        return sorted(nodes)

    def to_dot(self, space: SearchSpace) -> str:
        lines = ["digraph architecture {", "  rankdir=LR;"]
        for layer, d in self.active_nodes(space):
            lines.append(f'  "n{layer}_{d}" [label="L{layer} R{d}"];')
        for i, pid in enumerate(self.I):
            for e in space.pattern(pid).selected:
                ed = space.edges[e]
                name = self.op_names[self.ops[(i, e)]] if (i, e) in self.ops else "?"
                lines.append(f'  "n{i}_{ed.src_res}" -> "n{i + 1}_{ed.dst_res}" [label="{name}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def path_cost(costs: np.ndarray, I, sink_cost: float = SINK_COST) -> float:
    total = 0.0
    for i, j in enumerate(I):
        total = total + costs[i, j - 1]
    return float(total + sink_cost)


def shortest_path_decode(eta, space: SearchSpace, alpha=None, sink_cost: float = SINK_COST) -> ArchitectureTopology:
    """Dijkstra over the decode graph.

    Heap keys are (distance, pattern prefix), which settles cost ties on the
    lexicographically smallest sequence.
    """
    g = build_decode_graph(eta, space, sink_cost)
    done = set()
    best = {g.SOURCE: (0.0, ())}
    heap = [(0.0, (), g.SOURCE)]
    while heap:
        dist, prefix, node = heapq.heappop(heap)
        if node in done:
            continue
        done.add(node)
        if node == g.SINK:
            return _finish(prefix, path_cost(g.costs, prefix, 0.0), space, alpha)
        for nxt, c in g.successors(node):
            if nxt in done:
                continue
            key = (dist + c, prefix if nxt == g.SINK else prefix + (nxt[1],))
            old = best.get(nxt)
            if old is None or key < old:
                best[nxt] = key
                heapq.heappush(heap, (*key, nxt))
    raise DecodeError("no feasible path from source to sink; feasibility tables are inconsistent")


def layer_sweep_decode(eta, space: SearchSpace, alpha=None) -> ArchitectureTopology:
    """Dynamic programming over layers (linear in the number of arcs).

    Each node keeps the lexicographically smallest of its optimal prefixes;
    ``rank`` orders those prefixes within a layer.
    """
    costs = node_costs(eta)
    L, M = costs.shape
    T = space.transition_matrix
    ids = np.arange(M)
    best = costs[0].copy()
    rank = ids.copy()
    back = np.zeros((L, M), dtype=np.int64)
    for i in range(1, L):
        cand = np.where(T, best[:, None], np.inf)
        tied = cand == cand.min(axis=0)
        back[i] = np.argmin(np.where(tied, rank[:, None], M), axis=0)
        best = best[back[i]] + costs[i]
        order = np.lexsort((ids, rank[back[i]]))
        rank = np.empty(M, dtype=np.int64)
        rank[order] = ids
    k = int(np.argmin(np.where(best == best.min(), rank, M)))
    seq = [k]
    for i in range(L - 1, 0, -1):
        seq.append(int(back[i, seq[-1]]))
    I = tuple(j + 1 for j in reversed(seq))
    return _finish(I, path_cost(costs, I), space, alpha)


def brute_force_decode(eta, space: SearchSpace, alpha=None) -> ArchitectureTopology:
    """Exhaustive minimization over all M**L sequences (small instances only)."""
    costs = node_costs(eta)
    L, M = costs.shape
    if M**L > BRUTE_FORCE_LIMIT:
        raise InstanceTooLargeError(f"M**L = {M}**{L} exceeds the brute-force limit {BRUTE_FORCE_LIMIT}")
    T = space.transition_matrix
    total = costs[0]
    ok = np.ones(M, dtype=bool)
    for i in range(1, L):
        total = total[..., None] + costs[i]
        ok = ok[..., None] & T.reshape((1,) * (i - 1) + (M, M))
    total = np.where(ok, total + SINK_COST, np.inf)
    flat = int(np.argmin(total))  # C order == lexicographic order of sequences
    if not np.isfinite(total.flat[flat]):
        raise DecodeError("no feasible sequence")
    I = tuple(int(j) + 1 for j in np.unravel_index(flat, total.shape))
    return _finish(I, float(total.flat[flat]), space, alpha)


def argmax_decode(eta) -> tuple[int, ...]:
    return tuple(int(j) + 1 for j in np.argmax(np.asarray(eta), axis=1))


def select_cell_ops(alpha, I, space: SearchSpace) -> dict[tuple[int, int], int]:
    alpha = np.asarray(alpha)
    return {(i, e): int(np.argmax(alpha[i, e])) for i, pid in enumerate(I) for e in space.pattern(pid).selected}


def gap_metric(c_max, c_top, space: SearchSpace) -> int:
    """Edge-set Hamming distance between two pattern sequences."""
    B = space.pattern_matrix
    a = B[np.asarray(c_max) - 1]
    b = B[np.asarray(c_top) - 1]
    return int(np.abs(a - b).sum())


def _finish(I, cost, space: SearchSpace, alpha) -> ArchitectureTopology:
    I = tuple(int(j) for j in I)
    if not space.is_feasible_sequence(I):
        raise DecodeError(f"decoded sequence {I} violates feasibility")
    ops = select_cell_ops(alpha, I, space) if alpha is not None else {}
    return ArchitectureTopology(I, ops, space.D, float(cost))


def decode(eta, alpha, space: SearchSpace) -> ArchitectureTopology:
    return shortest_path_decode(eta, space, alpha)
