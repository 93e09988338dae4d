"""Ordering of interacting repellers and per-stratum spectral problems.

A directed edge i -> j between repellers declares a heteroclinic connection
(mass can travel from the neighbourhood of i to that of j), and each node
carries a topological pressure.  From this the filtration ordering builds a
total order compatible with the connections:

1. pick the remaining node of maximal pressure;
2. group it with every node that can reach it (transitively);
3. order the group by a topological sort of the connections, breaking the
   order of incomparable pairs by descending pressure;
4. append the group and repeat on what is left.

Relabelling the sequence with descending ranks n..1 yields the indices
i_0 > i_1 > ... > i_t (the rank of each group's selected node, which is
always last in its group).  Rank j then belongs to stratum k via
i_k <= j < i_{k-1}, which is what :func:`assign_basin` computes.

Edges are supplied by the user; certifying actual stable/unstable-set
intersections numerically is out of scope.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .spectral import SpectralTriple, solve_triple
from .ulam import AnnealedMatrix, restrict_operator

PRESSURE_TIE_TOL = 1e-12


class CycleError(ValueError):
    """The connection relation contains a cycle."""

    def __init__(self, witness: list[int]):
        super().__init__(f"connection graph has a cycle: {'>'.join(map(str, witness))}")
        self.witness = witness


class PressureTieError(ValueError):
    """Two nodes have numerically equal pressures (config error, not a choice)."""


@dataclass(frozen=True)
class Node:
    id: int
    pressure: float


@dataclass(frozen=True)
class ConnectionGraph:
    """Nodes with pressures plus directed connection edges (no self-loops)."""

    nodes: tuple[Node, ...]
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        known = set(ids)
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-edge on node {a}")
            if a not in known or b not in known:
                raise ValueError(f"edge ({a}, {b}) references unknown node")

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes)

    def pressure(self, node_id: int) -> float:
        for n in self.nodes:
            if n.id == node_id:
                return n.pressure
        raise KeyError(node_id)

    def successors(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {n.id: set() for n in self.nodes}
        for a, b in self.edges:
            out[a].add(b)
        return out

    @staticmethod
    def from_dict(payload: Mapping) -> "ConnectionGraph":
        nodes = tuple(Node(int(n["id"]), float(n["pressure"]))
                      for n in payload["nodes"])
        edges = tuple((int(a), int(b)) for a, b in payload.get("edges", ()))
        return ConnectionGraph(nodes, edges)


def detect_cycles(graph: ConnectionGraph) -> list[int] | None:
    """None when the connection relation is acyclic, else a cycle witness."""
    succ = graph.successors()
    color = {i: 0 for i in graph.ids}  # 0 new, 1 on stack, 2 done
    parent: dict[int, int] = {}
    for root in graph.ids:
        if color[root]:
            continue
        stack = [(root, iter(sorted(succ[root])))]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == 1:
                    cycle = [nxt]
                    cur = node
                    while cur != nxt:
                        cycle.append(cur)
                        cur = parent[cur]
                    cycle.reverse()
                    return cycle
                if color[nxt] == 0:
                    color[nxt] = 1
                    parent[nxt] = node
                    stack.append((nxt, iter(sorted(succ[nxt]))))
                    advanced = True
                    break
            if not advanced:
                color[node] = 2
                stack.pop()
    return None


@dataclass(frozen=True)
class FiltrationOrder:
    """Total order on node ids with its group decomposition.

    ``sequence`` lists ids from greatest to least; ``relabel`` maps each id
    to its rank (n for the first, 1 for the last); ``indices`` are the ranks
    i_0 > ... > i_t of the selected maximal-pressure nodes.
    """

    sequence: tuple[int, ...]
    subgraphs: tuple[tuple[int, ...], ...]
    indices: tuple[int, ...]
    relabel: dict[int, int]

    @property
    def n(self) -> int:
        return len(self.sequence)

    @property
    def t(self) -> int:
        return len(self.indices) - 1

    def rank_of(self, node_id: int) -> int:
        return self.relabel[node_id]

    def to_dict(self) -> dict:
        return {
            "sequence": list(self.sequence),
            "subgraphs": [list(s) for s in self.subgraphs],
            "indices": list(self.indices),
            "relabel": {str(k): v for k, v in self.relabel.items()},
        }


def _reaching_set(target: int, members: set[int], succ: dict[int, set[int]]) -> set[int]:
    pred: dict[int, set[int]] = {i: set() for i in members}
    for a in members:
        for b in succ[a]:
            if b in members:
                pred[b].add(a)
    out = {target}
    frontier = [target]
    while frontier:
        cur = frontier.pop()
        for p in pred[cur]:
            if p not in out:
                out.add(p)
                frontier.append(p)
    return out


def _priority_toposort(members: set[int], succ: dict[int, set[int]],
                       pressure: dict[int, float]) -> list[int]:
    indeg = {i: 0 for i in members}
    for a in members:
        for b in succ[a]:
            if b in members:
                indeg[b] += 1
    heap = [(-pressure[i], i) for i in members if indeg[i] == 0]
    heapq.heapify(heap)
    out: list[int] = []
    while heap:
        _, node = heapq.heappop(heap)
        out.append(node)
        for b in succ[node]:
            if b in members:
                indeg[b] -= 1
                if indeg[b] == 0:
                    heapq.heappush(heap, (-pressure[b], b))
    return out


def filtration_order(graph: ConnectionGraph) -> FiltrationOrder:
    """Build the total order; rejects cycles and pressure ties.

    Errors carry the cycle witness (CycleError) or the offending pair
    (PressureTieError, tolerance 1e-12 absolute).
    """
    witness = detect_cycles(graph)
    if witness is not None:
        raise CycleError(witness)
    pressures = {n.id: n.pressure for n in graph.nodes}
    ordered = sorted(pressures.items(), key=lambda kv: kv[1])
    for (id_a, p_a), (id_b, p_b) in zip(ordered, ordered[1:]):
        if abs(p_a - p_b) <= PRESSURE_TIE_TOL:
            raise PressureTieError(
                f"pressure tie between nodes {id_a} and {id_b}: "
                f"{p_a!r} vs {p_b!r}")
    succ = graph.successors()
    remaining = set(graph.ids)
    sequence: list[int] = []
    subgraphs: list[tuple[int, ...]] = []
    selected: list[int] = []
    while remaining:
        top = max(remaining, key=lambda i: pressures[i])
        members = _reaching_set(top, remaining, succ)
        block = _priority_toposort(members, succ, pressures)
        sequence.extend(block)
        subgraphs.append(tuple(block))
        selected.append(top)
        remaining -= members
    n = len(sequence)
    relabel = {node: n - pos for pos, node in enumerate(sequence)}
    indices = tuple(relabel[s] for s in selected)
    return FiltrationOrder(tuple(sequence), tuple(subgraphs), indices, relabel)


def assign_basin(order: FiltrationOrder, j: int) -> int:
    """Stratum index k with i_k <= j < i_{k-1} (i_{-1} = n + 1).

    ``j`` is a rank in the relabelled order: the rank of the repeller whose
    stable set contains the start point.  Monotone: larger ranks map to
    smaller k.
    """
    if not 1 <= j <= order.n:
        raise ValueError(f"rank {j} outside 1..{order.n}")
    previous = order.n + 1
    for k, ik in enumerate(order.indices):
        if ik <= j < previous:
            return k
        previous = ik
    raise ValueError(f"rank {j} not covered by indices {order.indices}")


@dataclass(eq=False)
class StratumResult:
    key: int
    cells: np.ndarray
    triple: SpectralTriple | None  # None when the restricted block is zero


@dataclass(eq=False)
class StratifiedReport:
    """Restricted spectral problems per stratum plus the global consistency gap."""

    global_triple: SpectralTriple
    strata: list[StratumResult]
    lambda_global: float
    lambda_max_restricted: float
    argmax_key: int

    @property
    def deviation(self) -> float:
        return abs(self.lambda_global - self.lambda_max_restricted)


def stratified_qem_workflow(matrix: AnnealedMatrix, order: FiltrationOrder,
                            strata: Mapping[int, Sequence[int]],
                            tol: float = 1e-10, max_iters: int = 100_000,
                            seed: int = 0) -> StratifiedReport:
    """Solve the global problem and one restricted problem per stratum.

    ``strata`` maps a rank (or any stable key) to the grid cells of that
    stratum.  The report records that the global leading eigenvalue equals
    the largest restricted one; strata whose principal submatrix is zero are
    recorded as absent.
    """
    global_triple = solve_triple(matrix, tol=tol, max_iters=max_iters, seed=seed)
    results: list[StratumResult] = []
    best = -math.inf
    best_key = None
    for key in sorted(strata, reverse=True):
        cells = np.asarray(list(strata[key]), dtype=np.int64)
        sub = restrict_operator(matrix, cells)
        try:
            triple = solve_triple(sub, tol=tol, max_iters=max_iters, seed=seed)
        except ValueError:
            results.append(StratumResult(key, cells, None))
            continue
        results.append(StratumResult(key, cells, triple))
        if triple.lam > best:
            best, best_key = triple.lam, key
    if best_key is None:
        raise ValueError("every stratum produced a zero operator")
    return StratifiedReport(global_triple, results, global_triple.lam,
                            best, best_key)
