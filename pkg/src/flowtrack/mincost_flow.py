"""Exact min-cost flow over the tracking polytope by successive shortest paths.

Every detection is split into an in-node and an out-node joined by a
unit-capacity arc carrying the detection cost, so each residual arc maps one
to one onto a selection variable.  Initial node potentials come from a single
shortest-path pass in topological order; later augmentations run Dijkstra on
reduced costs, which keeps the solver exact under negative costs.
"""
from __future__ import annotations

import heapq
import weakref
from dataclasses import dataclass, field
from typing import Mapping

import numba
import numpy as np

from .core_model import TrackingGraph


class InfeasibleFlowError(ValueError):
    def __init__(self, group: str, requested: int, max_feasible: int):
        self.group = group
        self.requested = requested
        self.max_feasible = max_feasible
        super().__init__(
            f"cannot route {requested} tracks through class {group!r}: "
            f"at most {max_feasible} disjoint source-sink paths exist"
        )


@dataclass
class FlowSolution:
    z: np.ndarray
    objective: float
    is_integer: bool
    k_used: int
    k_by_group: dict[str, int] = field(default_factory=dict)
    path_costs: tuple[float, ...] = ()


@dataclass(frozen=True)
class _Network:
    indptr: np.ndarray
    adj: np.ndarray
    edge_head: np.ndarray
    sources: np.ndarray
    sinks: np.ndarray
    topo: tuple[np.ndarray, ...]
    n_nodes: int


_networks: "weakref.WeakKeyDictionary[TrackingGraph, _Network]" = weakref.WeakKeyDictionary()


def _network(graph: TrackingGraph) -> _Network:
    net = _networks.get(graph)
    if net is not None:
        return net
    n = graph.n_detections
    n_groups = len(graph.groups)
    grp = graph.group_of_detection
    det = np.arange(n, dtype=np.int64)
    ends = graph.conn_endpoints
    src_nodes = 2 * n + 2 * grp
    sink_nodes = src_nodes + 1
    tail = np.concatenate([2 * det, 2 * ends[:, 0] + 1, src_nodes, 2 * det + 1])
    head = np.concatenate([2 * det + 1, 2 * ends[:, 1], 2 * det, sink_nodes])
    n_arcs = graph.n_vars
    n_nodes = 2 * n + 2 * n_groups

    # residual edge 2a is arc a forward, 2a+1 its reverse
    edge_tail = np.empty(2 * n_arcs, dtype=np.int64)
    edge_head = np.empty(2 * n_arcs, dtype=np.int64)
    edge_tail[0::2], edge_head[0::2] = tail, head
    edge_tail[1::2], edge_head[1::2] = head, tail
    order = np.argsort(edge_tail, kind="stable")
    counts = np.bincount(edge_tail, minlength=n_nodes)
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])

    topo_all = graph.topological_order()
    topo = []
    for g in range(n_groups):
        nodes = [2 * n + 2 * g]
        for p in topo_all:
            if grp[p] == g:
                nodes += [2 * p, 2 * p + 1]
        nodes.append(2 * n + 2 * g + 1)
        topo.append(np.array(nodes, dtype=np.int64))

    net = _Network(
        indptr=indptr,
        adj=order.astype(np.int64),
        edge_head=edge_head,
        sources=2 * n + 2 * np.arange(n_groups, dtype=np.int64),
        sinks=2 * n + 2 * np.arange(n_groups, dtype=np.int64) + 1,
        topo=tuple(topo),
        n_nodes=n_nodes,
    )
    _networks[graph] = net
    return net


@numba.njit(cache=True)
def _ssp(indptr, adj, edge_head, arc_cost, cap, s, t, k_target, free_k, topo, n_nodes):
    """Successive shortest paths from ``s`` to ``t``; mutates ``cap``.

    Returns the cost of each augmenting path taken and a flag telling whether
    the sink became unreachable.
    """
    pot = np.full(n_nodes, np.inf)
    pot[s] = 0.0
    for u in topo:
        pu = pot[u]
        if pu == np.inf:
            continue
        for idx in range(indptr[u], indptr[u + 1]):
            e = adj[idx]
            if cap[e] > 0:
                v = edge_head[e]
                c = arc_cost[e >> 1] if (e & 1) == 0 else -arc_cost[e >> 1]
                if pu + c < pot[v]:
                    pot[v] = pu + c

    path_costs = np.empty(max(k_target, 0), dtype=np.float64)
    n_paths = 0
    exhausted = False
    dist = np.full(n_nodes, np.inf)
    pred = np.full(n_nodes, -1, dtype=np.int64)
    done = np.zeros(n_nodes, dtype=np.bool_)
    while n_paths < k_target:
        for u in topo:
            dist[u] = np.inf
            pred[u] = -1
            done[u] = False
        dist[s] = 0.0
        heap = [(0.0, s)]
        while len(heap) > 0:
            d, u = heapq.heappop(heap)
            if done[u]:
                continue
            done[u] = True
            if u == t:
                break
            for idx in range(indptr[u], indptr[u + 1]):
                e = adj[idx]
                if cap[e] <= 0:
                    continue
                v = edge_head[e]
                if done[v]:
                    continue
                c = arc_cost[e >> 1] if (e & 1) == 0 else -arc_cost[e >> 1]
                rc = c + pot[u] - pot[v]
                if rc < 0.0:
                    rc = 0.0
                nd = d + rc
                if nd < dist[v]:
                    dist[v] = nd
                    pred[v] = e
                    heapq.heappush(heap, (nd, v))
        if dist[t] == np.inf:
            exhausted = True
            break
        # recover the true path cost by summing arc costs along the path
        cost = 0.0
        v = t
        while v != s:
            e = pred[v]
            cost += arc_cost[e >> 1] if (e & 1) == 0 else -arc_cost[e >> 1]
            v = edge_head[e ^ 1]
        if free_k and cost >= -1e-12:
            break
        dt = dist[t]
        for u in topo:
            du = dist[u] if done[u] else dt
            pot[u] += du if du < dt else dt
        v = t
        while v != s:
            e = pred[v]
            cap[e] -= 1
            cap[e ^ 1] += 1
            v = edge_head[e ^ 1]
        path_costs[n_paths] = cost
        n_paths += 1
    return path_costs[:n_paths], exhausted


def _solve(graph: TrackingGraph, costs, budget: dict[str, int], free_k: bool) -> FlowSolution:
    costs = np.asarray(costs, dtype=np.float64)
    if costs.shape != (graph.n_vars,):
        raise ValueError(f"expected {graph.n_vars} costs, got shape {costs.shape}")
    if not np.all(np.isfinite(costs)):
        raise ValueError("linear costs must be finite")
    net = _network(graph)
    cap = np.zeros(2 * graph.n_vars, dtype=np.int64)
    cap[0::2] = 1
    k_by_group = {}
    path_costs: list[float] = []
    for g, label in enumerate(graph.groups):
        k = budget[label]
        if k < 0:
            raise ValueError(f"track budget must be nonnegative, got {k} for {label!r}")
        if free_k:
            k = min(k, int(np.count_nonzero(graph.group_of_detection == g)))
        pc, exhausted = _ssp(
            net.indptr, net.adj, net.edge_head, costs, cap,
            net.sources[g], net.sinks[g], k, free_k, net.topo[g], net.n_nodes,
        )
        if not free_k and len(pc) < k:
            raise InfeasibleFlowError(label, k, len(pc))
        k_by_group[label] = len(pc)
        path_costs.extend(pc.tolist())
    z = (1 - cap[0::2]).astype(np.float64)
    return FlowSolution(
        z=z,
        objective=float(costs @ z),
        is_integer=True,
        k_used=sum(k_by_group.values()),
        k_by_group=k_by_group,
        path_costs=tuple(path_costs),
    )


def solve_min_cost_flow(graph: TrackingGraph, costs, k: int | Mapping[str, int] | None = None) -> FlowSolution:
    """Minimum-cost flow routing exactly ``k`` tracks per class.

    Raises :class:`InfeasibleFlowError` when fewer than ``k`` disjoint paths exist.
    """
    if graph.n_detections == 0:
        return FlowSolution(np.zeros(0), 0.0, True, 0)
    return _solve(graph, costs, graph.budget(k), free_k=False)


def solve_best_k(graph: TrackingGraph, costs, k_max: int | Mapping[str, int] | None = None) -> FlowSolution:
    """Cheapest flow over all track counts ``0..k_max`` per class.

    Augmenting-path costs never decrease, so augmentation stops at the first
    path that would not lower the objective.
    """
    if graph.n_detections == 0:
        return FlowSolution(np.zeros(0), 0.0, True, 0)
    return _solve(graph, costs, graph.budget(k_max), free_k=True)


def lmo(graph: TrackingGraph, linear_costs, k=None, free_k: bool = False) -> FlowSolution:
    """Linear minimization oracle over the flow polytope.

    With ``free_k`` the feasible set is every flow of at most ``k`` tracks per
    class (the convex hull of the union of the fixed-count polytopes).
    """
    if free_k:
        return solve_best_k(graph, linear_costs, k)
    return solve_min_cost_flow(graph, linear_costs, k)


def flow_violation(graph: TrackingGraph, z) -> float:
    """Largest absolute flow-conservation residual of ``z``."""
    z = np.asarray(z, dtype=float)
    if graph.n_detections == 0:
        return 0.0
    r = graph.conservation_matrix @ z
    return float(np.max(np.abs(r)))


def group_flow(graph: TrackingGraph, z) -> dict[str, tuple[float, float]]:
    """Total source and sink flow per class."""
    z = np.asarray(z, dtype=float)
    src = z[graph.source_offset:graph.sink_offset]
    snk = z[graph.sink_offset:]
    out = {}
    for g, label in enumerate(graph.groups):
        mask = graph.group_of_detection == g
        out[label] = (float(src[mask].sum()), float(snk[mask].sum()))
    return out


def check_flow(graph: TrackingGraph, sol: FlowSolution, tol: float = 1e-9) -> None:
    """Assert the structural invariants of a :class:`FlowSolution`."""
    z = sol.z
    if z.shape != (graph.n_vars,):
        raise AssertionError("solution has the wrong length")
    if np.any(z < -tol) or np.any(z > 1 + tol):
        raise AssertionError("solution leaves the unit box")
    if flow_violation(graph, z) > tol:
        raise AssertionError("flow conservation violated")
    totals = group_flow(graph, z)
    src = sum(a for a, _ in totals.values())
    snk = sum(b for _, b in totals.values())
    if abs(src - snk) > tol or abs(src - sol.k_used) > tol:
        raise AssertionError(f"source flow {src}, sink flow {snk}, k_used {sol.k_used}")
    if sol.is_integer and not np.all((z == 0) | (z == 1)):
        raise AssertionError("integer solution has fractional entries")
