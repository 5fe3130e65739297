"""Convex relaxation, rounding and certificates for flow tracking with
pairwise costs.

The relaxed quadratic program is solved by Frank-Wolfe over the flow
polytope; every linear subproblem is a min-cost flow, so every oracle answer
is an integer track solution.  Rounding is one more min-cost flow solve.
"""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_model import Track, TrackingGraph, TrackSet
from .mincost_flow import FlowSolution, flow_violation, lmo
from .pairwise import PairwiseCostSet, ShiftedObjective

log = logging.getLogger(__name__)

FRANK_WOLFE = "frank_wolfe"
HAMMING = "hamming"


class CertificateError(AssertionError):
    """Raised when bounds and objective values fail to sandwich."""


@dataclass
class RelaxedSolution:
    z_star: np.ndarray
    lower_bound: float
    relaxed_objective: float
    iterations: int
    gap_trace: list[tuple[int, float]]
    best_integer_iterate: FlowSolution
    best_integer_objective: float
    objective: ShiftedObjective = field(repr=False)
    k: object = None
    free_k: bool = False

    @property
    def final_gap(self) -> float:
        return self.gap_trace[-1][1] if self.gap_trace else 0.0


@dataclass(frozen=True)
class Certificate:
    integer_objective: float
    lower_bound: float
    suboptimality: float
    method: str
    normalization: float = 1.0

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "integer_objective": self.integer_objective,
            "lower_bound": self.lower_bound,
            "suboptimality": self.suboptimality,
            "normalization": self.normalization,
        }


def _original_linear(shifted: ShiftedObjective) -> np.ndarray:
    return shifted.c_adjusted + shifted.diag


def frank_wolfe_relax(
    graph: TrackingGraph,
    shifted: ShiftedObjective,
    k=None,
    free_k: bool = False,
    max_iters: int = 2000,
    gap_tol: float = 1e-6,
) -> RelaxedSolution:
    """Minimize the convex surrogate over the flow polytope.

    Starts from the unary-only flow, steps toward each oracle vertex with an
    exact line search, and keeps the best dual bound ``f(z) - gap`` and the
    best integer vertex seen.
    """
    if gap_tol <= 0:
        raise ValueError("gap_tol must be positive")
    start = lmo(graph, _original_linear(shifted), k, free_k)
    z = start.z.copy()
    fz = shifted.value(z)
    best, best_f = start, fz
    lower = -math.inf
    trace: list[tuple[int, float]] = []

    it = 0
    for it in range(1, max_iters + 1):
        g = shifted.gradient(z)
        s = lmo(graph, g, k, free_k)
        d = s.z - z
        gap = float(-(g @ d))
        lower = max(lower, fz - gap)
        trace.append((it, gap))

        fs = shifted.value(s.z)
        if fs < best_f:
            best, best_f = s, fs

        curv = shifted.curvature(d)
        if curv > 1e-15:
            step = min(1.0, max(0.0, gap / (2.0 * curv)))
        else:
            step = 1.0
        if step > 0.0:
            z = z + step * d
            fz = shifted.value(z)
        if not math.isfinite(fz):
            raise FloatingPointError(f"objective became non-finite at Frank-Wolfe iteration {it}")
        if gap <= gap_tol:
            break
    else:
        log.info("Frank-Wolfe stopped at max_iters=%d with gap %.3g", max_iters, trace[-1][1] if trace else 0.0)

    if not trace:
        lower = fz
    log.debug("Frank-Wolfe: %d iterations, f=%.9g, lower bound %.9g", it, fz, lower)
    return RelaxedSolution(
        z_star=z,
        lower_bound=lower,
        relaxed_objective=fz,
        iterations=len(trace),
        gap_trace=trace,
        best_integer_iterate=best,
        best_integer_objective=best_f,
        objective=shifted,
        k=k,
        free_k=free_k,
    )


def frank_wolfe_round(graph: TrackingGraph, shifted: ShiftedObjective, z_star, k=None, free_k: bool = False) -> FlowSolution:
    """Integer flow minimizing the linearization of the original objective at ``z_star``."""
    z_star = np.asarray(z_star, dtype=float)
    costs = _original_linear(shifted) + shifted.q.symmetric() @ z_star
    return lmo(graph, costs, k, free_k)


def hamming_round(graph: TrackingGraph, z_star, k=None, free_k: bool = False) -> FlowSolution:
    """Integer flow closest to ``z_star`` in squared Euclidean distance."""
    z_star = np.asarray(z_star, dtype=float)
    return lmo(graph, 1.0 - 2.0 * z_star, k, free_k)


def certificate(rounded: FlowSolution, relaxed: RelaxedSolution, normalization: float, method: str = FRANK_WOLFE) -> Certificate:
    """Suboptimality bound of an integer solution against the relaxation's lower bound."""
    if not math.isclose(normalization, relaxed.objective.normalization, rel_tol=1e-12):
        raise ValueError(
            f"normalization {normalization} does not match the relaxation's {relaxed.objective.normalization}"
        )
    if not rounded.is_integer:
        raise ValueError("certificates are only defined for integer solutions")
    value = relaxed.objective.value(rounded.z)
    lb = relaxed.lower_bound
    if lb > value + 1e-9:
        raise CertificateError(f"lower bound {lb} exceeds integer objective {value}")
    if lb > relaxed.relaxed_objective + 1e-9:
        raise CertificateError(f"lower bound {lb} exceeds relaxed objective {relaxed.relaxed_objective}")
    # the relaxed iterate is optimal only up to its final duality gap
    if relaxed.relaxed_objective > value + max(relaxed.final_gap, 0.0) + 1e-9:
        raise CertificateError(
            f"relaxed objective {relaxed.relaxed_objective} exceeds integer objective {value}"
        )
    return Certificate(
        integer_objective=value,
        lower_bound=lb,
        suboptimality=max(0.0, value - lb),
        method=method,
        normalization=normalization,
    )


def extract_tracks(solution: FlowSolution, graph: TrackingGraph) -> TrackSet:
    """Decode an integer flow into tracks, one per unit of source flow."""
    if not solution.is_integer:
        raise ValueError("only integer flows can be decoded into tracks")
    z = np.asarray(solution.z)
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("solution is flagged integer but has fractional entries")
    if flow_violation(graph, z) > 1e-9:
        raise RuntimeError("flow conservation violated; cannot decode tracks")

    n = graph.n_detections
    nxt: dict[int, tuple[int, float]] = {}
    for ci, conn in enumerate(graph.connections):
        if z[n + ci] == 1:
            if conn.src in nxt:
                raise RuntimeError(f"detection {conn.src} has two outgoing connections")
            nxt[conn.src] = (conn.dst, conn.strength)

    tracks = []
    for p, det in enumerate(graph.detections):
        if z[graph.source_offset + p] != 1:
            continue
        dets, strengths = [det], []
        cur = det.id
        while cur in nxt:
            cur, strength = nxt[cur]
            dets.append(graph.detection(cur))
            strengths.append(strength)
        if z[graph.sink_var(cur)] != 1:
            raise RuntimeError(f"track starting at detection {det.id} does not reach the sink")
        tracks.append((dets, strengths))
    tracks.sort(key=lambda t: (t[0][0].frame, t[0][0].id))
    return TrackSet([Track(n + 1, tuple(d), tuple(s)) for n, (d, s) in enumerate(tracks)])


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_expr(lines: list[str], terms: list[tuple[float, str]], per_line: int = 8) -> None:
    chunk = []
    for n, (coef, name) in enumerate(terms):
        sign = "-" if coef < 0 else "+"
        mag = abs(coef)
        piece = f"{sign} {name}" if mag == 1.0 else f"{sign} {_fmt(mag)} {name}"
        chunk.append(piece)
        if len(chunk) == per_line:
            lines.append("   " + " ".join(chunk))
            chunk = []
    if chunk:
        lines.append("   " + " ".join(chunk))


def export_local_lp(
    graph: TrackingGraph,
    c,
    q: PairwiseCostSet,
    k=None,
    path=None,
    free_k: bool = False,
    integer: bool = False,
) -> str:
    """Write the linearized program in CPLEX LP format and return its text.

    Each stored pair ``i < j`` gets one product variable ``u_i_j`` with
    objective coefficient ``Q_ij + Q_ji``, bounded by
    ``u <= z_i``, ``u <= z_j`` and ``z_i + z_j <= 1 + u``.  With ``integer`` every
    variable is listed under Generals, which with its 0-1 bounds makes it binary.
    """
    c = np.asarray(c, dtype=float)
    budget = graph.budget(k)
    n = graph.n_detections
    zname = [f"z{v}" for v in range(graph.n_vars)]
    uname = [f"u_{i}_{j}" for i, j in zip(q.rows.tolist(), q.cols.tolist())]

    lines = ["\\ flow tracking program with linearized pairwise terms", "Minimize"]
    obj = [(float(c[v]), zname[v]) for v in range(graph.n_vars) if c[v] != 0.0]
    obj += [(2.0 * float(val), u) for val, u in zip(q.vals.tolist(), uname)]
    lines.append(" obj:")
    if obj:
        _write_expr(lines, obj)
    else:
        lines.append("   0 z0" if graph.n_vars else "   0 dummy")
    lines.append("Subject To")

    incoming: dict[int, list[int]] = defaultdict(list)
    outgoing: dict[int, list[int]] = defaultdict(list)
    for ci, (a, b) in enumerate(graph.conn_endpoints.tolist()):
        outgoing[a].append(n + ci)
        incoming[b].append(n + ci)
    for p, det in enumerate(graph.detections):
        terms = [(1.0, zname[graph.source_offset + p])] + [(1.0, zname[v]) for v in incoming[p]]
        terms.append((-1.0, zname[p]))
        lines.append(f" flow_in_{det.id}:")
        _write_expr(lines, terms)
        lines.append("   = 0")
        terms = [(1.0, zname[p]), (-1.0, zname[graph.sink_offset + p])] + [(-1.0, zname[v]) for v in outgoing[p]]
        lines.append(f" flow_out_{det.id}:")
        _write_expr(lines, terms)
        lines.append("   = 0")
    sense = "<=" if free_k else "="
    for g, label in enumerate(graph.groups):
        members = np.nonzero(graph.group_of_detection == g)[0].tolist()
        for side, offset in (("source", graph.source_offset), ("sink", graph.sink_offset)):
            lines.append(f" flow_{side}_{label}:")
            _write_expr(lines, [(1.0, zname[offset + p]) for p in members])
            lines.append(f"   {sense} {budget[label]}")
    for i, j, u in zip(q.rows.tolist(), q.cols.tolist(), uname):
        lines.append(f" local_a_{i}_{j}: {u} - {zname[i]} <= 0")
        lines.append(f" local_b_{i}_{j}: {u} - {zname[j]} <= 0")
        lines.append(f" local_c_{i}_{j}: {zname[i]} + {zname[j]} - {u} <= 1")

    lines.append("Bounds")
    lines += [f" 0 <= {name} <= 1" for name in zname + uname]
    if integer and (zname or uname):
        lines.append("Generals")
        lines += [f" {name}" for name in zname + uname]
    lines.append("End")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
