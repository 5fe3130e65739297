"""Synthetic tracking scenarios with exact ground truth, and an exhaustive
oracle for tiny instances of the quadratic tracking program."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core_model import (
    BoundingBox,
    Connection,
    Detection,
    TrackingGraph,
    build_graph,
    proximity_connections,
)
from .metrics import GroundTruth
from .pairwise import PairwiseCostSet

KINDS = ("parallel_crowd", "crossing_pair", "duplicate_detections", "head_body_dropout")
ORACLE_MAX_DETECTIONS = 12


@dataclass
class ScenarioSpec:
    kind: str = "parallel_crowd"
    n_frames: int = 50
    n_objects: int = 4
    noise: float = 0.0
    dropout_rate: float = 0.0
    duplicate_rate: float = 0.0
    seed: int = 0
    box_size: tuple[float, float] = (40.0, 100.0)
    speed: float = 3.0
    confidence_range: tuple[float, float] = (0.5, 1.0)
    # head_body_dropout only: bodies use their own score range, heads may drop independently
    body_confidence_range: tuple[float, float] | None = None
    head_dropout_rate: float | None = None
    head_region_frac: float = 0.25
    max_skip: int = 3
    link_radius: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        for name in ("dropout_rate", "duplicate_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.head_dropout_rate is not None and not 0.0 <= self.head_dropout_rate <= 1.0:
            raise ValueError("head_dropout_rate must lie in [0, 1]")
        if self.n_frames < 1 or self.n_objects < 1:
            raise ValueError("need at least one frame and one object")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")


def _trajectories(spec: ScenarioSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """Per-object ``(n_frames, 4)`` arrays of ground-truth boxes."""
    w, h = spec.box_size
    n, v = spec.n_frames, spec.speed
    t = np.arange(n, dtype=float)
    row = 1.5 * h
    out = []
    if spec.kind == "crossing_pair":
        center = 200.0 + v * n / 2.0
        for i in range(spec.n_objects):
            y = 50.0 + (i // 2) * row
            if i % 2 == 0 and i + 1 < spec.n_objects:
                x = center - v * n / 2.0 + v * t - w / 2.0
            elif i % 2 == 1:
                x = center + v * n / 2.0 - v * t - w / 2.0
            else:
                x = 100.0 + v * t
            out.append(np.column_stack([x, np.full(n, y), np.full(n, w), np.full(n, h)]))
    else:
        for i in range(spec.n_objects):
            x0 = float(rng.uniform(50.0, 150.0))
            y = 50.0 + i * row
            out.append(np.column_stack([x0 + v * t, np.full(n, y), np.full(n, w), np.full(n, h)]))
    return out


def crossing_overlap_window(spec: ScenarioSpec, iou_thresh: float = 0.5) -> tuple[float, float]:
    """Frames where a crossing pair's boxes overlap by at least ``iou_thresh``.

    Two equal boxes offset horizontally by ``dx`` have IoU ``(w - dx) / (w + dx)``,
    and the pair's offset is ``2 * speed * |t - n/2|``.
    """
    w = spec.box_size[0]
    dx_max = w * (1.0 - iou_thresh) / (1.0 + iou_thresh)
    half = dx_max / (2.0 * spec.speed)
    return spec.n_frames / 2.0 - half, spec.n_frames / 2.0 + half


def _jitter(box: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    if noise == 0:
        return box.copy()
    b = box + rng.normal(0.0, noise, size=4)
    b[2:] = np.maximum(b[2:], 1.0)
    return b


def generate(spec: ScenarioSpec) -> tuple[list[Detection], list[Connection], GroundTruth]:
    rng = np.random.default_rng(spec.seed)
    trajs = _trajectories(spec, rng)
    gt = GroundTruth(
        {i + 1: [(f, BoundingBox(*map(float, tr[f]))) for f in range(spec.n_frames)] for i, tr in enumerate(trajs)},
        (0, spec.n_frames - 1),
    )
    body_label = "body"
    lo, hi = spec.confidence_range
    if spec.kind == "head_body_dropout" and spec.body_confidence_range is not None:
        blo, bhi = spec.body_confidence_range
    else:
        blo, bhi = lo, hi
    head_drop = spec.dropout_rate if spec.head_dropout_rate is None else spec.head_dropout_rate

    dets: list[Detection] = []

    def emit(frame, box, conf, label):
        dets.append(Detection(len(dets), frame, BoundingBox(*map(float, box)), float(conf), label))

    for f in range(spec.n_frames):
        for tr in trajs:
            # draw every random number unconditionally so rates do not shift the stream
            drop_u, dup_u, conf_u, head_u, hconf_u = rng.random(5)
            jit = _jitter(tr[f], spec.noise, rng)
            dup_shift = rng.uniform(-0.05, 0.05, size=2) * tr[f][2:]
            hjit = _jitter(tr[f], spec.noise, rng)
            if drop_u >= spec.dropout_rate:
                emit(f, jit, blo + (bhi - blo) * conf_u, body_label)
                if dup_u < spec.duplicate_rate:
                    dup = jit.copy()
                    dup[:2] += dup_shift
                    emit(f, dup, (blo + (bhi - blo) * conf_u) * 0.95, body_label)
            if spec.kind == "head_body_dropout" and head_u >= head_drop:
                head = hjit.copy()
                head[3] = head[3] * spec.head_region_frac
                emit(f, head, lo + (hi - lo) * hconf_u, "head")

    conns = proximity_connections(dets, spec.max_skip, radius=spec.link_radius)
    return dets, conns, gt


# ---------------------------------------------------------------------------
# random tiny instances and the exhaustive oracle


def random_instance(
    rng: np.random.Generator,
    n_detections: int = 8,
    n_frames: int = 4,
    connect_prob: float = 0.6,
    max_skip: int = 2,
    n_pairs: int = 0,
    k: int | Mapping[str, int] = 2,
    classes: tuple[str, ...] = ("body",),
    pair_scale: float = 1.0,
) -> tuple[TrackingGraph, np.ndarray, PairwiseCostSet]:
    """Random small graph with sign-mixed costs and ``n_pairs`` random pairwise entries."""
    frames = np.sort(rng.integers(0, n_frames, size=n_detections))
    dets = [
        Detection(i, int(frames[i]), BoundingBox(float(rng.uniform(0, 100)), float(rng.uniform(0, 100)), 10.0, 20.0),
                  float(rng.uniform(-0.5, 1.0)), classes[int(rng.integers(len(classes)))])
        for i in range(n_detections)
    ]
    conns = []
    for a in dets:
        for b in dets:
            if (0 < b.frame - a.frame <= max_skip and a.class_label == b.class_label
                    and rng.random() < connect_prob):
                conns.append(Connection(a.id, b.id, float(rng.uniform(0.0, 1.0))))
    graph = build_graph(dets, conns, k, max_skip)
    c = rng.normal(0.0, 1.0, size=graph.n_vars)
    entries = []
    for _ in range(n_pairs):
        i, j = rng.choice(graph.n_vars, size=2, replace=False)
        entries.append((i, j, float(rng.normal(0.0, pair_scale))))
    return graph, c, PairwiseCostSet.from_entries(entries, graph.n_vars)


@dataclass
class OracleResult:
    optimal_objective: float
    optimal_z: np.ndarray
    n_enumerated: int
    k_by_group: dict[str, int] = field(default_factory=dict)


def brute_force_iqp(
    graph: TrackingGraph,
    c,
    q: PairwiseCostSet | None = None,
    k_max: int | Mapping[str, int] | None = None,
    exact: bool = False,
    diag=None,
) -> OracleResult:
    """Enumerate every integer flow and return the one minimizing
    ``c.z + sum diag_i z_i^2 + z^T Q z``.

    Flows are enumerated as sets of node-disjoint source-to-sink paths with at
    most ``k_max`` paths per class (exactly ``k_max`` with ``exact``).
    """
    n = graph.n_detections
    if n > ORACLE_MAX_DETECTIONS:
        raise ValueError(f"brute force is capped at {ORACLE_MAX_DETECTIONS} detections, got {n}")
    c = np.asarray(c, dtype=float)
    if diag is not None:
        c = c + np.asarray(diag, dtype=float)  # z^2 = z on binary points
    budget = graph.budget(k_max)
    nbrs: list[list[tuple[int, float]]] = [[] for _ in range(graph.n_vars)]
    if q is not None:
        for i, j, v in q.entries():
            nbrs[i].append((j, 2.0 * v))
            nbrs[j].append((i, 2.0 * v))

    sel = [False] * graph.n_vars
    cval = c.tolist()

    def add(v: int) -> float:
        delta = cval[v]
        for u, val in nbrs[v]:
            if sel[u]:
                delta += val
        sel[v] = True
        return delta

    def remove(v: int) -> None:
        sel[v] = False

    order = graph.topological_order()
    group_of = [graph.groups[g] for g in graph.group_of_detection.tolist()]
    conn_into: list[dict[int, int]] = [dict() for _ in range(n)]
    for ci, (a, b) in enumerate(graph.conn_endpoints.tolist()):
        conn_into[b][a] = n + ci

    best = [math.inf, None, None]
    count = [0]
    used = {g: 0 for g in graph.groups}
    tails: list[int] = []

    def leaf(value: float) -> None:
        if exact and any(used[g] != budget[g] for g in graph.groups):
            return
        extra = 0.0
        added = []
        for t in tails:
            v = graph.sink_offset + t
            extra += add(v)
            added.append(v)
        total = value + extra
        count[0] += 1
        if total < best[0] - 1e-15:
            best[0] = total
            best[1] = np.array(sel, dtype=float)
            best[2] = dict(used)
        for v in reversed(added):
            remove(v)

    def visit(idx: int, value: float) -> None:
        if idx == len(order):
            leaf(value)
            return
        p = order[idx]
        g = group_of[p]
        visit(idx + 1, value)
        # p starts a new track
        if used[g] < budget[g]:
            used[g] += 1
            s = graph.source_offset + p
            dv = add(s)
            dv += add(p)
            tails.append(p)
            visit(idx + 1, value + dv)
            tails.pop()
            remove(p)
            remove(s)
            used[g] -= 1
        # p continues an open track
        for ti in range(len(tails)):
            t = tails[ti]
            cv = conn_into[p].get(t)
            if cv is None:
                continue
            dv = add(cv)
            dv += add(p)
            tails[ti] = p
            visit(idx + 1, value + dv)
            tails[ti] = t
            remove(p)
            remove(cv)

    visit(0, 0.0)
    if best[1] is None:
        raise ValueError("no feasible flow for the requested track budget")
    return OracleResult(best[0], best[1], count[0], best[2])
