"""Tracking graph data model: detections, candidate connections and the flat
variable index over detection, connection, source and sink selections."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

DET, CONN, SOURCE, SINK = "det", "conn", "source", "sink"


class GraphError(ValueError):
    """Raised for structurally invalid tracking graphs."""


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width and height must be positive, got w={self.w} h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + 0.5 * self.w, self.y + 0.5 * self.h

    def top_region(self, frac: float) -> "BoundingBox":
        """The top ``frac`` of the box (same width, reduced height)."""
        return BoundingBox(self.x, self.y, self.w, self.h * frac)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.x, self.y, self.w, self.h


@dataclass(frozen=True)
class Detection:
    id: int
    frame: int
    box: BoundingBox
    confidence: float
    class_label: str = "body"


@dataclass(frozen=True)
class Connection:
    src: int
    dst: int
    strength: float


def iou(a: BoundingBox, b: BoundingBox) -> float:
    if a == b:
        return 1.0
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    # x + w - x can round above w; keep the ratio in range
    return min(1.0, inter / (a.area + b.area - inter))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(n, 4)`` arrays of ``x, y, w, h`` boxes."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = bx1 + b[:, 2], by1 + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0, None)
    inter = iw * ih
    union = (a[:, 2:3] * a[:, 3:4]) + (b[:, 2] * b[:, 3]) - inter
    return np.minimum(inter / union, 1.0)


@dataclass(frozen=True, eq=False)
class TrackingGraph:
    """Immutable flow network over detections.

    Variables are laid out as ``[detections | connections | source edges |
    sink edges]``; detections are ordered by id and connections by
    ``(src, dst)``.  Each class label forms its own independent flow network
    with its own source, sink and track budget.
    """

    detections: tuple[Detection, ...]
    connections: tuple[Connection, ...]
    k: int | Mapping[str, int] = 1
    max_skip: int | None = None
    _pos: dict[int, int] = field(repr=False, default_factory=dict)

    @property
    def n_detections(self) -> int:
        return len(self.detections)

    @property
    def n_connections(self) -> int:
        return len(self.connections)

    @property
    def n_vars(self) -> int:
        return 3 * len(self.detections) + len(self.connections)

    @property
    def conn_offset(self) -> int:
        return len(self.detections)

    @property
    def source_offset(self) -> int:
        return len(self.detections) + len(self.connections)

    @property
    def sink_offset(self) -> int:
        return 2 * len(self.detections) + len(self.connections)

    @cached_property
    def groups(self) -> tuple[str, ...]:
        return tuple(sorted({d.class_label for d in self.detections}))

    def position(self, det_id: int) -> int:
        return self._pos[det_id]

    def detection(self, det_id: int) -> Detection:
        return self.detections[self._pos[det_id]]

    @cached_property
    def _conn_pos(self) -> dict[tuple[int, int], int]:
        return {(c.src, c.dst): n for n, c in enumerate(self.connections)}

    def det_var(self, det_id: int) -> int:
        return self._pos[det_id]

    def conn_var(self, src: int, dst: int) -> int:
        return self.conn_offset + self._conn_pos[(src, dst)]

    def source_var(self, det_id: int) -> int:
        return self.source_offset + self._pos[det_id]

    def sink_var(self, det_id: int) -> int:
        return self.sink_offset + self._pos[det_id]

    def index_of(self, kind: str, key) -> int:
        if kind == DET:
            return self.det_var(key)
        if kind == CONN:
            return self.conn_var(*key)
        if kind == SOURCE:
            return self.source_var(key)
        if kind == SINK:
            return self.sink_var(key)
        raise KeyError(kind)

    def var_of(self, index: int) -> tuple[str, object]:
        """Inverse of :meth:`index_of`: ``(kind, key)`` for a variable slot."""
        if not 0 <= index < self.n_vars:
            raise IndexError(index)
        n, m = len(self.detections), len(self.connections)
        if index < n:
            return DET, self.detections[index].id
        if index < n + m:
            c = self.connections[index - n]
            return CONN, (c.src, c.dst)
        if index < 2 * n + m:
            return SOURCE, self.detections[index - n - m].id
        return SINK, self.detections[index - 2 * n - m].id

    def budget(self, k: int | Mapping[str, int] | None = None) -> dict[str, int]:
        """Resolve a track budget to one integer per class label."""
        k = self.k if k is None else k
        if isinstance(k, Mapping):
            missing = set(self.groups) - set(k)
            if missing:
                raise GraphError(f"no track budget given for classes {sorted(missing)}")
            return {g: int(k[g]) for g in self.groups}
        return {g: int(k) for g in self.groups}

    @cached_property
    def group_of_detection(self) -> np.ndarray:
        lookup = {g: n for n, g in enumerate(self.groups)}
        return np.array([lookup[d.class_label] for d in self.detections], dtype=np.int64)

    @cached_property
    def frames(self) -> np.ndarray:
        return np.array([d.frame for d in self.detections], dtype=np.int64)

    @cached_property
    def boxes(self) -> np.ndarray:
        return np.array([d.box.as_tuple() for d in self.detections], dtype=float).reshape(-1, 4)

    @cached_property
    def conn_endpoints(self) -> np.ndarray:
        """``(m, 2)`` array of detection positions for each connection."""
        return np.array(
            [(self._pos[c.src], self._pos[c.dst]) for c in self.connections], dtype=np.int64
        ).reshape(-1, 2)

    def var_group(self) -> np.ndarray:
        """Group index of every variable."""
        g = self.group_of_detection
        conn_g = g[self.conn_endpoints[:, 0]] if self.connections else np.zeros(0, np.int64)
        return np.concatenate([g, conn_g, g, g])

    @cached_property
    def conservation_matrix(self) -> sparse.csr_matrix:
        """Rows ``in_p: sum(in) - z_p`` and ``out_p: z_p - sum(out)`` per detection.

        A vector is a flow iff this matrix maps it to zero.
        """
        n, m = len(self.detections), len(self.connections)
        rows, cols, vals = [], [], []
        det = np.arange(n)
        ends = self.conn_endpoints
        # in-rows 0..n-1
        rows += [det, det, ends[:, 1]]
        cols += [det, self.source_offset + det, n + np.arange(m)]
        vals += [-np.ones(n), np.ones(n), np.ones(m)]
        # out-rows n..2n-1
        rows += [n + det, n + det, n + ends[:, 0]]
        cols += [det, self.sink_offset + det, n + np.arange(m)]
        vals += [np.ones(n), -np.ones(n), -np.ones(m)]
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(2 * n, self.n_vars),
        )

    def topological_order(self) -> list[int]:
        """Detection positions sorted by ``(frame, id)``; valid since edges go forward in time."""
        return sorted(range(len(self.detections)), key=lambda p: (self.detections[p].frame, self.detections[p].id))


def build_graph(
    detections: Iterable[Detection],
    connections: Iterable[Connection],
    k: int | Mapping[str, int] = 1,
    max_skip: int | None = None,
) -> TrackingGraph:
    dets = sorted(detections, key=lambda d: d.id)
    pos: dict[int, int] = {}
    for p, d in enumerate(dets):
        if d.id in pos:
            raise GraphError(f"duplicate detection id {d.id}")
        if d.frame < 0:
            raise GraphError(f"detection {d.id} has negative frame {d.frame}")
        pos[d.id] = p
    if isinstance(k, Mapping):
        if any(v < 0 for v in k.values()):
            raise GraphError("track budget must be nonnegative")
    elif k < 1:
        raise GraphError(f"K must be at least 1, got {k}")

    conns = sorted(connections, key=lambda c: (c.src, c.dst))
    seen = set()
    for c in conns:
        if c.src not in pos or c.dst not in pos:
            raise GraphError(f"connection {c.src}->{c.dst} references an unknown detection")
        if (c.src, c.dst) in seen:
            raise GraphError(f"duplicate connection {c.src}->{c.dst}")
        seen.add((c.src, c.dst))
        a, b = dets[pos[c.src]], dets[pos[c.dst]]
        if b.frame <= a.frame:
            raise GraphError(
                f"connection {c.src}->{c.dst} does not point forward in time "
                f"(frame {a.frame} -> {b.frame})"
            )
        if max_skip is not None and b.frame - a.frame > max_skip:
            raise GraphError(
                f"connection {c.src}->{c.dst} spans {b.frame - a.frame} frames, max_skip is {max_skip}"
            )
        if a.class_label != b.class_label:
            raise GraphError(
                f"connection {c.src}->{c.dst} links classes {a.class_label!r} and {b.class_label!r}"
            )
        if not math.isfinite(c.strength):
            raise GraphError(f"connection {c.src}->{c.dst} has non-finite strength")
    return TrackingGraph(tuple(dets), tuple(conns), k, max_skip, pos)


def proximity_connections(
    detections: Sequence[Detection],
    max_skip: int,
    radius: float = 1.0,
    strength_scale: float | None = None,
) -> list[Connection]:
    """Connect same-class detections up to ``max_skip`` frames apart whose box
    centers lie within ``radius * max(w, h)`` of the earlier box.

    Strength is ``exp(-d / scale)`` with ``d`` the center distance; ``scale``
    defaults to the earlier box's larger side.
    """
    by_frame: dict[tuple[str, int], list[Detection]] = defaultdict(list)
    for d in detections:
        by_frame[(d.class_label, d.frame)].append(d)
    arrays = {}
    for key, ds in by_frame.items():
        ds.sort(key=lambda d: d.id)
        b = np.array([d.box.as_tuple() for d in ds], dtype=float)
        arrays[key] = (ds, b[:, 0] + 0.5 * b[:, 2], b[:, 1] + 0.5 * b[:, 3], np.maximum(b[:, 2], b[:, 3]))

    out = []
    for (label, frame), (ds, cx, cy, size) in sorted(arrays.items()):
        for gap in range(1, max_skip + 1):
            nxt = arrays.get((label, frame + gap))
            if nxt is None:
                continue
            ds2, cx2, cy2, _ = nxt
            dist = np.hypot(cx[:, None] - cx2[None, :], cy[:, None] - cy2[None, :])
            limit = radius * size[:, None]
            scale = size[:, None] if strength_scale is None else strength_scale
            strength = np.exp(-dist / scale)
            for i, j in zip(*np.nonzero(dist <= limit)):
                out.append(Connection(ds[i].id, ds2[j].id, float(strength[i, j])))
    out.sort(key=lambda c: (c.src, c.dst))
    return out


def assemble_cost_vector(
    graph: TrackingGraph,
    det_weight: float = 1.0,
    conn_weight: float = 1.0,
    start_cost: float = 0.0,
    end_cost: float = 0.0,
) -> np.ndarray:
    c = np.empty(graph.n_vars)
    n = graph.n_detections
    c[:n] = [-det_weight * d.confidence for d in graph.detections]
    c[n:graph.source_offset] = [-conn_weight * cn.strength for cn in graph.connections]
    c[graph.source_offset:graph.sink_offset] = start_cost
    c[graph.sink_offset:] = end_cost
    if not np.all(np.isfinite(c)):
        raise ValueError("cost vector contains non-finite entries")
    return c


@dataclass(frozen=True)
class Track:
    """One decoded trajectory: detections in time order plus the strengths of
    the connections used between consecutive detections."""

    track_id: int
    detections: tuple[Detection, ...]
    link_strengths: tuple[float, ...] = ()

    @property
    def frames(self) -> list[int]:
        return [d.frame for d in self.detections]

    @property
    def class_label(self) -> str:
        return self.detections[0].class_label if self.detections else ""


@dataclass
class TrackSet:
    tracks: list[Track] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tracks)

    def __iter__(self):
        return iter(self.tracks)

    def only(self, class_label: str) -> "TrackSet":
        return TrackSet([t for t in self.tracks if t.class_label == class_label])

    def by_frame(self) -> dict[int, list[tuple[int, Detection]]]:
        """``frame -> [(track_id, detection), ...]``."""
        out: dict[int, list[tuple[int, Detection]]] = defaultdict(list)
        for t in self.tracks:
            for d in t.detections:
                out[d.frame].append((t.track_id, d))
        return dict(out)
