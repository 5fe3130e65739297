"""Sparse pairwise costs over selection variables.

A :class:`PairwiseCostSet` stores a sparse symmetric matrix ``Q`` by its
upper triangle: an entry ``(i, j, q)`` with ``i < j`` means
``Q[i, j] = Q[j, i] = q``, so it adds ``2 q z_i z_j`` to ``z^T Q z``.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from .core_model import GraphError, TrackingGraph, iou_matrix

log = logging.getLogger(__name__)

DEFAULT_Q_OV = 0.0223
DEFAULT_Q_CO = 0.0223
DEFAULT_O_THRES = 0.5
DEFAULT_HEAD_REGION = 0.25


@dataclass(frozen=True, eq=False)
class PairwiseCostSet:
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    n_vars: int

    @classmethod
    def from_entries(cls, entries, n_vars: int) -> "PairwiseCostSet":
        """Canonicalize ``(i, j, q)`` triples: order each pair, sum repeats, drop zeros."""
        acc: dict[tuple[int, int], float] = defaultdict(float)
        for i, j, q in entries:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"pairwise entry on the diagonal ({i}, {i})")
            if not (0 <= i < n_vars and 0 <= j < n_vars):
                raise IndexError(f"pairwise entry ({i}, {j}) outside {n_vars} variables")
            acc[(min(i, j), max(i, j))] += float(q)
        keys = sorted(k for k, v in acc.items() if v != 0.0)
        rows = np.array([k[0] for k in keys], dtype=np.int64)
        cols = np.array([k[1] for k in keys], dtype=np.int64)
        vals = np.array([acc[k] for k in keys], dtype=float)
        return cls(rows, cols, vals, n_vars)

    @classmethod
    def empty(cls, n_vars: int) -> "PairwiseCostSet":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), n_vars)

    def __len__(self) -> int:
        return len(self.vals)

    def entries(self):
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.vals.tolist()))

    def merge(self, other: "PairwiseCostSet") -> "PairwiseCostSet":
        if other.n_vars != self.n_vars:
            raise ValueError("cannot merge cost sets over different variable spaces")
        return PairwiseCostSet.from_entries(self.entries() + other.entries(), self.n_vars)

    def scaled(self, factor: float) -> "PairwiseCostSet":
        return PairwiseCostSet(self.rows, self.cols, self.vals * factor, self.n_vars)

    def upper(self) -> sparse.csr_matrix:
        return sparse.csr_matrix((self.vals, (self.rows, self.cols)), shape=(self.n_vars, self.n_vars))

    def matrix(self) -> sparse.csr_matrix:
        """The full symmetric ``Q``."""
        u = self.upper()
        return (u + u.T).tocsr()

    def symmetric(self) -> sparse.csr_matrix:
        """``Q + Q^T``; its product with ``z`` is the gradient of ``z^T Q z``."""
        return 2.0 * self.matrix()

    def value(self, z) -> float:
        """``z^T Q z``."""
        z = np.asarray(z, dtype=float)
        if len(self.vals) == 0:
            return 0.0
        return 2.0 * float(np.sum(self.vals * z[self.rows] * z[self.cols]))

    def abs_sum(self) -> float:
        """``sum |Q_ij|`` over the full matrix (each stored entry counts twice)."""
        return 2.0 * float(np.abs(self.vals).sum())

    def abs_row_sums(self) -> np.ndarray:
        """``sum_{j != i} |Q_ij|`` for every variable ``i``."""
        a = np.abs(self.vals)
        return np.bincount(self.rows, a, self.n_vars) + np.bincount(self.cols, a, self.n_vars)


def objective_value(c, q: PairwiseCostSet, z) -> float:
    """``c.z + z^T Q z`` for any (possibly fractional) ``z``."""
    z = np.asarray(z, dtype=float)
    return float(np.dot(c, z)) + q.value(z)


@dataclass(frozen=True, eq=False)
class ShiftedObjective:
    """Convex surrogate ``c_adjusted.z + sum diag_i z_i^2 + z^T Q z``.

    Agrees with the original objective on binary vectors.
    """

    q: PairwiseCostSet
    diag: np.ndarray
    c_adjusted: np.ndarray
    normalization: float = 1.0

    @property
    def n_vars(self) -> int:
        return self.q.n_vars

    def value(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(self.c_adjusted @ z + self.diag @ (z * z)) + self.q.value(z)

    def gradient(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return self.c_adjusted + 2.0 * self.diag * z + self._grad_q @ z

    def curvature(self, d) -> float:
        """Quadratic part ``d^T Q_shifted d`` along a direction."""
        d = np.asarray(d, dtype=float)
        return float(self.diag @ (d * d)) + self.q.value(d)

    @cached_property
    def _grad_q(self) -> sparse.csr_matrix:
        return self.q.symmetric()


def diagonal_shift(c, q: PairwiseCostSet, normalization: float = 1.0) -> ShiftedObjective:
    """Make the quadratic form diagonally dominant and compensate in the linear term.

    Since ``z_i^2 = z_i`` on binary points, moving ``diag_i`` from the linear
    to the squared term leaves every integer objective value unchanged.
    """
    c = np.asarray(c, dtype=float)
    if c.shape != (q.n_vars,):
        raise ValueError(f"cost vector has length {c.shape[0]}, pairwise set spans {q.n_vars}")
    diag = q.abs_row_sums()
    return ShiftedObjective(q=q, diag=diag, c_adjusted=c - diag, normalization=normalization)


def normalize_objective(c, q: PairwiseCostSet) -> tuple[np.ndarray, PairwiseCostSet, float]:
    """Scale costs so that ``|objective| <= 1`` on the unit box.

    The scale is ``sum |c_v| + sum |Q_ij|`` over the full matrix, which bounds
    the objective at any point of ``[0, 1]^n`` and hence on the flow polytope.
    """
    c = np.asarray(c, dtype=float)
    scale = float(np.abs(c).sum()) + q.abs_sum()
    if scale == 0.0:
        return c.copy(), q, 1.0
    return c / scale, q.scaled(1.0 / scale), scale


def _by_class_frame(graph: TrackingGraph):
    groups = defaultdict(list)
    for p, d in enumerate(graph.detections):
        groups[(d.class_label, d.frame)].append(p)
    return {k: np.array(v, dtype=np.int64) for k, v in groups.items()}


def build_overlap_costs(
    graph: TrackingGraph,
    q_ov: float = DEFAULT_Q_OV,
    o_thres: float = DEFAULT_O_THRES,
) -> PairwiseCostSet:
    """Penalize joint selection of same-class detections in one frame whose
    boxes overlap by at least ``o_thres`` IoU."""
    if q_ov <= 0:
        raise ValueError("overlap penalty must be positive")
    if not 0 < o_thres <= 1:
        raise ValueError("overlap threshold must lie in (0, 1]")
    boxes = graph.boxes
    entries = []
    for pos in _by_class_frame(graph).values():
        if len(pos) < 2:
            continue
        ov = iou_matrix(boxes[pos], boxes[pos])
        a, b = np.nonzero(np.triu(ov >= o_thres, k=1))
        # detection variables share slots with detection positions
        entries += [(int(pos[i]), int(pos[j]), q_ov) for i, j in zip(a, b)]
    return PairwiseCostSet.from_entries(entries, graph.n_vars)


def interpolate_box(box_a, box_b, frame_a: int, frame_b: int, frame: int) -> np.ndarray:
    """Linear interpolation of ``x, y, w, h`` between two boxes at ``frame``."""
    t = (frame - frame_a) / (frame_b - frame_a)
    return (1.0 - t) * np.asarray(box_a, dtype=float) + t * np.asarray(box_b, dtype=float)


def _top(boxes: np.ndarray, frac: float) -> np.ndarray:
    out = np.array(boxes, dtype=float, copy=True).reshape(-1, 4)
    out[:, 3] *= frac
    return out


def build_cooccurrence_costs(
    graph: TrackingGraph,
    q_co: float = DEFAULT_Q_CO,
    o_thres: float = DEFAULT_O_THRES,
    head_region_frac: float = DEFAULT_HEAD_REGION,
    head_label: str = "head",
    body_label: str = "body",
) -> PairwiseCostSet:
    """Reward consistent selection of head and body variables in a stacked graph.

    Two variables are consistent when

    * a head detection overlaps the top ``head_region_frac`` of a body
      detection in the same frame by at least ``o_thres`` IoU, or
    * a detection of one class overlaps, in the same sense, the box swept by
      a frame-skipping connection of the other class, linearly interpolated
      at the detection's frame.
    """
    if q_co <= 0:
        raise ValueError("co-occurrence reward must be positive")
    labels = set(graph.groups)
    if head_label not in labels or body_label not in labels:
        raise GraphError(f"co-occurrence needs both {head_label!r} and {body_label!r} detections")
    frames = graph.frames
    cls = np.array([d.class_label for d in graph.detections])
    hf, bf = frames[cls == head_label], frames[cls == body_label]
    if hf.max() < bf.min() or bf.max() < hf.min():
        raise GraphError(
            f"head frames [{hf.min()}, {hf.max()}] and body frames [{bf.min()}, {bf.max()}] do not overlap"
        )

    boxes = graph.boxes
    by_frame = _by_class_frame(graph)
    entries = []

    # head detection vs body detection, same frame
    for (label, frame), hpos in by_frame.items():
        if label != head_label:
            continue
        bpos = by_frame.get((body_label, frame))
        if bpos is None:
            continue
        ov = iou_matrix(boxes[hpos], _top(boxes[bpos], head_region_frac))
        for i, j in zip(*np.nonzero(ov >= o_thres)):
            entries.append((int(hpos[i]), int(bpos[j]), -q_co))

    # detection of one class vs skip edge of the other
    ends = graph.conn_endpoints
    for ci, (a, b) in enumerate(ends):
        fa, fb = frames[a], frames[b]
        if fb - fa < 2:
            continue
        edge_label = cls[a]
        if edge_label == body_label:
            other, edge_is_body = head_label, True
        elif edge_label == head_label:
            other, edge_is_body = body_label, False
        else:
            continue
        var = graph.conn_offset + ci
        for f in range(fa + 1, fb):
            pos = by_frame.get((other, int(f)))
            if pos is None:
                continue
            swept = interpolate_box(boxes[a], boxes[b], fa, fb, f)
            if edge_is_body:
                ov = iou_matrix(boxes[pos], _top(swept, head_region_frac))[:, 0]
            else:
                ov = iou_matrix(swept, _top(boxes[pos], head_region_frac))[0]
            for i in np.nonzero(ov >= o_thres)[0]:
                entries.append((int(pos[i]), var, -q_co))

    log.debug("co-occurrence: %d entries", len(entries))
    return PairwiseCostSet.from_entries(entries, graph.n_vars)
