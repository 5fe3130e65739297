"""CSV readers and writers for detections, connections, ground truth and tracks.

All files are comma separated with a mandatory header line, 0-indexed frames
and ``.`` as the decimal point.  Floats are written with ``repr`` so that a
parse / write cycle reproduces a file byte for byte.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

from .core_model import BoundingBox, Connection, Detection, Track, TrackSet
from .metrics import GroundTruth

DETECTION_HEADER = ["frame", "id", "x", "y", "w", "h", "score", "class"]
GT_HEADER = ["frame", "track_id", "x", "y", "w", "h"]
CONNECTION_HEADER = ["src_id", "dst_id", "strength"]
TRACK_HEADER = ["frame", "track_id", "x", "y", "w", "h", "score"]


class ParseError(ValueError):
    def __init__(self, path, line: int, column: str | None, message: str):
        where = f"{path}:{line}" + (f" column {column!r}" if column else "")
        super().__init__(f"{where}: {message}")
        self.path, self.line, self.column = path, line, column


def _rows(path, header: list[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [h.strip() for h in first] != header:
            raise ParseError(path, 1, None, f"expected header {','.join(header)}")
        for n, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(path, n, None, f"expected {len(header)} fields, got {len(row)}")
            yield n, dict(zip(header, (cell.strip() for cell in row)))


def _int(path, n, row, col) -> int:
    try:
        return int(row[col])
    except ValueError:
        raise ParseError(path, n, col, f"not an integer: {row[col]!r}") from None


def _float(path, n, row, col) -> float:
    try:
        v = float(row[col])
    except ValueError:
        raise ParseError(path, n, col, f"not a number: {row[col]!r}") from None
    if not math.isfinite(v):
        raise ParseError(path, n, col, f"non-finite value {row[col]!r}")
    return v


def _box(path, n, row) -> BoundingBox:
    x, y, w, h = (_float(path, n, row, c) for c in ("x", "y", "w", "h"))
    for col, v in (("w", w), ("h", h)):
        if v <= 0:
            raise ParseError(path, n, col, f"box size must be positive, got {v}")
    return BoundingBox(x, y, w, h)


def _frame(path, n, row) -> int:
    f = _int(path, n, row, "frame")
    if f < 0:
        raise ParseError(path, n, "frame", "frames are 0-indexed and nonnegative")
    return f


def parse_detections(path) -> list[Detection]:
    dets, seen = [], set()
    for n, row in _rows(path, DETECTION_HEADER):
        det_id = _int(path, n, row, "id")
        if det_id in seen:
            raise ParseError(path, n, "id", f"duplicate detection id {det_id}")
        seen.add(det_id)
        label = row["class"]
        if not label:
            raise ParseError(path, n, "class", "empty class label")
        dets.append(Detection(det_id, _frame(path, n, row), _box(path, n, row), _float(path, n, row, "score"), label))
    return dets


def parse_connections(path) -> list[Connection]:
    return [
        Connection(_int(path, n, row, "src_id"), _int(path, n, row, "dst_id"), _float(path, n, row, "strength"))
        for n, row in _rows(path, CONNECTION_HEADER)
    ]


def parse_ground_truth(path) -> GroundTruth:
    tracks: dict[int, dict[int, BoundingBox]] = {}
    for n, row in _rows(path, GT_HEADER):
        tid = _int(path, n, row, "track_id")
        f = _frame(path, n, row)
        boxes = tracks.setdefault(tid, {})
        if f in boxes:
            raise ParseError(path, n, "frame", f"track {tid} has two boxes in frame {f}")
        boxes[f] = _box(path, n, row)
    return GroundTruth({tid: sorted(b.items()) for tid, b in sorted(tracks.items())})


def parse_tracks(path, class_label: str = "body") -> TrackSet:
    """Read a tracker output file; detections get fresh sequential ids."""
    rows: dict[int, list[tuple[int, BoundingBox, float]]] = {}
    for n, row in _rows(path, TRACK_HEADER):
        rows.setdefault(_int(path, n, row, "track_id"), []).append(
            (_frame(path, n, row), _box(path, n, row), _float(path, n, row, "score"))
        )
    tracks, next_id = [], 0
    for tid in sorted(rows):
        dets = []
        for f, box, score in sorted(rows[tid], key=lambda r: r[0]):
            dets.append(Detection(next_id, f, box, score, class_label))
            next_id += 1
        tracks.append(Track(tid, tuple(dets)))
    return TrackSet(tracks)


def _num(v) -> str:
    return repr(float(v))


def _write(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_detections(path, detections) -> None:
    _write(path, DETECTION_HEADER, (
        [d.frame, d.id, *map(_num, d.box.as_tuple()), _num(d.confidence), d.class_label]
        for d in sorted(detections, key=lambda d: (d.frame, d.id))
    ))


def write_connections(path, connections) -> None:
    _write(path, CONNECTION_HEADER, (
        [c.src, c.dst, _num(c.strength)] for c in sorted(connections, key=lambda c: (c.src, c.dst))
    ))


def write_ground_truth(path, gt: GroundTruth) -> None:
    rows = [(f, tid, b) for tid, boxes in gt.tracks.items() for f, b in boxes]
    rows.sort(key=lambda r: (r[0], r[1]))
    _write(path, GT_HEADER, ([f, tid, *map(_num, b.as_tuple())] for f, tid, b in rows))


def write_tracks(path, tracks: TrackSet) -> None:
    rows = [(d.frame, t.track_id, d) for t in tracks for d in t.detections]
    rows.sort(key=lambda r: (r[0], r[1]))
    _write(path, TRACK_HEADER, ([f, tid, *map(_num, d.box.as_tuple()), _num(d.confidence)] for f, tid, d in rows))


def dump_scenario(out_dir, detections, connections, gt: GroundTruth) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "detections": out / "detections.csv",
        "connections": out / "connections.csv",
        "gt": out / "gt.csv",
    }
    write_detections(paths["detections"], detections)
    write_connections(paths["connections"], connections)
    write_ground_truth(paths["gt"], gt)
    return paths


def write_pr_curves(path, curves) -> None:
    """One row per ranked subtrack: ``delta_t, threshold, precision, recall``."""
    rows = []
    for curve in curves:
        for thr, (rec, prec) in zip(curve.thresholds, curve.points):
            rows.append([curve.delta_t, _num(thr), _num(prec), _num(rec)])
    _write(path, ["delta_t", "threshold", "precision", "recall"], rows)
