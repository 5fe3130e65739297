"""Tracking evaluation: the re-detection measure and CLEAR-MOT metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core_model import BoundingBox, Detection, TrackSet, iou

log = logging.getLogger(__name__)

TP, FP = "tp", "fp"


@dataclass
class GroundTruth:
    tracks: dict[int, list[tuple[int, BoundingBox]]]
    frame_range: tuple[int, int] | None = None

    def __post_init__(self):
        for tid, boxes in self.tracks.items():
            frames = [f for f, _ in boxes]
            if not frames:
                raise ValueError(f"ground-truth track {tid} has no boxes")
            if frames != sorted(frames) or len(set(frames)) != len(frames):
                raise ValueError(f"ground-truth track {tid} must have sorted, unique frames")
        if self.frame_range is None:
            frames = [f for boxes in self.tracks.values() for f, _ in boxes]
            self.frame_range = (min(frames), max(frames)) if frames else (0, -1)

    def by_frame(self) -> dict[int, list[tuple[int, BoundingBox]]]:
        out: dict[int, list[tuple[int, BoundingBox]]] = {}
        for tid in sorted(self.tracks):
            for f, b in self.tracks[tid]:
                out.setdefault(f, []).append((tid, b))
        return out


@dataclass
class Subtrack:
    track_id: int
    a: Detection
    b: Detection
    confidence: float
    label: str = "unassigned"
    gt_track: int | None = None

    @property
    def delta_t(self) -> int:
        return self.b.frame - self.a.frame


@dataclass
class PRCurve:
    delta_t: int
    points: list[tuple[float, float]]
    thresholds: list[float]
    ap: float
    n_positives: int
    subtracks: list[Subtrack] = field(default_factory=list, repr=False)


def average_precision(recall, precision) -> float:
    """Area under the precision envelope of a PR curve (all-points interpolation)."""
    recall = np.asarray(recall, dtype=float)
    precision = np.asarray(precision, dtype=float)
    if recall.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def enumerate_subtracks(tracks: TrackSet, delta_t: int) -> list[Subtrack]:
    """All detection pairs exactly ``delta_t`` frames apart on one track.

    Confidence sums the detection confidences and link strengths from the
    first to the last detection of the pair.
    """
    out = []
    for track in tracks:
        dets = track.detections
        frame_idx = {d.frame: n for n, d in enumerate(dets)}
        links = list(track.link_strengths) + [0.0] * max(0, len(dets) - 1 - len(track.link_strengths))
        conf_prefix = np.concatenate([[0.0], np.cumsum([d.confidence for d in dets])])
        link_prefix = np.concatenate([[0.0], np.cumsum(links)]) if links else np.zeros(1)
        for ia, a in enumerate(dets):
            ib = frame_idx.get(a.frame + delta_t)
            if ib is None:
                continue
            conf = conf_prefix[ib + 1] - conf_prefix[ia] + link_prefix[ib] - link_prefix[ia]
            out.append(Subtrack(track.track_id, a, dets[ib], float(conf)))
    return out


def redetection_ap(tracks: TrackSet, gt: GroundTruth, delta_t: int, iou_thresh: float = 0.5) -> PRCurve:
    """Average precision of subtracks at a fixed temporal offset.

    Subtracks are visited by decreasing confidence.  A subtrack ``(A_t, B_t+dt)``
    is a true positive when some still unclaimed ground-truth track overlaps
    ``A`` at ``t`` and ``B`` at ``t + dt``; it claims the best such pair.
    """
    if delta_t < 0:
        raise ValueError("delta_t must be nonnegative")
    lo, hi = gt.frame_range
    gt_boxes = {tid: dict(boxes) for tid, boxes in gt.tracks.items()}
    n_pos = sum(1 for boxes in gt_boxes.values() for f in boxes if f + delta_t in boxes)
    if delta_t > hi - lo:
        log.warning("delta_t=%d exceeds the ground-truth frame range %s", delta_t, gt.frame_range)
        return PRCurve(delta_t, [], [], 0.0, n_pos)

    by_frame = gt.by_frame()
    subs = enumerate_subtracks(tracks, delta_t)
    order = sorted(range(len(subs)), key=lambda n: (-subs[n].confidence, subs[n].track_id, subs[n].a.frame))
    claimed = set()
    tp = np.zeros(len(subs))
    for rank, n in enumerate(order):
        s = subs[n]
        best, best_ov = None, -1.0
        for tid, box in by_frame.get(s.a.frame, ()):
            box_b = gt_boxes[tid].get(s.b.frame)
            if box_b is None or (tid, s.a.frame) in claimed:
                continue
            ov = min(iou(s.a.box, box), iou(s.b.box, box_b))
            if ov >= iou_thresh and ov > best_ov:
                best, best_ov = tid, ov
        if best is not None:
            claimed.add((best, s.a.frame))
            s.label, s.gt_track = TP, best
            tp[rank] = 1
        else:
            s.label = FP
    ranked = [subs[n] for n in order]
    if n_pos == 0:
        log.warning("no ground-truth pairs at delta_t=%d", delta_t)
        return PRCurve(delta_t, [], [s.confidence for s in ranked], 0.0, 0, ranked)
    ctp = np.cumsum(tp)
    recall = ctp / n_pos
    precision = ctp / np.arange(1, len(subs) + 1)
    return PRCurve(
        delta_t=delta_t,
        points=list(zip(recall.tolist(), precision.tolist())),
        thresholds=[s.confidence for s in ranked],
        ap=average_precision(recall, precision),
        n_positives=n_pos,
        subtracks=ranked,
    )


def median_track_length(gt: GroundTruth) -> int:
    """Median frame span (last minus first frame) of the ground-truth tracks."""
    spans = [boxes[-1][0] - boxes[0][0] for boxes in gt.tracks.values() if boxes]
    return int(np.median(spans)) if spans else 0


def redetection_profile(tracks: TrackSet, gt: GroundTruth, delta_ts=None, iou_thresh: float = 0.5) -> list[tuple[int, float]]:
    if delta_ts is None:
        delta_ts = range(0, median_track_length(gt) + 1)
    delta_ts = list(delta_ts)
    if not delta_ts:
        raise ValueError("delta_ts must be nonempty")
    return [(dt, redetection_ap(tracks, gt, dt, iou_thresh).ap) for dt in delta_ts]


@dataclass
class MOTReport:
    recall: float
    precision: float
    n_gt_tracks: int
    mostly_tracked: int
    partially_tracked: int
    mostly_lost: int
    false_positives: int
    false_negatives: int
    id_switches: int
    fragmentations: int
    mota: float
    motp: float
    n_gt_boxes: int
    n_matches: int

    def as_dict(self) -> dict:
        return asdict(self)


def clear_mot(tracks: TrackSet, gt: GroundTruth, iou_thresh: float = 0.5) -> MOTReport:
    """CLEAR-MOT bookkeeping with correspondence persistence and per-frame
    optimal assignment of the remaining boxes."""
    hyp_by_frame = tracks.by_frame()
    gt_by_frame = gt.by_frame()
    last_match: dict[int, int] = {}
    matched: dict[int, dict[int, bool]] = {tid: {} for tid in gt.tracks}
    fp = fn = idsw = n_match = 0
    iou_sum = 0.0

    for f in sorted(set(hyp_by_frame) | set(gt_by_frame)):
        gts = gt_by_frame.get(f, [])
        hyps = {}
        for hid, det in hyp_by_frame.get(f, []):
            hyps.setdefault(hid, det.box)
        pairs: dict[int, int] = {}
        used = set()
        for gid, gbox in gts:
            hid = last_match.get(gid)
            if hid is not None and hid in hyps and hid not in used:
                ov = iou(gbox, hyps[hid])
                if ov >= iou_thresh:
                    pairs[gid] = hid
                    used.add(hid)
                    iou_sum += ov
        free_g = [(gid, b) for gid, b in gts if gid not in pairs]
        free_h = [(hid, b) for hid, b in sorted(hyps.items()) if hid not in used]
        if free_g and free_h:
            ov = np.array([[iou(gb, hb) for _, hb in free_h] for _, gb in free_g])
            cost = np.where(ov >= iou_thresh, 1.0 - ov, 1e6)
            rows, cols = linear_sum_assignment(cost)
            for r, c in zip(rows, cols):
                if ov[r, c] < iou_thresh:
                    continue
                gid, hid = free_g[r][0], free_h[c][0]
                if gid in last_match and last_match[gid] != hid:
                    idsw += 1
                pairs[gid] = hid
                used.add(hid)
                iou_sum += float(ov[r, c])
        for gid, _ in gts:
            hit = gid in pairs
            matched[gid][f] = hit
            if hit:
                last_match[gid] = pairs[gid]
        n_match += len(pairs)
        fn += len(gts) - len(pairs)
        fp += len(hyps) - len(used)

    mt = pt = ml = frag = 0
    for gid, flags in matched.items():
        seq = [flags[f] for f in sorted(flags)]
        if not seq:
            continue
        ratio = sum(seq) / len(seq)
        if ratio >= 0.8:
            mt += 1
        elif ratio < 0.2:
            ml += 1
        else:
            pt += 1
        hits = [n for n, v in enumerate(seq) if v]
        if hits:
            span = seq[hits[0]:hits[-1] + 1]
            frag += sum(1 for a, b in zip(span, span[1:]) if a and not b)

    n_gt = sum(len(b) for b in gt.tracks.values())
    return MOTReport(
        recall=n_match / n_gt if n_gt else 0.0,
        precision=n_match / (n_match + fp) if n_match + fp else 0.0,
        n_gt_tracks=len(gt.tracks),
        mostly_tracked=mt,
        partially_tracked=pt,
        mostly_lost=ml,
        false_positives=fp,
        false_negatives=fn,
        id_switches=idsw,
        fragmentations=frag,
        mota=1.0 - (fn + fp + idsw) / n_gt if n_gt else math.nan,
        motp=iou_sum / n_match if n_match else 0.0,
        n_gt_boxes=n_gt,
        n_matches=n_match,
    )
