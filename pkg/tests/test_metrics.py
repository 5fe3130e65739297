import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtrack.core_model import BoundingBox, Detection, Track, TrackSet
from flowtrack.metrics import (
    GroundTruth,
    average_precision,
    clear_mot,
    enumerate_subtracks,
    median_track_length,
    redetection_ap,
    redetection_profile,
)

from oracles import detection_ap, perfect_tracks, random_confidences, straight_gt, swap_tails


def b(x, y=0.0):
    return BoundingBox(float(x), float(y), 10.0, 10.0)


def make_track(tid, frames_xs, start_id=0):
    dets = tuple(Detection(start_id + n, f, b(x), 1.0) for n, (f, x) in enumerate(frames_xs))
    return Track(tid, dets, tuple([1.0] * (len(dets) - 1)))


def test_ground_truth_validation():
    with pytest.raises(ValueError):
        GroundTruth({1: [(1, b(0)), (1, b(5))]})
    with pytest.raises(ValueError):
        GroundTruth({1: [(2, b(0)), (1, b(5))]})
    with pytest.raises(ValueError):
        GroundTruth({1: []})
    assert GroundTruth({1: [(3, b(0)), (7, b(0))]}).frame_range == (3, 7)


def test_average_precision_staircase():
    # precision envelope: 1.0 up to recall 0.5, 2/3 up to recall 1.0
    assert average_precision([0.5, 0.5, 1.0], [1.0, 0.5, 2 / 3]) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert average_precision([], []) == 0.0


def test_subtracks_and_confidence():
    dets = (Detection(0, 0, b(0), 0.5), Detection(1, 1, b(0), 0.25), Detection(2, 3, b(0), 1.0))
    t = Track(1, dets, (0.1, 0.2))
    subs = enumerate_subtracks(TrackSet([t]), 2)
    assert [(s.a.frame, s.b.frame) for s in subs] == [(1, 3)]
    assert subs[0].confidence == pytest.approx(0.25 + 1.0 + 0.2)
    subs = enumerate_subtracks(TrackSet([t]), 3)
    assert subs[0].confidence == pytest.approx(0.5 + 0.25 + 1.0 + 0.1 + 0.2)
    assert all(s.delta_t == 0 for s in enumerate_subtracks(TrackSet([t]), 0))


def test_perfect_tracker():
    gt = straight_gt(3, 12)
    ts = perfect_tracks(gt)
    for dt in range(0, 12):
        curve = redetection_ap(ts, gt, dt)
        assert curve.ap == pytest.approx(1.0, abs=1e-12)
        recalls = [r for r, _ in curve.points]
        assert recalls == sorted(recalls)
    rep = clear_mot(ts, gt)
    assert rep.mota == 1.0 and rep.id_switches == 0 and rep.mostly_tracked == 3
    assert rep.motp == 1.0 and isinstance(rep.motp, float)
    assert [ap for _, ap in redetection_profile(ts, gt)] == pytest.approx([1.0] * 12, abs=1e-12)


def test_id_switch_lowers_ap_only_when_spanned():
    gt = straight_gt(2, 10, spacing=0.0)
    gt = GroundTruth({0: gt.tracks[0], 1: [(f, b(40)) for f in range(10)]})
    clean = perfect_tracks(gt)
    switched = swap_tails(clean, 0, 1, 5)
    assert redetection_ap(switched, gt, 0).ap == 1.0
    for dt in range(1, 10):
        curve = redetection_ap(switched, gt, dt)
        straddle = [s for s in curve.subtracks if s.a.frame < 5 <= s.b.frame]
        assert straddle and all(s.label == "fp" for s in straddle)
        assert curve.ap < redetection_ap(clean, gt, dt).ap


def test_duplicate_subtracks_only_one_true_positive():
    gt = GroundTruth({0: [(0, b(0)), (1, b(0))]})
    ts = TrackSet([make_track(1, [(0, 0), (1, 0)]), make_track(2, [(0, 1), (1, 1)], start_id=10)])
    curve = redetection_ap(ts, gt, 1)
    assert sorted(s.label for s in curve.subtracks) == ["fp", "tp"]
    assert curve.ap == 1.0
    assert curve.points[-1] == (1.0, 0.5)


def test_fragmented_tracker():
    gt = straight_gt(2, 30)
    frags = []
    for t in perfect_tracks(gt):
        for start in range(0, 30, 5):
            piece = t.detections[start:start + 5]
            frags.append(Track(len(frags), piece, tuple([1.0] * (len(piece) - 1))))
    ts = TrackSet(frags)
    for dt in range(0, 5):
        assert redetection_ap(ts, gt, dt).ap > 0
    for dt in range(5, 29):
        assert redetection_ap(ts, gt, dt).ap == 0.0


def test_empty_trackset():
    gt = straight_gt(2, 8)
    assert all(ap == 0.0 for _, ap in redetection_profile(TrackSet([]), gt, [0, 1, 4]))
    rep = clear_mot(TrackSet([]), gt)
    assert rep.false_negatives == 16 and rep.mota == 0.0 and rep.mostly_lost == 2


def test_delta_t_out_of_range(caplog):
    gt = straight_gt(1, 5)
    with caplog.at_level(logging.WARNING):
        curve = redetection_ap(perfect_tracks(gt), gt, 9)
    assert curve.ap == 0.0 and curve.points == []
    assert "exceeds" in caplog.text
    with pytest.raises(ValueError):
        redetection_ap(perfect_tracks(gt), gt, -1)
    with pytest.raises(ValueError):
        redetection_profile(perfect_tracks(gt), gt, [])


def test_median_track_length():
    gt = GroundTruth({0: [(0, b(0)), (4, b(0))], 1: [(2, b(0)), (12, b(0))], 2: [(0, b(0)), (6, b(0))]})
    assert median_track_length(gt) == 6


def test_delta_zero_matches_detection_ap():
    rng = np.random.default_rng(0)
    gt = straight_gt(4, 10)
    # jittered copies, some extra false boxes
    tracks = []
    for t in perfect_tracks(gt):
        dets = tuple(Detection(d.id, d.frame, BoundingBox(d.box.x + rng.normal(0, 2), 0.0, 10, 10), float(rng.uniform())) for d in t.detections)
        tracks.append(Track(t.track_id, dets, t.link_strengths))
    tracks.append(Track(99, tuple(Detection(1000 + f, f, b(500), float(rng.uniform())) for f in range(10)), ()))
    ts = TrackSet(tracks)
    all_dets = [d for t in ts for d in t.detections]
    assert redetection_ap(ts, gt, 0).ap == pytest.approx(detection_ap(all_dets, gt), abs=1e-12)


# CLEAR-MOT

def golden_clear():
    """GT A at x=0, B at x=100 over frames 0-5.

    Track 1 follows A then B from frame 3; track 2 follows B then A from
    frame 3 but misses A at frame 4; track 3 is one spurious box.
    """
    gt = GroundTruth({
        1: [(f, b(0)) for f in range(6)],
        2: [(f, b(100)) for f in range(6)],
    })
    t1 = make_track(1, [(0, 0), (1, 0), (2, 0), (3, 100), (4, 100), (5, 100)])
    t2 = make_track(2, [(0, 100), (1, 100), (2, 100), (3, 0), (5, 0)], start_id=10)
    t3 = Track(3, (Detection(20, 1, b(300, 300), 1.0),), ())
    return TrackSet([t1, t2, t3]), gt


def test_clear_mot_golden():
    # bookkeeping by hand: 12 GT boxes, 11 matches, frame 3 switches both GT ids,
    # A is missed once at frame 4 (one FN and one fragmentation), one FP at frame 1
    ts, gt = golden_clear()
    rep = clear_mot(ts, gt)
    assert rep.n_gt_boxes == 12 and rep.n_matches == 11
    assert rep.false_negatives == 1
    assert rep.false_positives == 1
    assert rep.id_switches == 2
    assert rep.fragmentations == 1
    assert rep.mota == pytest.approx(1 - 4 / 12)
    assert rep.mostly_tracked == 2 and rep.partially_tracked == 0 and rep.mostly_lost == 0
    assert rep.recall == pytest.approx(11 / 12) and rep.precision == pytest.approx(11 / 12)
    assert rep.motp == 1.0


def test_clear_mota_formula_example():
    # 10 GT boxes, one missed, one extra box, no switches
    gt = GroundTruth({1: [(f, b(0)) for f in range(5)], 2: [(f, b(100)) for f in range(5)]})
    t1 = make_track(1, [(f, 0) for f in range(5)])
    t2 = make_track(2, [(f, 100) for f in range(4)], start_id=10)
    t3 = Track(3, (Detection(50, 2, b(400), 1.0),), ())
    rep = clear_mot(TrackSet([t1, t2, t3]), gt)
    assert (rep.false_negatives, rep.false_positives, rep.id_switches) == (1, 1, 0)
    assert rep.mota == pytest.approx(0.8)


def test_clear_persistence_keeps_previous_match():
    # hypothesis 2 stays on GT 1 even though hypothesis 1 fits better at frame 1
    gt = GroundTruth({1: [(0, b(0)), (1, b(0))]})
    h1 = Track(1, (Detection(0, 1, b(0), 1.0),), ())
    h2 = Track(2, (Detection(1, 0, b(2), 1.0), Detection(2, 1, b(2), 1.0)), (1.0,))
    rep = clear_mot(TrackSet([h1, h2]), gt)
    assert rep.id_switches == 0 and rep.false_positives == 1


def test_clear_iou_threshold():
    gt = GroundTruth({1: [(0, b(0))]})
    ts = TrackSet([Track(1, (Detection(0, 0, b(5), 1.0),), ())])  # iou 1/3
    assert clear_mot(ts, gt, 0.5).n_matches == 0
    assert clear_mot(ts, gt, 0.3).n_matches == 1


# properties

@st.composite
def random_tracking(draw):
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    n_frames = int(rng.integers(2, 10))
    boxes = {
        t: [(f, b(rng.uniform(0, 60), rng.uniform(0, 20))) for f in range(n_frames) if rng.random() < 0.8]
        for t in range(int(rng.integers(1, 4)))
    }
    gt = GroundTruth({t: v for t, v in boxes.items() if v} or {0: [(0, b(0))]})
    tracks, nid = [], 0
    for t in range(int(rng.integers(0, 5))):
        frames = sorted(set(rng.integers(0, n_frames, size=int(rng.integers(1, n_frames + 1))).tolist()))
        dets = []
        for f in frames:
            dets.append(Detection(nid, f, b(rng.uniform(0, 60), rng.uniform(0, 20)), float(rng.uniform())))
            nid += 1
        tracks.append(Track(t, tuple(dets), tuple(rng.uniform(size=len(dets) - 1).tolist())))
    return TrackSet(tracks), gt, n_frames


@settings(max_examples=100, deadline=None)
@given(random_tracking(), st.integers(0, 10))
def test_metric_bounds(case, dt):
    ts, gt, _ = case
    curve = redetection_ap(ts, gt, dt)
    assert 0.0 <= curve.ap <= 1.0
    for r, p in curve.points:
        assert 0.0 <= r <= 1.0 and 0.0 <= p <= 1.0
    rep = clear_mot(ts, gt)
    assert rep.mota <= 1.0
    assert (rep.mota == 1.0) == (rep.false_negatives + rep.false_positives + rep.id_switches == 0)
    assert rep.mostly_tracked + rep.partially_tracked + rep.mostly_lost == rep.n_gt_tracks


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_switches_never_raise_ap(seed, n_switches):
    rng = np.random.default_rng(seed)
    gt = straight_gt(4, 12)
    ts = perfect_tracks(gt)
    for _ in range(n_switches):
        a, c = rng.choice(4, 2, replace=False)
        ts = swap_tails(ts, int(a), int(c), int(rng.integers(1, 12)))
    for dt in range(1, 12):
        assert redetection_ap(ts, gt, dt).ap <= 1.0
    assert redetection_ap(ts, gt, 0).ap == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_delta_zero_oracle_property(seed):
    rng = np.random.default_rng(seed)
    gt = straight_gt(3, 6, spacing=12.0)
    ts = random_confidences(perfect_tracks(gt), rng)
    jittered = []
    for t in ts:
        dets = tuple(Detection(d.id, d.frame, BoundingBox(d.box.x + rng.normal(0, 3), rng.normal(0, 3), 10, 10), d.confidence) for d in t.detections)
        jittered.append(Track(t.track_id, dets, t.link_strengths))
    ts = TrackSet(jittered)
    assert redetection_ap(ts, gt, 0).ap == pytest.approx(detection_ap([d for t in ts for d in t.detections], gt), abs=1e-12)
