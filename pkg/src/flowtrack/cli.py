"""Batch tracking pipeline and command-line entry points.

``flowtrack`` reads detections (and optionally connections and ground truth),
builds the tracking graph, adds pairwise costs, solves the relaxation, rounds,
decodes tracks and writes every artifact into one output directory.
``flowtrack-scenario`` writes a synthetic scenario in the same file formats.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import io
from .core_model import GraphError, TrackSet, assemble_cost_vector, build_graph, proximity_connections
from .metrics import GroundTruth, MOTReport, PRCurve, clear_mot, median_track_length, redetection_ap
from .mincost_flow import InfeasibleFlowError, solve_best_k
from .pairwise import (
    DEFAULT_HEAD_REGION,
    DEFAULT_O_THRES,
    DEFAULT_Q_CO,
    DEFAULT_Q_OV,
    PairwiseCostSet,
    build_cooccurrence_costs,
    build_overlap_costs,
    diagonal_shift,
    normalize_objective,
)
from .scenarios import KINDS, ScenarioSpec, generate
from .solver import (
    FRANK_WOLFE,
    HAMMING,
    Certificate,
    RelaxedSolution,
    certificate,
    export_local_lp,
    extract_tracks,
    frank_wolfe_relax,
    frank_wolfe_round,
    hamming_round,
)

log = logging.getLogger("flowtrack")

LOG_ENV = "FLOWTRACK_LOG_LEVEL"
ROUNDING_ALIASES = {"fw": FRANK_WOLFE, FRANK_WOLFE: FRANK_WOLFE, HAMMING: HAMMING, "both": "both"}
EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    det_weight: float = 0.1
    conn_weight: float = 1.0
    start_cost: float = 0.0
    end_cost: float = 0.0
    q_ov: float = DEFAULT_Q_OV  # 0 disables the overlap term
    q_co: float = DEFAULT_Q_CO  # 0 disables the head/body term
    o_thres: float = DEFAULT_O_THRES
    head_region_frac: float = DEFAULT_HEAD_REGION
    # int or {label: int} fixes the track count; "auto" picks it from the
    # linear costs; "free" lets the relaxation choose up to k_max
    k: int | str | dict = "auto"
    k_max: int | None = None
    max_skip: int | None = 3
    gap_tol: float = 1e-6
    max_iters: int = 2000
    rounding: str = FRANK_WOLFE
    seed: int = 0
    link_radius: float = 1.0
    eval_class: str | None = None
    eval_iou: float = 0.5
    delta_ts: list[int] | None = None

    def __post_init__(self):
        self.rounding = ROUNDING_ALIASES.get(self.rounding, self.rounding)
        if self.rounding not in (FRANK_WOLFE, HAMMING, "both"):
            raise ConfigError(f"rounding must be frank_wolfe, hamming or both, got {self.rounding!r}")
        if isinstance(self.k, bool) or not (
            isinstance(self.k, int) or self.k in ("auto", "free") or isinstance(self.k, Mapping)
        ):
            raise ConfigError(f"k must be an integer, a class->integer mapping, 'auto' or 'free', got {self.k!r}")
        if isinstance(self.k, int) and self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.k_max is not None and self.k_max < 1:
            raise ConfigError("k_max must be at least 1")
        if self.q_ov < 0 or self.q_co < 0:
            raise ConfigError("q_ov and q_co must be nonnegative")
        if not 0 < self.o_thres <= 1 or not 0 < self.head_region_frac <= 1:
            raise ConfigError("o_thres and head_region_frac must lie in (0, 1]")
        if self.gap_tol <= 0 or self.max_iters < 1:
            raise ConfigError("gap_tol must be positive and max_iters at least 1")
        for name in ("det_weight", "conn_weight", "start_cost", "end_cost"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def methods(self) -> list[str]:
        return [FRANK_WOLFE, HAMMING] if self.rounding == "both" else [self.rounding]


@dataclass
class MethodResult:
    method: str
    tracks: TrackSet
    certificate: Certificate
    mot: MOTReport | None = None
    curves: list[PRCurve] = field(default_factory=list)


@dataclass
class PipelineResult:
    config: RunConfig
    relaxed: RelaxedSolution
    normalization: float
    k_by_group: dict[str, int]
    free_k: bool
    n_pairwise: int
    used_heuristic_connections: bool
    results: dict[str, MethodResult]
    graph: object = field(default=None, repr=False)
    costs: np.ndarray | None = field(default=None, repr=False)
    pairwise: PairwiseCostSet | None = field(default=None, repr=False)


def _pairwise(graph, config: RunConfig) -> PairwiseCostSet:
    q = PairwiseCostSet.empty(graph.n_vars)
    if config.q_ov > 0:
        q = q.merge(build_overlap_costs(graph, config.q_ov, config.o_thres))
    if config.q_co > 0 and {"head", "body"} <= set(graph.groups):
        q = q.merge(build_cooccurrence_costs(graph, config.q_co, config.o_thres, config.head_region_frac))
    return q


def _eval_tracks(tracks: TrackSet, labels, config: RunConfig) -> TrackSet:
    label = config.eval_class
    if label is None and len(labels) > 1 and "body" in labels:
        label = "body"
    return tracks.only(label) if label is not None else tracks


def track(detections, connections=None, config: RunConfig | None = None, gt: GroundTruth | None = None) -> PipelineResult:
    """Run the whole tracking pipeline in memory."""
    config = config or RunConfig()
    heuristic = connections is None
    if heuristic:
        connections = proximity_connections(detections, config.max_skip or 1, radius=config.link_radius)
        log.info("no connections given; proximity heuristic produced %d connections", len(connections))

    labels = sorted({d.class_label for d in detections})
    free_k = config.k == "free"
    if config.k in ("auto", "free"):
        k_cap = config.k_max if config.k_max is not None else max(1, len(detections))
        graph = build_graph(detections, connections, k_cap, config.max_skip)
    else:
        graph = build_graph(detections, connections, config.k, config.max_skip)
    c = assemble_cost_vector(graph, config.det_weight, config.conn_weight, config.start_cost, config.end_cost)

    if config.k == "auto":
        k_by_group = solve_best_k(graph, c).k_by_group
        log.info("automatic track count from linear costs: %s", k_by_group)
    else:
        k_by_group = graph.budget()

    q = _pairwise(graph, config)
    c_n, q_n, scale = normalize_objective(c, q)
    shifted = diagonal_shift(c_n, q_n, normalization=scale)
    log.info("%d detections, %d connections, %d pairwise entries, scale %.6g",
             graph.n_detections, graph.n_connections, len(q), scale)

    t0 = time.perf_counter()
    relaxed = frank_wolfe_relax(graph, shifted, k_by_group, free_k, config.max_iters, config.gap_tol)
    log.info("relaxation: %d iterations, final gap %.3g, %.2fs",
             relaxed.iterations, relaxed.final_gap, time.perf_counter() - t0)

    results = {}
    for method in config.methods():
        if method == FRANK_WOLFE:
            sol = frank_wolfe_round(graph, shifted, relaxed.z_star, k_by_group, free_k)
        else:
            sol = hamming_round(graph, relaxed.z_star, k_by_group, free_k)
        cert = certificate(sol, relaxed, scale, method)
        tracks = extract_tracks(sol, graph)
        res = MethodResult(method, tracks, cert)
        if gt is not None:
            ev = _eval_tracks(tracks, labels, config)
            res.mot = clear_mot(ev, gt, config.eval_iou)
            dts = config.delta_ts if config.delta_ts is not None else range(median_track_length(gt) + 1)
            res.curves = [redetection_ap(ev, gt, dt, config.eval_iou) for dt in dts]
        log.info("%s rounding: %d tracks, suboptimality %.3g", method, len(tracks), cert.suboptimality)
        results[method] = res

    return PipelineResult(
        config=config,
        relaxed=relaxed,
        normalization=scale,
        k_by_group=dict(k_by_group),
        free_k=free_k,
        n_pairwise=len(q),
        used_heuristic_connections=heuristic,
        results=results,
        graph=graph,
        costs=c,
        pairwise=q,
    )


def _dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def run_pipeline(config: RunConfig, det_file, gt_file=None, out_dir=".", connections_file=None, export_lp=None) -> PipelineResult:
    """Run the pipeline on files and write all artifacts to ``out_dir``."""
    out = Path(out_dir)
    detections = io.parse_detections(det_file)
    connections = None
    if connections_file is not None and Path(connections_file).exists():
        connections = io.parse_connections(connections_file)
    elif connections_file is not None:
        log.warning("connections file %s not found; falling back to the proximity heuristic", connections_file)
    gt = io.parse_ground_truth(gt_file) if gt_file is not None else None

    result = track(detections, connections, config, gt)
    out.mkdir(parents=True, exist_ok=True)

    if export_lp is not None:
        export_local_lp(result.graph, result.costs, result.pairwise, result.k_by_group, export_lp, free_k=result.free_k)
        log.info("wrote LP relaxation to %s", export_lp)

    resolved = asdict(config)
    resolved.update(
        k_resolved=result.k_by_group,
        free_k=result.free_k,
        connections="proximity_heuristic" if result.used_heuristic_connections else str(connections_file),
    )
    _dump_json(out / "resolved_config.json", resolved)

    summary = {}
    for method, res in result.results.items():
        io.write_tracks(out / f"tracks_{method}.csv", res.tracks)
        cert = res.certificate.as_dict()
        cert.update(
            iterations=result.relaxed.iterations,
            final_gap=result.relaxed.final_gap,
            relaxed_objective=result.relaxed.relaxed_objective,
            n_pairwise=result.n_pairwise,
            k_by_group=result.k_by_group,
            n_tracks=len(res.tracks),
        )
        _dump_json(out / f"certificate_{method}.json", cert)
        entry = {"n_tracks": len(res.tracks), "suboptimality": res.certificate.suboptimality}
        if res.mot is not None:
            _dump_json(out / f"mot_{method}.json", res.mot.as_dict())
            io.write_pr_curves(out / f"redetection_{method}.csv", res.curves)
            entry["mot"] = res.mot.as_dict()
            entry["redetection_ap"] = {str(cv.delta_t): cv.ap for cv in res.curves}
        summary[method] = entry
    _dump_json(out / "summary.json", summary)
    return result


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    ap = argparse.ArgumentParser(prog="flowtrack", description="Track detections with min-cost flow and pairwise costs.")
    ap.add_argument("--config", help="JSON run configuration; defaults are used for missing keys")
    ap.add_argument("--detections", required=True, help="CSV: frame,id,x,y,w,h,score,class")
    ap.add_argument("--connections", help="CSV: src_id,dst_id,strength (proximity heuristic when omitted)")
    ap.add_argument("--gt", help="CSV: frame,track_id,x,y,w,h; enables evaluation outputs")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--rounding", choices=["fw", "hamming", "both"], help="overrides the config's rounding")
    ap.add_argument("--export-lp", help="also write the linearized relaxation in LP format")
    args = ap.parse_args(argv)

    try:
        config = RunConfig.load(args.config) if args.config else RunConfig()
        if args.rounding:
            config = RunConfig.from_dict({**asdict(config), "rounding": args.rounding})
        result = run_pipeline(config, args.detections, args.gt, args.out, args.connections, args.export_lp)
    except InfeasibleFlowError as exc:
        log.error("%s", exc)
        return EXIT_INFEASIBLE
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, io.ParseError, GraphError, ValueError, OSError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    for method, res in result.results.items():
        print(f"{method}: {len(res.tracks)} tracks, suboptimality {res.certificate.suboptimality:.3e}")
    return EXIT_OK


def scenario_main(argv=None) -> int:
    _setup_logging()
    ap = argparse.ArgumentParser(prog="flowtrack-scenario", description="Write a synthetic scenario as CSV files.")
    ap.add_argument("--kind", choices=KINDS, default="parallel_crowd")
    ap.add_argument("--frames", type=int, default=50)
    ap.add_argument("--objects", type=int, default=4)
    ap.add_argument("--noise", type=float, default=0.0)
    ap.add_argument("--dropout-rate", type=float, default=0.0)
    ap.add_argument("--duplicate-rate", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    try:
        spec = ScenarioSpec(args.kind, args.frames, args.objects, args.noise, args.dropout_rate,
                            args.duplicate_rate, args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    paths = io.dump_scenario(args.out, *generate(spec))
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
