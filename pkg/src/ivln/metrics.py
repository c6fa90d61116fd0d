"""Path-alignment and goal metrics for episodes and tours.

The alignment score between a reference path R and an agent path Q is

    ndtw(R, Q) = exp(-dtw(R, Q) / (|R| * d_th))

where dtw uses the step set {(1,0), (0,1), (1,1)}, is anchored at both
endpoints, and sums a point metric over matched pairs.  At tour level
the two paths are concatenations of per-episode blocks and the warp is
forbidden from matching points of different episodes; with both paths
sharing the episode sequence this is exactly the per-episode dtw sum,
which is how ``tour_dtw`` computes it.  ``masked_tour_dtw`` runs the
same alignment over the full concatenated cost matrix with infinite
cross-episode entries; it is quadratic in tour length and exists to
cross-check the block sum.

Tour scores aggregate over trajectory splits weighted by episode count:

    aggregate = sum_i |T_i| * score_i / sum_j |T_j|

Scores are reported on a 0..100 scale, one decimal, via ``scale_score``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .environment import FORMAT_VERSION, GeodesicMetric, Point3, Scene, as_point, euclidean
from .errors import DimensionMismatch, EmptySequence

DEFAULT_DTH = 3.0
DEFAULT_SUCCESS_RADIUS = 3.0

PointMetric = Callable[[Sequence[float], Sequence[float]], float]


@dataclass
class OracleSegment:
    """Positions logged while the oracle drives (never scored)."""

    kind: str  # "oracle_goal" | "oracle_transit"
    episode_id: str
    points: list[Point3]
    actions: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.points = [as_point(p) for p in self.points]


@dataclass
class EpisodeTrace:
    """Agent motion for one episode, paired with its reference path."""

    episode_id: str
    agent_path: list[Point3]
    reference_path: list[Point3]
    stop_called: bool = True
    actions: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.agent_path = [as_point(p) for p in self.agent_path]
        self.reference_path = [as_point(p) for p in self.reference_path]
        if not self.agent_path:
            raise EmptySequence(f"episode {self.episode_id}: empty agent path")
        if not self.reference_path:
            raise EmptySequence(f"episode {self.episode_id}: empty reference path")

    @property
    def final_position(self) -> Point3:
        return self.agent_path[-1]


@dataclass
class TourTrace:
    tour_id: str
    episodes: list[EpisodeTrace]
    oracle_segments: list[OracleSegment] = field(default_factory=list)


def _cost_matrix(ref, query, dist: PointMetric) -> np.ndarray:
    ref = [as_point(p) for p in ref]
    query = [as_point(p) for p in query]
    if dist is euclidean:
        r = np.asarray(ref)
        q = np.asarray(query)
        diff = r[:, None, :] - q[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    out = np.empty((len(ref), len(query)))
    for i, p in enumerate(ref):
        for j, s in enumerate(query):
            out[i, j] = dist(p, s)
    return out


def _accumulate(costs: np.ndarray) -> float:
    """Boundary-anchored warp cost over a precomputed cost matrix."""
    n, m = costs.shape
    acc = np.empty((n, m))
    acc[0, 0] = costs[0, 0]
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + costs[0, j]
    for i in range(1, n):
        acc[i, 0] = acc[i - 1, 0] + costs[i, 0]
        row = acc[i]
        prev = acc[i - 1]
        for j in range(1, m):
            row[j] = costs[i, j] + min(prev[j], row[j - 1], prev[j - 1])
    return float(acc[n - 1, m - 1])


def dtw(reference, query, dist: PointMetric = euclidean) -> float:
    """Dynamic time warping cost between two point sequences."""
    if len(reference) == 0 or len(query) == 0:
        raise EmptySequence("dtw needs non-empty sequences")
    return _accumulate(_cost_matrix(reference, query, dist))


def ndtw(reference, query, d_th: float = DEFAULT_DTH, dist: PointMetric = euclidean) -> float:
    """Normalized alignment score in (0, 1]; 1 iff the warp cost is 0."""
    if d_th <= 0:
        raise ValueError("d_th must be positive")
    return math.exp(-dtw(reference, query, dist) / (len(reference) * d_th))


def tour_dtw(trace: TourTrace, dist: PointMetric = euclidean) -> float:
    """Warp cost over a tour with cross-episode matching forbidden.

    With infinite cost on every cross-episode cell, the optimal warp
    decomposes into independent per-episode alignments, so the tour cost
    is the sum of per-episode dtw costs.
    """
    if not trace.episodes:
        raise EmptySequence(f"tour {trace.tour_id} has no episodes")
    return float(sum(dtw(ep.reference_path, ep.agent_path, dist) for ep in trace.episodes))


def masked_tour_dtw(trace: TourTrace, dist: PointMetric = euclidean) -> float:
    """Same alignment as ``tour_dtw`` via one concatenated cost matrix.

    Builds the full |R| x |Q| matrix with inf outside the block diagonal
    and runs the warp over it.  Quadratic in tour length; kept as the
    direct transcription of the masked formulation for cross-checks.
    """
    if not trace.episodes:
        raise EmptySequence(f"tour {trace.tour_id} has no episodes")
    ref = [p for ep in trace.episodes for p in ep.reference_path]
    query = [p for ep in trace.episodes for p in ep.agent_path]
    costs = np.full((len(ref), len(query)), math.inf)
    i0 = j0 = 0
    for ep in trace.episodes:
        i1 = i0 + len(ep.reference_path)
        j1 = j0 + len(ep.agent_path)
        costs[i0:i1, j0:j1] = _cost_matrix(ep.reference_path, ep.agent_path, dist)
        i0, j0 = i1, j1
    return _accumulate(costs)


def tour_ndtw(trace: TourTrace, d_th: float = DEFAULT_DTH, dist: PointMetric = euclidean) -> float:
    """Normalized tour alignment; |R| is the total reference length."""
    total_ref = sum(len(ep.reference_path) for ep in trace.episodes)
    return math.exp(-tour_dtw(trace, dist) / (total_ref * d_th))


def aggregate_t_ndtw(scored_tours: Sequence[tuple[TourTrace, float]]) -> float:
    """Episode-count weighted mean of per-tour scores."""
    if not scored_tours:
        raise EmptySequence("no tours to aggregate")
    num = 0.0
    den = 0
    for trace, score in scored_tours:
        weight = len(trace.episodes)
        num += weight * score
        den += weight
    if den == 0:
        raise EmptySequence("tours have no episodes")
    return num / den


def scale_score(score: float) -> float:
    """Report form: 0..100, one decimal."""
    return round(100.0 * score, 1)


@dataclass
class EpisodeMetrics:
    episode_id: str
    tl: float
    ne: float
    os_: float
    sr: float
    spl: float
    ndtw: float


def path_length(points) -> float:
    pts = [as_point(p) for p in points]
    return float(sum(euclidean(pts[i], pts[i + 1]) for i in range(len(pts) - 1)))


def episodic_metrics(
    trace: EpisodeTrace,
    scene: Scene | None = None,
    success_radius: float = DEFAULT_SUCCESS_RADIUS,
    d_th: float = DEFAULT_DTH,
    dist: PointMetric = euclidean,
    goal_metric: PointMetric | None = None,
) -> EpisodeMetrics:
    """Standard single-episode metrics.

    Goal-relative quantities (NE, oracle success, the SPL shortest-path
    length) use geodesic distance when a scene is given, straight-line
    distance otherwise.  ``dist`` is the alignment point metric and stays
    Euclidean unless explicitly overridden.
    """
    if goal_metric is None:
        goal_metric = GeodesicMetric(scene) if scene is not None else euclidean
    goal = trace.reference_path[-1]
    tl = path_length(trace.agent_path)
    ne = goal_metric(goal, trace.final_position)
    nearest = min(goal_metric(goal, p) for p in trace.agent_path)
    os_ = 1.0 if nearest <= success_radius else 0.0
    sr = 1.0 if ne <= success_radius else 0.0
    optimal = goal_metric(goal, trace.reference_path[0])
    if optimal <= 0.0:
        spl = sr
    else:
        spl = sr * optimal / max(optimal, tl)
    return EpisodeMetrics(
        episode_id=trace.episode_id,
        tl=tl,
        ne=ne,
        os_=os_,
        sr=sr,
        spl=spl,
        ndtw=ndtw(trace.reference_path, trace.agent_path, d_th=d_th, dist=dist),
    )


# ---------------------------------------------------------------------------
# trace serialization (line-delimited JSON, one record per phase)


def _points_json(points):
    return [[p.x, p.y, p.z] for p in points]


def write_traces(traces: Sequence[TourTrace], path) -> None:
    """Write tour traces as JSONL; agent and oracle phases interleaved."""
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            segments = {}
            for seg in trace.oracle_segments:
                segments.setdefault(seg.episode_id, []).append(seg)
            for ep in trace.episodes:
                record = {
                    "format_version": FORMAT_VERSION,
                    "tour_id": trace.tour_id,
                    "episode_id": ep.episode_id,
                    "phase": "agent",
                    "points": _points_json(ep.agent_path),
                    "actions": ep.actions,
                    "stop_called": ep.stop_called,
                }
                fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
                for seg in segments.get(ep.episode_id, []):
                    record = {
                        "format_version": FORMAT_VERSION,
                        "tour_id": trace.tour_id,
                        "episode_id": seg.episode_id,
                        "phase": seg.kind,
                        "points": _points_json(seg.points),
                        "actions": seg.actions,
                    }
                    fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


def read_traces(path, episodes_by_id: dict | None = None) -> list[TourTrace]:
    """Read tour traces from JSONL.

    Agent records carry no reference path; it is joined from
    ``episodes_by_id`` when given, else the record must embed
    ``reference_path`` (round-trip files written by ``write_traces`` plus
    an episode set always resolve).
    """
    tours: dict[str, TourTrace] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            tid = rec["tour_id"]
            if tid not in tours:
                tours[tid] = TourTrace(tour_id=tid, episodes=[])
                order.append(tid)
            trace = tours[tid]
            if rec["phase"] == "agent":
                if "reference_path" in rec:
                    ref = rec["reference_path"]
                elif episodes_by_id is not None and rec["episode_id"] in episodes_by_id:
                    ref = episodes_by_id[rec["episode_id"]].path
                else:
                    raise EmptySequence(
                        f"trace for episode {rec['episode_id']} has no reference path "
                        "and no episode set was provided"
                    )
                trace.episodes.append(
                    EpisodeTrace(
                        episode_id=rec["episode_id"],
                        agent_path=rec["points"],
                        reference_path=ref,
                        stop_called=rec.get("stop_called", True),
                        actions=rec.get("actions", []),
                    )
                )
            else:
                trace.oracle_segments.append(
                    OracleSegment(
                        kind=rec["phase"],
                        episode_id=rec["episode_id"],
                        points=rec["points"],
                        actions=rec.get("actions", []),
                    )
                )
    return [tours[tid] for tid in order]


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    per_episode: list[dict]
    per_tour: list[dict]
    summary: dict
    config: dict

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config,
            "per_episode": self.per_episode,
            "per_tour": self.per_tour,
            "summary": self.summary,
        }

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    def save_csv(self, path) -> None:
        fields = ["tour_id", "episode_id", "tl", "ne", "os", "sr", "spl", "ndtw"]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in self.per_episode:
                writer.writerow({k: row[k] for k in fields})


def build_report(
    traces: Sequence[TourTrace],
    scene: Scene | None = None,
    success_radius: float = DEFAULT_SUCCESS_RADIUS,
    d_th: float = DEFAULT_DTH,
    dist: PointMetric = euclidean,
    config: dict | None = None,
) -> MetricReport:
    """Score traces at episode, tour, and corpus level."""
    goal_metric = GeodesicMetric(scene) if scene is not None else euclidean
    per_episode = []
    per_tour = []
    scored = []
    for trace in traces:
        for ep in trace.episodes:
            m = episodic_metrics(
                ep, success_radius=success_radius, d_th=d_th, dist=dist, goal_metric=goal_metric
            )
            per_episode.append(
                {
                    "tour_id": trace.tour_id,
                    "episode_id": m.episode_id,
                    "tl": round(m.tl, 4),
                    "ne": round(m.ne, 4),
                    "os": m.os_,
                    "sr": m.sr,
                    "spl": round(m.spl, 4),
                    "ndtw": round(m.ndtw, 6),
                }
            )
        score = tour_ndtw(trace, d_th=d_th, dist=dist)
        scored.append((trace, score))
        per_tour.append(
            {
                "tour_id": trace.tour_id,
                "episodes": len(trace.episodes),
                "t_ndtw": scale_score(score),
            }
        )
    overall = aggregate_t_ndtw(scored)
    n_eps = sum(len(t.episodes) for t in traces)
    mean = lambda key: sum(row[key] for row in per_episode) / max(1, len(per_episode))
    summary = {
        "tours": len(traces),
        "episodes": n_eps,
        "t_ndtw": scale_score(overall),
        "tl": round(mean("tl"), 2),
        "ne": round(mean("ne"), 2),
        "os": round(mean("os"), 4),
        "sr": round(mean("sr"), 4),
        "spl": round(mean("spl"), 4),
        "ndtw": round(mean("ndtw"), 4),
    }
    return MetricReport(
        per_episode=per_episode,
        per_tour=per_tour,
        summary=summary,
        config=config or {"d_th": d_th, "success_radius": success_radius},
    )
