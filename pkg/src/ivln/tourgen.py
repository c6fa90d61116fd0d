"""Tour construction: partition paths, order them, expand instructions.

An episodic dataset gives many short reference paths per scene, each
annotated with several instructions.  Tour construction turns these into
long ordered sequences an agent can follow in one continuous session:

1. partition the unique paths of a scene into groups that are mutually
   reachable (unreachable pairs can never appear in the same tour);
2. order each group to minimize total travel, treating every path as an
   atomic city whose entry is its start and exit is its end;
3. expand the ordered paths into one tour per instruction annotation,
   sampling instructions without replacement so every episode appears in
   exactly one tour.
"""

from __future__ import annotations

import json
import math
import random
import statistics
from dataclasses import dataclass

import numpy as np

from .environment import FORMAT_VERSION, Point3, Scene, as_point, connectivity_matrix, normalize_heading
from .errors import EmptySequence, InstructionCountMismatch, MissingEpisode, SizeLimit

ATSP_EXACT_LIMIT = 15


@dataclass
class Episode:
    """One instruction-annotated reference path."""

    episode_id: str
    path_id: str
    scene_id: str
    path: list[Point3]
    start_heading: float
    instruction_id: str
    instruction: str

    def __post_init__(self):
        self.path = [as_point(p) for p in self.path]
        self.start_heading = normalize_heading(self.start_heading)
        if not self.path:
            raise EmptySequence(f"episode {self.episode_id} has an empty path")

    @property
    def start(self) -> Point3:
        return self.path[0]

    @property
    def goal(self) -> Point3:
        return self.path[-1]


@dataclass
class PathGroup:
    """Paths of one scene that are pairwise reachable."""

    scene_id: str
    path_ids: list[str]


@dataclass
class Tour:
    """Ordered episode ids to be executed back to back in one scene."""

    tour_id: str
    scene_id: str
    episode_ids: list[str]


@dataclass
class TourStats:
    scenes: int
    episodes: int
    tours: int
    tours_per_scene: float
    mean_length: float
    min_length: int
    max_length: int
    stddev_length: float


# ---------------------------------------------------------------------------
# episode I/O


def episode_from_dict(payload: dict, scene: Scene | None = None) -> Episode:
    """Build an Episode from its JSON form.

    Path entries may be 3D coordinates or node ids; node ids need the
    scene so they can be resolved to positions.  Instruction annotations
    are a list; one Episode is produced per entry by ``load_episodes``,
    this helper takes the already-selected entry.
    """
    path = []
    for entry in payload["path"]:
        if isinstance(entry, str):
            if scene is None or scene.graph is None:
                raise MissingEpisode(
                    f"episode {payload.get('episode_id')} uses node-id path entries "
                    "but no graph scene was provided"
                )
            path.append(scene.graph.nodes[entry])
        else:
            path.append(as_point(entry))
    return Episode(
        episode_id=str(payload["episode_id"]),
        path_id=str(payload["path_id"]),
        scene_id=str(payload.get("scan", payload.get("scene_id", ""))),
        path=path,
        start_heading=float(payload.get("heading", 0.0)),
        instruction_id=str(payload["instruction_id"]),
        instruction=str(payload.get("instruction", "")),
    )


def load_episodes(path, scene: Scene | None = None) -> list[Episode]:
    """Read an episode file, fanning instruction lists out to one episode each.

    The on-disk form keeps one record per path traversal with an
    ``instructions`` list; in memory each instruction becomes its own
    Episode with ids ``<episode_id>_<k>`` / instruction ids
    ``<path_id>_<k>`` unless the record already carries explicit ones.
    """
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    records = payload["episodes"] if isinstance(payload, dict) else payload
    episodes = []
    for record in records:
        if "instructions" in record:
            instructions = record["instructions"]
            for k, text in enumerate(instructions):
                entry = dict(record)
                entry.pop("instructions")
                entry["instruction"] = text
                entry["instruction_id"] = record.get("instruction_ids", [f"{record['path_id']}_{k}" for k in range(len(instructions))])[k]
                entry["episode_id"] = f"{record['episode_id']}_{k}" if len(instructions) > 1 else str(record["episode_id"])
                episodes.append(episode_from_dict(entry, scene))
        else:
            episodes.append(episode_from_dict(record, scene))
    return episodes


def episodes_to_records(episodes: list[Episode]) -> list[dict]:
    """Group per-instruction episodes back into on-disk records."""
    by_path: dict[str, list[Episode]] = {}
    order: list[str] = []
    for ep in episodes:
        if ep.path_id not in by_path:
            order.append(ep.path_id)
        by_path.setdefault(ep.path_id, []).append(ep)
    records = []
    for path_id in order:
        group = by_path[path_id]
        first = group[0]
        base = first.episode_id.rsplit("_", 1)[0] if len(group) > 1 else first.episode_id
        records.append(
            {
                "episode_id": base,
                "path_id": path_id,
                "scan": first.scene_id,
                "path": [list(p) for p in first.path],
                "heading": first.start_heading,
                "instructions": [ep.instruction for ep in group],
                "instruction_ids": [ep.instruction_id for ep in group],
            }
        )
    return records


def save_episodes(episodes: list[Episode], path) -> None:
    payload = {"format_version": FORMAT_VERSION, "episodes": episodes_to_records(episodes)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


# ---------------------------------------------------------------------------
# partitioning


def unique_paths(episodes: list[Episode]) -> list[Episode]:
    """One representative episode per path_id, in first-appearance order."""
    seen = set()
    reps = []
    for ep in episodes:
        if ep.path_id not in seen:
            seen.add(ep.path_id)
            reps.append(ep)
    return reps


def partition_paths(episodes: list[Episode], scene: Scene) -> list[PathGroup]:
    """Group a scene's unique paths into mutually reachable sets.

    Two paths are connected when the travel cost from one's end to the
    other's start is finite; finiteness is symmetric in an undirected
    scene, so connected components of that relation give the grouping.
    Groups and their members keep first-appearance order.
    """
    reps = unique_paths(episodes)
    if not reps:
        return []
    cost = connectivity_matrix(scene, [(ep.start, ep.goal) for ep in reps])
    n = len(reps)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if math.isfinite(cost[i, j]) or math.isfinite(cost[j, i]):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    members: dict[int, list[str]] = {}
    for i, ep in enumerate(reps):
        members.setdefault(find(i), []).append(ep.path_id)
    return [PathGroup(scene_id=reps[0].scene_id, path_ids=members[root]) for root in sorted(members)]


# ---------------------------------------------------------------------------
# open-path ordering

# The ordering problem is an open asymmetric TSP: visit every path once,
# cost(i -> j) = geodesic(end_i, start_j), no return leg.  Adding a dummy
# city with zero-cost arcs to and from every real city turns the open
# path into a closed tour; cutting the cycle at the dummy recovers the
# path.


def _with_dummy(cost: np.ndarray) -> np.ndarray:
    n = cost.shape[0]
    out = np.zeros((n + 1, n + 1))
    out[:n, :n] = cost
    return out


def _cycle_cost(cost: np.ndarray, cycle: list[int]) -> float:
    return float(sum(cost[cycle[i], cycle[(i + 1) % len(cycle)]] for i in range(len(cycle))))


def _nearest_neighbor_cycle(cost: np.ndarray, start: int) -> list[int]:
    m = cost.shape[0]
    cycle = [start]
    unvisited = set(range(m)) - {start}
    while unvisited:
        cur = cycle[-1]
        best = min(unvisited, key=lambda j: (cost[cur, j], j))
        cycle.append(best)
        unvisited.remove(best)
    return cycle


def _segment_cost_delta(cost, cycle, i, j, k):
    """Gain of reconnecting A|B|C|D as A C B D (orientation preserved)."""
    m = len(cycle)
    a_end = cycle[i]
    b_start, b_end = cycle[i + 1], cycle[j]
    c_start, c_end = cycle[j + 1], cycle[k]
    d_start = cycle[(k + 1) % m]
    removed = cost[a_end, b_start] + cost[b_end, c_start] + cost[c_end, d_start]
    added = cost[a_end, c_start] + cost[c_end, b_start] + cost[b_end, d_start]
    return added - removed


def _apply_exchange(cycle, i, j, k):
    return cycle[: i + 1] + cycle[j + 1 : k + 1] + cycle[i + 1 : j + 1] + cycle[k + 1 :]


def _or_opt_pass(cost: np.ndarray, cycle: list[int]) -> tuple[list[int], bool]:
    """Relocate segments of length 1..3; first strict improvement wins."""
    m = len(cycle)
    for seg_len in (1, 2, 3):
        if seg_len >= m - 1:
            break
        for start in range(m):
            seg = [cycle[(start + t) % m] for t in range(seg_len)]
            rest = [cycle[(start + seg_len + t) % m] for t in range(m - seg_len)]
            before = cost[rest[-1], seg[0]] + cost[seg[-1], rest[0]]
            base_edge = cost[rest[-1], rest[0]]
            for pos in range(len(rest) - 1):
                delta = (
                    cost[rest[pos], seg[0]]
                    + cost[seg[-1], rest[pos + 1]]
                    - cost[rest[pos], rest[pos + 1]]
                    + base_edge
                    - before
                )
                if delta < -1e-9:
                    new_cycle = rest[: pos + 1] + seg + rest[pos + 1 :]
                    return new_cycle, True
    return cycle, False


def _three_opt_pass(cost: np.ndarray, cycle: list[int]) -> tuple[list[int], bool]:
    m = len(cycle)
    for i in range(m - 2):
        for j in range(i + 1, m - 1):
            for k in range(j + 1, m):
                if _segment_cost_delta(cost, cycle, i, j, k) < -1e-9:
                    return _apply_exchange(cycle, i, j, k), True
    return cycle, False


_MULTISTART_LIMIT = 12
_KICKS_PER_START = 6


def _improve_cycle(full: np.ndarray, cycle: list[int]) -> list[int]:
    while True:
        cycle, moved = _or_opt_pass(full, cycle)
        if moved:
            continue
        cycle, moved = _three_opt_pass(full, cycle)
        if not moved:
            break
    return cycle


def _double_bridge(cycle: list[int], rng: random.Random) -> list[int]:
    # position 0 stays fixed so the cut points are a strict 3-sample
    a, b, c = sorted(rng.sample(range(1, len(cycle)), 3))
    return cycle[:a] + cycle[b:c] + cycle[a:b] + cycle[c:]


def solve_atsp(cost: np.ndarray, improve: bool = True) -> list[int]:
    """Order cities of an asymmetric open-path problem.

    Returns a permutation of range(n) minimizing the sum of ``cost`` over
    consecutive pairs (no closing leg).  Nearest neighbor seeds the
    order; orientation-preserving 3-opt exchanges plus segment relocation
    then run to a local optimum.  Reversal moves are never used because
    the costs are asymmetric.  Small instances restart from every city
    and escape local optima with seeded double-bridge perturbations,
    keeping the cheapest result.  Deterministic: fixed scan order, fixed
    perturbation seeds, only strict improvements accepted.
    """
    cost = np.asarray(cost, dtype=float)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError("cost matrix must be square")
    if n == 0:
        return []
    if n == 1:
        return [0]
    full = _with_dummy(cost)
    dummy = n
    starts = list(range(n + 1)) if improve and n <= _MULTISTART_LIMIT else [dummy]
    best_cycle: list[int] | None = None
    best_cost = math.inf
    for start in starts:
        cycle = _nearest_neighbor_cycle(full, start)
        if improve:
            cycle = _improve_cycle(full, cycle)
            rng = random.Random(7919 * start + 17)
            held = _cycle_cost(full, cycle)
            # a double bridge needs three distinct interior cut points
            kicks = _KICKS_PER_START if 3 <= n <= _MULTISTART_LIMIT else 0
            for _ in range(kicks):
                cand = _improve_cycle(full, _double_bridge(cycle, rng))
                cand_cost = _cycle_cost(full, cand)
                if cand_cost < held - 1e-12:
                    cycle, held = cand, cand_cost
        total = _cycle_cost(full, cycle)
        if total < best_cost - 1e-12:
            best_cost = total
            best_cycle = cycle
    assert best_cycle is not None
    at = best_cycle.index(dummy)
    return best_cycle[at + 1 :] + best_cycle[:at]


def open_path_cost(cost: np.ndarray, order: list[int]) -> float:
    return float(sum(cost[order[i], order[i + 1]] for i in range(len(order) - 1)))


def held_karp_exact(cost: np.ndarray) -> tuple[list[int], float]:
    """Exact open-path order by dynamic programming over subsets.

    O(2^n n^2) time and memory; refuses instances beyond
    ``ATSP_EXACT_LIMIT`` cities.
    """
    cost = np.asarray(cost, dtype=float)
    n = cost.shape[0]
    if n == 0:
        return [], 0.0
    if n > ATSP_EXACT_LIMIT:
        raise SizeLimit(f"exact ordering supports at most {ATSP_EXACT_LIMIT} cities, got {n}")
    if n == 1:
        return [0], 0.0
    # dp[(mask, last)] = cheapest path visiting mask, ending at last
    dp = {(1 << i, i): 0.0 for i in range(n)}
    parent: dict[tuple[int, int], int] = {}
    for mask in range(1, 1 << n):
        for last in range(n):
            if not mask & (1 << last):
                continue
            base = dp.get((mask, last))
            if base is None:
                continue
            for nxt in range(n):
                if mask & (1 << nxt):
                    continue
                key = (mask | (1 << nxt), nxt)
                cand = base + cost[last, nxt]
                if cand < dp.get(key, math.inf) - 1e-12:
                    dp[key] = cand
                    parent[key] = last
    full = (1 << n) - 1
    best_last = min(range(n), key=lambda last: (dp[(full, last)], last))
    best_cost = dp[(full, best_last)]
    order = [best_last]
    mask = full
    while len(order) < n:
        prev = parent[(mask, order[-1])]
        mask &= ~(1 << order[-1])
        order.append(prev)
    order.reverse()
    return order, float(best_cost)


def order_paths(group: PathGroup, episodes: list[Episode], scene: Scene, solver: str = "nn+3opt") -> list[str]:
    """Order a group's paths to minimize inter-path travel.

    ``solver`` selects the ordering routine: "nn" (greedy construction
    only), "nn+3opt" (greedy plus local search, the default), or "exact"
    (subset dynamic programming, small groups only).
    """
    reps = {ep.path_id: ep for ep in unique_paths(episodes)}
    chosen = [reps[pid] for pid in group.path_ids]
    if not chosen:
        return []
    cost = connectivity_matrix(scene, [(ep.start, ep.goal) for ep in chosen])
    if solver == "exact":
        order, _ = held_karp_exact(cost)
    elif solver == "nn":
        order = solve_atsp(cost, improve=False)
    elif solver == "nn+3opt":
        order = solve_atsp(cost)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return [group.path_ids[i] for i in order]


# ---------------------------------------------------------------------------
# instruction expansion


def expand_instruction_tours(
    ordered_paths: list[str],
    episodes: list[Episode],
    duplicates: int,
    seed: int,
    tour_prefix: str | None = None,
) -> list[Tour]:
    """Expand one ordered path sequence into ``duplicates`` tours.

    Every path must carry exactly ``duplicates`` episodes (one per
    instruction annotation).  Each path's episodes are shuffled once with
    the seeded generator and dealt across the duplicate tours, so the
    tours partition the episode set exactly: every episode appears in
    exactly one tour and each tour visits every path once.
    """
    if duplicates < 1:
        raise ValueError("duplicates must be at least 1")
    by_path: dict[str, list[Episode]] = {}
    for ep in episodes:
        by_path.setdefault(ep.path_id, []).append(ep)
    for pid in ordered_paths:
        have = len(by_path.get(pid, []))
        if have != duplicates:
            raise InstructionCountMismatch(
                f"path {pid} has {have} episodes, expansion needs exactly {duplicates}"
            )
    rng = random.Random(seed)
    dealt: dict[str, list[Episode]] = {}
    for pid in ordered_paths:
        pool = sorted(by_path[pid], key=lambda ep: ep.episode_id)
        rng.shuffle(pool)
        dealt[pid] = pool
    scene_id = by_path[ordered_paths[0]][0].scene_id if ordered_paths else ""
    prefix = tour_prefix if tour_prefix is not None else f"{scene_id}-t"
    tours = []
    for k in range(duplicates):
        tours.append(
            Tour(
                tour_id=f"{prefix}{k}",
                scene_id=scene_id,
                episode_ids=[dealt[pid][k].episode_id for pid in ordered_paths],
            )
        )
    return tours


def build_tours(
    episodes: list[Episode],
    scene: Scene,
    duplicates: int,
    seed: int,
    solver: str = "nn+3opt",
) -> list[Tour]:
    """Full pipeline for one scene: partition, order, expand."""
    groups = partition_paths(episodes, scene)
    tours = []
    for gi, group in enumerate(groups):
        ordered = order_paths(group, episodes, scene, solver=solver)
        group_eps = [ep for ep in episodes if ep.path_id in set(group.path_ids)]
        tours.extend(
            expand_instruction_tours(
                ordered, group_eps, duplicates, seed + gi, tour_prefix=f"{scene.scene_id}-g{gi}-"
            )
        )
    return tours


def compute_tour_stats(tours: list[Tour]) -> TourStats:
    """Corpus statistics over tour lengths (episodes per tour)."""
    if not tours:
        raise EmptySequence("no tours to summarize")
    lengths = [len(t.episode_ids) for t in tours]
    scenes = len({t.scene_id for t in tours})
    return TourStats(
        scenes=scenes,
        episodes=sum(lengths),
        tours=len(tours),
        tours_per_scene=len(tours) / scenes,
        mean_length=statistics.fmean(lengths),
        min_length=min(lengths),
        max_length=max(lengths),
        stddev_length=statistics.pstdev(lengths),
    )


# ---------------------------------------------------------------------------
# tour I/O


def save_tours(tours: list[Tour], episodes: list[Episode], path) -> None:
    by_id = {ep.episode_id: ep for ep in episodes}
    payload = {
        "format_version": FORMAT_VERSION,
        "tours": [
            {
                "tour_id": t.tour_id,
                "scene_id": t.scene_id,
                "episodes": [
                    {
                        "episode_id": eid,
                        "instruction_id": by_id[eid].instruction_id if eid in by_id else "",
                    }
                    for eid in t.episode_ids
                ],
            }
            for t in tours
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_tours(path) -> list[Tour]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    records = payload["tours"] if isinstance(payload, dict) else payload
    return [
        Tour(
            tour_id=rec["tour_id"],
            scene_id=rec["scene_id"],
            episode_ids=[entry["episode_id"] for entry in rec["episodes"]],
        )
        for rec in records
    ]
