"""Scenes and geodesic queries.

A scene is either a navigation graph (nodes at 3D positions, undirected
edges weighted by Euclidean length) or a planar occupancy grid
(8-connected navigable cells at a fixed resolution, bounded below and
above by a floor and ceiling height).  Both kinds answer the same three
questions: geodesic distance between two points, the shortest path
between them, and a pairwise connectivity matrix over path endpoints.

Conventions used throughout the package:

* grid arrays have shape ``(height, width)`` and are indexed ``[iy, ix]``;
* a cell is the tuple ``(ix, iy)``;
* ``origin`` is the world position of the center of cell ``(0, 0)``;
* headings are radians in ``[0, 2*pi)`` with 0 along +x and ``pi/2``
  along +y (counterclockwise when viewed from above).
"""

from __future__ import annotations

import base64
import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import Disconnected, SnapFailure, UnsupportedScene

FORMAT_VERSION = "1"

GRAPH_SNAP_RADIUS = 0.5
GRID_SNAP_RADIUS = 1.0

_SQRT2 = math.sqrt(2.0)

# (dx, dy) offsets in lexicographic order; ties in the search heaps fall
# back to cell order, so a fixed neighbor order keeps expansions stable.
_NEIGHBORS_8 = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)

Cell = tuple[int, int]


class Point3(NamedTuple):
    x: float
    y: float
    z: float


def as_point(value) -> Point3:
    """Coerce a 3-sequence (or Point3) to Point3."""
    if isinstance(value, Point3):
        return value
    x, y, z = value
    return Point3(float(x), float(y), float(z))


def euclidean(a: Sequence[float], b: Sequence[float]) -> float:
    return math.dist(a, b)


def normalize_heading(heading: float) -> float:
    # the mod of a tiny negative rounds up to the modulus itself
    out = heading % (2.0 * math.pi)
    return 0.0 if out >= 2.0 * math.pi else out


@dataclass(frozen=True)
class Pose:
    """Agent position plus heading; heading is normalized on construction."""

    position: Point3
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "position", as_point(self.position))
        object.__setattr__(self, "heading", normalize_heading(self.heading))

    @property
    def forward(self) -> tuple[float, float]:
        return (math.cos(self.heading), math.sin(self.heading))


@dataclass
class NavGraph:
    """Undirected navigation graph with nodes at fixed 3D positions."""

    nodes: dict[str, Point3]
    edges: list[tuple[str, str]]
    adjacency: dict[str, list[str]] = field(init=False, repr=False)

    def __post_init__(self):
        self.nodes = {str(k): as_point(v) for k, v in self.nodes.items()}
        seen = set()
        normalized = []
        for a, b in self.edges:
            a, b = str(a), str(b)
            if a not in self.nodes or b not in self.nodes:
                raise ValueError(f"edge ({a}, {b}) references an unknown node")
            if a == b:
                raise ValueError(f"self edge at node {a}")
            key = (a, b) if a < b else (b, a)
            if key not in seen:
                seen.add(key)
                normalized.append(key)
        normalized.sort()
        self.edges = normalized
        adjacency: dict[str, list[str]] = {node: [] for node in self.nodes}
        for a, b in self.edges:
            adjacency[a].append(b)
            adjacency[b].append(a)
        for neighbors in adjacency.values():
            neighbors.sort()
        self.adjacency = adjacency

    def edge_weight(self, a: str, b: str) -> float:
        return euclidean(self.nodes[a], self.nodes[b])

    def snap(self, point: Sequence[float], radius: float = GRAPH_SNAP_RADIUS) -> str | None:
        """Nearest node id within radius (3D distance), or None.

        Ties break toward the smallest node id.
        """
        point = as_point(point)
        best = None
        for node_id in sorted(self.nodes):
            d = euclidean(point, self.nodes[node_id])
            if d <= radius and (best is None or d < best[0] - 1e-12):
                best = (d, node_id)
        return None if best is None else best[1]


@dataclass
class GridWorld:
    """Planar occupancy grid with per-cell semantic labels.

    ``navigable`` and ``semantic`` have shape ``(height, width)`` and are
    indexed ``[iy, ix]``.  Cell centers sit at
    ``origin + (ix * resolution, iy * resolution, 0)`` with z equal to
    ``floor_z``.
    """

    resolution: float
    origin: Point3
    width: int
    height: int
    navigable: np.ndarray
    semantic: np.ndarray
    floor_z: float
    ceiling_z: float

    def __post_init__(self):
        self.origin = as_point(self.origin)
        self.navigable = np.asarray(self.navigable, dtype=bool)
        self.semantic = np.asarray(self.semantic, dtype=np.uint8)
        if self.navigable.shape != (self.height, self.width):
            raise ValueError(
                f"navigable shape {self.navigable.shape} does not match "
                f"(height, width)=({self.height}, {self.width})"
            )
        if self.semantic.shape != self.navigable.shape:
            raise ValueError("semantic and navigable shapes differ")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.ceiling_z <= self.floor_z:
            raise ValueError("ceiling_z must exceed floor_z")

    def in_bounds(self, cell: Cell) -> bool:
        ix, iy = cell
        return 0 <= ix < self.width and 0 <= iy < self.height

    def is_navigable(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and bool(self.navigable[cell[1], cell[0]])

    def cell_index(self, point: Sequence[float]) -> Cell:
        """Cell whose center is nearest the point (may be out of bounds)."""
        point = as_point(point)
        ix = math.floor((point.x - self.origin.x) / self.resolution + 0.5)
        iy = math.floor((point.y - self.origin.y) / self.resolution + 0.5)
        return (ix, iy)

    def cell_center(self, cell: Cell) -> Point3:
        ix, iy = cell
        return Point3(
            self.origin.x + ix * self.resolution,
            self.origin.y + iy * self.resolution,
            self.floor_z,
        )

    def snap(self, point: Sequence[float], radius: float = GRID_SNAP_RADIUS) -> Cell | None:
        """Nearest navigable cell with center within radius, or None.

        Distance is measured in the ground plane; z is ignored because the
        grid models a single floor.  Ties break toward the smallest
        ``(iy, ix)``.
        """
        point = as_point(point)
        cx, cy = self.cell_index(point)
        reach = math.ceil(radius / self.resolution) + 1
        best = None
        for iy in range(max(0, cy - reach), min(self.height, cy + reach + 1)):
            for ix in range(max(0, cx - reach), min(self.width, cx + reach + 1)):
                if not self.navigable[iy, ix]:
                    continue
                center = self.cell_center((ix, iy))
                d = math.hypot(point.x - center.x, point.y - center.y)
                if d <= radius and (best is None or d < best[0] - 1e-12):
                    best = (d, (ix, iy))
        return None if best is None else best[1]

    def neighbors(self, cell: Cell) -> Iterator[tuple[Cell, float]]:
        """Navigable 8-neighbors with step costs.

        Diagonal steps are allowed only when both flanking orthogonal
        cells are navigable, so paths cannot cut corners.
        """
        ix, iy = cell
        for dx, dy in _NEIGHBORS_8:
            nxt = (ix + dx, iy + dy)
            if not self.is_navigable(nxt):
                continue
            if dx != 0 and dy != 0:
                if not (self.is_navigable((ix + dx, iy)) and self.is_navigable((ix, iy + dy))):
                    continue
                yield nxt, self.resolution * _SQRT2
            else:
                yield nxt, self.resolution


@dataclass
class Scene:
    """Tagged union of the two scene kinds; exactly one side is set."""

    scene_id: str
    graph: NavGraph | None = None
    grid: GridWorld | None = None

    def __post_init__(self):
        if (self.graph is None) == (self.grid is None):
            raise ValueError("scene must hold exactly one of graph or grid")

    @property
    def is_discrete(self) -> bool:
        return self.graph is not None

    def snap_point(self, point: Sequence[float]):
        """Snap to a node id (graph) or cell (grid); raises SnapFailure."""
        if self.graph is not None:
            node = self.graph.snap(point)
            if node is None:
                raise SnapFailure(as_point(point), GRAPH_SNAP_RADIUS)
            return node
        cell = self.grid.snap(point)
        if cell is None:
            raise SnapFailure(as_point(point), GRID_SNAP_RADIUS)
        return cell

    def location_point(self, location) -> Point3:
        """World position of a snapped location (node id or cell)."""
        if self.graph is not None:
            return self.graph.nodes[location]
        return self.grid.cell_center(location)


# ---------------------------------------------------------------------------
# shortest-path search


def _octile(a: Cell, b: Cell, resolution: float) -> float:
    dx = abs(a[0] - b[0])
    dy = abs(a[1] - b[1])
    lo, hi = (dx, dy) if dx < dy else (dy, dx)
    return resolution * ((hi - lo) + _SQRT2 * lo)


def _grid_astar(grid: GridWorld, start: Cell, goal: Cell) -> tuple[float, list[Cell]] | None:
    """A* over the grid; returns (cost, cells) or None when unreachable.

    The octile heuristic is consistent for 8-connected unit grids, and
    ties on f fall back to cell order so expansions are deterministic.
    """
    if start == goal:
        return 0.0, [start]
    open_heap = [(_octile(start, goal, grid.resolution), start)]
    g_score = {start: 0.0}
    parent: dict[Cell, Cell] = {}
    closed: set[Cell] = set()
    while open_heap:
        _, cell = heapq.heappop(open_heap)
        if cell in closed:
            continue
        if cell == goal:
            path = [cell]
            while path[-1] in parent:
                path.append(parent[path[-1]])
            path.reverse()
            return g_score[goal], path
        closed.add(cell)
        base = g_score[cell]
        for nxt, step in grid.neighbors(cell):
            tentative = base + step
            if tentative < g_score.get(nxt, math.inf) - 1e-12:
                g_score[nxt] = tentative
                parent[nxt] = cell
                heapq.heappush(open_heap, (tentative + _octile(nxt, goal, grid.resolution), nxt))
    return None


def _grid_dijkstra_field(grid: GridWorld, start: Cell) -> np.ndarray:
    """Geodesic distance from start to every cell; inf where unreachable."""
    dist = np.full((grid.height, grid.width), math.inf)
    dist[start[1], start[0]] = 0.0
    heap = [(0.0, start)]
    while heap:
        d, cell = heapq.heappop(heap)
        if d > dist[cell[1], cell[0]] + 1e-12:
            continue
        for nxt, step in grid.neighbors(cell):
            nd = d + step
            if nd < dist[nxt[1], nxt[0]] - 1e-12:
                dist[nxt[1], nxt[0]] = nd
                heapq.heappush(heap, (nd, nxt))
    return dist


def _graph_astar(graph: NavGraph, start: str, goal: str) -> tuple[float, list[str]] | None:
    if start == goal:
        return 0.0, [start]
    goal_pos = graph.nodes[goal]

    def h(node: str) -> float:
        return euclidean(graph.nodes[node], goal_pos)

    open_heap = [(h(start), start)]
    g_score = {start: 0.0}
    parent: dict[str, str] = {}
    closed: set[str] = set()
    while open_heap:
        _, node = heapq.heappop(open_heap)
        if node in closed:
            continue
        if node == goal:
            path = [node]
            while path[-1] in parent:
                path.append(parent[path[-1]])
            path.reverse()
            return g_score[goal], path
        closed.add(node)
        base = g_score[node]
        for nxt in graph.adjacency[node]:
            tentative = base + graph.edge_weight(node, nxt)
            if tentative < g_score.get(nxt, math.inf) - 1e-12:
                g_score[nxt] = tentative
                parent[nxt] = node
                heapq.heappush(open_heap, (tentative + h(nxt), nxt))
    return None


def _graph_dijkstra_field(graph: NavGraph, start: str) -> dict[str, float]:
    dist = {start: 0.0}
    heap = [(0.0, start)]
    while heap:
        d, node = heapq.heappop(heap)
        if d > dist.get(node, math.inf) + 1e-12:
            continue
        for nxt in graph.adjacency[node]:
            nd = d + graph.edge_weight(node, nxt)
            if nd < dist.get(nxt, math.inf) - 1e-12:
                dist[nxt] = nd
                heapq.heappush(heap, (nd, nxt))
    return dist


# ---------------------------------------------------------------------------
# public queries


def geodesic_distance(scene: Scene, a: Sequence[float], b: Sequence[float]) -> float:
    """Length of the shortest navigable route between two points.

    Both points are snapped first; unreachable pairs give ``math.inf``.
    Raises SnapFailure when a point has no navigable location in range.
    """
    la = scene.snap_point(a)
    lb = scene.snap_point(b)
    if la == lb:
        return 0.0
    if scene.graph is not None:
        found = _graph_astar(scene.graph, la, lb)
    else:
        found = _grid_astar(scene.grid, la, lb)
    return math.inf if found is None else found[0]


def shortest_path(scene: Scene, a: Sequence[float], b: Sequence[float]) -> list[Point3]:
    """Shortest route as world positions (node positions or cell centers).

    Raises Disconnected when no route exists.
    """
    la = scene.snap_point(a)
    lb = scene.snap_point(b)
    if scene.graph is not None:
        found = _graph_astar(scene.graph, la, lb)
    else:
        found = _grid_astar(scene.grid, la, lb)
    if found is None:
        raise Disconnected(f"no route between {tuple(a)} and {tuple(b)} in {scene.scene_id}")
    return [scene.location_point(loc) for loc in found[1]]


def connectivity_matrix(scene: Scene, endpoints: Sequence[tuple[Sequence[float], Sequence[float]]]) -> np.ndarray:
    """Pairwise geodesic travel costs over path endpoints.

    ``endpoints[i]`` is the (start, end) pair of path i; entry (i, j) is
    the geodesic distance from end of path i to start of path j, inf when
    unreachable.  The diagonal is 0.  Snap failures carry the offending
    endpoint index.
    """
    n = len(endpoints)
    starts = []
    ends = []
    for i, (start, end) in enumerate(endpoints):
        try:
            starts.append(scene.snap_point(start))
            ends.append(scene.snap_point(end))
        except SnapFailure as exc:
            raise SnapFailure(exc.point, exc.radius, index=i) from None
    out = np.zeros((n, n))
    for i in range(n):
        if scene.graph is not None:
            dist = _graph_dijkstra_field(scene.graph, ends[i])
            row = [dist.get(s, math.inf) for s in starts]
        else:
            dist = _grid_dijkstra_field(scene.grid, ends[i])
            row = [dist[s[1], s[0]] for s in starts]
        out[i, :] = row
        out[i, i] = 0.0
    return out


class GeodesicMetric:
    """Callable geodesic point metric with a per-source distance cache.

    Useful as the cell metric of alignment scores and for repeated
    distance-to-goal queries: each distinct snapped source triggers one
    full single-source search, later queries are lookups.
    """

    def __init__(self, scene: Scene):
        self.scene = scene
        self._fields: dict = {}

    def __call__(self, a: Sequence[float], b: Sequence[float]) -> float:
        la = self.scene.snap_point(a)
        lb = self.scene.snap_point(b)
        if la == lb:
            return 0.0
        field_ = self._fields.get(la)
        if field_ is None:
            if self.scene.graph is not None:
                field_ = _graph_dijkstra_field(self.scene.graph, la)
            else:
                field_ = _grid_dijkstra_field(self.scene.grid, la)
            self._fields[la] = field_
        if self.scene.graph is not None:
            return field_.get(lb, math.inf)
        return float(field_[lb[1], lb[0]])


# ---------------------------------------------------------------------------
# serialization


def encode_bitmask(mask: np.ndarray) -> str:
    """Pack a boolean array row-major into base64 text."""
    return base64.b64encode(np.packbits(mask.astype(np.uint8), axis=None).tobytes()).decode("ascii")


def decode_bitmask(data: str, shape: tuple[int, int]) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(data), dtype=np.uint8)
    flat = np.unpackbits(raw, count=shape[0] * shape[1])
    return flat.reshape(shape).astype(bool)


def encode_bytes(values: np.ndarray) -> str:
    return base64.b64encode(values.astype(np.uint8).tobytes()).decode("ascii")


def decode_bytes(data: str, shape: tuple[int, int]) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(data), dtype=np.uint8)
    return raw[: shape[0] * shape[1]].reshape(shape).copy()


def scene_to_dict(scene: Scene) -> dict:
    if scene.graph is not None:
        return {
            "format_version": FORMAT_VERSION,
            "scene_id": scene.scene_id,
            "type": "graph",
            "nodes": {k: list(v) for k, v in sorted(scene.graph.nodes.items())},
            "edges": [list(e) for e in scene.graph.edges],
        }
    grid = scene.grid
    return {
        "format_version": FORMAT_VERSION,
        "scene_id": scene.scene_id,
        "type": "grid",
        "resolution": grid.resolution,
        "origin": list(grid.origin),
        "width": grid.width,
        "height": grid.height,
        "floor_z": grid.floor_z,
        "ceiling_z": grid.ceiling_z,
        "navigable": encode_bitmask(grid.navigable),
        "semantic": encode_bytes(grid.semantic),
    }


def scene_from_dict(payload: dict) -> Scene:
    kind = payload.get("type")
    if kind == "graph":
        graph = NavGraph(
            nodes={k: tuple(v) for k, v in payload["nodes"].items()},
            edges=[tuple(e) for e in payload["edges"]],
        )
        return Scene(scene_id=payload["scene_id"], graph=graph)
    if kind == "grid":
        shape = (payload["height"], payload["width"])
        grid = GridWorld(
            resolution=payload["resolution"],
            origin=tuple(payload["origin"]),
            width=payload["width"],
            height=payload["height"],
            navigable=decode_bitmask(payload["navigable"], shape),
            semantic=decode_bytes(payload["semantic"], shape),
            floor_z=payload["floor_z"],
            ceiling_z=payload["ceiling_z"],
        )
        return Scene(scene_id=payload["scene_id"], grid=grid)
    raise UnsupportedScene(f"unknown scene type {kind!r}")


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_dict(json.load(fh))
