"""Semantic occupancy mapping from depth and semantic frames.

Frames are unprojected through the inverse pinhole model into world
points, filtered to the vertical band between floor and ceiling (with a
margin that drops the floor and ceiling surfaces themselves), and
accumulated into a top-down grid.  A cell keeps the label of the highest
point so far observed inside it, so tall structure wins over clutter.

Camera frame: x right, y down, z forward (optical axis).  World frame:
z up, heading measured counterclockwise from +x; see the environment
module for grid indexing conventions.

Map lifetimes differ by mode: "episodic" maps clear at every episode
start, "iterative" maps clear only when a tour starts, "known" maps are
built from the ground-truth grid and never change.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass

import numpy as np

from .environment import (
    FORMAT_VERSION,
    GridWorld,
    Point3,
    Pose,
    as_point,
    decode_bitmask,
    decode_bytes,
    encode_bitmask,
    encode_bytes,
)
from .errors import DimensionMismatch

LABEL_COUNT = 13  # semantic labels 1..13; 0 means no label observed
CROP_CHANNELS = LABEL_COUNT + 1  # one-hot labels plus an occupancy channel
BAND_MARGIN = 0.1

EPISODE_START = "episode_start"
TOUR_START = "tour_start"

MAP_MODES = ("episodic", "iterative", "known")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def from_hfov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        fx = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                   width=width, height=height)


@dataclass
class DepthFrame:
    """Per-pixel forward depth in meters; 0 marks invalid rays."""

    depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: Pose

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        expected = (self.intrinsics.height, self.intrinsics.width)
        if self.depth.shape != expected:
            raise DimensionMismatch(f"depth shape {self.depth.shape} != {expected}")


@dataclass
class SemanticFrame:
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)


def unproject(frame: DepthFrame, semantics: SemanticFrame | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Lift a depth frame to world points.

    Returns (points, labels) with points of shape (N, 3); pixels with
    depth 0 are dropped.  Labels are 0 when no semantic frame is given.
    """
    intr = frame.intrinsics
    if semantics is not None and semantics.labels.shape != frame.depth.shape:
        raise DimensionMismatch("semantic frame shape differs from depth")
    d = frame.depth
    valid = d > 0
    v_idx, u_idx = np.nonzero(valid)
    dv = d[valid]
    x_cam = (u_idx - intr.cx) * dv / intr.fx
    y_cam = (v_idx - intr.cy) * dv / intr.fy
    h = frame.pose.heading
    px, py, pz = frame.pose.position
    fx_, fy_ = math.cos(h), math.sin(h)
    rx, ry = math.sin(h), -math.cos(h)
    wx = px + dv * fx_ + x_cam * rx
    wy = py + dv * fy_ + x_cam * ry
    wz = pz - y_cam
    points = np.stack([wx, wy, wz], axis=1)
    if semantics is None:
        labels = np.zeros(len(dv), dtype=np.uint8)
    else:
        labels = semantics.labels[valid]
    return points, labels


@dataclass
class SemanticOccMap:
    """Top-down occupancy and semantics accumulated from observations."""

    resolution: float
    origin: Point3
    width: int
    height: int
    mode: str
    occupancy: np.ndarray = None
    semantic: np.ndarray = None
    observed: np.ndarray = None
    top_z: np.ndarray = None

    def __post_init__(self):
        if self.mode not in MAP_MODES:
            raise ValueError(f"unknown map mode {self.mode!r}")
        self.origin = as_point(self.origin)
        shape = (self.height, self.width)
        if self.occupancy is None:
            self.occupancy = np.zeros(shape, dtype=np.uint8)
        if self.semantic is None:
            self.semantic = np.zeros(shape, dtype=np.uint8)
        if self.observed is None:
            self.observed = np.zeros(shape, dtype=bool)
        if self.top_z is None:
            self.top_z = np.full(shape, -np.inf, dtype=np.float64)
        for name in ("occupancy", "semantic", "observed", "top_z"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionMismatch(f"{name} shape {arr.shape} != {shape}")

    @classmethod
    def for_grid(cls, grid: GridWorld, mode: str) -> "SemanticOccMap":
        return cls(
            resolution=grid.resolution,
            origin=grid.origin,
            width=grid.width,
            height=grid.height,
            mode=mode,
        )

    def clear(self) -> None:
        self.occupancy[:] = 0
        self.semantic[:] = 0
        self.observed[:] = False
        self.top_z[:] = -np.inf

    def cell_index(self, x, y):
        ix = np.floor((x - self.origin.x) / self.resolution + 0.5).astype(int)
        iy = np.floor((y - self.origin.y) / self.resolution + 0.5).astype(int)
        return ix, iy


def integrate(
    occ_map: SemanticOccMap,
    points: np.ndarray,
    labels: np.ndarray,
    floor_z: float,
    ceiling_z: float,
    margin: float = BAND_MARGIN,
) -> None:
    """Fold a labeled point cloud into the map.

    Points outside the open band (floor_z + margin, ceiling_z - margin)
    mark cells as observed but contribute no occupancy or label, which
    drops the floor and ceiling surfaces.  In-band points occupy their
    cell; the label of a cell follows the highest in-band point seen so
    far, with strictly-higher wins so re-integrating the same cloud is a
    no-op.  Known maps are immutable; integrating into one is an error.
    """
    if occ_map.mode == "known":
        raise ValueError("known maps are immutable")
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.uint8)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DimensionMismatch(f"points must be (N, 3), got {points.shape}")
    if labels.shape[0] != points.shape[0]:
        raise DimensionMismatch("labels length differs from points")
    if len(points) == 0:
        return
    ix, iy = occ_map.cell_index(points[:, 0], points[:, 1])
    inside = (ix >= 0) & (ix < occ_map.width) & (iy >= 0) & (iy < occ_map.height)
    ix, iy = ix[inside], iy[inside]
    z = points[inside, 2]
    lab = labels[inside]
    occ_map.observed[iy, ix] = True

    band = (z > floor_z + margin) & (z < ceiling_z - margin)
    if not band.any():
        return
    ix, iy, z, lab = ix[band], iy[band], z[band], lab[band]
    occ_map.occupancy[iy, ix] = 1

    flat = iy * occ_map.width + ix
    top = np.full(occ_map.width * occ_map.height, -np.inf)
    np.maximum.at(top, flat, z)
    # ascending z, stable: the last write per cell is its highest point
    order = np.argsort(z, kind="stable")
    winner = np.zeros_like(top, dtype=np.uint8)
    winner[flat[order]] = lab[order]
    top = top.reshape(occ_map.height, occ_map.width)
    winner = winner.reshape(occ_map.height, occ_map.width)
    newer = top > occ_map.top_z
    occ_map.top_z[newer] = top[newer]
    occ_map.semantic[newer] = winner[newer]


def reset_policy(occ_map: SemanticOccMap, event: str) -> None:
    """Apply the map's lifetime rule at an episode or tour boundary."""
    if event not in (EPISODE_START, TOUR_START):
        raise ValueError(f"unknown reset event {event!r}")
    if occ_map.mode == "known":
        return
    if occ_map.mode == "episodic":
        occ_map.clear()
    elif occ_map.mode == "iterative" and event == TOUR_START:
        occ_map.clear()


def known_map(grid: GridWorld) -> SemanticOccMap:
    """Ground-truth map of a grid scene; mode "known", never reset."""
    m = SemanticOccMap.for_grid(grid, "known")
    m.occupancy = (~grid.navigable).astype(np.uint8)
    m.semantic = grid.semantic.copy()
    m.observed = np.ones_like(grid.navigable, dtype=bool)
    m.top_z = np.where(grid.navigable, grid.floor_z, grid.ceiling_z).astype(np.float64)
    return m


def crop_egocentric(occ_map: SemanticOccMap, pose: Pose, size: int = 64,
                    resolution: float | None = None) -> np.ndarray:
    """Egocentric map crop, heading up, agent at the center.

    Returns float32 of shape (14, size, size): channels 0..12 are the
    one-hot of labels 1..13, channel 13 is occupancy.  Row 0 is farthest
    ahead of the agent; sampling is nearest-cell; cells outside the map
    are all zero.
    """
    if resolution is None:
        resolution = occ_map.resolution
    center = size // 2
    rows, cols = np.mgrid[0:size, 0:size]
    ahead = (center - rows) * resolution
    lateral = (cols - center) * resolution
    h = pose.heading
    fwd = (math.cos(h), math.sin(h))
    right = (math.sin(h), -math.cos(h))
    wx = pose.position.x + ahead * fwd[0] + lateral * right[0]
    wy = pose.position.y + ahead * fwd[1] + lateral * right[1]
    ix, iy = occ_map.cell_index(wx, wy)
    valid = (ix >= 0) & (ix < occ_map.width) & (iy >= 0) & (iy < occ_map.height)
    ix_c = np.clip(ix, 0, occ_map.width - 1)
    iy_c = np.clip(iy, 0, occ_map.height - 1)
    labels = np.where(valid, occ_map.semantic[iy_c, ix_c], 0)
    occ = np.where(valid, occ_map.occupancy[iy_c, ix_c], 0)
    out = np.zeros((CROP_CHANNELS, size, size), dtype=np.float32)
    for lbl in range(1, LABEL_COUNT + 1):
        out[lbl - 1] = labels == lbl
    out[LABEL_COUNT] = occ
    return out


def crop_to_flat(crop: np.ndarray) -> list[float]:
    """Crop as a flat channel-major list, the wire and export form."""
    return [float(v) for v in np.asarray(crop, dtype=np.float32).ravel(order="C")]


def crop_from_flat(values, size: int = 64) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    return arr.reshape(CROP_CHANNELS, size, size)


# ---------------------------------------------------------------------------
# snapshots


def map_to_dict(occ_map: SemanticOccMap) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "resolution": occ_map.resolution,
        "origin": list(occ_map.origin),
        "width": occ_map.width,
        "height": occ_map.height,
        "mode": occ_map.mode,
        "occupancy": encode_bitmask(occ_map.occupancy.astype(bool)),
        "semantic": encode_bytes(occ_map.semantic),
        "observed": encode_bitmask(occ_map.observed),
        "top_z": encode_bytes_f32(occ_map.top_z),
    }


def encode_bytes_f32(values: np.ndarray) -> str:
    return base64.b64encode(values.astype(np.float32).tobytes()).decode("ascii")


def decode_bytes_f32(data: str, shape) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(data), dtype=np.float32)
    return raw[: shape[0] * shape[1]].reshape(shape).astype(np.float64)


def map_from_dict(payload: dict) -> SemanticOccMap:
    shape = (payload["height"], payload["width"])
    return SemanticOccMap(
        resolution=payload["resolution"],
        origin=tuple(payload["origin"]),
        width=payload["width"],
        height=payload["height"],
        mode=payload["mode"],
        occupancy=decode_bitmask(payload["occupancy"], shape).astype(np.uint8),
        semantic=decode_bytes(payload["semantic"], shape),
        observed=decode_bitmask(payload["observed"], shape),
        top_z=decode_bytes_f32(payload["top_z"], shape),
    )


def save_map(occ_map: SemanticOccMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(map_to_dict(occ_map), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_map(path) -> SemanticOccMap:
    with open(path, "r", encoding="utf-8") as fh:
        return map_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# synthetic views

# Depth and semantics are rendered from a grid scene by casting one ray
# per image column through the 2D occupancy, then resolving each row
# against the wall span, the floor plane, or the ceiling plane.  Walls
# fill the full floor-to-ceiling height.


def synthesize_views(grid: GridWorld, pose: Pose, intrinsics: CameraIntrinsics,
                     max_range: float = 10.0) -> tuple[DepthFrame, SemanticFrame]:
    """Render a depth and semantic frame of a grid scene at a pose.

    Depth is forward distance (not ray length); rays that leave the grid
    or exceed max_range come back 0.  The returned pose is the camera
    pose passed in, so unprojecting the frames reproduces world surfaces.
    """
    W, H = intrinsics.width, intrinsics.height
    h = pose.heading
    fwd = np.array([math.cos(h), math.sin(h)])
    right = np.array([math.sin(h), -math.cos(h)])
    k = (np.arange(W) - intrinsics.cx) / intrinsics.fx
    dirs = fwd[None, :] + k[:, None] * right[None, :]  # (W, 2); forward component 1

    s_wall, wall_label = _march_columns(grid, pose.position, dirs, max_range)

    v = np.arange(H)
    slope = -(v - intrinsics.cy) / intrinsics.fy  # dz per unit forward distance
    z0 = pose.position.z
    sw = s_wall[None, :]
    sl = slope[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        z_at_wall = z0 + sl * sw
        s_floor = np.where(sl < 0, (grid.floor_z - z0) / sl, np.inf)
        s_ceil = np.where(sl > 0, (grid.ceiling_z - z0) / sl, np.inf)
    s_plane = np.minimum(s_floor, s_ceil)
    wall_hit = np.isfinite(sw) & (z_at_wall >= grid.floor_z) & (z_at_wall <= grid.ceiling_z)

    depth = np.zeros((H, W))
    # small forward push lands wall points inside the wall cell instead of
    # exactly on the shared cell boundary
    depth[wall_hit] = np.broadcast_to(sw + 1e-4, (H, W))[wall_hit]
    plane_hit = ~wall_hit & np.isfinite(s_plane) & (s_plane <= max_range)
    depth[plane_hit] = np.broadcast_to(s_plane, (H, W))[plane_hit]

    labels = np.zeros((H, W), dtype=np.uint8)
    labels[wall_hit] = np.broadcast_to(wall_label[None, :], (H, W))[wall_hit]
    if plane_hit.any():
        sp = np.broadcast_to(s_plane, (H, W))[plane_hit]
        cols = np.broadcast_to(np.arange(W)[None, :], (H, W))[plane_hit]
        px = pose.position.x + sp * dirs[cols, 0]
        py = pose.position.y + sp * dirs[cols, 1]
        ix = np.floor((px - grid.origin.x) / grid.resolution + 0.5).astype(int)
        iy = np.floor((py - grid.origin.y) / grid.resolution + 0.5).astype(int)
        ok = (ix >= 0) & (ix < grid.width) & (iy >= 0) & (iy < grid.height)
        plane_labels = np.zeros(len(sp), dtype=np.uint8)
        plane_labels[ok] = grid.semantic[iy[ok], ix[ok]]
        labels[plane_hit] = plane_labels

    return (
        DepthFrame(depth=depth, intrinsics=intrinsics, pose=pose),
        SemanticFrame(labels=labels),
    )


def _march_columns(grid: GridWorld, position: Point3, dirs: np.ndarray,
                   max_range: float) -> tuple[np.ndarray, np.ndarray]:
    """2D grid traversal for a bundle of rays from one origin.

    Returns per-ray forward distance to the first non-navigable cell
    (inf for none within max_range) and that cell's label.
    """
    n = dirs.shape[0]
    res = grid.resolution
    ox = (position.x - grid.origin.x) / res
    oy = (position.y - grid.origin.y) / res
    cur_x = np.full(n, math.floor(ox + 0.5), dtype=int)
    cur_y = np.full(n, math.floor(oy + 0.5), dtype=int)
    vx, vy = dirs[:, 0], dirs[:, 1]
    step_x = np.where(vx > 0, 1, -1)
    step_y = np.where(vy > 0, 1, -1)
    with np.errstate(divide="ignore"):
        t_delta_x = np.where(vx != 0, res / np.abs(vx), np.inf)
        t_delta_y = np.where(vy != 0, res / np.abs(vy), np.inf)
        # distance to the first cell boundary on each axis; cell spans
        # [c - 0.5, c + 0.5] in cell units around its center
        bx = cur_x + np.where(vx > 0, 0.5, -0.5)
        by = cur_y + np.where(vy > 0, 0.5, -0.5)
        t_max_x = np.where(vx != 0, (bx - ox) * res / vx, np.inf)
        t_max_y = np.where(vy != 0, (by - oy) * res / vy, np.inf)

    s_wall = np.full(n, np.inf)
    label = np.zeros(n, dtype=np.uint8)
    active = np.ones(n, dtype=bool)
    max_iter = 4 * (grid.width + grid.height)
    for _ in range(max_iter):
        if not active.any():
            break
        take_x = active & (t_max_x <= t_max_y)
        take_y = active & ~take_x
        t_cross = np.where(take_x, t_max_x, t_max_y)
        over = active & (t_cross > max_range)
        active &= ~over
        take_x &= active
        take_y &= active
        cur_x[take_x] += step_x[take_x]
        t_max_x[take_x] += t_delta_x[take_x]
        cur_y[take_y] += step_y[take_y]
        t_max_y[take_y] += t_delta_y[take_y]
        moved = take_x | take_y
        if not moved.any():
            break
        inside = (cur_x >= 0) & (cur_x < grid.width) & (cur_y >= 0) & (cur_y < grid.height)
        escaped = moved & ~inside
        active &= ~escaped
        check = moved & inside
        if check.any():
            xs, ys = cur_x[check], cur_y[check]
            blocked = ~grid.navigable[ys, xs]
            idx = np.nonzero(check)[0][blocked]
            s_wall[idx] = t_cross[idx]
            label[idx] = grid.semantic[ys[blocked], xs[blocked]]
            active[idx] = False
    return s_wall, label
