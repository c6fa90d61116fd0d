"""Tour rollouts: alternating agent and oracle phases.

A tour runs its episodes back to back.  For each episode the policy in
control acts until it stops or exhausts the step budget; if it ends
farther than the correction radius from the goal, an oracle drives the
agent the rest of the way along the shortest path, and between episodes
the oracle walks the agent to the next start.  The policy receives
passive observations while the oracle drives but takes no actions, and
oracle motion is logged in separate trace segments that scoring never
reads.

Motion is quantized to the scene: on grids a forward step moves one
cell toward the nearest of the eight compass directions to the agent's
heading (a blocked step is a no-op), turns rotate in fixed increments;
on graphs the agent hops between adjacent nodes.  Positions in traces
are therefore always cell centers or node positions.

External policies speak line-delimited JSON over a subprocess pipe or a
TCP socket.  Active observations are answered with an act message,
everything else with an ack, each within the per-step deadline.
"""

from __future__ import annotations

import json
import math
import os
import random
import selectors
import shlex
import socket
import subprocess
import time
from dataclasses import dataclass

import numpy as np

from .environment import (
    GeodesicMetric,
    Point3,
    Pose,
    Scene,
    _graph_astar,
    _grid_astar,
    normalize_heading,
)
from .errors import MissingEpisode, PolicyTimeout, ProtocolViolation, UnsupportedScene
from .mapper import (
    EPISODE_START,
    TOUR_START,
    CameraIntrinsics,
    SemanticOccMap,
    crop_egocentric,
    crop_to_flat,
    integrate,
    known_map,
    reset_policy,
    synthesize_views,
    unproject,
)
from .metrics import EpisodeTrace, OracleSegment, TourTrace
from .tourgen import Episode, Tour

FORWARD = "forward"
TURN_LEFT = "left"
TURN_RIGHT = "right"
STOP = "stop"
GOTO = "goto"

DEFAULT_MAX_STEPS_CONTINUOUS = 500
DEFAULT_MAX_STEPS_DISCRETE = 15

# compass directions for heading quantization; index k covers the 45
# degree sector centered at k * 45 degrees
_DIR8 = ((1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1))


@dataclass(frozen=True)
class AgentAction:
    kind: str
    node: str | None = None

    def label(self) -> str:
        return f"{GOTO}:{self.node}" if self.kind == GOTO else self.kind


@dataclass
class Observation:
    episode_id: str
    episode_index_in_tour: int
    instruction: str
    pose: Pose
    location: object  # cell tuple (grid) or node id (graph)
    steps_remaining: int
    phase: str  # "agent" | "oracle"
    crop: np.ndarray | None = None


@dataclass
class RunConfig:
    """Knobs of a rollout; None for the step budget means the per-kind
    default (500 continuous, 15 discrete)."""

    max_steps_per_episode: int | None = None
    oracle_correction_radius: float = 0.5
    map_mode: str = "none"  # none | episodic | iterative | known
    forward_step: float = 0.25
    turn_deg: float = 15.0
    crop_size: int = 64
    camera_height: float = 1.25
    frame_width: int = 64
    frame_height: int = 48
    hfov_deg: float = 90.0
    max_range: float = 10.0
    step_timeout: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.max_steps_per_episode is not None and self.max_steps_per_episode < 1:
            raise ValueError("max_steps_per_episode must be at least 1")
        if self.oracle_correction_radius <= 0:
            raise ValueError("oracle_correction_radius must be positive")

    def budget(self, scene: Scene) -> int:
        if self.max_steps_per_episode is not None:
            return self.max_steps_per_episode
        return DEFAULT_MAX_STEPS_DISCRETE if scene.is_discrete else DEFAULT_MAX_STEPS_CONTINUOUS


@dataclass
class AgentState:
    location: object
    heading: float

    def __post_init__(self):
        self.heading = normalize_heading(self.heading)


def heading_to_dir8(heading: float) -> tuple[int, int]:
    k = round(heading / (math.pi / 4.0)) % 8
    return _DIR8[k]


def agent_position(scene: Scene, state: AgentState) -> Point3:
    return scene.location_point(state.location)


def legal_actions(scene: Scene, state: AgentState) -> list[AgentAction]:
    if scene.is_discrete:
        hops = [AgentAction(GOTO, node=n) for n in scene.graph.adjacency[state.location]]
        return hops + [AgentAction(STOP)]
    return [AgentAction(FORWARD), AgentAction(TURN_LEFT), AgentAction(TURN_RIGHT), AgentAction(STOP)]


def apply_action(scene: Scene, state: AgentState, action: AgentAction, cfg: RunConfig) -> AgentState:
    """Next state under the motion model; blocked moves leave it unchanged."""
    if action.kind == STOP:
        return state
    if scene.is_discrete:
        if action.kind != GOTO:
            raise ProtocolViolation(f"graph scenes accept goto or stop, got {action.kind}")
        if action.node not in scene.graph.adjacency[state.location]:
            raise ProtocolViolation(
                f"goto target {action.node} is not adjacent to {state.location}"
            )
        a = scene.graph.nodes[state.location]
        b = scene.graph.nodes[action.node]
        heading = math.atan2(b.y - a.y, b.x - a.x)
        return AgentState(action.node, heading)
    turn = math.radians(cfg.turn_deg)
    if action.kind == TURN_LEFT:
        return AgentState(state.location, state.heading + turn)
    if action.kind == TURN_RIGHT:
        return AgentState(state.location, state.heading - turn)
    if action.kind != FORWARD:
        raise ProtocolViolation(f"grid scenes accept move/turn/stop, got {action.kind}")
    dx, dy = heading_to_dir8(state.heading)
    ix, iy = state.location
    target = (ix + dx, iy + dy)
    grid = scene.grid
    if not grid.is_navigable(target):
        return state
    if dx != 0 and dy != 0:
        if not (grid.is_navigable((ix + dx, iy)) and grid.is_navigable((ix, iy + dy))):
            return state
    return AgentState(target, state.heading)


# ---------------------------------------------------------------------------
# waypoint control (the oracle and its noisy variant)


def _dedup(seq):
    out = []
    for item in seq:
        if not out or out[-1] != item:
            out.append(item)
    return out


def _step_toward(scene: Scene, state: AgentState, target) -> AgentAction | None:
    """One action moving the agent toward a snapped location; None if there."""
    if state.location == target:
        return None
    if scene.is_discrete:
        found = _graph_astar(scene.graph, state.location, target)
        if found is None:
            return None
        return AgentAction(GOTO, node=found[1][1])
    found = _grid_astar(scene.grid, state.location, target)
    if found is None:
        return None
    nxt = found[1][1]
    dx = nxt[0] - state.location[0]
    dy = nxt[1] - state.location[1]
    if heading_to_dir8(state.heading) == (dx, dy):
        return AgentAction(FORWARD)
    want = math.atan2(dy, dx)
    diff = (want - state.heading + math.pi) % (2.0 * math.pi) - math.pi
    return AgentAction(TURN_LEFT) if diff > 0 else AgentAction(TURN_RIGHT)


class _WaypointCursor:
    """Tracks progress along a snapped reference path."""

    def __init__(self, scene: Scene, points):
        self.targets = _dedup([scene.snap_point(p) for p in points])
        self.index = 0

    def next_target(self, location):
        while self.index < len(self.targets) and self.targets[self.index] == location:
            self.index += 1
        if self.index >= len(self.targets):
            return None
        return self.targets[self.index]


class Policy:
    """Base policy; subclasses override act, the rest are optional hooks."""

    def reset(self, tour_id: str) -> None:
        pass

    def begin_episode(self, episode_id: str, instruction: str) -> None:
        pass

    def act(self, obs: Observation) -> AgentAction:
        raise NotImplementedError

    def observe(self, obs: Observation) -> None:
        pass

    def close(self) -> None:
        pass


class StopPolicy(Policy):
    def act(self, obs):
        return AgentAction(STOP)


class RandomPolicy(Policy):
    """Uniform over the legal actions at each step."""

    def __init__(self, scene: Scene, seed: int = 0):
        self.scene = scene
        self.rng = random.Random(seed)

    def act(self, obs):
        options = legal_actions(self.scene, AgentState(obs.location, obs.pose.heading))
        return options[self.rng.randrange(len(options))]


class OraclePolicy(Policy):
    """Follows each episode's reference path, then stops."""

    def __init__(self, scene: Scene, episodes_by_id: dict[str, Episode]):
        self.scene = scene
        self.episodes_by_id = episodes_by_id
        self.cursor: _WaypointCursor | None = None

    def begin_episode(self, episode_id, instruction):
        self.cursor = _WaypointCursor(self.scene, self.episodes_by_id[episode_id].path)

    def act(self, obs):
        target = self.cursor.next_target(obs.location)
        if target is None:
            return AgentAction(STOP)
        action = _step_toward(self.scene, AgentState(obs.location, obs.pose.heading), target)
        return action if action is not None else AgentAction(STOP)


class NoisyOraclePolicy(OraclePolicy):
    """Oracle that errs: with probability p_error a uniform legal action
    (including stop) replaces the intended one.  The oracle replans from
    whatever state the error leaves, so small error rates degrade paths
    gracefully instead of derailing them."""

    def __init__(self, scene, episodes_by_id, p_error: float, seed: int = 0):
        if not 0.0 <= p_error <= 1.0:
            raise ValueError("p_error must lie in [0, 1]")
        super().__init__(scene, episodes_by_id)
        self.p_error = p_error
        self.rng = random.Random(seed)

    def act(self, obs):
        intended = super().act(obs)
        if self.rng.random() < self.p_error:
            options = legal_actions(self.scene, AgentState(obs.location, obs.pose.heading))
            return options[self.rng.randrange(len(options))]
        return intended


def oracle_follower(scene: Scene, episode: Episode, cfg: RunConfig | None = None) -> list[AgentAction]:
    """Action sequence the oracle takes for one episode, ending in stop."""
    if cfg is None:
        cfg = RunConfig()
    state = AgentState(scene.snap_point(episode.path[0]), episode.start_heading)
    cursor = _WaypointCursor(scene, episode.path)
    actions: list[AgentAction] = []
    guard = 16 * cfg.budget(scene) + 64
    while len(actions) < guard:
        target = cursor.next_target(state.location)
        if target is None:
            break
        action = _step_toward(scene, state, target)
        if action is None:
            break
        actions.append(action)
        state = apply_action(scene, state, action, cfg)
    actions.append(AgentAction(STOP))
    return actions


# ---------------------------------------------------------------------------
# rollout


class _Sensor:
    """Renders observations at the agent pose and feeds the map."""

    def __init__(self, scene: Scene, occ_map: SemanticOccMap | None, cfg: RunConfig):
        self.scene = scene
        self.occ_map = occ_map
        self.cfg = cfg
        self.intrinsics = CameraIntrinsics.from_hfov(cfg.frame_width, cfg.frame_height, cfg.hfov_deg)

    def sense(self, state: AgentState) -> None:
        if self.occ_map is None or self.occ_map.mode == "known":
            return
        grid = self.scene.grid
        pos = agent_position(self.scene, state)
        cam = Pose(Point3(pos.x, pos.y, grid.floor_z + self.cfg.camera_height), state.heading)
        depth, sem = synthesize_views(grid, cam, self.intrinsics, self.cfg.max_range)
        points, labels = unproject(depth, sem)
        integrate(self.occ_map, points, labels, grid.floor_z, grid.ceiling_z)

    def crop(self, state: AgentState) -> np.ndarray | None:
        if self.occ_map is None:
            return None
        pos = agent_position(self.scene, state)
        return crop_egocentric(self.occ_map, Pose(pos, state.heading), self.cfg.crop_size)


def _make_obs(scene, state, sensor, episode, index, steps_remaining, phase) -> Observation:
    return Observation(
        episode_id=episode.episode_id,
        episode_index_in_tour=index,
        instruction=episode.instruction,
        pose=Pose(agent_position(scene, state), state.heading),
        location=state.location,
        steps_remaining=steps_remaining,
        phase=phase,
        crop=sensor.crop(state),
    )


def _oracle_drive(scene, state, target, sensor, policy, episode, index, cfg):
    """Drive to a snapped location, logging motion and passive observations."""
    points: list[Point3] = []
    actions: list[str] = []
    guard = 64 * (DEFAULT_MAX_STEPS_CONTINUOUS + 64)
    while len(actions) < guard:
        action = _step_toward(scene, state, target)
        if action is None:
            break
        state = apply_action(scene, state, action, cfg)
        points.append(agent_position(scene, state))
        actions.append(action.label())
        sensor.sense(state)
        policy.observe(_make_obs(scene, state, sensor, episode, index, 0, "oracle"))
    return state, points, actions


def run_tour(
    scene: Scene,
    tour: Tour,
    episodes_by_id: dict[str, Episode],
    policy: Policy,
    cfg: RunConfig | None = None,
) -> tuple[TourTrace, SemanticOccMap | None]:
    """Execute one tour; returns its trace and the final map (if any).

    The map mode must be "none" on graph scenes, which have no depth
    sensing.  Every episode runs: agent phase under the policy, then a
    goal correction when the agent ended farther than the correction
    radius from the goal (geodesic), then a transit to the next start.
    On policy failure the exception carries the partial trace in its
    ``partial_trace`` attribute.
    """
    if cfg is None:
        cfg = RunConfig()
    try:
        episodes = [episodes_by_id[eid] for eid in tour.episode_ids]
    except KeyError as exc:
        raise MissingEpisode(f"tour {tour.tour_id} references unknown episode {exc}") from None

    occ_map = None
    if cfg.map_mode != "none":
        if scene.is_discrete:
            raise UnsupportedScene("maps need a grid scene")
        if cfg.map_mode == "known":
            occ_map = known_map(scene.grid)
        else:
            occ_map = SemanticOccMap.for_grid(scene.grid, cfg.map_mode)
        reset_policy(occ_map, TOUR_START)

    sensor = _Sensor(scene, occ_map, cfg)
    geo = GeodesicMetric(scene)
    budget = cfg.budget(scene)
    policy.reset(tour.tour_id)

    state: AgentState | None = None
    episode_traces: list[EpisodeTrace] = []
    segments: list[OracleSegment] = []
    for index, episode in enumerate(episodes):
        if occ_map is not None:
            reset_policy(occ_map, EPISODE_START)
        if state is None:
            state = AgentState(scene.snap_point(episode.path[0]), episode.start_heading)
        else:
            state = AgentState(state.location, episode.start_heading)
        sensor.sense(state)
        policy.begin_episode(episode.episode_id, episode.instruction)

        agent_path = [agent_position(scene, state)]
        actions: list[str] = []
        stop_called = False
        try:
            for step in range(budget):
                obs = _make_obs(scene, state, sensor, episode, index, budget - step, "agent")
                action = policy.act(obs)
                actions.append(action.label())
                if action.kind == STOP:
                    stop_called = True
                    break
                state = apply_action(scene, state, action, cfg)
                agent_path.append(agent_position(scene, state))
                sensor.sense(state)
        except (PolicyTimeout, ProtocolViolation) as exc:
            partial = episode_traces + [
                EpisodeTrace(
                    episode_id=episode.episode_id,
                    agent_path=agent_path,
                    reference_path=episode.path,
                    stop_called=False,
                    actions=actions,
                )
            ]
            exc.partial_trace = TourTrace(
                tour_id=tour.tour_id, episodes=partial, oracle_segments=segments
            )
            raise
        episode_traces.append(
            EpisodeTrace(
                episode_id=episode.episode_id,
                agent_path=agent_path,
                reference_path=episode.path,
                stop_called=stop_called,
                actions=actions,
            )
        )

        goal = episode.path[-1]
        if geo(goal, agent_position(scene, state)) > cfg.oracle_correction_radius:
            state, pts, acts = _oracle_drive(
                scene, state, scene.snap_point(goal), sensor, policy, episode, index, cfg
            )
            segments.append(OracleSegment("oracle_goal", episode.episode_id, pts, acts))
        if index + 1 < len(episodes):
            nxt = scene.snap_point(episodes[index + 1].path[0])
            if state.location != nxt:
                state, pts, acts = _oracle_drive(
                    scene, state, nxt, sensor, policy, episode, index, cfg
                )
                segments.append(OracleSegment("oracle_transit", episode.episode_id, pts, acts))
    return TourTrace(tour_id=tour.tour_id, episodes=episode_traces, oracle_segments=segments), occ_map


def run_tours(scene, tours, episodes_by_id, policy, cfg=None):
    """Run tours sequentially with one policy; returns (traces, last map)."""
    traces = []
    occ_map = None
    for tour in tours:
        trace, occ_map = run_tour(scene, tour, episodes_by_id, policy, cfg)
        traces.append(trace)
    return traces, occ_map


# ---------------------------------------------------------------------------
# external policies (line-delimited JSON)


def observation_message(obs: Observation) -> dict:
    """Wire form of an observation; pose is [x, y, z, heading]."""
    msg = {
        "type": "observe",
        "pose": [obs.pose.position.x, obs.pose.position.y, obs.pose.position.z, obs.pose.heading],
        "steps_remaining": obs.steps_remaining,
        "crop": None if obs.crop is None else crop_to_flat(obs.crop),
        "passive": obs.phase != "agent",
        "episode_id": obs.episode_id,
        "episode_index": obs.episode_index_in_tour,
    }
    if isinstance(obs.location, str):
        msg["node"] = obs.location
    else:
        msg["cell"] = list(obs.location)
    return msg


class SubprocessTransport:
    """Line-delimited JSON over a child process's stdin/stdout."""

    def __init__(self, command: str):
        self.proc = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            bufsize=0,
        )
        self._buf = b""
        self._sel = selectors.DefaultSelector()
        self._sel.register(self.proc.stdout, selectors.EVENT_READ)

    def send(self, message: dict) -> None:
        data = (json.dumps(message, sort_keys=True, separators=(",", ":")) + "\n").encode()
        try:
            self.proc.stdin.write(data)
            self.proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise ProtocolViolation(f"agent process closed its input: {exc}") from None

    def recv(self, timeout: float) -> dict:
        deadline = time.monotonic() + timeout
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise PolicyTimeout(f"no reply within {timeout} s")
            if not self._sel.select(remaining):
                continue
            chunk = os.read(self.proc.stdout.fileno(), 65536)
            if not chunk:
                raise ProtocolViolation("agent process closed its output")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return _parse_message(line)

    def close(self) -> None:
        try:
            self.send({"type": "close"})
        except ProtocolViolation:
            pass
        try:
            self.proc.stdin.close()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()
        self._sel.close()


class SocketTransport:
    """Line-delimited JSON over a TCP connection."""

    def __init__(self, host: str, port: int, connect_timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=connect_timeout)
        self._buf = b""

    def send(self, message: dict) -> None:
        data = (json.dumps(message, sort_keys=True, separators=(",", ":")) + "\n").encode()
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ProtocolViolation(f"agent connection failed: {exc}") from None

    def recv(self, timeout: float) -> dict:
        deadline = time.monotonic() + timeout
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise PolicyTimeout(f"no reply within {timeout} s")
            self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(65536)
            except TimeoutError:
                raise PolicyTimeout(f"no reply within {timeout} s") from None
            except OSError as exc:
                raise ProtocolViolation(f"agent connection failed: {exc}") from None
            if not chunk:
                raise ProtocolViolation("agent closed the connection")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return _parse_message(line)

    def close(self) -> None:
        try:
            self.send({"type": "close"})
        except ProtocolViolation:
            pass
        self.sock.close()


def _parse_message(line: bytes) -> dict:
    try:
        message = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolViolation(f"bad JSON from agent: {exc}") from None
    if not isinstance(message, dict) or "type" not in message:
        raise ProtocolViolation(f"agent messages must be objects with a type: {line[:200]!r}")
    return message


_ACTION_NAMES = {FORWARD, TURN_LEFT, TURN_RIGHT, STOP, GOTO}


class ExternalPolicy(Policy):
    """Bridges the harness to an agent behind a transport."""

    def __init__(self, transport, timeout: float = 10.0):
        self.transport = transport
        self.timeout = timeout

    def _expect_ack(self):
        reply = self.transport.recv(self.timeout)
        if reply.get("type") != "ack":
            raise ProtocolViolation(f"expected ack, got {reply.get('type')!r}")

    def reset(self, tour_id):
        self.transport.send({"type": "reset", "tour_id": tour_id})
        self._expect_ack()

    def begin_episode(self, episode_id, instruction):
        self.transport.send(
            {"type": "episode", "episode_id": episode_id, "instruction": instruction}
        )
        self._expect_ack()

    def act(self, obs):
        self.transport.send(observation_message(obs))
        reply = self.transport.recv(self.timeout)
        if reply.get("type") != "act":
            raise ProtocolViolation(f"expected act, got {reply.get('type')!r}")
        kind = reply.get("action")
        if kind not in _ACTION_NAMES:
            raise ProtocolViolation(f"unknown action {kind!r}")
        if kind == GOTO:
            node = reply.get("node")
            if not isinstance(node, str):
                raise ProtocolViolation("goto actions need a node id")
            return AgentAction(GOTO, node=node)
        return AgentAction(kind)

    def observe(self, obs):
        self.transport.send(observation_message(obs))
        self._expect_ack()

    def close(self):
        self.transport.close()


def make_policy(spec: str, scene: Scene, episodes_by_id: dict, cfg: RunConfig) -> Policy:
    """Build a policy from its command-line spec string.

    Specs: "oracle", "noisy:<p_error>", "random", "stop",
    "ext:<command>" (subprocess), "tcp:<host>:<port>".
    """
    if spec == "oracle":
        return OraclePolicy(scene, episodes_by_id)
    if spec.startswith("noisy:"):
        return NoisyOraclePolicy(scene, episodes_by_id, float(spec.split(":", 1)[1]), seed=cfg.seed)
    if spec == "random":
        return RandomPolicy(scene, seed=cfg.seed)
    if spec == "stop":
        return StopPolicy()
    if spec.startswith("ext:"):
        transport = SubprocessTransport(spec.split(":", 1)[1])
        return ExternalPolicy(transport, timeout=cfg.step_timeout)
    if spec.startswith("tcp:"):
        _, host, port = spec.split(":")
        transport = SocketTransport(host, int(port))
        return ExternalPolicy(transport, timeout=cfg.step_timeout)
    raise ValueError(f"unknown policy spec {spec!r}")
