import json
import math
import socket
import threading
import time
from pathlib import Path

import pytest

from ivln.environment import Point3, geodesic_distance
from ivln.errors import PolicyTimeout, ProtocolViolation
from ivln.harness import (
    AgentAction,
    AgentState,
    ExternalPolicy,
    NoisyOraclePolicy,
    OraclePolicy,
    RandomPolicy,
    RunConfig,
    SocketTransport,
    StopPolicy,
    SubprocessTransport,
    apply_action,
    legal_actions,
    make_policy,
    oracle_follower,
    run_tour,
    run_tours,
)
from ivln.metrics import ndtw, write_traces
from ivln.tourgen import Episode, Tour

from conftest import check_trace_invariants


AGENT_SCRIPT = Path(__file__).resolve().parents[1] / "scripts" / "example_agent.py"


def P(ix, iy):
    return Point3(ix * 0.25, iy * 0.25, 0.0)


def ep(eid, cells, heading=0.0):
    return Episode(
        episode_id=eid,
        path_id="path_" + eid,
        scene_id="open-room",
        path=[P(ix, iy) for ix, iy in cells],
        start_heading=heading,
        instruction_id=eid + "_i0",
        instruction="walk",
    )


def tour_of(*eps):
    return (
        Tour("t0", eps[0].scene_id, [e.episode_id for e in eps]),
        {e.episode_id: e for e in eps},
    )


def labels(actions):
    return [a.label() for a in actions]


# -- oracle follower ----------------------------------------------------------


def test_oracle_follower_single_point(open_room):
    acts = oracle_follower(open_room, ep("e", [(2, 2)]))
    assert labels(acts) == ["stop"]


def test_oracle_follower_straight_metre(open_room):
    acts = oracle_follower(open_room, ep("e", [(2, 2), (6, 2)], heading=0.0))
    assert labels(acts) == ["forward"] * 4 + ["stop"]


def test_oracle_follower_turns_until_aligned(open_room):
    # goal is due north; five 15 degree lefts reach the (0, 1) sector
    acts = oracle_follower(open_room, ep("e", [(2, 2), (2, 5)], heading=0.0))
    assert labels(acts) == ["left"] * 5 + ["forward"] * 3 + ["stop"]


def test_oracle_follower_opposite_heading_turns_right(open_room):
    # a 180 degree about-face is a tie; the oracle breaks it clockwise
    acts = oracle_follower(open_room, ep("e", [(4, 2), (2, 2)], heading=0.0))
    assert labels(acts)[0] == "right"


def test_oracle_follower_on_graph(square_graph):
    episode = Episode(
        episode_id="g",
        path_id="path_g",
        scene_id="square",
        path=[Point3(0, 0, 1), Point3(2, 0, 1), Point3(2, 2, 1)],
        start_heading=0.0,
        instruction_id="g_i0",
        instruction="ring",
    )
    acts = oracle_follower(square_graph, episode)
    assert labels(acts) == ["goto:b", "goto:c", "stop"]


# -- motion model -------------------------------------------------------------


def test_apply_action_turns(open_room):
    cfg = RunConfig()
    state = AgentState((2, 2), 0.0)
    left = apply_action(open_room, state, AgentAction("left"), cfg)
    assert left.heading == pytest.approx(math.radians(15))
    right = apply_action(open_room, state, AgentAction("right"), cfg)
    assert right.heading == pytest.approx(math.radians(345))
    assert left.location == right.location == (2, 2)


def test_apply_action_forward_and_blocked(open_room):
    cfg = RunConfig()
    fwd = apply_action(open_room, AgentState((2, 2), 0.0), AgentAction("forward"), cfg)
    assert fwd.location == (3, 2)
    blocked = apply_action(open_room, AgentState((1, 2), math.pi), AgentAction("forward"), cfg)
    assert blocked.location == (1, 2)


def test_apply_action_graph_goto(square_graph):
    cfg = RunConfig()
    state = AgentState("a", 0.0)
    hop = apply_action(square_graph, state, AgentAction("goto", node="b"), cfg)
    assert hop.location == "b"
    assert hop.heading == pytest.approx(0.0)
    with pytest.raises(ProtocolViolation):
        apply_action(square_graph, state, AgentAction("goto", node="c"), cfg)
    with pytest.raises(ProtocolViolation):
        apply_action(square_graph, state, AgentAction("forward"), cfg)


def test_legal_actions(open_room, square_graph):
    kinds = {a.kind for a in legal_actions(open_room, AgentState((2, 2), 0.0))}
    assert kinds == {"forward", "left", "right", "stop"}
    graph_labels = {a.label() for a in legal_actions(square_graph, AgentState("a", 0.0))}
    assert graph_labels == {"goto:b", "goto:d", "stop"}


def test_budget_defaults(open_room, square_graph):
    cfg = RunConfig()
    assert cfg.budget(open_room) == 500
    assert cfg.budget(square_graph) == 15
    assert RunConfig(max_steps_per_episode=7).budget(open_room) == 7


# -- rollouts -----------------------------------------------------------------


def test_oracle_rollout_has_no_corrections(open_room):
    # dense cell-by-cell references, as the episode generator emits them
    tour, by_id = tour_of(
        ep("e0", [(2, 2), (3, 2), (4, 2), (5, 2), (6, 2)]),
        ep("e1", [(6, 2), (6, 3), (6, 4), (6, 5)]),  # starts at e0's goal
    )
    trace, occ_map = run_tour(open_room, tour, by_id, OraclePolicy(open_room, by_id))
    assert occ_map is None
    check_trace_invariants(trace, 2)
    assert trace.oracle_segments == []
    for et in trace.episodes:
        assert et.stop_called
        assert ndtw(et.agent_path, et.reference_path, d_th=3.0) == pytest.approx(1.0)


def test_stop_policy_gets_corrected_and_transits(open_room):
    tour, by_id = tour_of(
        ep("e0", [(2, 2), (6, 2)]),
        ep("e1", [(2, 5), (6, 5)]),
    )
    trace, _ = run_tour(open_room, tour, by_id, StopPolicy())
    check_trace_invariants(trace, 2)
    assert trace.episodes[0].actions == ["stop"]
    kinds = [(s.kind, s.episode_id) for s in trace.oracle_segments]
    assert ("oracle_goal", "e0") in kinds  # stopped 1 m short: corrected
    assert ("oracle_transit", "e0") in kinds  # next start elsewhere
    assert ("oracle_goal", "e1") in kinds
    assert ("oracle_transit", "e1") not in kinds  # last episode never transits
    # the correction really ends at the goal
    goal_seg = trace.oracle_segments[0]
    assert goal_seg.points[-1] == by_id["e0"].path[-1]


def test_correction_skipped_inside_radius(open_room):
    # goal 0.5 m ahead: a 2-step walk ends exactly there under oracle,
    # and a stop policy ends within the default 0.5 m radius
    tour, by_id = tour_of(ep("e0", [(2, 2), (4, 2)]))
    trace, _ = run_tour(open_room, tour, by_id, StopPolicy())
    assert trace.oracle_segments == []


def test_budget_exhaustion_never_stops(open_room):
    class Spinner:
        def reset(self, tour_id):
            pass

        def begin_episode(self, episode_id, instruction):
            pass

        def act(self, obs):
            return AgentAction("left")

        def observe(self, obs):
            pass

        def close(self):
            pass

    tour, by_id = tour_of(ep("e0", [(2, 2), (6, 2)]))
    cfg = RunConfig(max_steps_per_episode=9)
    trace, _ = run_tour(open_room, tour, by_id, Spinner(), cfg)
    et = trace.episodes[0]
    assert et.actions == ["left"] * 9
    assert not et.stop_called
    assert len(et.agent_path) == 10
    # ran out 1 m short of the goal: the oracle walks it home
    assert trace.oracle_segments[0].kind == "oracle_goal"


def test_forced_start_heading(open_room):
    seen = []

    class Probe(StopPolicy):
        def act(self, obs):
            seen.append(obs.pose.heading)
            return super().act(obs)

    tour, by_id = tour_of(
        ep("e0", [(2, 2), (3, 2)], heading=1.0),
        ep("e1", [(3, 2), (4, 2)], heading=2.5),
    )
    run_tour(open_room, tour, by_id, Probe())
    assert seen == [1.0, 2.5]


def test_noisy_seed_reproducible(synth, tmp_path):
    scene, by_id = synth["scene"], synth["by_id"]
    tour = synth["tours"][0]
    files = []
    for run in range(2):
        policy = NoisyOraclePolicy(scene, by_id, p_error=0.3, seed=11)
        trace, _ = run_tour(scene, tour, by_id, policy)
        check_trace_invariants(trace, len(tour.episode_ids))
        out = tmp_path / f"run{run}.jsonl"
        write_traces([trace], out)
        files.append(out.read_bytes())
    assert files[0] == files[1]
    other = NoisyOraclePolicy(scene, by_id, p_error=0.3, seed=12)
    trace, _ = run_tour(scene, tour, by_id, other)
    out = tmp_path / "other.jsonl"
    write_traces([trace], out)
    assert out.read_bytes() != files[0]


def test_noisy_p_zero_matches_oracle(synth, tmp_path):
    scene, by_id = synth["scene"], synth["by_id"]
    tours = synth["tours"][:1]
    for name, policy in [
        ("oracle", OraclePolicy(scene, by_id)),
        ("noisy", NoisyOraclePolicy(scene, by_id, p_error=0.0, seed=5)),
    ]:
        traces, _ = run_tours(scene, tours, by_id, policy)
        write_traces(traces, tmp_path / f"{name}.jsonl")
    assert (tmp_path / "oracle.jsonl").read_bytes() == (tmp_path / "noisy.jsonl").read_bytes()


def test_run_tour_builds_iterative_map(open_room):
    tour, by_id = tour_of(ep("e0", [(2, 2), (6, 2)]))
    cfg = RunConfig(map_mode="iterative")
    trace, occ_map = run_tour(open_room, tour, by_id, OraclePolicy(open_room, by_id), cfg)
    assert occ_map is not None
    assert occ_map.observed.any()
    assert occ_map.occupancy.any()


def test_random_policy_returns_legal_actions(open_room):
    tour, by_id = tour_of(ep("e0", [(2, 2), (6, 2)]))
    cfg = RunConfig(max_steps_per_episode=20)
    trace, _ = run_tour(open_room, tour, by_id, RandomPolicy(open_room, seed=3), cfg)
    assert set(trace.episodes[0].actions) <= {"forward", "left", "right", "stop"}


# -- wire protocol ------------------------------------------------------------


class WireServer:
    """Single-connection scripted agent on a local TCP port."""

    def __init__(self, act):
        self.act = act
        self.messages = []
        self.sock = socket.socket()
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(1)
        self.port = self.sock.getsockname()[1]
        self.thread = threading.Thread(target=self._serve, daemon=True)
        self.thread.start()

    def _serve(self):
        conn, _ = self.sock.accept()
        buf = b""
        with conn, self.sock:
            while True:
                chunk = conn.recv(65536)
                if not chunk:
                    return
                buf += chunk
                while b"\n" in buf:
                    line, buf = buf.split(b"\n", 1)
                    msg = json.loads(line)
                    self.messages.append(msg)
                    if msg["type"] == "close":
                        return
                    if msg["type"] == "observe" and not msg["passive"]:
                        reply = self.act(msg)
                    else:
                        reply = {"type": "ack"}
                    if isinstance(reply, dict):
                        reply = json.dumps(reply).encode() + b"\n"
                    conn.sendall(reply)


def run_with_server(scene, tour, by_id, act, timeout=2.0):
    server = WireServer(act)
    policy = ExternalPolicy(SocketTransport("127.0.0.1", server.port), timeout=timeout)
    try:
        return server, run_tour(scene, tour, by_id, policy)
    finally:
        policy.close()
        server.thread.join(timeout=2.0)


def test_socket_agent_message_flow(open_room):
    tour, by_id = tour_of(ep("e0", [(2, 2), (6, 2)], heading=0.5))
    server, (trace, _) = run_with_server(
        open_room, tour, by_id, lambda msg: {"type": "act", "action": "stop"}
    )
    assert trace.episodes[0].actions == ["stop"]
    types = [m["type"] for m in server.messages]
    assert types[0] == "reset" and server.messages[0]["tour_id"] == "t0"
    assert types[1] == "episode"
    assert server.messages[1]["episode_id"] == "e0"
    assert server.messages[1]["instruction"] == "walk"
    assert types[-1] == "close"
    observes = [m for m in server.messages if m["type"] == "observe"]
    first = observes[0]
    assert first["passive"] is False
    assert first["pose"] == [0.5, 0.5, 0.0, 0.5]
    assert first["cell"] == [2, 2]
    assert first["crop"] is None
    assert isinstance(first["steps_remaining"], int)
    # the goal correction re-observes passively
    assert any(m["passive"] for m in observes)


def test_socket_agent_timeout_carries_partial_trace(open_room):
    tour, by_id = tour_of(ep("e0", [(2, 2), (6, 2)]))

    def slow(msg):
        time.sleep(0.5)
        return {"type": "act", "action": "stop"}

    server = WireServer(slow)
    policy = ExternalPolicy(SocketTransport("127.0.0.1", server.port), timeout=0.1)
    with pytest.raises(PolicyTimeout) as exc_info:
        run_tour(open_room, tour, by_id, policy)
    partial = exc_info.value.partial_trace
    assert partial.tour_id == "t0"
    assert partial.episodes[0].episode_id == "e0"
    assert not partial.episodes[0].stop_called
    policy.close()


def test_socket_agent_garbage_reply(open_room):
    tour, by_id = tour_of(ep("e0", [(2, 2), (6, 2)]))
    server = WireServer(lambda msg: b"certainly not json\n")
    policy = ExternalPolicy(SocketTransport("127.0.0.1", server.port), timeout=2.0)
    with pytest.raises(ProtocolViolation) as exc_info:
        run_tour(open_room, tour, by_id, policy)
    assert exc_info.value.partial_trace.episodes
    policy.close()


def test_socket_agent_unknown_action(open_room):
    tour, by_id = tour_of(ep("e0", [(2, 2), (6, 2)]))
    server = WireServer(lambda msg: {"type": "act", "action": "moonwalk"})
    policy = ExternalPolicy(SocketTransport("127.0.0.1", server.port), timeout=2.0)
    with pytest.raises(ProtocolViolation):
        run_tour(open_room, tour, by_id, policy)
    policy.close()


def test_socket_agent_goto_needs_node(square_graph):
    episode = Episode(
        episode_id="g",
        path_id="path_g",
        scene_id="square",
        path=[Point3(0, 0, 1), Point3(2, 0, 1)],
        start_heading=0.0,
        instruction_id="g_i0",
        instruction="ring",
    )
    tour = Tour("t0", "square", ["g"])
    server = WireServer(lambda msg: {"type": "act", "action": "goto"})
    policy = ExternalPolicy(SocketTransport("127.0.0.1", server.port), timeout=2.0)
    with pytest.raises(ProtocolViolation, match="node"):
        run_tour(square_graph, tour, {"g": episode}, policy)
    policy.close()


def test_subprocess_agent_round_trip(open_room):
    tour, by_id = tour_of(ep("e0", [(2, 2), (6, 2)]), ep("e1", [(6, 2), (6, 5)]))
    policy = ExternalPolicy(
        SubprocessTransport(f"python3 {AGENT_SCRIPT} --forward-steps 2"), timeout=10.0
    )
    try:
        trace, _ = run_tour(open_room, tour, by_id, policy)
    finally:
        policy.close()
    check_trace_invariants(trace, 2)
    for et in trace.episodes:
        assert et.actions == ["forward", "forward", "stop"]


def test_make_policy_specs(open_room):
    by_id = {}
    cfg = RunConfig(seed=4)
    assert isinstance(make_policy("oracle", open_room, by_id, cfg), OraclePolicy)
    noisy = make_policy("noisy:0.25", open_room, by_id, cfg)
    assert isinstance(noisy, NoisyOraclePolicy)
    assert noisy.p_error == pytest.approx(0.25)
    assert isinstance(make_policy("random", open_room, by_id, cfg), RandomPolicy)
    assert isinstance(make_policy("stop", open_room, by_id, cfg), StopPolicy)
    with pytest.raises(ValueError):
        make_policy("telepathy", open_room, by_id, cfg)
