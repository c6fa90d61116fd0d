"""Command-line entry point.

Subcommands cover the full pipeline: gen-env and gen-episodes produce
synthetic inputs, gen-tours orders them into tours, run executes a
policy over the tours, eval scores the traces, coverage and stats emit
plot-ready CSV, and build-map replays a trace into a map snapshot.

Exit codes: 0 success, 1 policy failure during run (partial traces are
flushed first), 2 unreadable or invalid input, 3 infeasible request.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys

from .config import Config, resolve_config
from .coverage import CoverageCurve, ObservationModel, coverage_curves
from .environment import (
    FORMAT_VERSION,
    GeodesicMetric,
    Point3,
    Pose,
    euclidean,
    load_scene,
    normalize_heading,
    save_scene,
)
from .errors import (
    IvlnError,
    MissingEpisode,
    PolicyTimeout,
    ProtocolViolation,
    UnsupportedScene,
)
from .harness import RunConfig, make_policy, run_tour
from .mapper import (
    EPISODE_START,
    TOUR_START,
    CameraIntrinsics,
    SemanticOccMap,
    integrate,
    known_map,
    reset_policy,
    save_map,
    synthesize_views,
    unproject,
)
from .metrics import build_report, read_traces, write_traces
from .syngen import EpisodeSpec, FloorplanSpec, generate_episodes, generate_scene
from .tourgen import (
    build_tours,
    compute_tour_stats,
    load_episodes,
    load_tours,
    save_episodes,
    save_tours,
    unique_paths,
)

_PARSE_ERRORS = (OSError, json.JSONDecodeError, KeyError, ValueError, TypeError)


def _stats_block(stats) -> str:
    head = (
        f"{'scenes':>7} {'episodes':>9} {'tours':>6} {'tours/scene':>12} "
        f"{'mean':>7} {'min':>5} {'max':>5} {'stddev':>7}"
    )
    row = (
        f"{stats.scenes:>7d} {stats.episodes:>9d} {stats.tours:>6d} "
        f"{stats.tours_per_scene:>12.1f} {stats.mean_length:>7.1f} "
        f"{stats.min_length:>5d} {stats.max_length:>5d} {stats.stddev_length:>7.1f}"
    )
    return head + "\n" + row


def _config_from_args(args, keys) -> Config:
    overrides = {key: getattr(args, key, None) for key in keys}
    return resolve_config(getattr(args, "config", None), overrides)


def cmd_gen_env(args) -> int:
    spec = FloorplanSpec(
        rooms=args.rooms,
        room_size_range=(args.room_min, args.room_max),
        door_width=args.door_width,
        sealed_door_probability=args.sealed_prob,
        furniture_per_room=args.furniture,
        resolution=args.resolution,
        seed=args.seed,
    )
    grid_scene, graph_scene = generate_scene(spec)
    save_scene(grid_scene, args.out)
    if args.graph_out:
        save_scene(graph_scene, args.graph_out)
    g = grid_scene.grid
    print(
        f"scene {grid_scene.scene_id}: {g.width}x{g.height} cells at {g.resolution} m, "
        f"{len(graph_scene.graph.nodes)} graph nodes"
    )
    return 0


def cmd_gen_episodes(args) -> int:
    scene = load_scene(args.scene)
    spec = EpisodeSpec(
        count=args.count,
        length_range=(args.min_length, args.max_length),
        instructions_per_path=args.n,
        seed=args.seed,
    )
    episodes = generate_episodes(scene, spec)
    save_episodes(episodes, args.out)
    paths = len(unique_paths(episodes))
    print(f"{len(episodes)} episodes over {paths} paths in {scene.scene_id}")
    return 0


def _infer_duplicates(episodes) -> int:
    counts: dict[str, int] = {}
    for ep in episodes:
        counts[ep.path_id] = counts.get(ep.path_id, 0) + 1
    distinct = set(counts.values())
    if len(distinct) != 1:
        from .errors import InstructionCountMismatch

        raise InstructionCountMismatch(
            f"paths carry differing episode counts {sorted(distinct)}; "
            "tour expansion needs a uniform count"
        )
    return distinct.pop()


def cmd_gen_tours(args) -> int:
    cfg = _config_from_args(args, ("seed", "solver"))
    scene = load_scene(args.scene)
    episodes = load_episodes(args.episodes, scene)
    duplicates = _infer_duplicates(episodes)
    tours = build_tours(episodes, scene, duplicates, cfg.seed, solver=cfg.solver)
    save_tours(tours, episodes, args.out)
    print(_stats_block(compute_tour_stats(tours)))
    return 0


def cmd_run(args) -> int:
    cfg = _config_from_args(args, ("seed", "policy", "max_steps", "step_timeout"))
    if args.map is not None:
        cfg.map_mode = args.map
        cfg.validate()
    scene = load_scene(args.scene)
    episodes = load_episodes(args.episodes, scene)
    episodes_by_id = {ep.episode_id: ep for ep in episodes}
    tours = load_tours(args.tours)
    run_cfg = RunConfig(
        max_steps_per_episode=cfg.max_steps,
        oracle_correction_radius=cfg.oracle_correction_radius,
        map_mode=cfg.map_mode,
        forward_step=cfg.forward_step,
        turn_deg=cfg.turn_deg,
        crop_size=cfg.crop_size,
        step_timeout=cfg.step_timeout,
        seed=cfg.seed,
    )
    policy = make_policy(cfg.policy, scene, episodes_by_id, run_cfg)
    traces = []
    occ_map = None
    try:
        for tour in tours:
            trace, occ_map = run_tour(scene, tour, episodes_by_id, policy, run_cfg)
            traces.append(trace)
    except (PolicyTimeout, ProtocolViolation) as exc:
        partial = getattr(exc, "partial_trace", None)
        if partial is not None:
            traces.append(partial)
        write_traces(traces, args.out)
        print(f"error: policy failed: {exc}", file=sys.stderr)
        print(f"flushed {len(traces)} tour trace(s) to {args.out}", file=sys.stderr)
        return 1
    finally:
        policy.close()
    write_traces(traces, args.out)
    if args.map_out:
        if occ_map is None:
            raise UnsupportedScene("no map was built; pass --map episodic|iterative|known")
        save_map(occ_map, args.map_out)
    print(f"{len(traces)} tours -> {args.out}")
    return 0


def _check_complete(tours, traces):
    traced = {t.tour_id: [ep.episode_id for ep in t.episodes] for t in traces}
    gaps = []
    for tour in tours:
        have = traced.get(tour.tour_id, [])
        for eid in tour.episode_ids:
            if eid not in have:
                gaps.append(f"{tour.tour_id}:{eid}")
    if gaps:
        raise MissingEpisode("trace is missing episodes: " + ", ".join(gaps))


def cmd_eval(args) -> int:
    cfg = _config_from_args(args, ("d_th", "success_radius", "geodesic"))
    scene = load_scene(args.scene) if args.scene else None
    episodes_by_id = None
    if args.episodes:
        episodes_by_id = {
            ep.episode_id: ep for ep in load_episodes(args.episodes, scene)
        }
    traces = read_traces(args.traces, episodes_by_id)
    if args.tours:
        _check_complete(load_tours(args.tours), traces)
    if cfg.geodesic and scene is None:
        raise ValueError("--geodesic needs --scene")
    dist = GeodesicMetric(scene) if cfg.geodesic else euclidean
    report = build_report(
        traces,
        scene=scene,
        success_radius=cfg.success_radius,
        d_th=cfg.d_th,
        dist=dist,
        config=cfg.to_dict(),
    )
    report.save_json(args.out)
    if args.csv:
        report.save_csv(args.csv)
    s = report.summary
    print(f"tours {s['tours']}  episodes {s['episodes']}")
    print(f"t-nDTW {s['t_ndtw']:.1f}")
    print(
        f"TL {s['tl']:.2f}  NE {s['ne']:.2f}  OS {s['os']:.4f}  "
        f"SR {s['sr']:.4f}  SPL {s['spl']:.4f}  nDTW {s['ndtw']:.4f}"
    )
    return 0


def cmd_coverage(args) -> int:
    cfg = _config_from_args(args, ("radius",))
    if args.occlusion is not None:
        cfg.occlusion = args.occlusion == "on"
    scene = load_scene(args.scene)
    episodes_by_id = {ep.episode_id: ep for ep in load_episodes(args.episodes, scene)}
    tours = load_tours(args.tours)
    model = ObservationModel(radius=cfg.radius, occlusion=cfg.occlusion)
    curve = coverage_curves(tours, episodes_by_id, scene, model)
    curve.save_csv(args.out)
    if args.json:
        curve.save_json(args.json)
    print(f"{len(curve.records)} indices over {len(curve.per_tour)} tours -> {args.out}")
    return 0


def cmd_stats(args) -> int:
    tours = load_tours(args.tours)
    stats = compute_tour_stats(tours)
    print(_stats_block(stats))
    if args.out:
        payload = {"format_version": FORMAT_VERSION, **dataclasses.asdict(stats)}
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
    return 0


class _Replayer:
    """Re-renders the sensing a live rollout performed, pose by pose."""

    def __init__(self, scene, occ_map, cfg: RunConfig):
        self.grid = scene.grid
        self.occ_map = occ_map
        self.cfg = cfg
        self.intrinsics = CameraIntrinsics.from_hfov(
            cfg.frame_width, cfg.frame_height, cfg.hfov_deg
        )

    def sense(self, point: Point3, heading: float) -> None:
        if self.occ_map.mode == "known":
            return
        cam = Pose(
            Point3(point.x, point.y, self.grid.floor_z + self.cfg.camera_height), heading
        )
        depth, sem = synthesize_views(self.grid, cam, self.intrinsics, self.cfg.max_range)
        points, labels = unproject(depth, sem)
        integrate(self.occ_map, points, labels, self.grid.floor_z, self.grid.ceiling_z)


def _replay_phase(replayer, points, actions, heading, turn, start_sensed):
    """Walk one phase's logged positions, evolving the heading from actions."""
    pi = 1 if start_sensed else 0
    for action in actions:
        if action == "stop":
            break
        if action == "left":
            heading = normalize_heading(heading + turn)
        elif action == "right":
            heading = normalize_heading(heading - turn)
        if pi < len(points):
            replayer.sense(points[pi], heading)
            pi += 1
    return heading


def cmd_build_map(args) -> int:
    scene = load_scene(args.scene)
    if scene.grid is None:
        raise UnsupportedScene("build-map needs a grid scene")
    episodes_by_id = {ep.episode_id: ep for ep in load_episodes(args.episodes, scene)}
    traces = read_traces(args.traces, episodes_by_id)
    if not traces:
        raise MissingEpisode(f"no tour traces in {args.traces}")
    run_cfg = RunConfig(map_mode=args.mode)
    turn = math.radians(run_cfg.turn_deg)
    occ_map = None
    for trace in traces:
        if args.mode == "known":
            occ_map = known_map(scene.grid)
        else:
            occ_map = SemanticOccMap.for_grid(scene.grid, args.mode)
        reset_policy(occ_map, TOUR_START)
        replayer = _Replayer(scene, occ_map, run_cfg)
        segments: dict[str, list] = {}
        for seg in trace.oracle_segments:
            segments.setdefault(seg.episode_id, []).append(seg)
        for ep_trace in trace.episodes:
            episode = episodes_by_id.get(ep_trace.episode_id)
            if episode is None:
                raise MissingEpisode(f"trace episode {ep_trace.episode_id} not in episode set")
            reset_policy(occ_map, EPISODE_START)
            heading = episode.start_heading
            replayer.sense(ep_trace.agent_path[0], heading)
            heading = _replay_phase(
                replayer, ep_trace.agent_path, ep_trace.actions, heading, turn, True
            )
            for seg in segments.get(ep_trace.episode_id, []):
                heading = _replay_phase(replayer, seg.points, seg.actions, heading, turn, False)
    save_map(occ_map, args.out)
    print(f"map snapshot ({args.mode}) -> {args.out}")
    return 0


def _add_config_flag(sub):
    sub.add_argument("--config", help="key=value config file (default: $IVLN_CONFIG)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivln", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-env", help="generate a synthetic scene")
    p.add_argument("--rooms", type=int, default=4)
    p.add_argument("--room-min", type=float, default=3.0)
    p.add_argument("--room-max", type=float, default=5.0)
    p.add_argument("--door-width", type=float, default=0.75)
    p.add_argument("--sealed-prob", type=float, default=0.0)
    p.add_argument("--furniture", type=int, default=2)
    p.add_argument("--resolution", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--graph-out", help="also write the navigation-graph twin")
    p.set_defaults(func=cmd_gen_env)

    p = subs.add_parser("gen-episodes", help="sample episodes in a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--n", type=int, default=1, help="instructions per path")
    p.add_argument("--min-length", type=float, default=5.0)
    p.add_argument("--max-length", type=float, default=15.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_episodes)

    p = subs.add_parser("gen-tours", help="partition, order, and expand into tours")
    p.add_argument("--episodes", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--solver", choices=["nn", "nn+3opt", "exact"])
    p.add_argument("--seed", type=int)
    _add_config_flag(p)
    p.set_defaults(func=cmd_gen_tours)

    p = subs.add_parser("run", help="execute a policy over tours")
    p.add_argument("--scene", required=True)
    p.add_argument("--tours", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--policy", help="oracle | noisy:<p> | random | stop | ext:<cmd> | tcp:<host>:<port>")
    p.add_argument("--map", choices=["none", "episodic", "iterative", "known"])
    p.add_argument("--map-out", help="write the final tour's map snapshot")
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--step-timeout", type=float, dest="step_timeout")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_config_flag(p)
    p.set_defaults(func=cmd_run)

    p = subs.add_parser("eval", help="score a trace file")
    p.add_argument("--traces", required=True)
    p.add_argument("--tours")
    p.add_argument("--episodes")
    p.add_argument("--scene")
    p.add_argument("--d-th", type=float, dest="d_th")
    p.add_argument("--success-radius", type=float, dest="success_radius")
    p.add_argument("--geodesic", action="store_const", const=True, default=None,
                   help="geodesic point metric for the alignment score")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also write per-episode rows")
    _add_config_flag(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("coverage", help="oracle-observation coverage curves")
    p.add_argument("--tours", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--radius", type=float)
    p.add_argument("--occlusion", choices=["on", "off"])
    p.add_argument("--out", required=True)
    p.add_argument("--json", help="also write per-tour detail")
    _add_config_flag(p)
    p.set_defaults(func=cmd_coverage)

    p = subs.add_parser("stats", help="tour corpus statistics")
    p.add_argument("--tours", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = subs.add_parser("build-map", help="replay a trace into a map snapshot")
    p.add_argument("--scene", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--mode", choices=["episodic", "iterative", "known"], default="iterative")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_map)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _PARSE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IvlnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
