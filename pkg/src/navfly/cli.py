"""navfly command-line entry point.

Exit codes: 0 success, 1 domain error (one ``error[Kind]: message`` line on
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import signal
import sys
import threading
from pathlib import Path

import numpy as np

log = logging.getLogger("navfly")


def _clean(x):
    """JSON-safe copy: non-finite floats become null."""
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


def write_json(obj, path) -> None:
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _config(args):
    from .config import RunConfig

    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def _jobs(args) -> int:
    return max(1, args.jobs if args.jobs else (os.cpu_count() or 1))


def scene_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence((seed, i)).generate_state(1)[0])


def load_scenes(path) -> list:
    from .world import Scene

    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.json"))
        if not files:
            raise FileNotFoundError(f"no scene files in {p}")
    else:
        files = [p]
    return [Scene.from_json(f.read_text()) for f in files]


def _policy_spec(args) -> str:
    spec = args.policy
    if spec == "sac":
        if not args.checkpoint:
            raise ValueError("--policy sac needs --checkpoint PATH")
        spec = f"sac:{args.checkpoint}"
    return spec


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_scenes(args) -> int:
    from dataclasses import replace

    from .world import SceneParams, generate_scene

    cfg = _config(args)
    params = SceneParams.easy() if args.easy else cfg.scene
    if args.max_obstacles is not None:
        lo = min(params.n_obstacles[0], args.max_obstacles)
        params = replace(params, n_obstacles=(lo, args.max_obstacles))
    if args.unseen > args.count:
        raise ValueError("--unseen cannot exceed --count")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i in range(args.count):
        seen = i < args.count - args.unseen
        sid = f"scene-{args.seed}-{i:04d}"
        sc = generate_scene(scene_seed(args.seed, i), params, sid, seen=seen)
        (out / f"{sid}.json").write_text(sc.to_json())
        index.append({"id": sid, "seen": seen, "obstacles": len(sc.obstacles), "targets": len(sc.targets)})
    write_json({"schema": 1, "seed": args.seed, "params": params.to_dict(), "scenes": index}, args.report)
    return 0


def cmd_train_agent(args) -> int:
    from .sac import save_checkpoint, train_agent

    cfg = _config(args)
    ts = cfg.sac
    scenes = load_scenes(args.scene)
    if len(scenes) != 1:
        raise ValueError("train-agent trains one per-scene agent; pass a single scene file")
    scene = scenes[0]
    res = train_agent(scene, args.steps, ts.sac, args.seed, ts.reward, cfg.eval.limits,
                      eval_every=ts.eval_every, eval_episodes=ts.eval_episodes,
                      target_success=ts.target_success)
    out = Path(args.out)
    if out.is_dir() or str(args.out).endswith("/"):
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{scene.id}.saca"
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"scene_id": scene.id, "seed": args.seed, "steps": res.steps, "reward": ts.reward.to_dict()}
    save_checkpoint(res.agent, out, meta)
    evals = [h for h in res.history if "eval_success" in h]
    write_json({"schema": 1, "scene_id": scene.id, "checkpoint": str(out), "steps": res.steps,
                "episodes": res.episodes, "eval_success": res.eval_success, "evaluations": evals,
                "reward": ts.reward.to_dict(), "sac": ts.sac.to_dict()}, args.report)
    return 0


def cmd_collect(args) -> int:
    from .dataset import collect_many, dataset_stats, write_dataset

    cfg = _config(args)
    spec = _policy_spec(args)
    scenes = [s for p in args.scene for s in load_scenes(p)]
    episodes = args.episodes if args.episodes is not None else cfg.dataset.episodes
    recs = collect_many(scenes, spec, episodes, args.seed, cfg.eval.limits, _jobs(args))
    write_dataset(recs, args.out)
    stats = dataset_stats(recs)
    stats.update({"policy": spec, "seed": args.seed})
    write_json(stats, args.report)
    return 0


def cmd_stats(args) -> int:
    from .dataset import dataset_stats, read_dataset

    write_json(dataset_stats(read_dataset(args.data)), args.out)
    return 0


def cmd_rebalance(args) -> int:
    from .dataset import read_dataset, write_dataset
    from .rebalance import importance_check, make_plan, phase_pools, segment_length, slice_records, \
        stratified_resample

    cfg = _config(args)
    alpha = args.alpha if args.alpha is not None else cfg.rebalance.alpha
    if isinstance(alpha, list) and len(alpha) == 1:
        alpha = alpha[0]
    recs = read_dataset(args.data)
    plan = make_plan(recs, alpha, drop_absent=True)
    pools = phase_pools(recs)
    rng = np.random.default_rng(args.seed)
    rb = stratified_resample(pools, plan, rng)
    ic = importance_check(pools, rb, segment_length, n_boot=cfg.rebalance.bootstrap,
                          rng=np.random.default_rng((args.seed, 1)))
    out_recs = slice_records(recs, rb)
    write_dataset(out_recs, args.out)
    report = plan.to_dict()
    report.update({
        "schema": 1,
        "seed": args.seed,
        "KL_discrepancy_flag": True,
        "resampled_distribution": list(rb.phase_distribution().p),
        "resampled_counts": [len(rb.pools[k]) for k in sorted(rb.pools)],
        "importance_check": {**ic.to_dict(), "statistic": "segment_length"},
        "provenance": [{"traj_id": s.traj_id, "phase": int(s.phase), "start": s.start, "end": s.end}
                       for s in rb.samples()],
    })
    write_json(report, args.report)
    return 0


def cmd_eval(args) -> int:
    from dataclasses import replace

    from .eval import SplitConfig, report_csv, run_split_evaluation

    cfg = _config(args)
    scenes = load_scenes(args.scenes)
    seen = [s for s in scenes if s.seen]
    unseen = [s for s in scenes if not s.seen]
    if not unseen and args.allow_shared_pool:
        unseen = seen
    if not seen and args.allow_shared_pool:
        seen = unseen
    limits = cfg.eval.limits
    if args.max_steps is not None:
        limits = replace(limits, max_steps=args.max_steps)
    sc = SplitConfig(seen, unseen, _policy_spec(args),
                     args.trials if args.trials is not None else cfg.eval.trials,
                     args.seed, limits, cfg.eval.thresholds, _jobs(args))
    report = run_split_evaluation(sc)
    write_json(report, args.report)
    if args.csv:
        Path(args.csv).write_text(report_csv(report))
    return 0


def cmd_serve(args) -> int:
    from .netdeploy.pipeline import PipelineConfig
    from .netdeploy.server import serve
    from .policy import load_policy

    cfg = _config(args)
    p = cfg.net.pipeline
    pc = PipelineConfig(args.vision_ms if args.vision_ms is not None else p.vision_latency_ms,
                        args.llm_ms if args.llm_ms is not None else p.llm_latency_ms,
                        args.ipc_ms if args.ipc_ms is not None else p.ipc_overhead_ms)
    spec = _policy_spec(args)
    load_policy(spec)  # fail fast on a bad spec
    srv = serve(args.bind, lambda: load_policy(spec), pc)
    print(f"listening on {srv.address}", flush=True)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait(args.duration)
    srv.shutdown(drain=True)
    return 0


def cmd_fly(args) -> int:
    from .netdeploy.client import FlightLog, fly_client

    cfg = _config(args)
    scenes = load_scenes(args.scene)
    if len(scenes) != 1:
        raise ValueError("fly needs a single scene file")
    scene = scenes[0]
    goal = scene.target(args.goal) if args.goal is not None else scene.goal
    flog = FlightLog()
    outcome = fly_client(args.server, scene, goal, args.instruction, cfg.eval.limits, args.seed,
                         timeout_s=cfg.net.downlink_timeout_ms / 1000.0, log_to=flog)
    write_json({"schema": 1, "scene_id": scene.id, "goal_id": goal.id, "outcome": outcome.to_dict(),
                "timeouts": flog.timeouts, "stale_replies": flog.stale, "transport_error": flog.error,
                "mean_server_latency_us": (float(np.mean(flog.server_latency_us))
                                           if flog.server_latency_us else None)}, args.report)
    return 0 if flog.error is None else 1


def cmd_bench_pipeline(args) -> int:
    from .netdeploy.pipeline import PipelineConfig, bench_pipeline

    cfg = _config(args)
    p = cfg.net.pipeline
    pc = PipelineConfig(args.vision_ms if args.vision_ms is not None else p.vision_latency_ms,
                        args.llm_ms if args.llm_ms is not None else p.llm_latency_ms,
                        args.ipc_ms if args.ipc_ms is not None else p.ipc_overhead_ms)
    modes = ("sequential", "pipelined") if args.mode == "both" else (args.mode,)
    runs = {m: bench_pipeline(pc, args.frames, m).to_dict() for m in modes}
    write_json({"schema": 1, "frames": args.frames, "runs": runs}, args.report)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="navfly", description="UAV navigation data pipeline and deployment tools")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="RunConfig JSON file")
        return p

    p = add("gen-scenes", cmd_gen_scenes, "generate procedural scenes")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--unseen", type=int, default=0, help="flag the last K scenes as held-out")
    p.add_argument("--easy", action="store_true", help="2-4 obstacles per scene")
    p.add_argument("--max-obstacles", type=int)
    p.add_argument("--report", help="write the scene index JSON here (default stdout)")

    p = add("train-agent", cmd_train_agent, "train a per-scene SAC collection agent")
    p.add_argument("--scene", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="checkpoint file, or a directory for <scene id>.saca")
    p.add_argument("--report")

    for name, fn, help_ in (("collect", cmd_collect, "collect trajectories into a dataset"),):
        p = add(name, fn, help_)
        p.add_argument("--scene", action="append", required=True, help="scene file or directory (repeatable)")
        p.add_argument("--policy", required=True, help="expert | sac:PATH | sac (with --checkpoint)")
        p.add_argument("--checkpoint")
        p.add_argument("--episodes", type=int)
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--jobs", type=int)
        p.add_argument("--report")

    p = add("stats", cmd_stats, "dataset statistics report")
    p.add_argument("--data", required=True)
    p.add_argument("--out")

    p = add("rebalance", cmd_rebalance, "phase-rebalance a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, nargs="+")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)

    p = add("eval", cmd_eval, "seen/unseen split evaluation")
    p.add_argument("--scenes", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--report")
    p.add_argument("--csv")
    p.add_argument("--jobs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--allow-shared-pool", action="store_true",
                   help="reuse one scene pool for both scene conditions when the other is empty")

    p = add("serve", cmd_serve, "serve a policy over the binary protocol")
    p.add_argument("--bind", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--vision-ms", type=float)
    p.add_argument("--llm-ms", type=float)
    p.add_argument("--ipc-ms", type=float)
    p.add_argument("--duration", type=float, help="stop after this many seconds (default: until signalled)")

    p = add("fly", cmd_fly, "fly one episode against a policy server")
    p.add_argument("--server", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--goal", type=int, help="target id (default: the scene's goal)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--instruction")
    p.add_argument("--report")

    p = add("bench-pipeline", cmd_bench_pipeline, "benchmark the two-stage pipeline with simulated stages")
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--vision-ms", type=float)
    p.add_argument("--llm-ms", type=float)
    p.add_argument("--ipc-ms", type=float)
    p.add_argument("--mode", choices=("pipelined", "sequential", "both"), default="both")
    p.add_argument("--report")
    return ap


def _setup_logging() -> None:
    level = os.environ.get("NAVFLY_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    from .dataset import DatasetError
    from .netdeploy.protocol import ProtocolError

    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 1
    except (ValueError, RuntimeError, OSError, KeyError, DatasetError, ProtocolError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else repr(exc)
        print(f"error[{type(exc).__name__}]: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
