"""Command-line driver: generate sequences, run estimator methods, build reports.

Exit codes: 0 ok, 1 configuration error, 2 I/O error, 3 internal error.
Errors are also printed to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import multiprocessing
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .depth_prior import GateConfig
from .estimator import EstimatorConfig, run_sequence
from .evaluation import (RunResult, Trajectory, ate_rmse, divergence_check, read_tum, summarize,
                         write_report, write_tum, DIVERGENCE_ATE, TooFewMatches, TrajectoryFormatError)
from .factor_graph import SolverConfig
from .geometry import DegenerateConfiguration
from .simulator import (NOISE_PRESETS, SCENE_PRESETS, InvalidConfig, generate_sequence, load_sequence,
                        save_sequence)

log = logging.getLogger("mdevio")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, field_name: Optional[str] = None):
        super().__init__(message)
        self.line = line
        self.field = field_name


# --------------------------------------------------------------------------
# Methods

@dataclass(frozen=True)
class MethodSpec:
    name: str
    depth_residuals: bool = False
    ordinal: bool = False
    mdi: bool = False
    # "off", "inverse" or "metric"
    dift: str = "off"
    gating: bool = True
    depth_weight: Optional[float] = None
    ordinal_weight: Optional[float] = None


METHODS = {
    "baseline": MethodSpec("baseline"),
    "mdi": MethodSpec("mdi", mdi=True),
    "depth": MethodSpec("depth", depth_residuals=True),
    "depth+mdi": MethodSpec("depth+mdi", depth_residuals=True, mdi=True),
    "orc": MethodSpec("orc", ordinal=True),
    "depth+orc+mdi": MethodSpec("depth+orc+mdi", depth_residuals=True, ordinal=True, mdi=True),
}

ABLATION_METHODS = list(METHODS)


@dataclass(frozen=True)
class SequenceSpec:
    name: str
    scene: str
    noise: str
    frames: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    sequences: tuple
    methods: tuple
    seeds: tuple
    depth_weight: float = 300.0
    ordinal_weight: float = 10.0
    gate: GateConfig = GateConfig()
    baseline: str = "baseline"
    output: str = "results"


# --------------------------------------------------------------------------
# Config parsing

_TOP_KEYS = {"name", "scene", "noise", "frames", "sequences", "methods", "seeds", "weights", "gate",
             "baseline", "output"}
_SEQ_KEYS = {"name", "scene", "noise", "frames"}
_METHOD_KEYS = {"name", "depth_residuals", "ordinal", "mdi", "dift", "gating", "weights"}
_WEIGHT_KEYS = {"depth", "ordinal"}
_GATE_KEYS = {"enabled", "gamma", "sigma2_thresh", "window"}


def _line(node) -> int:
    return node.start_mark.line + 1


def _check_keys(node, allowed, where):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{where or 'config'} must be a mapping", _line(node), where)
    for k, _ in node.value:
        if k.value not in allowed:
            raise ConfigError(f"unknown field {k.value!r} in {where or 'config'}", _line(k),
                              f"{where}.{k.value}" if where else k.value)


def _value_lines(node) -> dict:
    return {k.value: _line(v) for k, v in node.value}


def _typed(data, key, kind, where, lines, default=None):
    if key not in data:
        return default
    v = data[key]
    ok = isinstance(v, kind) and not (kind in (int, float, (int, float)) and isinstance(v, bool))
    if not ok:
        raise ConfigError(f"field {key!r} in {where or 'config'} has the wrong type", lines.get(key),
                          f"{where}.{key}" if where else key)
    return v


def parse_experiment(text: str) -> ExperimentConfig:
    """Parse and validate an experiment description (YAML)."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {exc}", mark.line + 1 if mark else None) from None
    if root is None:
        raise ConfigError("empty configuration")
    _check_keys(root, _TOP_KEYS, "")
    lines = _value_lines(root)
    nodes = {k.value: v for k, v in root.value}

    num = (int, float)
    seqs = []
    if "sequences" in data:
        if "scene" in data or "noise" in data:
            raise ConfigError("give either 'sequences' or 'scene'/'noise', not both", lines.get("sequences"),
                              "sequences")
        node = nodes["sequences"]
        if not isinstance(node, yaml.SequenceNode) or not node.value:
            raise ConfigError("'sequences' must be a non-empty list", _line(node), "sequences")
        for i, (sn, sd) in enumerate(zip(node.value, data["sequences"])):
            where = f"sequences[{i}]"
            _check_keys(sn, _SEQ_KEYS, where)
            sl = _value_lines(sn)
            scene = _typed(sd, "scene", str, where, sl, "room")
            noise = _typed(sd, "noise", str, where, sl, "video-like")
            frames = _typed(sd, "frames", int, where, sl, _typed(data, "frames", int, "", lines, 100))
            name = _typed(sd, "name", str, where, sl, f"{scene}/{noise}")
            seqs.append((SequenceSpec(name, scene, noise, frames), sl, where))
    else:
        scene = _typed(data, "scene", str, "", lines, "room")
        noise = _typed(data, "noise", str, "", lines, "video-like")
        frames = _typed(data, "frames", int, "", lines, 100)
        name = _typed(data, "name", str, "", lines, f"{scene}/{noise}")
        seqs.append((SequenceSpec(name, scene, noise, frames), lines, ""))
    for spec, sl, where in seqs:
        pre = f"{where}." if where else ""
        if spec.scene not in SCENE_PRESETS:
            raise ConfigError(f"unknown scene preset {spec.scene!r}", sl.get("scene"), pre + "scene")
        if spec.noise not in NOISE_PRESETS:
            raise ConfigError(f"unknown noise preset {spec.noise!r}", sl.get("noise"), pre + "noise")
        if spec.frames < 3:
            raise ConfigError("frames must be at least 3", sl.get("frames"), pre + "frames")
    if len({s.name for s, _, _ in seqs}) != len(seqs):
        raise ConfigError("sequence names must be unique", lines.get("sequences"), "sequences")

    seeds = data.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)):
        raise ConfigError("'seeds' must be a non-empty list of non-negative integers", lines.get("seeds"), "seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("'seeds' must not repeat", lines.get("seeds"), "seeds")

    weights = {}
    if "weights" in data:
        _check_keys(nodes["weights"], _WEIGHT_KEYS, "weights")
        wl = _value_lines(nodes["weights"])
        for k in _WEIGHT_KEYS:
            v = _typed(data["weights"], k, num, "weights", wl)
            if v is not None:
                if v < 0:
                    raise ConfigError(f"weight {k!r} must be non-negative", wl.get(k), f"weights.{k}")
                weights[k] = float(v)

    gate = GateConfig()
    if "gate" in data:
        _check_keys(nodes["gate"], _GATE_KEYS, "gate")
        gl = _value_lines(nodes["gate"])
        kw = {}
        for k, kind in (("enabled", bool), ("gamma", num), ("sigma2_thresh", num), ("window", int)):
            v = _typed(data["gate"], k, kind, "gate", gl)
            if v is not None:
                kw[k] = v
        try:
            gate = GateConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc), _line(nodes["gate"]), "gate") from None

    methods = []
    if "methods" not in data:
        methods = [METHODS[m] for m in ABLATION_METHODS]
    else:
        node = nodes["methods"]
        if not isinstance(node, yaml.SequenceNode) or not node.value:
            raise ConfigError("'methods' must be a non-empty list", _line(node), "methods")
        for i, (mn, md) in enumerate(zip(node.value, data["methods"])):
            where = f"methods[{i}]"
            if isinstance(md, str):
                if md not in METHODS:
                    raise ConfigError(f"unknown method {md!r}", _line(mn), where)
                methods.append(METHODS[md])
                continue
            _check_keys(mn, _METHOD_KEYS, where)
            ml = _value_lines(mn)
            name = _typed(md, "name", str, where, ml)
            if name is None:
                raise ConfigError("method needs a 'name'", _line(mn), where + ".name")
            base = METHODS.get(name, MethodSpec(name))
            kw = {}
            for k in ("depth_residuals", "ordinal", "mdi", "gating"):
                v = _typed(md, k, bool, where, ml)
                if v is not None:
                    kw[k] = v
            # YAML reads a bare "off" as false
            if md.get("dift") is False:
                md["dift"] = "off"
            dift = _typed(md, "dift", str, where, ml)
            if dift is not None:
                if dift not in ("off", "inverse", "metric"):
                    raise ConfigError("dift must be one of off, inverse, metric", ml.get("dift"), where + ".dift")
                kw["dift"] = dift
            if "weights" in md:
                wn = dict((k.value, v) for k, v in mn.value)["weights"]
                _check_keys(wn, _WEIGHT_KEYS, where + ".weights")
                wl = _value_lines(wn)
                for k in _WEIGHT_KEYS:
                    v = _typed(md["weights"], k, num, where + ".weights", wl)
                    if v is not None:
                        if v < 0:
                            raise ConfigError(f"weight {k!r} must be non-negative", wl.get(k),
                                              f"{where}.weights.{k}")
                        kw[f"{k}_weight"] = float(v)
            methods.append(replace(base, **kw))
    if len({m.name for m in methods}) != len(methods):
        raise ConfigError("method names must be unique", lines.get("methods"), "methods")
    method_lines = [_line(n) for n in nodes["methods"].value] if "methods" in data else []
    for i, m in enumerate(methods):
        if m.dift != "off":
            for spec, sl, where in seqs:
                if not SCENE_PRESETS[spec.scene].render_images:
                    raise ConfigError(f"method {m.name!r} uses DIFT but scene {spec.scene!r} renders no images",
                                      method_lines[i] if method_lines else None, f"methods[{i}].dift")

    baseline = _typed(data, "baseline", str, "", lines, "baseline")
    output = _typed(data, "output", str, "", lines, "results")
    return ExperimentConfig(tuple(s for s, _, _ in seqs), tuple(methods), tuple(seeds),
                            weights.get("depth", 300.0), weights.get("ordinal", 10.0), gate, baseline, output)


def load_experiment(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IOError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_experiment(text)


# --------------------------------------------------------------------------
# Runs

def estimator_config(method: MethodSpec, depth_weight: float = 300.0, ordinal_weight: float = 10.0,
                     gate: GateConfig = GateConfig()) -> EstimatorConfig:
    solver = SolverConfig.synthetic_urban(
        depth_weight=method.depth_weight if method.depth_weight is not None else depth_weight,
        ordinal_weight=method.ordinal_weight if method.ordinal_weight is not None else ordinal_weight)
    return EstimatorConfig(depth_residuals=method.depth_residuals, ordinal=method.ordinal, mdi=method.mdi,
                           solver=solver, gate=replace(gate, enabled=gate.enabled and method.gating))


def build_sequence(spec: SequenceSpec, seed: int, dift: str = "off"):
    scene = replace(SCENE_PRESETS[spec.scene], seed=seed)
    noise = NOISE_PRESETS[spec.noise]
    if dift != "off":
        scene = replace(scene, tracking_image="dift")
        noise = replace(noise, mode="metric" if dift == "metric" else "affine_inverse")
    return generate_sequence(scene, noise, n_frames=spec.frames)


def evaluate_run(seq, poses, run_log, label: str, seed: int, sequence: str = "") -> tuple:
    traj = Trajectory.from_poses(seq.timestamps(), poses)
    gt = Trajectory.from_poses(seq.timestamps(), [f.true_pose for f in seq.frames])
    diverged = divergence_check(traj, gt, DIVERGENCE_ATE)
    try:
        ate = ate_rmse(traj, gt)
    except (TooFewMatches, DegenerateConfiguration):
        ate, diverged = math.inf, True
    delays = run_log.activation_delays
    res = RunResult(label=label, seed=seed, ate_rmse=ate, diverged=diverged, sequence=sequence,
                    frame_costs=run_log.frame_costs, ordinal_violations=run_log.ordinal_violations,
                    ordinal_pairs=run_log.ordinal_pairs,
                    mean_activation_delay=float(np.mean(delays)) if delays else math.nan,
                    median_solve_ms=float(np.median(run_log.solve_times) * 1e3) if run_log.solve_times else math.nan,
                    solver_failures=run_log.solver_failures)
    return res, traj


def _run_task(task):
    """One simulated sequence, every method that shares it."""
    spec, dift, seed, methods, depth_weight, ordinal_weight, gate = task
    t0 = time.perf_counter()
    seq = build_sequence(spec, seed, dift)
    out = []
    for method in methods:
        t1 = time.perf_counter()
        poses, run_log = run_sequence(seq, estimator_config(method, depth_weight, ordinal_weight, gate))
        res, traj = evaluate_run(seq, poses, run_log, method.name, seed, spec.name)
        out.append((res, traj, time.perf_counter() - t1))
    log.debug("sequence %s seed %d simulated and solved in %.1f s", spec.name, seed, time.perf_counter() - t0)
    return out


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> list:
    """Run every (sequence, method, seed), write trajectories and reports.

    Output files depend only on ``cfg``; ``jobs`` changes wall-clock time
    but not a single byte.
    """
    out = Path(out_dir or cfg.output)
    tasks = []
    for spec in cfg.sequences:
        for dift in dict.fromkeys(m.dift for m in cfg.methods):
            methods = tuple(m for m in cfg.methods if m.dift == dift)
            tasks += [(spec, dift, seed, methods, cfg.depth_weight, cfg.ordinal_weight, cfg.gate)
                      for seed in cfg.seeds]
    done = {}
    total = sum(len(t[3]) for t in tasks)

    def collect(task, runs):
        for m, run in zip(task[3], runs):
            done[(task[0].name, m.name, task[2])] = run
        log.info("finished %s seed %d (%d/%d)", task[0].name, task[2], len(done), total)

    if jobs > 1 and len(tasks) > 1:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(min(jobs, len(tasks))) as pool:
            for task, runs in zip(tasks, pool.imap(_run_task, tasks, chunksize=1)):
                collect(task, runs)
    else:
        for task in tasks:
            collect(task, _run_task(task))

    results = []
    for spec in cfg.sequences:
        for m in cfg.methods:
            for seed in cfg.seeds:
                res, traj, secs = done[(spec.name, m.name, seed)]
                log.info("run %s / %s / seed %d: ATE %.4f m%s, %.1f s, solve median %.1f ms", spec.name, m.name,
                         seed, res.ate_rmse, " (diverged)" if res.diverged else "", secs, res.median_solve_ms)
                path = out / "trajectories" / _safe(spec.name) / _safe(m.name) / f"seed_{seed:03d}.tum"
                path.parent.mkdir(parents=True, exist_ok=True)
                write_tum(path, traj)
                results.append(res)
    _write_runs(out / "runs.csv", results)
    write_report(results, out, cfg.baseline, [m.name for m in cfg.methods])
    return results


def _write_runs(path, results) -> None:
    lines = ["sequence,method,seed,ate_rmse,diverged,ordinal_violations,ordinal_pairs,"
             "mean_activation_delay,solver_failures"]
    for r in results:
        lines.append(",".join([r.sequence, r.label, str(r.seed), f"{r.ate_rmse:.9f}", str(int(r.diverged)),
                               str(r.ordinal_violations), str(r.ordinal_pairs),
                               f"{r.mean_activation_delay:.6f}", str(r.solver_failures)]))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# Subcommands

def _cmd_generate(args) -> int:
    spec = SequenceSpec(f"{args.scene}/{args.preset}", args.scene, args.preset, args.frames)
    seq = build_sequence(spec, args.seed, args.dift)
    save_sequence(seq, args.out)
    log.info("wrote %d frames to %s", len(seq), args.out)
    return EXIT_OK


def _cmd_run(args) -> int:
    if args.method not in METHODS:
        raise ConfigError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}", None, "method")
    method = METHODS[args.method]
    if args.sequence:
        try:
            seq = load_sequence(args.sequence)
        except (OSError, KeyError, ValueError) as exc:
            raise IOError(f"cannot load sequence {args.sequence}: {exc}") from None
    else:
        seq = build_sequence(SequenceSpec(f"{args.scene}/{args.preset}", args.scene, args.preset, args.frames),
                             args.seed, method.dift)
    cfg = estimator_config(method, args.depth_weight, args.ordinal_weight)
    t0 = time.perf_counter()
    poses, run_log = run_sequence(seq, cfg)
    res, traj = evaluate_run(seq, poses, run_log, method.name, seq.scene.seed)
    log.info("%d frames in %.1f s, window solve median %.1f ms", len(seq), time.perf_counter() - t0,
             res.median_solve_ms)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "trajectory.tum", traj)
    summary = {"method": method.name, "seed": res.seed, "ate_rmse": res.ate_rmse, "diverged": res.diverged,
               "ordinal_violations": res.ordinal_violations, "ordinal_pairs": res.ordinal_pairs,
               "mean_activation_delay": res.mean_activation_delay, "solver_failures": res.solver_failures}
    (out / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    try:
        est = read_tum(args.est)
        gt = read_tum(args.gt)
    except (OSError, TrajectoryFormatError) as exc:
        raise IOError(f"cannot read trajectory: {exc}") from None
    diverged = divergence_check(est, gt, args.threshold)
    try:
        ate = ate_rmse(est, gt)
    except (TooFewMatches, DegenerateConfiguration):
        ate = math.inf
    print(json.dumps({"ate_rmse": ate if math.isfinite(ate) else None, "diverged": diverged}, sort_keys=True))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    if args.config:
        cfg = load_experiment(args.config)
    else:
        if args.seeds < 1 or args.frames < 3:
            raise ConfigError("need at least one seed and three frames", None, "seeds" if args.seeds < 1 else "frames")
        seeds = tuple(range(args.seeds)) if args.seed is None else (args.seed,)
        cfg = ExperimentConfig((SequenceSpec(f"{args.scene}/{args.preset}", args.scene, args.preset, args.frames),),
                               tuple(METHODS[m] for m in ABLATION_METHODS), seeds)
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1", None, "jobs")
    t0 = time.perf_counter()
    results = run_experiment(cfg, args.out, args.jobs)
    rows = summarize(results, cfg.baseline, [m.name for m in cfg.methods])
    for r in rows:
        log.info("%-16s %-22s median ATE %.4f  improvement %+.1f%%", r["sequence"], r["method"],
                 r["median_ate"], r["improvement_pct"])
    log.info("ablation finished in %.1f s", time.perf_counter() - t0)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Bad command lines are configuration errors (exit 1), not argparse's 2."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mdevio", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic sequence to disk")
    g.add_argument("--scene", default="room", choices=sorted(SCENE_PRESETS))
    g.add_argument("--preset", default="video-like", choices=sorted(NOISE_PRESETS), help="noise preset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=100)
    g.add_argument("--dift", default="off", choices=["off", "inverse", "metric"])
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_generate)

    r = sub.add_parser("run", help="run one method on one sequence")
    r.add_argument("--method", default="baseline")
    r.add_argument("--sequence", help="sequence directory written by 'generate'")
    r.add_argument("--scene", default="room", choices=sorted(SCENE_PRESETS))
    r.add_argument("--preset", default="video-like", choices=sorted(NOISE_PRESETS), help="noise preset")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--frames", type=int, default=100)
    r.add_argument("--depth-weight", type=float, default=300.0)
    r.add_argument("--ordinal-weight", type=float, default=10.0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("evaluate", help="ATE of a TUM trajectory against ground truth")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--threshold", type=float, default=DIVERGENCE_ATE)
    e.set_defaults(func=_cmd_evaluate)

    a = sub.add_parser("ablate", help="run an experiment and write report.csv / report.md")
    a.add_argument("--config", help="experiment YAML; without it the six-method ablation is run")
    a.add_argument("--preset", default="video-like", choices=sorted(NOISE_PRESETS), help="noise preset")
    a.add_argument("--scene", default="room", choices=sorted(SCENE_PRESETS))
    a.add_argument("--seeds", type=int, default=10, help="number of seeds 0..N-1")
    a.add_argument("--seed", type=int, help="single seed")
    a.add_argument("--frames", type=int, default=100)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(func=_cmd_ablate)
    return p


def _fail(code: int, kind: str, message: str, **extra) -> int:
    payload = {"error": kind, "message": message}
    payload.update({k: v for k, v in extra.items() if v is not None})
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_CONFIG, "ConfigParse", str(exc))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "ablate" and args.out is None and args.config is None:
        args.out = "results"
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "ConfigParse", str(exc), line=exc.line, field=exc.field)
    except InvalidConfig as exc:
        return _fail(EXIT_CONFIG, "ConfigParse", str(exc))
    except (OSError, UnicodeDecodeError) as exc:
        return _fail(EXIT_IO, "IoError", str(exc))
    except Exception as exc:  # noqa: BLE001 - reported as an internal error
        log.debug("internal error", exc_info=True)
        return _fail(EXIT_INTERNAL, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
