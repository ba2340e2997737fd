"""Command-line runner: ``smtnav train | eval | ablate | export-trajectories``.

Every command writes only under ``--out``; outputs are a pure function of the
config and seeds.  Wall-clock information goes to ``run.log``, which is left
out of ``manifest.json`` so reruns produce byte-identical manifests.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ParamStore
from .config import ABLATION_SUITES, ExperimentConfig, load_config
from .env import NavEnv
from .errors import CheckpointError, ConfigurationError, SMTError
from .policy import MEMORY_KINDS, PolicyNetwork
from .tasks import TASKS, coverage_cell, detected_classes, metrics
from .training import (
    TrainConfig,
    evaluate,
    pretrain_embeddings,
    random_policy,
    split_plans,
    train,
)

log = logging.getLogger("smtnav")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

TABLE_FIELDS = ("reward", "distance", "collisions", "covered_cells", "found_classes", "ratio")

TRAJECTORY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "smtnav trajectory",
    "type": "object",
    "required": ["format", "task", "policy", "plan_seed", "env_seed", "policy_seed", "floorplan",
                 "start", "actions", "collided", "rewards", "poses", "covered_cells",
                 "found_events", "metrics"],
    "properties": {
        "format": {"const": "smtnav-trajectory/1"},
        "task": {"enum": list(TASKS)},
        "policy": {"type": "string"},
        "plan_seed": {"type": "integer"},
        "env_seed": {"type": "array", "items": {"type": "integer"}},
        "policy_seed": {"type": "array", "items": {"type": "integer"}},
        "floorplan": {"type": "object", "required": ["grid", "cell_size"]},
        "start": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "actions": {"type": "array", "items": {"enum": [0, 1, 2]}},
        "collided": {"type": "array", "items": {"type": "boolean"}},
        "rewards": {"type": "array", "items": {"type": "number"}},
        "poses": {"type": "array",
                  "items": {"type": "array", "items": {"type": "number"},
                            "minItems": 3, "maxItems": 3}},
        "covered_cells": {"type": "array",
                          "items": {"type": "object", "required": ["cell", "step"]}},
        "found_events": {"type": "array",
                         "items": {"type": "object", "required": ["class", "step"]}},
        "metrics": {"type": "object"},
    },
}


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return v


def write_table(path: Path, rows: list[dict], fields) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n",
                           extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in fields})


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str) -> Path:
    files = sorted(p for p in out.rglob("*")
                   if p.is_file() and p.name not in ("manifest.json", "run.log")
                   and p.suffix != ".pkl")
    manifest = {
        "command": command,
        "version": __version__,
        "artifacts": {p.relative_to(out).as_posix(): sha256(p) for p in files},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def summarize(rows: list[dict], **extra) -> dict:
    out = dict(extra)
    for k in TABLE_FIELDS:
        out[k] = float(np.mean([r[k] for r in rows])) if rows else 0.0
    out["episodes"] = len(rows)
    return out


def found_series(rows: list[dict]) -> list[dict]:
    """Mean number of found classes after each step, over episodes."""
    if not rows:
        return []
    n = max(len(r["found_curve"]) for r in rows)
    series = []
    for t in range(n):
        # an ended episode keeps its final count
        vals = [r["found_curve"][min(t, len(r["found_curve"]) - 1)] if r["found_curve"] else 0
                for r in rows]
        series.append({"step": t + 1, "found_classes": float(np.mean(vals))})
    return series


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------


def _policy_from_checkpoint(tc: TrainConfig, checkpoint) -> PolicyNetwork:
    if tc.policy.kind == "random":
        return random_policy(tc)
    if checkpoint is None:
        raise ConfigurationError(f"--checkpoint is required for a {tc.policy.kind} policy")
    path = Path(checkpoint)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    store = ParamStore.load(path)
    ref = PolicyNetwork(tc.policy).store
    for n in ref.names():
        if n not in store:
            raise CheckpointError(f"{path}: incompatible with {tc.policy.kind} config "
                                  f"(missing parameter {n})")
        if store[n].shape != ref[n].shape:
            raise CheckpointError(f"{path}: parameter {n} has shape {store[n].shape}, "
                                  f"config needs {ref[n].shape}")
    extra = sorted(set(store.names()) - set(ref.names()))
    if extra:
        raise CheckpointError(f"{path}: unexpected parameter {extra[0]} for this config")
    return PolicyNetwork(tc.policy, store)


def train_one(tc: TrainConfig, out: Path, pretrain: bool,
              pretrained: dict | None = None) -> tuple[PolicyNetwork, dict]:
    """Pretrain (if needed) then train; returns the best network and its curve."""
    init = None
    if pretrain and tc.policy.kind in MEMORY_KINDS:
        key = (tc.seed, tc.task.kind, repr(tc.policy.embedding), repr(tc.dynamics))
        if pretrained is not None and key in pretrained:
            init = pretrained[key]
        else:
            init = pretrain_embeddings(tc, out / "pretrain")
            init.save(out / "pretrain.ckpt")
            if pretrained is not None:
                pretrained[key] = init
    if tc.policy.kind == "random":
        return random_policy(tc), {"curve": []}
    result = train(tc, out, init_store=init)
    return PolicyNetwork(tc.policy, result.store), {"curve": result.curve,
                                                    "best": result.best_score}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _seeds(cfg: ExperimentConfig, args) -> list[int]:
    return [args.seed] if args.seed is not None else list(cfg.seeds)


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(cfg.to_yaml())
    for seed in _seeds(cfg, args):
        tc = cfg.train_config(seed)
        run = out / f"seed_{seed}"
        _, info = train_one(tc, run, cfg.pretrain)
        log.info("seed %d: best validation reward %s", seed, info.get("best"))
    write_manifest(out, "train")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train_config(_seeds(cfg, args)[0])
    net = _policy_from_checkpoint(tc, args.checkpoint)
    _, val = split_plans(tc)
    n = args.episodes or cfg.eval.episodes
    rows = evaluate(net, val, tc, episodes=n, base_seed=cfg.eval.base_seed,
                    workers=args.workers or cfg.workers)
    fields = ("plan", "episode", "steps") + TABLE_FIELDS + ("classes_present",)
    write_table(out / "episodes.csv", rows, fields)
    write_table(out / "summary.csv", [summarize(rows, task=tc.task.kind, policy=tc.policy.kind)],
                ("task", "policy", "episodes") + TABLE_FIELDS)
    write_table(out / "found_curve.csv", found_series(rows), ("step", "found_classes"))
    write_manifest(out, "eval")
    return EXIT_OK


def _variant(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    c = copy.deepcopy(cfg)
    for dotted, value in changes.items():
        obj = c
        parts = dotted.split("__")
        for p in parts[:-1]:
            obj = getattr(obj, p)
        setattr(obj, parts[-1], value)
    return c


def _train_and_eval(cfg: ExperimentConfig, seed: int, run: Path, args, pretrained: dict,
                    net: PolicyNetwork | None = None, dynamics_list=None, pose_source=None):
    tc = cfg.train_config(seed)
    if net is None:
        net, _ = train_one(tc, run, cfg.pretrain, pretrained)
    _, val = split_plans(tc)
    workers = args.workers or cfg.workers
    if dynamics_list is None:
        return evaluate(net, val, tc, episodes=cfg.eval.episodes, base_seed=cfg.eval.base_seed,
                        workers=workers)
    out = []
    for dyn in dynamics_list:
        ec = copy.deepcopy(tc)
        ec.pose_source = pose_source or tc.pose_source
        out.append(evaluate(net, val, ec, episodes=cfg.eval.episodes,
                            base_seed=cfg.eval.base_seed, dynamics=dyn, workers=workers))
    return out


def _noise_dynamics(cfg: ExperimentConfig, stds):
    dyns = []
    for s in stds:
        d = copy.deepcopy(cfg.dynamics)
        d.wheel_noise_std = float(s)
        dyns.append(d)
    return dyns


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    suite = args.suite
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(cfg.to_yaml())
    ab = cfg.ablation
    seeds = _seeds(cfg, args)
    pretrained: dict = {}
    rows: list[dict] = []

    def pooled(results):
        return [r for res in results for r in res]

    if suite == "memory_capacity":
        for cap in ab.capacities:
            v = _variant(cfg, policy__capacity=int(cap))
            res = [_train_and_eval(v, s, out / f"capacity_{cap}" / f"seed_{s}", args, pretrained)
                   for s in seeds]
            rows.append(summarize(pooled(res), task=cfg.task.kind, capacity=cap))
        fields = ("task", "capacity")
    elif suite == "modality_dropout":
        for mod in ["none"] + list(ab.modalities):
            dropped = () if mod == "none" else (mod,)
            v = _variant(cfg, policy__embedding__dropped=dropped)
            res = [_train_and_eval(v, s, out / f"drop_{mod}" / f"seed_{s}", args, pretrained)
                   for s in seeds]
            rows.append(summarize(pooled(res), task=cfg.task.kind, dropped=mod))
        fields = ("task", "dropped")
    elif suite == "centers":
        for kind in ab.centers:
            row = {"centers": kind}
            for task in ab.tasks:
                v = _variant(cfg, task__kind=task, policy__kind="smt_fact",
                             policy__center_kind=kind)
                res = [_train_and_eval(v, s, out / f"{kind}_{task}" / f"seed_{s}", args,
                                       pretrained) for s in seeds]
                row[task] = summarize(pooled(res))["reward"]
            rows.append(row)
        fields = ("centers",) + tuple(ab.tasks)
    elif suite == "temporal_embedding":
        for mode in ab.temporal_modes:
            v = _variant(cfg, policy__embedding__temporal_mode=mode)
            dyns = _noise_dynamics(v, ab.noise_stds)
            per_seed = [_train_and_eval(v, s, out / f"temporal_{mode}" / f"seed_{s}", args,
                                        pretrained, dynamics_list=dyns,
                                        pose_source="dead_reckoning") for s in seeds]
            for i, std in enumerate(ab.noise_stds):
                rows.append(summarize(pooled(r[i] for r in per_seed), task=cfg.task.kind,
                                      temporal_mode=mode, noise_std=std))
        fields = ("task", "temporal_mode", "noise_std")
    elif suite == "noise_sweep":
        clean_dyn = _noise_dynamics(cfg, [0.0])
        dyns = _noise_dynamics(cfg, ab.noise_stds)
        per_seed = []
        for s in seeds:
            tc = cfg.train_config(s)
            if args.checkpoint is not None or tc.policy.kind == "random":
                net = _policy_from_checkpoint(tc, args.checkpoint)
            else:
                net, _ = train_one(tc, out / f"seed_{s}", cfg.pretrain, pretrained)
            clean = _train_and_eval(cfg, s, out, args, pretrained, net=net,
                                    dynamics_list=clean_dyn, pose_source="true")
            noisy = _train_and_eval(cfg, s, out, args, pretrained, net=net,
                                    dynamics_list=dyns, pose_source="dead_reckoning")
            per_seed.append(clean + noisy)
        rows.append(summarize(pooled(r[0] for r in per_seed), task=cfg.task.kind,
                              pose="true", noise_std=0.0))
        for i, std in enumerate(ab.noise_stds):
            rows.append(summarize(pooled(r[i + 1] for r in per_seed), task=cfg.task.kind,
                                  pose="dead_reckoning", noise_std=std))
        fields = ("task", "pose", "noise_std")
    else:  # argparse restricts choices; kept for programmatic callers
        raise ConfigurationError(f"unknown ablation suite {suite!r}")
    write_table(out / f"{suite}.csv", rows, fields + TABLE_FIELDS + ("episodes",))
    write_manifest(out, f"ablate {suite}")
    return EXIT_OK


def trajectory_record(trace, plan, tc: TrainConfig) -> dict:
    cell = tc.task.cell_size
    poses = np.asarray(trace.true_poses)
    seen = {coverage_cell(poses[0][0], poses[0][1], cell)}
    covered = []
    for k in range(1, len(poses)):
        c = coverage_cell(poses[k][0], poses[k][1], cell)
        if c not in seen:
            seen.add(c)
            covered.append({"cell": list(c), "step": k})
    found, events = set(), []
    for k, o in enumerate(trace.observations[1:], start=1):
        for c in sorted(detected_classes(o, tc.task) - found):
            found.add(c)
            events.append({"class": int(c), "step": k})
    m = metrics(trace, tc.task)
    m.pop("found_curve")
    return {
        "format": "smtnav-trajectory/1",
        "task": trace.task,
        "policy": tc.policy.kind,
        "plan_seed": int(trace.plan_seed),
        "env_seed": [int(x) for x in trace.env_seed],
        "policy_seed": [int(x) for x in trace.policy_seed],
        "pose_source": tc.pose_source,
        "floorplan": plan.to_dict(),
        "start": [float(x) for x in trace.start],
        "actions": [int(a) for a in trace.actions],
        "collided": [bool(c) for c in trace.collided],
        "rewards": [float(r) for r in trace.rewards],
        "poses": [[float(x) for x in p] for p in poses[1:]],
        "covered_cells": covered,
        "found_events": events,
        "metrics": m,
    }


def replay_trajectory(record: dict, tc: TrainConfig) -> np.ndarray:
    """Re-run the recorded actions through the simulator with the recorded env seed."""
    from .env import Floorplan

    plan = Floorplan.from_dict(record["floorplan"])
    env = NavEnv(plan, tc.dynamics, np.random.default_rng(record["env_seed"]), tc.pose_source)
    env.reset()
    out = []
    for a in record["actions"]:
        env.step(a)
        out.append(env.state.pose)
    return np.array(out).reshape(-1, 3)


def cmd_export(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train_config(_seeds(cfg, args)[0])
    net = _policy_from_checkpoint(tc, args.checkpoint)
    _, val = split_plans(tc)
    traces: list = []
    n = args.episodes or cfg.eval.episodes
    evaluate(net, val, tc, episodes=n, base_seed=cfg.eval.base_seed,
             workers=args.workers or cfg.workers, traces=traces)
    plans = dict(val)
    traj = out / "trajectories"
    traj.mkdir(exist_ok=True)
    for i, tr in enumerate(traces):
        rec = trajectory_record(tr, plans[tr.plan_seed], tc)
        name = f"plan{tr.plan_seed}_ep{i % n:03d}.json"
        (traj / name).write_text(json.dumps(rec, sort_keys=True) + "\n")
    (out / "trajectory.schema.json").write_text(json.dumps(TRAJECTORY_SCHEMA, indent=2) + "\n")
    write_manifest(out, "export-trajectories")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int, help="run only this seed")
    common.add_argument("--workers", type=int, help="episode-collection threads")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--print-resolved", action="store_true",
                        help="print the fully defaulted config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="smtnav", description="Scene-memory navigation experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="pretrain embeddings and train a policy")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on held-out plans")
    ev.add_argument("--checkpoint")
    ev.add_argument("--episodes", type=int, help="episodes per plan (default: eval.episodes)")
    ab = sub.add_parser("ablate", parents=[common], help="run an ablation suite")
    ab.add_argument("suite", choices=ABLATION_SUITES)
    ab.add_argument("--checkpoint", help="noise_sweep: evaluate this checkpoint instead of training")
    ex = sub.add_parser("export-trajectories", parents=[common],
                        help="write per-episode trajectory files")
    ex.add_argument("--checkpoint")
    ex.add_argument("--episodes", type=int)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "export-trajectories": cmd_export}


def _attach_log(out: Path, verbose: bool) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("smtnav")
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    return handler


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.workers is not None and args.workers < 1:
            raise ConfigurationError("--workers must be at least 1")
    except ConfigurationError as exc:
        print(f"smtnav: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.print_resolved:
        sys.stdout.write(cfg.to_yaml())
        return EXIT_OK
    out = Path(args.out)
    handler = _attach_log(out, args.verbose)
    t0 = time.time()
    log.info("smtnav %s %s", __version__, args.command)
    try:
        code = COMMANDS[args.command](cfg, args)
    except ConfigurationError as exc:
        print(f"smtnav: config error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (SMTError, OSError) as exc:
        print(f"smtnav: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.exception("command failed")
        code = EXIT_RUNTIME
    finally:
        log.info("finished in %.1fs", time.time() - t0)
        logging.getLogger("smtnav").removeHandler(handler)
        handler.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
