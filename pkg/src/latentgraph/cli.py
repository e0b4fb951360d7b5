"""Command-line interface.

Subcommands: collect, train-detector, train, eval, plan, render.  Outputs go
under ``--out`` (or ``$LATENTGRAPH_OUT``, else ``./runs``).  Every artifact
records the simulator config hash of the run that produced it, and commands
refuse to mix artifacts with different hashes unless ``--force`` is given.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import PngImagePlugin

from . import checkpoint
from . import dynamics as dyn
from . import keypoints as kp
from . import logs
from . import planner as pl
from . import render as rd
from . import sim
from . import trainer as tr

log = logging.getLogger("latentgraph")

OUT_ENV = "LATENTGRAPH_OUT"
REPORT_SCHEMA_VERSION = 1

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "config_hash", "seed", "checkpoint", "tasks"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "config_hash": {"type": "string"},
        "seed": {"type": "integer"},
        "checkpoint": {
            "type": "object",
            "required": ["path", "flags", "stub"],
            "properties": {
                "path": {"type": "string"},
                "flags": {"type": "array", "items": {"type": "string"}},
                "stub": {"type": ["string", "null"]},
            },
        },
        "tasks": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["top1_accuracy", "negatives", "horizon", "eval_points",
                             "success_rate", "mean_best_reward", "episodes", "success_threshold"],
                "properties": {
                    "top1_accuracy": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "negatives": {"type": "integer", "minimum": 1},
                    "horizon": {"type": "integer", "minimum": 1},
                    "eval_points": {"type": "integer", "minimum": 0},
                    "success_rate": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "mean_best_reward": {"type": ["number", "null"]},
                    "episodes": {"type": "integer", "minimum": 0},
                    "success_threshold": {"type": "number"},
                },
            },
        },
    },
}


class CliError(Exception):
    pass


# -- config ---------------------------------------------------------------------------

def _parse_value(text: str):
    t = text.strip()
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; ``[section]`` prefixes keys."""
    out, section = {}, ""
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip() + "."
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[section + k.strip()] = _parse_value(v)
    return out


def _apply(dc_cls, overrides: dict, prefix: str):
    fields = {f.name for f in dataclasses.fields(dc_cls)}
    kw = {}
    for key, val in overrides.items():
        if key.startswith(prefix):
            name = key[len(prefix):]
            if name not in fields:
                raise CliError(f"unknown config key {key!r}")
            kw[name] = val
    return dc_cls(**kw)


class Run:
    """Resolved configuration for one invocation."""

    def __init__(self, args):
        self.args = args
        self.conf = read_config(args.config) if args.config else {}
        self.sim = _apply(sim.SimConfig, self.conf, "sim.")
        self.seed = args.seed if args.seed is not None else int(self.conf.get("seed", 0))
        out = args.out or os.environ.get(OUT_ENV) or "runs"
        self.out = Path(out)
        self.hash = self.sim.config_hash()
        self.force = args.force

    def task(self, task_id: str | None) -> sim.TaskSpec:
        tid = task_id or self.conf.get("task")
        if tid is None:
            raise CliError("no task given (use --task or 'task = ...' in the config)")
        if tid not in sim.TASK_IDS:
            raise CliError(f"unknown task {tid!r}; choose from {', '.join(sim.TASK_IDS)}")
        return sim.make_task(tid)

    def check_hash(self, found: str | None, what: str) -> None:
        if found != self.hash:
            msg = f"config hash mismatch: {what} has {found}, this run has {self.hash}"
            if not self.force:
                raise CliError(msg + " (use --force to override)")
            log.warning(msg + " (continuing because of --force)")

    def train_config(self, **kw) -> tr.TrainConfig:
        base = _apply(tr.TrainConfig, self.conf, "train.")
        return dataclasses.replace(base, seed=self.seed, **{k: v for k, v in kw.items() if v is not None})

    def plan_config(self, **kw) -> pl.PlanConfig:
        base = _apply(pl.PlanConfig, self.conf, "plan.")
        return dataclasses.replace(base, **{k: v for k, v in kw.items() if v is not None})


def _write_json(path: Path, obj) -> None:
    checkpoint.atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _data_dir(run: Run, given) -> Path:
    return Path(given) if given else run.out / "data"


def _load_data(run: Run, data_dir: Path) -> tuple[list[logs.Episode], dict]:
    eps, manifest = logs.read_dataset(data_dir)
    run.check_hash(manifest.get("config_hash"), f"dataset {data_dir}")
    for ep in eps:
        if ep.config_hash != manifest.get("config_hash"):
            run.check_hash(ep.config_hash, f"episode log seed {ep.seed}")
    return eps, manifest


def _load_detector(run: Run, path) -> kp.LearnedDetector | None:
    if not path:
        return None
    det, meta = kp.LearnedDetector.load(path)
    run.check_hash(meta.get("config_hash"), f"detector {path}")
    return det


# -- subcommands -------------------------------------------------------------------------

def cmd_collect(run: Run, a) -> int:
    task = run.task(a.task)
    if a.episodes < 0:
        raise CliError("--episodes must be >= 0")
    eps = tr.collect(task, a.episodes, a.policy, run.seed, run.sim, a.steps)
    out = _data_dir(run, a.data)
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = logs.write_dataset(out, eps, {
            "task_id": task.task_id, "seed": run.seed, "policy": a.policy, "config_hash": run.hash,
            "sim_config": dataclasses.asdict(run.sim), "seeds": [ep.seed for ep in eps]})
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}") from exc
    print(f"wrote {manifest['episodes']} episode logs to {out}")
    return 0


def cmd_train_detector(run: Run, a) -> int:
    eps, manifest = _load_data(run, _data_dir(run, a.data))
    k = a.k or kp.default_k(manifest["task_id"])
    det, curve = kp.train_detector(eps, a.epochs, a.lr, k=k, seed=run.seed, log=log.info)
    run.out.mkdir(parents=True, exist_ok=True)
    det.save(run.out / "detector.ckpt", {"config_hash": run.hash, "task_id": manifest["task_id"]})
    rows = "".join(f"{i + 1},{v:.8g}\n" for i, v in enumerate(curve))
    checkpoint.atomic_write_bytes(run.out / "detector_curve.csv",
                                  f"# config_hash: {run.hash}\nepoch,L_rec\n{rows}".encode())
    print(f"detector written to {run.out / 'detector.ckpt'}")
    return 0


def write_oracle_stub(path, k: int, d_in: int, config_hash: str, task_id: str) -> None:
    """A checkpoint whose predictions are the true encodings (for testing eval)."""
    model = dyn.DynamicsModel(dyn.ModelConfig(k=k, d_in=d_in))
    model.save(path, {"config_hash": config_hash, "stub": "oracle", "task_id": task_id,
                      "ablations": [], "detector": None})


def cmd_train(run: Run, a) -> int:
    data_dir = _data_dir(run, a.data)
    eps, manifest = _load_data(run, data_dir)
    task_id = manifest["task_id"]
    det = _load_detector(run, a.detector)
    k = a.k or (det.k if det else kp.default_k(task_id))
    if det is not None and det.k != k:
        raise CliError(f"K mismatch: detector {a.detector} has K={det.k} but --k {k} was requested for the dynamics model")
    run.out.mkdir(parents=True, exist_ok=True)
    ckpt = run.out / "dynamics.ckpt"
    if a.stub:
        write_oracle_stub(ckpt, k, 5 if det is None else det.channels + 2, run.hash, task_id)
        print(f"oracle stub checkpoint written to {ckpt}")
        return 0
    cfg = tr.TrainConfig.with_ablations(a.ablation or [], **dataclasses.asdict(run.train_config(epochs=a.epochs)))
    data = tr.encode_episodes(eps, k, det)
    model, curve = tr.train(data, cfg, log=log.info)
    model.save(ckpt, {"config_hash": run.hash, "task_id": task_id, "ablations": cfg.ablations(),
                      "train_config": dataclasses.asdict(cfg), "stub": None,
                      "detector": str(a.detector) if a.detector else None})
    checkpoint.atomic_write_bytes(run.out / "train_curve.csv",
                                  (f"# config_hash: {run.hash}\n" + tr.curve_csv(curve)).encode())
    print(f"checkpoint written to {ckpt}")
    return 0


def _load_model(run: Run, path) -> tuple[dyn.DynamicsModel, dict]:
    if not path or not Path(path).exists():
        raise CliError(f"missing checkpoint: {path}")
    try:
        model, meta = dyn.DynamicsModel.load(path)
    except checkpoint.CheckpointError as exc:
        raise CliError(str(exc)) from exc
    run.check_hash(meta.get("config_hash"), f"checkpoint {path}")
    return model, meta


def cmd_eval(run: Run, a) -> int:
    model, meta = _load_model(run, a.checkpoint)
    det = _load_detector(run, a.detector or meta.get("detector"))
    if det is not None and det.k != model.cfg.k:
        raise CliError(f"K mismatch: detector has K={det.k}, checkpoint has K={model.cfg.k}")
    task = run.task(a.task or meta.get("task_id"))
    entry = {"negatives": a.negatives, "horizon": a.horizon, "top1_accuracy": None, "eval_points": 0,
             "success_rate": None, "mean_best_reward": None, "episodes": 0,
             "success_threshold": task.success_threshold}
    if a.data or (run.out / "heldout").exists():
        eps, _ = _load_data(run, Path(a.data) if a.data else run.out / "heldout")
        data = tr.encode_episodes(eps, model.cfg.k, det)
        predictor = tr.oracle_predictor if meta.get("stub") == "oracle" else None
        _, ids = tr.prediction_points(model, data, 2, a.horizon)
        entry["top1_accuracy"] = tr.top1_accuracy(model, data, a.negatives, a.horizon, seed=run.seed,
                                                  predictor=predictor)
        entry["eval_points"] = int(len(ids))
    if a.episodes > 0 and meta.get("stub") is None:
        policy = pl.PlannerPolicy(model, run.plan_config(), det, seed=run.seed)
        res = pl.evaluate_policy(task, policy, a.episodes, seed=run.seed, cfg=run.sim)
        entry.update(success_rate=res.success_rate, mean_best_reward=res.mean_best_reward, episodes=a.episodes)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config_hash": run.hash,
        "seed": run.seed,
        "checkpoint": {"path": str(a.checkpoint), "flags": list(meta.get("ablations", [])), "stub": meta.get("stub")},
        "tasks": {task.task_id: entry},
    }
    path = Path(a.report) if a.report else run.out / "eval_report.json"
    _write_json(path, report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_plan(run: Run, a) -> int:
    model, meta = _load_model(run, a.checkpoint)
    det = _load_detector(run, a.detector or meta.get("detector"))
    task = run.task(a.task or meta.get("task_id"))
    state = sim.reset(task, a.episode_seed, run.sim)
    img = sim.render_depth(state, run.sim.image_size, run.sim.image_size, run.sim)
    cfg = run.plan_config(plain_cem=True if a.plain_cem else None)
    policy = pl.PlannerPolicy(model, cfg, det, seed=run.seed)
    policy.reset(a.episode_seed)
    action = policy.act(img)
    out = {"task_id": task.task_id, "episode_seed": a.episode_seed, "config_hash": run.hash,
           **policy.last.diagnostics(), "action": [float(v) for v in action]}
    if a.dump:
        _write_json(Path(a.dump), out)
    print(json.dumps({"action": out["action"], "value": out["value"], "branch": out["branch"]}, sort_keys=True))
    return 0


def cmd_render(run: Run, a) -> int:
    if a.log:
        try:
            ep = logs.load(a.log)
        except logs.LogError as exc:
            raise CliError(f"cannot read episode log {a.log}: {exc}") from exc
        run.check_hash(ep.config_hash, f"episode log {a.log}")
        name = Path(a.log).stem
    else:
        task = run.task(a.task)
        ep = tr.collect(task, 1, "random", run.seed, run.sim, a.steps)[0]
        name = f"{task.task_id}_live"
    if ep.n_actions == 0:
        log.warning("episode has no steps; nothing to render")
        return 0
    k = a.k or kp.default_k(ep.task_id)
    frames = []
    for t in range(ep.n_actions):
        locs = None
        if np.any(ep.frames[t] > 0):
            locs = kp.encode_image(ep.frames[t], None, k).locations
        frames.append(rd.draw_frame(ep.frames[t], locs, ep.actions[t + 1], a.scale))
    info = PngImagePlugin.PngInfo()
    info.add_text("config_hash", ep.config_hash)
    out = run.out / "frames"
    paths = rd.save_frames(frames, out, name, pnginfo=info)
    print(f"wrote {len(paths)} files to {out}")
    return 0


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentgraph", description="Keypoint graph dynamics for rope and cloth.")
    p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    p.add_argument("--force", action="store_true", help="allow mixing artifacts with different config hashes")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="roll out a behaviour policy and write episode logs")
    c.add_argument("--task")
    c.add_argument("--episodes", type=int, default=10)
    c.add_argument("--policy", choices=["random", "scripted"], default="random")
    c.add_argument("--steps", type=int, default=None, help="actions per episode (default: task max steps)")
    c.add_argument("--data", help="output dataset dir (default OUT/data)")
    c.set_defaults(fn=cmd_collect)

    d = sub.add_parser("train-detector", help="train the learned keypoint detector")
    d.add_argument("--data")
    d.add_argument("--epochs", type=int, default=30)
    d.add_argument("--lr", type=float, default=1e-3)
    d.add_argument("--k", type=int, default=None)
    d.set_defaults(fn=cmd_train_detector)

    t = sub.add_parser("train", help="train the dynamics model")
    t.add_argument("--data")
    t.add_argument("--detector", help="learned detector checkpoint (default: geometric detector)")
    t.add_argument("--k", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--ablation", action="append", help="NoGraph, NoRNN, NoContrastive, InfoNCE, MaxPool (repeatable)")
    t.add_argument("--stub", choices=["oracle"], help="write a stub checkpoint instead of training")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy and closed-loop success")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="held-out dataset dir (default OUT/heldout if present)")
    e.add_argument("--detector")
    e.add_argument("--task")
    e.add_argument("--negatives", type=int, default=50)
    e.add_argument("--horizon", type=int, default=20)
    e.add_argument("--episodes", type=int, default=0, help="closed-loop planning episodes")
    e.add_argument("--report", help="report path (default OUT/eval_report.json)")
    e.set_defaults(fn=cmd_eval)

    q = sub.add_parser("plan", help="plan one action from a reset state")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--detector")
    q.add_argument("--task")
    q.add_argument("--episode-seed", type=int, default=0)
    q.add_argument("--plain-cem", action="store_true")
    q.add_argument("--dump", help="write full plan diagnostics JSON here")
    q.set_defaults(fn=cmd_plan)

    r = sub.add_parser("render", help="PNG frames and a GIF with keypoints and action arrows")
    r.add_argument("--log", help="episode log to render (default: a live random rollout)")
    r.add_argument("--task")
    r.add_argument("--steps", type=int, default=4)
    r.add_argument("--k", type=int, default=None)
    r.add_argument("--scale", type=int, default=4)
    r.set_defaults(fn=cmd_render)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run = Run(args)
        return args.fn(run, args)
    except (CliError, logs.LogError, checkpoint.CheckpointError, kp.EmptyObservationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
