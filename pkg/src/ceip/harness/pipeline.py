"""Pipeline stages: data -> clusters -> flows -> combination -> RL (or BC /
replay), plus the ablation sweep and learning-curve export.

Stage outputs live under ``<out>/cache/<stage>/<key>/`` where ``key`` hashes
every config section the stage depends on, so variants that share flows share
the directory. A stage is complete once its ``stage.json`` is written.
Completed stages from earlier invocations are reused only with ``resume``.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ceip.data import (
    DemoDataset,
    build_condition_pairs,
    cluster_trajectories,
    load_dataset,
    save_dataset,
)
from ceip.envs import point_reach_tasks, waypoint_tasks
from ceip.flow import affine_forward, load_flow, save_flow, train_single_flow
from ceip.harness.config import ConfigError, ExperimentConfig, Variant, canonical_hash, get_variant
from ceip.mixture import (
    coefficients,
    combined_effective_affine,
    load_combined,
    parrot_flow,
    save_combined,
    train_combination,
)
from ceip.numerics import save_checkpoint
from ceip.retrieval import RetrievalDatabase
from ceip.rl import (
    EvalReport,
    EvalRow,
    PriorBundle,
    ReplayPolicy,
    evaluate,
    identity_bundle,
    read_report_csv,
    train_bc,
    train_sac,
)

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("variant", "seed", "step", "return")
SUMMARY_COLUMNS = ("variant", "n_seeds", "mean_return", "std_return", "mean_subtasks", "std_subtasks",
                   "config_hash")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Workspace:
    root: Path
    resume: bool = False
    memo: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)

    def stage_dir(self, stage: str, key: str) -> Path:
        return self.root / "cache" / stage / key

    @property
    def fresh(self) -> set:
        """Stage dirs completed during this invocation."""
        return self.memo.setdefault("_fresh", set())

    def is_done(self, d: Path, key: str) -> bool:
        marker = d / "stage.json"
        if not marker.exists():
            return False
        if str(d) in self.fresh:
            return True
        if not self.resume:
            return False
        return json.loads(marker.read_text(encoding="utf-8")).get("key") == key

    def finish(self, d: Path, key: str, info: dict | None = None) -> None:
        body = {"key": key}
        body.update(info or {})
        (d / "stage.json").write_text(json.dumps(body, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        self.fresh.add(str(d))

    def check_experiment(self, cfg: ExperimentConfig) -> None:
        """Record (or, when resuming, verify) the experiment hash of this output dir."""
        path = self.root / "run.json"
        h = experiment_hash(cfg)
        if self.resume and path.exists():
            old = json.loads(path.read_text(encoding="utf-8")).get("experiment_hash")
            if old != h:
                raise ConfigError(f"{self.root} was produced by config {old}, current config is {h}; "
                                  "refusing to resume")
        self.root.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"experiment_hash": h}, indent=1) + "\n", encoding="utf-8")


def experiment_hash(cfg: ExperimentConfig) -> str:
    raw = {k: v for k, v in cfg.raw.items() if k not in ("variant", "seeds")}
    return canonical_hash(raw)


def run_hash(cfg: ExperimentConfig, variant: str, seed: int) -> str:
    raw = {k: v for k, v in cfg.raw.items() if k not in ("variant", "seeds")}
    raw.update(variant=variant, seed=int(seed))
    return canonical_hash(raw)


def _stage(name):
    """Wrap a stage so failures carry the stage name (config errors pass through)."""

    def wrap(fn):
        def inner(*args, **kw):
            try:
                return fn(*args, **kw)
            except (ConfigError, StageError):
                raise
            except Exception as e:
                raise StageError(name, e) from e

        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner

    return wrap


# data ------------------------------------------------------------------------

def data_key(cfg: ExperimentConfig) -> str:
    if cfg.raw["data"]["path"]:
        return canonical_hash({"path": str(Path(cfg.raw["data"]["path"]).resolve())})
    return cfg.section_hash("env", "data")


def _generate(cfg: ExperimentConfig) -> tuple[DemoDataset, list[str]]:
    d = cfg.raw["data"]
    p = d["params"]
    env_cfg = cfg.env_config()
    if cfg.env_kind == "point_reach":
        dirs = p.get("ta_directions", list(range(8)))
        ds = point_reach_tasks(dirs, env_cfg.direction, int(p.get("n_ta", 40)), int(p.get("n_ts", 4)),
                               int(d["seed"]), float(d["expert_noise"]), env_cfg)
        return ds, [f"direction_{float(x):g}" for x in dirs]
    ds = waypoint_tasks(env_cfg, int(p.get("n_ta", 120)), int(p.get("n_ts", 4)), p.get("ta_length"),
                        tuple(p.get("exclude", ())), int(p.get("dwell", 0)), float(d["expert_noise"]),
                        int(d["seed"]), float(p.get("dwell_noise", 0.01)))
    return ds, ["task_agnostic"]


@_stage("gen-data")
def stage_data(cfg: ExperimentConfig, ws: Workspace) -> tuple[DemoDataset, Path]:
    if cfg.raw["data"]["path"]:
        path = Path(cfg.raw["data"]["path"])
        return load_dataset(path), path
    key = data_key(cfg)
    d = ws.stage_dir("data", key)
    if ("data", key) in ws.memo:
        return ws.memo[("data", key)]
    if ws.is_done(d, key):
        out = load_dataset(d / "dataset"), d / "dataset"
    else:
        ds, names = _generate(cfg)
        d.mkdir(parents=True, exist_ok=True)
        save_dataset(d / "dataset", ds, names)
        ws.finish(d, key, {"stage": "data"})
        out = ds, d / "dataset"
    ws.memo[("data", key)] = out
    return out


# clustering --------------------------------------------------------------------

def cluster_key(cfg: ExperimentConfig) -> str:
    return canonical_hash({"data": data_key(cfg), "clustering": cfg.raw["clustering"]})


@_stage("cluster")
def stage_cluster(cfg: ExperimentConfig, ws: Workspace) -> list[list]:
    key = cluster_key(cfg)
    if ("cluster", key) in ws.memo:
        return ws.memo[("cluster", key)]
    d = ws.stage_dir("clusters", key)
    if ws.is_done(d, key):
        groups = load_dataset(d / "dataset").clusters
    else:
        ds, _ = stage_data(cfg, ws)
        c = cfg.raw["clustering"]
        groups, assign = cluster_trajectories(ds.task_agnostic(), int(c["k"]), int(c["seed"]),
                                              int(c["max_iters"]))
        d.mkdir(parents=True, exist_ok=True)
        save_dataset(d / "dataset", DemoDataset(groups, ds.task_specific, dict(ds.metadata)),
                     [f"cluster_{i:02d}" for i in range(len(groups))])
        (d / "assignment.json").write_text(json.dumps({
            "k": assign.k,
            "labels": assign.labels.tolist(),
            "centroids": assign.centroids.tolist(),
            "objective_history": list(map(float, assign.objective_history)),
        }) + "\n", encoding="utf-8")
        ws.finish(d, key, {"stage": "cluster", "sizes": [len(g) for g in groups]})
    ws.memo[("cluster", key)] = groups
    return groups


# flows -----------------------------------------------------------------------

def _train_flow_dir(ws: Workspace, stage: str, key: str, groups, cfg_flow, explicit: bool):
    d = ws.stage_dir(stage, key)
    paths = [d / f"flow_{i:02d}.ckpt" for i in range(len(groups))]
    if ws.is_done(d, key):
        return [load_flow(p) for p in paths], paths
    d.mkdir(parents=True, exist_ok=True)
    flows = []
    for i, (g, p) in enumerate(zip(groups, paths)):
        f = train_single_flow(build_condition_pairs(g, explicit), cfg_flow)
        save_flow(p, f, cfg_flow, {"stage_key": key, "index": i, "explicit": explicit})
        flows.append(f)
    ws.finish(d, key, {"stage": stage, "digests": [f.digest() for f in flows]})
    return flows, paths


def flows_key(cfg: ExperimentConfig, explicit: bool) -> str:
    return canonical_hash({"clusters": cluster_key(cfg), "flows": cfg.raw["flows"], "explicit": explicit})


@_stage("train-flows")
def stage_flows(cfg: ExperimentConfig, ws: Workspace, explicit: bool):
    """One flow per task-agnostic cluster."""
    key = flows_key(cfg, explicit)
    if ("flows", key) not in ws.memo:
        groups = stage_cluster(cfg, ws)
        ws.memo[("flows", key)] = _train_flow_dir(ws, "flows", key, groups, cfg.flow_config(), explicit)
    return ws.memo[("flows", key)]


@_stage("train-flows")
def stage_single_flow(cfg: ExperimentConfig, ws: Workspace, source: str, explicit: bool):
    """A single flow on task-specific ("ts"), pooled task-agnostic ("ta") or all ("both") data."""
    key = canonical_hash({"data": data_key(cfg), "flows": cfg.raw["flows"], "explicit": explicit,
                          "source": source})
    if ("single", key) not in ws.memo:
        ds, _ = stage_data(cfg, ws)
        trajs = {"ts": ds.task_specific, "ta": ds.task_agnostic(),
                 "both": ds.task_agnostic() + list(ds.task_specific)}[source]
        flows, paths = _train_flow_dir(ws, f"flow_{source}", key, [trajs], cfg.flow_config(), explicit)
        ws.memo[("single", key)] = (flows[0], paths[0])
    return ws.memo[("single", key)]


@_stage("train-combo")
def stage_combination(cfg: ExperimentConfig, ws: Workspace, explicit: bool, use_ts: bool):
    key = canonical_hash({"flows": flows_key(cfg, explicit), "combination": cfg.raw["combination"],
                          "use_ts": use_ts, "data": data_key(cfg)})
    if ("combo", key) in ws.memo:
        return ws.memo[("combo", key)]
    d = ws.stage_dir("combination", key)
    path = d / "combined.ckpt"
    if ws.is_done(d, key):
        cf = load_combined(path)
    else:
        flows, paths = stage_flows(cfg, ws, explicit)
        flows, paths = list(flows), list(paths)
        if use_ts:
            f, p = stage_single_flow(cfg, ws, "ts", explicit)
            flows.append(f)
            paths.append(p)
        ds, _ = stage_data(cfg, ws)
        cf = train_combination(flows, build_condition_pairs(ds.task_specific, explicit), cfg.combination_config())
        d.mkdir(parents=True, exist_ok=True)
        rel = [os.path.relpath(p, d) for p in paths]
        save_combined(path, cf, rel, [f.digest() for f in flows], {"stage_key": key})
        ws.finish(d, key, {"stage": "combination"})
    ws.memo[("combo", key)] = cf
    return cf


# runs --------------------------------------------------------------------------

def _database(cfg: ExperimentConfig, ws: Workspace) -> RetrievalDatabase:
    ds, _ = stage_data(cfg, ws)
    return RetrievalDatabase.from_trajectories(ds.task_specific)


def build_prior(cfg: ExperimentConfig, ws: Workspace, variant: Variant) -> PriorBundle:
    """Build (or load) every artifact the variant's prior needs."""
    if variant.family == "naive":
        env = cfg.env_factory()()
        return identity_bundle(env.state_dim, env.action_dim)
    if variant.family == "ceip":
        flow = stage_combination(cfg, ws, variant.use_explicit, variant.use_ts_flow)
    elif variant.family == "parrot":
        flow = parrot_flow(stage_single_flow(cfg, ws, variant.source, variant.use_explicit)[0])
    else:
        raise ConfigError(f"variant {variant.name} has no flow prior")
    db = _database(cfg, ws) if variant.use_explicit else None
    return PriorBundle(flow, db, variant.use_ts_flow, variant.use_explicit, variant.use_forward)


def prepare_shared(cfg: ExperimentConfig, ws: Workspace, variants: Sequence[Variant]) -> None:
    """Build every non-RL stage the variants need (so parallel RL jobs only read them)."""
    stage_data(cfg, ws)
    for v in variants:
        if v.family in ("ceip", "parrot"):
            build_prior(cfg, ws, v)


@dataclass
class RunResult:
    variant: str
    seed: int
    run_dir: Path
    report: EvalReport


def run_dir(ws: Workspace, variant: str, seed: int) -> Path:
    safe = variant.replace("+", "_").replace("(", "").replace(")", "")
    return ws.root / "runs" / safe / f"seed_{seed}"


def _write_coefficients(path: Path, bundle: PriorBundle, policy, env_factory, seed: int) -> None:
    """Coefficients along one deterministic episode."""
    env = env_factory()
    s = env.reset(seed)
    bundle = bundle.fork()
    bundle.reset_episode()
    rows, done, t = [], False, 0
    while not done:
        u = bundle.condition(s)
        mu, lam = coefficients(bundle.flow, u)
        rows.extend((t, i, repr(float(m)), repr(float(l))) for i, (m, l) in enumerate(zip(mu, lam)))
        a = affine_forward(combined_effective_affine(bundle.flow, u), policy.mean_z(s))
        s, _, done = env.step(np.clip(a, bundle.action_low, bundle.action_high))
        t += 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("episode_step", "flow", "mu", "lambda"))
        w.writerows(rows)


@_stage("train-rl")
def run_variant(cfg: ExperimentConfig, ws: Workspace, variant_name: str, seed: int) -> RunResult:
    """Train/evaluate one (variant, seed); reuses a finished run when resuming."""
    variant = get_variant(variant_name)
    h = run_hash(cfg, variant.name, seed)
    rd = run_dir(ws, variant.name, seed)
    csv_path = rd / "eval.csv"
    if ws.resume and (rd / "run.json").exists():
        info = json.loads((rd / "run.json").read_text(encoding="utf-8"))
        if info.get("config_hash") != h:
            raise ConfigError(f"{rd} holds results of config {info.get('config_hash')}, expected {h}; "
                              "refusing to resume")
        if info.get("complete") and csv_path.exists():
            rows = read_report_csv(csv_path)
            return RunResult(variant.name, seed, rd, _report_from_rows(rows, h))
    rd.mkdir(parents=True, exist_ok=True)
    run_cfg = cfg.replace(variant=variant.name, seeds=[seed])
    (rd / "config.yaml").write_text(f"# config_hash: {h}\n" + run_cfg.to_yaml(), encoding="utf-8")
    (rd / "run.json").write_text(json.dumps({"config_hash": h, "variant": variant.name, "seed": seed,
                                             "complete": False}, indent=1) + "\n", encoding="utf-8")
    env_factory = cfg.env_factory()
    ds, _ = stage_data(cfg, ws)
    eval_seed = int(np.random.default_rng([seed, 11]).integers(2**31))
    extra = {}
    if variant.family in ("ceip", "parrot", "naive"):
        bundle = build_prior(cfg, ws, variant)
        bundle.flow.peak_abs_c = 0.0  # the flow object may be shared with earlier runs
        policy, report = train_sac(env_factory, bundle, cfg.sac_config(seed), config_hash=h)
        extra["peak_abs_c"] = bundle.flow.peak_abs_c
        save_checkpoint(rd / "policy.ckpt", {"actor": policy.params},
                        {"kind": "latent_policy", "spec": policy.spec.to_dict(), "config_hash": h})
        if cfg.raw["record_coefficients"] and variant.family == "ceip":
            _write_coefficients(rd / "coefficients.csv", bundle, policy, env_factory, eval_seed)
    elif variant.family == "bc":
        pairs = build_condition_pairs(ds.task_specific, variant.use_explicit)
        db = _database(cfg, ws) if variant.use_explicit else None
        policy = train_bc(pairs, cfg.bc_config(seed), db, variant.use_forward)
        report = evaluate(policy, None, env_factory, cfg.eval_episodes, eval_seed)
        save_checkpoint(rd / "policy.ckpt", {"params": policy.params},
                        {"kind": "bc_policy", "spec": policy.spec.to_dict(), "config_hash": h})
    else:  # replay
        report = evaluate(ReplayPolicy(ds.task_specific), None, env_factory, cfg.eval_episodes, eval_seed)
    report.config_hash = h
    report.to_csv(csv_path)
    (rd / "run.json").write_text(json.dumps({"config_hash": h, "variant": variant.name, "seed": seed,
                                             "complete": True, **extra}, indent=1) + "\n", encoding="utf-8")
    return RunResult(variant.name, seed, rd, report)


def _report_from_rows(rows: list[dict], h: str) -> EvalReport:
    """Summary-only report rebuilt from a CSV (per-episode values are not stored)."""
    out = EvalReport(config_hash=h)
    for r in rows:
        mean, std = float(r["mean_return"]), float(r["std_return"])
        # two pseudo-episodes at mean -/+ std reproduce both statistics exactly
        out.rows.append(EvalRow(int(r["step"]), (mean - std, mean + std), (float(r["mean_length"]),) * 2,
                                (float(r["subtasks_completed"]),) * 2))
    return out


def _job(args):
    raw, root, resume, fresh, variant, seed = args
    ws = Workspace(Path(root), resume=resume)
    ws.fresh.update(fresh)
    return run_variant(ExperimentConfig(raw), ws, variant, seed)


def run_many(cfg: ExperimentConfig, ws: Workspace, variants: Sequence[str], seeds: Sequence[int],
             jobs: int = 1) -> list[RunResult]:
    vs = [get_variant(v) for v in variants]
    prepare_shared(cfg, ws, vs)
    todo = [(v.name, s) for v in vs for s in seeds]
    if jobs <= 1:
        return [run_variant(cfg, ws, v, s) for v, s in todo]
    # workers reuse the shared stages that prepare_shared just finished
    args = [(cfg.raw, str(ws.root), ws.resume, set(ws.fresh), v, s) for v, s in todo]
    with ProcessPoolExecutor(jobs) as pool:
        return list(pool.map(_job, args))


def summarize(results: Sequence[RunResult]) -> list[dict]:
    by_variant: dict[str, list[RunResult]] = {}
    for r in results:
        by_variant.setdefault(r.variant, []).append(r)
    rows = []
    for name, rs in by_variant.items():
        finals = np.array([r.report.final.mean_return for r in rs])
        subs = np.array([r.report.final.mean_subtasks for r in rs])
        rows.append({
            "variant": name,
            "n_seeds": len(rs),
            "mean_return": float(finals.mean()),
            "std_return": float(finals.std()),
            "mean_subtasks": float(subs.mean()),
            "std_subtasks": float(subs.std()),
            "config_hash": canonical_hash(sorted(r.report.config_hash for r in rs)),
        })
    return rows


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def collect_curves(dirs: Sequence) -> list[dict]:
    """Long-form (variant, seed, step, return) rows from run directories.

    Each entry may be a run directory or any parent of run directories.
    Entries without an ``eval.csv`` are skipped with a warning.
    """
    rows = []
    for d in dirs:
        d = Path(d)
        found = [d / "eval.csv"] if (d / "eval.csv").exists() else sorted(d.rglob("eval.csv")) if d.is_dir() else []
        if not found:
            log.warning("no evaluation report under %s; skipped", d)
            continue
        for csv_path in found:
            info_path = csv_path.parent / "run.json"
            if not info_path.exists():
                log.warning("%s has no run.json; skipped", csv_path.parent)
                continue
            info = json.loads(info_path.read_text(encoding="utf-8"))
            for r in read_report_csv(csv_path):
                rows.append({"variant": info["variant"], "seed": int(info["seed"]), "step": int(r["step"]),
                             "return": float(r["mean_return"])})
    return rows
