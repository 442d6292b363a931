"""Demonstration storage, the JSON-lines dataset format, splitting and k-means."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

GENERATOR_VERSION = "1"


class DatasetError(ValueError):
    pass


class DatasetParseError(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(DatasetError):
    pass


class InsufficientDataError(ValueError):
    pass


class ClusteringConfigError(ValueError):
    pass


@dataclass
class Trajectory:
    states: np.ndarray   # (T, ds)
    actions: np.ndarray  # (T, q)
    task: str | None = None

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        if len(self.states) != len(self.actions):
            raise SchemaError(f"trajectory has {len(self.states)} states but {len(self.actions)} actions")
        if not (np.isfinite(self.states).all() and np.isfinite(self.actions).all()):
            raise SchemaError("trajectory contains non-finite values")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def to_record(self) -> dict:
        return {"task": self.task, "states": self.states.tolist(), "actions": self.actions.tolist()}


@dataclass(frozen=True)
class TransitionTriple:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    traj_id: int
    step_index: int


@dataclass
class DemoDataset:
    clusters: list[list[Trajectory]]
    task_specific: list[Trajectory] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.clusters)

    def all_trajectories(self) -> list[Trajectory]:
        return [t for c in self.clusters for t in c] + list(self.task_specific)

    def task_agnostic(self) -> list[Trajectory]:
        return [t for c in self.clusters for t in c]


class Pairs(NamedTuple):
    """Condition/action training pairs stored as two aligned arrays."""

    u: np.ndarray
    a: np.ndarray

    def __len__(self) -> int:  # type: ignore[override]
        return len(self.u)

    def subset(self, idx) -> Pairs:
        return Pairs(self.u[idx], self.a[idx])


# serialization -------------------------------------------------------------

def validate_trajectories(trajs: Sequence[Trajectory], action_low: float = -1.0,
                          action_high: float = 1.0, names: Sequence[str] | None = None) -> None:
    if not trajs:
        return
    ds, q = trajs[0].state_dim, trajs[0].action_dim
    for i, t in enumerate(trajs):
        name = names[i] if names else f"trajectory {i}"
        if t.state_dim != ds or t.action_dim != q:
            raise SchemaError(f"{name}: dims ({t.state_dim}, {t.action_dim}) differ from ({ds}, {q})")
        if (t.actions < action_low).any() or (t.actions > action_high).any():
            raise SchemaError(f"{name}: action outside [{action_low}, {action_high}]")


def save_trajectories(path, trajs: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajs:
            fh.write(json.dumps(t.to_record()))
            fh.write("\n")


def load_trajectories(path) -> list[Trajectory]:
    trajs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                states, actions = rec["states"], rec["actions"]
                task = rec.get("task")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetParseError(f"malformed record ({exc})", lineno) from exc
            try:
                t = Trajectory(np.array(states, dtype=np.float64), np.array(actions, dtype=np.float64), task)
            except (ValueError, TypeError) as exc:
                raise SchemaError(f"{path} line {lineno}: {exc}") from exc
            trajs.append(t)
    validate_trajectories(trajs, names=[f"{path} line {i + 1}" for i in range(len(trajs))])
    return trajs


def save_dataset(directory, dataset: DemoDataset, cluster_names: Sequence[str] | None = None) -> Path:
    """Write one JSONL file per cluster plus ``task_specific.jsonl`` and ``metadata.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = list(cluster_names) if cluster_names else [f"cluster_{i}" for i in range(dataset.n)]
    files = []
    for name, trajs in zip(names, dataset.clusters):
        fname = f"{name}.jsonl"
        save_trajectories(directory / fname, trajs)
        files.append(fname)
    ts_file = None
    if dataset.task_specific:
        ts_file = "task_specific.jsonl"
        save_trajectories(directory / ts_file, dataset.task_specific)
    trajs = dataset.all_trajectories()
    meta = dict(dataset.metadata)
    meta.update({
        "ds": trajs[0].state_dim if trajs else None,
        "q": trajs[0].action_dim if trajs else None,
        "generator_version": meta.get("generator_version", GENERATOR_VERSION),
        "task_agnostic": files,
        "task_specific": ts_file,
    })
    (directory / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return directory


def load_dataset(path) -> DemoDataset:
    """Load a dataset directory (with ``metadata.json``) or a single JSONL file.

    A single file becomes a dataset with one cluster and no task-specific part.
    """
    path = Path(path)
    if path.is_dir():
        meta = json.loads((path / "metadata.json").read_text(encoding="utf-8"))
        clusters = [load_trajectories(path / f) for f in meta.get("task_agnostic", [])]
        ts = load_trajectories(path / meta["task_specific"]) if meta.get("task_specific") else []
        ds = DemoDataset(clusters, ts, meta)
    else:
        sidecar = path.with_suffix(".meta.json")
        meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
        ds = DemoDataset([load_trajectories(path)], [], meta)
    trajs = ds.all_trajectories()
    validate_trajectories(trajs)
    for key, dim in (("ds", "state_dim"), ("q", "action_dim")):
        if trajs and ds.metadata.get(key) is not None and ds.metadata[key] != getattr(trajs[0], dim):
            raise SchemaError(f"metadata {key}={ds.metadata[key]} disagrees with data")
    return ds


# pairs and splits ----------------------------------------------------------

def build_condition_pairs(trajs: Sequence[Trajectory], with_explicit: bool) -> Pairs:
    """(u, a) pairs with u = s, or u = [s_t, s_{t+1}] when ``with_explicit``."""
    if not trajs:
        raise InsufficientDataError("no trajectories")
    us, acts = [], []
    for t in trajs:
        if with_explicit:
            if len(t) < 2:
                continue
            us.append(np.concatenate([t.states[:-1], t.states[1:]], axis=1))
            acts.append(t.actions[:-1])
        else:
            us.append(t.states)
            acts.append(t.actions)
    if not us:
        ds = trajs[0].state_dim * (2 if with_explicit else 1)
        return Pairs(np.zeros((0, ds)), np.zeros((0, trajs[0].action_dim)))
    return Pairs(np.concatenate(us), np.concatenate(acts))


def transitions(trajs: Sequence[Trajectory]) -> list[TransitionTriple]:
    out = []
    for tid, t in enumerate(trajs):
        for i in range(len(t) - 1):
            out.append(TransitionTriple(t.states[i], t.actions[i], t.states[i + 1], tid, i))
    return out


def split_train_val(pairs: Pairs, ratio: float, seed: int) -> tuple[Pairs, Pairs]:
    """Random split over individual pairs regardless of their trajectory."""
    n = len(pairs)
    if n < 2:
        raise InsufficientDataError(f"need at least 2 pairs to split, got {n}")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    n_train = int(np.floor(ratio * n + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return pairs.subset(np.sort(perm[:n_train])), pairs.subset(np.sort(perm[n_train:]))


# clustering ----------------------------------------------------------------

@dataclass
class ClusterAssignment:
    k: int
    centroids: np.ndarray
    labels: np.ndarray
    objective_history: list[float] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.objective_history[-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = _sq_dists(x, np.array(centroids)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centroids.append(x[idx])
    return np.array(centroids, dtype=np.float64)


def kmeans_cluster(features, k: int, seed: int = 0, max_iters: int = 100) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster gets its centroid moved to the point farthest from the
    centroid it is currently assigned to.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if k < 1 or k > len(x):
        raise ClusteringConfigError(f"k={k} must be in [1, {len(x)}]")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels = None
    history: list[float] = []
    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        own = d2[np.arange(len(x)), labels]
        taken: set[int] = set()
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                order = np.argsort(-own, kind="stable")
                pick = next(int(i) for i in order if int(i) not in taken)
                taken.add(pick)
                centroids[j] = x[pick]
    return ClusterAssignment(k, centroids, labels, history)


def cluster_trajectories(trajs: Sequence[Trajectory], k: int, seed: int = 0,
                         max_iters: int = 100) -> tuple[list[list[Trajectory]], ClusterAssignment]:
    """Group trajectories by k-means over their last states; empty groups are dropped."""
    feats = np.array([t.states[-1] for t in trajs])
    assign = kmeans_cluster(feats, k, seed, max_iters)
    groups = [[t for t, lab in zip(trajs, assign.labels) if lab == j] for j in range(k)]
    return [g for g in groups if g], assign
