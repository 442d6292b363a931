"""Deterministic evaluation rollouts, report rows and their CSV form."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from ceip.rl.prior import PriorBundle, prior_step

CSV_COLUMNS = ("step", "mean_return", "std_return", "mean_length", "subtasks_completed", "config_hash")


class EvalRow(NamedTuple):
    step: int
    returns: tuple[float, ...]
    lengths: tuple[int, ...]
    subtasks: tuple[int, ...]

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std_return(self) -> float:
        return float(np.std(self.returns))

    @property
    def mean_length(self) -> float:
        return float(np.mean(self.lengths))

    @property
    def mean_subtasks(self) -> float:
        return float(np.mean(self.subtasks))


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    config_hash: str = ""
    coefficient_trace: list = field(default_factory=list)

    @property
    def final(self) -> EvalRow:
        return self.rows[-1]

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.step, repr(r.mean_return), repr(r.std_return), repr(r.mean_length),
                            repr(r.mean_subtasks), self.config_hash])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(CSV_COLUMNS) - set(rows[0]):
        raise ValueError(f"{path} is missing columns {sorted(set(CSV_COLUMNS) - set(rows[0]))}")
    return rows


def _episode_seeds(seed: int, n: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(2**31, size=n)


def evaluate(policy, bundle: PriorBundle | None, env_factory: Callable[[], object], n_episodes: int,
             seed: int) -> EvalReport:
    """Roll out ``n_episodes`` episodes and return a one-row report.

    With a bundle the policy's output is a latent passed through
    :func:`prior_step`; ``policy`` is either a latent Gaussian policy (its
    deterministic mean is used) or any object with ``act(state)``. Without a
    bundle ``policy.act`` emits env actions directly. An optional
    ``policy.reset_episode(env)`` runs after every env reset.
    """
    returns, lengths, subtasks = [], [], []
    act = policy.mean_z if hasattr(policy, "mean_z") else policy.act
    for ep_seed in _episode_seeds(seed, n_episodes):
        env = env_factory()
        s = env.reset(int(ep_seed))
        if bundle is not None:
            bundle.reset_episode()
        if hasattr(policy, "reset_episode"):
            policy.reset_episode(env)
        total, done, steps = 0.0, False, 0
        while not done:
            out = act(s)
            a = prior_step(bundle, s, out) if bundle is not None else out
            s, r, done = env.step(a)
            total += r
            steps += 1
        returns.append(total)
        lengths.append(steps)
        subtasks.append(int(env.subtasks_completed))
    return EvalReport([EvalRow(0, tuple(returns), tuple(lengths), tuple(subtasks))])


class ScriptedPolicy:
    """Adapter that builds a fresh scripted expert from each reset env."""

    def __init__(self, make_expert: Callable[[object], object]):
        self.make_expert = make_expert
        self.expert = None

    def reset_episode(self, env) -> None:
        self.expert = self.make_expert(env)

    def act(self, s) -> np.ndarray:
        return self.expert.act(s)


class ReplayPolicy:
    """Replays task-specific demonstration actions open-loop, cycling through
    the trajectories one per episode; zeros once a trajectory runs out."""

    def __init__(self, trajectories: Sequence):
        if not trajectories:
            raise ValueError("replay needs at least one trajectory")
        self.actions = [np.asarray(t.actions) for t in trajectories]
        self.episode = -1
        self.t = 0

    def reset_episode(self, env=None) -> None:
        self.episode += 1
        self.t = 0

    def act(self, s) -> np.ndarray:
        acts = self.actions[self.episode % len(self.actions)]
        a = acts[self.t] if self.t < len(acts) else np.zeros(acts.shape[1])
        self.t += 1
        return a
