"""Desk-scale environments, scripted experts and demonstration generation.

``PointReachEnv`` is a kinematic 3-D reach task with a hidden goal and sparse
-1/0 reward. ``WaypointChainEnv`` is a 2-D task where a fixed sequence of
waypoints must be reached in order for +1 each.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ceip.data import DemoDataset, GENERATOR_VERSION, Trajectory


class EnvUsageError(RuntimeError):
    pass


# point reach -------------------------------------------------------------------

@dataclass(frozen=True)
class PointReachConfig:
    direction: float = 4.5
    goal_distance: float = 0.3
    goal_noise: float = 0.015
    horizon: int = 40
    step_scale: float = 0.033
    success_radius: float = 0.05
    warmup_min: int = 5
    warmup_max: int = 20
    # displacement per warmup step per unit action; smaller than step_scale so
    # the randomized start stays within reach of the goal in ~10 steps
    warmup_step_scale: float = 0.005
    state_dim: int = 10
    action_dim: int = 4

    def goal_center(self) -> np.ndarray:
        theta = np.pi * self.direction / 4.0
        return np.array([self.goal_distance * np.cos(theta), self.goal_distance * np.sin(theta), 0.0])


class PointReachEnv:
    """State: position(3), last displacement(3), gripper(1, always 0), zero padding."""

    name = "point_reach"

    def __init__(self, config: PointReachConfig | None = None):
        self.config = config or PointReachConfig()
        self.state_dim = self.config.state_dim
        self.action_dim = self.config.action_dim
        self.action_low, self.action_high = -1.0, 1.0
        self.goal = self.config.goal_center()
        self.pos = np.zeros(3)
        self.vel = np.zeros(3)
        self.step_count = 0
        self.warmup_steps = 0
        self.done = True
        self.terminal = False

    def _obs(self) -> np.ndarray:
        s = np.zeros(self.state_dim)
        s[0:3] = self.pos
        s[3:6] = self.vel
        return s

    def reset(self, seed: int | None = None) -> np.ndarray:
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.goal = cfg.goal_center() + rng.uniform(-cfg.goal_noise, cfg.goal_noise, size=3)
        self.pos = np.zeros(3)
        self.vel = np.zeros(3)
        warm = np.clip(rng.standard_normal(self.action_dim), -1.0, 1.0)
        self.warmup_steps = int(rng.integers(cfg.warmup_min, cfg.warmup_max + 1))
        for _ in range(self.warmup_steps):
            delta = cfg.warmup_step_scale * warm[:3]
            self.pos = self.pos + delta
            self.vel = delta
        self.step_count = 0
        self.done = False
        self.terminal = False
        return self._obs()

    def distance_to_goal(self) -> float:
        return float(np.linalg.norm(self.pos - self.goal))

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EnvUsageError("step() called on a finished episode; call reset()")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        delta = self.config.step_scale * a[:3]
        self.pos = self.pos + delta
        self.vel = delta
        self.step_count += 1
        reward = 0.0 if self.distance_to_goal() < self.config.success_radius else -1.0
        self.done = self.step_count >= self.config.horizon
        return self._obs(), reward, self.done

    @property
    def subtasks_completed(self) -> int:
        return 0


@dataclass
class ReachExpert:
    """Straight-line proportional controller toward a known goal."""

    goal: np.ndarray
    step_scale: float = 0.033
    noise: float = 0.1
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def reset(self) -> None:
        pass

    def mean_action(self, state) -> np.ndarray:
        v = (np.asarray(self.goal) - np.asarray(state)[:3]) / self.step_scale
        peak = np.abs(v).max()
        if peak > 1.0:
            v = v / peak
        return np.concatenate([v, [0.0]])

    def act(self, state) -> np.ndarray:
        a = self.mean_action(state)
        if self.noise > 0:
            a = a + self.noise * self.rng.standard_normal(a.shape)
        return np.clip(a, -1.0, 1.0)


def straight_line_return(env: PointReachEnv) -> float:
    """Return of the noiseless expert from the env's current state (mutates a copy only)."""
    e = copy.deepcopy(env)
    expert = ReachExpert(e.goal, e.config.step_scale, noise=0.0)
    total = 0.0
    s = e._obs()
    done = False
    while not done:
        s, r, done = e.step(expert.act(s))
        total += r
    return total


# waypoint chain ----------------------------------------------------------------

DEFAULT_LOCATIONS = ((1.0, 0.0), (0.5, 0.85), (-0.5, 0.85), (-1.0, 0.0), (-0.5, -0.85), (0.5, -0.85))


@dataclass(frozen=True)
class WaypointChainConfig:
    locations: tuple[tuple[float, float], ...] = DEFAULT_LOCATIONS
    sequence: tuple[int, ...] = (0, 2, 4)
    capture_radius: float = 0.1
    step_scale: float = 0.1
    horizon: int = 80
    # multiplicative actuation noise: executed = a * (1 + noise * eps)
    action_noise: float = 0.1
    # optional per-location actuation zones: within zone_radius of location i
    # the executed action is rotated by zone_rotation[i] radians
    zone_rotation: tuple[float, ...] | None = None
    zone_radius: float = 0.3
    # action components with magnitude below the deadzone produce no motion
    deadzone: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "locations", tuple(tuple(map(float, p)) for p in self.locations))
        object.__setattr__(self, "sequence", tuple(int(i) for i in self.sequence))
        if any(i < 0 or i >= len(self.locations) for i in self.sequence):
            raise ValueError("sequence refers to an unknown location")
        if self.zone_rotation is not None:
            object.__setattr__(self, "zone_rotation", tuple(float(r) for r in self.zone_rotation))
            if len(self.zone_rotation) != len(self.locations):
                raise ValueError("zone_rotation needs one angle per location")

    def locations_array(self) -> np.ndarray:
        return np.array(self.locations, dtype=np.float64).reshape(-1, 2)

    @property
    def n_locations(self) -> int:
        return len(self.locations)

    @property
    def state_dim(self) -> int:
        return 2 + 3 * self.n_locations

    def zone_angle(self, pos) -> float:
        """Actuation rotation at ``pos`` (0 outside every zone; nearest zone wins)."""
        if self.zone_rotation is None:
            return 0.0
        dist = np.linalg.norm(np.asarray(self.locations) - np.asarray(pos)[:2], axis=1)
        i = int(np.argmin(dist))
        return self.zone_rotation[i] if dist[i] < self.zone_radius else 0.0


def _rotate(v: np.ndarray, angle: float) -> np.ndarray:
    if angle == 0.0:
        return v
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


class WaypointChainEnv:
    """State: position(2), per-location visited flags, location coordinates.

    Reward +1 when the agent comes within ``capture_radius`` of the next
    waypoint of ``sequence``; other locations only get their visited flag set.
    """

    name = "waypoint_chain"

    def __init__(self, config: WaypointChainConfig | None = None):
        self.config = config or WaypointChainConfig()
        self.locations = np.array(self.config.locations, dtype=np.float64)
        self.state_dim = self.config.state_dim
        self.action_dim = 2
        self.action_low, self.action_high = -1.0, 1.0
        self.pos = np.zeros(2)
        self.flags = np.zeros(self.config.n_locations)
        self.progress = 0
        self.step_count = 0
        self.done = True
        self.terminal = False
        self.rng = np.random.default_rng(0)

    @property
    def n_subtasks(self) -> int:
        return len(self.config.sequence)

    @property
    def subtasks_completed(self) -> int:
        return self.progress

    def _obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.flags, self.locations.ravel()])

    def reset(self, seed: int | None = None) -> np.ndarray:
        self.rng = np.random.default_rng(seed)
        self.pos = np.zeros(2)
        self.flags = np.zeros(self.config.n_locations)
        self.progress = 0
        self.step_count = 0
        self.done = False
        self.terminal = False
        return self._obs()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EnvUsageError("step() called on a finished episode; call reset()")
        cfg = self.config
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        if cfg.deadzone > 0:
            a = np.where(np.abs(a) < cfg.deadzone, 0.0, a)
        if cfg.action_noise > 0:
            a = a * (1.0 + cfg.action_noise * self.rng.standard_normal(2))
        a = _rotate(a, cfg.zone_angle(self.pos))
        self.pos = self.pos + cfg.step_scale * a
        self.step_count += 1
        dist = np.linalg.norm(self.locations - self.pos, axis=1)
        self.flags[dist < cfg.capture_radius] = 1.0
        reward = 0.0
        if self.progress < self.n_subtasks and dist[cfg.sequence[self.progress]] < cfg.capture_radius:
            self.progress += 1
            reward = 1.0
        self.terminal = self.progress == self.n_subtasks
        self.done = self.terminal or self.step_count >= cfg.horizon
        return self._obs(), reward, self.done


@dataclass
class WaypointExpert:
    """Proportional controller visiting ``sequence`` in order, optionally pausing
    ``dwell`` steps after each capture. Pauses emit zero-mean noise of scale
    ``dwell_noise``, which stays inside the env deadzone when that is larger."""

    locations: np.ndarray
    sequence: tuple[int, ...]
    step_scale: float = 0.1
    capture_radius: float = 0.1
    noise: float = 0.1
    dwell: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    zones: WaypointChainConfig | None = None
    dwell_noise: float = 0.0

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=np.float64)
        self.reset()

    def reset(self) -> None:
        self.index = 0
        self.dwell_left = 0

    def mean_action(self, state) -> np.ndarray:
        pos = np.asarray(state)[:2]
        if self.index < len(self.sequence):
            target = self.locations[self.sequence[self.index]]
            if np.linalg.norm(target - pos) < self.capture_radius:
                self.index += 1
                self.dwell_left = self.dwell
        if self.dwell_left > 0 or self.index >= len(self.sequence):
            return np.zeros(2)
        target = self.locations[self.sequence[self.index]]
        v = (target - pos) / self.step_scale
        if self.zones is not None:
            v = _rotate(v, -self.zones.zone_angle(pos))
        peak = np.abs(v).max()
        return v / peak if peak > 1.0 else v

    def act(self, state) -> np.ndarray:
        a = self.mean_action(state)
        idle = self.dwell_left > 0 or self.index >= len(self.sequence)
        if self.dwell_left > 0:
            self.dwell_left -= 1
        if idle:
            if self.dwell_noise > 0:
                a = a + self.dwell_noise * self.rng.standard_normal(2)
            return np.clip(a, -1.0, 1.0)
        if self.noise > 0:
            a = a + self.noise * self.rng.standard_normal(2)
        return np.clip(a, -1.0, 1.0)


# generation --------------------------------------------------------------------

def rollout_expert(env, expert, seed: int, task: str | None = None) -> Trajectory:
    s = env.reset(seed)
    expert.reset()
    states, actions = [], []
    done = False
    while not done:
        a = expert.act(s)
        states.append(s)
        actions.append(a)
        s, _, done = env.step(a)
    if env.terminal:
        # keep the state that completed the task: it is the most informative
        # last state for clustering and the successor of the final transition
        states.append(s)
        actions.append(expert.act(s))
    return Trajectory(np.array(states), np.array(actions), task)


def generate_dataset(make_env: Callable[[], object], make_expert: Callable[[object, np.random.Generator], object],
                     n_traj: int, seed: int, task: str | None = None) -> DemoDataset:
    """Roll out an expert ``n_traj`` times; the result has a single cluster."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    rng = np.random.default_rng(seed)
    trajs = []
    for _ in range(n_traj):
        env = make_env()
        ep_seed = int(rng.integers(2**31))
        env.reset(ep_seed)
        expert = make_expert(env, np.random.default_rng(int(rng.integers(2**31))))
        trajs.append(rollout_expert(env, expert, ep_seed, task))
    return DemoDataset([trajs], [], {"seed": seed, "generator_version": GENERATOR_VERSION})


def point_reach_tasks(ta_directions: Sequence[float] = tuple(range(8)), ts_direction: float = 4.5,
                      n_ta: int = 40, n_ts: int = 4, seed: int = 0, expert_noise: float = 0.1,
                      base: PointReachConfig | None = None) -> DemoDataset:
    """Task-agnostic data per direction plus a task-specific set for ``ts_direction``."""
    base = base or PointReachConfig()

    def dataset_for(direction, n, s):
        cfg = replace(base, direction=float(direction))
        return generate_dataset(
            lambda: PointReachEnv(cfg),
            lambda env, rng: ReachExpert(env.goal, cfg.step_scale, expert_noise, rng),
            n, s, task=f"direction_{direction:g}").clusters[0]

    clusters = [dataset_for(d, n_ta, seed * 1000 + i) for i, d in enumerate(ta_directions)]
    ts = dataset_for(ts_direction, n_ts, seed * 1000 + 999)
    meta = {"env": "point_reach", "seed": seed, "generator_version": GENERATOR_VERSION,
            "ta_directions": [float(d) for d in ta_directions], "ts_direction": float(ts_direction)}
    return DemoDataset(clusters, ts, meta)


def waypoint_tasks(config: WaypointChainConfig | None = None, n_ta: int = 120, n_ts: int = 4,
                   ta_length: int | None = None, exclude: Sequence[int] = (), dwell: int = 0,
                   expert_noise: float = 0.1, seed: int = 0, dwell_noise: float = 0.01) -> DemoDataset:
    """Random task-agnostic chains over the location pool (minus ``exclude``) and
    task-specific demos of ``config.sequence``. Task-agnostic data form one cluster."""
    config = config or WaypointChainConfig()
    rng = np.random.default_rng(seed)
    pool = [i for i in range(config.n_locations) if i not in set(exclude)]
    length = ta_length or len(config.sequence)
    if length > len(pool):
        raise ValueError("task-agnostic chain longer than the available pool")

    def demos(seq, n, s):
        cfg = replace(config, sequence=tuple(seq))
        return generate_dataset(
            lambda: WaypointChainEnv(cfg),
            lambda env, r: WaypointExpert(env.locations, cfg.sequence, cfg.step_scale, cfg.capture_radius,
                                          expert_noise, dwell, r, cfg, dwell_noise),
            n, s, task="-".join(map(str, seq))).clusters[0]

    avoid = config.locations_array()[list(exclude)]
    avoid_radius = max(config.capture_radius, config.zone_radius if config.zone_rotation else 0.0)
    ta = []
    attempts = 0
    while len(ta) < n_ta:
        attempts += 1
        if attempts > 100 * n_ta:
            raise RuntimeError("could not generate task-agnostic demos avoiding the excluded locations")
        seq = rng.choice(pool, size=length, replace=False)
        (traj,) = demos(seq, 1, int(rng.integers(2**31)))
        # a path may graze an excluded location (or its zone) on its way; such demos are dropped
        if len(avoid) and (np.linalg.norm(traj.states[:, None, :2] - avoid[None], axis=2) < avoid_radius).any():
            continue
        ta.append(traj)
    ts = demos(config.sequence, n_ts, int(rng.integers(2**31)))
    meta = {"env": "waypoint_chain", "seed": seed, "generator_version": GENERATOR_VERSION,
            "exclude": list(map(int, exclude)), "dwell": dwell}
    return DemoDataset([ta], ts, meta)

