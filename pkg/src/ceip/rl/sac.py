"""Soft actor-critic over the bounded latent space [-3, 3]^q.

Twin critics with Polyak-averaged targets and automatic entropy tuning. The
replay buffer stores latent actions; the prior maps them to env actions.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from ceip.autodiff import Tensor, concat
from ceip.numerics import (
    AdamState,
    MlpSpec,
    NumericError,
    adam_step,
    init_params,
    mlp_apply,
    mlp_forward,
)
from ceip.rl.evaluate import EvalReport, evaluate
from ceip.rl.prior import Z_BOUND, PriorBundle, prior_step

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_LOG2 = float(np.log(2.0))
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class SacConfig:
    total_steps: int = 30_000
    batch_size: int = 256
    warmup_random_steps: int = 1000
    replay_capacity: int = 100_000
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    hidden_widths: tuple[int, ...] = (64, 64)
    entropy_mode: str = "auto"  # "auto" or "fixed"
    init_alpha: float = 1.0
    eval_interval: int = 5000
    eval_episodes: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(h) for h in self.hidden_widths))
        if self.warmup_random_steps >= self.total_steps:
            raise ValueError("warmup_random_steps must be < total_steps")
        if self.eval_interval < 1 or self.batch_size < 1:
            raise ValueError("eval_interval and batch_size must be positive")
        if self.entropy_mode not in ("auto", "fixed"):
            raise ValueError(f"unknown entropy_mode {self.entropy_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d


class LatentGaussianPolicy:
    """Gaussian actor squashed by ``3 * tanh`` into the latent box."""

    def __init__(self, spec: MlpSpec, params: np.ndarray, z_bound: float = Z_BOUND):
        if spec.output_dim % 2:
            raise ValueError("actor output must hold mean and log-std")
        self.spec = spec
        self.params = params
        self.z_bound = float(z_bound)

    @classmethod
    def create(cls, state_dim: int, latent_dim: int, hidden_widths, rng) -> LatentGaussianPolicy:
        spec = MlpSpec(state_dim, tuple(hidden_widths), 2 * latent_dim)
        return cls(spec, init_params(spec, rng))

    @property
    def latent_dim(self) -> int:
        return self.spec.output_dim // 2

    def heads(self, s) -> tuple[np.ndarray, np.ndarray]:
        out = mlp_forward(self.spec, self.params, np.atleast_2d(s))
        q = self.latent_dim
        return out[:, :q], np.clip(out[:, q:], LOG_STD_MIN, LOG_STD_MAX)

    def mean_z(self, s) -> np.ndarray:
        mean, _ = self.heads(s)
        z = self.z_bound * np.tanh(mean)
        return z[0] if np.ndim(s) == 1 else z

    def sample(self, s, rng: np.random.Generator) -> np.ndarray:
        z, _ = self.sample_with_logp(np.atleast_2d(s), rng.standard_normal((np.atleast_2d(s).shape[0], self.latent_dim)))
        return z[0] if np.ndim(s) == 1 else z

    def sample_with_logp(self, s, eps) -> tuple[np.ndarray, np.ndarray]:
        mean, log_std = self.heads(s)
        u = mean + np.exp(log_std) * eps
        logp = (-0.5 * eps**2 - 0.5 * _LOG_2PI - log_std).sum(axis=1)
        logp -= (2.0 * (_LOG2 - u - np.logaddexp(0.0, -2.0 * u)) + np.log(self.z_bound)).sum(axis=1)
        return self.z_bound * np.tanh(u), logp

    def rsample(self, p: Tensor, s, eps) -> tuple[Tensor, Tensor]:
        """Reparameterized sample and log-density, differentiable in ``p``."""
        out, _ = mlp_apply(self.spec, p, s)
        q = self.latent_dim
        mean = out[:, :q]
        log_std = out[:, q:].clip(LOG_STD_MIN, LOG_STD_MAX)
        u = mean + log_std.exp() * eps
        logp = (log_std * -1.0 - 0.5 * _LOG_2PI - 0.5 * eps**2).sum(axis=1)
        log_det = (_LOG2 - u - (u * -2.0).softplus()) * 2.0 + float(np.log(self.z_bound))
        return u.tanh() * self.z_bound, logp - log_det.sum(axis=1)


class ReplayBuffer:
    def __init__(self, capacity: int, state_dim: int, latent_dim: int):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.z = np.zeros((capacity, latent_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, z, r, s2, done) -> None:
        i = self._next
        self.s[i], self.z[i], self.r[i], self.s2[i], self.done[i] = s, z, r, s2, float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=n)
        return self.s[idx], self.z[idx], self.r[idx], self.s2[idx], self.done[idx]


def _critic_loss(spec, p: Tensor, x: np.ndarray, y: np.ndarray) -> Tensor:
    pred, _ = mlp_apply(spec, p, x)
    return (pred.reshape(-1) - y).square().mean() * 0.5


class SacAgent:
    def __init__(self, state_dim: int, latent_dim: int, cfg: SacConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.policy = LatentGaussianPolicy.create(state_dim, latent_dim, cfg.hidden_widths, rng)
        self.q_spec = MlpSpec(state_dim + latent_dim, cfg.hidden_widths, 1)
        self.q = [init_params(self.q_spec, rng) for _ in range(2)]
        self.q_target = [p.copy() for p in self.q]
        self.log_alpha = np.array([np.log(cfg.init_alpha)])
        self.target_entropy = -float(latent_dim)
        self.opt_actor = AdamState.zeros(self.policy.params.size, lr=cfg.lr)
        self.opt_q = [AdamState.zeros(p.size, lr=cfg.lr) for p in self.q]
        self.opt_alpha = AdamState.zeros(1, lr=cfg.lr)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def update(self, batch, rng: np.random.Generator) -> dict:
        cfg = self.cfg
        s, z, r, s2, done = batch
        n, q = z.shape

        # actor and temperature
        eps = rng.standard_normal((n, q))
        p = Tensor(self.policy.params, requires_grad=True)
        z_pi, logp = self.policy.rsample(p, s, eps)
        x_pi = concat([Tensor(s), z_pi], axis=1)
        q1, _ = mlp_apply(self.q_spec, Tensor(self.q[0]), x_pi)
        q2, _ = mlp_apply(self.q_spec, Tensor(self.q[1]), x_pi)
        first = (q1.data <= q2.data).astype(np.float64)
        q_min = q1 * first + q2 * (1.0 - first)
        alpha = self.alpha
        actor_loss = (logp * alpha - q_min.reshape(-1)).mean()
        if cfg.entropy_mode == "auto":
            g_alpha = np.array([-np.mean(logp.data + self.target_entropy)])
            self.log_alpha, self.opt_alpha = adam_step(self.opt_alpha, self.log_alpha, g_alpha)

        # critics
        z2, logp2 = self.policy.sample_with_logp(s2, rng.standard_normal((n, q)))
        x2 = np.concatenate([s2, z2], axis=1)
        q_next = np.minimum(mlp_forward(self.q_spec, self.q_target[0], x2),
                            mlp_forward(self.q_spec, self.q_target[1], x2))[:, 0]
        y = r + cfg.gamma * (1.0 - done) * (q_next - alpha * logp2)
        x = np.concatenate([s, z], axis=1)
        critic_losses = []
        for i in range(2):
            pq = Tensor(self.q[i], requires_grad=True)
            loss = _critic_loss(self.q_spec, pq, x, y)
            loss.backward()
            self.q[i], self.opt_q[i] = adam_step(self.opt_q[i], self.q[i], pq.grad)
            critic_losses.append(float(loss.data))

        actor_loss.backward()
        self.policy.params, self.opt_actor = adam_step(self.opt_actor, self.policy.params, p.grad)

        for i in range(2):
            self.q_target[i] = (1.0 - cfg.tau) * self.q_target[i] + cfg.tau * self.q[i]
        stats = {"actor_loss": float(actor_loss.data), "critic_loss": float(np.sum(critic_losses)), "alpha": alpha}
        if not all(np.isfinite(v) for v in stats.values()):
            raise NumericError(f"non-finite SAC loss: {stats}")
        return stats


def train_sac(env_factory: Callable[[], object], bundle: PriorBundle, cfg: SacConfig,
              config_hash: str = "", on_eval: Callable[[EvalReport], None] | None = None):
    """Train a latent policy through ``bundle``; returns ``(policy, report)``.

    The report has one row per ``eval_interval`` env steps, each the
    deterministic-policy return over ``eval_episodes`` fixed-seed episodes.
    On a numeric failure the partial report is attached to the raised
    :class:`NumericError` as ``checkpoint``.
    """
    rng = np.random.default_rng(cfg.seed)
    env = env_factory()
    if env.state_dim != bundle.state_dim:
        raise ValueError(f"env state_dim {env.state_dim} != prior state_dim {bundle.state_dim}")
    agent = SacAgent(env.state_dim, bundle.action_dim, cfg, rng)
    buf = ReplayBuffer(min(cfg.replay_capacity, cfg.total_steps), env.state_dim, bundle.action_dim)
    report = EvalReport(config_hash=config_hash)
    eval_seed = int(np.random.default_rng([cfg.seed, 7]).integers(2**31))

    s = env.reset(int(rng.integers(2**31)))
    bundle.reset_episode()
    try:
        for t in range(1, cfg.total_steps + 1):
            if t <= cfg.warmup_random_steps:
                z = rng.uniform(-Z_BOUND, Z_BOUND, bundle.action_dim)
            else:
                z = agent.policy.sample(s, rng)
            a = prior_step(bundle, s, z)
            s2, r, done = env.step(a)
            buf.add(s, z, r, s2, env.terminal)
            s = s2
            if done:
                s = env.reset(int(rng.integers(2**31)))
                bundle.reset_episode()
            if t > cfg.warmup_random_steps:
                agent.update(buf.sample(cfg.batch_size, rng), rng)
            if t % cfg.eval_interval == 0:
                row = evaluate(agent.policy, bundle.fork(), env_factory, cfg.eval_episodes, eval_seed).rows[0]
                report.rows.append(row._replace(step=t))
                log.info("step %d: return %.3f +- %.3f", t, row.mean_return, row.std_return)
                if on_eval is not None:
                    on_eval(report)
    except NumericError as e:
        raise NumericError(str(e), checkpoint=report) from e
    return agent.policy, report
