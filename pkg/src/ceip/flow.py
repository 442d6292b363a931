"""Conditional one-layer affine flows ``a = exp(c(u)) * z + d(u)`` and their MLE training."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ceip.autodiff import Tensor
from ceip.data import InsufficientDataError, Pairs, split_train_val
from ceip.numerics import (
    AdamState,
    MlpSpec,
    NumericError,
    ShapeError,
    adam_step,
    clip_grad_norm,
    init_buffers,
    init_params,
    load_checkpoint,
    mlp_apply,
    mlp_forward,
    n_params,
    params_digest,
    save_checkpoint,
)

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
C_CLAMP = 10.0


@dataclass(frozen=True)
class AffineMap:
    """Elementwise affine map; works for a single vector or a batch (leading axis)."""

    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        if np.shape(self.scale) != np.shape(self.shift):
            raise ShapeError("scale and shift must have the same shape")
        if not (np.all(np.asarray(self.scale) > 0) and np.isfinite(self.scale).all()):
            raise ValueError("scale must be strictly positive and finite")
        if not np.isfinite(self.shift).all():
            raise ValueError("shift must be finite")


def affine_forward(m: AffineMap, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != m.scale.shape[-1]:
        raise ShapeError(f"latent dim {z.shape[-1]} != {m.scale.shape[-1]}")
    return m.scale * z + m.shift


def affine_inverse(m: AffineMap, a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != m.scale.shape[-1]:
        raise ShapeError(f"action dim {a.shape[-1]} != {m.scale.shape[-1]}")
    return (a - m.shift) / m.scale


def standard_normal_logpdf(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * (z * z).sum(axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def affine_log_likelihood(m: AffineMap, a) -> np.ndarray | float:
    """log p(a) under ``a = scale * z + shift`` with ``z ~ N(0, I)``."""
    z = affine_inverse(m, a)
    ll = standard_normal_logpdf(z) - np.log(m.scale).sum(axis=-1)
    return float(ll) if np.ndim(ll) == 0 else ll


@dataclass
class ConditionedAffineFlow:
    c_spec: MlpSpec
    c_params: np.ndarray
    d_spec: MlpSpec
    d_params: np.ndarray
    c_buffers: np.ndarray | None = None
    d_buffers: np.ndarray | None = None
    clamp: float = C_CLAMP

    def __post_init__(self):
        if self.c_spec.input_dim != self.d_spec.input_dim:
            raise ShapeError("c and d nets must share their input dim")
        if self.c_spec.output_dim != self.d_spec.output_dim:
            raise ShapeError("c and d nets must share their output dim")

    @property
    def condition_dim(self) -> int:
        return self.c_spec.input_dim

    @property
    def action_dim(self) -> int:
        return self.c_spec.output_dim

    def raw_c(self, u) -> np.ndarray:
        return mlp_forward(self.c_spec, self.c_params, u, self.c_buffers)

    def c(self, u) -> np.ndarray:
        return np.clip(self.raw_c(u), -self.clamp, self.clamp)

    def d(self, u) -> np.ndarray:
        return mlp_forward(self.d_spec, self.d_params, u, self.d_buffers)

    def digest(self) -> str:
        return params_digest(self.c_params, self.d_params, self.c_buffers, self.d_buffers)

    def copy(self) -> ConditionedAffineFlow:
        cp = lambda x: None if x is None else x.copy()  # noqa: E731
        return ConditionedAffineFlow(self.c_spec, self.c_params.copy(), self.d_spec, self.d_params.copy(),
                                     cp(self.c_buffers), cp(self.d_buffers), self.clamp)


def make_flow(condition_dim: int, action_dim: int, hidden_widths=(32,), batchnorm: bool = False,
              rng: np.random.Generator | None = None) -> ConditionedAffineFlow:
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = MlpSpec(condition_dim, tuple(hidden_widths), action_dim, batchnorm=batchnorm)
    return ConditionedAffineFlow(spec, init_params(spec, rng), spec, init_params(spec, rng),
                                 init_buffers(spec), init_buffers(spec))


def identity_flow(condition_dim: int, action_dim: int) -> ConditionedAffineFlow:
    """Flow with all-zero parameters: c = 0, d = 0, so it maps z to itself."""
    spec = MlpSpec(condition_dim, (1,), action_dim)
    return ConditionedAffineFlow(spec, np.zeros(n_params(spec)), spec, np.zeros(n_params(spec)))


def single_effective_affine(flow: ConditionedAffineFlow, u) -> AffineMap:
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != flow.condition_dim:
        raise ShapeError(f"condition dim {u.shape[-1]} != {flow.condition_dim}")
    return AffineMap(np.exp(flow.c(u)), flow.d(u))


def flow_nll(c_params: Tensor, d_params: Tensor, flow: ConditionedAffineFlow, u: np.ndarray,
             a: np.ndarray, training: bool = False):
    """Mean negative log-likelihood of a batch as a differentiable tensor.

    Returns ``(loss, c_buffers, d_buffers)``; buffers are updated in training mode.
    """
    c, cb = mlp_apply(flow.c_spec, c_params, u, flow.c_buffers, training)
    d, db = mlp_apply(flow.d_spec, d_params, u, flow.d_buffers, training)
    c = c.clip(-flow.clamp, flow.clamp)
    z = (a - d) / c.exp()
    ll = (z.square() * -0.5).sum(axis=1) - 0.5 * a.shape[1] * LOG_2PI - c.sum(axis=1)
    return -ll.mean(), cb, db


def flow_dataset_nll(flow: ConditionedAffineFlow, pairs: Pairs) -> float:
    """Mean NLL over a dataset in inference mode."""
    m = single_effective_affine(flow, pairs.u)
    return float(-np.mean(affine_log_likelihood(m, pairs.a)))


# training --------------------------------------------------------------------

@dataclass(frozen=True)
class FlowTrainConfig:
    epochs: int = 1000
    batch_size: int = 40
    lr: float = 1e-3
    clip_norm: float = 1e-4
    val_ratio: float = 0.2
    early_stop_min_batches: int = 1000
    early_stop_window_frac: float = 0.2
    seed: int = 0
    hidden_widths: tuple[int, ...] = (32,)
    batchnorm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(self.hidden_widths))
        if not 0.0 < self.val_ratio < 1.0:
            raise ValueError("val_ratio must be in (0, 1)")
        if min(self.epochs, self.batch_size, self.early_stop_min_batches) < 1:
            raise ValueError("counts must be >= 1")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("lr and clip_norm must be positive")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainLog:
    epoch_train_loss: list[float] = field(default_factory=list)
    epoch_val_loss: list[float] = field(default_factory=list)
    best_val_loss: float = float("inf")
    best_epoch: int = 0
    initial_val_loss: float = float("nan")
    batches_fed: int = 0
    stopped_early: bool = False


def fit_minibatch(
    params: np.ndarray,
    batch_loss: Callable[[Tensor, np.ndarray, bool], tuple[Tensor, object]],
    val_loss: Callable[[np.ndarray, object], float],
    n_train: int,
    cfg: FlowTrainConfig,
    rng: np.random.Generator,
    state=None,
) -> tuple[np.ndarray, object, TrainLog]:
    """Adam over shuffled minibatches with best-validation snapshotting.

    ``batch_loss(param_tensor, idx, state)`` returns ``(loss, new_state)`` where
    ``state`` carries non-trainable values such as BN running statistics.
    Validation runs at every epoch end; training stops early once more than
    ``early_stop_min_batches`` batches have been fed and the best validation
    loss is older than the trailing ``early_stop_window_frac`` of batches.
    """
    adam = AdamState.zeros(params.size, lr=cfg.lr)
    tlog = TrainLog()
    best = (params.copy(), state)
    tlog.initial_val_loss = tlog.best_val_loss = val_loss(params, state)
    best_batch = 0
    batches = 0
    bs = cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n_train)
        losses = []
        for lo in range(0, n_train, bs):
            idx = perm[lo:lo + bs]
            if len(idx) < 2 and lo > 0:
                continue
            p = Tensor(params, requires_grad=True)
            loss, new_state = batch_loss(p, idx, state)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite training loss at epoch {epoch}", checkpoint=best)
            loss.backward()
            g = clip_grad_norm(p.grad, cfg.clip_norm)
            params, adam = adam_step(adam, params, g)
            state = new_state
            losses.append(float(loss.data))
            batches += 1
        v = val_loss(params, state)
        if not np.isfinite(v):
            raise NumericError(f"non-finite validation loss at epoch {epoch}", checkpoint=best)
        tlog.epoch_train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        tlog.epoch_val_loss.append(v)
        if v < tlog.best_val_loss:
            tlog.best_val_loss, tlog.best_epoch = v, epoch
            best = (params.copy(), state)
            best_batch = batches
        if batches > cfg.early_stop_min_batches and best_batch < batches * (1.0 - cfg.early_stop_window_frac):
            tlog.stopped_early = True
            break
    tlog.batches_fed = batches
    return best[0], best[1], tlog


def train_single_flow(pairs: Pairs, cfg: FlowTrainConfig,
                      return_log: bool = False):
    """Fit a conditioned affine flow by maximum likelihood; returns the best-validation snapshot."""
    if len(pairs) < 2:
        raise InsufficientDataError("need at least 2 pairs to train a flow")
    rng = np.random.default_rng(cfg.seed)
    train, val = split_train_val(pairs, 1.0 - cfg.val_ratio, cfg.seed)
    flow = make_flow(pairs.u.shape[1], pairs.a.shape[1], cfg.hidden_widths, cfg.batchnorm, rng)
    nc = flow.c_params.size
    template = flow

    def unpack(params, state):
        cb, db = state if state is not None else (None, None)
        return ConditionedAffineFlow(template.c_spec, params[:nc], template.d_spec, params[nc:], cb, db,
                                     template.clamp)

    def batch_loss(p: Tensor, idx, state):
        f = unpack(p.data, state)
        loss, cb, db = flow_nll(p[:nc], p[nc:], f, train.u[idx], train.a[idx], training=True)
        return loss, (cb, db)

    def val_loss(params, state):
        return flow_dataset_nll(unpack(params, state), val)

    params0 = np.concatenate([flow.c_params, flow.d_params])
    params, state, tlog = fit_minibatch(params0, batch_loss, val_loss, len(train), cfg, rng,
                                        (flow.c_buffers, flow.d_buffers))
    trained = unpack(params, state).copy()
    log.info("flow trained: val nll %.4f (epoch %d, %d batches)", tlog.best_val_loss, tlog.best_epoch,
             tlog.batches_fed)
    return (trained, tlog) if return_log else trained


# checkpoints -----------------------------------------------------------------

def save_flow(path, flow: ConditionedAffineFlow, cfg: FlowTrainConfig | None = None, extra: dict | None = None):
    arrays = {"c_params": flow.c_params, "d_params": flow.d_params}
    if flow.c_buffers is not None:
        arrays["c_buffers"] = flow.c_buffers
        arrays["d_buffers"] = flow.d_buffers
    meta = {
        "kind": "flow",
        "c_spec": flow.c_spec.to_dict(),
        "d_spec": flow.d_spec.to_dict(),
        "condition_dim": flow.condition_dim,
        "q": flow.action_dim,
        "clamp": flow.clamp,
        "train_config_hash": cfg.digest() if cfg else None,
    }
    meta.update(extra or {})
    save_checkpoint(path, arrays, meta)


def load_flow(path) -> ConditionedAffineFlow:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "flow":
        raise ValueError(f"{path} is not a flow checkpoint")
    return ConditionedAffineFlow(MlpSpec.from_dict(meta["c_spec"]), arrays["c_params"],
                                 MlpSpec.from_dict(meta["d_spec"]), arrays["d_params"],
                                 arrays.get("c_buffers"), arrays.get("d_buffers"), meta["clamp"])
