"""Combination of frozen affine flows through a learned coefficient network.

For condition ``u`` the combined map has

    scale = sum_i mu_i(u) * exp(c_i(u)),   shift = sum_i lambda_i(u) * d_i(u)

with ``mu = softplus(raw_mu) + 1e-4`` and ``lambda`` unconstrained, both emitted
by one coefficient MLP.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ceip.autodiff import Tensor
from ceip.data import InsufficientDataError, Pairs, split_train_val
from ceip.flow import (
    LOG_2PI,
    AffineMap,
    ConditionedAffineFlow,
    FlowTrainConfig,
    TrainLog,
    affine_log_likelihood,
    fit_minibatch,
    load_flow,
)
from ceip.numerics import (
    MlpSpec,
    ShapeError,
    init_buffers,
    init_params,
    load_checkpoint,
    mlp_apply,
    mlp_forward,
    save_checkpoint,
)

log = logging.getLogger(__name__)

MU_OFFSET = 1e-4


class CombinationConfigError(ValueError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class CombinedFlow:
    base_flows: list[ConditionedAffineFlow]
    coeff_spec: MlpSpec | None = None
    coeff_params: np.ndarray | None = None
    coeff_buffers: np.ndarray | None = None
    mu_offset: float = MU_OFFSET
    injected: tuple[np.ndarray, np.ndarray] | None = None
    record_coefficients: bool = False
    coefficient_trace: list = field(default_factory=list)
    # largest |c_i(u)| seen before clamping, to check the clamp stays inactive
    peak_abs_c: float = 0.0

    def __post_init__(self):
        if not self.base_flows:
            raise CombinationConfigError("need at least one base flow")
        cd, q = self.base_flows[0].condition_dim, self.base_flows[0].action_dim
        for f in self.base_flows:
            if f.condition_dim != cd or f.action_dim != q:
                raise CombinationConfigError("base flows disagree on condition_dim or action_dim")
        if self.injected is None and self.coeff_spec is None:
            raise CombinationConfigError("need a coefficient net or injected coefficients")
        if self.coeff_spec is not None:
            if self.coeff_spec.output_dim != 2 * len(self.base_flows) or self.coeff_spec.input_dim != cd:
                raise CombinationConfigError("coefficient net dims do not match the base flows")

    @property
    def n_flows(self) -> int:
        return len(self.base_flows)

    @property
    def condition_dim(self) -> int:
        return self.base_flows[0].condition_dim

    @property
    def action_dim(self) -> int:
        return self.base_flows[0].action_dim

    def with_coefficients(self, mu, lam) -> CombinedFlow:
        """Same base flows with constant, externally supplied (mu, lambda)."""
        mu = np.asarray(mu, dtype=np.float64)
        lam = np.asarray(lam, dtype=np.float64)
        if mu.shape != (self.n_flows,) or lam.shape != (self.n_flows,):
            raise ShapeError(f"injected coefficients must have length {self.n_flows}")
        return CombinedFlow(self.base_flows, self.coeff_spec, self.coeff_params, self.coeff_buffers,
                            self.mu_offset, (mu, lam))


def injected_flow(base_flows, mu, lam) -> CombinedFlow:
    mu = np.asarray(mu, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    return CombinedFlow(list(base_flows), injected=(mu, lam))


def parrot_flow(flow: ConditionedAffineFlow) -> CombinedFlow:
    """A single flow with mu = lambda = 1."""
    return injected_flow([flow], [1.0], [1.0])


def coefficients(cf: CombinedFlow, u) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != cf.condition_dim:
        raise ShapeError(f"condition dim {u.shape[-1]} != {cf.condition_dim}")
    if cf.injected is not None:
        mu, lam = cf.injected
        shape = u.shape[:-1] + (cf.n_flows,)
        return np.broadcast_to(mu, shape), np.broadcast_to(lam, shape)
    raw = mlp_forward(cf.coeff_spec, cf.coeff_params, u, cf.coeff_buffers)
    n = cf.n_flows
    return softplus(raw[..., :n]) + cf.mu_offset, raw[..., n:]


def base_outputs(cf: CombinedFlow, u) -> tuple[np.ndarray, np.ndarray]:
    """Clamped c_i(u) and d_i(u) of every base flow, stacked on axis -2."""
    raw = np.stack([f.raw_c(u) for f in cf.base_flows], axis=-2)
    cf.peak_abs_c = max(cf.peak_abs_c, float(np.abs(raw).max()))
    clamp = np.array([f.clamp for f in cf.base_flows])[:, None]
    cs = np.clip(raw, -clamp, clamp)
    ds = np.stack([f.d(u) for f in cf.base_flows], axis=-2)
    return cs, ds


def combined_effective_affine(cf: CombinedFlow, u) -> AffineMap:
    mu, lam = coefficients(cf, u)
    cs, ds = base_outputs(cf, u)
    if cf.record_coefficients:
        cf.coefficient_trace.append((np.array(mu), np.array(lam)))
    scale = (mu[..., :, None] * np.exp(cs)).sum(axis=-2)
    shift = (lam[..., :, None] * ds).sum(axis=-2)
    return AffineMap(scale, shift)


def combined_nll(cf: CombinedFlow, pairs: Pairs) -> float:
    m = combined_effective_affine(cf, pairs.u)
    return float(-np.mean(affine_log_likelihood(m, pairs.a)))


def _coeff_loss(p: Tensor, spec: MlpSpec, buffers, u, a, exp_c, d, mu_offset: float, training: bool):
    raw, new_buffers = mlp_apply(spec, p, u, buffers, training)
    n = exp_c.shape[1]
    mu = raw[:, :n].softplus() + mu_offset
    lam = raw[:, n:]
    scale = (mu.reshape(-1, n, 1) * exp_c).sum(axis=1)
    shift = (lam.reshape(-1, n, 1) * d).sum(axis=1)
    z = (a - shift) / scale
    ll = (z.square() * -0.5).sum(axis=1) - 0.5 * a.shape[1] * LOG_2PI - scale.log().sum(axis=1)
    return -ll.mean(), new_buffers


def train_combination(base_flows, pairs_ts: Pairs, cfg: FlowTrainConfig, return_log: bool = False):
    """Fit only the coefficient net on task-specific pairs; base flows stay frozen."""
    if len(pairs_ts) < 2:
        raise InsufficientDataError("need at least 2 task-specific pairs")
    base_flows = list(base_flows)
    cd = base_flows[0].condition_dim
    if pairs_ts.u.shape[1] != cd:
        raise CombinationConfigError(f"pairs have condition dim {pairs_ts.u.shape[1]}, flows expect {cd}")
    rng = np.random.default_rng(cfg.seed)
    spec = MlpSpec(cd, cfg.hidden_widths, 2 * len(base_flows), batchnorm=cfg.batchnorm)
    cf = CombinedFlow(base_flows, spec, init_params(spec, rng), init_buffers(spec))
    train, val = split_train_val(pairs_ts, 1.0 - cfg.val_ratio, cfg.seed)
    # base flows are frozen, so their outputs on the training pairs are constants
    cs, ds = base_outputs(cf, train.u)
    exp_c = np.exp(cs)

    def batch_loss(p: Tensor, idx, state):
        return _coeff_loss(p, spec, state, train.u[idx], train.a[idx], exp_c[idx], ds[idx],
                           cf.mu_offset, True)

    def val_loss(params, state):
        return combined_nll(CombinedFlow(base_flows, spec, params, state), val)

    params, buffers, tlog = fit_minibatch(cf.coeff_params, batch_loss, val_loss, len(train), cfg, rng,
                                          cf.coeff_buffers)
    out = CombinedFlow(base_flows, spec, params.copy(), None if buffers is None else buffers.copy())
    log.info("combination trained: val nll %.4f (epoch %d)", tlog.best_val_loss, tlog.best_epoch)
    return (out, tlog) if return_log else out


# checkpoints -----------------------------------------------------------------

def save_combined(path, cf: CombinedFlow, base_paths, base_digests, extra: dict | None = None) -> None:
    """Store the coefficient net and references (path + content hash) to base-flow checkpoints."""
    arrays = {"coeff_params": cf.coeff_params}
    if cf.coeff_buffers is not None:
        arrays["coeff_buffers"] = cf.coeff_buffers
    meta = {
        "kind": "combined",
        "coeff_spec": cf.coeff_spec.to_dict(),
        "mu_offset": cf.mu_offset,
        "base_flows": [{"path": str(p), "digest": d} for p, d in zip(base_paths, base_digests)],
    }
    meta.update(extra or {})
    save_checkpoint(path, arrays, meta)


def load_combined(path) -> CombinedFlow:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "combined":
        raise ValueError(f"{path} is not a combined-flow checkpoint")
    bases = []
    root = Path(path).parent
    for ref in meta["base_flows"]:
        p = Path(ref["path"])
        f = load_flow(p if p.is_absolute() else root / p)
        if f.digest() != ref["digest"]:
            raise ValueError(f"base flow {p} does not match recorded digest")
        bases.append(f)
    return CombinedFlow(bases, MlpSpec.from_dict(meta["coeff_spec"]), arrays["coeff_params"],
                        arrays.get("coeff_buffers"), meta["mu_offset"])

