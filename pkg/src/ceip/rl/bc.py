"""Behavior cloning by mean-squared-error regression, optionally conditioned
on a retrieved next state."""
from __future__ import annotations

import numpy as np

from ceip.autodiff import Tensor
from ceip.data import InsufficientDataError, Pairs, split_train_val
from ceip.flow import FlowTrainConfig, fit_minibatch
from ceip.numerics import MlpSpec, init_params, mlp_apply, mlp_forward
from ceip.retrieval import RetrievalDatabase, make_condition


class BCPolicy:
    def __init__(self, spec: MlpSpec, params: np.ndarray, database: RetrievalDatabase | None = None,
                 use_forward: bool = False, action_low: float = -1.0, action_high: float = 1.0):
        self.spec = spec
        self.params = params
        self.database = None if database is None else database.copy(penalty=1.0 if use_forward else 0.0)
        self.action_low, self.action_high = action_low, action_high

    def reset_episode(self, env=None) -> None:
        if self.database is not None:
            self.database.reset_episode()

    def condition(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if self.database is None:
            return s
        return make_condition(s, self.database.retrieve_next(s).s_next)

    def predict(self, u) -> np.ndarray:
        return mlp_forward(self.spec, self.params, u)

    def act(self, s) -> np.ndarray:
        a = self.predict(self.condition(s)[None])[0]
        return np.clip(a, self.action_low, self.action_high)


def _mse(spec, p: Tensor, u, a) -> Tensor:
    pred, _ = mlp_apply(spec, p, u)
    return (pred - a).square().sum(axis=1).mean()


def train_bc(pairs: Pairs, cfg: FlowTrainConfig, database: RetrievalDatabase | None = None,
             use_forward: bool = False) -> BCPolicy:
    """Regress actions on conditions ``u`` (state, or state plus next state when
    a database is given). With fewer than 2 pairs all of them are used for
    both training and validation."""
    n = len(pairs)
    if n < 1:
        raise InsufficientDataError("behavior cloning needs at least one pair")
    if database is not None and pairs.u.shape[1] != 2 * database.state_dim:
        raise ValueError("explicit behavior cloning needs [s, s_next] conditions")
    rng = np.random.default_rng(cfg.seed)
    spec = MlpSpec(pairs.u.shape[1], cfg.hidden_widths, pairs.a.shape[1])
    train, val = (pairs, pairs) if n < 2 else split_train_val(pairs, 1.0 - cfg.val_ratio, cfg.seed)

    def batch_loss(p, idx, state):
        return _mse(spec, p, train.u[idx], train.a[idx]), state

    def val_loss(params, state):
        return float(np.mean(np.sum((mlp_forward(spec, params, val.u) - val.a) ** 2, axis=1)))

    params, _, _ = fit_minibatch(init_params(spec, rng), batch_loss, val_loss, len(train), cfg, rng)
    return BCPolicy(spec, params, database, use_forward)
