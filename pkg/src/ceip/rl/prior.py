"""Action prior applied at every environment step: optional retrieval of a
likely next state, then the (combined) flow map from latent to action."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ceip.flow import AffineMap, ConditionedAffineFlow, affine_forward, identity_flow
from ceip.mixture import CombinedFlow, combined_effective_affine, parrot_flow
from ceip.retrieval import RetrievalDatabase, make_condition

Z_BOUND = 3.0


class PriorConfigError(ValueError):
    pass


@dataclass
class PriorBundle:
    flow: CombinedFlow
    database: RetrievalDatabase | None = None
    use_ts_flow: bool = False
    use_explicit: bool = False
    use_forward: bool = False
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self):
        if self.use_forward and not self.use_explicit:
            raise PriorConfigError("use_forward requires use_explicit")
        if self.use_explicit:
            if self.database is None:
                raise PriorConfigError("explicit prior needs a retrieval database")
            if self.flow.condition_dim != 2 * self.database.state_dim:
                raise PriorConfigError(
                    f"explicit prior needs condition_dim = 2*{self.database.state_dim}, flow has {self.flow.condition_dim}")
            # the push-forward switch is the penalty weight; keep a private marker set
            self.database = self.database.copy(penalty=1.0 if self.use_forward else 0.0)

    @property
    def action_dim(self) -> int:
        return self.flow.action_dim

    @property
    def state_dim(self) -> int:
        return self.flow.condition_dim // 2 if self.use_explicit else self.flow.condition_dim

    def reset_episode(self) -> None:
        if self.database is not None:
            self.database.reset_episode()

    def fork(self) -> PriorBundle:
        """Same prior with an independent retrieval marker set (for evaluation)."""
        return PriorBundle(self.flow, self.database, self.use_ts_flow, self.use_explicit, self.use_forward,
                           self.action_low, self.action_high)

    def condition(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if self.use_explicit:
            return make_condition(s, self.database.retrieve_next(s).s_next)
        return s

    def effective_map(self, s) -> AffineMap:
        return combined_effective_affine(self.flow, self.condition(s))


def prior_step(bundle: PriorBundle, s, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = bundle.effective_map(s)
    return np.clip(affine_forward(m, z), bundle.action_low, bundle.action_high)


def identity_bundle(state_dim: int, action_dim: int) -> PriorBundle:
    """No prior: the latent is the action."""
    return PriorBundle(parrot_flow(identity_flow(state_dim, action_dim)))


def single_flow_bundle(flow: ConditionedAffineFlow, database: RetrievalDatabase | None = None,
                       use_forward: bool = False) -> PriorBundle:
    explicit = flow.condition_dim == 2 * (database.state_dim if database is not None else -1)
    return PriorBundle(parrot_flow(flow), database if explicit else None, use_explicit=explicit,
                       use_forward=use_forward and explicit)
