"""Transition database with push-forward retrieval of likely next states."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ceip.data import Trajectory, TransitionTriple, transitions


class EmptyDatabaseError(LookupError):
    pass


@dataclass(frozen=True)
class Retrieved:
    s_next: np.ndarray
    traj_id: int
    step_index: int


class RetrievalDatabase:
    """Keys are demonstration states, values their successors.

    Per-trajectory markers hold the last referenced step index within the
    current episode (-1 after :meth:`reset_episode`). A query costs
    ``||s_key - s||^2 + C * [step_index <= marker(traj)]``; the winner's
    trajectory marker is advanced to the chosen step.
    """

    def __init__(self, triples: Sequence[TransitionTriple], penalty: float = 1.0):
        if not triples:
            raise EmptyDatabaseError("retrieval database needs at least one transition")
        order = sorted(range(len(triples)), key=lambda i: (triples[i].traj_id, triples[i].step_index))
        self.keys = np.array([triples[i].s for i in order], dtype=np.float64)
        self.values = np.array([triples[i].s_next for i in order], dtype=np.float64)
        self.traj_ids = np.array([triples[i].traj_id for i in order], dtype=np.int64)
        self.step_index = np.array([triples[i].step_index for i in order], dtype=np.int64)
        self.traj_list = np.unique(self.traj_ids)
        # position of each row's trajectory in traj_list, for marker lookup
        self._traj_pos = np.searchsorted(self.traj_list, self.traj_ids)
        self.penalty = float(penalty)
        self.markers = np.full(len(self.traj_list), -1, dtype=np.int64)

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], penalty: float = 1.0) -> RetrievalDatabase:
        return cls(transitions(trajs), penalty)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def state_dim(self) -> int:
        return self.keys.shape[1]

    def copy(self, penalty: float | None = None) -> RetrievalDatabase:
        """Independent marker set sharing the (read-only) transition arrays."""
        new = object.__new__(RetrievalDatabase)
        new.__dict__.update(self.__dict__)
        new.markers = self.markers.copy()
        if penalty is not None:
            new.penalty = float(penalty)
        return new

    def reset_episode(self) -> None:
        self.markers[:] = -1

    def marker(self, traj_id: int) -> int:
        return int(self.markers[np.searchsorted(self.traj_list, traj_id)])

    def costs(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        diff = self.keys - s
        cost = np.einsum("ij,ij->i", diff, diff)
        if self.penalty != 0.0:
            cost = cost + self.penalty * (self.step_index <= self.markers[self._traj_pos])
        return cost

    def retrieve_next(self, s) -> Retrieved:
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (self.state_dim,):
            raise ValueError(f"query has shape {s.shape}, expected ({self.state_dim},)")
        # rows are sorted by (traj_id, step_index); argmin returns the first minimum
        j = int(np.argmin(self.costs(s)))
        pos = self._traj_pos[j]
        self.markers[pos] = max(self.markers[pos], self.step_index[j])
        return Retrieved(self.values[j].copy(), int(self.traj_ids[j]), int(self.step_index[j]))


def reset_episode(db: RetrievalDatabase) -> None:
    db.reset_episode()


def retrieve_next(db: RetrievalDatabase, s) -> tuple[np.ndarray, int, int]:
    r = db.retrieve_next(s)
    return r.s_next, r.traj_id, r.step_index


def make_condition(s, s_next) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    s_next = np.asarray(s_next, dtype=np.float64)
    if s.shape != s_next.shape:
        raise ValueError("state and next state must have equal dims")
    return np.concatenate([s, s_next], axis=-1)
