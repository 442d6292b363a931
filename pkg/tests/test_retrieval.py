import numpy as np
import pytest
from conftest import fixture_triples
from hypothesis import given, settings
from hypothesis import strategies as st

from ceip.data import Trajectory, TransitionTriple
from ceip.retrieval import (
    EmptyDatabaseError,
    RetrievalDatabase,
    make_condition,
    reset_episode,
    retrieve_next,
)


def test_fixture_three_outcomes():
    db = RetrievalDatabase(fixture_triples())
    np.testing.assert_array_equal(db.costs([0.0]), [0.0, 0.25])
    nxt, tid, idx = retrieve_next(db, np.array([0.0]))
    assert (nxt[0], tid, idx, db.marker(0)) == (1.0, 0, 0, 0)
    np.testing.assert_array_equal(db.costs([0.0]), [1.0, 0.25])
    nxt, tid, idx = retrieve_next(db, np.array([0.0]))
    assert (nxt[0], idx, db.marker(0)) == (2.0, 1, 1)

    free = RetrievalDatabase(fixture_triples(), penalty=0.0)
    assert retrieve_next(free, np.array([0.0]))[0][0] == 1.0
    assert retrieve_next(free, np.array([0.0]))[0][0] == 1.0


def test_reset_semantics():
    db = RetrievalDatabase(fixture_triples())
    assert db.markers.tolist() == [-1]
    reset_episode(db)
    assert db.markers.tolist() == [-1]
    retrieve_next(db, np.array([0.0]))
    retrieve_next(db, np.array([0.0]))
    reset_episode(db)
    once = db.markers.copy()
    reset_episode(db)
    np.testing.assert_array_equal(db.markers, once)
    assert once.tolist() == [-1]


def test_empty_database_rejected():
    with pytest.raises(EmptyDatabaseError):
        RetrievalDatabase([])


def test_query_shape_checked():
    with pytest.raises(ValueError):
        RetrievalDatabase(fixture_triples()).retrieve_next(np.zeros(2))


def test_ties_break_on_smallest_traj_then_step():
    key = np.array([1.0])
    triples = [TransitionTriple(key, np.zeros(1), np.array([float(10 * t + i)]), t, i)
               for t in (2, 0, 1) for i in (1, 0)]
    r = RetrievalDatabase(triples, penalty=0.0).retrieve_next(key)
    assert (r.traj_id, r.step_index, r.s_next[0]) == (0, 0, 0.0)


def test_marker_only_moves_for_winner():
    trajs = [Trajectory(np.array([[0.0], [0.1], [0.2]]), np.zeros((3, 1))),
             Trajectory(np.array([[5.0], [5.1], [5.2]]), np.zeros((3, 1)))]
    db = RetrievalDatabase.from_trajectories(trajs)
    db.retrieve_next(np.array([5.05]))
    assert db.marker(0) == -1 and db.marker(1) == 0


def test_copies_have_independent_markers():
    db = RetrievalDatabase(fixture_triples())
    other = db.copy()
    db.retrieve_next(np.array([0.0]))
    assert other.marker(0) == -1 and db.marker(0) == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 30), st.integers(1, 5), st.integers(0, 10**6))
def test_constant_query_advances_to_end(T, ds, seed):
    rng = np.random.default_rng(seed)
    # states inside a box of diagonal 0.5, so every squared distance is < 1 = C
    half = 0.5 / np.sqrt(ds)
    states = rng.uniform(0, half, size=(T + 1, ds))
    db = RetrievalDatabase.from_trajectories([Trajectory(states, np.zeros((T + 1, 1)))])
    q = rng.uniform(0, half, size=ds)
    seen = []
    while not seen or seen[-1] < T - 1:
        seen.append(db.retrieve_next(q).step_index)
        assert len(seen) <= T
    assert all(b > a for a, b in zip(seen, seen[1:]))


def test_zero_penalty_is_nearest_neighbour():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n, ds = rng.integers(1, 12), rng.integers(1, 4)
        keys = rng.normal(size=(n, ds))
        triples = [TransitionTriple(keys[i], np.zeros(1), keys[i] + 1, int(rng.integers(0, 3)), i)
                   for i in range(n)]
        db = RetrievalDatabase(triples, penalty=0.0)
        for _ in range(3):
            q = rng.normal(size=ds)
            d2 = ((keys - q) ** 2).sum(axis=1)
            best = min(range(n), key=lambda i: (d2[i], triples[i].traj_id, triples[i].step_index))
            r = db.retrieve_next(q)
            assert (r.traj_id, r.step_index) == (triples[best].traj_id, triples[best].step_index)


def test_identical_queries_are_deterministic():
    rng = np.random.default_rng(1)
    trajs = [Trajectory(rng.normal(size=(6, 2)), np.zeros((6, 1))) for _ in range(3)]
    qs = rng.normal(size=(10, 2))
    runs = []
    for _ in range(2):
        db = RetrievalDatabase.from_trajectories(trajs)
        runs.append([(r.traj_id, r.step_index) for r in map(db.retrieve_next, qs)])
    assert runs[0] == runs[1]


def test_make_condition():
    np.testing.assert_array_equal(make_condition([1, 2], [3, 4]), [1, 2, 3, 4])
    s = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(make_condition(s, s), np.concatenate([s, s]))
    with pytest.raises(ValueError):
        make_condition([1.0], [1.0, 2.0])
