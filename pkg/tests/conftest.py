from __future__ import annotations

import numpy as np

from ceip.data import TransitionTriple
from ceip.flow import ConditionedAffineFlow, identity_flow


def const_flow(condition_dim, c, d) -> ConditionedAffineFlow:
    """Flow whose c and d nets output the given constants for every condition."""
    c = np.asarray(c, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    f = identity_flow(condition_dim, len(c))
    f.c_params[-len(c):] = c
    f.d_params[-len(d):] = d
    return f


def fixture_triples():
    """1-D database: key 0.0 -> 1.0 at step 0, key 0.5 -> 2.0 at step 1, one trajectory."""
    return [TransitionTriple(np.array([0.0]), np.zeros(1), np.array([1.0]), 0, 0),
            TransitionTriple(np.array([0.5]), np.zeros(1), np.array([2.0]), 0, 1)]


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}
N_CRITERIA = 11


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(ACCEPTANCE.get(n, f"FAIL  criterion {n:2d}: not run or errored before a verdict"))
