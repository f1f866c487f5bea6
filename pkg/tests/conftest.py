import sys

import numpy as np
import pytest

from empg.policy import PolicyParams, Trajectory
from empg.tasks import TaskSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_task(vocab_size, max_rationale_len, answer_length=1, eor=None, context_order=1, n_queries=1):
    """A task over a raw vocabulary whose answer is always token 0."""
    eor = vocab_size - 1 if eor is None else eor
    queries = tuple((q % vocab_size,) for q in range(n_queries))
    return TaskSpec("toy", vocab_size, 1, answer_length, max_rationale_len, eor, 0, queries,
                    lambda q: (0,) * answer_length, context_order)


def random_trajectory(rng, params: PolicyParams, max_len=6) -> Trajectory:
    V = params.vocab_size
    q = tuple(int(t) for t in rng.integers(V, size=rng.integers(0, 3)))
    r = tuple(int(t) for t in rng.integers(V, size=rng.integers(0, max_len)))
    a = tuple(int(t) for t in rng.integers(V, size=rng.integers(0, 3)))
    return Trajectory(q, r, a, 0.0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[n])
