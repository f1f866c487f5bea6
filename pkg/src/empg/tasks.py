"""Synthetic verifiable reasoning tasks with enumerable completion spaces.

Vocabulary layouts (token ids, in order):

``arithmetic_chain``
    digits ``0 .. modulus-1``, then ``+``, ``=``, ``<eor>``, ``<bos>``.
    Query ``a1 + a2 + ... + ak =``; answer is the sum modulo ``modulus``.
``parity``
    ``0``, ``1``, ``<eor>``, ``<bos>``. Query is a bitstring; answer is its parity.
``copy_reverse``
    symbols ``0 .. n_symbols-1``, ``<eor>``, ``<bos>``. Query is a symbol
    string; answer is the same string reversed.

Rewards look at the answer only. The rationale is free for the policy to use
as scratch space (with a short context window it is the only way to carry
query information forward to the answer).
"""

from __future__ import annotations

import hashlib
import inspect
import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import CapacityError, InvalidInputError
from .policy import Trajectory

ENUMERATION_BOUND = 10**6


@dataclass(frozen=True)
class TaskSpec:
    name: str
    vocab_size: int
    query_length: int
    answer_length: int
    max_rationale_len: int
    eor_token: int
    begin_token: int
    queries: tuple[tuple[int, ...], ...]
    target: Callable[[tuple[int, ...]], tuple[int, ...]] = field(compare=False)
    context_order: int = 2
    token_names: tuple[str, ...] = ()
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.queries:
            raise InvalidInputError(f"task {self.name!r} has an empty query set")
        for tok in (self.eor_token, self.begin_token):
            if not 0 <= tok < self.vocab_size:
                raise InvalidInputError("special tokens must lie inside the vocabulary")

    def verify(self, query: Sequence[int], rationale: Sequence[int], answer: Sequence[int]) -> float:
        return 1.0 if tuple(answer) == tuple(self.target(tuple(query))) else 0.0

    def render(self, tokens: Sequence[int]) -> str:
        if not self.token_names:
            return " ".join(str(t) for t in tokens)
        return " ".join(self.token_names[t] for t in tokens)

    @property
    def completion_count(self) -> int:
        """Closed-form size of the (rationale, answer) space per query.

        Rationales are either ``eor``-terminated strings of length 1..L (content
        tokens drawn from the V-1 non-``eor`` ids) or L content tokens with no
        terminator: sum_{k<L} (V-1)^k + (V-1)^L, or 1 when L = 0.
        """
        V, L = self.vocab_size, self.max_rationale_len
        n_rat = 1 if L == 0 else sum((V - 1) ** k for k in range(L)) + (V - 1) ** L
        return n_rat * V**self.answer_length


def sample_query(task: TaskSpec, rng: np.random.Generator) -> tuple[int, ...]:
    return task.queries[int(rng.integers(len(task.queries)))]


def reward(task: TaskSpec, traj: Trajectory) -> float:
    V = task.vocab_size
    if len(traj.answer) != task.answer_length:
        raise InvalidInputError(f"answer has length {len(traj.answer)}, expected {task.answer_length}")
    if len(traj.rationale) > task.max_rationale_len:
        raise InvalidInputError("rationale exceeds max_rationale_len")
    if any(not 0 <= t < V for t in traj.query + traj.generated):
        raise InvalidInputError("trajectory contains out-of-vocabulary tokens")
    return task.verify(traj.query, traj.rationale, traj.answer)


def rationales(task: TaskSpec) -> Iterator[tuple[tuple[int, ...], bool]]:
    """All admissible rationales, length ascending then lexicographic.

    Yields ``(rationale, truncated)``.
    """
    V, L, eor = task.vocab_size, task.max_rationale_len, task.eor_token
    if L == 0:
        yield (), False
        return
    for k in range(1, L + 1):
        for seq in itertools.product(range(V), repeat=k):
            if eor in seq[:-1]:
                continue
            if seq[-1] == eor:
                yield seq, False
            elif k == L:
                yield seq, True


def enumerate_completions(task: TaskSpec, query: Sequence[int],
                          bound: int = ENUMERATION_BOUND) -> Iterator[tuple[tuple[int, ...], tuple[int, ...], bool]]:
    """Every (rationale, answer, truncated) completion exactly once, in canonical order."""
    n = task.completion_count
    if n > bound:
        raise CapacityError(f"task {task.name!r} has {n} completions per query, above the bound {bound}", bound)
    answers = list(itertools.product(range(task.vocab_size), repeat=task.answer_length))
    for rat, truncated in rationales(task):
        for ans in answers:
            yield rat, ans, truncated


def completion_trajectories(task: TaskSpec, query: Sequence[int],
                            bound: int = ENUMERATION_BOUND) -> list[Trajectory]:
    q = tuple(query)
    return [Trajectory(q, r, a, task.verify(q, r, a), tr) for r, a, tr in enumerate_completions(task, q, bound)]


# bundled tasks ---------------------------------------------------------------

def arithmetic_chain(operand_max: int = 4, chain_length: int = 1, modulus: int | None = None,
                     max_rationale_len: int = 2, context_order: int = 2) -> TaskSpec:
    if operand_max < 0 or chain_length < 1:
        raise InvalidInputError("arithmetic_chain needs operand_max >= 0 and chain_length >= 1")
    modulus = operand_max * chain_length + 1 if modulus is None else modulus
    if modulus <= operand_max:
        raise InvalidInputError("modulus must exceed operand_max so operands are digit tokens")
    plus, eq, eor, bos = modulus, modulus + 1, modulus + 2, modulus + 3
    names = tuple(str(d) for d in range(modulus)) + ("+", "=", "<eor>", "<bos>")
    queries = []
    for ops in itertools.product(range(operand_max + 1), repeat=chain_length):
        q = []
        for i, a in enumerate(ops):
            if i:
                q.append(plus)
            q.append(a)
        q.append(eq)
        queries.append(tuple(q))

    def target(query):
        return (sum(t for t in query if t < modulus) % modulus,)

    return TaskSpec("arithmetic_chain", modulus + 4, 2 * chain_length, 1, max_rationale_len, eor, bos,
                    tuple(queries), target, context_order, names,
                    dict(operand_max=operand_max, chain_length=chain_length, modulus=modulus,
                         max_rationale_len=max_rationale_len, context_order=context_order))


def parity(n_bits: int = 3, max_rationale_len: int = 2, context_order: int | None = None) -> TaskSpec:
    if n_bits < 1:
        raise InvalidInputError("parity needs n_bits >= 1")
    context_order = n_bits + 1 if context_order is None else context_order
    queries = tuple(itertools.product((0, 1), repeat=n_bits))

    def target(query):
        return (sum(query) % 2,)

    return TaskSpec("parity", 4, n_bits, 1, max_rationale_len, 2, 3, queries, target, context_order,
                    ("0", "1", "<eor>", "<bos>"),
                    dict(n_bits=n_bits, max_rationale_len=max_rationale_len, context_order=context_order))


def copy_reverse(n_symbols: int = 3, length: int = 2, max_rationale_len: int = 1,
                 context_order: int | None = None) -> TaskSpec:
    if n_symbols < 1 or length < 1:
        raise InvalidInputError("copy_reverse needs n_symbols >= 1 and length >= 1")
    context_order = length + 2 if context_order is None else context_order
    queries = tuple(itertools.product(range(n_symbols), repeat=length))

    def target(query):
        return tuple(reversed(query))

    names = tuple(chr(ord("a") + i) for i in range(n_symbols)) + ("<eor>", "<bos>")
    return TaskSpec("copy_reverse", n_symbols + 2, length, length, max_rationale_len, n_symbols, n_symbols + 1,
                    queries, target, context_order, names,
                    dict(n_symbols=n_symbols, length=length, max_rationale_len=max_rationale_len,
                         context_order=context_order))


TASKS: dict[str, Callable[..., TaskSpec]] = {
    "arithmetic_chain": arithmetic_chain,
    "parity": parity,
    "copy_reverse": copy_reverse,
}


def task_parameters(name: str) -> dict[str, inspect.Parameter]:
    if name not in TASKS:
        raise InvalidInputError(f"unknown task {name!r}; known: {sorted(TASKS)}")
    return dict(inspect.signature(TASKS[name]).parameters)


def make_task(name: str, **kwargs) -> TaskSpec:
    params = task_parameters(name)
    unknown = set(kwargs) - set(params)
    if unknown:
        raise InvalidInputError(f"unknown parameters for task {name!r}: {sorted(unknown)}")
    return TASKS[name](**kwargs)


def registry_hash() -> str:
    """Fingerprint of the bundled task registry (names, defaults, vocab layouts)."""
    desc = {}
    for name, fn in sorted(TASKS.items()):
        task = fn()
        desc[name] = {
            "defaults": {k: repr(p.default) for k, p in inspect.signature(fn).parameters.items()},
            "tokens": list(task.token_names),
            "queries": [list(q) for q in task.queries],
        }
    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]
