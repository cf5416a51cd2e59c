"""Shared fixtures: toy tasks, scripted backends, and gateway factories.

Everything here is deterministic. Chat traffic runs through ScriptedChatBackend
rules keyed on prompt substrings; embeddings come from HashEmbedder.
"""

from __future__ import annotations

import pytest

from textbfgs.gateway import (
    Gateway,
    HashEmbedder,
    ScriptedChatBackend,
    ScriptRule,
)
from textbfgs.prompting import render_one_pass
from textbfgs.sandbox import TaskSpec

# ---------------------------------------------------------------------------
# The interval task.  Verdicts for both candidates below were produced by
# running them through the sandbox once and freezing the output:
#   buggy  -> base (pass, fail, pass) = 2/3, plus 3/5
#   fixed  -> all eight tests pass
# ---------------------------------------------------------------------------

INTERVAL_BUGGY = '''\
def is_prime(n):
    if n < 2:
        return False
    for i in range(2, int(n ** 0.5) + 1):
        if n % i == 0:
            return False
    return True


def intersection(interval1, interval2):
    intersect_start = max(interval1[0], interval2[0])
    intersect_end = min(interval1[1], interval2[1])
    if intersect_start > intersect_end:
        return "NO"
    length = intersect_end - intersect_start + 1  # Inclusive interval
    return "YES" if is_prime(length) else "NO"
'''

INTERVAL_FIXED = INTERVAL_BUGGY.replace("intersect_start", "overlap_start").replace(
    "intersect_end", "overlap_end"
).replace(
    "length = overlap_end - overlap_start + 1  # Inclusive interval",
    "length = overlap_end - overlap_start  # corrected difference",
)


@pytest.fixture
def interval_task() -> TaskSpec:
    return TaskSpec(
        task_id="interval-intersection",
        prompt=(
            "Given two closed integer intervals, decide whether the length of "
            'their intersection is prime.  Return "YES" or "NO".'
        ),
        entry_point="intersection",
        base_tests=(
            'assert intersection((1, 2), (2, 3)) == "NO"',
            'assert intersection((-1, 1), (0, 4)) == "NO"',
            'assert intersection((-3, -1), (-5, 5)) == "YES"',
        ),
        plus_tests=(
            'assert intersection((0, 10), (3, 5)) == "YES"',
            'assert intersection((1, 1), (1, 1)) == "NO"',
            'assert intersection((-5, -3), (3, 5)) == "NO"',
            'assert intersection((0, 2), (1, 5)) == "NO"',
            'assert intersection((2, 8), (4, 12)) == "NO"',
        ),
        per_test_timeout=5.0,
    )


# ---------------------------------------------------------------------------
# A tiny two-test task used wherever the interval task would be overkill.
# ---------------------------------------------------------------------------

DOUBLE_GOOD = "def double(x):\n    return x * 2\n"
# passes the first test only (2 + 2 == 4) -> base 1/2
DOUBLE_PARTIAL = "def double(x):\n    return x + 2\n"
# fails both tests -> base 0
DOUBLE_ZERO = "def double(x):\n    return 0\n"


@pytest.fixture
def double_task() -> TaskSpec:
    return TaskSpec(
        task_id="double",
        prompt="Return twice the input integer.",
        entry_point="double",
        base_tests=(
            "assert double(2) == 4",
            "assert double(-3) == -6",
        ),
        per_test_timeout=5.0,
    )


# ---------------------------------------------------------------------------
# Scripted backends.
# ---------------------------------------------------------------------------


def one_pass_text(gradient: str, operator: str, code: str) -> str:
    """Canonical parseable reply for the fused diagnose/generalize/apply call."""
    return render_one_pass(gradient, operator, code)


@pytest.fixture
def solves_double_backend() -> ScriptedChatBackend:
    """Every one-pass call returns the correct fix for the double task."""
    return ScriptedChatBackend(
        rules=(),
        default=one_pass_text(
            "the function adds instead of multiplying",
            "when a scaling function drifts by a constant, replace the additive "
            "term with the intended multiplication",
            DOUBLE_GOOD,
        ),
        name="solves-double",
    )


@pytest.fixture
def never_improves_backend() -> ScriptedChatBackend:
    """Parseable replies whose code still fails every test."""
    return ScriptedChatBackend(
        rules=(),
        default=one_pass_text(
            "output is a constant, ignoring the argument",
            "restore the dependence on the input before touching anything else",
            "def double(x):\n    return 1\n",
        ),
        name="never-improves",
    )


@pytest.fixture
def two_stage_backend() -> ScriptedChatBackend:
    """Serves both stages of the split gradient/update flow.

    The update prompt embeds the diagnosis under a '## Diagnosis' heading, so a
    substring rule can tell the two calls apart.
    """
    return ScriptedChatBackend(
        rules=(
            ScriptRule(
                text="```python\n" + DOUBLE_GOOD + "```",
                when_contains=("## Diagnosis",),
            ),
        ),
        default="the additive constant should be a multiplicative factor",
        name="two-stage",
    )


@pytest.fixture
def hash_gateway(solves_double_backend) -> Gateway:
    return Gateway(solves_double_backend, HashEmbedder(dim=32, seed=0))


def make_gateway(backend, dim: int = 32, seed: int = 0) -> Gateway:
    return Gateway(backend, HashEmbedder(dim=dim, seed=seed))
