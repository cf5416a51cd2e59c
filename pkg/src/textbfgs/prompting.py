"""Prompt construction and response parsing.

All prompt text lives in versioned template files under templates/<version>/
so wording changes are diffable and never silently alter replay hashes.
Building a prompt is pure: same inputs, same ChatRequest, byte for byte.

The one-pass reply format is three tags emitted in one completion:

    <GRADIENT>diagnosis</GRADIENT>
    <OPERATOR>abstract correction rule</OPERATOR>
    <IMPROVED>complete repaired code</IMPROVED>

Parsing takes the innermost content of each tag and tolerates any prose the
model wraps around them.
"""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from string import Template
from typing import Mapping, Sequence

from .casebase import RetrievalHit
from .domain import TraceStep
from .errors import MalformedResponse
from .gateway import ChatRequest, Message
from .sandbox import TaskSpec, summarize_failures, truncate_middle

TEMPLATE_VERSION = "v1"

GRADIENT_TAG = "GRADIENT"
OPERATOR_TAG = "OPERATOR"
IMPROVED_TAG = "IMPROVED"
ONE_PASS_TAGS = (GRADIENT_TAG, OPERATOR_TAG, IMPROVED_TAG)

# closing markers the truncation guard checks for
REQUIRED_ONE_PASS_MARKERS = (f"</{IMPROVED_TAG}>",)

NO_REFERENCES_MARKER = "(no prior correction patterns are available yet)"

# retrieval key names for reference rendering
STYLE_OPERATOR = "operator"   # gradient + rule, for gradient-keyed retrieval
STYLE_PROBLEM = "problem"     # problem + diff + rule, for problem-keyed retrieval


@lru_cache(maxsize=None)
def load_template(name: str, version: str = TEMPLATE_VERSION) -> Template:
    text = resources.files("textbfgs").joinpath(f"templates/{version}/{name}.txt").read_text("utf-8")
    return Template(text)


@dataclass(frozen=True)
class OnePassResponse:
    """Parsed one-pass reply; every field is non-empty after a successful parse."""

    gradient: str
    operator: str
    improved_code: str


def render_one_pass(gradient: str, operator: str, improved_code: str) -> str:
    """Canonical serialization of a one-pass reply, inverse of parse_one_pass."""
    return (
        f"<{GRADIENT_TAG}>{gradient}</{GRADIENT_TAG}>\n"
        f"<{OPERATOR_TAG}>{operator}</{OPERATOR_TAG}>\n"
        f"<{IMPROVED_TAG}>{improved_code}</{IMPROVED_TAG}>"
    )


def _innermost_tag(text: str, tag: str) -> str | None:
    """Content of the innermost <tag>...</tag> pair, or None if unpaired."""
    open_t, close_t = f"<{tag}>", f"</{tag}>"
    start = text.find(open_t)
    if start == -1:
        return None
    inner = start + len(open_t)
    while True:
        end = text.find(close_t, inner)
        if end == -1:
            return None
        reopen = text.find(open_t, inner)
        if reopen != -1 and reopen < end:
            inner = reopen + len(open_t)
            continue
        return text[inner:end]


_FENCE_RE = re.compile(r"\A```[\w+-]*\n(.*?)\n?```\Z", re.DOTALL)


def strip_code_fence(text: str) -> str:
    """Remove a single fence wrapping the whole text; anything else is kept."""
    match = _FENCE_RE.match(text.strip())
    if match:
        return match.group(1)
    return text


def parse_one_pass(text: str) -> OnePassResponse:
    """Extract the three tags from a model reply.

    Raises MalformedResponse naming every tag that is missing, unclosed, or
    empty; the caller decides whether to re-ask.
    """
    values: dict[str, str] = {}
    missing: list[str] = []
    for tag in ONE_PASS_TAGS:
        raw = _innermost_tag(text, tag)
        if raw is None or not raw.strip():
            missing.append(tag)
        else:
            values[tag] = raw.strip()
    if missing:
        raise MalformedResponse(missing)
    return OnePassResponse(
        gradient=values[GRADIENT_TAG],
        operator=values[OPERATOR_TAG],
        improved_code=strip_code_fence(values[IMPROVED_TAG]).strip(),
    )


_ANY_FENCE_RE = re.compile(r"```[\w+-]*\n(.*?)\n?```", re.DOTALL)


def extract_code_block(text: str) -> str:
    """First fenced code block in the text, or the whole text if none.

    Two-stage strategies reply with plain fenced code rather than tags, and
    models sometimes skip the fence entirely, so this never fails.
    """
    match = _ANY_FENCE_RE.search(text)
    if match:
        return match.group(1).strip()
    return text.strip()


def diff_summary(before: str, after: str, limit: int = 400) -> str:
    """Compact unified diff of a stored fix, without file headers."""
    lines = list(
        difflib.unified_diff(
            before.splitlines(), after.splitlines(), lineterm="", n=1
        )
    )[2:]  # drop the ---/+++ header pair
    if not lines:
        return "(no textual change)"
    return truncate_middle("\n".join(lines), limit)


def render_references(hits: Sequence[RetrievalHit], style: str = STYLE_OPERATOR, limit: int = 400) -> str:
    """Reference block for the one-pass prompt.

    operator style shows each case as (historical error, correction rule);
    problem style shows (problem, code change, correction rule). An empty hit
    list renders an explicit marker so the prompt shape stays identical.
    """
    if style not in (STYLE_OPERATOR, STYLE_PROBLEM):
        raise ValueError(f"unknown reference style {style!r}")
    if not hits:
        return NO_REFERENCES_MARKER
    blocks: list[str] = []
    for i, hit in enumerate(hits, start=1):
        case = hit.case
        lines = [f"Reference pattern {i}:"]
        if style == STYLE_OPERATOR:
            lines.append(f"  historical error: {truncate_middle(case.gradient, limit)}")
        else:
            lines.append(f"  problem: {truncate_middle(case.problem_statement, limit)}")
            change = diff_summary(case.x_before, case.x_after, limit)
            lines.append("  code change:")
            lines.extend(f"    {line}" for line in change.splitlines())
        lines.append(f"  correction rule: {truncate_middle(case.operator, limit)}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def build_momentum_context(history: Sequence[TraceStep], window: int = 3) -> str:
    """Digest of the last `window` steps for the momentum strategy, oldest first.

    Empty history renders an empty string so the plain two-stage prompt is
    unchanged when momentum is off or has nothing to say.
    """
    recent = list(history)[-window:]
    if not recent:
        return ""
    lines = ["## Earlier repair attempts (oldest first)"]
    for step in recent:
        outcome = "accepted" if step.accepted else "rejected"
        if step.gradient is None:
            text = "(step produced no usable diagnosis)"
        else:
            text = truncate_middle(step.gradient.text, 400)
        lines.append(f"- revision {step.candidate.step} ({outcome}): {text}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PromptBuilder:
    """Renders every prompt kind from one template version with fixed budgets."""

    template_version: str = TEMPLATE_VERSION
    failure_budget: int = 4096
    per_test_budget: int = 1024
    reference_limit: int = 400
    sampling: Mapping[str, object] = field(default_factory=dict)

    def _request(self, user_text: str) -> ChatRequest:
        system = load_template("system", self.template_version).template.strip()
        messages = (Message("system", system), Message("user", user_text))
        return ChatRequest(messages=messages, **dict(self.sampling))

    def _failures(self, report) -> str:
        return summarize_failures(report, budget=self.failure_budget, per_test_budget=self.per_test_budget)

    def build_one_pass_prompt(
        self,
        task: TaskSpec,
        candidate,
        report,
        hits: Sequence[RetrievalHit] = (),
        style: str = STYLE_OPERATOR,
    ) -> ChatRequest:
        text = load_template("one_pass", self.template_version).substitute(
            problem=task.prompt.strip(),
            step=candidate.step,
            code=candidate.text.rstrip(),
            failures=self._failures(report),
            references=render_references(hits, style=style, limit=self.reference_limit),
        )
        return self._request(text)

    def build_gradient_prompt(self, task: TaskSpec, candidate, report, momentum: str = "") -> ChatRequest:
        text = load_template("gradient", self.template_version).substitute(
            problem=task.prompt.strip(),
            step=candidate.step,
            code=candidate.text.rstrip(),
            failures=self._failures(report),
            momentum=momentum,
        )
        return self._request(text)

    def build_update_prompt(self, task: TaskSpec, candidate, gradient: str) -> ChatRequest:
        text = load_template("update", self.template_version).substitute(
            problem=task.prompt.strip(),
            step=candidate.step,
            code=candidate.text.rstrip(),
            gradient=gradient.strip(),
        )
        return self._request(text)

    def build_initial_prompt(self, task: TaskSpec) -> ChatRequest:
        text = load_template("initial", self.template_version).substitute(
            problem=task.prompt.strip(),
            entry_point=task.entry_point,
        )
        return self._request(text)
