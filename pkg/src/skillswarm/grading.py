"""Answer normalization, exact-match grading, and population metrics.

Grading is deliberately simple: normalize both sides, compare for equality.
The normalization handles the common LaTeX wrappers (``$...$``, ``\\boxed``,
non-nested ``\\frac``) so that superficially different renderings of the same
answer still match.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

_FRAC_RE = re.compile(r"\\frac\{([^{}]*)\}\{([^{}]*)\}")
_WS_RE = re.compile(r"\s+")


@dataclass(frozen=True)
class SolveRecord:
    """One agent's output on one problem, graded."""

    agent_id: int
    problem_id: str
    reasoning: str
    answer: str
    correct: bool = False

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "problem_id": self.problem_id,
            "reasoning": self.reasoning,
            "answer": self.answer,
            "correct": self.correct,
        }


@dataclass(frozen=True)
class CorrectnessMatrix:
    """Rows are agents, columns are problems, cells are correctness flags."""

    rows: tuple[tuple[bool, ...], ...]

    def __post_init__(self):
        if not self.rows:
            raise ValueError("matrix needs at least one agent row")
        widths = {len(row) for row in self.rows}
        if len(widths) != 1:
            raise ValueError(f"ragged matrix rows: widths {sorted(widths)}")

    @property
    def num_agents(self) -> int:
        return len(self.rows)

    @property
    def num_problems(self) -> int:
        return len(self.rows[0])

    @classmethod
    def from_records(cls, records_by_agent: Sequence[Sequence[SolveRecord]]) -> "CorrectnessMatrix":
        return cls(tuple(tuple(r.correct for r in row) for row in records_by_agent))


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    pass_at_k: float
    avg_at_k: float
    per_agent_accuracy: tuple[float, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "accuracy": round(self.accuracy, 4),
            "pass_at_k": round(self.pass_at_k, 4),
            "avg_at_k": round(self.avg_at_k, 4),
            "per_agent_accuracy": [round(v, 4) for v in self.per_agent_accuracy],
        }


def _strip_enclosing_dollars(text: str) -> str:
    # only a true enclosing pair: no further $ inside
    if len(text) >= 2 and text.startswith("$") and text.endswith("$"):
        inner = text[1:-1]
        if "$" not in inner:
            return inner.strip()
    return text


def _strip_enclosing_boxed(text: str) -> str:
    prefix = "\\boxed{"
    if not (text.startswith(prefix) and text.endswith("}")):
        return text
    # the opening brace must match the final character to count as enclosing
    depth = 0
    for i in range(len(prefix) - 1, len(text)):
        if text[i] == "{":
            depth += 1
        elif text[i] == "}":
            depth -= 1
            if depth == 0:
                if i == len(text) - 1:
                    return text[len(prefix) : -1].strip()
                return text
    return text


def normalize_answer(raw: str) -> str:
    """Canonicalize an extracted answer for exact-match comparison.

    Applies, in order: trim, strip one enclosing ``$...$`` pair, strip one
    enclosing ``\\boxed{...}``, rewrite non-nested ``\\frac{A}{B}`` to
    ``A/B``, collapse whitespace runs, strip one trailing period, and
    lowercase pure-alphabetic answers.
    """
    text = raw.strip()
    text = _strip_enclosing_dollars(text)
    text = _strip_enclosing_boxed(text)
    text = _FRAC_RE.sub(r"\1/\2", text)
    text = _WS_RE.sub(" ", text).strip()
    if text.endswith("."):
        text = text[:-1]
    if text.isalpha():
        text = text.lower()
    return text


def grade(record_answer: str, gold: str) -> bool:
    """Exact match after normalizing both sides. Empty answers never pass."""
    answer = normalize_answer(record_answer)
    if not answer:
        return False
    return answer == normalize_answer(gold)


def majority_vote(answers: Sequence[str]) -> str:
    """The most common answer; ties go to the answer held by the lowest
    agent index among the tied answers."""
    if not answers:
        raise ValueError("majority_vote needs at least one answer")
    counts = Counter(answers)
    best_count = max(counts.values())
    for answer in answers:  # agent-index order breaks ties
        if counts[answer] == best_count:
            return answer
    raise AssertionError("unreachable")


def accuracy_majority(answers_by_problem: Sequence[Sequence[str]], golds: Sequence[str]) -> float:
    """Fraction of problems whose majority-vote answer matches gold.

    ``answers_by_problem[p]`` holds the k agents' normalized-or-raw answers
    for problem p, in agent-index order.
    """
    if len(answers_by_problem) != len(golds):
        raise ValueError("answers and golds differ in length")
    if not golds:
        return 0.0
    hits = sum(
        1 for answers, gold in zip(answers_by_problem, golds) if grade(majority_vote(answers), gold)
    )
    return hits / len(golds)


def pass_at_k(matrix: CorrectnessMatrix) -> float:
    """Fraction of problems solved by at least one agent."""
    if matrix.num_problems == 0:
        return 0.0
    passed = sum(
        1 for col in range(matrix.num_problems) if any(row[col] for row in matrix.rows)
    )
    return passed / matrix.num_problems


def avg_at_k(matrix: CorrectnessMatrix) -> float:
    """Mean over agents of their individual accuracy. Rows have equal
    length, so this equals total correct cells over matrix size (computed
    that way to keep the division exact)."""
    if matrix.num_problems == 0:
        return 0.0
    correct = sum(sum(1 for cell in row if cell) for row in matrix.rows)
    return correct / (matrix.num_agents * matrix.num_problems)


def metrics_report(
    answers_by_problem: Sequence[Sequence[str]],
    golds: Sequence[str],
    matrix: CorrectnessMatrix,
) -> MetricsReport:
    """Bundle the three population metrics plus per-agent accuracies."""
    per_agent = tuple(
        (sum(row) / matrix.num_problems) if matrix.num_problems else 0.0 for row in matrix.rows
    )
    return MetricsReport(
        accuracy=accuracy_majority(answers_by_problem, golds),
        pass_at_k=pass_at_k(matrix),
        avg_at_k=avg_at_k(matrix),
        per_agent_accuracy=per_agent,
    )
