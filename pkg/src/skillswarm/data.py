"""Dataset ingestion, pool splitting, batch sampling, and the validation
subset scheduler.

The dataset contract is JSONL with keys ``id``/``question``/``answer``. Pools
are carved out of a seed-shuffled copy of the file: the first ``train_pool``
problems, the next ``val_pool``, and the remainder as test.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .core import DEFAULT_VAL_BATCH, RunConfig


class DataError(ValueError):
    """Raised on unreadable, malformed, or insufficient dataset input."""


@dataclass(frozen=True)
class Problem:
    id: str
    question: str
    gold_answer: str


@dataclass(frozen=True)
class DatasetPools:
    train: tuple[Problem, ...]
    validation: tuple[Problem, ...]
    test: tuple[Problem, ...]


@dataclass(frozen=True)
class ValidationScheduler:
    """Round-robin over disjoint validation subsets.

    The cursor only moves when some candidate skill hit a perfect score on
    the current subset, so saturated subsets get swapped out.
    """

    subsets: tuple[tuple[Problem, ...], ...]
    cursor: int = 0

    @property
    def subset_count(self) -> int:
        return len(self.subsets)


def load_jsonl(path: str | Path) -> list[Problem]:
    """Read problems from a JSONL file, preserving file order.

    Reports the 1-based line number on malformed lines and rejects duplicate
    ids.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    problems: list[Problem] = []
    seen: set[str] = set()
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(record, dict):
            raise DataError(f"{path}:{lineno}: expected a JSON object")
        for key in ("id", "question", "answer"):
            if key not in record:
                raise DataError(f"{path}:{lineno}: missing key {key!r}")
        pid = str(record["id"])
        question = str(record["question"])
        answer = str(record["answer"])
        if not question or not answer:
            raise DataError(f"{path}:{lineno}: question and answer must be non-empty")
        if pid in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {pid!r}")
        seen.add(pid)
        problems.append(Problem(pid, question, answer))
    return problems


def write_jsonl(path: str | Path, problems: Iterable[Problem]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for problem in problems:
            handle.write(
                json.dumps(
                    {"id": problem.id, "question": problem.question, "answer": problem.gold_answer}
                )
                + "\n"
            )


def _shuffled_indices(n: int, seed: int) -> list[int]:
    indices = list(range(n))
    random.Random(seed).shuffle(indices)
    return indices


def split_pools(problems: Sequence[Problem], config: RunConfig, seed: int) -> DatasetPools:
    """Deterministically shuffle by *seed*, then slice train/validation/test.

    Test is whatever remains after the train and validation pools.
    """
    needed = config.train_pool + config.val_pool
    if len(problems) < needed:
        raise DataError(
            f"insufficient data: need at least {needed} problems "
            f"(train_pool + val_pool), got {len(problems)}"
        )
    order = _shuffled_indices(len(problems), seed)
    shuffled = [problems[i] for i in order]
    train = tuple(shuffled[: config.train_pool])
    validation = tuple(shuffled[config.train_pool : needed])
    test = tuple(shuffled[needed:])
    ids = [p.id for p in shuffled]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate problem ids across pools")
    return DatasetPools(train, validation, test)


def sample_train_batch(
    pools: DatasetPools, iteration: int, seed: int, batch_size: int
) -> list[Problem]:
    """Sample a training batch without replacement.

    Purely a function of ``(seed, iteration)``: the pool is re-sampled from a
    fresh derived RNG each iteration.
    """
    if batch_size > len(pools.train):
        raise DataError(
            f"train batch size {batch_size} exceeds train pool size {len(pools.train)}"
        )
    rng = random.Random(f"{seed}:train:{iteration}")
    return rng.sample(list(pools.train), batch_size)


def make_scheduler(validation: Sequence[Problem], val_batch: int) -> ValidationScheduler:
    """Partition the validation pool into contiguous blocks of ``val_batch``."""
    if val_batch < 1 or len(validation) % val_batch != 0:
        raise DataError(
            f"validation pool size {len(validation)} is not divisible by val_batch {val_batch}"
        )
    subsets = tuple(
        tuple(validation[i : i + val_batch]) for i in range(0, len(validation), val_batch)
    )
    return ValidationScheduler(subsets=subsets, cursor=0)


def current_val_subset(scheduler: ValidationScheduler) -> list[Problem]:
    return list(scheduler.subsets[scheduler.cursor])


def advance_scheduler(scheduler: ValidationScheduler, any_perfect_score: bool) -> ValidationScheduler:
    """Move to the next subset (wrapping) only after a perfect score."""
    if not any_perfect_score:
        return scheduler
    return replace(scheduler, cursor=(scheduler.cursor + 1) % scheduler.subset_count)


def mock_question(category: int, a: int, b: int) -> str:
    return f"MOCK:T{category}:{a}+{b}"


def generate_mock_dataset(
    num_categories: int,
    per_category: int,
    seed: int,
    val_batch: int = DEFAULT_VAL_BATCH,
) -> list[Problem]:
    """Build the deterministic token-world dataset.

    Questions look like ``MOCK:T3:2+5`` with gold answer ``7`` (operands are
    drawn from 1..9, so the gold is never "0", which is the mock backend's
    wrong-answer marker).

    The returned order is arranged so that ``split_pools`` with the *same*
    seed recovers a category-balanced sequence: every contiguous block of
    ``num_categories`` problems after the split contains one problem per
    category. Any pool slice whose offset and length are multiples of
    ``num_categories`` (the default 100/100 geometry with ``val_batch`` 20
    qualifies) therefore gives every validation subset exactly
    ``val_batch / num_categories`` problems per category.
    """
    if num_categories < 1:
        raise DataError("num_categories must be >= 1")
    if per_category < 1:
        raise DataError("per_category must be >= 1")
    if val_batch % num_categories != 0:
        raise DataError(
            f"val_batch {val_batch} is not divisible by num_categories {num_categories}"
        )
    total = num_categories * per_category
    rng = random.Random(f"{seed}:mockworld")
    canonical: list[Problem] = []
    for block in range(per_category):
        categories = list(range(1, num_categories + 1))
        rng.shuffle(categories)
        for category in categories:
            a = rng.randint(1, 9)
            b = rng.randint(1, 9)
            index = len(canonical)
            canonical.append(
                Problem(f"mock-{index:04d}", mock_question(category, a, b), str(a + b))
            )
    # place items so the splitter's seeded shuffle maps position i back to
    # canonical order: shuffled[j] = output[order[j]] == canonical[j]
    order = _shuffled_indices(total, seed)
    output: list[Problem] = [None] * total  # type: ignore[list-item]
    for j, i in enumerate(order):
        output[i] = canonical[j]
    return output
