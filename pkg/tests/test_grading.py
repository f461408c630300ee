import itertools
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from skillswarm.grading import (
    CorrectnessMatrix,
    accuracy_majority,
    avg_at_k,
    grade,
    majority_vote,
    metrics_report,
    normalize_answer,
    pass_at_k,
)


# =============================================================================
# Independent brute-force oracles
# =============================================================================

def brute_majority(answers):
    """Max multiplicity; among ties, the answer whose first holder has the
    lowest index."""
    best, best_count, best_first = None, -1, None
    for candidate in set(answers):
        count = answers.count(candidate)
        first = answers.index(candidate)
        if count > best_count or (count == best_count and first < best_first):
            best, best_count, best_first = candidate, count, first
    return best


def brute_pass_at_k(rows):
    hits = 0
    for col in range(len(rows[0])):
        if any(row[col] for row in rows):
            hits += 1
    return hits / len(rows[0])


def brute_avg_at_k(rows):
    cells = sum(sum(1 for v in row if v) for row in rows)
    return cells / (len(rows) * len(rows[0]))


def brute_accuracy(answers_by_problem, golds):
    hits = 0
    for answers, gold in zip(answers_by_problem, golds):
        vote = normalize_answer(brute_majority(list(answers)))
        if vote and vote == normalize_answer(gold):
            hits += 1
    return hits / len(golds)


# =============================================================================
# Normalization and grading
# =============================================================================

class TestNormalizeAnswer:
    @pytest.mark.parametrize(
        "raw,expected",
        [
            ("\\boxed{42}", "42"),
            ("$\\frac{1}{2}$", "1/2"),
            ("Yes.", "yes"),
            ("  7 ", "7"),
            ("$x + 1$", "x + 1"),
            ("a   b\tc", "a b c"),
            ("\\boxed{\\frac{3}{4}}", "3/4"),
            ("3.14", "3.14"),
            ("NO", "no"),
            ("", ""),
        ],
    )
    def test_examples(self, raw, expected):
        assert normalize_answer(raw) == expected

    def test_non_enclosing_wrappers_left_alone(self):
        # adjacent pairs are not an enclosure and must not be cracked open
        assert normalize_answer("\\boxed{a} + \\boxed{b}") == "\\boxed{a} + \\boxed{b}"
        assert normalize_answer("$a$ + $b$") == "$a$ + $b$"

    @given(
        st.text(alphabet="abcdefgh0123456789 +-/", max_size=16).map(str.strip),
        st.sampled_from(["plain", "dollars", "boxed", "period"]),
    )
    def test_idempotent_on_answer_shapes(self, base, wrapper):
        raw = {
            "plain": base,
            "dollars": f"${base}$",
            "boxed": "\\boxed{%s}" % base,
            "period": f"{base}.",
        }[wrapper]
        once = normalize_answer(raw)
        assert normalize_answer(once) == once


class TestGrade:
    def test_boxed_matches_plain(self):
        assert grade("\\boxed{7}", "7") is True

    def test_mismatch(self):
        assert grade("8", "7") is False

    def test_empty_answer_never_correct(self):
        assert grade("", "7") is False
        assert grade("", "") is False

    def test_case_insensitive_for_words(self):
        assert grade("Yes.", "yes") is True


# =============================================================================
# Majority vote
# =============================================================================

class TestMajorityVote:
    def test_clear_majority(self):
        assert majority_vote(["12", "12", "13", "12"]) == "12"

    def test_tie_goes_to_lowest_agent_index(self):
        assert majority_vote(["a", "b", "a", "b"]) == "a"
        assert majority_vote(["b", "a", "a", "b"]) == "b"

    def test_singleton(self):
        assert majority_vote(["x"]) == "x"

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            majority_vote([])

    def test_exhaustive_against_brute_force(self):
        # every answer multiset of size <= 4 over a 3-symbol alphabet
        for size in range(1, 5):
            for answers in itertools.product("abc", repeat=size):
                answers = list(answers)
                result = majority_vote(answers)
                assert result == brute_majority(answers), answers
                # winner multiplicity dominates every other answer's
                for other in set(answers):
                    assert answers.count(result) >= answers.count(other)


# =============================================================================
# Matrix metrics
# =============================================================================

def random_matrix(rng, max_agents=8, max_problems=50):
    k = rng.randint(1, max_agents)
    n = rng.randint(1, max_problems)
    return CorrectnessMatrix(
        tuple(tuple(rng.random() < rng.random() for _ in range(n)) for _ in range(k))
    )


class TestMatrixMetrics:
    def test_pass_at_k_single_hit_column(self):
        matrix = CorrectnessMatrix(((False,), (False,), (True,), (False,)))
        assert pass_at_k(matrix) == 1.0

    def test_all_false(self):
        matrix = CorrectnessMatrix(((False, False), (False, False)))
        assert pass_at_k(matrix) == 0.0

    def test_avg_at_k_example(self):
        matrix = CorrectnessMatrix(((True, False), (True, True)))
        assert avg_at_k(matrix) == 0.75

    def test_identical_rows_collapse(self):
        matrix = CorrectnessMatrix(((True, False, True),) * 3)
        assert avg_at_k(matrix) == pytest.approx(2 / 3)

    def test_ragged_rejected(self):
        with pytest.raises(ValueError, match="ragged"):
            CorrectnessMatrix(((True,), (True, False)))

    def test_against_brute_force(self):
        rng = random.Random(1234)
        for _ in range(300):
            matrix = random_matrix(rng)
            assert pass_at_k(matrix) == brute_pass_at_k(matrix.rows)
            assert avg_at_k(matrix) == brute_avg_at_k(matrix.rows)
            assert pass_at_k(matrix) >= accuracy_from_rows(matrix.rows)
            assert pass_at_k(matrix) >= avg_at_k(matrix)


def accuracy_from_rows(rows):
    """Majority of boolean correctness: used only for the ordering check."""
    hits = 0
    for col in range(len(rows[0])):
        correct = sum(1 for row in rows if row[col])
        if correct * 2 > len(rows):
            hits += 1
    return hits / len(rows[0])


class TestAccuracyMajority:
    def test_all_correct(self):
        answers = [["7", "7", "7", "7"]] * 3
        assert accuracy_majority(answers, ["7", "7", "7"]) == 1.0

    def test_lone_correct_agent_loses_vote(self):
        # one agent right, three agree on a wrong answer: the vote fails
        answers = [["7", "9", "9", "9"]]
        assert accuracy_majority(answers, ["7"]) == 0.0

    def test_lone_correct_agent_wins_on_split_peers(self):
        answers = [["7", "8", "9", "10"]]  # all singletons, lowest index wins
        assert accuracy_majority(answers, ["7"]) == 1.0

    def test_random_instances_match_brute_force(self):
        rng = random.Random(99)
        for _ in range(100):
            k = rng.randint(1, 4)
            n = rng.randint(1, 50)
            answers = [[str(rng.randint(0, 3)) for _ in range(k)] for _ in range(n)]
            golds = [str(rng.randint(0, 3)) for _ in range(n)]
            assert accuracy_majority(answers, golds) == brute_accuracy(answers, golds)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            accuracy_majority([["a"]], ["a", "b"])


def test_metrics_report_bundles_consistently():
    rng = random.Random(7)
    k, n = 4, 25
    answers = [[str(rng.randint(0, 2)) for _ in range(k)] for _ in range(n)]
    golds = [str(rng.randint(0, 2)) for _ in range(n)]
    rows = tuple(
        tuple(grade(answers[p][a], golds[p]) for p in range(n)) for a in range(k)
    )
    matrix = CorrectnessMatrix(rows)
    report = metrics_report(answers, golds, matrix)
    assert report.accuracy == brute_accuracy(answers, golds)
    assert report.pass_at_k == brute_pass_at_k(rows)
    assert report.avg_at_k == brute_avg_at_k(rows)
    assert len(report.per_agent_accuracy) == k
    assert report.pass_at_k >= report.accuracy
    assert report.pass_at_k >= report.avg_at_k
