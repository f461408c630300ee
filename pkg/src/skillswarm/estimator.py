"""Scikit-learn style wrapper around the swarm optimizer.

``fit`` evolves the skill population on labeled problems; ``predict`` answers
new questions by majority vote across the evolved personal-best skills. All
hyperparameters live in the constructor, so the estimator plays nicely with
``get_params`` / ``set_params`` / ``clone``.
"""

from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Mapping, Optional, Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import (
    BackendSpec,
    RunConfig,
    Skill,
    validate_config,
)
from .backend import Backend
from .data import Problem, write_jsonl
from .grading import MetricsReport, majority_vote
from .prompts import DEFAULT_TASK_DOMAIN
from .store import read_trajectory
from .swarm import evaluate_skills, run_optimization, solve_with_skills


def _as_problems(X, y=None) -> list[Problem]:
    """Accept problems, mappings, or (question, answer) column pairs."""
    problems: list[Problem] = []
    for i, item in enumerate(X):
        if isinstance(item, Problem):
            problems.append(item)
        elif isinstance(item, Mapping):
            problems.append(
                Problem(
                    id=str(item.get("id", f"q{i:05d}")),
                    question=str(item["question"]),
                    gold_answer=str(item.get("answer", item.get("gold_answer", ""))),
                )
            )
        else:
            gold = str(y[i]) if y is not None else ""
            problems.append(Problem(id=f"q{i:05d}", question=str(item), gold_answer=gold))
    return problems


class SkillSwarmOptimizer(BaseEstimator):
    """Population-based optimizer over natural-language skills.

    Parameters mirror the run configuration; ``backend=None`` selects the
    deterministic mock backend, so the default estimator runs fully offline.

    Attributes (after ``fit``):
        personal_best_skills_: the per-agent best skills found.
        personal_best_scores_: their validation scores.
        global_best_skill_ / global_best_score_: the population-level best.
        history_: per-iteration trajectory records.
        run_dir_: where checkpoints and logs were written.
    """

    def __init__(
        self,
        num_agents: int = 4,
        num_iterations: int = 10,
        train_pool: int = 100,
        val_pool: int = 100,
        train_batch: int = 10,
        val_batch: int = 20,
        epsilon: float = 0.01,
        max_velocity_words: int = 200,
        max_skill_words: int = 1200,
        max_parallel_calls: int = 4,
        seed: int = 0,
        backend: Optional[BackendSpec] = None,
        run_dir: Optional[str] = None,
        initial_skills: Optional[Sequence[Skill]] = None,
        task_domain: str = DEFAULT_TASK_DOMAIN,
    ):
        self.num_agents = num_agents
        self.num_iterations = num_iterations
        self.train_pool = train_pool
        self.val_pool = val_pool
        self.train_batch = train_batch
        self.val_batch = val_batch
        self.epsilon = epsilon
        self.max_velocity_words = max_velocity_words
        self.max_skill_words = max_skill_words
        self.max_parallel_calls = max_parallel_calls
        self.seed = seed
        self.backend = backend
        self.run_dir = run_dir
        self.initial_skills = initial_skills
        self.task_domain = task_domain

    def _config(self, run_dir: str, dataset_path: str) -> RunConfig:
        return validate_config(
            RunConfig(
                num_agents=self.num_agents,
                num_iterations=self.num_iterations,
                train_pool=self.train_pool,
                val_pool=self.val_pool,
                train_batch=self.train_batch,
                val_batch=self.val_batch,
                epsilon=self.epsilon,
                max_velocity_words=self.max_velocity_words,
                max_skill_words=self.max_skill_words,
                max_parallel_calls=self.max_parallel_calls,
                seed=self.seed,
                backend=self.backend if self.backend is not None else BackendSpec(kind="mock"),
                dataset_path=dataset_path,
                run_dir=run_dir,
                task_domain=self.task_domain,
            )
        )

    def fit(self, X, y=None):
        """Evolve the skill population on labeled problems.

        ``X`` may be a sequence of :class:`Problem`, of mappings with
        ``question``/``answer`` keys, or of question strings with golds in
        ``y``.
        """
        problems = _as_problems(X, y)
        run_dir = self.run_dir or tempfile.mkdtemp(prefix="skillswarm-")
        dataset_path = Path(run_dir) / "dataset.jsonl"
        write_jsonl(dataset_path, problems)
        config = self._config(run_dir, str(dataset_path))
        result = run_optimization(config, initial_skills=self.initial_skills)
        self.personal_best_skills_ = result.personal_bests
        self.personal_best_scores_ = result.personal_best_scores
        self.global_best_skill_ = result.global_best
        self.global_best_score_ = result.global_best_score
        self.run_dir_ = result.run_dir
        self.history_ = read_trajectory(result.run_dir)
        self.n_iterations_ = result.completed_iterations
        return self

    def _eval_config(self) -> RunConfig:
        # pool sizes are irrelevant outside fit; keep them permissive
        return RunConfig(
            num_agents=max(2, len(self.personal_best_skills_)),
            max_parallel_calls=self.max_parallel_calls,
            backend=self.backend if self.backend is not None else BackendSpec(kind="mock"),
            task_domain=self.task_domain,
            seed=self.seed,
        )

    def predict(self, X) -> list[str]:
        """Majority-vote answer per question, using the evolved personal
        bests."""
        check_is_fitted(self, "personal_best_skills_")
        problems = _as_problems(X)
        config = self._eval_config()
        backend = Backend(config.backend, config.max_parallel_calls)
        records = solve_with_skills(self.personal_best_skills_, problems, backend, config)
        return [
            majority_vote([records[a][p].answer for a in range(len(records))])
            for p in range(len(problems))
        ]

    def score(self, X, y=None) -> float:
        """Majority-vote accuracy on labeled problems."""
        return self.metrics(X, y).accuracy

    def metrics(self, X, y=None) -> MetricsReport:
        """Full population metrics (majority accuracy, pass@k, avg@k)."""
        check_is_fitted(self, "personal_best_skills_")
        problems = _as_problems(X, y)
        config = self._eval_config()
        backend = Backend(config.backend, config.max_parallel_calls)
        report, _ = evaluate_skills(self.personal_best_skills_, problems, backend, config)
        return report
