"""skillswarm: swarm-style evolution of natural-language skills for a
population of LLM agents, with majority-vote inference over the evolved
population."""

from .core import (
    AgentState,
    BackendSpec,
    ConfigError,
    Direction,
    RunConfig,
    Skill,
    SwarmState,
    Velocity,
    enforce_length,
    validate_config,
    word_count,
)
from .backend import Backend, BackendError, ModelRequest, ModelResponse, mock_world_answer
from .data import (
    DatasetPools,
    Problem,
    ValidationScheduler,
    generate_mock_dataset,
    load_jsonl,
    split_pools,
)
from .estimator import SkillSwarmOptimizer
from .grading import (
    CorrectnessMatrix,
    MetricsReport,
    SolveRecord,
    accuracy_majority,
    avg_at_k,
    grade,
    majority_vote,
    normalize_answer,
    pass_at_k,
)
from .prompts import PromptTemplate, default_initial_skills, render
from .swarm import (
    IterationOutcome,
    OptimizationResult,
    PeerObservation,
    build_observation,
    evaluate_skills,
    run_optimization,
)

__version__ = "0.1.0"

__all__ = [
    "AgentState",
    "Backend",
    "BackendError",
    "BackendSpec",
    "ConfigError",
    "CorrectnessMatrix",
    "DatasetPools",
    "Direction",
    "IterationOutcome",
    "MetricsReport",
    "ModelRequest",
    "ModelResponse",
    "OptimizationResult",
    "PeerObservation",
    "Problem",
    "PromptTemplate",
    "RunConfig",
    "Skill",
    "SkillSwarmOptimizer",
    "SolveRecord",
    "SwarmState",
    "ValidationScheduler",
    "Velocity",
    "accuracy_majority",
    "avg_at_k",
    "build_observation",
    "default_initial_skills",
    "enforce_length",
    "evaluate_skills",
    "generate_mock_dataset",
    "grade",
    "load_jsonl",
    "majority_vote",
    "mock_world_answer",
    "normalize_answer",
    "pass_at_k",
    "render",
    "run_optimization",
    "split_pools",
    "validate_config",
    "word_count",
]
