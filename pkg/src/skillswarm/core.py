"""Shared domain types and word-budget enforcement.

Skills, velocities, and directions are plain natural-language strings with a
word budget. Everything here is an immutable value: state changes happen by
constructing successor objects, which keeps concurrent fan-out safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping, Optional

DEFAULT_NUM_AGENTS = 4
DEFAULT_NUM_ITERATIONS = 10
DEFAULT_TRAIN_POOL = 100
DEFAULT_VAL_POOL = 100
DEFAULT_TRAIN_BATCH = 10
DEFAULT_VAL_BATCH = 20
DEFAULT_EPSILON = 0.01
DEFAULT_MAX_VELOCITY_WORDS = 200
DEFAULT_MAX_SKILL_WORDS = 1200
DEFAULT_MAX_PARALLEL_CALLS = 4


class ConfigError(ValueError):
    """Raised when a run configuration violates an invariant."""


def word_count(text: str) -> int:
    """Number of maximal whitespace-separated tokens in *text*."""
    return len(text.split())


def enforce_length(text: str, max_words: int) -> str:
    """Truncate *text* to its first *max_words* words.

    Text already within budget is returned unchanged (whitespace intact);
    otherwise the surviving words are re-joined with single spaces.
    """
    if max_words < 1:
        raise ValueError(f"max_words must be >= 1, got {max_words}")
    words = text.split()
    if len(words) <= max_words:
        return text
    return " ".join(words[:max_words])


@dataclass(frozen=True)
class Skill:
    """A natural-language instruction telling an agent how to reason.

    ``identity_label`` is a short role name (e.g. "Self-Refine") that is
    injected into update prompts and preserved verbatim across rewrites.
    """

    text: str
    identity_label: str = ""


@dataclass(frozen=True)
class Velocity:
    """A natural-language update direction. The empty text is the valid
    initial value."""

    text: str = ""


@dataclass(frozen=True)
class Direction:
    """A self-reflective improvement summary produced by the reflect step."""

    text: str = ""


@dataclass(frozen=True)
class BackendSpec:
    """Which model-completion backend to use and how to talk to it.

    ``kind`` is "mock" for the deterministic offline backend or "http" for a
    chat-completions endpoint. The credential is always read from the
    environment variable named by ``credential_env_var``; it is never stored.
    """

    kind: str = "mock"
    endpoint_url: str = ""
    model_name: str = ""
    credential_env_var: str = "SKILLSWARM_API_KEY"
    timeout_ms: int = 60_000
    max_retries: int = 3
    retry_backoff_ms: int = 500
    temperature: Optional[float] = None

    def validate(self) -> "BackendSpec":
        if self.kind not in ("http", "mock"):
            raise ConfigError(f"backend.kind must be 'http' or 'mock', got {self.kind!r}")
        if self.kind == "http":
            if not self.endpoint_url:
                raise ConfigError("backend.endpoint_url is required for kind='http'")
            if not self.model_name:
                raise ConfigError("backend.model_name is required for kind='http'")
        if self.max_retries < 0:
            raise ConfigError("backend.max_retries must be >= 0")
        return self

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "endpoint_url": self.endpoint_url,
            "model_name": self.model_name,
            "credential_env_var": self.credential_env_var,
            "timeout_ms": self.timeout_ms,
            "max_retries": self.max_retries,
            "retry_backoff_ms": self.retry_backoff_ms,
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BackendSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown backend field(s): {sorted(unknown)}")
        return cls(**data).validate()


@dataclass(frozen=True)
class AgentState:
    """One particle: current skill, semantic velocity, and personal best."""

    agent_id: int
    skill: Skill
    velocity: Velocity
    personal_best: Skill
    personal_best_score: float
    personal_best_iteration: int = 0


@dataclass(frozen=True)
class SwarmState:
    """The whole population plus the global best and iteration bookkeeping."""

    agents: tuple[AgentState, ...]
    global_best: Skill
    global_best_score: float
    global_best_agent: int
    iteration: int
    scheduler_cursor: int
    seed: int

    @property
    def num_agents(self) -> int:
        return len(self.agents)


@dataclass(frozen=True)
class RunConfig:
    """All run hyperparameters plus backend, dataset, and output settings.

    Defaults are the standard optimization setup: 4 agents, 10 iterations,
    100/100 train/validation pools, batches of 10/20, epsilon margin 0.01,
    and word budgets of 200 (velocity) / 1200 (skill).
    """

    num_agents: int = DEFAULT_NUM_AGENTS
    num_iterations: int = DEFAULT_NUM_ITERATIONS
    train_pool: int = DEFAULT_TRAIN_POOL
    val_pool: int = DEFAULT_VAL_POOL
    train_batch: int = DEFAULT_TRAIN_BATCH
    val_batch: int = DEFAULT_VAL_BATCH
    epsilon: float = DEFAULT_EPSILON
    max_velocity_words: int = DEFAULT_MAX_VELOCITY_WORDS
    max_skill_words: int = DEFAULT_MAX_SKILL_WORDS
    max_parallel_calls: int = DEFAULT_MAX_PARALLEL_CALLS
    seed: int = 0
    backend: BackendSpec = field(default_factory=BackendSpec)
    dataset_path: str = ""
    run_dir: str = ""
    task_domain: str = "mathematics competition"

    def to_dict(self, include_run_dir: bool = True) -> dict[str, Any]:
        """Serialize to a plain dict. ``run_dir`` is excluded from checkpoint
        snapshots so identical runs in different directories stay
        byte-identical."""
        out = {
            "num_agents": self.num_agents,
            "num_iterations": self.num_iterations,
            "train_pool": self.train_pool,
            "val_pool": self.val_pool,
            "train_batch": self.train_batch,
            "val_batch": self.val_batch,
            "epsilon": self.epsilon,
            "max_velocity_words": self.max_velocity_words,
            "max_skill_words": self.max_skill_words,
            "max_parallel_calls": self.max_parallel_calls,
            "seed": self.seed,
            "backend": self.backend.to_dict(),
            "dataset_path": self.dataset_path,
            "task_domain": self.task_domain,
        }
        if include_run_dir:
            out["run_dir"] = self.run_dir
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        payload = dict(data)
        backend = payload.get("backend")
        if isinstance(backend, Mapping):
            payload["backend"] = BackendSpec.from_dict(backend)
        return validate_config(cls(**payload))


def validate_config(config: Optional[RunConfig | Mapping[str, Any]] = None) -> RunConfig:
    """Check every config invariant, filling absent fields with the defaults.

    Accepts a ``RunConfig``, a mapping of overrides, or ``None`` (pure
    defaults). Raises :class:`ConfigError` naming the offending field.
    """
    if config is None:
        config = RunConfig()
    elif isinstance(config, Mapping):
        return RunConfig.from_dict(config)
    if config.num_agents < 2:
        raise ConfigError(f"num_agents must be >= 2 (a swarm needs peers), got {config.num_agents}")
    if config.num_iterations < 1:
        raise ConfigError(f"num_iterations must be >= 1, got {config.num_iterations}")
    if config.epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {config.epsilon}")
    if config.train_batch < 1:
        raise ConfigError(f"train_batch must be positive, got {config.train_batch}")
    if config.val_batch < 1:
        raise ConfigError(f"val_batch must be positive, got {config.val_batch}")
    if config.train_pool < config.train_batch:
        raise ConfigError(
            f"train_pool ({config.train_pool}) must be >= train_batch ({config.train_batch})"
        )
    if config.val_pool % config.val_batch != 0:
        raise ConfigError(
            f"val_pool ({config.val_pool}) must be divisible by val_batch ({config.val_batch})"
        )
    if config.max_velocity_words < 1:
        raise ConfigError("max_velocity_words must be >= 1")
    if config.max_skill_words < 1:
        raise ConfigError("max_skill_words must be >= 1")
    if config.max_parallel_calls < 1:
        raise ConfigError("max_parallel_calls must be >= 1")
    config.backend.validate()
    return config


def with_backend(config: RunConfig, backend: BackendSpec) -> RunConfig:
    """Return a copy of *config* using a different backend spec."""
    return replace(config, backend=backend.validate())
