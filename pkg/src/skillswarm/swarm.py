"""The iteration engine: parallel solving, peer observation, the three
semantic update calls, fitness evaluation, and margin-gated best selection.

Each iteration runs the same four-phase loop: all agents solve one shared
training batch independently, each agent derives a self-reflective direction
from the population's graded outputs, combines it with its previous velocity
and the personal/global best skills into a new velocity, rewrites its skill,
and finally the updated skills are scored on the current validation subset to
update the personal and global bests under a strict epsilon margin.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import store
from .backend import Backend, BackendError, MockWorldError, ModelRequest
from .core import (
    AgentState,
    Direction,
    RunConfig,
    Skill,
    SwarmState,
    Velocity,
    enforce_length,
    validate_config,
)
from .data import (
    DatasetPools,
    Problem,
    ValidationScheduler,
    advance_scheduler,
    current_val_subset,
    load_jsonl,
    make_scheduler,
    sample_train_batch,
    split_pools,
)
from .grading import (
    CorrectnessMatrix,
    MetricsReport,
    SolveRecord,
    grade,
    metrics_report,
    normalize_answer,
)
from .prompts import (
    PURPOSE_REFLECT,
    PURPOSE_SKILL_UPDATE,
    PURPOSE_SOLVE,
    PURPOSE_VELOCITY,
    default_initial_skills,
    reflect_template,
    render,
    skill_update_template,
    solve_template,
    velocity_template,
)

logger = logging.getLogger(__name__)


class SolutionParseError(ValueError):
    """Model output did not contain a usable JSON answer object."""


# absorbs float noise in the strict margin comparison: a delta that equals
# epsilon mathematically (e.g. 0.81 - 0.80 vs 0.01) must not count as an
# improvement; real score deltas are multiples of 1/val_batch, far larger
_MARGIN_SLACK = 1e-12


def _improves(candidate_score: float, best_score: float, epsilon: float) -> bool:
    return candidate_score - best_score > epsilon + _MARGIN_SLACK


@dataclass(frozen=True)
class PeerObservation:
    """What one agent gets to see about the population's batch outputs.

    Contains answers, reasoning traces, and correctness flags for everyone,
    but never any agent's skill text: records are built from graded outputs
    only, so peers' strategies must be inferred from behavior.
    """

    subject_agent: int
    own_records: tuple[SolveRecord, ...]
    peer_records: tuple[SolveRecord, ...]


@dataclass(frozen=True)
class IterationOutcome:
    """Everything one iteration produced, for trajectory logging."""

    iteration: int
    val_subset_index: int
    scheduler_rotated: bool
    train_records: tuple[tuple[SolveRecord, ...], ...]
    directions: tuple[Direction, ...]
    raw_directions: tuple[str, ...]
    new_velocities: tuple[Velocity, ...]
    raw_velocities: tuple[str, ...]
    new_skills: tuple[Skill, ...]
    raw_skills: tuple[str, ...]
    val_scores: tuple[float, ...]
    personal_best_scores: tuple[float, ...]
    personal_best_updated: tuple[bool, ...]
    global_best_agent: int
    global_best_score: float
    global_best_updated: bool

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "val_subset_index": self.val_subset_index,
            "scheduler_rotated": self.scheduler_rotated,
            "train_records": [
                [r.to_dict() for r in agent_records] for agent_records in self.train_records
            ],
            "directions": [d.text for d in self.directions],
            "raw_directions": list(self.raw_directions),
            "new_velocities": [v.text for v in self.new_velocities],
            "raw_velocities": list(self.raw_velocities),
            "new_skills": [{"text": s.text, "identity_label": s.identity_label} for s in self.new_skills],
            "raw_skills": list(self.raw_skills),
            "val_scores": list(self.val_scores),
            "personal_best_scores": list(self.personal_best_scores),
            "personal_best_updated": list(self.personal_best_updated),
            "global_best_agent": self.global_best_agent,
            "global_best_score": self.global_best_score,
            "global_best_updated": self.global_best_updated,
        }


@dataclass(frozen=True)
class OptimizationResult:
    state: SwarmState
    personal_bests: tuple[Skill, ...]
    personal_best_scores: tuple[float, ...]
    global_best: Skill
    global_best_score: float
    run_dir: str
    completed_iterations: int
    resumed_from: Optional[int] = None


# =============================================================================
# Solving and parsing
# =============================================================================

def parse_solution(raw_model_text: str, expected_agent_id: Optional[int] = None) -> tuple[str, str]:
    """Extract (reasoning, answer) from the first balanced JSON object.

    The request context is authoritative for routing: an ``agent_id`` field
    in the output is ignored beyond a debug note.
    """
    decoder = json.JSONDecoder()
    idx = raw_model_text.find("{")
    while idx >= 0:
        try:
            obj, _ = decoder.raw_decode(raw_model_text, idx)
        except json.JSONDecodeError:
            idx = raw_model_text.find("{", idx + 1)
            continue
        if not isinstance(obj, dict):
            idx = raw_model_text.find("{", idx + 1)
            continue
        if "answer" not in obj or obj["answer"] is None:
            raise SolutionParseError("JSON object is missing the 'answer' field")
        if expected_agent_id is not None and obj.get("agent_id") not in (None, expected_agent_id):
            logger.debug(
                "solution agent_id %r differs from request agent %d; using request context",
                obj.get("agent_id"),
                expected_agent_id,
            )
        return str(obj.get("reasoning", "") or ""), str(obj["answer"])
    raise SolutionParseError("no JSON object found in model output")


def _solve_one(
    backend: Backend,
    config: RunConfig,
    skill: Skill,
    problem: Problem,
    agent_id: int,
    iteration: int,
) -> SolveRecord:
    prompt = render(
        solve_template(config.task_domain),
        {"skill_text": skill.text, "question": problem.question, "agent_id": str(agent_id)},
    )
    request = ModelRequest(
        system_text="",
        user_text=prompt,
        purpose=PURPOSE_SOLVE,
        max_output_words=0,
        agent_id=agent_id,
        iteration=iteration,
    )
    reasoning, answer = "", ""
    for attempt in range(2):  # one re-prompt on unparseable output
        try:
            response = backend.complete(request)
        except (BackendError, MockWorldError) as exc:
            logger.warning(
                "solve call failed (agent %d, problem %s): %s", agent_id, problem.id, exc
            )
            break
        try:
            reasoning, answer = parse_solution(response.text, agent_id)
            break
        except SolutionParseError as exc:
            logger.warning(
                "unparseable solve output (agent %d, problem %s, attempt %d): %s",
                agent_id,
                problem.id,
                attempt + 1,
                exc,
            )
    answer = normalize_answer(answer)
    return SolveRecord(
        agent_id=agent_id,
        problem_id=problem.id,
        reasoning=reasoning,
        answer=answer,
        correct=grade(answer, problem.gold_answer),
    )


def solve_batch(
    state: SwarmState,
    batch: Sequence[Problem],
    backend: Backend,
    config: RunConfig,
) -> list[list[SolveRecord]]:
    """All agents solve the same batch independently with their current
    skills. Calls overlap up to the configured parallelism; one failed call
    only costs that one record."""
    if not batch:
        raise ValueError("solve_batch needs a non-empty batch")
    results: dict[tuple[int, int], SolveRecord] = {}
    with ThreadPoolExecutor(max_workers=config.max_parallel_calls) as pool:
        futures = {
            pool.submit(
                _solve_one, backend, config, agent.skill, problem, agent.agent_id, state.iteration
            ): (agent.agent_id, pidx)
            for agent in state.agents
            for pidx, problem in enumerate(batch)
        }
        for future, key in futures.items():
            results[key] = future.result()
    return [
        [results[(agent.agent_id, pidx)] for pidx in range(len(batch))] for agent in state.agents
    ]


def evaluate_skill(
    skill: Skill,
    val_subset: Sequence[Problem],
    backend: Backend,
    config: RunConfig,
    agent_id: int = 0,
    iteration: int = 0,
) -> float:
    """Validation accuracy of one skill on one subset (the fitness signal)."""
    if not val_subset:
        raise ValueError("evaluate_skill needs a non-empty subset")
    with ThreadPoolExecutor(max_workers=config.max_parallel_calls) as pool:
        records = list(
            pool.map(
                lambda problem: _solve_one(backend, config, skill, problem, agent_id, iteration),
                val_subset,
            )
        )
    return sum(1 for r in records if r.correct) / len(records)


def solve_with_skills(
    skills: Sequence[Skill],
    problems: Sequence[Problem],
    backend: Backend,
    config: RunConfig,
    iteration: int = 0,
) -> list[list[SolveRecord]]:
    """Run an arbitrary skill list over a problem set (evaluation-time use:
    each skill acts as one independent agent)."""
    results: dict[tuple[int, int], SolveRecord] = {}
    with ThreadPoolExecutor(max_workers=config.max_parallel_calls) as pool:
        futures = {
            pool.submit(_solve_one, backend, config, skill, problem, sidx, iteration): (sidx, pidx)
            for sidx, skill in enumerate(skills)
            for pidx, problem in enumerate(problems)
        }
        for future, key in futures.items():
            results[key] = future.result()
    return [
        [results[(sidx, pidx)] for pidx in range(len(problems))] for sidx in range(len(skills))
    ]


def evaluate_skills(
    skills: Sequence[Skill],
    problems: Sequence[Problem],
    backend: Backend,
    config: RunConfig,
) -> tuple[MetricsReport, list[list[SolveRecord]]]:
    """Score a skill population on a problem set: majority-vote accuracy,
    pass@k, avg@k, and per-agent accuracies."""
    if not problems:
        raise ValueError("evaluate_skills needs a non-empty problem set")
    records = solve_with_skills(skills, problems, backend, config)
    matrix = CorrectnessMatrix.from_records(records)
    answers_by_problem = [
        [records[a][p].answer for a in range(len(skills))] for p in range(len(problems))
    ]
    golds = [p.gold_answer for p in problems]
    return metrics_report(answers_by_problem, golds, matrix), records


# =============================================================================
# Observation and the three update calls
# =============================================================================

def build_observation(
    agent_id: int, all_records: Sequence[Sequence[SolveRecord]]
) -> PeerObservation:
    """Split the population's batch records into own vs. peer, in agent
    order. Skill texts are structurally absent."""
    own: tuple[SolveRecord, ...] = ()
    peers: list[SolveRecord] = []
    for records in all_records:
        if records and records[0].agent_id == agent_id:
            own = tuple(records)
        else:
            peers.extend(records)
    return PeerObservation(subject_agent=agent_id, own_records=own, peer_records=tuple(peers))


def records_json(records: Sequence[SolveRecord]) -> str:
    return json.dumps([r.to_dict() for r in records], indent=2)


def _model_text(backend: Backend, request: ModelRequest) -> Optional[str]:
    try:
        return backend.complete(request).text
    except (BackendError, MockWorldError) as exc:
        logger.warning(
            "%s call failed (agent %d, iteration %d): %s",
            request.purpose,
            request.agent_id,
            request.iteration,
            exc,
        )
        return None


def reflect(
    agent: AgentState,
    observation: PeerObservation,
    backend: Backend,
    config: RunConfig,
    iteration: int = 0,
) -> tuple[Direction, str]:
    """Derive the self-reflective improvement direction from the graded
    batch. Returns (enforced direction, raw model text); a failed call
    degrades to an empty direction."""
    prompt = render(
        reflect_template(),
        {
            "current_skill": agent.skill.text,
            "own_outputs_json": records_json(observation.own_records),
            "peer_outputs_json": records_json(observation.peer_records),
        },
    )
    raw = _model_text(
        backend,
        ModelRequest("", prompt, PURPOSE_REFLECT, config.max_velocity_words, agent.agent_id, iteration),
    )
    if raw is None:
        return Direction(""), ""
    return Direction(enforce_length(raw.strip(), config.max_velocity_words)), raw


def velocity_update(
    agent: AgentState,
    direction: Direction,
    global_best: Skill,
    backend: Backend,
    config: RunConfig,
    iteration: int = 0,
) -> tuple[Velocity, str]:
    """Combine previous velocity, direction, and the personal/global bests
    into the next semantic velocity. A failed call keeps the previous
    velocity."""
    prompt = render(
        velocity_template(),
        {
            "agent_identity": agent.skill.identity_label,
            "previous_velocity": agent.velocity.text,
            "direction": direction.text,
            "current_skill": agent.skill.text,
            "personal_best_skill": agent.personal_best.text,
            "global_best_skill": global_best.text,
            "max_velocity_words": str(config.max_velocity_words),
        },
    )
    raw = _model_text(
        backend,
        ModelRequest("", prompt, PURPOSE_VELOCITY, config.max_velocity_words, agent.agent_id, iteration),
    )
    if raw is None:
        return agent.velocity, ""
    return Velocity(enforce_length(raw.strip(), config.max_velocity_words)), raw


def skill_update(
    agent: AgentState,
    new_velocity: Velocity,
    backend: Backend,
    config: RunConfig,
    iteration: int = 0,
) -> tuple[Skill, str]:
    """Rewrite the current skill along the new velocity, preserving the
    identity label. Failed or empty output keeps the skill unchanged."""
    prompt = render(
        skill_update_template(),
        {
            "agent_identity": agent.skill.identity_label,
            "current_skill": agent.skill.text,
            "velocity": new_velocity.text,
            "max_skill_words": str(config.max_skill_words),
        },
    )
    raw = _model_text(
        backend,
        ModelRequest(
            "", prompt, PURPOSE_SKILL_UPDATE, config.max_skill_words, agent.agent_id, iteration
        ),
    )
    if raw is None or not raw.strip():
        return agent.skill, raw or ""
    text = enforce_length(raw.strip(), config.max_skill_words)
    return Skill(text=text, identity_label=agent.skill.identity_label), raw


# =============================================================================
# Best-state selection
# =============================================================================

def update_personal_best(
    agent: AgentState,
    candidate_skill: Skill,
    candidate_score: float,
    epsilon: float,
    iteration: int = 0,
) -> AgentState:
    """Adopt the candidate as personal best only on a strict > epsilon
    improvement over the stored best score."""
    if _improves(candidate_score, agent.personal_best_score, epsilon):
        return replace(
            agent,
            personal_best=candidate_skill,
            personal_best_score=candidate_score,
            personal_best_iteration=iteration,
        )
    return agent


def _argmax_lowest(scores: Sequence[float]) -> int:
    best = 0
    for i, score in enumerate(scores):
        if score > scores[best]:
            best = i
    return best


def update_global_best(
    state: SwarmState,
    candidates_with_scores: Sequence[tuple[Skill, float]],
    epsilon: float,
) -> SwarmState:
    """Adopt the best-scoring candidate (ties to the lowest agent index) as
    global best only on a strict > epsilon improvement."""
    if len(candidates_with_scores) != state.num_agents:
        raise ValueError(
            f"expected {state.num_agents} candidates, got {len(candidates_with_scores)}"
        )
    best_idx = _argmax_lowest([score for _, score in candidates_with_scores])
    best_skill, best_score = candidates_with_scores[best_idx]
    if _improves(best_score, state.global_best_score, epsilon):
        return replace(
            state,
            global_best=best_skill,
            global_best_score=best_score,
            global_best_agent=best_idx,
        )
    return state


# =============================================================================
# The optimization loop
# =============================================================================

def initialize(
    config: RunConfig,
    initial_skills: Sequence[Skill],
    scheduler: ValidationScheduler,
    backend: Backend,
) -> SwarmState:
    """Score the seed skills on the first validation subset and set up the
    population: empty velocities, personal bests = seeds, global best =
    argmax (ties to the lowest agent index)."""
    if len(initial_skills) != config.num_agents:
        raise ValueError(
            f"expected {config.num_agents} initial skills, got {len(initial_skills)}"
        )
    subset = current_val_subset(scheduler)
    scores = [
        evaluate_skill(skill, subset, backend, config, agent_id=i, iteration=0)
        for i, skill in enumerate(initial_skills)
    ]
    agents = tuple(
        AgentState(
            agent_id=i,
            skill=skill,
            velocity=Velocity(""),
            personal_best=skill,
            personal_best_score=scores[i],
            personal_best_iteration=0,
        )
        for i, skill in enumerate(initial_skills)
    )
    best = _argmax_lowest(scores)
    return SwarmState(
        agents=agents,
        global_best=initial_skills[best],
        global_best_score=scores[best],
        global_best_agent=best,
        iteration=0,
        scheduler_cursor=scheduler.cursor,
        seed=config.seed,
    )


def run_iteration(
    state: SwarmState,
    pools: DatasetPools,
    scheduler: ValidationScheduler,
    backend: Backend,
    config: RunConfig,
) -> tuple[SwarmState, ValidationScheduler, IterationOutcome]:
    """One full loop pass. Returns the successor state, the (possibly
    rotated) scheduler, and the outcome record for logging."""
    iteration = state.iteration + 1
    batch = sample_train_batch(pools, state.iteration, config.seed, config.train_batch)
    all_records = solve_batch(state, batch, backend, config)

    def update_chain(agent: AgentState) -> tuple[Direction, str, Velocity, str, Skill, str]:
        observation = build_observation(agent.agent_id, all_records)
        direction, raw_d = reflect(agent, observation, backend, config, iteration)
        velocity, raw_v = velocity_update(
            agent, direction, state.global_best, backend, config, iteration
        )
        skill, raw_s = skill_update(agent, velocity, backend, config, iteration)
        return direction, raw_d, velocity, raw_v, skill, raw_s

    # the d -> v -> s chain is sequential per agent but independent across them
    with ThreadPoolExecutor(max_workers=config.max_parallel_calls) as pool:
        chains = list(pool.map(update_chain, state.agents))
    directions = tuple(c[0] for c in chains)
    raw_directions = tuple(c[1] for c in chains)
    velocities = tuple(c[2] for c in chains)
    raw_velocities = tuple(c[3] for c in chains)
    skills = tuple(c[4] for c in chains)
    raw_skills = tuple(c[5] for c in chains)

    subset = current_val_subset(scheduler)
    val_scores = tuple(
        evaluate_skill(skills[i], subset, backend, config, agent_id=i, iteration=iteration)
        for i in range(state.num_agents)
    )

    new_agents = []
    pb_updated = []
    for agent, skill, velocity, score in zip(state.agents, skills, velocities, val_scores):
        moved = replace(agent, skill=skill, velocity=velocity)
        updated = update_personal_best(moved, skill, score, config.epsilon, iteration)
        pb_updated.append(updated.personal_best_iteration == iteration)
        new_agents.append(updated)

    next_state = replace(state, agents=tuple(new_agents))
    before_gb_score = next_state.global_best_score
    next_state = update_global_best(next_state, list(zip(skills, val_scores)), config.epsilon)
    gb_updated = next_state.global_best_score != before_gb_score

    rotated = any(score == 1.0 for score in val_scores)
    next_scheduler = advance_scheduler(scheduler, rotated)
    next_state = replace(
        next_state, iteration=iteration, scheduler_cursor=next_scheduler.cursor
    )

    outcome = IterationOutcome(
        iteration=iteration,
        val_subset_index=scheduler.cursor,
        scheduler_rotated=rotated,
        train_records=tuple(tuple(records) for records in all_records),
        directions=directions,
        raw_directions=raw_directions,
        new_velocities=velocities,
        raw_velocities=raw_velocities,
        new_skills=skills,
        raw_skills=raw_skills,
        val_scores=val_scores,
        personal_best_scores=tuple(a.personal_best_score for a in new_agents),
        personal_best_updated=tuple(pb_updated),
        global_best_agent=next_state.global_best_agent,
        global_best_score=next_state.global_best_score,
        global_best_updated=gb_updated,
    )
    return next_state, next_scheduler, outcome


def run_optimization(
    config: RunConfig,
    initial_skills: Optional[Sequence[Skill]] = None,
    resume: bool = False,
    on_iteration: Optional[Callable[[int, SwarmState], None]] = None,
) -> OptimizationResult:
    """Run (or resume) the full optimization and persist every step.

    Checkpoints land in ``run_dir/iter_NNNN/state.json`` after each
    iteration; the trajectory log gains one line per iteration. With the
    mock backend the whole run is a pure function of (config, seed).
    """
    config = validate_config(config)
    if not config.run_dir:
        raise ValueError("config.run_dir is required")
    if not config.dataset_path:
        raise ValueError("config.dataset_path is required")
    run_dir = Path(config.run_dir)
    problems = load_jsonl(config.dataset_path)
    pools = split_pools(problems, config, config.seed)
    scheduler = make_scheduler(pools.validation, config.val_batch)
    backend = Backend(config.backend, config.max_parallel_calls)

    run_dir.mkdir(parents=True, exist_ok=True)
    lock = store.acquire_lock(run_dir)
    try:
        store.write_config(run_dir, config)
        store.write_split_manifest(run_dir, pools)
        resumed_from: Optional[int] = None
        if not resume and store.has_checkpoints(run_dir):
            raise store.StoreError(
                f"{run_dir} already contains checkpoints; pass resume=True or use a fresh directory"
            )
        if resume and store.has_checkpoints(run_dir):
            checkpoint = store.load_latest(run_dir)
            stored = dict(checkpoint.config)
            current = config.to_dict(include_run_dir=False)
            if stored != current:
                raise store.StoreError(
                    "checkpoint config does not match the current config; "
                    "refusing to resume with different settings"
                )
            expected_ids = tuple(tuple(p.id for p in s) for s in scheduler.subsets)
            if checkpoint.scheduler_subset_ids != expected_ids:
                raise store.StoreError(
                    "checkpoint validation subsets do not match the dataset split"
                )
            state = checkpoint.state
            scheduler = replace(scheduler, cursor=checkpoint.scheduler_cursor)
            resumed_from = state.iteration
            store.truncate_trajectory(run_dir, state.iteration)
            logger.info("resumed from iteration %d", state.iteration)
        else:
            skills = list(initial_skills) if initial_skills is not None else default_initial_skills()
            state = initialize(config, skills, scheduler, backend)

        while state.iteration < config.num_iterations:
            state, scheduler, outcome = run_iteration(state, pools, scheduler, backend, config)
            store.append_trajectory(run_dir, outcome.to_dict())
            store.save_checkpoint(run_dir, store.make_checkpoint(config, state, scheduler))
            if on_iteration is not None:
                on_iteration(state.iteration, state)

        store.write_summary(run_dir, config, state)
        store.export_skills(run_dir, state)
    finally:
        store.release_lock(lock)

    return OptimizationResult(
        state=state,
        personal_bests=tuple(a.personal_best for a in state.agents),
        personal_best_scores=tuple(a.personal_best_score for a in state.agents),
        global_best=state.global_best,
        global_best_score=state.global_best_score,
        run_dir=str(run_dir),
        completed_iterations=state.iteration,
        resumed_from=resumed_from,
    )
