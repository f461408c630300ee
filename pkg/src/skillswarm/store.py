"""Run-directory persistence: checkpoints, trajectory logs, reports, resume.

Layout of a run directory:

    config.json           full config snapshot (human reference)
    split_manifest.json   problem ids per pool
    trajectory.jsonl      one JSON object per completed iteration
    iter_NNNN/state.json  digest-verified checkpoint after iteration NNNN
    summary.json          final bests
    skills/               exported skill files (personal bests + global best)
    report.json/.csv      evaluation reports
    lock                  single-writer guard (holds the owner pid)

Checkpoints are written atomically (temp file + rename) and carry a sha256
digest over their canonical payload; loading verifies the digest and skips
corrupt files. Nothing time- or host-dependent is stored, so identical runs
produce byte-identical checkpoint sequences.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .core import AgentState, RunConfig, Skill, SwarmState, Velocity
from .data import DatasetPools, ValidationScheduler
from .grading import MetricsReport

logger = logging.getLogger(__name__)

CHECKPOINT_FILENAME = "state.json"
TRAJECTORY_FILENAME = "trajectory.jsonl"
LOCK_FILENAME = "lock"


class StoreError(RuntimeError):
    """Raised on persistence failures and unresumable run directories."""


@dataclass(frozen=True)
class RunCheckpoint:
    config: dict
    state: SwarmState
    scheduler_cursor: int
    scheduler_subset_ids: tuple[tuple[str, ...], ...]
    iteration: int
    digest: str = ""


# =============================================================================
# Serialization helpers
# =============================================================================

def _skill_to_dict(skill: Skill) -> dict:
    return {"text": skill.text, "identity_label": skill.identity_label}


def _skill_from_dict(data: Mapping[str, Any]) -> Skill:
    return Skill(text=data["text"], identity_label=data.get("identity_label", ""))


def _agent_to_dict(agent: AgentState) -> dict:
    return {
        "agent_id": agent.agent_id,
        "skill": _skill_to_dict(agent.skill),
        "velocity": agent.velocity.text,
        "personal_best": _skill_to_dict(agent.personal_best),
        "personal_best_score": agent.personal_best_score,
        "personal_best_iteration": agent.personal_best_iteration,
    }


def _agent_from_dict(data: Mapping[str, Any]) -> AgentState:
    return AgentState(
        agent_id=data["agent_id"],
        skill=_skill_from_dict(data["skill"]),
        velocity=Velocity(data["velocity"]),
        personal_best=_skill_from_dict(data["personal_best"]),
        personal_best_score=data["personal_best_score"],
        personal_best_iteration=data["personal_best_iteration"],
    )


def state_to_dict(state: SwarmState) -> dict:
    return {
        "agents": [_agent_to_dict(a) for a in state.agents],
        "global_best": _skill_to_dict(state.global_best),
        "global_best_score": state.global_best_score,
        "global_best_agent": state.global_best_agent,
        "iteration": state.iteration,
        "scheduler_cursor": state.scheduler_cursor,
        "seed": state.seed,
    }


def state_from_dict(data: Mapping[str, Any]) -> SwarmState:
    return SwarmState(
        agents=tuple(_agent_from_dict(a) for a in data["agents"]),
        global_best=_skill_from_dict(data["global_best"]),
        global_best_score=data["global_best_score"],
        global_best_agent=data["global_best_agent"],
        iteration=data["iteration"],
        scheduler_cursor=data["scheduler_cursor"],
        seed=data["seed"],
    )


def _canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _digest(payload: Any) -> str:
    return hashlib.sha256(_canonical_json(payload).encode("utf-8")).hexdigest()


def make_checkpoint(
    config: RunConfig, state: SwarmState, scheduler: ValidationScheduler
) -> RunCheckpoint:
    subset_ids = tuple(tuple(p.id for p in subset) for subset in scheduler.subsets)
    checkpoint = RunCheckpoint(
        config=config.to_dict(include_run_dir=False),
        state=state,
        scheduler_cursor=scheduler.cursor,
        scheduler_subset_ids=subset_ids,
        iteration=state.iteration,
    )
    return checkpoint


def _checkpoint_payload(checkpoint: RunCheckpoint) -> dict:
    return {
        "config": checkpoint.config,
        "state": state_to_dict(checkpoint.state),
        "scheduler": {
            "cursor": checkpoint.scheduler_cursor,
            "subset_ids": [list(ids) for ids in checkpoint.scheduler_subset_ids],
        },
        "iteration": checkpoint.iteration,
    }


def _checkpoint_from_payload(payload: Mapping[str, Any], digest: str) -> RunCheckpoint:
    scheduler = payload["scheduler"]
    return RunCheckpoint(
        config=payload["config"],
        state=state_from_dict(payload["state"]),
        scheduler_cursor=scheduler["cursor"],
        scheduler_subset_ids=tuple(tuple(ids) for ids in scheduler["subset_ids"]),
        iteration=payload["iteration"],
        digest=digest,
    )


# =============================================================================
# Atomic file writes
# =============================================================================

def _write_atomic(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(content)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def save_checkpoint(run_dir: str | Path, checkpoint: RunCheckpoint) -> Path:
    """Write ``iter_NNNN/state.json`` atomically and verify it back."""
    run_dir = Path(run_dir)
    payload = _checkpoint_payload(checkpoint)
    digest = _digest(payload)
    document = json.dumps({"digest": digest, "payload": payload}, sort_keys=True, indent=1)
    path = run_dir / f"iter_{checkpoint.iteration:04d}" / CHECKPOINT_FILENAME
    _write_atomic(path, document)
    reloaded = json.loads(path.read_text(encoding="utf-8"))
    if _digest(reloaded["payload"]) != reloaded["digest"]:
        raise StoreError(f"checkpoint self-verification failed for {path}")
    return path


def _load_checkpoint_file(path: Path) -> RunCheckpoint:
    document = json.loads(path.read_text(encoding="utf-8"))
    payload = document["payload"]
    digest = document["digest"]
    if _digest(payload) != digest:
        raise StoreError(f"checkpoint digest mismatch in {path}")
    return _checkpoint_from_payload(payload, digest)


def _checkpoint_dirs(run_dir: Path) -> list[tuple[int, Path]]:
    found = []
    for child in run_dir.glob("iter_*"):
        suffix = child.name[len("iter_") :]
        if child.is_dir() and suffix.isdigit():
            found.append((int(suffix), child / CHECKPOINT_FILENAME))
    return sorted(found)


def has_checkpoints(run_dir: str | Path) -> bool:
    return any(path.exists() for _, path in _checkpoint_dirs(Path(run_dir)))


def load_latest(run_dir: str | Path) -> RunCheckpoint:
    """The highest-index valid checkpoint; corrupt ones are skipped with a
    warning."""
    run_dir = Path(run_dir)
    for index, path in reversed(_checkpoint_dirs(run_dir)):
        if not path.exists():
            continue
        try:
            return _load_checkpoint_file(path)
        except (StoreError, json.JSONDecodeError, KeyError, OSError) as exc:
            logger.warning("skipping corrupt checkpoint %s: %s", path, exc)
    raise StoreError(f"no resumable state in {run_dir}")


# =============================================================================
# Trajectory log
# =============================================================================

def append_trajectory(run_dir: str | Path, outcome: Mapping[str, Any]) -> None:
    path = Path(run_dir) / TRAJECTORY_FILENAME
    with path.open("a", encoding="utf-8") as handle:
        handle.write(json.dumps(outcome, sort_keys=True) + "\n")


def read_trajectory(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / TRAJECTORY_FILENAME
    if not path.exists():
        raise StoreError(f"no trajectory log in {run_dir}")
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        try:
            entries.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise StoreError(f"{path}:{lineno}: corrupt trajectory line ({exc.msg})") from exc
    iterations = [entry.get("iteration", 0) for entry in entries]
    if iterations != sorted(set(iterations)):
        raise StoreError(f"trajectory iteration indices are not strictly increasing in {path}")
    return entries


def truncate_trajectory(run_dir: str | Path, max_iteration: int) -> None:
    """Drop trajectory lines past *max_iteration* (reconciles a log that got
    ahead of the last durable checkpoint). Torn trailing lines from a crash
    are dropped with a warning."""
    path = Path(run_dir) / TRAJECTORY_FILENAME
    if not path.exists():
        return
    kept = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError:
            logger.warning("dropping torn trajectory line in %s", path)
            continue
        if entry.get("iteration", 0) <= max_iteration:
            kept.append(line)
    _write_atomic(path, "".join(entry + "\n" for entry in kept))


# =============================================================================
# Config, manifest, summary, skills
# =============================================================================

def write_config(run_dir: str | Path, config: RunConfig) -> Path:
    path = Path(run_dir) / "config.json"
    _write_atomic(path, json.dumps(config.to_dict(), sort_keys=True, indent=2))
    return path


def write_split_manifest(run_dir: str | Path, pools: DatasetPools) -> Path:
    manifest = {
        "train": [p.id for p in pools.train],
        "validation": [p.id for p in pools.validation],
        "test": [p.id for p in pools.test],
    }
    path = Path(run_dir) / "split_manifest.json"
    _write_atomic(path, json.dumps(manifest, sort_keys=True, indent=2))
    return path


def write_summary(run_dir: str | Path, config: RunConfig, state: SwarmState) -> Path:
    summary = {
        "iterations_completed": state.iteration,
        "global_best": _skill_to_dict(state.global_best),
        "global_best_score": round(state.global_best_score, 4),
        "global_best_agent": state.global_best_agent,
        "personal_bests": [
            {
                "agent_id": a.agent_id,
                "skill": _skill_to_dict(a.personal_best),
                "score": round(a.personal_best_score, 4),
                "iteration": a.personal_best_iteration,
            }
            for a in state.agents
        ],
        "seed": config.seed,
    }
    path = Path(run_dir) / "summary.json"
    _write_atomic(path, json.dumps(summary, sort_keys=True, indent=2))
    return path


def skill_file_payload(
    skill: Skill, source_run: str, source_iteration: int, score: float
) -> dict:
    return {
        "identity_label": skill.identity_label,
        "text": skill.text,
        "source_run": source_run,
        "source_iteration": source_iteration,
        "score": round(score, 4),
    }


def export_skills(run_dir: str | Path, state: SwarmState) -> list[Path]:
    """Write the final personal bests and global best as standalone skill
    files under ``run_dir/skills/``."""
    run_dir = Path(run_dir)
    out_dir = run_dir / "skills"
    paths = []
    for agent in state.agents:
        payload = skill_file_payload(
            agent.personal_best, run_dir.name, agent.personal_best_iteration,
            agent.personal_best_score,
        )
        path = out_dir / f"agent_{agent.agent_id}.json"
        _write_atomic(path, json.dumps(payload, sort_keys=True, indent=2))
        paths.append(path)
    payload = skill_file_payload(
        state.global_best, run_dir.name, state.iteration, state.global_best_score
    )
    path = out_dir / "global_best.json"
    _write_atomic(path, json.dumps(payload, sort_keys=True, indent=2))
    paths.append(path)
    return paths


def load_skill_file(path: str | Path) -> tuple[Skill, dict]:
    """Read one exported skill file; returns the skill and its metadata."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StoreError(f"cannot read skill file {path}: {exc}") from exc
    if "text" not in data or not str(data["text"]).strip():
        raise StoreError(f"skill file {path} has no usable 'text' field")
    skill = Skill(text=str(data["text"]), identity_label=str(data.get("identity_label", "")))
    return skill, data


# =============================================================================
# Reports
# =============================================================================

@dataclass(frozen=True)
class ReportRow:
    method: str
    dataset: str
    metrics: MetricsReport


def emit_report(out_dir: str | Path, rows: Sequence[ReportRow]) -> tuple[Path, Path]:
    """Write report.json (4 decimals) and report.csv (2 decimals, one row
    per method/dataset)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    csv_path = out_dir / "report.csv"

    json_rows = [
        {"method": row.method, "dataset": row.dataset, **row.metrics.to_dict()} for row in rows
    ]
    _write_atomic(json_path, json.dumps(json_rows, sort_keys=True, indent=2))

    max_agents = max((len(row.metrics.per_agent_accuracy) for row in rows), default=0)
    header = ["method", "dataset", "accuracy", "pass_at_k", "avg_at_k"] + [
        f"agent_{i}_accuracy" for i in range(max_agents)
    ]
    with csv_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            cells = [
                row.method,
                row.dataset,
                f"{row.metrics.accuracy:.2f}",
                f"{row.metrics.pass_at_k:.2f}",
                f"{row.metrics.avg_at_k:.2f}",
            ]
            cells += [f"{v:.2f}" for v in row.metrics.per_agent_accuracy]
            cells += [""] * (max_agents - len(row.metrics.per_agent_accuracy))
            writer.writerow(cells)
    return json_path, csv_path


# =============================================================================
# Single-writer lock
# =============================================================================

def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def acquire_lock(run_dir: str | Path) -> Path:
    """Create the run-dir lock file holding our pid. A lock left by a dead
    process is replaced with a warning."""
    path = Path(run_dir) / LOCK_FILENAME
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            try:
                owner = int(path.read_text(encoding="utf-8").strip() or "0")
            except (OSError, ValueError):
                owner = 0
            if owner and owner != os.getpid() and _pid_alive(owner):
                raise StoreError(
                    f"run directory {run_dir} is locked by running process {owner}"
                )
            logger.warning("replacing stale lock in %s (owner pid %s)", run_dir, owner)
            path.unlink(missing_ok=True)
            continue
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(str(os.getpid()))
        return path
    raise StoreError(f"could not acquire lock in {run_dir}")


def release_lock(lock_path: Path) -> None:
    Path(lock_path).unlink(missing_ok=True)
