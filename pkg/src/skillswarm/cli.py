"""Command-line entry points.

Subcommands:
    optimize      run or resume a skill-evolution run
    evaluate      score exported skills on a dataset split
    transfer      evaluate skills on another dataset and/or backend
    report        turn a run's trajectory into CSV/plain-text summaries
    dump-prompts  write the four prompt template bodies to files
    gen-mock      generate the deterministic offline dataset

Flags override config-file values, which override the built-in defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import store
from .backend import Backend, BackendError
from .core import BackendSpec, ConfigError, RunConfig, Skill, word_count
from .data import (
    DataError,
    generate_mock_dataset,
    load_jsonl,
    split_pools,
    write_jsonl,
)
from .prompts import DEFAULT_TASK_DOMAIN, all_templates
from .swarm import evaluate_skills, run_optimization

logger = logging.getLogger(__name__)


class CliError(RuntimeError):
    """User-facing command failure; its message is the exit diagnostic."""


def _load_config(path: Optional[str], overrides: dict) -> RunConfig:
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from exc
    config = RunConfig.from_dict(data)
    cleaned = {key: value for key, value in overrides.items() if value is not None}
    if cleaned:
        config = RunConfig.from_dict({**config.to_dict(), **cleaned})
    return config


def _backend_from_arg(arg: str) -> BackendSpec:
    if arg == "mock":
        return BackendSpec(kind="mock")
    try:
        data = json.loads(Path(arg).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read backend spec {arg}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"backend spec {arg} is not valid JSON: {exc}") from exc
    return BackendSpec.from_dict(data)


def _load_skills(paths: Sequence[str]) -> tuple[list[Skill], list[dict]]:
    skills, metas = [], []
    for path in paths:
        skill, meta = store.load_skill_file(path)
        skills.append(skill)
        metas.append(meta)
    return skills, metas


def _pick_split(pools, name: str):
    split = {"train": pools.train, "validation": pools.validation, "test": pools.test}[name]
    if not split:
        raise CliError(f"the {name} split is empty for this dataset/config")
    return split


# =============================================================================
# Subcommands
# =============================================================================

def cmd_optimize(args: argparse.Namespace) -> int:
    config = _load_config(
        args.config,
        {"run_dir": args.run_dir, "dataset_path": args.dataset, "seed": args.seed},
    )
    if not config.dataset_path:
        raise CliError("no dataset: pass --dataset or set dataset_path in the config")
    if not config.run_dir:
        raise CliError("no run directory: pass --run-dir or set run_dir in the config")
    if not Path(config.dataset_path).exists():
        raise CliError(f"dataset path does not exist: {config.dataset_path}")

    if args.resume and store.has_checkpoints(config.run_dir):
        latest = store.load_latest(config.run_dir)
        if latest.iteration >= config.num_iterations:
            print(f"already complete: {latest.iteration} iterations in {config.run_dir}")
            return 0

    initial_skills = None
    if args.initial_skills:
        initial_skills, _ = _load_skills(args.initial_skills)

    def progress(iteration: int, state) -> None:
        print(
            f"iteration {iteration:3d}  global_best={state.global_best_score:.4f} "
            f"(agent {state.global_best_agent})"
        )

    result = run_optimization(
        config, initial_skills=initial_skills, resume=args.resume, on_iteration=progress
    )
    print(f"run complete: {result.completed_iterations} iterations in {result.run_dir}")
    print(f"global best score: {result.global_best_score:.4f}")
    for agent_id, score in enumerate(result.personal_best_scores):
        print(f"agent {agent_id} personal best score: {score:.4f}")
    return 0


def _evaluate_common(
    args: argparse.Namespace, config: RunConfig, method: str, backend_spec: BackendSpec
) -> int:
    skills, _ = _load_skills(args.skills)
    if len(skills) != config.num_agents and not args.allow_k:
        raise CliError(
            f"got {len(skills)} skill file(s) but the config expects "
            f"{config.num_agents} agents; pass --allow-k to evaluate anyway"
        )
    if not Path(args.dataset).exists():
        raise CliError(f"dataset path does not exist: {args.dataset}")
    problems = load_jsonl(args.dataset)
    pools = split_pools(problems, config, config.seed)
    split = _pick_split(pools, args.split)

    eval_config = dataclasses.replace(config, backend=backend_spec)
    backend = Backend(backend_spec, config.max_parallel_calls)
    report, _records = evaluate_skills(skills, split, backend, eval_config)

    row = store.ReportRow(method=method, dataset=Path(args.dataset).stem, metrics=report)
    json_path, csv_path = store.emit_report(args.out_dir, [row])
    print(f"k={len(skills)} on {len(split)} problems ({args.split} split)")
    print(
        f"accuracy={report.accuracy:.4f} pass_at_k={report.pass_at_k:.4f} "
        f"avg_at_k={report.avg_at_k:.4f}"
    )
    print(f"wrote {json_path} and {csv_path}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load_config(args.config, {})
    return _evaluate_common(args, config, method=args.method, backend_spec=config.backend)


def cmd_transfer(args: argparse.Namespace) -> int:
    config = _load_config(args.config, {})
    backend_spec = _backend_from_arg(args.backend) if args.backend else config.backend
    _, metas = _load_skills(args.skills)
    sources = {meta.get("source_run", "") for meta in metas if meta.get("source_run")}
    source = sorted(sources)[0] if sources else "unknown"
    return _evaluate_common(args, config, method=f"transfer:{source}", backend_spec=backend_spec)


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    trajectory = store.read_trajectory(run_dir)
    if not trajectory:
        raise CliError(f"trajectory log in {run_dir} is empty")
    num_agents = len(trajectory[0]["val_scores"])

    best_so_far = None
    rows = []
    for entry in trajectory:
        if best_so_far is not None and entry["global_best_score"] < best_so_far - 1e-12:
            raise CliError(
                f"trajectory invariant violated: global best decreased at "
                f"iteration {entry['iteration']}"
            )
        best_so_far = entry["global_best_score"]
        rows.append(entry)

    scores_path = run_dir / "scores.csv"
    header = ["iteration", "val_subset_index", "scheduler_rotated"]
    header += [f"agent_{i}_val_score" for i in range(num_agents)]
    header += [f"agent_{i}_personal_best" for i in range(num_agents)]
    header += ["global_best_score"]
    lines = [",".join(header)]
    for entry in rows:
        cells = [
            str(entry["iteration"]),
            str(entry["val_subset_index"]),
            str(entry["scheduler_rotated"]).lower(),
        ]
        cells += [f"{v:.4f}" for v in entry["val_scores"]]
        cells += [f"{v:.4f}" for v in entry["personal_best_scores"]]
        cells += [f"{entry['global_best_score']:.4f}"]
        lines.append(",".join(cells))
    scores_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    summary_path = run_dir / "evolution.txt"
    text_lines = []
    for entry in rows:
        for agent_id, skill in enumerate(entry["new_skills"]):
            text_lines.append(
                f"iteration {entry['iteration']:3d}  agent {agent_id}  "
                f"skill_words {word_count(skill['text']):4d}  "
                f"score {entry['val_scores'][agent_id]:.4f}"
            )
    summary_path.write_text("\n".join(text_lines) + "\n", encoding="utf-8")

    checkpoint = store.load_latest(run_dir)
    skill_paths = store.export_skills(run_dir, checkpoint.state)
    print(f"wrote {scores_path}")
    print(f"wrote {summary_path}")
    print(f"exported {len(skill_paths)} skill files to {run_dir / 'skills'}")
    return 0


def cmd_dump_prompts(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for purpose, template in all_templates(args.task_domain).items():
        path = out_dir / f"{purpose}.txt"
        path.write_text(template.body + "\n", encoding="utf-8")
        print(f"wrote {path}")
    return 0


def cmd_gen_mock(args: argparse.Namespace) -> int:
    problems = generate_mock_dataset(
        num_categories=args.categories,
        per_category=args.per_category,
        seed=args.seed,
        val_batch=args.val_batch,
    )
    write_jsonl(args.out, problems)
    print(f"wrote {len(problems)} problems to {args.out}")
    return 0


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skillswarm",
        description="Evolve natural-language agent skills with a swarm-style update loop.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_opt = sub.add_parser("optimize", help="run or resume an optimization")
    p_opt.add_argument("--config", help="JSON config file")
    p_opt.add_argument("--run-dir", help="run directory (overrides config)")
    p_opt.add_argument("--dataset", help="dataset JSONL path (overrides config)")
    p_opt.add_argument("--seed", type=int, help="seed (overrides config)")
    p_opt.add_argument("--resume", action="store_true", help="resume from the last checkpoint")
    p_opt.add_argument(
        "--initial-skills",
        nargs="+",
        help="skill JSON files to seed the population (default: the four built-in styles)",
    )
    p_opt.set_defaults(func=cmd_optimize)

    def add_eval_args(p):
        p.add_argument("--skills", nargs="+", required=True, help="exported skill file(s)")
        p.add_argument("--dataset", required=True, help="dataset JSONL path")
        p.add_argument("--split", choices=("train", "validation", "test"), default="test")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out-dir", default=".", help="where to write report.json/report.csv")
        p.add_argument(
            "--allow-k",
            action="store_true",
            help="allow a skill count different from the configured agent count",
        )

    p_eval = sub.add_parser("evaluate", help="score skills on a dataset split")
    add_eval_args(p_eval)
    p_eval.add_argument("--method", default="evaluate", help="method label for the report")
    p_eval.set_defaults(func=cmd_evaluate)

    p_tr = sub.add_parser("transfer", help="evaluate skills on another dataset/backend")
    add_eval_args(p_tr)
    p_tr.add_argument("--backend", help="'mock' or a BackendSpec JSON file")
    p_tr.set_defaults(func=cmd_transfer)

    p_rep = sub.add_parser("report", help="summarize a completed run")
    p_rep.add_argument("--run-dir", required=True)
    p_rep.set_defaults(func=cmd_report)

    p_dump = sub.add_parser("dump-prompts", help="write prompt templates to files")
    p_dump.add_argument("--out-dir", default="prompts")
    p_dump.add_argument("--task-domain", default=DEFAULT_TASK_DOMAIN)
    p_dump.set_defaults(func=cmd_dump_prompts)

    p_gen = sub.add_parser("gen-mock", help="generate the offline mock dataset")
    p_gen.add_argument("--out", required=True, help="output JSONL path")
    p_gen.add_argument("--categories", type=int, default=5)
    p_gen.add_argument("--per-category", type=int, default=80)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--val-batch", type=int, default=20)
    p_gen.set_defaults(func=cmd_gen_mock)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, DataError, BackendError, store.StoreError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
