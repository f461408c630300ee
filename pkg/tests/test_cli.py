import json

import pytest

from skillswarm.cli import main
from skillswarm.data import load_jsonl


def write_config(tmp_path, **overrides):
    config = {
        "dataset_path": str(tmp_path / "mock.jsonl"),
        "run_dir": str(tmp_path / "run"),
        "seed": 0,
    }
    config.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def write_token_skills(tmp_path, n=4):
    paths = []
    for i in range(1, n + 1):
        path = tmp_path / f"skill{i}.json"
        path.write_text(json.dumps({"identity_label": f"Agent-{i}", "text": f"T{i}"}))
        paths.append(str(path))
    return paths


@pytest.fixture()
def workspace(tmp_path):
    assert main(["gen-mock", "--out", str(tmp_path / "mock.jsonl"), "--seed", "0"]) == 0
    config_path = write_config(tmp_path)
    return tmp_path, config_path


def run_optimize(tmp_path, config_path, extra=()):
    skills = write_token_skills(tmp_path)
    return main(
        ["optimize", "--config", str(config_path), "--initial-skills", *skills, *extra]
    )


class TestGenMock:
    def test_writes_dataset(self, tmp_path):
        out = tmp_path / "mock.jsonl"
        assert main(["gen-mock", "--out", str(out), "--seed", "0"]) == 0
        problems = load_jsonl(out)
        assert len(problems) == 400
        assert all(p.question.startswith("MOCK:T") for p in problems)

    def test_indivisible_val_batch_fails(self, tmp_path, capsys):
        code = main(
            ["gen-mock", "--out", str(tmp_path / "x.jsonl"), "--categories", "3"]
        )
        assert code == 1
        assert "divisible" in capsys.readouterr().err


class TestOptimize:
    def test_full_run_offline(self, workspace, capsys):
        tmp_path, config_path = workspace
        assert run_optimize(tmp_path, config_path) == 0
        out = capsys.readouterr().out
        assert "run complete: 10 iterations" in out
        assert "global best score: 0.8000" in out
        assert (tmp_path / "run" / "iter_0010" / "state.json").exists()
        assert (tmp_path / "run" / "skills" / "global_best.json").exists()

    def test_resume_finished_run_is_noop(self, workspace, capsys):
        tmp_path, config_path = workspace
        assert run_optimize(tmp_path, config_path) == 0
        capsys.readouterr()
        assert run_optimize(tmp_path, config_path, extra=["--resume"]) == 0
        assert "already complete" in capsys.readouterr().out

    def test_missing_dataset_nonzero_exit(self, tmp_path, capsys):
        config_path = write_config(tmp_path, dataset_path=str(tmp_path / "nope.jsonl"))
        assert main(["optimize", "--config", str(config_path)]) == 1
        assert "nope.jsonl" in capsys.readouterr().err

    def test_rerun_without_resume_refuses(self, workspace, capsys):
        tmp_path, config_path = workspace
        assert run_optimize(tmp_path, config_path) == 0
        capsys.readouterr()
        assert run_optimize(tmp_path, config_path) == 1
        assert "resume" in capsys.readouterr().err

    def test_invalid_config_nonzero(self, tmp_path, capsys):
        config_path = write_config(tmp_path, num_agents=1)
        assert main(["optimize", "--config", str(config_path)]) == 1
        assert "num_agents" in capsys.readouterr().err


class TestEvaluate:
    @pytest.fixture()
    def finished_run(self, workspace):
        tmp_path, config_path = workspace
        assert run_optimize(tmp_path, config_path) == 0
        return tmp_path, config_path

    def test_personal_bests_on_test_split(self, finished_run, capsys):
        tmp_path, config_path = finished_run
        skills = sorted(str(p) for p in (tmp_path / "run" / "skills").glob("agent_*.json"))
        code = main(
            [
                "evaluate",
                "--skills",
                *skills,
                "--dataset",
                str(tmp_path / "mock.jsonl"),
                "--split",
                "test",
                "--config",
                str(config_path),
                "--out-dir",
                str(tmp_path / "eval"),
            ]
        )
        assert code == 0
        assert "accuracy=0.8000" in capsys.readouterr().out
        report = json.loads((tmp_path / "eval" / "report.json").read_text())
        assert report[0]["accuracy"] == 0.8
        assert report[0]["pass_at_k"] == 0.8
        assert report[0]["method"] == "evaluate"
        csv_lines = (tmp_path / "eval" / "report.csv").read_text().splitlines()
        assert csv_lines[0].startswith("method,dataset,accuracy,pass_at_k,avg_at_k")

    def test_single_skill_needs_allow_k(self, finished_run, capsys):
        tmp_path, config_path = finished_run
        global_best = str(tmp_path / "run" / "skills" / "global_best.json")
        args = [
            "evaluate",
            "--skills",
            global_best,
            "--dataset",
            str(tmp_path / "mock.jsonl"),
            "--config",
            str(config_path),
            "--out-dir",
            str(tmp_path / "eval1"),
        ]
        assert main(args) == 1
        assert "--allow-k" in capsys.readouterr().err
        assert main(args + ["--allow-k"]) == 0
        report = json.loads((tmp_path / "eval1" / "report.json").read_text())[0]
        # k=1 collapse: all three metrics coincide
        assert report["accuracy"] == report["pass_at_k"] == report["avg_at_k"]
        assert report["per_agent_accuracy"] == [report["accuracy"]]

    def test_transfer_labels_method(self, finished_run, capsys):
        tmp_path, config_path = finished_run
        global_best = str(tmp_path / "run" / "skills" / "global_best.json")
        code = main(
            [
                "transfer",
                "--skills",
                global_best,
                "--dataset",
                str(tmp_path / "mock.jsonl"),
                "--backend",
                "mock",
                "--allow-k",
                "--config",
                str(config_path),
                "--out-dir",
                str(tmp_path / "transfer"),
            ]
        )
        assert code == 0
        report = json.loads((tmp_path / "transfer" / "report.json").read_text())[0]
        assert report["method"] == "transfer:run"

    def test_evaluate_does_not_touch_checkpoints(self, finished_run):
        tmp_path, config_path = finished_run
        checkpoint = tmp_path / "run" / "iter_0010" / "state.json"
        before = checkpoint.read_bytes()
        skills = sorted(str(p) for p in (tmp_path / "run" / "skills").glob("agent_*.json"))
        main(
            [
                "evaluate",
                "--skills",
                *skills,
                "--dataset",
                str(tmp_path / "mock.jsonl"),
                "--config",
                str(config_path),
                "--out-dir",
                str(tmp_path / "eval2"),
            ]
        )
        assert checkpoint.read_bytes() == before


class TestReport:
    def test_report_outputs(self, workspace, capsys):
        tmp_path, config_path = workspace
        assert run_optimize(tmp_path, config_path) == 0
        capsys.readouterr()
        assert main(["report", "--run-dir", str(tmp_path / "run")]) == 0
        scores = (tmp_path / "run" / "scores.csv").read_text().splitlines()
        assert len(scores) == 11  # header + 10 iterations
        assert scores[0].startswith("iteration,val_subset_index,scheduler_rotated")
        evolution = (tmp_path / "run" / "evolution.txt").read_text().splitlines()
        assert len(evolution) == 40  # 10 iterations x 4 agents
        assert "skill_words" in evolution[0]

    def test_missing_trajectory_fails(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert main(["report", "--run-dir", str(tmp_path / "empty")]) == 1
        assert "trajectory" in capsys.readouterr().err


class TestDumpPrompts:
    def test_writes_four_templates(self, tmp_path):
        out = tmp_path / "prompts"
        assert main(["dump-prompts", "--out-dir", str(out)]) == 0
        files = sorted(p.name for p in out.glob("*.txt"))
        assert files == ["reflect.txt", "skill_update.txt", "solve.txt", "velocity.txt"]
        assert "Return exactly one JSON object" in (out / "solve.txt").read_text()
        assert "Do not overfit to a single problem." in (out / "reflect.txt").read_text()
