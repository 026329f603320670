import json
from pathlib import Path
from typing import Any, Dict

import pytest
from baby_steps import given, then, when

from mmaml._checkpoint import load_checkpoint
from mmaml._cli import CHECKPOINT_FILE, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from mmaml.config import ModelKind

from ._utils import read_jsonl, write_config

_TINY_TRAINING: Dict[str, Any] = {
    "hidden_sizes": [2],
    "encoder_hidden": 3,
    "encoder_input": 4,
    "generator_hidden": 3,
    "meta_batch_size": 2,
    "iterations": 2,
    "checkpoint_every": 0,
    "seed": 1,
}


def _train(tmp_path: Path, model: str = "mmaml") -> Path:
    config = write_config(tmp_path / "run.yaml", {"model": model, "training": _TINY_TRAINING})
    out = tmp_path / model
    assert main(["train", "--config", str(config), "--out", str(out)]) == EXIT_OK
    return out


def test_train_writes_run_directory(tmp_path, capsys):
    with given:
        config = write_config(tmp_path / "run.yaml", {"training": _TINY_TRAINING})
        out = tmp_path / "run"

    with when:
        code = main(["train", "--config", str(config), "--out", str(out), "--iterations", "3",
                     "--operator", "sigmoid"])

    with then:
        assert code == EXIT_OK
        assert capsys.readouterr().out.strip() == str(out / CHECKPOINT_FILE)
        model = load_checkpoint(out / CHECKPOINT_FILE)
        assert model.kind is ModelKind.MMAML
        assert model.iteration == 3
        assert model.config.operator.value == "sigmoid"
        assert (out / "config.yaml").exists()
        events = [e["event_id"] for e in read_jsonl(out / "metrics.jsonl")]
        assert events == ["RunStartedEvent"] + ["IterationEvent"] * 3 + \
            ["CheckpointSavedEvent", "RunEndedEvent"]


def test_train_then_eval(tmp_path):
    with given:
        out = _train(tmp_path)
        report_path = tmp_path / "report.json"

    with when:
        code = main(["eval", "--checkpoint", str(out / CHECKPOINT_FILE), "--tasks-per-mode", "3",
                     "--out", str(report_path)])

    with then:
        assert code == EXIT_OK
        report = json.loads(report_path.read_text())
        assert report["task_counts"] == {"Sinusoidal": 3, "Linear": 3}
        assert set(report["stages"]) == {"prior", "post_modulation", "post_adaptation"}
        assert read_jsonl(out / "metrics.jsonl")[-1]["event_id"] == "EvaluationFinishedEvent"


def test_eval_csv_to_stdout(tmp_path, capsys):
    with given:
        out = _train(tmp_path, "maml")
        capsys.readouterr()

    with when:
        code = main(["eval", "--checkpoint", str(out / CHECKPOINT_FILE), "--tasks-per-mode", "2",
                     "--csv"])

    with then:
        assert code == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "stage,mode,mse,tasks"
        assert len(lines) == 1 + 2 * 3


def test_resume_continues_run(tmp_path):
    with given:
        out = _train(tmp_path)
        config = write_config(tmp_path / "resume.yaml", {"training": _TINY_TRAINING})

    with when:
        code = main(["train", "--config", str(config), "--out", str(tmp_path / "resumed"),
                     "--iterations", "4", "--resume", str(out / CHECKPOINT_FILE)])

    with then:
        assert code == EXIT_OK
        assert load_checkpoint(tmp_path / "resumed" / CHECKPOINT_FILE).iteration == 4


def test_resume_with_other_modes_is_a_config_error(tmp_path, capsys):
    with given:
        out = _train(tmp_path, "multi-maml")
        config = write_config(tmp_path / "resume.yaml", {
            "model": "multi-maml",
            "training": dict(_TINY_TRAINING, mode_set=3, iterations=4),
        })

    with when:
        code = main(["train", "--config", str(config), "--out", str(tmp_path / "resumed"),
                     "--resume", str(out / CHECKPOINT_FILE)])

    with then:
        assert code == EXIT_USAGE
        assert "training.mode_set" in capsys.readouterr().err
        assert not (tmp_path / "resumed" / CHECKPOINT_FILE).exists()


def test_eval_defaults_come_from_run_config(tmp_path):
    with given:
        config = write_config(tmp_path / "run.yaml", {
            "training": _TINY_TRAINING,
            "evaluation": {"tasks_per_mode": 2, "seed": 5},
        })
        out = tmp_path / "run"
        assert main(["train", "--config", str(config), "--out", str(out)]) == EXIT_OK
        report_path = tmp_path / "report.json"

    with when:
        code = main(["eval", "--checkpoint", str(out / CHECKPOINT_FILE),
                     "--out", str(report_path)])

    with then:
        assert code == EXIT_OK
        report = json.loads(report_path.read_text())
        assert report["task_counts"] == {"Sinusoidal": 2, "Linear": 2}
        assert report["seed"] == 5


def test_eval_flags_override_run_config(tmp_path):
    with given:
        config = write_config(tmp_path / "run.yaml", {
            "training": _TINY_TRAINING,
            "evaluation": {"tasks_per_mode": 2, "seed": 5},
        })
        out = tmp_path / "run"
        assert main(["train", "--config", str(config), "--out", str(out)]) == EXIT_OK
        report_path = tmp_path / "report.json"

    with when:
        code = main(["eval", "--checkpoint", str(out / CHECKPOINT_FILE), "--tasks-per-mode", "1",
                     "--seed", "8", "--out", str(report_path)])

    with then:
        assert code == EXIT_OK
        report = json.loads(report_path.read_text())
        assert report["task_counts"] == {"Sinusoidal": 1, "Linear": 1}
        assert report["seed"] == 8


def test_export_embeddings_count_comes_from_run_config(tmp_path):
    with given:
        config = write_config(tmp_path / "run.yaml", {
            "training": _TINY_TRAINING,
            "evaluation": {"embedding_tasks": 6},
        })
        out = tmp_path / "run"
        assert main(["train", "--config", str(config), "--out", str(out)]) == EXIT_OK
        csv_path = tmp_path / "emb.csv"

    with when:
        code = main(["export-embeddings", "--checkpoint", str(out / CHECKPOINT_FILE),
                     "--out", str(csv_path)])

    with then:
        assert code == EXIT_OK
        assert len(csv_path.read_text().splitlines()) == 1 + 6


def test_unknown_config_key(tmp_path, capsys):
    with given:
        config = write_config(tmp_path / "run.yaml", {"training": {"inner_lrr": 0.1}})

    with when:
        code = main(["train", "--config", str(config), "--out", str(tmp_path / "run")])

    with then:
        assert code == EXIT_USAGE
        assert "'training.inner_lrr'" in capsys.readouterr().err


def test_unknown_flag(capsys):
    with when:
        code = main(["gen-tasks", "--modes", "2", "--count", "1", "--out", "x", "--colour"])

    with then:
        assert code == EXIT_USAGE
        assert "--colour" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    [],
    ["fit"],
    ["eval"],
    ["gen-tasks", "--modes", "4", "--count", "1", "--out", "x"],
    ["gen-tasks", "--modes", "2", "--count", "ten", "--out", "x"],
])
def test_malformed_command_lines(argv):
    with when:
        code = main(argv)

    with then:
        assert code == EXIT_USAGE


def test_gen_tasks(tmp_path):
    with given:
        out = tmp_path / "tasks.jsonl"

    with when:
        code = main(["gen-tasks", "--modes", "5", "--count", "10", "--out", str(out)])

    with then:
        assert code == EXIT_OK
        records = read_jsonl(out)
        assert len(records) == 10
        assert {r["mode"] for r in records} <= {"Sinusoidal", "Linear", "Quadratic",
                                                "L1Norm", "Tanh"}


def test_gen_tasks_negative_count(tmp_path):
    with when:
        code = main(["gen-tasks", "--modes", "2", "--count", "-1",
                     "--out", str(tmp_path / "t.jsonl")])

    with then:
        assert code == EXIT_USAGE


def test_export_embeddings(tmp_path):
    with given:
        out = _train(tmp_path)

    with when:
        code = main(["export-embeddings", "--checkpoint", str(out / CHECKPOINT_FILE),
                     "--tasks", "12", "--out", str(tmp_path / "emb.csv"), "--modes", "2"])

    with then:
        assert code == EXIT_OK
        assert len((tmp_path / "emb.csv").read_text().splitlines()) == 13


def test_export_embeddings_from_maml(tmp_path, capsys):
    with given:
        out = _train(tmp_path, "maml")

    with when:
        code = main(["export-embeddings", "--checkpoint", str(out / CHECKPOINT_FILE),
                     "--tasks", "5", "--out", str(tmp_path / "emb.csv")])

    with then:
        assert code == EXIT_USAGE
        assert "no task encoder" in capsys.readouterr().err


def test_curves(tmp_path):
    with given:
        out = _train(tmp_path, "lstm-learner")

    with when:
        code = main(["curves", "--checkpoint", str(out / CHECKPOINT_FILE), "--points", "20",
                     "--out", str(tmp_path / "curves.csv")])

    with then:
        assert code == EXIT_OK
        assert len((tmp_path / "curves.csv").read_text().splitlines()) == 1 + 2 * 20


def test_bad_checkpoint(tmp_path, capsys):
    with given:
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"garbage" * 10)

    with when:
        code = main(["eval", "--checkpoint", str(path)])

    with then:
        assert code == EXIT_RUNTIME
        assert "CheckpointError" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path):
    with when:
        code = main(["curves", "--checkpoint", str(tmp_path / "absent.ckpt"),
                     "--out", str(tmp_path / "c.csv")])

    with then:
        assert code == EXIT_RUNTIME


def test_divergent_training_aborts(tmp_path, capsys):
    with given:
        training = dict(_TINY_TRAINING, inner_lr=1e300, inner_steps_train=3)
        config = write_config(tmp_path / "run.yaml", {"model": "maml", "training": training})

    with when:
        code = main(["train", "--config", str(config), "--out", str(tmp_path / "run")])

    with then:
        assert code == EXIT_RUNTIME
        assert "TrainingAbortedError" in capsys.readouterr().err
        assert read_jsonl(tmp_path / "run" / "metrics.jsonl")[-1]["event_id"] == \
            "RunAbortedEvent"
