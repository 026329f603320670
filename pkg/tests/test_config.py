import pytest
from baby_steps import given, then, when

from mmaml._task_network import ModulationOperator
from mmaml.config import (
    ConfigError,
    ModelKind,
    RunConfig,
    TrainingConfig,
    load_run_config,
    parse_run_config,
)
from mmaml.tasks import MODE_SETS, FunctionMode

from ._utils import write_config


def test_defaults():
    with when:
        cfg = parse_run_config({})

    with then:
        assert cfg == RunConfig()
        assert cfg.model is ModelKind.MMAML
        training = cfg.training
        assert (training.inner_lr, training.meta_lr) == (0.01, 0.001)
        assert (training.inner_steps_train, training.inner_steps_eval) == (1, 5)
        assert (training.K, training.L, training.noise_sigma) == (5, 10, 0.3)
        assert training.meta_batch_size == 25
        assert training.hidden_sizes == (100, 100, 100)
        assert training.mode_set == MODE_SETS[2]
        assert cfg.evaluation.seed == 2019


def test_nested_values():
    with when:
        cfg = parse_run_config({
            "model": "multi-maml",
            "training": {"operator": "sigmoid", "mode_set": 3, "hidden_sizes": [8, 8],
                         "grad_clip": None, "inner_lr": 1},
            "telemetry": {"url": "http://localhost:8080"},
        })

    with then:
        assert cfg.model is ModelKind.MULTI_MAML
        assert cfg.training.operator is ModulationOperator.SIGMOID
        assert cfg.training.mode_set == MODE_SETS[3]
        assert cfg.training.hidden_sizes == (8, 8)
        assert cfg.training.grad_clip is None
        assert cfg.training.inner_lr == 1.0 and isinstance(cfg.training.inner_lr, float)
        assert cfg.telemetry.url == "http://localhost:8080"


@pytest.mark.parametrize(("raw", "path"), [
    ({"trainig": {}}, "'trainig'"),
    ({"training": {"inner_lr": 0.1, "alpha": 0.1}}, "'training.alpha'"),
    ({"evaluation": {"tasks": 3}}, "'evaluation.tasks'"),
])
def test_unknown_key_names_dotted_path(raw, path):
    with when, pytest.raises(ConfigError) as exc:
        parse_run_config(raw)

    with then:
        assert str(exc.value) == f"Unknown config key {path}"


@pytest.mark.parametrize("raw", [
    {"training": {"iterations": "many"}},
    {"training": {"iterations": 1.5}},
    {"training": {"first_order": 1}},
    {"training": {"meta_lr": "fast"}},
    {"training": {"hidden_sizes": [40, "40"]}},
    {"training": {"operator": "gelu"}},
    {"training": {"mode_set": 4}},
    {"model": "reptile"},
    {"training": []},
])
def test_mistyped_values(raw):
    with when, pytest.raises(ConfigError):
        parse_run_config(raw)


@pytest.mark.parametrize("raw", [
    {"training": {"inner_lr": 0}},
    {"training": {"meta_batch_size": 0}},
    {"training": {"generator_init": "ones"}},
    {"evaluation": {"tasks_per_mode": 0}},
])
def test_violated_invariants(raw):
    with when, pytest.raises(ConfigError):
        parse_run_config(raw)


def test_mode_set_by_tags():
    with when:
        cfg = parse_run_config({"training": {"mode_set": ["Tanh", "Sinusoidal"]}})

    with then:
        assert cfg.training.mode_set == (FunctionMode.TANH, FunctionMode.SINUSOIDAL)


def test_to_dict_round_trip():
    with given:
        training = TrainingConfig(operator=ModulationOperator.SOFTMAX, mode_set=MODE_SETS[5],
                                  grad_clip=None, hidden_sizes=(4, 4))

    with when:
        restored = parse_run_config({"training": training.to_dict()}).training

    with then:
        assert restored == training


def test_load_yaml(tmp_path):
    with given:
        path = write_config(tmp_path / "run.yaml", {
            "model": "maml",
            "out_dir": "runs/maml",
            "training": {"iterations": 50, "seed": 3},
        })

    with when:
        cfg = load_run_config(path)

    with then:
        assert cfg.model is ModelKind.MAML
        assert cfg.out_dir == "runs/maml"
        assert (cfg.training.iterations, cfg.training.seed) == (50, 3)


def test_load_empty_yaml(tmp_path):
    with given:
        path = tmp_path / "empty.yaml"
        path.write_text("")

    with when:
        cfg = load_run_config(path)

    with then:
        assert cfg == RunConfig()


def test_load_invalid_yaml(tmp_path):
    with given:
        path = tmp_path / "broken.yaml"
        path.write_text("training: [unclosed\n")

    with when, pytest.raises(ConfigError) as exc:
        load_run_config(path)

    with then:
        assert "Failed to parse config" in str(exc.value)
