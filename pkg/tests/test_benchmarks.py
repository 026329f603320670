from pathlib import Path
from typing import Callable, Dict, Tuple

import pytest
from baby_steps import given, then, when

from mmaml._evaluation import EvalReport, embedding_separation, evaluate, export_embeddings
from mmaml._meta_learner import TrainedModel, run_baseline
from mmaml.config import ModelKind, RunConfig, load_run_config
from mmaml.tasks import RngStream

# Desk-scale runs: every model trains for the configured budget, so these
# take hours and only run with `pytest -m slow`.
pytestmark = pytest.mark.slow

_CONFIGS = Path(__file__).parent.parent / "configs"

Trainer = Callable[[str, ModelKind], Tuple[RunConfig, TrainedModel]]


@pytest.fixture(scope="module")
def trained() -> Trainer:
    cache: Dict[Tuple[str, ModelKind], Tuple[RunConfig, TrainedModel]] = {}

    def get(config_name: str, kind: ModelKind) -> Tuple[RunConfig, TrainedModel]:
        if (config_name, kind) not in cache:
            config = load_run_config(_CONFIGS / config_name)
            cache[(config_name, kind)] = (config, run_baseline(kind, config.training))
        return cache[(config_name, kind)]

    return get


def _evaluate(config: RunConfig, model: TrainedModel) -> EvalReport:
    return evaluate(model, tasks_per_mode=config.evaluation.tasks_per_mode,
                    seed=config.evaluation.seed, workers=config.training.workers)


def test_modulation_beats_baselines_on_two_modes(trained):
    with given:
        config, mmaml = trained("desk_2modes.yaml", ModelKind.MMAML)
        _, lstm = trained("desk_2modes.yaml", ModelKind.LSTM_LEARNER)
        _, maml = trained("desk_2modes.yaml", ModelKind.MAML)

    with when:
        mse = {model.kind: _evaluate(config, model).stages["post_adaptation"].overall
               for model in (mmaml, lstm, maml)}

    with then:
        assert mse[ModelKind.MMAML] < mse[ModelKind.LSTM_LEARNER] < mse[ModelKind.MAML]
        assert mse[ModelKind.MMAML] <= 0.6 * mse[ModelKind.MAML]


def test_each_stage_lowers_error_on_five_modes(trained):
    with given:
        config, model = trained("desk_5modes.yaml", ModelKind.MMAML)

    with when:
        stages = _evaluate(config, model).stages

    with then:
        prior = stages["prior"].overall
        modulated = stages["post_modulation"].overall
        adapted = stages["post_adaptation"].overall
        assert prior > modulated > adapted
        assert prior >= 5 * modulated


@pytest.mark.parametrize(("config_name", "min_ratio"), [
    ("desk_2modes.yaml", 2.0),
    ("desk_5modes.yaml", 1.0),
])
def test_embeddings_separate_modes(trained, tmp_path, config_name, min_ratio):
    with given:
        config, model = trained(config_name, ModelKind.MMAML)

    with when:
        rows = export_embeddings(model, None, config.evaluation.embedding_tasks,
                                 tmp_path / "emb.csv", seed=config.evaluation.seed)
        result = embedding_separation(rows, RngStream(config.evaluation.seed))

    with then:
        if min_ratio > 1.0:
            assert result.accuracy >= min_ratio * result.chance
        else:
            assert result.accuracy > result.chance


def test_single_maml_loses_to_per_mode_members(trained):
    with given:
        config, maml = trained("desk_5modes.yaml", ModelKind.MAML)
        _, multi = trained("desk_5modes.yaml", ModelKind.MULTI_MAML)

    with when:
        maml_mse = _evaluate(config, maml).stages["post_adaptation"].per_mode
        member_mse = _evaluate(config, multi).stages["post_adaptation"].per_mode

    with then:
        assert member_mse.keys() == maml_mse.keys()
        for mode, mse in member_mse.items():
            assert maml_mse[mode] > mse, mode
