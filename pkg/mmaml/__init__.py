from ._autodiff import (
    GradientError,
    Node,
    NonFiniteError,
    OpKind,
    ShapeError,
    check_gradients,
    grad,
    leaf,
    no_grad,
    tensor_op,
)
from ._checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ._evaluation import (
    EvalReport,
    EvaluationError,
    embedding_separation,
    evaluate,
    export_embeddings,
    predict_curves,
)
from ._meta_learner import (
    TrainedModel,
    TrainingAbortedError,
    inner_adapt,
    meta_train_step,
    run_baseline,
    train,
)
from ._metrics import MetricsSink
from ._modulation_network import encode, generate_modulation, modulate
from ._task_network import (
    MlpParameters,
    ModulationError,
    ModulationOperator,
    ModulationSet,
    forward,
)
from .config import ConfigError, ModelKind, RunConfig, TrainingConfig, load_run_config
from .tasks import FunctionMode, RngStream, TaskSample, TaskSpec, realize_task, sample_task

__all__ = ("Node", "OpKind", "tensor_op", "grad", "leaf", "no_grad", "check_gradients",
           "ShapeError", "NonFiniteError", "GradientError",
           "FunctionMode", "RngStream", "TaskSpec", "TaskSample", "sample_task", "realize_task",
           "MlpParameters", "ModulationSet", "ModulationOperator", "ModulationError", "forward",
           "encode", "generate_modulation", "modulate",
           "TrainingConfig", "RunConfig", "ModelKind", "ConfigError", "load_run_config",
           "inner_adapt", "meta_train_step", "run_baseline", "train", "TrainedModel",
           "TrainingAbortedError",
           "evaluate", "export_embeddings", "embedding_separation", "predict_curves",
           "EvalReport", "EvaluationError",
           "save_checkpoint", "load_checkpoint", "CheckpointError", "MetricsSink",)
__version__ = "0.1.0"
