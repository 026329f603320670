import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, Union

import yaml

from ._task_network import DEFAULT_HIDDEN_SIZES, ModulationOperator
from .tasks import MODE_SETS, FunctionMode, TaskDistributionError, resolve_mode_set

__all__ = ("ModelKind", "TrainingConfig", "EvaluationConfig", "TelemetryConfig", "RunConfig",
           "ConfigError", "load_run_config", "parse_run_config",)

T = TypeVar("T")


class ConfigError(ValueError):
    """
    Raised when a run configuration is malformed: an unknown key, a value of
    the wrong type, or a value outside its allowed range.
    """
    pass


class ModelKind(str, Enum):
    MMAML = "mmaml"
    MAML = "maml"
    MULTI_MAML = "multi-maml"
    LSTM_LEARNER = "lstm-learner"

    @property
    def uses_modulation(self) -> bool:
        return self in (ModelKind.MMAML, ModelKind.LSTM_LEARNER)


@dataclass(frozen=True)
class TrainingConfig:
    # Inner-loop (adaptation) learning rate
    inner_lr: float = 0.01

    # Meta-optimizer (Adam) learning rate
    meta_lr: float = 0.001

    # Gradient steps on the support set during meta-training
    inner_steps_train: int = 1

    # Gradient steps on the support set during evaluation
    inner_steps_eval: int = 5

    # Tasks per meta-update
    meta_batch_size: int = 25

    # Meta-updates to run (desk scale; full scale is 60000)
    iterations: int = 10000

    # Modulation operator for modulated models
    operator: ModulationOperator = ModulationOperator.FILM

    # Function families tasks are drawn from
    mode_set: Tuple[FunctionMode, ...] = MODE_SETS[2]

    # Standard deviation of the Gaussian output noise
    noise_sigma: float = 0.3

    # Support points per task
    K: int = 5

    # Query points per task
    L: int = 10

    # Seed for parameter initialization and training task streams
    seed: int = 0

    # Treat inner-loop gradients as constants in the meta-gradient
    first_order: bool = False

    # Global-norm clip for the meta-gradient, None disables clipping
    grad_clip: Optional[float] = 10.0

    # Hidden widths of the task network
    hidden_sizes: Tuple[int, ...] = DEFAULT_HIDDEN_SIZES

    # Hidden size of each encoder LSTM direction
    encoder_hidden: int = 40

    # Width the (x, y) pair is projected to before the encoder LSTM
    encoder_input: int = 40

    # Hidden width of each modulation generator
    generator_hidden: int = 64

    # "zero-output" starts generators at the identity modulation, "random" does not
    generator_init: str = "zero-output"

    # Save a checkpoint every this many iterations (0 disables)
    checkpoint_every: int = 1000

    # Log progress every this many iterations
    log_every: int = 100

    # Threads computing per-task gradients inside a meta-batch
    workers: int = 1

    def __post_init__(self) -> None:
        checks = (
            (self.inner_lr > 0, "inner_lr must be > 0"),
            (self.meta_lr > 0, "meta_lr must be > 0"),
            (self.inner_steps_train >= 0, "inner_steps_train must be >= 0"),
            (self.inner_steps_eval >= 0, "inner_steps_eval must be >= 0"),
            (self.meta_batch_size >= 1, "meta_batch_size must be >= 1"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.noise_sigma >= 0, "noise_sigma must be >= 0"),
            (self.K >= 1, "K must be >= 1"),
            (self.L >= 1, "L must be >= 1"),
            (len(self.mode_set) > 0, "mode_set must not be empty"),
            (self.grad_clip is None or self.grad_clip > 0, "grad_clip must be > 0 or null"),
            (len(self.hidden_sizes) > 0 and all(h > 0 for h in self.hidden_sizes),
             "hidden_sizes must be positive"),
            (self.generator_init in ("zero-output", "random"),
             "generator_init must be 'zero-output' or 'random'"),
            (self.checkpoint_every >= 0, "checkpoint_every must be >= 0"),
            (self.log_every >= 1, "log_every must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
        )
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def replace(self, **changes: Any) -> "TrainingConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)


@dataclass(frozen=True)
class EvaluationConfig:
    # Evaluation tasks drawn per mode (the full protocol uses 25000)
    tasks_per_mode: int = 1000

    # Seed of the evaluation task stream, independent of training
    seed: int = 2019

    # Tasks drawn for embedding export
    embedding_tasks: int = 1000

    def __post_init__(self) -> None:
        if self.tasks_per_mode < 1:
            raise ConfigError("tasks_per_mode must be >= 1")
        if self.embedding_tasks < 1:
            raise ConfigError("embedding_tasks must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)


@dataclass(frozen=True)
class TelemetryConfig:
    # Base URL of a self-hosted telemetry server, None disables sending
    url: Optional[str] = None

    # Timeout duration (in seconds) for requests to the server
    timeout: float = 5.0

    # If True, raise an exception if telemetry data fails to send
    raise_on_failure: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)


@dataclass(frozen=True)
class RunConfig:
    model: ModelKind = ModelKind.MMAML
    out_dir: str = "runs/latest"
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    telemetry: TelemetryConfig = field(default_factory=TelemetryConfig)

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)


def _to_plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (tuple, list)):
        return [_to_plain(v) for v in value]
    return value


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce(path: str, default: Any, value: Any) -> Any:
    if isinstance(default, ModulationOperator):
        try:
            return ModulationOperator(value)
        except ValueError:
            raise ConfigError(f"{path}: unknown operator {value!r}") from None
    if isinstance(default, ModelKind):
        try:
            return ModelKind(value)
        except ValueError:
            raise ConfigError(f"{path}: unknown model kind {value!r}") from None
    if path.endswith("mode_set"):
        try:
            return resolve_mode_set(value)
        except TaskDistributionError as e:
            raise ConfigError(f"{path}: {e}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or path.endswith("grad_clip"):
        if value is None and path.endswith("grad_clip"):
            return None
        if not _is_number(value):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{path}: expected a list of integers, got {value!r}")
        return tuple(value)
    if default is None or isinstance(default, str):
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls: Type[T], raw: Any, prefix: str) -> T:
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {raw!r}")

    defaults = cls()
    known = {f.name: f for f in dataclasses.fields(defaults)}  # type: ignore[arg-type]
    values: Dict[str, Any] = {}
    for key, value in raw.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in known:
            raise ConfigError(f"Unknown config key {path!r}")
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            values[key] = _build(type(default), value, path)
        else:
            values[key] = _coerce(path, default, value)
    try:
        return cls(**values)
    except ConfigError as e:
        raise ConfigError(f"{prefix or 'config'}: {e}") from None


def parse_run_config(raw: Union[Mapping[str, Any], None]) -> RunConfig:
    """
    Build a :class:`RunConfig` from plain data, rejecting unknown keys at any level.

    :raises ConfigError: On unknown keys, mistyped values or violated invariants.
    """
    return _build(RunConfig, raw, "")


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """
    Load a YAML run configuration. Missing keys take their documented defaults.

    :raises ConfigError: If the file is not valid YAML or fails validation.
    :raises OSError: If the file cannot be read.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"Failed to parse config {str(path)!r}: {e}") from None
    return parse_run_config(raw)
