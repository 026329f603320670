import logging
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import (
    Callable,
    Dict,
    Iterator,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from ._autodiff import Node, NonFiniteError, add, constant, grad, leaf, scale, sub
from ._metrics import MetricsSink
from ._modulation_network import (
    EncoderParameters,
    GeneratorParameters,
    init_encoder_parameters,
    init_generator_parameters,
    modulate,
)
from ._optim import AdamState, adam_step, clip_grad_norm, global_norm
from ._task_network import (
    MlpParameters,
    ModulationOperator,
    ModulationSet,
    forward,
    init_parameters,
    mse_loss,
)
from .config import ConfigError, ModelKind, TrainingConfig
from .events import IterationEvent
from .tasks import FunctionMode, RngStream, TaskSample, TaskSpec, sample_tasks

__all__ = ("ParameterStore", "Learner", "TrainedModel", "Networks", "StepMetrics",
           "TrainingAbortedError", "DEFAULT_LEARNER", "PARAMETER_GROUPS",
           "inner_adapt", "meta_train_step", "meta_objective", "meta_gradients",
           "run_baseline", "train", "init_model", "build_networks", "model_operator",
           "inner_steps_for", "training_batch", "modulation_for",)

logger = logging.getLogger(__name__)

DEFAULT_LEARNER = "default"
PARAMETER_GROUPS = ("theta", "encoder", "generators")

# Child-stream keys under a learner seed
_INIT_STREAM = 0
_TRAIN_STREAM = 1

Support = Union[TaskSample, Tuple[np.ndarray, np.ndarray]]


class TrainingAbortedError(RuntimeError):
    """
    Raised when meta-training or adaptation produces non-finite values.

    Carries the iteration and the task that triggered the abort, when known.
    """

    def __init__(self, message: str, *, iteration: Optional[int] = None,
                 task: Optional[TaskSpec] = None) -> None:
        self.reason = message
        self.iteration = iteration
        self.task = task
        details = []
        if iteration is not None:
            details.append(f"iteration={iteration}")
        if task is not None:
            details.append(f"task={task.to_dict()!r}")
        super().__init__(f"{message} ({', '.join(details)})" if details else message)


@dataclass(frozen=True)
class ParameterStore:
    """
    Named parameter arrays. Names are dotted and start with their group:
    ``theta.*`` for the task network, ``encoder.*`` and ``generators.*`` for
    the modulation network.
    """
    tensors: Mapping[str, np.ndarray]

    def leaves(self) -> Dict[str, Node]:
        return {name: leaf(value) for name, value in self.tensors.items()}

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.split(".", 1)[0] == prefix}

    @classmethod
    def from_nodes(cls, named: Mapping[str, Node]) -> "ParameterStore":
        return cls({name: node.value for name, node in named.items()})


@dataclass(frozen=True)
class Learner:
    store: ParameterStore
    optimizer: AdamState


@dataclass(frozen=True)
class TrainedModel:
    """
    A model of one kind with its learners.

    Multi-MAML keeps one learner per mode, keyed by the mode tag; every other
    kind has a single learner under ``DEFAULT_LEARNER``.
    """
    kind: ModelKind
    config: TrainingConfig
    learners: Mapping[str, Learner]
    iteration: int = 0

    @property
    def operator(self) -> ModulationOperator:
        return model_operator(self.kind, self.config)

    @property
    def has_encoder(self) -> bool:
        return self.kind.uses_modulation

    def learner_for(self, mode: FunctionMode) -> Learner:
        if self.kind is ModelKind.MULTI_MAML:
            try:
                return self.learners[mode.value]
            except KeyError:
                raise KeyError(f"Multi-MAML model has no member for mode {mode.value!r}") \
                    from None
        return self.learners[DEFAULT_LEARNER]


class Networks(NamedTuple):
    theta: MlpParameters
    encoder: Optional[EncoderParameters]
    generators: Optional[GeneratorParameters]


@dataclass(frozen=True)
class StepMetrics:
    mean_query_loss: float
    task_losses: Tuple[float, ...]
    mode_losses: Dict[str, float]
    grad_norms: Dict[str, float]
    clipped: bool
    grads: Dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def model_operator(kind: ModelKind, cfg: TrainingConfig) -> ModulationOperator:
    if kind is ModelKind.MMAML:
        return cfg.operator
    if kind is ModelKind.LSTM_LEARNER:
        return ModulationOperator.FILM
    return ModulationOperator.IDENTITY


def inner_steps_for(kind: ModelKind, cfg: TrainingConfig, *, training: bool) -> int:
    if kind is ModelKind.LSTM_LEARNER:
        return 0
    return cfg.inner_steps_train if training else cfg.inner_steps_eval


def build_networks(named: Mapping[str, Node]) -> Networks:
    theta = MlpParameters.from_named(named)
    if not any(k.startswith("encoder.") for k in named):
        return Networks(theta, None, None)
    return Networks(theta, EncoderParameters.from_named(named),
                    GeneratorParameters.from_named(named))


def modulation_for(nets: Networks, operator: ModulationOperator,
                   support: TaskSample) -> ModulationSet:
    if operator is ModulationOperator.IDENTITY:
        return ModulationSet.identity()
    if nets.encoder is None or nets.generators is None:
        raise ValueError(f"Operator {operator.value!r} needs an encoder and generators")
    _, tau = modulate(support, nets.encoder, nets.generators, operator)
    return tau


def _split_support(support: Support) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(support, TaskSample):
        return support.support_x, support.support_y
    x, y = support
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)


def inner_adapt(theta: MlpParameters, tau: ModulationSet, support: Support, alpha: float,
                steps: int, *, track_meta_graph: bool, first_order: bool = False
                ) -> MlpParameters:
    """
    Adapt the task network to a support set with plain gradient descent.

    The modulation ``tau`` is held fixed: only ``theta`` moves.

    :param theta: Parameters to start from.
    :param tau: Modulation applied during every step.
    :param support: The support set, as a task sample or an ``(x, y)`` pair of arrays.
    :param alpha: Step size.
    :param steps: Number of full-batch gradient steps.
    :param track_meta_graph: Keep the adapted parameters differentiable w.r.t.
                             ``theta`` and everything ``tau`` depends on.
    :param first_order: With ``track_meta_graph``, treat the inner gradients as
                        constants instead of differentiating through them.
    :return: The adapted parameters. ``theta`` itself when no step moves it.
    :raises TrainingAbortedError: If a support loss becomes non-finite.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps!r}")
    if steps == 0 or alpha == 0:
        return theta

    x, y = _split_support(support)
    params = theta.nodes()
    for step in range(steps):
        current = theta.replace(params)
        try:
            loss = mse_loss(forward(x, current, tau), y)
            if track_meta_graph and not first_order:
                grads = grad(loss, params, create_graph=True)
                params = [sub(p, scale(g, alpha)) for p, g in zip(params, grads)]
            elif track_meta_graph:
                grads = grad(loss, params)
                params = [sub(p, constant(alpha * g)) for p, g in zip(params, grads)]
            else:
                grads = grad(loss, params)
                params = [leaf(p.value - alpha * g) for p, g in zip(params, grads)]
        except NonFiniteError as e:
            raise TrainingAbortedError(f"Non-finite values in adaptation step {step}: {e}") \
                from e
    return theta.replace(params)


def task_query_loss(nets: Networks, operator: ModulationOperator, task: TaskSample, *,
                    alpha: float, inner_steps: int, first_order: bool) -> Node:
    tau = modulation_for(nets, operator, task)
    adapted = inner_adapt(nets.theta, tau, task, alpha, inner_steps,
                          track_meta_graph=True, first_order=first_order)
    return mse_loss(forward(task.query_x, adapted, tau), task.query_y)


def meta_objective(store: ParameterStore, batch: Sequence[TaskSample], cfg: TrainingConfig, *,
                   operator: ModulationOperator, inner_steps: int
                   ) -> Tuple[Node, Dict[str, Node]]:
    """
    Sum of post-adaptation query losses over a batch, as one differentiable node.

    :return: The summed loss and the parameter leaves it was built from.
    """
    leaves = store.leaves()
    nets = build_networks(leaves)
    total: Optional[Node] = None
    for task in batch:
        loss = task_query_loss(nets, operator, task, alpha=cfg.inner_lr,
                               inner_steps=inner_steps, first_order=cfg.first_order)
        total = loss if total is None else add(total, loss)
    if total is None:
        raise ValueError("meta_objective needs at least one task")
    return total, leaves


def _task_gradients(leaves: Mapping[str, Node], task: TaskSample, cfg: TrainingConfig,
                    operator: ModulationOperator, inner_steps: int
                    ) -> Tuple[float, List[np.ndarray]]:
    nets = build_networks(leaves)
    try:
        loss = task_query_loss(nets, operator, task, alpha=cfg.inner_lr,
                               inner_steps=inner_steps, first_order=cfg.first_order)
        grads = grad(loss, list(leaves.values()))
    except NonFiniteError as e:
        raise TrainingAbortedError(f"Non-finite values in meta-training: {e}",
                                   task=task.spec) from e
    except TrainingAbortedError as e:
        raise TrainingAbortedError(e.reason, task=task.spec) from e
    return loss.item(), grads


def meta_gradients(store: ParameterStore, batch: Sequence[TaskSample], cfg: TrainingConfig, *,
                   operator: ModulationOperator, inner_steps: int,
                   executor: Optional[Executor] = None
                   ) -> Tuple[Dict[str, np.ndarray], List[float]]:
    """
    Gradient of the summed query loss of ``batch`` w.r.t. every stored parameter.

    Each task gets its own graph; gradients are added up in batch order, so the
    result does not depend on how tasks were scheduled on ``executor``.
    """
    leaves = store.leaves()
    names = list(leaves)

    def run(task: TaskSample) -> Tuple[float, List[np.ndarray]]:
        return _task_gradients(leaves, task, cfg, operator, inner_steps)

    results: Iterator[Tuple[float, List[np.ndarray]]]
    results = executor.map(run, batch) if executor is not None else map(run, batch)

    totals: Dict[str, np.ndarray] = {name: np.zeros_like(store.tensors[name]) for name in names}
    losses: List[float] = []
    for loss, grads in results:
        losses.append(loss)
        for name, g in zip(names, grads):
            totals[name] = totals[name] + g
    return totals, losses


def meta_train_step(learner: Learner, batch: Sequence[TaskSample], cfg: TrainingConfig, *,
                    operator: ModulationOperator, inner_steps: int, iteration: int = 0,
                    executor: Optional[Executor] = None) -> Tuple[Learner, StepMetrics]:
    """
    One meta-update over a batch of tasks.

    Every task is modulated, adapted on its support set and scored on its
    query set; the summed query loss drives a single Adam step over the task
    network, encoder and generators together.

    :raises TrainingAbortedError: If any loss or gradient becomes non-finite.
    """
    if not batch:
        raise ValueError("meta_train_step needs at least one task")
    try:
        grads, losses = meta_gradients(learner.store, batch, cfg, operator=operator,
                                       inner_steps=inner_steps, executor=executor)
    except TrainingAbortedError as e:
        raise TrainingAbortedError(e.reason, iteration=iteration,
                                   task=e.task) from e

    grad_norms = {}
    for group in PARAMETER_GROUPS:
        members = {k: g for k, g in grads.items() if k.split(".", 1)[0] == group}
        if members:
            grad_norms[group] = global_norm(members)
    clipped_grads, norm = clip_grad_norm(grads, cfg.grad_clip)
    grad_norms["total"] = norm
    if not np.isfinite(norm):
        raise TrainingAbortedError("Non-finite meta-gradient", iteration=iteration)

    params, optimizer = adam_step(learner.store.tensors, clipped_grads, learner.optimizer,
                                  cfg.meta_lr)
    for value in params.values():
        value.setflags(write=False)

    by_mode: Dict[str, List[float]] = {}
    for task, loss in zip(batch, losses):
        by_mode.setdefault(task.spec.mode.value, []).append(loss)
    metrics = StepMetrics(
        mean_query_loss=float(np.mean(losses)),
        task_losses=tuple(losses),
        mode_losses={mode: float(np.mean(v)) for mode, v in by_mode.items()},
        grad_norms=grad_norms,
        clipped=cfg.grad_clip is not None and norm > cfg.grad_clip,
        grads=grads,
    )
    return Learner(ParameterStore(params), optimizer), metrics


# Model construction and training

def _member_plan(kind: ModelKind, cfg: TrainingConfig
                 ) -> Dict[str, Tuple[int, Tuple[FunctionMode, ...]]]:
    if kind is ModelKind.MULTI_MAML:
        return {mode.value: (cfg.seed + index, (mode,))
                for index, mode in enumerate(cfg.mode_set)}
    return {DEFAULT_LEARNER: (cfg.seed, cfg.mode_set)}


def _init_learner(kind: ModelKind, cfg: TrainingConfig, seed: int) -> Learner:
    rng = RngStream(seed).derive(_INIT_STREAM)
    theta = init_parameters(rng, cfg.hidden_sizes)
    named: Dict[str, Node] = dict(theta.named())
    if kind.uses_modulation:
        encoder = init_encoder_parameters(rng, hidden_size=cfg.encoder_hidden,
                                          input_size=cfg.encoder_input)
        generators = init_generator_parameters(
            rng, model_operator(kind, cfg), cfg.hidden_sizes,
            embedding_size=encoder.embedding_size, hidden_size=cfg.generator_hidden,
            zero_output=cfg.generator_init == "zero-output")
        named.update(encoder.named())
        named.update(generators.named())
    store = ParameterStore.from_nodes(named)
    return Learner(store, AdamState.zeros_like(store.tensors))


def init_model(kind: ModelKind, cfg: TrainingConfig) -> TrainedModel:
    """Randomly initialize every learner of a model (iteration 0)."""
    learners = {key: _init_learner(kind, cfg, seed)
                for key, (seed, _) in _member_plan(kind, cfg).items()}
    return TrainedModel(kind, cfg, learners, 0)


def training_batch(cfg: TrainingConfig, mode_set: Sequence[FunctionMode], seed: int,
                   iteration: int) -> List[TaskSample]:
    rng = RngStream(seed).derive(_TRAIN_STREAM, iteration)
    return list(sample_tasks(mode_set, cfg.meta_batch_size, K=cfg.K, L=cfg.L,
                             noise_sigma=cfg.noise_sigma, rng=rng))


# Fields that fix parameter shapes or the learner layout of a checkpoint
_RESUME_FIELDS = ("hidden_sizes", "encoder_hidden", "encoder_input", "generator_hidden",
                  "mode_set")


def _check_resume(kind: ModelKind, cfg: TrainingConfig, resume: TrainedModel) -> None:
    if resume.kind is not kind:
        raise ConfigError(f"Cannot resume a {resume.kind.value!r} model as {kind.value!r}")
    saved = resume.config
    differing = [name for name in _RESUME_FIELDS if getattr(saved, name) != getattr(cfg, name)]
    if model_operator(kind, saved) is not model_operator(kind, cfg):
        differing.append("operator")
    if differing:
        raise ConfigError("Cannot resume: checkpoint differs from config in "
                          + ", ".join(f"training.{name}" for name in differing))


def train(kind: ModelKind, cfg: TrainingConfig, *, sink: Optional[MetricsSink] = None,
          resume: Optional[TrainedModel] = None,
          on_checkpoint: Optional[Callable[[TrainedModel], None]] = None,
          on_step: Optional[Callable[[str, StepMetrics], None]] = None) -> TrainedModel:
    """
    Meta-train a model of the given kind for ``cfg.iterations`` meta-updates.

    :param kind: Which model to train.
    :param cfg: Training configuration.
    :param sink: Receives one :class:`IterationEvent` per learner and iteration.
    :param resume: A partially trained model to continue from its iteration.
    :param on_checkpoint: Called with the current model every
                          ``cfg.checkpoint_every`` iterations and at the end.
    :param on_step: Called with the learner key and metrics after every meta-update.
    :return: The trained model.
    :raises ConfigError: If ``resume`` was trained as another kind or with other
                         network shapes or modes.
    :raises TrainingAbortedError: If meta-training diverges.
    """
    if resume is not None:
        _check_resume(kind, cfg, resume)
    model = resume if resume is not None else init_model(kind, cfg)

    operator = model_operator(kind, cfg)
    inner_steps = inner_steps_for(kind, cfg, training=True)
    plan = _member_plan(kind, cfg)
    learners = dict(model.learners)
    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    run_id = str(sink.run_id) if sink is not None else ""

    logger.info("Training %s (%s) from iteration %d to %d", kind.value, operator.value,
                model.iteration, cfg.iterations)
    iteration = model.iteration
    try:
        while iteration < cfg.iterations:
            for key, (seed, mode_set) in plan.items():
                batch = training_batch(cfg, mode_set, seed, iteration)
                learners[key], metrics = meta_train_step(
                    learners[key], batch, cfg, operator=operator, inner_steps=inner_steps,
                    iteration=iteration, executor=executor)
                if on_step is not None:
                    on_step(key, metrics)
                if sink is not None:
                    sink.emit(IterationEvent(
                        run_id, learner=key, iteration=iteration,
                        mean_query_loss=metrics.mean_query_loss,
                        mode_losses=metrics.mode_losses, grad_norms=metrics.grad_norms,
                        clipped=metrics.clipped))
                if iteration % cfg.log_every == 0:
                    logger.info("iteration %d learner %s query loss %.4f grad norm %.3f",
                                iteration, key, metrics.mean_query_loss,
                                metrics.grad_norms["total"])
            iteration += 1
            if on_checkpoint is not None and cfg.checkpoint_every \
                    and iteration % cfg.checkpoint_every == 0 and iteration < cfg.iterations:
                on_checkpoint(TrainedModel(kind, cfg, dict(learners), iteration))
    finally:
        if executor is not None:
            executor.shutdown()

    trained = TrainedModel(kind, cfg, learners, iteration)
    if on_checkpoint is not None:
        on_checkpoint(trained)
    return trained


def run_baseline(kind: ModelKind, cfg: TrainingConfig, *, sink: Optional[MetricsSink] = None,
                 resume: Optional[TrainedModel] = None,
                 on_checkpoint: Optional[Callable[[TrainedModel], None]] = None,
                 on_step: Optional[Callable[[str, StepMetrics], None]] = None) -> TrainedModel:
    """
    Train any of the model kinds.

    MAML trains the task network alone; Multi-MAML trains one MAML learner per
    mode on that mode's tasks; the LSTM learner trains the modulated network
    without inner gradient steps. Keyword arguments are those of :func:`train`.
    """
    return train(kind, cfg, sink=sink, resume=resume, on_checkpoint=on_checkpoint,
                 on_step=on_step)
