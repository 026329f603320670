import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from ._autodiff import no_grad
from ._meta_learner import (
    TrainedModel,
    build_networks,
    inner_adapt,
    inner_steps_for,
    modulation_for,
)
from ._modulation_network import encode
from ._task_network import ModulationSet, forward, mse_loss
from ._utils import atomic_writer
from .tasks import (
    X_RANGE,
    FunctionMode,
    RngStream,
    TaskSample,
    evaluate_function,
    realize_task,
    sample_task,
    sample_tasks,
)

__all__ = ("EvalReport", "StageResult", "EvaluationError", "EmbeddingRow", "SeparationResult",
           "CurvePoint", "STAGES", "REPORT_VERSION", "EMBEDDING_PARAM_COLUMNS",
           "evaluate", "evaluation_tasks", "export_embeddings", "embedding_separation",
           "read_embeddings", "predict_curves", "write_curves", "write_tasks",
           "write_report_json", "write_report_csv", "report_rows",)

logger = logging.getLogger(__name__)

STAGES = ("prior", "post_modulation", "post_adaptation")
REPORT_VERSION = 1
EMBEDDING_PARAM_COLUMNS = ("A", "w", "c", "b")

# Child-stream keys under the evaluation seed; per-mode streams use the mode label
_EMBEDDING_STREAM = 100
_CURVE_STREAM = 101
_GENERATED_STREAM = 102


class EvaluationError(Exception):
    """
    Raised when an evaluation cannot run: an empty task count, a model without
    an encoder asked for embeddings, or a Multi-MAML model asked about a mode
    it has no member for.
    """
    pass


@dataclass(frozen=True)
class StageResult:
    per_mode: Dict[str, float]
    overall: float


@dataclass(frozen=True)
class EvalReport:
    """
    Query-set MSE of a model at each evaluation stage, per mode and overall.

    ``overall`` is the task-count-weighted mean of the per-mode values. Stages
    a model does not have are missing from ``stages`` and explained in
    ``notes``.
    """
    model: str
    operator: str
    iteration: int
    seed: int
    inner_steps: int
    task_counts: Dict[str, int]
    stages: Dict[str, StageResult]
    adaptation_not_worse: Optional[float] = None
    notes: Tuple[str, ...] = ()
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def total_tasks(self) -> int:
        return sum(self.task_counts.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": REPORT_VERSION,
            "model": self.model,
            "operator": self.operator,
            "iteration": self.iteration,
            "seed": self.seed,
            "inner_steps": self.inner_steps,
            "task_counts": dict(self.task_counts),
            "total_tasks": self.total_tasks,
            "stages": {name: {"per_mode": dict(stage.per_mode), "overall": stage.overall}
                       for name, stage in self.stages.items()},
            "adaptation_not_worse": self.adaptation_not_worse,
            "notes": list(self.notes),
            "config": self.config,
        }


def evaluation_tasks(mode: FunctionMode, count: int, *, seed: int, K: int, L: int,
                     noise_sigma: float) -> Iterator[TaskSample]:
    """
    The evaluation tasks of one mode. Task ``j`` comes from its own child stream,
    so it is the same whatever the other modes or the task count are.
    """
    root = RngStream(seed)
    for j in range(count):
        rng = root.derive(mode.label, j)
        yield realize_task(sample_task((mode,), rng), K, L, noise_sigma, rng)


def _stage_losses(model: TrainedModel, task: TaskSample, inner_steps: int) -> Dict[str, float]:
    try:
        learner = model.learner_for(task.spec.mode)
    except KeyError as e:
        raise EvaluationError(str(e.args[0])) from None
    nets = build_networks(learner.store.leaves())
    losses = {}
    with no_grad():
        prior = forward(task.query_x, nets.theta, ModulationSet.identity())
        losses["prior"] = mse_loss(prior, task.query_y).item()
        tau = modulation_for(nets, model.operator, task)
        if model.has_encoder:
            post_mod = forward(task.query_x, nets.theta, tau)
            losses["post_modulation"] = mse_loss(post_mod, task.query_y).item()

    adapted = inner_adapt(nets.theta, tau, task, model.config.inner_lr, inner_steps,
                          track_meta_graph=False)
    with no_grad():
        post_adapt = forward(task.query_x, adapted, tau)
        losses["post_adaptation"] = mse_loss(post_adapt, task.query_y).item()
    return losses


def evaluate(model: TrainedModel, mode_set: Optional[Sequence[FunctionMode]] = None,
             tasks_per_mode: int = 1000, *, seed: int = 2019, workers: int = 1,
             inner_steps: Optional[int] = None) -> EvalReport:
    """
    Measure query MSE before modulation, after modulation and after adaptation.

    Every mode gets ``tasks_per_mode`` fresh tasks from a stream seeded by
    ``seed`` alone, independent of training. Multi-MAML scores each task with
    the member of its ground-truth mode.

    :param model: The model to evaluate.
    :param mode_set: Modes to evaluate; defaults to the training mode set.
    :param tasks_per_mode: Tasks sampled per mode.
    :param seed: Evaluation stream seed.
    :param workers: Threads scoring tasks concurrently.
    :param inner_steps: Adaptation steps; defaults to the model's evaluation steps.
    :return: The report.
    :raises EvaluationError: If ``tasks_per_mode`` is not positive or a mode
                             cannot be routed to a learner.
    """
    if tasks_per_mode < 1:
        raise EvaluationError(f"tasks_per_mode must be >= 1, got {tasks_per_mode!r}")
    cfg = model.config
    modes = tuple(mode_set) if mode_set is not None else cfg.mode_set
    steps = inner_steps_for(model.kind, cfg, training=False) if inner_steps is None \
        else inner_steps

    stages = [s for s in STAGES if s != "post_modulation" or model.has_encoder]
    notes = []
    if not model.has_encoder:
        notes.append(f"post_modulation omitted: {model.kind.value} has no modulation network")

    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    per_mode: Dict[str, Dict[str, float]] = {s: {} for s in stages}
    counts: Dict[str, int] = {}
    not_worse = 0
    try:
        for mode in modes:
            tasks = list(evaluation_tasks(mode, tasks_per_mode, seed=seed, K=cfg.K, L=cfg.L,
                                          noise_sigma=cfg.noise_sigma))

            def score(task: TaskSample) -> Dict[str, float]:
                return _stage_losses(model, task, steps)

            results = list(executor.map(score, tasks) if executor else map(score, tasks))
            counts[mode.value] = len(results)
            for stage in stages:
                per_mode[stage][mode.value] = float(np.mean([r[stage] for r in results]))
            if model.has_encoder:
                not_worse += sum(r["post_adaptation"] <= r["post_modulation"] for r in results)
            logger.info("Evaluated %d %s tasks: %s", len(results), mode.value,
                        ", ".join(f"{s}={per_mode[s][mode.value]:.4f}" for s in stages))
    finally:
        if executor is not None:
            executor.shutdown()

    total = sum(counts.values())
    results_by_stage = {
        stage: StageResult(values,
                           sum(counts[m] * v for m, v in values.items()) / total)
        for stage, values in per_mode.items()
    }
    return EvalReport(
        model=model.kind.value,
        operator=model.operator.value,
        iteration=model.iteration,
        seed=seed,
        inner_steps=steps,
        task_counts=counts,
        stages=results_by_stage,
        adaptation_not_worse=not_worse / total if model.has_encoder else None,
        notes=tuple(notes),
        config=cfg.to_dict(),
    )


def write_report_json(report: EvalReport, path: Union[str, Path]) -> None:
    with atomic_writer(path) as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def report_rows(report: EvalReport) -> List[List[Any]]:
    """One row per stage and mode, plus an ``overall`` row per stage, after a header."""
    rows: List[List[Any]] = [["stage", "mode", "mse", "tasks"]]
    for name, stage in report.stages.items():
        for mode, value in stage.per_mode.items():
            rows.append([name, mode, repr(value), report.task_counts[mode]])
        rows.append([name, "overall", repr(stage.overall), report.total_tasks])
    return rows


def write_report_csv(report: EvalReport, path: Union[str, Path]) -> None:
    with atomic_writer(path) as f:
        csv.writer(f).writerows(report_rows(report))


# Task embeddings

class EmbeddingRow(NamedTuple):
    task_id: int
    mode: FunctionMode
    params: Dict[str, float]
    embedding: np.ndarray

    @property
    def mode_label(self) -> int:
        return self.mode.label


def export_embeddings(model: TrainedModel, mode_set: Optional[Sequence[FunctionMode]],
                      n_tasks: int, out_path: Union[str, Path], *,
                      seed: int = 2019) -> List[EmbeddingRow]:
    """
    Embed ``n_tasks`` random tasks and write them as CSV.

    Columns: ``task_id``, ``mode_label``, ``mode``, the task parameters
    (empty where a family has none) and one ``u<i>`` column per embedding
    component.

    :raises EvaluationError: If the model has no encoder or ``n_tasks`` is not positive.
    """
    if not model.has_encoder:
        raise EvaluationError(f"A {model.kind.value!r} model has no task encoder to export")
    if n_tasks < 1:
        raise EvaluationError(f"n_tasks must be >= 1, got {n_tasks!r}")
    cfg = model.config
    modes = tuple(mode_set) if mode_set is not None else cfg.mode_set
    nets = build_networks(model.learner_for(modes[0]).store.leaves())
    assert nets.encoder is not None

    rng = RngStream(seed).derive(_EMBEDDING_STREAM)
    rows = []
    with no_grad():
        for task_id, task in enumerate(sample_tasks(modes, n_tasks, K=cfg.K, L=cfg.L,
                                                    noise_sigma=cfg.noise_sigma, rng=rng)):
            upsilon = encode(task, nets.encoder).numpy()
            rows.append(EmbeddingRow(task_id, task.spec.mode, dict(task.spec.params), upsilon))

    dimension = rows[0].embedding.shape[0]
    with atomic_writer(out_path) as f:
        writer = csv.writer(f)
        writer.writerow(["task_id", "mode_label", "mode", *EMBEDDING_PARAM_COLUMNS,
                         *(f"u{i}" for i in range(dimension))])
        for row in rows:
            params = [repr(row.params[p]) if p in row.params else ""
                      for p in EMBEDDING_PARAM_COLUMNS]
            writer.writerow([row.task_id, row.mode_label, row.mode.value, *params,
                             *(repr(float(u)) for u in row.embedding)])
    logger.info("Exported %d task embeddings of dimension %d to %s", len(rows), dimension,
                out_path)
    return rows


def read_embeddings(path: Union[str, Path]) -> List[EmbeddingRow]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        rows = []
        for record in reader:
            params = {p: float(record[p]) for p in EMBEDDING_PARAM_COLUMNS if record[p] != ""}
            components = sorted((k for k in record if k.startswith("u")),
                                key=lambda k: int(k[1:]))
            rows.append(EmbeddingRow(int(record["task_id"]), FunctionMode(record["mode"]),
                                     params,
                                     np.array([float(record[k]) for k in components])))
    return rows


class SeparationResult(NamedTuple):
    accuracy: float
    chance: float
    n_fit: int
    n_scored: int


def embedding_separation(rows: Sequence[EmbeddingRow], rng: RngStream) -> SeparationResult:
    """
    How well embeddings cluster by mode: nearest-centroid classification with
    centroids fit on a random half of the rows and scored on the other half.

    Chance is one over the number of modes present.
    """
    if len(rows) < 2:
        raise EvaluationError("embedding_separation needs at least two rows")
    order = rng.permutation(len(rows))
    half = len(rows) // 2
    fit = [rows[i] for i in order[:half]]
    scored = [rows[i] for i in order[half:]]

    labels = sorted({r.mode_label for r in fit})
    centroids = np.stack([np.mean([r.embedding for r in fit if r.mode_label == label], axis=0)
                          for label in labels])
    points = np.stack([r.embedding for r in scored])
    distances = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
    predicted = np.asarray(labels)[np.argmin(distances, axis=1)]
    truth = np.asarray([r.mode_label for r in scored])
    modes_present = len({r.mode_label for r in rows})
    return SeparationResult(float(np.mean(predicted == truth)), 1.0 / modes_present,
                            len(fit), len(scored))


# Prediction curves

class CurvePoint(NamedTuple):
    x: float
    truth: float
    prior: float
    post_modulation: Optional[float]
    post_adaptation: float


def predict_curves(model: TrainedModel, task: TaskSample, grid: Optional[np.ndarray] = None,
                   *, inner_steps: Optional[int] = None) -> List[CurvePoint]:
    """
    Predictions of every stage over an x grid, next to the noise-free truth.

    The model sees only the task's support set; the grid defaults to 200
    evenly spaced points on ``X_RANGE``.
    """
    xs = np.linspace(X_RANGE[0], X_RANGE[1], 200) if grid is None \
        else np.asarray(grid, dtype=np.float64)
    steps = inner_steps_for(model.kind, model.config, training=False) \
        if inner_steps is None else inner_steps
    nets = build_networks(model.learner_for(task.spec.mode).store.leaves())
    with no_grad():
        prior = forward(xs, nets.theta, ModulationSet.identity()).numpy()
        tau = modulation_for(nets, model.operator, task)
        post_mod = forward(xs, nets.theta, tau).numpy() if model.has_encoder else None
    adapted = inner_adapt(nets.theta, tau, task, model.config.inner_lr, steps,
                          track_meta_graph=False)
    with no_grad():
        post_adapt = forward(xs, adapted, tau).numpy()
    truth = np.asarray(evaluate_function(task.spec, xs), dtype=np.float64)
    return [CurvePoint(float(xs[i]), float(truth[i]), float(prior[i]),
                       None if post_mod is None else float(post_mod[i]), float(post_adapt[i]))
            for i in range(xs.shape[0])]


def write_curves(model: TrainedModel, out_path: Union[str, Path], *,
                 mode_set: Optional[Sequence[FunctionMode]] = None, points: int = 200,
                 seed: int = 2019) -> int:
    """
    Sample one task per mode and write its prediction curves as CSV.

    :return: The number of data rows written.
    """
    cfg = model.config
    modes = tuple(mode_set) if mode_set is not None else cfg.mode_set
    grid = np.linspace(X_RANGE[0], X_RANGE[1], points)
    root = RngStream(seed).derive(_CURVE_STREAM)
    count = 0
    with atomic_writer(out_path) as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "params", "x", "truth", *STAGES])
        for mode in modes:
            rng = root.derive(mode.label)
            task = realize_task(sample_task((mode,), rng), cfg.K, cfg.L, cfg.noise_sigma, rng)
            params = json.dumps(dict(task.spec.params), sort_keys=True)
            for p in predict_curves(model, task, grid):
                post_mod = "" if p.post_modulation is None else repr(p.post_modulation)
                writer.writerow([mode.value, params, repr(p.x), repr(p.truth), repr(p.prior),
                                 post_mod, repr(p.post_adaptation)])
                count += 1
    return count


def write_tasks(mode_set: Sequence[FunctionMode], count: int, out_path: Union[str, Path], *,
                K: int = 5, L: int = 10, noise_sigma: float = 0.3, seed: int = 0) -> int:
    """
    Write ``count`` sampled tasks as JSON lines (one task per line with its
    mode, parameters, support and query points).
    """
    rng = RngStream(seed).derive(_GENERATED_STREAM)
    with atomic_writer(out_path) as f:
        for task_id, task in enumerate(sample_tasks(mode_set, count, K=K, L=L,
                                                    noise_sigma=noise_sigma, rng=rng)):
            f.write(json.dumps({"task_id": task_id, **task.to_dict()}, sort_keys=True) + "\n")
    return count
