from abc import ABC, abstractmethod
from typing import Any, Dict, List, Mapping, TypedDict, Union
from uuid import UUID

from ._utils import now

__all__ = ("TrainingEvent", "RunStartedEvent", "IterationEvent", "CheckpointSavedEvent",
           "EvaluationFinishedEvent", "RunAbortedEvent", "RunEndedEvent",
           "EnvironmentInfo", "ExceptionInfo",)


class EnvironmentInfo(TypedDict):
    """
    Versions of the interpreter and numeric stack a run executed with.

    :var python_version: The version of Python being used.
    :var numpy_version: The version of numpy backing the tensors.
    :var mmaml_version: The version of this package.
    """
    python_version: str
    numpy_version: str
    mmaml_version: str


class ExceptionInfo(TypedDict):
    """
    Represents information about an exception that aborted a run.

    :var type: The fully qualified type of the exception.
    :var message: A message describing the exception.
    :var traceback: A list of strings representing the traceback information.
    """
    type: str
    message: str
    traceback: List[str]


class TrainingEvent(ABC):
    """
    Abstract base class for run events.

    Every event records the time it was created (milliseconds since the epoch)
    and renders itself as a flat dictionary for the metrics file and the
    telemetry server.
    """

    def __init__(self, run_id: Union[UUID, str]) -> None:
        self._run_id = str(run_id)
        self._created_at = now()

    @property
    def run_id(self) -> str:
        return self._run_id

    def _base(self) -> Dict[str, Any]:
        return {
            "event_id": self.__class__.__name__,
            "run_id": self._run_id,
            "created_at": self._created_at,
        }

    @abstractmethod
    def to_dict(self) -> Dict[str, Any]:
        """
        Convert the event into a JSON-serializable dictionary.

        :return: A dictionary representing the event.
        """
        pass

    @abstractmethod
    def __repr__(self) -> str:
        pass


class RunStartedEvent(TrainingEvent):
    """
    Emitted once when training starts, carrying the full configuration so a
    metrics file is self-describing.
    """

    def __init__(self, run_id: Union[UUID, str], *, model: str, config: Mapping[str, Any],
                 environment: EnvironmentInfo, start_iteration: int = 0) -> None:
        super().__init__(run_id)
        self._model = model
        self._config = dict(config)
        self._environment = environment
        self._start_iteration = start_iteration

    def to_dict(self) -> Dict[str, Any]:
        return {
            **self._base(),
            "model": self._model,
            "config": self._config,
            "environment": self._environment,
            "start_iteration": self._start_iteration,
        }

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__} run_id={self._run_id!r} model={self._model!r}>"


class IterationEvent(TrainingEvent):
    """
    Metrics of one meta-update.

    ``learner`` distinguishes the members of a Multi-MAML model; single
    learners use ``"default"``.
    """

    def __init__(self, run_id: Union[UUID, str], *, learner: str, iteration: int,
                 mean_query_loss: float, mode_losses: Mapping[str, float],
                 grad_norms: Mapping[str, float], clipped: bool) -> None:
        super().__init__(run_id)
        self._learner = learner
        self._iteration = iteration
        self._mean_query_loss = mean_query_loss
        self._mode_losses = dict(mode_losses)
        self._grad_norms = dict(grad_norms)
        self._clipped = clipped

    @property
    def mean_query_loss(self) -> float:
        return self._mean_query_loss

    def to_dict(self) -> Dict[str, Any]:
        return {
            **self._base(),
            "learner": self._learner,
            "iteration": self._iteration,
            "mean_query_loss": self._mean_query_loss,
            "mode_losses": self._mode_losses,
            "grad_norms": self._grad_norms,
            "clipped": self._clipped,
        }

    def __repr__(self) -> str:
        return (f"<{self.__class__.__name__} run_id={self._run_id!r} "
                f"learner={self._learner!r} iteration={self._iteration} "
                f"mean_query_loss={self._mean_query_loss:.6f}>")


class CheckpointSavedEvent(TrainingEvent):
    """Emitted after a checkpoint is written."""

    def __init__(self, run_id: Union[UUID, str], *, iteration: int, path: str) -> None:
        """
        :param run_id: The run's identifier.
        :param iteration: Meta-updates completed when the checkpoint was taken.
        :param path: Where the checkpoint was written.
        """
        super().__init__(run_id)
        self._iteration = iteration
        self._path = path

    def to_dict(self) -> Dict[str, Any]:
        return {**self._base(), "iteration": self._iteration, "path": self._path}

    def __repr__(self) -> str:
        return (f"<{self.__class__.__name__} run_id={self._run_id!r} "
                f"iteration={self._iteration} path={self._path!r}>")


class EvaluationFinishedEvent(TrainingEvent):
    """Carries a finished evaluation report as a dictionary."""

    def __init__(self, run_id: Union[UUID, str], report: Mapping[str, Any]) -> None:
        super().__init__(run_id)
        self._report = dict(report)

    def to_dict(self) -> Dict[str, Any]:
        return {**self._base(), "report": self._report}

    def __repr__(self) -> str:
        return (f"<{self.__class__.__name__} run_id={self._run_id!r} "
                f"model={self._report.get('model')!r}>")


class RunAbortedEvent(TrainingEvent):
    """Emitted when meta-training stops on an error."""

    def __init__(self, run_id: Union[UUID, str], *, iteration: int,
                 exception: ExceptionInfo) -> None:
        """
        :param run_id: The run's identifier.
        :param iteration: Iteration at which the run aborted.
        :param exception: The formatted exception.
        """
        super().__init__(run_id)
        self._iteration = iteration
        self._exception = exception

    def to_dict(self) -> Dict[str, Any]:
        return {**self._base(), "iteration": self._iteration, "exception": self._exception}

    def __repr__(self) -> str:
        return (f"<{self.__class__.__name__} run_id={self._run_id!r} "
                f"iteration={self._iteration} exc_type={self._exception['type']!r}>")


class RunEndedEvent(TrainingEvent):
    """Emitted once a run has finished its meta-updates."""

    def __init__(self, run_id: Union[UUID, str], *, iterations: int,
                 final_loss: Union[float, None], duration_ms: int) -> None:
        """
        :param run_id: The run's identifier.
        :param iterations: Meta-updates completed in total.
        :param final_loss: Mean query loss of the last meta-update, if any ran.
        :param duration_ms: Wall time of the run in milliseconds.
        """
        super().__init__(run_id)
        self._iterations = iterations
        self._final_loss = final_loss
        self._duration_ms = duration_ms

    def to_dict(self) -> Dict[str, Any]:
        return {
            **self._base(),
            "iterations": self._iterations,
            "final_loss": self._final_loss,
            "duration_ms": self._duration_ms,
        }

    def __repr__(self) -> str:
        return (f"<{self.__class__.__name__} run_id={self._run_id!r} "
                f"iterations={self._iterations} final_loss={self._final_loss!r}>")
