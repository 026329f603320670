import atexit
import json
import sys
from pathlib import Path
from traceback import format_tb
from types import TracebackType
from typing import IO, List, Optional, Type, Union
from uuid import UUID, uuid4

import numpy as np

from ._send_request import SendRequestFn, send_request
from ._utils import get_package_version
from .config import TelemetryConfig
from .events import EnvironmentInfo, ExceptionInfo, TrainingEvent

__all__ = ("MetricsSink", "METRICS_FILE", "environment_info", "format_exception",)

METRICS_FILE = "metrics.jsonl"


def environment_info() -> EnvironmentInfo:
    return {
        "python_version": sys.version,
        "numpy_version": np.__version__,
        "mmaml_version": get_package_version("mmaml-regression"),
    }


def format_exception(exc: BaseException) -> ExceptionInfo:
    """
    Format an exception (type, message and traceback) for an abort event.
    """
    exc_type = type(exc)
    tb: Optional[TracebackType] = exc.__traceback__
    return {
        "type": f"{exc_type.__module__}.{exc_type.__name__}",
        "message": str(exc),
        "traceback": format_tb(tb, limit=100) if tb is not None else [],
    }


class MetricsSink:
    """
    Collects run events, appends them to a JSON-lines file and forwards them to a
    telemetry server.

    Events are written to ``<out_dir>/metrics.jsonl`` as soon as they are
    emitted, in emission order. When a telemetry URL is configured they are also
    buffered and posted to ``<url>/v1/events`` when the sink closes (or at
    interpreter exit, if the sink was never closed).
    """

    def __init__(self, out_dir: Union[str, Path, None],
                 telemetry: TelemetryConfig = TelemetryConfig(), *,
                 run_id: Optional[UUID] = None,
                 send_request: SendRequestFn = send_request) -> None:
        """
        :param out_dir: Directory for the metrics file, or None to skip writing it.
        :param telemetry: Telemetry server settings.
        :param run_id: Identifier shared by every event of the run.
        :param send_request: A function used to post events (injectable for tests).
        """
        self.run_id = run_id or uuid4()
        self._api_url = telemetry.url.strip("/") if telemetry.url else None
        self._timeout = telemetry.timeout
        self._raise_exception = telemetry.raise_on_failure
        self._send_request = send_request
        self._events: List[TrainingEvent] = []
        self._file: Optional[IO[str]] = None
        self.path: Optional[Path] = None
        if out_dir is not None:
            self.path = Path(out_dir) / METRICS_FILE
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = self.path.open("a", encoding="utf-8")
        if self._api_url is not None:
            atexit.register(self._send_events)

    def emit(self, event: TrainingEvent) -> None:
        """
        Append an event to ``metrics.jsonl`` and queue it for the server.

        :param event: The event to record.
        """
        if self._file is not None:
            self._file.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")
            self._file.flush()
        if self._api_url is not None:
            self._events.append(event)

    def close(self) -> None:
        """Send queued events, if a server is configured, and close the log file."""
        try:
            if self._api_url is not None:
                self._send_events()
        finally:
            if self._api_url is not None:
                atexit.unregister(self._send_events)
            if self._file is not None:
                self._file.close()
                self._file = None

    def __enter__(self) -> "MetricsSink":
        return self

    def __exit__(self, exc_type: Optional[Type[BaseException]],
                 exc_val: Optional[BaseException], exc_tb: Optional[TracebackType]) -> None:
        self.close()

    def _send_events(self) -> None:
        if not self._events:
            return
        payload = [e.to_dict() for e in self._events]
        try:
            self._send_request(f"{self._api_url}/v1/events", self._timeout, payload)
        except BaseException as e:
            if self._raise_exception:
                raise
            else:
                print(f"[Error] {e!r}", file=sys.stderr)
        self._events = []
