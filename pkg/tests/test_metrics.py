from unittest.mock import Mock, call
from uuid import uuid4

import pytest
from baby_steps import given, then, when

from mmaml._metrics import METRICS_FILE, MetricsSink, environment_info, format_exception
from mmaml._send_request import TelemetryRequestError
from mmaml.config import TelemetryConfig
from mmaml.events import CheckpointSavedEvent, RunEndedEvent

from ._utils import read_jsonl, send_request_

__all__ = ("send_request_",)  # fixtures

_TELEMETRY = TelemetryConfig(url="http://localhost:8080/", timeout=2.0)


def test_events_written_in_order(tmp_path):
    with given:
        sink = MetricsSink(tmp_path)
        first = CheckpointSavedEvent(sink.run_id, iteration=1, path="a")
        second = RunEndedEvent(sink.run_id, iterations=1, final_loss=0.5, duration_ms=3)

    with when:
        with sink:
            sink.emit(first)
            sink.emit(second)

    with then:
        assert sink.path == tmp_path / METRICS_FILE
        assert read_jsonl(sink.path) == [first.to_dict(), second.to_dict()]


def test_sink_appends_to_existing_file(tmp_path):
    with given:
        with MetricsSink(tmp_path) as sink:
            sink.emit(RunEndedEvent(sink.run_id, iterations=1, final_loss=None, duration_ms=0))

    with when:
        with MetricsSink(tmp_path) as sink:
            sink.emit(RunEndedEvent(sink.run_id, iterations=2, final_loss=None, duration_ms=0))

    with then:
        assert [e["iterations"] for e in read_jsonl(tmp_path / METRICS_FILE)] == [1, 2]


def test_events_sent_on_close(send_request_: Mock):
    with given:
        sink = MetricsSink(None, _TELEMETRY, run_id=uuid4(), send_request=send_request_)
        event = RunEndedEvent(sink.run_id, iterations=5, final_loss=0.1, duration_ms=10)
        sink.emit(event)

    with when:
        sink.close()

    with then:
        assert send_request_.mock_calls == [
            call("http://localhost:8080/v1/events", 2.0, [event.to_dict()])
        ]


def test_nothing_sent_without_url(tmp_path, send_request_: Mock):
    with given:
        sink = MetricsSink(tmp_path, send_request=send_request_)
        sink.emit(RunEndedEvent(sink.run_id, iterations=1, final_loss=None, duration_ms=0))

    with when:
        sink.close()

    with then:
        assert send_request_.mock_calls == []


def test_send_failure_reported(capsys):
    with given:
        send_request_ = Mock(side_effect=TelemetryRequestError("refused"))
        sink = MetricsSink(None, _TELEMETRY, send_request=send_request_)
        sink.emit(RunEndedEvent(sink.run_id, iterations=1, final_loss=None, duration_ms=0))

    with when:
        sink.close()

    with then:
        captured = capsys.readouterr()
        assert captured.err == "[Error] TelemetryRequestError('refused')\n"


def test_send_failure_raised_when_configured():
    with given:
        telemetry = TelemetryConfig(url="http://localhost:8080", raise_on_failure=True)
        send_request_ = Mock(side_effect=TelemetryRequestError("refused"))
        sink = MetricsSink(None, telemetry, send_request=send_request_)
        sink.emit(RunEndedEvent(sink.run_id, iterations=1, final_loss=None, duration_ms=0))

    with when, pytest.raises(TelemetryRequestError):
        sink.close()


def test_environment_info():
    with when:
        info = environment_info()

    with then:
        assert set(info) == {"python_version", "numpy_version", "mmaml_version"}


def test_format_exception():
    with given:
        try:
            raise ValueError("bad value")
        except ValueError as e:
            exc = e

    with when:
        info = format_exception(exc)

    with then:
        assert info["type"] == "builtins.ValueError"
        assert info["message"] == "bad value"
        assert len(info["traceback"]) == 1
