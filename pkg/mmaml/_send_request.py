from typing import Any, Callable, Tuple

from httpx import Client, RequestError

__all__ = ("send_request", "SendRequestFn", "TelemetryRequestError",)

SendRequestFn = Callable[[str, float, Any], Tuple[int, Any]]


class TelemetryRequestError(Exception):
    """
    Raised when run events cannot be delivered to the telemetry server, either
    because the connection failed or because the server did not accept them.
    """
    pass


def send_request(url: str, timeout: float, payload: Any) -> Tuple[int, Any]:
    """
    POST a batch of run events as JSON.

    Any 2xx status counts as accepted; servers answer 200 for synchronous
    ingestion and 202 when they queue the batch.

    :param url: The events endpoint.
    :param timeout: The maximum time to wait for the request to complete.
    :param payload: The JSON serializable list of event dictionaries.
    :return: The HTTP status code and the response body, parsed as JSON when
             possible and raw text otherwise.
    :raises TelemetryRequestError: If the request fails or the status is not 2xx.
    """
    with Client() as client:
        try:
            response = client.post(url, json=payload, timeout=timeout)
        except RequestError as e:
            raise TelemetryRequestError(f"Failed to send run events to {url!r}: «{e!r}»") \
                from None

        status = response.status_code
        try:
            body = response.json()
        except ValueError:
            body = response.text

    if not 200 <= status < 300:
        raise TelemetryRequestError(f"Failed to send run events to {url!r}: {status} «{body}»")
    return status, body
