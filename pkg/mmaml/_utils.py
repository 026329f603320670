import os
import tempfile
from contextlib import contextmanager
from importlib.metadata import PackageNotFoundError, metadata
from pathlib import Path
from time import time
from typing import IO, Any, Iterator, Union

__all__ = ("now", "get_package_version", "atomic_writer",)


def get_package_version(name: str, *, default: str = "0.0.0") -> str:
    """
    Retrieve the version of the installed package with the specified name.

    :param name: The name of the package to retrieve the version for.
    :param default: The version string to return if the package is not installed.
    :return: The version string of the package if found, otherwise ``default``.
    """
    try:
        version = metadata(name)
    except PackageNotFoundError:
        return default
    return str(version["Version"]) if ("Version" in version) else default


def now() -> int:
    """
    Get the current time in milliseconds since the Unix epoch.
    """
    return round(time() * 1000)


@contextmanager
def atomic_writer(path: Union[str, Path], mode: str = "w") -> Iterator[IO[Any]]:
    """
    Open a temporary file next to ``path`` and move it into place on success.

    Readers never observe a partially written file: the target either keeps
    its old content or gets the complete new one. On error the temporary file
    is removed.

    :param path: The final destination.
    :param mode: ``"w"`` for text or ``"wb"`` for bytes.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
    try:
        encoding = None if "b" in mode else "utf-8"
        newline = None if "b" in mode else ""
        with os.fdopen(fd, mode, encoding=encoding, newline=newline) as f:
            yield f
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except FileNotFoundError:
            pass
        raise
