import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from ._meta_learner import Learner, ParameterStore, TrainedModel
from ._optim import AdamState
from ._utils import atomic_writer
from .config import ConfigError, ModelKind, parse_run_config

__all__ = ("save_checkpoint", "load_checkpoint", "CheckpointError", "CHECKPOINT_MAGIC",
           "CHECKPOINT_VERSION",)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MMAMLCKP"
CHECKPOINT_VERSION = 1

# magic, format version, header length
_PREAMBLE = struct.Struct("<8sIQ")
_DTYPE = np.dtype("<f8")


class CheckpointError(Exception):
    """
    Raised when a checkpoint cannot be read back: wrong magic, unsupported
    version, a truncated payload or a header that does not describe a model.
    """
    pass


def _tensor_entries(model: TrainedModel) -> List[Tuple[str, np.ndarray]]:
    entries = []
    for key, learner in model.learners.items():
        for name, value in learner.store.tensors.items():
            entries.append((f"{key}/{name}", value))
        for name, value in learner.optimizer.first_moment.items():
            entries.append((f"{key}/adam.m/{name}", value))
        for name, value in learner.optimizer.second_moment.items():
            entries.append((f"{key}/adam.v/{name}", value))
    return entries


def save_checkpoint(model: TrainedModel, path: Union[str, Path]) -> Path:
    """
    Write every learner of a model, with its optimizer state, to a single file.

    Layout: the magic bytes, a format version and the length of a JSON header,
    then the header, then the raw little-endian float64 tensors in header order.
    The file is replaced atomically.

    :return: The path written.
    """
    entries = _tensor_entries(model)
    index, offset = [], 0
    for name, value in entries:
        index.append({"name": name, "shape": list(value.shape), "offset": offset})
        offset += value.size * _DTYPE.itemsize

    header = {
        "kind": model.kind.value,
        "iteration": model.iteration,
        "config": model.config.to_dict(),
        "learners": {
            key: {"adam_step": learner.optimizer.step, "beta1": learner.optimizer.beta1,
                  "beta2": learner.optimizer.beta2, "eps": learner.optimizer.eps}
            for key, learner in model.learners.items()
        },
        "tensors": index,
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")

    target = Path(path)
    with atomic_writer(target, "wb") as f:
        f.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(encoded)))
        f.write(encoded)
        for _, value in entries:
            f.write(np.ascontiguousarray(value, dtype=_DTYPE).tobytes())
    logger.info("Saved %s checkpoint at iteration %d to %s", model.kind.value,
                model.iteration, target)
    return target


def _read_header(data: bytes, path: Path) -> Tuple[Dict[str, Any], int]:
    if len(data) < _PREAMBLE.size:
        raise CheckpointError(f"{path}: file is too short to be a checkpoint")
    magic, version, header_len = _PREAMBLE.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREAMBLE.size
    if len(data) < start + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from None
    return header, start + header_len


def load_checkpoint(path: Union[str, Path]) -> TrainedModel:
    """
    Read a model written by :func:`save_checkpoint`.

    :raises CheckpointError: If the file is not a readable checkpoint.
    :raises OSError: If the file cannot be opened.
    """
    source = Path(path)
    data = source.read_bytes()
    header, payload_start = _read_header(data, source)

    try:
        kind = ModelKind(header["kind"])
        config = parse_run_config({"training": header["config"]}).training
        tensor_index = header["tensors"]
        learner_meta = header["learners"]
        iteration = int(header["iteration"])
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise CheckpointError(f"{source}: malformed header: {e!r}") from None

    tensors: Dict[str, Dict[str, Dict[str, np.ndarray]]] = {
        key: {"params": {}, "m": {}, "v": {}} for key in learner_meta
    }
    payload = memoryview(data)[payload_start:]
    for entry in tensor_index:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * _DTYPE.itemsize
        if end > len(payload):
            raise CheckpointError(f"{source}: truncated tensor {entry['name']!r}")
        value = np.frombuffer(payload[start:end], dtype=_DTYPE).astype(np.float64)
        value = value.reshape(shape)
        value.setflags(write=False)

        key, _, rest = entry["name"].partition("/")
        if key not in tensors:
            raise CheckpointError(f"{source}: tensor {entry['name']!r} has no learner")
        if rest.startswith("adam.m/"):
            tensors[key]["m"][rest[len("adam.m/"):]] = value
        elif rest.startswith("adam.v/"):
            tensors[key]["v"][rest[len("adam.v/"):]] = value
        else:
            tensors[key]["params"][rest] = value

    learners = {}
    for key, meta in learner_meta.items():
        optimizer = AdamState(tensors[key]["m"], tensors[key]["v"], int(meta["adam_step"]),
                              float(meta["beta1"]), float(meta["beta2"]), float(meta["eps"]))
        learners[key] = Learner(ParameterStore(tensors[key]["params"]), optimizer)
    return TrainedModel(kind, config, learners, iteration)
