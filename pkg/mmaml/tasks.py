from dataclasses import dataclass, field
from enum import Enum
from math import pi
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

__all__ = ("FunctionMode", "TaskSpec", "TaskSample", "RngStream", "TaskDistributionError",
           "MODE_SETS", "X_RANGE", "resolve_mode_set", "sample_task", "evaluate_function",
           "realize_task", "sample_tasks",)

X_RANGE = (-5.0, 5.0)


class TaskDistributionError(ValueError):
    """
    Raised when tasks cannot be sampled from the requested distribution,
    such as an empty or unknown mode set.
    """
    pass


class FunctionMode(str, Enum):
    SINUSOIDAL = "Sinusoidal"
    LINEAR = "Linear"
    QUADRATIC = "Quadratic"
    L1NORM = "L1Norm"
    TANH = "Tanh"

    @property
    def label(self) -> int:
        return _MODE_ORDER.index(self)


_MODE_ORDER: Tuple[FunctionMode, ...] = tuple(FunctionMode)

MODE_SETS: Dict[int, Tuple[FunctionMode, ...]] = {
    2: (FunctionMode.SINUSOIDAL, FunctionMode.LINEAR),
    3: (FunctionMode.SINUSOIDAL, FunctionMode.LINEAR, FunctionMode.QUADRATIC),
    5: _MODE_ORDER,
}

# (low, high) per parameter; a pair of ranges means the union sampled sign-first
_SPLIT = ((-0.15, -0.02), (0.02, 0.15))
_PARAM_RANGES: Dict[FunctionMode, Dict[str, Any]] = {
    FunctionMode.SINUSOIDAL: {"A": (0.1, 5.0), "w": (0.5, 2.0), "b": (0.0, 2 * pi)},
    FunctionMode.LINEAR: {"A": (-3.0, 3.0), "b": (-3.0, 3.0)},
    FunctionMode.QUADRATIC: {"A": _SPLIT, "c": (-3.0, 3.0), "b": (-3.0, 3.0)},
    FunctionMode.L1NORM: {"A": _SPLIT, "c": (-3.0, 3.0), "b": (-3.0, 3.0)},
    FunctionMode.TANH: {"A": (-3.0, 3.0), "c": (-3.0, 3.0), "b": (-3.0, 3.0)},
}


def resolve_mode_set(value: Union[int, str, Sequence[Union[str, FunctionMode]]]
                     ) -> Tuple[FunctionMode, ...]:
    """
    Turn a mode count (2, 3 or 5) or a list of mode tags into an ordered mode set.

    :raises TaskDistributionError: If the count is unknown, a tag is not a
                                   function family, or the set is empty.
    """
    if isinstance(value, bool):
        raise TaskDistributionError(f"Invalid mode set {value!r}")
    if isinstance(value, (int, str)) and str(value).isdigit():
        count = int(value)
        if count not in MODE_SETS:
            raise TaskDistributionError(
                f"Unknown mode count {count!r}, expected one of {sorted(MODE_SETS)}")
        return MODE_SETS[count]
    if isinstance(value, str):
        value = [value]

    modes: List[FunctionMode] = []
    for tag in value:
        try:
            mode = FunctionMode(tag)
        except ValueError:
            raise TaskDistributionError(f"Unknown function mode {tag!r}") from None
        if mode not in modes:
            modes.append(mode)
    if not modes:
        raise TaskDistributionError("Mode set must not be empty")
    return tuple(modes)


class RngStream:
    """
    A seeded random stream.

    Two streams created with the same seed and key produce the same draws in
    the same order. ``derive`` extends the key, giving an independent child
    stream per task or per iteration. ``counter`` records how many draw calls
    the stream has served.
    """

    def __init__(self, seed: int, key: Tuple[int, ...] = ()) -> None:
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self.counter = 0
        sequence = np.random.SeedSequence(self.seed & (2 ** 64 - 1), spawn_key=self.key)
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def derive(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))

    def uniform(self, low: float, high: float, size: Optional[int] = None) -> Any:
        self.counter += 1
        return self._generator.uniform(low, high, size)

    def normal(self, scale: float, size: Optional[Union[int, Tuple[int, ...]]] = None) -> Any:
        self.counter += 1
        return self._generator.normal(0.0, scale, size)

    def integers(self, high: int) -> int:
        self.counter += 1
        return int(self._generator.integers(0, high))

    def coin(self) -> bool:
        return self.integers(2) == 1

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._generator.permutation(n)

    def __repr__(self) -> str:
        return f"<RngStream seed={self.seed} key={self.key!r} counter={self.counter}>"


@dataclass(frozen=True)
class TaskSpec:
    mode: FunctionMode
    params: Mapping[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"mode": self.mode.value, "params": dict(self.params)}


@dataclass(frozen=True)
class TaskSample:
    """
    A realized task: noisy support and query points drawn from one TaskSpec.

    Support points are stored sorted ascending by x.
    """
    spec: TaskSpec
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray

    @property
    def mode_label(self) -> int:
        return self.spec.mode.label

    @property
    def support(self) -> List[Tuple[float, float]]:
        return list(zip(self.support_x.tolist(), self.support_y.tolist()))

    @property
    def query(self) -> List[Tuple[float, float]]:
        return list(zip(self.query_x.tolist(), self.query_y.tolist()))

    def to_dict(self) -> Dict[str, Any]:
        return {
            **self.spec.to_dict(),
            "mode_label": self.mode_label,
            "support": [list(p) for p in self.support],
            "query": [list(p) for p in self.query],
        }


def _sample_param(bounds: Any, rng: RngStream) -> float:
    if isinstance(bounds[0], tuple):
        negative, positive = bounds
        low, high = positive if rng.coin() else negative
    else:
        low, high = bounds
    return float(rng.uniform(low, high))


def sample_task(mode_set: Sequence[FunctionMode], rng: RngStream) -> TaskSpec:
    """
    Draw a task: a mode uniformly from ``mode_set``, then its parameters
    uniformly from their ranges.

    :raises TaskDistributionError: If ``mode_set`` is empty.
    """
    if len(mode_set) == 0:
        raise TaskDistributionError("Cannot sample a task from an empty mode set")
    mode = FunctionMode(mode_set[rng.integers(len(mode_set))])
    params = {name: _sample_param(bounds, rng) for name, bounds in _PARAM_RANGES[mode].items()}
    return TaskSpec(mode, params)


def evaluate_function(spec: TaskSpec, x: Any) -> Any:
    """
    Noise-free ground truth of a task at ``x`` (a scalar or an array).
    """
    p = spec.params
    if spec.mode is FunctionMode.SINUSOIDAL:
        return p["A"] * np.sin(p["w"] * x + p["b"])
    if spec.mode is FunctionMode.LINEAR:
        return p["A"] * x + p["b"]
    if spec.mode is FunctionMode.QUADRATIC:
        return p["A"] * (x - p["c"]) ** 2 + p["b"]
    if spec.mode is FunctionMode.L1NORM:
        return p["A"] * np.abs(x - p["c"]) + p["b"]
    return p["A"] * np.tanh(x - p["c"]) + p["b"]


def realize_task(spec: TaskSpec, K: int, L: int, noise_sigma: float,
                 rng: RngStream) -> TaskSample:
    """
    Draw K support and L query points for a task.

    Inputs are uniform on ``X_RANGE``; every output gets independent Gaussian
    noise with standard deviation ``noise_sigma``.
    """
    if K < 1 or L < 1:
        raise TaskDistributionError(f"K and L must be positive, got K={K!r}, L={L!r}")
    if noise_sigma < 0:
        raise TaskDistributionError(f"noise_sigma must be >= 0, got {noise_sigma!r}")

    x = np.asarray(rng.uniform(X_RANGE[0], X_RANGE[1], K + L), dtype=np.float64)
    noise = np.asarray(rng.normal(noise_sigma, K + L), dtype=np.float64)
    y = np.asarray(evaluate_function(spec, x), dtype=np.float64) + noise

    order = np.argsort(x[:K], kind="stable")
    support_x, support_y = x[:K][order], y[:K][order]
    query_x, query_y = x[K:], y[K:]
    for array in (support_x, support_y, query_x, query_y):
        array.setflags(write=False)
    return TaskSample(spec, support_x, support_y, query_x, query_y)


def sample_tasks(mode_set: Sequence[FunctionMode], count: int, *, K: int, L: int,
                 noise_sigma: float, rng: RngStream) -> Iterator[TaskSample]:
    """
    Lazily draw ``count`` tasks, each from a uniformly chosen mode of ``mode_set``.

    :param K: Support points per task.
    :param L: Query points per task.
    :param noise_sigma: Standard deviation of the noise added to support and query targets.
    :param rng: Stream shared by all tasks in order.
    """
    for _ in range(count):
        spec = sample_task(mode_set, rng)
        yield realize_task(spec, K, L, noise_sigma, rng)
