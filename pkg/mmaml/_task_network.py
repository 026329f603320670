from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ._autodiff import (
    Node,
    ShapeError,
    add,
    constant,
    leaf,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    square,
    sub,
)
from .tasks import RngStream

__all__ = ("ModulationOperator", "MlpParameters", "ModulationSet", "ModulatedActivations",
           "ModulationError", "forward", "forward_with_activations", "mse_loss",
           "init_parameters", "truncated_normal", "DEFAULT_HIDDEN_SIZES",)

DEFAULT_HIDDEN_SIZES = (100, 100, 100)

# Standard deviation of a unit normal truncated to [-2, 2]
_TRUNCATED_STD = 0.8796256610342398


class ModulationError(ValueError):
    """
    Raised when a modulation set does not fit the task network it is applied to,
    or names an operator that cannot be generated.
    """
    pass


class ModulationOperator(str, Enum):
    FILM = "film"
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


@dataclass(frozen=True)
class MlpParameters:
    """
    Weights and biases of the task network, input layer first.

    Every layer but the last is a hidden block that modulation applies to.
    Weight matrices are laid out ``(fan_in, fan_out)``.
    """
    weights: Tuple[Node, ...]
    biases: Tuple[Node, ...]

    @property
    def block_count(self) -> int:
        return len(self.weights) - 1

    @property
    def hidden_sizes(self) -> Tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def nodes(self) -> List[Node]:
        return [n for pair in zip(self.weights, self.biases) for n in pair]

    def named(self, prefix: str = "theta") -> Dict[str, Node]:
        named: Dict[str, Node] = {}
        for index, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"{prefix}.w{index}"] = w
            named[f"{prefix}.b{index}"] = b
        return named

    @classmethod
    def from_named(cls, named: Mapping[str, Node], prefix: str = "theta") -> "MlpParameters":
        count = sum(1 for key in named if key.startswith(f"{prefix}.w"))
        return cls(tuple(named[f"{prefix}.w{i}"] for i in range(count)),
                   tuple(named[f"{prefix}.b{i}"] for i in range(count)))

    def replace(self, nodes: Sequence[Node]) -> "MlpParameters":
        return MlpParameters(tuple(nodes[0::2]), tuple(nodes[1::2]))


@dataclass(frozen=True)
class ModulationSet:
    """
    Per-block modulation vectors for the hidden blocks of the task network.

    FiLM blocks carry ``(gamma, beta)``; attention and gating blocks carry a
    single scaling vector and ``None``. The identity set carries no blocks and
    fits any network.
    """
    operator: ModulationOperator
    blocks: Tuple[Tuple[Node, Optional[Node]], ...] = ()

    @classmethod
    def identity(cls) -> "ModulationSet":
        return cls(ModulationOperator.IDENTITY)

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    def nodes(self) -> List[Node]:
        return [n for block in self.blocks for n in block if n is not None]

    def apply(self, index: int, pre_activation: Node) -> Node:
        if self.operator is ModulationOperator.IDENTITY:
            return pre_activation
        scale_, shift = self.blocks[index]
        modulated = mul(pre_activation, scale_)
        if shift is not None:
            modulated = add(modulated, shift)
        return modulated


@dataclass(frozen=True)
class ModulatedActivations:
    pre_activations: Tuple[Node, ...]
    modulated: Tuple[Node, ...]


def _check_fit(theta: MlpParameters, tau: ModulationSet) -> None:
    if tau.operator is ModulationOperator.IDENTITY:
        return
    if tau.block_count != theta.block_count:
        raise ModulationError(
            f"Modulation has {tau.block_count} blocks, network has {theta.block_count}")
    for index, (width, (scale_, shift)) in enumerate(zip(theta.hidden_sizes, tau.blocks)):
        for vector in (scale_, shift):
            if vector is not None and vector.shape != (width,):
                raise ModulationError(
                    f"Block {index} modulation has shape {vector.shape}, expected ({width},)")


def forward_with_activations(x: Union[Node, np.ndarray, Sequence[float]],
                             theta: MlpParameters,
                             tau: ModulationSet) -> Tuple[Node, ModulatedActivations]:
    _check_fit(theta, tau)
    inputs = x if isinstance(x, Node) else constant(x)
    if inputs.ndim != 1:
        raise ShapeError("forward", inputs.shape, detail="expected a batch of scalars")

    hidden = reshape(inputs, (inputs.shape[0], 1))
    pre_activations, modulated = [], []
    for index in range(theta.block_count):
        pre = add(matmul(hidden, theta.weights[index]), theta.biases[index])
        mod = tau.apply(index, pre)
        pre_activations.append(pre)
        modulated.append(mod)
        hidden = relu(mod)

    out = add(matmul(hidden, theta.weights[-1]), theta.biases[-1])
    prediction = reshape(out, (inputs.shape[0],))
    return prediction, ModulatedActivations(tuple(pre_activations), tuple(modulated))


def forward(x: Union[Node, np.ndarray, Sequence[float]], theta: MlpParameters,
            tau: ModulationSet) -> Node:
    """
    Predict outputs for a batch of scalar inputs.

    Each hidden block computes ``W·h + b``, applies the modulation of that
    block to the pre-activation and then ReLU. The output layer is linear and
    never modulated.

    :param x: A 1-D batch of inputs.
    :param theta: Task network parameters.
    :param tau: Modulation for the hidden blocks.
    :return: A 1-D node of predictions, one per input.
    :raises ModulationError: If ``tau`` does not match the hidden blocks of ``theta``.
    """
    prediction, _ = forward_with_activations(x, theta, tau)
    return prediction


def mse_loss(pred: Node, target: Union[Node, np.ndarray, Sequence[float]]) -> Node:
    """
    Mean squared error between predictions and targets.

    :raises ShapeError: If the shapes differ.
    """
    target_node = target if isinstance(target, Node) else constant(target)
    if pred.shape != target_node.shape:
        raise ShapeError("mse_loss", pred.shape, target_node.shape)
    return mean(square(sub(pred, target_node)))


def truncated_normal(rng: RngStream, shape: Tuple[int, ...], std: float) -> np.ndarray:
    """
    Normal samples redrawn until they fall within two standard deviations,
    rescaled so the result has standard deviation ``std``.
    """
    values = np.asarray(rng.normal(1.0, shape), dtype=np.float64)
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = rng.normal(1.0, int(outside.sum()))
        outside = np.abs(values) > 2.0
    return values * (std / _TRUNCATED_STD)


def init_parameters(rng: RngStream, hidden_sizes: Sequence[int] = DEFAULT_HIDDEN_SIZES, *,
                    input_size: int = 1, output_size: int = 1) -> MlpParameters:
    """
    Randomly initialize a task network.

    Weights are truncated-normal with standard deviation ``1 / sqrt(fan_in)``;
    biases start at zero.

    :param rng: Initialization stream.
    :param hidden_sizes: Width of each hidden block.
    :param input_size: Input features.
    :param output_size: Output features.
    :return: The parameters as leaves requiring gradients.
    """
    sizes = [input_size, *hidden_sizes, output_size]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(leaf(truncated_normal(rng, (fan_in, fan_out), 1.0 / np.sqrt(fan_in))))
        biases.append(leaf(np.zeros(fan_out)))
    return MlpParameters(tuple(weights), tuple(biases))
