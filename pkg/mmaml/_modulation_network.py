from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from ._autodiff import (
    Node,
    add,
    concat,
    constant,
    leaf,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softmax,
    tanh,
)
from ._task_network import ModulationError, ModulationOperator, ModulationSet, truncated_normal
from .tasks import RngStream, TaskSample

__all__ = ("EncoderParameters", "GeneratorParameters", "TaskEmbedding", "encode",
           "generate_modulation", "modulate", "init_encoder_parameters",
           "init_generator_parameters", "generator_output_size",)

SupportLike = Union[TaskSample, np.ndarray, Sequence[Tuple[float, float]]]


@dataclass(frozen=True)
class LstmDirection:
    w_ih: Node
    w_hh: Node
    bias: Node

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[0]


@dataclass(frozen=True)
class EncoderParameters:
    """
    Bidirectional LSTM over the sorted support pairs.

    Each ``(x, y)`` pair is linearly projected to the cell input size before
    entering the recurrence. Gates are packed ``[input, forget, cell, output]``.
    """
    w_in: Node
    b_in: Node
    forward: LstmDirection
    backward: LstmDirection

    @property
    def embedding_size(self) -> int:
        return self.forward.hidden_size + self.backward.hidden_size

    def named(self, prefix: str = "encoder") -> Dict[str, Node]:
        named = {f"{prefix}.w_in": self.w_in, f"{prefix}.b_in": self.b_in}
        for tag, direction in (("fwd", self.forward), ("bwd", self.backward)):
            named[f"{prefix}.{tag}.w_ih"] = direction.w_ih
            named[f"{prefix}.{tag}.w_hh"] = direction.w_hh
            named[f"{prefix}.{tag}.bias"] = direction.bias
        return named

    @classmethod
    def from_named(cls, named: Mapping[str, Node],
                   prefix: str = "encoder") -> "EncoderParameters":
        def direction(tag: str) -> LstmDirection:
            return LstmDirection(named[f"{prefix}.{tag}.w_ih"], named[f"{prefix}.{tag}.w_hh"],
                                 named[f"{prefix}.{tag}.bias"])
        return cls(named[f"{prefix}.w_in"], named[f"{prefix}.b_in"],
                   direction("fwd"), direction("bwd"))


@dataclass(frozen=True)
class GeneratorBlock:
    w1: Node
    b1: Node
    w2: Node
    b2: Node


@dataclass(frozen=True)
class GeneratorParameters:
    """One single-hidden-layer MLP per modulated block of the task network."""
    blocks: Tuple[GeneratorBlock, ...]

    def named(self, prefix: str = "generators") -> Dict[str, Node]:
        named: Dict[str, Node] = {}
        for index, block in enumerate(self.blocks):
            for attr in ("w1", "b1", "w2", "b2"):
                named[f"{prefix}.{index}.{attr}"] = getattr(block, attr)
        return named

    @classmethod
    def from_named(cls, named: Mapping[str, Node],
                   prefix: str = "generators") -> "GeneratorParameters":
        count = sum(1 for key in named if key.startswith(f"{prefix}.") and key.endswith(".w1"))
        return cls(tuple(
            GeneratorBlock(*(named[f"{prefix}.{i}.{attr}"] for attr in ("w1", "b1", "w2", "b2")))
            for i in range(count)
        ))


@dataclass(frozen=True)
class TaskEmbedding:
    values: Node

    @property
    def dimension(self) -> int:
        return self.values.shape[0]

    def numpy(self) -> np.ndarray:
        return self.values.value


def _support_pairs(support: SupportLike) -> np.ndarray:
    if isinstance(support, TaskSample):
        pairs = np.stack([support.support_x, support.support_y], axis=1)
    else:
        pairs = np.asarray(support, dtype=np.float64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ModulationError("Cannot encode an empty support set")
    return pairs[np.argsort(pairs[:, 0], kind="stable")]


def _run_direction(gate_inputs: Node, cell: LstmDirection, steps: Sequence[int]) -> Node:
    size = cell.hidden_size
    hidden, state = None, None
    for step in steps:
        z = slice_(gate_inputs, step, step + 1, axis=0)
        if hidden is not None:
            z = add(z, matmul(hidden, cell.w_hh))
        input_gate = sigmoid(slice_(z, 0, size))
        forget_gate = sigmoid(slice_(z, size, 2 * size))
        candidate = tanh(slice_(z, 2 * size, 3 * size))
        output_gate = sigmoid(slice_(z, 3 * size, 4 * size))
        update = mul(input_gate, candidate)
        state = update if state is None else add(mul(forget_gate, state), update)
        hidden = mul(output_gate, tanh(state))
    assert hidden is not None
    return hidden


def encode(support: SupportLike, omega_h: EncoderParameters) -> TaskEmbedding:
    """
    Summarize a support set as a fixed-length task embedding.

    Pairs are ordered by x, projected, and read by the forward and backward
    LSTMs; the embedding concatenates their last hidden states.

    :param support: A task sample or an array-like of ``(x, y)`` pairs.
    :param omega_h: Encoder parameters.
    :return: The embedding, differentiable w.r.t. ``omega_h``.
    :raises ModulationError: If the support set is empty.
    """
    pairs = constant(_support_pairs(support))
    projected = add(matmul(pairs, omega_h.w_in), omega_h.b_in)
    count = pairs.shape[0]

    last_forward = _run_direction(
        add(matmul(projected, omega_h.forward.w_ih), omega_h.forward.bias),
        omega_h.forward, range(count))
    last_backward = _run_direction(
        add(matmul(projected, omega_h.backward.w_ih), omega_h.backward.bias),
        omega_h.backward, range(count - 1, -1, -1))

    joined = concat([last_forward, last_backward], axis=1)
    return TaskEmbedding(reshape(joined, (omega_h.embedding_size,)))


def generator_output_size(operator: ModulationOperator, width: int) -> int:
    if operator is ModulationOperator.FILM:
        return 2 * width
    if operator in (ModulationOperator.SOFTMAX, ModulationOperator.SIGMOID):
        return width
    raise ModulationError(f"Operator {operator.value!r} has no modulation generator")


def generate_modulation(upsilon: TaskEmbedding, omega_g: GeneratorParameters,
                        operator: ModulationOperator) -> ModulationSet:
    """
    Produce the modulation vectors of every hidden block from a task embedding.

    FiLM uses a residual scale, ``gamma = 1 + raw``, so an all-zero generator
    output is the identity modulation. Softmax attention is multiplied by the
    block width to keep activations at their unmodulated magnitude.

    :raises ModulationError: If ``operator`` cannot be generated.
    """
    operator = ModulationOperator(operator)
    if operator is ModulationOperator.IDENTITY:
        raise ModulationError("The identity operator has no modulation generator")

    row = reshape(upsilon.values, (1, upsilon.dimension))
    blocks: List[Tuple[Node, Union[Node, None]]] = []
    for block in omega_g.blocks:
        hidden = relu(add(matmul(row, block.w1), block.b1))
        raw = reshape(add(matmul(hidden, block.w2), block.b2), (block.b2.shape[0],))
        if operator is ModulationOperator.FILM:
            width = raw.shape[0] // 2
            gamma = add(constant(np.ones(width)), slice_(raw, 0, width))
            blocks.append((gamma, slice_(raw, width, 2 * width)))
        elif operator is ModulationOperator.SOFTMAX:
            blocks.append((scale(softmax(raw), raw.shape[0]), None))
        else:
            blocks.append((sigmoid(raw), None))
    return ModulationSet(operator, tuple(blocks))


def modulate(support: SupportLike, omega_h: EncoderParameters, omega_g: GeneratorParameters,
             operator: ModulationOperator) -> Tuple[TaskEmbedding, ModulationSet]:
    embedding = encode(support, omega_h)
    return embedding, generate_modulation(embedding, omega_g, operator)


def _dense(rng: RngStream, fan_in: int, fan_out: int) -> Node:
    return leaf(truncated_normal(rng, (fan_in, fan_out), 1.0 / np.sqrt(fan_in)))


def init_encoder_parameters(rng: RngStream, *, hidden_size: int = 40,
                            input_size: int = 40) -> EncoderParameters:
    def direction() -> LstmDirection:
        return LstmDirection(_dense(rng, input_size, 4 * hidden_size),
                             _dense(rng, hidden_size, 4 * hidden_size),
                             leaf(np.zeros(4 * hidden_size)))
    return EncoderParameters(_dense(rng, 2, input_size), leaf(np.zeros(input_size)),
                             direction(), direction())


def init_generator_parameters(rng: RngStream, operator: ModulationOperator,
                              block_widths: Sequence[int], *, embedding_size: int = 80,
                              hidden_size: int = 64,
                              zero_output: bool = True) -> GeneratorParameters:
    """
    Initialize one generator per block.

    With ``zero_output`` the last layer starts at zero, so untrained FiLM and
    softmax generators produce the identity modulation.
    """
    blocks = []
    for width in block_widths:
        out = generator_output_size(ModulationOperator(operator), width)
        w1 = _dense(rng, embedding_size, hidden_size)
        w2 = leaf(np.zeros((hidden_size, out))) if zero_output else _dense(rng, hidden_size, out)
        blocks.append(GeneratorBlock(w1, leaf(np.zeros(hidden_size)), w2, leaf(np.zeros(out))))
    return GeneratorParameters(tuple(blocks))
