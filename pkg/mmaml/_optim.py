from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

__all__ = ("AdamState", "adam_step", "clip_grad_norm", "global_norm",)


@dataclass(frozen=True)
class AdamState:
    """
    Moment estimates of the meta-optimizer, keyed like the parameters they track.
    """
    first_moment: Mapping[str, np.ndarray] = field(default_factory=dict)
    second_moment: Mapping[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    """L2 norm of all gradients taken together as one vector."""
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def clip_grad_norm(grads: Mapping[str, np.ndarray],
                   max_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Scale all gradients together so their global L2 norm is at most ``max_norm``.

    :return: The (possibly scaled) gradients and the norm before clipping.
    """
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    coef = max_norm / (norm + 1e-6)
    return {k: g * coef for k, g in grads.items()}, norm


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update over every parameter in ``params``.

    Parameters without a gradient entry are left untouched. Inputs are never
    modified; new arrays are returned.
    """
    t = state.step + 1
    first: Dict[str, np.ndarray] = dict(state.first_moment)
    second: Dict[str, np.ndarray] = dict(state.second_moment)
    updated: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = value
            continue
        m = state.beta1 * first.get(name, np.zeros_like(value)) + (1 - state.beta1) * g
        v = state.beta2 * second.get(name, np.zeros_like(value)) + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        first[name], second[name] = m, v
    return updated, AdamState(first, second, t, state.beta1, state.beta2, state.eps)
