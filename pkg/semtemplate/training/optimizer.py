import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..core.autodiff import ParamLayout, ParamVector
from ..core.errors import ConfigurationError, NumericalError

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Adam moments over a flat parameter vector"""
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, layout: ParamLayout) -> "OptimizerState":
        return cls(np.zeros(layout.size), np.zeros(layout.size), 0)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.m.copy(), self.v.copy(), self.step)


def clip_grad_norm(grad: ParamVector, max_norm: Optional[float]) -> Tuple[ParamVector, float]:
    """Rescale the gradient so its global l2 norm is at most max_norm"""
    norm = float(np.linalg.norm(grad.data))
    if max_norm is None or norm <= max_norm:
        return grad, norm
    logger.debug(f"Clipping gradient norm {norm:.4g} to {max_norm}")
    return ParamVector(grad.layout, grad.data * (max_norm / norm)), norm


def adam_step(
    params: ParamVector,
    grad: ParamVector,
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    mask: Optional[np.ndarray] = None,
) -> Tuple[ParamVector, OptimizerState]:
    """
    One bias-corrected Adam update. Entries where ``mask`` is False keep their
    value and moments.
    """
    if params.layout != grad.layout or state.m.shape != params.data.shape:
        raise ConfigurationError("Parameter, gradient and optimizer layouts do not match")
    if not np.all(np.isfinite(grad.data)):
        raise NumericalError("Non-finite gradient, optimizer step aborted")

    g = grad.data
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)

    if mask is None:
        data = params.data - update
    else:
        data = np.where(mask, params.data - update, params.data)
        m = np.where(mask, m, state.m)
        v = np.where(mask, v, state.v)
    return ParamVector(params.layout, data), OptimizerState(m, v, t)


def latent_row_mask(layout: ParamLayout, active_rows) -> np.ndarray:
    """True everywhere except latent rows outside ``active_rows``"""
    mask = np.ones(layout.size, dtype=bool)
    if "latent" not in layout:
        return mask
    block = layout["latent"]
    rows = np.zeros(block.shape[0], dtype=bool)
    rows[list(active_rows)] = True
    mask[block.offset:block.stop] = np.repeat(rows, block.shape[1])
    return mask
