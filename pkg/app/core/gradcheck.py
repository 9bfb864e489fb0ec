import logging
from typing import Callable, Optional

import numpy as np

from app.core.config import settings
from app.core.exceptions import ShapeError
from app.core.tensor import GradientTape, Tensor

logger = logging.getLogger(__name__)

REL_FLOOR = 1e-8


def _scalar(fn: Callable[[Tensor], Tensor], values: np.ndarray) -> float:
    out = fn(Tensor(values))
    if out.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar-valued fn, got shape {out.shape}")
    return out.item()


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    input: Tensor,
    eps: Optional[float] = None,
    atol: Optional[float] = None
) -> float:
    """Max relative error between the tape gradient of ``fn`` and central differences.

    Relative error per coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``; coordinates
    whose absolute difference is below ``atol`` count as exact.
    """
    eps = settings.GRADCHECK_EPS if eps is None else eps
    atol = settings.GRADCHECK_ATOL if atol is None else atol
    base = input.numpy()

    leaf = Tensor(base, requires_grad=True)
    with GradientTape() as tape:
        out = fn(leaf)
    if out.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar-valued fn, got shape {out.shape}")
    if out.tape_id is not None:
        tape.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros(base.shape)

    numeric = np.empty(base.shape)
    flat = base.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        f_plus = _scalar(fn, plus.reshape(base.shape))
        f_minus = _scalar(fn, minus.reshape(base.shape))
        numeric.flat[i] = (f_plus - f_minus) / (2.0 * eps)

    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    rel = np.where(diff < atol, 0.0, diff / denom)
    error = float(rel.max()) if rel.size else 0.0
    logger.debug(f"finite_diff_check over {flat.size} coordinates: max relative error {error:.3e}")
    return error
