"""Finite-difference checks over every differentiable primitive and a full TCC block."""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core import ops
from app.core.config import settings
from app.core.gradcheck import finite_diff_check
from app.core.tensor import Tensor
from app.models.config import TccConfig, TccMode
from app.models.pyramid import CondensedContext
from app.services import tcc as tcc_service

logger = logging.getLogger(__name__)

Case = Tuple[Callable[[Tensor], Tensor], Tensor]
CaseBuilder = Callable[[np.random.Generator, Tuple[int, int, int, int]], Case]

DEFAULT_SIZES: Tuple[Tuple[int, int, int, int], ...] = ((1, 2, 3, 4), (2, 3, 4, 3), (1, 4, 5, 5))


@dataclass
class GradcheckRow:
    name: str
    shape: Tuple[int, ...]
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _weighted_sum(rng: np.random.Generator, fn: Callable[[Tensor], Tensor]) -> Callable[[Tensor], Tensor]:
    """Reduce ``fn``'s output to a scalar with fixed random weights."""
    cache: Dict[str, np.ndarray] = {}

    def scalar(x: Tensor) -> Tensor:
        out = fn(x)
        if "w" not in cache:
            cache["w"] = rng.uniform(0.5, 1.5, out.shape)
        return ops.sum(ops.mul(out, cache["w"]))

    return scalar


def _elementwise(name: str) -> CaseBuilder:
    def build(rng, shape):
        x = Tensor(rng.standard_normal(shape))
        other = rng.standard_normal(shape)
        positive = rng.uniform(0.5, 2.0, shape)
        fns = {
            "add": lambda t: ops.add(t, other),
            "sub": lambda t: ops.sub(other, t),
            "mul": lambda t: ops.mul(t, other),
            "div": lambda t: ops.div(other, ops.add(ops.mul(t, t), 1.0)),
            "neg": ops.neg,
            "relu": ops.relu,
            "exp": ops.exp,
            "log": lambda t: ops.log(ops.add(ops.mul(t, t), positive)),
            "sigmoid": ops.sigmoid,
            "softmax": lambda t: ops.softmax(t, axis=-1),
            "bce_with_logits": lambda t: ops.binary_cross_entropy_with_logits(t, (positive - 0.5) / 1.5),
            "mean": lambda t: ops.mean(t, axis=1),
            "reshape": lambda t: ops.reshape(t, (-1,)),
            "transpose": lambda t: ops.transpose(t, (0, 2, 3, 1)),
        }
        return _weighted_sum(rng, fns[name]), x

    return build


def _concat_split(rng, shape):
    other = rng.standard_normal(shape)

    def fn(t):
        joined = ops.concat([t, other], axis=1)
        first, second = ops.split(joined, [shape[1] + 1, shape[1] - 1], axis=1)
        return ops.concat([ops.mul(first, 2.0), second], axis=1)

    return _weighted_sum(rng, fn), Tensor(rng.standard_normal(shape))


def _matmul(rng, shape):
    N, C, H, W = shape
    right = rng.standard_normal((N, W, H))
    fn = lambda t: ops.matmul(ops.reshape(t, (N, C * H, W)), right)
    return _weighted_sum(rng, fn), Tensor(rng.standard_normal(shape))


def _conv(rng, shape):
    N, C, H, W = shape
    weight = rng.standard_normal((3, C, 3, 3))
    bias = rng.standard_normal(3)
    fn = lambda t: ops.conv2d(t, weight, bias, stride=1, padding=2, dilation=2)
    return _weighted_sum(rng, fn), Tensor(rng.standard_normal(shape))


def _conv_weight(rng, shape):
    N, C, H, W = shape
    x = rng.standard_normal(shape)
    fn = lambda w: ops.conv2d(x, w, None, stride=2, padding=1)
    return _weighted_sum(rng, fn), Tensor(rng.standard_normal((2, C, 3, 3)))


def _upsample(rng, shape):
    return _weighted_sum(rng, lambda t: ops.upsample_nearest(t, 2)), Tensor(rng.standard_normal(shape))


def _avgpool(rng, shape):
    N, C, H, W = shape
    return _weighted_sum(rng, lambda t: ops.avgpool_down(t, 2)), Tensor(rng.standard_normal((N, C, 2 * H, 2 * W)))


def _argmax(rng, shape):
    return _weighted_sum(rng, lambda t: ops.spatial_argmax(t)[0]), Tensor(rng.standard_normal(shape))


def _gather(rng, shape):
    N, C, H, W = shape
    ys = rng.integers(0, H, (N, 3))
    xs = rng.integers(0, W, (N, 3))
    return _weighted_sum(rng, lambda t: ops.gather_points(t, ys, xs)), Tensor(rng.standard_normal(shape))


def _attention(rng, shape):
    _, C, H, W = shape
    keys = rng.standard_normal((H + 1, C))
    return _weighted_sum(rng, lambda q: tcc_service.attention_weights(q, keys)), Tensor(rng.standard_normal(C))


def _decode(rng, shape):
    N, C, H, W = shape
    n = 3
    local = Tensor(rng.standard_normal(shape))
    global_feats = Tensor(rng.standard_normal((N, n, C)))
    w_a = rng.standard_normal((C, C)) / np.sqrt(C)
    ctx = CondensedContext(
        local_rep=local,
        key_ys=np.zeros((N, n), dtype=np.int64),
        key_xs=np.zeros((N, n), dtype=np.int64),
        key_scores=Tensor(np.zeros((N, n))),
        global_feats=global_feats,
    )
    return _weighted_sum(rng, lambda t: tcc_service.decode(t, ctx, w_a)[0]), Tensor(rng.standard_normal(shape))


def random_block(rng: np.random.Generator, width: int, level: int, cfg: TccConfig) -> tcc_service.TccBlock:
    """TCC block with a random (non-zero) restoration projection."""
    block = tcc_service.TccBlock(width, level, cfg, rng)
    block.restore.weight.assign(rng.standard_normal(block.restore.weight.shape) * 0.5)
    return block


def _tcc_refine(mode: TccMode = "full") -> CaseBuilder:
    def build(rng, shape):
        N, C, H, W = shape
        cfg = TccConfig(n_keys=2, base_channels=max(1, C // 2), stack_depth=2, mode=mode)
        block = random_block(rng, C, 0, cfg)
        return _weighted_sum(rng, lambda t: tcc_service.tcc_refine(t, 0, cfg, block)), Tensor(rng.standard_normal(shape))

    return build


CASES: Dict[str, CaseBuilder] = {
    **{name: _elementwise(name) for name in (
        "add", "sub", "mul", "div", "neg", "relu", "exp", "log", "sigmoid", "softmax",
        "bce_with_logits", "mean", "reshape", "transpose",
    )},
    "concat_split": _concat_split,
    "matmul": _matmul,
    "conv2d_dilated": _conv,
    "conv2d_weight": _conv_weight,
    "upsample_nearest": _upsample,
    "avgpool_down": _avgpool,
    "spatial_argmax": _argmax,
    "gather_points": _gather,
    "attention_weights": _attention,
    "decode": _decode,
    "tcc_refine": _tcc_refine(),
    "tcc_refine_local_only": _tcc_refine("local_only"),
    "tcc_refine_no_transformer": _tcc_refine("no_transformer"),
}


def run_gradcheck(
    seed: int = 0,
    sizes: Sequence[Tuple[int, int, int, int]] = DEFAULT_SIZES,
    names: Optional[Sequence[str]] = None,
    tolerance: Optional[float] = None
) -> List[GradcheckRow]:
    tolerance = settings.GRADCHECK_TOLERANCE if tolerance is None else tolerance
    rows = []
    for name in names or list(CASES):
        for index, shape in enumerate(sizes):
            rng = np.random.default_rng([seed, index, sum(map(ord, name))])
            fn, x = CASES[name](rng, tuple(shape))
            error = finite_diff_check(fn, x)
            rows.append(GradcheckRow(name, x.shape, error, tolerance))
            if error >= tolerance:
                logger.warning(f"gradcheck {name} at {x.shape}: max relative error {error:.3e}")
    return rows
