"""Transformer-based context condensation for refining fused pyramid levels.

A block reduces the channels of its input to ``Cr(i) = 8 * 2**i``, runs
``stack_depth`` condense/decode rounds in the reduced space, restores the
channels with a zero-initialised projection and adds the input back, so a
freshly built block is exactly the identity.

Per query position the decoder attends over ``n_keys + 1`` condensed
contexts: the dilated-conv local token at that position followed by the
``n_keys`` gated global tokens, in that order. Keys double as values.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from app.core import ops
from app.core.exceptions import ConfigError, ShapeError
from app.core.module import Conv2d, Module, Parameter, component_rng
from app.core.tensor import Tensor
from app.models.config import TccConfig, TccMode
from app.models.pyramid import CondensedContext

logger = logging.getLogger(__name__)

TCC_STREAM = 4


@dataclass
class TccRound:
    """Everything one condense/decode round saw, for tracing."""

    level: int
    placement: str
    stack: int
    context: CondensedContext
    attention: Tensor  # N×(H·W)×(n+1)


def scaled_orthogonal(rng: np.random.Generator, size: int, gain: float = 0.5) -> np.ndarray:
    """Random orthogonal matrix times ``gain`` (sign-corrected QR of a Gaussian draw)."""
    q, r = np.linalg.qr(rng.standard_normal((size, size)))
    return gain * q * np.where(np.diag(r) < 0, -1.0, 1.0)


class TccStack(Module):
    """Parameters of one condense/decode round; stacks never share weights.

    ``W_A`` starts as half an orthogonal matrix: a fresh round outputs vectors no
    longer than the larger of the query and its attended context.
    """

    def __init__(self, reduced: int, n_keys: int, dilation: int, rng: np.random.Generator, mode: TccMode = "full"):
        self.local_context = Conv2d(reduced, reduced, 3, rng, padding=dilation, dilation=dilation)
        self.importance = Conv2d(reduced, n_keys, 1, rng) if mode != "local_only" else None
        self.w_a = Parameter(scaled_orthogonal(rng, reduced))
        self._n_keys = n_keys

    @property
    def n_keys(self) -> int:
        return self._n_keys


class TccBlock(Module):
    def __init__(self, width: int, level: int, cfg: TccConfig, rng: np.random.Generator):
        reduced = cfg.reduced_channels(level)
        if reduced > width:
            raise ShapeError(f"tcc: reduced channels {reduced} at level {level} exceed width {width}")
        self.reduce = Conv2d(width, reduced, 1, rng)
        self.stacks = [
            TccStack(reduced, cfg.n_keys, cfg.dilation, rng, cfg.mode) for _ in range(cfg.stack_depth)
        ]
        self.restore = Conv2d(reduced, width, 1, bias=False, zero_init=True)
        self._level = level
        self._cfg = cfg

    @property
    def level(self) -> int:
        return self._level

    @property
    def mode(self) -> TccMode:
        return self._cfg.mode

    @property
    def reduced_channels(self) -> int:
        return self.reduce.weight.shape[0]

    def __call__(self, features: Tensor, recorder: Optional[List[TccRound]] = None, placement: str = "") -> Tensor:
        return tcc_refine(features, self._level, self._cfg, self, recorder=recorder, placement=placement)


def build_block(width: int, level: int, cfg: TccConfig, seed: int, slot: int = 0) -> TccBlock:
    return TccBlock(width, level, cfg, component_rng(seed, TCC_STREAM, level, slot))


def channel_reduce(features: Tensor, conv: Conv2d) -> Tensor:
    reduced, channels = conv.weight.shape[0], features.shape[1]
    if reduced > channels:
        raise ShapeError(f"channel_reduce: Cr={reduced} exceeds input channels {channels}")
    return conv(features)


def local_context(reduced: Tensor, conv: Conv2d) -> Tensor:
    """Locally concentrated representation (3×3 dilated conv, shape preserving)."""
    return conv(reduced)


def importance_scores(reduced: Tensor, conv: Conv2d, n: int) -> List[Tensor]:
    return ops.split_channels(conv(reduced), n)


def select_key_locations(score_maps: List[Tensor]) -> Tuple[np.ndarray, np.ndarray, Tensor]:
    """Global max of each N×1×H×W score map: rows, columns and scores, each N×n."""
    if not score_maps:
        raise ShapeError("select_key_locations needs at least one score map")
    values, rows, columns = [], [], []
    for score_map in score_maps:
        value, ys, xs = ops.spatial_argmax(score_map)
        values.append(value)
        rows.append(ys)
        columns.append(xs)
    return np.concatenate(rows, axis=1), np.concatenate(columns, axis=1), ops.concat(values, axis=1)


def gather_gated(reduced: Tensor, ys: np.ndarray, xs: np.ndarray, scores: Tensor) -> Tensor:
    """Features at the key locations scaled by sigmoid of their scores (N×n×Cr)."""
    features = ops.gather_points(reduced, ys, xs)
    N, n = scores.shape
    gate = ops.reshape(ops.sigmoid(scores), (N, n, 1))
    return ops.mul(features, gate)


def collect_condensed(reduced: Tensor, stack: TccStack) -> CondensedContext:
    local = local_context(reduced, stack.local_context)
    maps = importance_scores(reduced, stack.importance, stack.n_keys)
    ys, xs, scores = select_key_locations(maps)
    return CondensedContext(
        local_rep=local,
        key_ys=ys,
        key_xs=xs,
        key_scores=scores,
        global_feats=gather_gated(reduced, ys, xs, scores),
    )


def attention_weights(query: Tensor, keys: Tensor) -> Tensor:
    """Single-head scaled dot-product weights of one query over ``m`` keys."""
    if query.ndim != 1 or keys.ndim != 2 or keys.shape[1] != query.shape[0]:
        raise ShapeError(f"attention_weights: query {query.shape} vs keys {keys.shape}")
    if keys.shape[0] < 1:
        raise ShapeError("attention_weights needs at least one key")
    dim = query.shape[0]
    if dim == 0:
        raise ConfigError("attention_weights: query dimension is 0", location="tcc.base_channels")
    scores = ops.matmul(keys, ops.reshape(query, (dim, 1)))
    return ops.reshape(ops.softmax(ops.mul(ops.reshape(scores, (1, -1)), 1.0 / math.sqrt(dim))), (-1,))


def _tokens(feature_map: Tensor) -> Tensor:
    N, C, H, W = feature_map.shape
    return ops.transpose(ops.reshape(feature_map, (N, C, H * W)), (0, 2, 1))


def _project(query: Tensor, context: Tensor, w_a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """``W_A (q + context)`` per token, back to an N×Cr×H×W map."""
    N, Cr, H, W = shape
    out = ops.matmul(ops.add(query, context), ops.transpose(w_a))
    return ops.reshape(ops.transpose(out, (0, 2, 1)), (N, Cr, H, W))


def _check_context(reduced: Tensor, ctx: CondensedContext) -> None:
    N, Cr = reduced.shape[:2]
    if Cr == 0:
        raise ConfigError("decode: reduced channel count is 0", location="tcc.base_channels")
    if ctx.local_rep.shape != reduced.shape:
        raise ShapeError(f"decode: local context {ctx.local_rep.shape} does not match query map {reduced.shape}")
    n = ctx.global_feats.shape[1]
    if ctx.global_feats.shape != (N, n, Cr):
        raise ShapeError(f"decode: global features {ctx.global_feats.shape}, expected ({N}, n, {Cr})")


def decode(reduced: Tensor, ctx: CondensedContext, w_a: Tensor) -> Tuple[Tensor, Tensor]:
    """Decoder-only cross-attention: ``W_A (q + sum_j A_j v_j)`` at every position.

    Returns the refined N×Cr×H×W map and the N×(H·W)×(n+1) attention weights.
    """
    _check_context(reduced, ctx)
    N, Cr, H, W = reduced.shape
    n = ctx.global_feats.shape[1]
    P = H * W

    query = _tokens(reduced)
    local = _tokens(ctx.local_rep)
    global_feats = ctx.global_feats

    local_scores = ops.reshape(
        ops.matmul(ops.reshape(query, (N, P, 1, Cr)), ops.reshape(local, (N, P, Cr, 1))),
        (N, P, 1),
    )
    global_scores = ops.matmul(query, ops.transpose(global_feats, (0, 2, 1)))
    scores = ops.mul(ops.concat([local_scores, global_scores], axis=2), 1.0 / math.sqrt(Cr))
    attention = ops.softmax(scores, axis=-1)

    local_weight, global_weight = ops.split(attention, [1, n], axis=2)
    context = ops.add(ops.mul(local_weight, local), ops.matmul(global_weight, global_feats))
    return _project(query, context, w_a, reduced.shape), attention


def decode_uniform(reduced: Tensor, ctx: CondensedContext, w_a: Tensor) -> Tuple[Tensor, Tensor]:
    """Condensed contexts without attention: every one of the ``n + 1`` keys weighs ``1/(n+1)``."""
    _check_context(reduced, ctx)
    N, Cr, H, W = reduced.shape
    n = ctx.global_feats.shape[1]
    global_sum = ops.sum(ctx.global_feats, axis=1, keepdims=True)
    context = ops.mul(ops.add(_tokens(ctx.local_rep), global_sum), 1.0 / (n + 1))
    weights = Tensor(np.full((N, H * W, n + 1), 1.0 / (n + 1)))
    return _project(_tokens(reduced), context, w_a, reduced.shape), weights


def decode_local(reduced: Tensor, local_rep: Tensor, w_a: Tensor) -> Tensor:
    """Local contexts only: ``W_A (q + local)`` at every position."""
    if reduced.shape[1] == 0:
        raise ConfigError("decode: reduced channel count is 0", location="tcc.base_channels")
    if local_rep.shape != reduced.shape:
        raise ShapeError(f"decode: local context {local_rep.shape} does not match query map {reduced.shape}")
    return _project(_tokens(reduced), _tokens(local_rep), w_a, reduced.shape)


def tcc_refine(
    features: Tensor,
    level: int,
    cfg: TccConfig,
    block: TccBlock,
    recorder: Optional[List[TccRound]] = None,
    placement: str = ""
) -> Tensor:
    """Reduce, run ``cfg.stack_depth`` condense/decode rounds, restore, add residual.

    ``local_only`` rounds have no condensed keys and are not recorded.
    """
    if features.ndim != 4:
        raise ShapeError(f"tcc_refine expects N×C×H×W, got {features.shape}")
    if len(block.stacks) != cfg.stack_depth:
        raise ShapeError(f"tcc_refine: block has {len(block.stacks)} stacks, config asks for {cfg.stack_depth}")
    if block.mode != cfg.mode:
        raise ConfigError(f"block was built for mode '{block.mode}', config asks for '{cfg.mode}'", location="tcc.mode")
    x = channel_reduce(features, block.reduce)
    for index, stack in enumerate(block.stacks):
        if cfg.mode == "local_only":
            x = decode_local(x, local_context(x, stack.local_context), stack.w_a)
            continue
        ctx = collect_condensed(x, stack)
        if cfg.mode == "no_transformer":
            x, attention = decode_uniform(x, ctx, stack.w_a)
        else:
            x, attention = decode(x, ctx, stack.w_a)
        if recorder is not None:
            recorder.append(TccRound(level, placement, index, ctx, attention))
    return ops.add(features, block.restore(x))
