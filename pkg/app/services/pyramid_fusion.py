import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core import ops
from app.core.exceptions import ShapeError
from app.core.module import Conv2d, Module, component_rng
from app.core.tensor import Tensor
from app.models.config import BackboneSpec, FusionSpec, Placement, TccConfig
from app.models.pyramid import PyramidLevel
from app.services.backbone import Backbone
from app.services.tcc import TccBlock, TccRound, build_block

logger = logging.getLogger(__name__)

REFINE_STREAM = 2
BEFORE_FUSION = "before_fusion"
AFTER_FUSION = "after_fusion"


def resample_to_level(source: PyramidLevel, target_level: int) -> Tensor:
    """Nearest upsampling from deeper levels, average pooling from shallower ones."""
    if target_level < 0:
        raise ShapeError(f"resample_to_level: negative target level {target_level}")
    gap = source.level - target_level
    if gap > 0:
        return ops.upsample_nearest(source.features, 2 ** gap)
    if gap < 0:
        return ops.avgpool_down(source.features, 2 ** -gap)
    return source.features


def fuse_level(target: PyramidLevel, neighbors: Sequence[PyramidLevel]) -> Tensor:
    """``f_i + sum_j resample(f_j)``; parameter free."""
    fused = target.features
    for neighbor in neighbors:
        resampled = resample_to_level(neighbor, target.level)
        if resampled.shape != fused.shape:
            raise ShapeError(
                f"fuse_level: level {neighbor.level} resampled to {resampled.shape}, "
                f"level {target.level} is {fused.shape}"
            )
        fused = ops.add(fused, resampled)
    return fused


def refine_conv3x3(fused: Tensor, conv: Conv2d) -> Tensor:
    if conv.weight.shape[2:] != (3, 3) or conv.padding != 1 or conv.stride != 1:
        raise ShapeError(f"refine_conv3x3 needs a pad-1 stride-1 3×3 conv, got {conv.weight.shape}")
    if fused.ndim != 4 or fused.shape[1] != conv.weight.shape[1]:
        raise ShapeError(f"refine_conv3x3: input {fused.shape} does not match kernel {conv.weight.shape}")
    return conv(fused)


class ConvRefiner(Module):
    """Baseline refinement: one 3×3 conv per level."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.conv = Conv2d(width, width, 3, rng, padding=1)

    def __call__(self, fused: Tensor) -> Tensor:
        return refine_conv3x3(fused, self.conv)


def resolve_placement(fusion: FusionSpec, tcc: Optional[TccConfig]) -> Placement:
    if fusion.tcc_placement is not None:
        return fusion.tcc_placement
    return tcc.placement if tcc is not None else Placement()


class FeaturePyramid(Module):
    """Top-down fusion over backbone levels with per-level refinement modules.

    Refinement modules are owned per level; TCC blocks additionally per
    placement, so a level refined before and after fusion holds two blocks.
    """

    def __init__(
        self,
        width: int,
        num_levels: int,
        fusion: FusionSpec,
        tcc: Optional[TccConfig] = None,
        seed: int = 0
    ):
        if fusion.refinement == "tcc" and tcc is None:
            tcc = TccConfig()
        self._fusion = fusion
        self._tcc = tcc
        self._neighbors = fusion.neighbor_map(num_levels)
        self._placement = resolve_placement(fusion, tcc)
        self._num_levels = num_levels

        self.conv_refiners: Dict[int, ConvRefiner] = {}
        self.tcc_before: Dict[int, TccBlock] = {}
        self.tcc_after: Dict[int, TccBlock] = {}
        if fusion.refinement == "conv3x3":
            for i in range(num_levels):
                self.conv_refiners[i] = ConvRefiner(width, component_rng(seed, REFINE_STREAM, i))
        elif fusion.refinement == "tcc":
            for i in range(num_levels):
                if self._placement.before_fusion:
                    self.tcc_before[i] = build_block(width, i, tcc, seed, slot=0)
                if self._placement.after_fusion:
                    self.tcc_after[i] = build_block(width, i, tcc, seed, slot=1)

    @property
    def refinement(self) -> str:
        return self._fusion.refinement

    @property
    def placement(self) -> Placement:
        return self._placement

    @property
    def tcc_config(self) -> Optional[TccConfig]:
        return self._tcc

    @property
    def has_tcc(self) -> bool:
        return bool(self.tcc_before or self.tcc_after)

    def __call__(self, levels: List[PyramidLevel], recorder: Optional[List[TccRound]] = None) -> List[PyramidLevel]:
        if len(levels) != self._num_levels:
            raise ShapeError(f"pyramid built for {self._num_levels} levels, got {len(levels)}")
        widths = {level.channels for level in levels}
        if len(widths) != 1:
            raise ShapeError(f"pyramid levels disagree on channel width: {sorted(widths)}")

        pre: Dict[int, PyramidLevel] = {}
        for level in levels:
            features = level.features
            if level.level in self.tcc_before:
                features = self.tcc_before[level.level](features, recorder=recorder, placement=BEFORE_FUSION)
            pre[level.level] = PyramidLevel(level.level, level.stride, features)

        fused: Dict[int, PyramidLevel] = {}
        for i in reversed(range(self._num_levels)):
            sources = [fused.get(j, pre[j]) for j in self._neighbors[i]]
            fused[i] = PyramidLevel(i, pre[i].stride, fuse_level(pre[i], sources))

        outputs = []
        for i in range(self._num_levels):
            features = fused[i].features
            if i in self.conv_refiners:
                features = self.conv_refiners[i](features)
            elif i in self.tcc_after:
                features = self.tcc_after[i](features, recorder=recorder, placement=AFTER_FUSION)
            outputs.append(PyramidLevel(i, fused[i].stride, features))
        return outputs


def pyramid_forward(
    image: Tensor,
    backbone: BackboneSpec,
    fusion: FusionSpec,
    tcc: Optional[TccConfig] = None,
    seed: Optional[int] = None
) -> List[PyramidLevel]:
    """Backbone, top-down fusion and the selected refinement, freshly initialised from ``seed``."""
    seed = backbone.seed if seed is None else seed
    pyramid = FeaturePyramid(backbone.width, backbone.num_levels, fusion, tcc, seed=seed)
    return pyramid(Backbone(backbone)(image))
