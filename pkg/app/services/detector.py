import logging
from typing import List, Optional, Tuple

import numpy as np

from app.core import ops
from app.core.module import Conv2d, Module, component_rng
from app.core.tensor import Tensor
from app.models.config import RunConfig
from app.models.pyramid import PyramidLevel
from app.services.backbone import Backbone
from app.services.pyramid_fusion import FeaturePyramid
from app.services.tcc import TccRound

logger = logging.getLogger(__name__)

HEAD_STREAM = 3


class DetectionHead(Module):
    """Center-heatmap head shared by every level: 3×3 conv, relu, 1×1 conv."""

    def __init__(self, width: int, hidden: int, rng: Optional[np.random.Generator] = None, zero_init: bool = False):
        self.hidden = Conv2d(width, hidden, 3, rng, padding=1, zero_init=zero_init)
        self.score = Conv2d(hidden, 1, 1, rng, zero_init=zero_init)

    def logits(self, levels: List[PyramidLevel]) -> List[Tensor]:
        return [self.score(ops.relu(self.hidden(level.features))) for level in levels]

    def __call__(self, levels: List[PyramidLevel]) -> List[Tensor]:
        return [ops.sigmoid(logit) for logit in self.logits(levels)]


def detection_head(levels: List[PyramidLevel], head: DetectionHead) -> List[Tensor]:
    """Per-level N×1×H_i×W_i score maps in (0, 1)."""
    return head(levels)


class DetectorModel(Module):
    """Backbone, fused and refined pyramid, and the shared head of one run config."""

    def __init__(self, config: RunConfig, zero_head: bool = False):
        self._config = config
        self.backbone = Backbone(config.backbone)
        tcc = config.tcc if config.fusion.refinement == "tcc" else None
        self.pyramid = FeaturePyramid(
            config.backbone.width, config.backbone.num_levels, config.fusion, tcc, seed=config.seed
        )
        self.head = DetectionHead(
            config.backbone.width,
            config.train.head_channels,
            component_rng(config.seed, HEAD_STREAM),
            zero_init=zero_head,
        )
        logger.debug(
            f"Built detector: refinement={config.fusion.refinement}, "
            f"{self.num_parameters()} parameters"
        )

    @property
    def config(self) -> RunConfig:
        return self._config

    @property
    def has_tcc(self) -> bool:
        return self.pyramid.has_tcc

    @property
    def strides(self) -> Tuple[int, ...]:
        return tuple(4 * 2 ** i for i in range(self._config.backbone.num_levels))

    def features(self, images: Tensor, recorder: Optional[List[TccRound]] = None) -> List[PyramidLevel]:
        return self.pyramid(self.backbone(images), recorder=recorder)

    def forward_logits(self, images: Tensor, recorder: Optional[List[TccRound]] = None) -> List[Tensor]:
        return self.head.logits(self.features(images, recorder=recorder))

    def __call__(self, images: Tensor, recorder: Optional[List[TccRound]] = None) -> List[Tensor]:
        return [ops.sigmoid(logit) for logit in self.forward_logits(images, recorder=recorder)]

    def score_maps(self, images: Tensor) -> List[np.ndarray]:
        return [scores.numpy() for scores in self(images)]
