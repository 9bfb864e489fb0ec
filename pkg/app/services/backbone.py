import logging
from typing import List

from app.core import ops
from app.core.exceptions import ShapeError
from app.core.module import Conv2d, Module, component_rng
from app.core.tensor import Tensor
from app.models.config import BackboneSpec
from app.models.pyramid import PyramidLevel

logger = logging.getLogger(__name__)

BACKBONE_STREAM = 1


class Backbone(Module):
    """Toy stride-2 conv stack emitting equal-width features at strides 4·2^i."""

    def __init__(self, spec: BackboneSpec):
        rng = component_rng(spec.seed, BACKBONE_STREAM)
        self.stem = Conv2d(spec.in_channels, spec.stem_channels, 3, rng, stride=2, padding=1)
        self.stages = []
        previous = spec.stem_channels
        for channels in spec.stage_channels:
            self.stages.append(Conv2d(previous, channels, 3, rng, stride=2, padding=1))
            previous = channels
        self.laterals = [Conv2d(c, spec.width, 1, rng) for c in spec.stage_channels]
        self._spec = spec

    @property
    def spec(self) -> BackboneSpec:
        return self._spec

    def __call__(self, image: Tensor) -> List[PyramidLevel]:
        if image.ndim != 4 or image.shape[1] != self._spec.in_channels:
            raise ShapeError(f"backbone expects N×{self._spec.in_channels}×H×W, got {image.shape}")
        H, W = image.shape[2:]
        if H % 32 or W % 32:
            raise ShapeError(f"backbone input extents {H}x{W} must be divisible by 32")

        x = ops.relu(self.stem(image))
        levels = []
        for i, (stage, lateral) in enumerate(zip(self.stages, self.laterals)):
            x = ops.relu(stage(x))
            levels.append(PyramidLevel(level=i, stride=4 * 2 ** i, features=lateral(x)))
        return levels


def backbone_forward(image: Tensor, spec: BackboneSpec) -> List[PyramidLevel]:
    """Build the backbone described by ``spec`` and run it on ``image``."""
    return Backbone(spec)(image)
