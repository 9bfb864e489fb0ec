from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.config import settings


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Placement(StrictModel):
    before_fusion: bool = True
    after_fusion: bool = True

    @property
    def any(self) -> bool:
        return self.before_fusion or self.after_fusion


TccMode = Literal["full", "local_only", "no_transformer"]


class TccConfig(StrictModel):
    """TCC hyper-parameters; defaults are the reference setting.

    ``mode`` selects the ablations: ``local_only`` refines with the dilated-conv
    local context alone, ``no_transformer`` averages the condensed contexts
    uniformly instead of attending over them.
    """

    n_keys: int = Field(4, ge=1)
    dilation: int = Field(2, ge=1)
    base_channels: int = Field(8, ge=1, description="Cr(i) = base_channels * 2**i")
    stack_depth: int = Field(2, ge=1)
    placement: Placement = Placement()
    mode: TccMode = "full"
    key_score_kernel: Literal[1] = 1

    def reduced_channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


class BackboneSpec(StrictModel):
    in_channels: int = Field(3, ge=1)
    stem_channels: int = Field(16, ge=1)
    stage_channels: Tuple[int, ...] = (16, 32, 64, 64)
    width: int = Field(64, ge=1, description="pyramid channel count C")
    seed: int = 0

    @property
    def num_levels(self) -> int:
        return len(self.stage_channels)

    @field_validator("stage_channels")
    @classmethod
    def check_stages(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if not value or any(c < 1 for c in value):
            raise ValueError("stage_channels must be a non-empty list of positive ints")
        return value


Refinement = Literal["none", "conv3x3", "tcc"]


class FusionSpec(StrictModel):
    refinement: Refinement = "tcc"
    neighbors: Optional[Dict[int, List[int]]] = Field(
        None, description="level -> source levels; None means the FPN top-down default"
    )
    tcc_placement: Optional[Placement] = Field(
        None, description="None inherits TccConfig.placement"
    )

    def neighbor_map(self, num_levels: int) -> Dict[int, List[int]]:
        if self.neighbors is None:
            return {i: ([i + 1] if i < num_levels - 1 else []) for i in range(num_levels)}
        return {i: list(self.neighbors.get(i, [])) for i in range(num_levels)}


class TrainConfig(StrictModel):
    steps: int = Field(1000, ge=0)
    batch_size: int = Field(4, ge=1)
    learning_rate: float = Field(0.05, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    grad_clip_norm: float = Field(1.0, ge=0.0, description="global gradient-norm bound; 0 disables clipping")
    seed: int = 0
    eval_interval: int = Field(100, ge=1)
    num_scenes: int = Field(32, ge=1)
    head_channels: int = Field(32, ge=1)
    score_threshold: float = Field(0.5, ge=0.0, le=1.0)
    radius_cells: int = Field(1, ge=0)


class SizeBand(StrictModel):
    min_px: float = Field(gt=0)
    max_px: float = Field(gt=0)
    level: int = Field(ge=0)
    weight: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def check_range(self) -> "SizeBand":
        if self.min_px >= self.max_px:
            raise ValueError(f"band min_px {self.min_px} must be below max_px {self.max_px}")
        return self

    def contains(self, size: float) -> bool:
        return self.min_px <= size < self.max_px


DEFAULT_BANDS = (
    SizeBand(min_px=6, max_px=12, level=0),
    SizeBand(min_px=12, max_px=18, level=1),
    SizeBand(min_px=18, max_px=30, level=2),
    SizeBand(min_px=30, max_px=46, level=3),
)

DEFAULT_PALETTE = (
    (0.9, 0.2, 0.2),
    (0.2, 0.8, 0.3),
    (0.25, 0.35, 0.95),
)


class SceneSpec(StrictModel):
    image_size: int = Field(64, ge=32)
    min_objects: int = Field(1, ge=0)
    max_objects: int = Field(3, ge=0)
    bands: Tuple[SizeBand, ...] = DEFAULT_BANDS
    palette: Tuple[Tuple[float, float, float], ...] = DEFAULT_PALETTE
    noise_scale: float = Field(0.1, ge=0.0)
    edge_softness: float = Field(1.5, gt=0.0)

    @model_validator(mode="after")
    def check_bands(self) -> "SceneSpec":
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must not exceed max_objects")
        if self.image_size % 32:
            raise ValueError(f"image_size {self.image_size} must be divisible by 32")
        ordered = sorted(self.bands, key=lambda b: b.min_px)
        for lower, upper in zip(ordered, ordered[1:]):
            if upper.min_px < lower.max_px:
                raise ValueError(
                    f"size bands [{lower.min_px},{lower.max_px}) and [{upper.min_px},{upper.max_px}) overlap"
                )
        if not self.palette:
            raise ValueError("palette must contain at least one class color")
        return self

    def band_for(self, size: float) -> Optional[SizeBand]:
        for band in self.bands:
            if band.contains(size):
                return band
        return None


class FlopsConfig(StrictModel):
    """Shapes the analytical FLOPs comparison is evaluated at (reference scale by default)."""

    image_height: int = Field(settings.REFERENCE_IMAGE_HEIGHT, ge=32)
    image_width: int = Field(settings.REFERENCE_IMAGE_WIDTH, ge=32)
    pyramid_width: int = Field(settings.REFERENCE_PYRAMID_WIDTH, ge=1)
    num_levels: int = Field(4, ge=1)
    key_counts: Tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)

    @model_validator(mode="after")
    def check_extents(self) -> "FlopsConfig":
        factor = 4 * 2 ** (self.num_levels - 1)
        if self.image_height % factor or self.image_width % factor:
            raise ValueError(f"image extents must be divisible by the deepest stride {factor}")
        if not self.key_counts or any(n < 1 for n in self.key_counts):
            raise ValueError("key_counts must be a non-empty list of positive ints")
        return self


class RunConfig(StrictModel):
    seed: int = 0
    output_dir: str = "runs"
    backbone: BackboneSpec = BackboneSpec()
    fusion: FusionSpec = FusionSpec()
    tcc: TccConfig = TccConfig()
    train: TrainConfig = TrainConfig()
    scenes: SceneSpec = SceneSpec()
    flops: FlopsConfig = FlopsConfig()

    @model_validator(mode="after")
    def check_consistency(self) -> "RunConfig":
        levels = self.backbone.num_levels
        for i, sources in self.fusion.neighbor_map(levels).items():
            for j in sources:
                if not 0 <= j < levels or j == i:
                    raise ValueError(f"fusion.neighbors: level {i} cannot fuse from level {j}")
        if self.fusion.refinement == "tcc":
            for i in range(levels):
                if self.tcc.reduced_channels(i) > self.backbone.width:
                    raise ValueError(
                        f"tcc: reduced channels {self.tcc.reduced_channels(i)} at level {i} "
                        f"exceed pyramid width {self.backbone.width}"
                    )
        for band in self.scenes.bands:
            if band.level >= levels:
                raise ValueError(f"scenes.bands: level {band.level} does not exist in a {levels}-level pyramid")
        return self

    @property
    def placement(self) -> Placement:
        return self.fusion.tcc_placement or self.tcc.placement
