from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, computed_field

from app.models.config import TccMode


class LayerSpec(BaseModel):
    """One entry of a declarative model description."""

    name: str
    kind: str
    level: int = 0
    height: int = Field(ge=0)
    width: int = Field(ge=0)
    in_channels: int = Field(0, ge=0)
    out_channels: int = Field(0, ge=0)
    kernel: int = Field(1, ge=0)
    bias: bool = True
    reduced_channels: int = Field(0, ge=0)
    n_keys: int = Field(0, ge=0)
    stack_depth: int = Field(0, ge=0)
    mode: TccMode = "full"


class LayerCost(BaseModel):
    name: str
    level: int = 0
    flops: int = Field(ge=0)
    params: int = Field(ge=0)
    output_shape: Tuple[int, ...]


class FlopsReport(BaseModel):
    label: str = ""
    layers: List[LayerCost] = []

    @computed_field
    @property
    def total_flops(self) -> int:
        return sum(layer.flops for layer in self.layers)

    @computed_field
    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.layers)

    def by_level(self) -> Dict[int, int]:
        groups: Dict[int, int] = {}
        for layer in self.layers:
            groups[layer.level] = groups.get(layer.level, 0) + layer.flops
        return dict(sorted(groups.items()))

    def __add__(self, other: "FlopsReport") -> "FlopsReport":
        return FlopsReport(label=self.label or other.label, layers=self.layers + other.layers)


class LevelDelta(BaseModel):
    level: int
    base_flops: int
    variant_flops: int
    delta_flops: int
    relative: Optional[float]


class ReportDelta(BaseModel):
    base: str
    variant: str
    base_flops: int
    variant_flops: int
    delta_flops: int
    delta_params: int
    relative: Optional[float]
    levels: List[LevelDelta]


class RefinementComparison(BaseModel):
    """Refinement-path deltas of the conv3x3 and TCC variants against no refinement."""

    image_height: int
    image_width: int
    pyramid_width: int
    conv_delta: ReportDelta
    tcc_delta: ReportDelta
    delta_ratio: float
    ablation_deltas: List[ReportDelta] = []


class KeyCountRow(BaseModel):
    n_keys: int
    flops: int
    params: int
    extra_flops: int
    extra_params: int


Variant = Literal["none", "conv3x3", "tcc"]
