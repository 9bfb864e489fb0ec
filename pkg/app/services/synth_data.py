"""Synthetic multi-scale blob scenes and their per-level center heatmaps."""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from app.core.exceptions import ConfigError
from app.core.tensor import Tensor
from app.models.config import SceneSpec

logger = logging.getLogger(__name__)

DEFAULT_STRIDES = (4, 8, 16, 32)
BENCHMARK_SIZE = 32


@dataclass(frozen=True)
class SceneObject:
    cx: float
    cy: float
    size_px: float
    class_id: int


@dataclass
class SynthScene:
    image: Tensor  # 1×3×H×W
    objects: List[SceneObject]
    seed: int

    @property
    def image_size(self) -> int:
        return self.image.shape[-1]


@dataclass(frozen=True)
class ObjectAssignment:
    """Where an object's heatmap peak sits: pyramid level and cell."""

    level: int
    stride: int
    row: int
    col: int


@dataclass
class HeatmapTarget:
    level: int
    stride: int
    heatmap: np.ndarray  # 1×1×H_i×W_i, values in [0, 1]
    peaks: List[Tuple[int, int]] = field(default_factory=list)


def gen_scene(seed: int, spec: SceneSpec) -> SynthScene:
    """Soft-edged colored disks over a noisy background, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    size = spec.image_size
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    weights = np.array([band.weight for band in spec.bands], dtype=np.float64)
    weights /= weights.sum()

    objects = []
    for _ in range(count):
        band = spec.bands[int(rng.choice(len(spec.bands), p=weights))]
        diameter = float(rng.uniform(band.min_px, band.max_px))
        radius = min(diameter / 2.0, size / 2.0)
        cx = float(rng.uniform(radius, size - radius))
        cy = float(rng.uniform(radius, size - radius))
        objects.append(SceneObject(cx, cy, diameter, int(rng.integers(len(spec.palette)))))

    # low-frequency texture plus per-pixel noise
    coarse = rng.normal(0.0, spec.noise_scale, (3, size // 8, size // 8))
    image = 0.5 + np.repeat(np.repeat(coarse, 8, axis=1), 8, axis=2)
    image += rng.normal(0.0, spec.noise_scale, (3, size, size))

    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    for obj in objects:
        distance = np.hypot(xs - obj.cx, ys - obj.cy)
        alpha = np.clip((obj.size_px / 2.0 - distance) / spec.edge_softness + 0.5, 0.0, 1.0)
        color = np.asarray(spec.palette[obj.class_id], dtype=np.float64).reshape(3, 1, 1)
        image = image * (1.0 - alpha) + color * alpha

    return SynthScene(image=Tensor(image[None]), objects=objects, seed=seed)


def benchmark_scenes(spec: SceneSpec, num_scenes: int = BENCHMARK_SIZE, first_seed: int = 0) -> List[SynthScene]:
    """The fixed benchmark set: one scene per seed ``first_seed .. first_seed + num_scenes - 1``."""
    return [gen_scene(seed, spec) for seed in range(first_seed, first_seed + num_scenes)]


def peak_cell(center: float, stride: int, extent: int) -> int:
    return min(max(int(math.floor(center / stride + 0.5)), 0), extent - 1)


def assign_objects(
    scene: SynthScene,
    spec: SceneSpec,
    strides: Sequence[int] = DEFAULT_STRIDES
) -> List[ObjectAssignment]:
    size = scene.image_size
    assignments = []
    for obj in scene.objects:
        band = spec.band_for(obj.size_px)
        if band is None:
            raise ConfigError(f"object of size {obj.size_px:.2f}px falls outside every size band", location="scenes.bands")
        if band.level >= len(strides):
            raise ConfigError(f"band level {band.level} has no stride among {list(strides)}", location="scenes.bands")
        stride = strides[band.level]
        extent = math.ceil(size / stride)
        assignments.append(ObjectAssignment(
            level=band.level,
            stride=stride,
            row=peak_cell(obj.cy, stride, extent),
            col=peak_cell(obj.cx, stride, extent),
        ))
    return assignments


def make_targets(
    scene: SynthScene,
    spec: SceneSpec,
    strides: Sequence[int] = DEFAULT_STRIDES
) -> List[HeatmapTarget]:
    """Unit-peak Gaussians (sigma = size/8 px, in level cells) at each object's assigned level."""
    size = scene.image_size
    targets = []
    for level, stride in enumerate(strides):
        extent = math.ceil(size / stride)
        targets.append(HeatmapTarget(level, stride, np.zeros((1, 1, extent, extent))))

    for obj, where in zip(scene.objects, assign_objects(scene, spec, strides)):
        target = targets[where.level]
        extent = target.heatmap.shape[-1]
        rows, cols = np.mgrid[0:extent, 0:extent]
        sigma = obj.size_px / 8.0 / where.stride
        blob = np.exp(-((rows - where.row) ** 2 + (cols - where.col) ** 2) / (2.0 * sigma * sigma))
        np.maximum(target.heatmap[0, 0], blob, out=target.heatmap[0, 0])
        target.peaks.append((where.row, where.col))
    return targets


def stack_images(scenes: Sequence[SynthScene]) -> Tensor:
    return Tensor(np.concatenate([scene.image.data for scene in scenes], axis=0))


def stack_targets(targets: Sequence[List[HeatmapTarget]]) -> List[np.ndarray]:
    """Per-level N×1×H_i×W_i arrays from per-scene target lists."""
    return [
        np.concatenate([per_scene[level].heatmap for per_scene in targets], axis=0)
        for level in range(len(targets[0]))
    ]
