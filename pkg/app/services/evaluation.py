import logging
from typing import List, Optional, Sequence

import numpy as np

from app.models.config import SceneSpec
from app.services.detector import DetectorModel
from app.services.synth_data import ObjectAssignment, SynthScene, assign_objects, stack_images

logger = logging.getLogger(__name__)


def local_peaks(score_map: np.ndarray, threshold: float) -> np.ndarray:
    """(row, col) of cells above ``threshold`` that are >= all 8 neighbours."""
    padded = np.pad(score_map, 1, constant_values=-np.inf)
    H, W = score_map.shape
    is_peak = score_map > threshold
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                is_peak &= score_map >= padded[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
    return np.argwhere(is_peak)


def recall_from_maps(
    score_maps: Sequence[Sequence[np.ndarray]],
    assignments: Sequence[Sequence[ObjectAssignment]],
    score_threshold: float,
    radius_cells: int
) -> float:
    """Fraction of objects with a peak within Chebyshev ``radius_cells`` of their target cell.

    ``score_maps[s][level]`` is the H_i×W_i map of scene ``s``. No objects at all
    counts as full recall.
    """
    found, total = 0, 0
    for maps, objects in zip(score_maps, assignments):
        peaks = {}
        for obj in objects:
            total += 1
            if obj.level not in peaks:
                level_map = np.asarray(maps[obj.level])
                peaks[obj.level] = local_peaks(level_map.reshape(level_map.shape[-2:]), score_threshold)
            candidates = peaks[obj.level]
            if len(candidates) and np.any(
                np.maximum(np.abs(candidates[:, 0] - obj.row), np.abs(candidates[:, 1] - obj.col)) <= radius_cells
            ):
                found += 1
    return found / total if total else 1.0


def eval_recall(
    model: DetectorModel,
    scenes: Sequence[SynthScene],
    score_threshold: float,
    radius_cells: int,
    spec: Optional[SceneSpec] = None,
    batch_size: int = 8
) -> float:
    spec = spec or model.config.scenes
    score_maps: List[List[np.ndarray]] = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        maps = model.score_maps(stack_images(chunk))
        for index in range(len(chunk)):
            score_maps.append([level_map[index, 0] for level_map in maps])
    assignments = [assign_objects(scene, spec, model.strides) for scene in scenes]
    recall = recall_from_maps(score_maps, assignments, score_threshold, radius_cells)
    logger.debug(f"Recall over {len(scenes)} scenes at threshold {score_threshold}: {recall:.4f}")
    return recall
