from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from app.core.tensor import Tensor


@dataclass
class PyramidLevel:
    level: int
    stride: int
    features: Tensor

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.features.shape[2], self.features.shape[3]


@dataclass
class CondensedContext:
    """Local map plus the gated global key features of one condensation round."""

    local_rep: Tensor          # N×Cr×H×W, one local token per query position
    key_ys: np.ndarray         # N×n rows
    key_xs: np.ndarray         # N×n columns
    key_scores: Tensor         # N×n maximum importance scores
    global_feats: Tensor       # N×n×Cr, gathered features times sigmoid(score)

    @property
    def n_keys(self) -> int:
        return self.key_ys.shape[1]

    @property
    def key_locations(self) -> List[List[Tuple[int, int]]]:
        """(x, y) pairs per batch item."""
        return [
            [(int(x), int(y)) for x, y in zip(xs, ys)]
            for xs, ys in zip(self.key_xs, self.key_ys)
        ]

    @property
    def gates(self) -> np.ndarray:
        return 0.5 * (1.0 + np.tanh(0.5 * self.key_scores.data))
