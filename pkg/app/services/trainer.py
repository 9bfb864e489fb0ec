import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core import ops
from app.core.exceptions import NonFiniteError
from app.core.module import Parameter
from app.core.tensor import GradientTape, Tensor
from app.models.config import TrainConfig
from app.services.detector import DetectorModel
from app.services.evaluation import eval_recall
from app.services.io_utils import atomic_write_text
from app.services.synth_data import SynthScene, make_targets, stack_images, stack_targets

logger = logging.getLogger(__name__)

BATCH_STREAM = 7
METRICS_HEADER = "step,loss,recall"


class SGDMomentum:
    """Heavy-ball SGD: ``v = momentum * v + grad``, ``p = p - lr * v``.

    With ``grad_clip_norm > 0`` the gradients are first rescaled so their
    global L2 norm is at most ``grad_clip_norm``.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        learning_rate: float,
        momentum: float = 0.9,
        grad_clip_norm: float = 0.0
    ):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.grad_clip_norm = grad_clip_norm
        self.velocity = [np.zeros(p.shape) for p in self.params]
        self.last_grad_norm = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def clipped_grads(self) -> List[np.ndarray]:
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        self.last_grad_norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if self.grad_clip_norm > 0 and self.last_grad_norm > self.grad_clip_norm:
            scale = self.grad_clip_norm / self.last_grad_norm
            logger.debug(f"Clipping gradient norm {self.last_grad_norm:.4g} to {self.grad_clip_norm}")
            grads = [g * scale for g in grads]
        return grads

    def step(self) -> None:
        for index, (p, grad) in enumerate(zip(self.params, self.clipped_grads())):
            self.velocity[index] = self.momentum * self.velocity[index] + grad
            p.assign(p.data - self.learning_rate * self.velocity[index])


@dataclass
class Batch:
    images: Tensor
    targets: List[np.ndarray]  # per level N×1×H_i×W_i


def make_batch(model: DetectorModel, scenes: Sequence[SynthScene]) -> Batch:
    targets = [make_targets(scene, model.config.scenes, model.strides) for scene in scenes]
    return Batch(images=stack_images(scenes), targets=stack_targets(targets))


def compute_loss(model: DetectorModel, batch: Batch) -> Tensor:
    """Per-cell BCE, averaged within each level and then across levels."""
    logits = model.forward_logits(batch.images)
    per_level = [
        ops.mean(ops.binary_cross_entropy_with_logits(logit, target))
        for logit, target in zip(logits, batch.targets)
    ]
    return ops.mul(ops.concat([ops.reshape(loss, (1,)) for loss in per_level]).sum(), 1.0 / len(per_level))


def train_step(model: DetectorModel, optimizer: SGDMomentum, batch: Batch) -> float:
    """One forward/backward/update; returns the loss before the update."""
    optimizer.zero_grad()
    with GradientTape() as tape:
        loss = compute_loss(model, batch)
    value = loss.item()
    if not math.isfinite(value):
        logger.error(f"Non-finite training loss {value}; aborting")
        raise NonFiniteError(f"training loss is {value}")
    tape.backward(loss)
    optimizer.step()
    return value


class MetricsWriter:
    """CSV metrics (``step,loss,recall``), rewritten atomically at every flush."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.rows: List[Tuple[int, float, float]] = []

    def record(self, step: int, loss: float, recall: float) -> None:
        self.rows.append((step, loss, recall))

    def render(self) -> str:
        lines = [METRICS_HEADER] + [f"{step},{loss:.17g},{recall:.17g}" for step, loss, recall in self.rows]
        return "\n".join(lines) + "\n"

    def flush(self) -> Path:
        return atomic_write_text(self.path, self.render())


@dataclass
class TrainResult:
    losses: List[float] = field(default_factory=list)
    recalls: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def initial_loss(self) -> Optional[float]:
        return self.losses[0] if self.losses else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None


class Trainer:
    def __init__(self, model: DetectorModel, scenes: Sequence[SynthScene], cfg: Optional[TrainConfig] = None):
        self.model = model
        self.scenes = list(scenes)
        self.cfg = cfg or model.config.train
        self.optimizer = SGDMomentum(
            model.parameters(), self.cfg.learning_rate, self.cfg.momentum, self.cfg.grad_clip_norm
        )
        self._rng = np.random.default_rng([self.cfg.seed, BATCH_STREAM])
        self._order = np.arange(0)
        self._cursor = 0

    def _next_indices(self) -> List[int]:
        indices = []
        while len(indices) < self.cfg.batch_size:
            if self._cursor >= len(self._order):
                self._order = self._rng.permutation(len(self.scenes))
                self._cursor = 0
            indices.append(int(self._order[self._cursor]))
            self._cursor += 1
        return indices

    def evaluate(self) -> float:
        return eval_recall(self.model, self.scenes, self.cfg.score_threshold, self.cfg.radius_cells)

    def fit(self, steps: Optional[int] = None, metrics_path: Optional[Path] = None) -> TrainResult:
        steps = self.cfg.steps if steps is None else steps
        writer = MetricsWriter(metrics_path) if metrics_path is not None else None
        if writer is not None:
            writer.flush()

        result = TrainResult()
        logger.info(f"Training for {steps} steps on {len(self.scenes)} scenes, batch size {self.cfg.batch_size}")
        for step in range(1, steps + 1):
            batch = make_batch(self.model, [self.scenes[i] for i in self._next_indices()])
            loss = train_step(self.model, self.optimizer, batch)
            result.losses.append(loss)
            if step % self.cfg.eval_interval == 0 or step == steps:
                recall = self.evaluate()
                result.recalls.append((step, recall))
                logger.info(f"step {step}: loss {loss:.6f}, recall {recall:.4f}")
                if writer is not None:
                    writer.record(step, loss, recall)
                    writer.flush()
        return result
