"""Export of the condensed contexts a chosen query cell attends to.

One record per (level, placement, stack round, batch item): the key locations
in image pixels with their gates, and the query's attention over the local
token and the global keys, listed by descending weight with rank 1 for the
most related.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.core.exceptions import TraceError
from app.models.trace import AttentionEntry, ContextTraceRecord, KeyTrace
from app.services.detector import DetectorModel
from app.services.io_utils import atomic_write_text
from app.services.synth_data import SynthScene
from app.services.tcc import TccRound

logger = logging.getLogger(__name__)


def attention_ranks(weights: np.ndarray) -> np.ndarray:
    """Rank 1 for the largest weight; ties keep key order."""
    order = np.argsort(-weights, kind="stable")
    ranks = np.empty(len(weights), dtype=np.int64)
    ranks[order] = np.arange(1, len(weights) + 1)
    return ranks


def default_query_cells(score_maps: List[np.ndarray], batch_index: int = 0) -> Dict[int, Tuple[int, int]]:
    """Highest-scoring head cell (row, col) per level; first occurrence on ties."""
    cells = {}
    for level, scores in enumerate(score_maps):
        level_map = scores[batch_index, 0]
        row, col = np.unravel_index(int(np.argmax(level_map)), level_map.shape)
        cells[level] = (int(row), int(col))
    return cells


def trace_round(round_: TccRound, stride: int, query_cell: Tuple[int, int], batch_index: int = 0) -> ContextTraceRecord:
    ctx = round_.context
    row, col = query_cell
    W = ctx.local_rep.shape[3]
    gates = ctx.gates[batch_index]
    keys = [
        KeyTrace(
            x_px=int(x) * stride + stride // 2,
            y_px=int(y) * stride + stride // 2,
            gate=float(gate),
        )
        for x, y, gate in zip(ctx.key_xs[batch_index], ctx.key_ys[batch_index], gates)
    ]
    weights = round_.attention.data[batch_index, row * W + col]
    ranks = attention_ranks(weights)
    attention = [
        AttentionEntry(
            source="local" if index == 0 else "global",
            key_index=0 if index == 0 else index - 1,
            weight=float(weights[index]),
            rank=int(ranks[index]),
        )
        for index in map(int, np.argsort(ranks))
    ]
    return ContextTraceRecord(
        level=round_.level,
        stride=stride,
        placement=round_.placement,
        stack=round_.stack,
        batch_index=batch_index,
        query_cell=(row, col),
        query_px=(col * stride + stride // 2, row * stride + stride // 2),
        keys=keys,
        attention=attention,
    )


def export_context_trace(
    model: DetectorModel,
    scene: SynthScene,
    query_cells: Optional[Dict[int, Tuple[int, int]]] = None,
    deepest_only: bool = False
) -> List[ContextTraceRecord]:
    """Trace records for every TCC round the scene passes through.

    ``deepest_only`` keeps the last round of the deepest level only.
    """
    if not model.has_tcc:
        raise TraceError(f"model uses refinement '{model.config.fusion.refinement}', tracing needs TCC")
    if model.config.tcc.mode == "local_only":
        raise TraceError("local_only TCC rounds have no condensed keys to trace")
    rounds: List[TccRound] = []
    score_maps = [scores.numpy() for scores in model(scene.image, recorder=rounds)]
    cells = dict(default_query_cells(score_maps))
    cells.update(query_cells or {})

    strides = model.strides
    if deepest_only:
        deepest = max(r.level for r in rounds)
        rounds = [r for r in rounds if r.level == deepest][-1:]
    records = []
    for round_ in rounds:
        H, W = round_.context.local_rep.shape[2:]
        row, col = cells[round_.level]
        if not (0 <= row < H and 0 <= col < W):
            raise TraceError(f"query cell {(row, col)} outside the {H}x{W} map of level {round_.level}")
        records.append(trace_round(round_, strides[round_.level], (row, col)))
    return records


def write_trace(path: Path, records: List[ContextTraceRecord]) -> Path:
    """JSON lines, one record per line."""
    path = atomic_write_text(path, "".join(record.model_dump_json() + "\n" for record in records))
    logger.info(f"Wrote {len(records)} context trace records to {path}")
    return path


def read_trace(path: Path) -> List[ContextTraceRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ContextTraceRecord.model_validate_json(line) for line in lines if line.strip()]
