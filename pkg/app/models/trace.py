from typing import List, Literal, Tuple

from pydantic import BaseModel


class KeyTrace(BaseModel):
    x_px: int
    y_px: int
    gate: float


class AttentionEntry(BaseModel):
    source: Literal["local", "global"]
    key_index: int
    weight: float
    rank: int


class ContextTraceRecord(BaseModel):
    """Condensed contexts seen by one query cell in one TCC round."""

    level: int
    stride: int
    placement: Literal["before_fusion", "after_fusion"]
    stack: int
    batch_index: int
    query_cell: Tuple[int, int]
    query_px: Tuple[int, int]
    keys: List[KeyTrace]
    attention: List[AttentionEntry]
