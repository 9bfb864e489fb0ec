from typing import List, Optional

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from app.core.exceptions import TccError
from app.models.config import FlopsConfig, Placement, TccConfig
from app.models.flops import KeyCountRow, RefinementComparison
from app.services.complexity_analyzer import compare_refinements, key_count_sweep

router = APIRouter()


class FlopsRequest(BaseModel):
    flops: FlopsConfig = FlopsConfig()
    tcc: TccConfig = TccConfig()
    placement: Optional[Placement] = None


class KeySweepRequest(FlopsRequest):
    n_values: Optional[List[int]] = None


@router.post("/compare", response_model=RefinementComparison)
async def compare_variants(request: FlopsRequest) -> RefinementComparison:
    """
    Refinement-path FLOPs of conv3x3 and TCC relative to no refinement.
    """
    try:
        return compare_refinements(request.flops, request.tcc, request.placement)
    except TccError as e:
        raise HTTPException(status_code=400, detail=str(e))


@router.post("/key-sweep", response_model=List[KeyCountRow])
async def sweep_key_counts(request: KeySweepRequest) -> List[KeyCountRow]:
    """
    TCC cost for each key count, relative to the configured one.
    """
    if request.n_values is not None and any(n < 1 for n in request.n_values):
        raise HTTPException(status_code=400, detail="key counts must be positive")
    try:
        return key_count_sweep(request.flops, request.tcc, request.placement, request.n_values)
    except TccError as e:
        raise HTTPException(status_code=400, detail=str(e))
