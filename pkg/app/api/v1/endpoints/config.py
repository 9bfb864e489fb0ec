from typing import Dict

from fastapi import APIRouter

from app.models.config import RunConfig

router = APIRouter()


@router.get("/defaults")
async def get_defaults() -> Dict:
    """
    Default run configuration.
    """
    return RunConfig().model_dump(mode="json")
