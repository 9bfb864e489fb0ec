from fastapi import APIRouter
from app.api.v1.endpoints import config, flops

api_router = APIRouter()

api_router.include_router(
    flops.router,
    prefix="/flops",
    tags=["flops"]
)

api_router.include_router(
    config.router,
    prefix="/config",
    tags=["config"]
)
