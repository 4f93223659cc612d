from fastapi import APIRouter
from app.api.endpoints import channels

# Create main API router
router = APIRouter()

router.include_router(channels.router, prefix="/channels", tags=["channels"])
