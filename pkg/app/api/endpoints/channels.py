from fastapi import APIRouter, HTTPException
from pathlib import Path
from typing import Dict, List, Tuple
import logging

from app.core.config import settings
from app.core.errors import LedgerFormatError, RejectedInputError
from app.models.ledger import Channel
from app.schemas.ledger import BlockSummary, ChainAudit, ChannelSummary
from app.services.ledger_service import LedgerService, block_summary, channel_summary
from app.services.ledger_store import LEDGER_SUFFIX, load_channel

logger = logging.getLogger(__name__)
router = APIRouter()


def _ledger_files() -> Dict[str, Path]:
    root = Path(settings.ledger_dir)
    if not root.is_dir():
        return {}
    files: Dict[str, Path] = {}
    for path in sorted(root.rglob(f"*{LEDGER_SUFFIX}")):
        files.setdefault(path.stem, path)
    return files


def _open_channel(channel_id: str) -> Tuple[LedgerService, Channel]:
    path = _ledger_files().get(channel_id)
    if path is None:
        raise HTTPException(status_code=404, detail=f"Channel '{channel_id}' not found")
    try:
        return load_channel(path)
    except LedgerFormatError as e:
        logger.warning(f"Unreadable ledger {path}: {e}")
        raise HTTPException(status_code=422, detail=str(e))


@router.get("", response_model=Dict[str, List[str]])
async def list_channels():
    """List the channel ids of every ledger file under the ledger directory."""
    return {"channels": list(_ledger_files())}


@router.get("/{channel_id}", response_model=ChannelSummary)
async def get_channel(channel_id: str):
    """
    Get a channel summary.

    Returns the model spec, training hyperparameters, chain length, head hash
    and the number of local blocks waiting for the next merge.
    """
    network, channel = _open_channel(channel_id)
    return channel_summary(network, channel)


@router.get("/{channel_id}/latest-global", response_model=BlockSummary)
async def get_latest_global(channel_id: str):
    """The block a client fetches before local training (genesis or the last merge)."""
    _, channel = _open_channel(channel_id)
    return block_summary(channel, channel.world_state.last_global_index)


@router.get("/{channel_id}/blocks/{index}", response_model=BlockSummary)
async def get_block(channel_id: str, index: int):
    _, channel = _open_channel(channel_id)
    try:
        return block_summary(channel, index)
    except RejectedInputError as e:
        raise HTTPException(status_code=404, detail=str(e))


@router.get("/{channel_id}/verify", response_model=ChainAudit)
async def verify_channel(channel_id: str):
    """Recompute every hash link and signature of the channel."""
    network, channel = _open_channel(channel_id)
    audit = network.verify_chain(channel)
    if not audit.ok:
        logger.warning(f"Channel '{channel_id}' failed verification at block {audit.first_bad_index}: {audit.reason}")
    return audit
