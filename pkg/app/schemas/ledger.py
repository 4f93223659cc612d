from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class BlockSummary(BaseModel):
    """Human-readable view of one committed block."""
    index: int
    block_type: str
    channel_id: str
    round: int
    creator: str = Field(..., description="Creator identity id (hex)")
    parent_hash: str
    block_hash: str
    n_k: int
    payload_length: int
    payload_norm: float
    payload_head: List[float] = Field(default_factory=list, description="First payload values")
    meta: Optional[Dict[str, Any]] = None
    timestamp: int


class ChainAudit(BaseModel):
    """Result of recomputing every hash link and signature."""
    channel_id: str
    ok: bool
    length: int
    first_bad_index: Optional[int] = None
    reason: Optional[str] = None


class ChannelSummary(BaseModel):
    channel_id: str
    model_spec: Dict[str, Any]
    hyperparams: Dict[str, Any]
    length: int
    head_hash: str
    global_blocks: int
    queued_local_blocks: int
    members: int
