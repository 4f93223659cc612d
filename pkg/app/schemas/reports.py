from typing import Dict, List, Optional

from pydantic import BaseModel, Field

METRICS_COLUMNS = [
    "round",
    "global_accuracy",
    "global_loss",
    "backdoor_accuracy",
    "blocks_merged",
    "blocks_rejected",
    "fg_min_weight",
    "wallclock_ms",
]

SUMMARY_COLUMNS = [
    "dataset",
    "n_clients",
    "rounds",
    "global_blocks",
    "final_accuracy",
    "best_accuracy",
    "final_backdoor_accuracy",
    "overall_ms",
]

DLG_TRACE_COLUMNS = ["iter", "match_loss", "mse"]


class RoundReport(BaseModel):
    """Outcome of one simulator tick."""
    round: int
    merged: bool = False
    merge_deferred: bool = False
    accuracy: Optional[float] = Field(None, ge=0, le=1, description="Held-out accuracy after the merge")
    loss: Optional[float] = None
    backdoor_accuracy: Optional[float] = Field(None, ge=0, le=1)
    submitted: List[str] = Field(default_factory=list, description="Client ids whose local blocks were committed")
    merged_ids: List[str] = Field(default_factory=list)
    rejected: List[str] = Field(default_factory=list)
    fg_weights: Dict[str, float] = Field(default_factory=dict)
    failed: List[str] = Field(default_factory=list, description="Clients skipped after an error")
    max_examples_touched: int = 0
    wallclock_ms: int = 0


class MetricsRecord(BaseModel):
    """One row of metrics.csv; one per global block."""
    round: int
    global_accuracy: float = Field(..., ge=0, le=1)
    global_loss: float
    backdoor_accuracy: Optional[float] = None
    blocks_merged: int
    blocks_rejected: int
    fg_min_weight: Optional[float] = None
    wallclock_ms: int = 0


class RunSummary(BaseModel):
    """One-line summary of a finished run."""
    dataset: str
    n_clients: int
    rounds: int
    global_blocks: int
    final_accuracy: float
    best_accuracy: float
    final_backdoor_accuracy: Optional[float] = None
    overall_ms: int = 0
