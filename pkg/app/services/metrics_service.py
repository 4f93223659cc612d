import logging
from pathlib import Path
from typing import List, Sequence, Union

import pandas as pd

from app.core.config import settings
from app.core.errors import MetricsWriteError
from app.models.attack import DlgResult
from app.schemas.reports import (
    DLG_TRACE_COLUMNS,
    METRICS_COLUMNS,
    SUMMARY_COLUMNS,
    MetricsRecord,
    RunSummary,
)

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.csv"
DLG_SUMMARY_COLUMNS = ["variant", "final_match_loss", "final_mse", "diverged"]


def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(
            path,
            index=False,
            float_format=settings.metrics_float_format,
            na_rep="",
            lineterminator="\n",
        )
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise MetricsWriteError(str(path), str(e)) from e
    return path


def write_metrics(records: Sequence[MetricsRecord], directory: Union[str, Path]) -> Path:
    """One row per global block; an empty run writes the header only."""
    rows = [record.model_dump() for record in records]
    frame = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    return _write_frame(frame, Path(directory) / METRICS_FILE)


def read_metrics(path: Union[str, Path]) -> List[MetricsRecord]:
    frame = pd.read_csv(path, float_precision="round_trip")
    frame = frame.astype(object).where(frame.notna(), None)
    return [MetricsRecord(**row) for row in frame.to_dict(orient="records")]


def write_summary(summary: RunSummary, directory: Union[str, Path]) -> Path:
    frame = pd.DataFrame([summary.model_dump()], columns=SUMMARY_COLUMNS)
    return _write_frame(frame, Path(directory) / SUMMARY_FILE)


def write_dlg_trace(result: DlgResult, directory: Union[str, Path], name: str = "dlg_trace") -> Path:
    frame = pd.DataFrame(
        {
            "iter": list(range(result.iterations)),
            "match_loss": result.match_loss,
            "mse": result.mse,
        },
        columns=DLG_TRACE_COLUMNS,
    )
    return _write_frame(frame, Path(directory) / f"{name}.csv")


def write_dlg_summary(results: dict, directory: Union[str, Path]) -> Path:
    """results: variant label -> DlgResult."""
    rows = [
        {
            "variant": variant,
            "final_match_loss": result.final_match_loss,
            "final_mse": result.final_mse,
            "diverged": result.diverged,
        }
        for variant, result in results.items()
    ]
    frame = pd.DataFrame(rows, columns=DLG_SUMMARY_COLUMNS)
    return _write_frame(frame, Path(directory) / "dlg_summary.csv")
