"""Versioned JSON/CSV report files emitted by the analyze and verify commands."""
import json
import logging
from pathlib import Path
from typing import Any, List, Optional

import pandas as pd
from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class Report(BaseModel):
    schema_version: int = Field(REPORT_SCHEMA_VERSION, ge=1)
    metric: str
    layer: Optional[int] = None
    strategy: Optional[str] = None
    values: List[Any] = []


def frame_report(metric, frame, layer=None, strategy=None):
    """Report whose values are the rows of a DataFrame."""
    records = json.loads(frame.to_json(orient="records"))
    return Report(metric=metric, layer=layer, strategy=strategy, values=records)


def write_report(report, out_dir, frame=None):
    """Write <metric>[_layer<i>].json, plus a CSV of frame when one is given."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = report.metric if report.layer is None else f"{report.metric}_layer{report.layer}"
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(report.model_dump_json(indent=2))
    paths = [json_path]
    if frame is not None:
        csv_path = out_dir / f"{stem}.csv"
        frame.to_csv(csv_path, index=False)
        paths.append(csv_path)
    logger.info(f"Wrote {report.metric} report to {json_path}")
    return paths


def load_report(path):
    return Report.model_validate_json(Path(path).read_text())


def histogram_frame(histogram, layer=0):
    return pd.DataFrame(
        [{"layer": layer, "experts_per_token": count, "tokens": n} for count, n in sorted(histogram.items())]
    )
