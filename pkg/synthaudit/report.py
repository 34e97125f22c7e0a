"""Per-generator comparison table with better-direction markers."""

import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator

from .diversity import DiversityScores
from .errors import ReportError
from .fidelity import FidelityScores
from .generation_service import CodeYield
from .privacy import FlaggedPair, PrivacyScores
from .rendering import render_template

logger = logging.getLogger(__name__)


class Direction(str, Enum):
    LOWER_BETTER = "lower"
    HIGHER_BETTER = "higher"


METRICS: List[str] = [
    "mmd", "bertscore_f1", "sms", "rouge1", "rouge2", "rougeL", "meteor",
    "self_bleu", "ttr", "mean_nnd", "plagiarism_rate",
]

DIRECTIONS: Dict[str, Direction] = {
    "mmd": Direction.LOWER_BETTER,
    "bertscore_f1": Direction.HIGHER_BETTER,
    "sms": Direction.LOWER_BETTER,
    "rouge1": Direction.LOWER_BETTER,
    "rouge2": Direction.LOWER_BETTER,
    "rougeL": Direction.LOWER_BETTER,
    "meteor": Direction.LOWER_BETTER,
    "self_bleu": Direction.LOWER_BETTER,
    "ttr": Direction.HIGHER_BETTER,
    "mean_nnd": Direction.HIGHER_BETTER,
    "plagiarism_rate": Direction.LOWER_BETTER,
}

LABELS: Dict[str, str] = {
    "mmd": "MMD",
    "bertscore_f1": "BERTScore F1",
    "sms": "SMS",
    "rouge1": "ROUGE-1",
    "rouge2": "ROUGE-2",
    "rougeL": "ROUGE-L",
    "meteor": "METEOR",
    "self_bleu": "Self-BLEU",
    "ttr": "TTR",
    "mean_nnd": "Mean NND",
    "plagiarism_rate": "Plagiarism rate",
}

MARKERS: Dict[Direction, str] = {Direction.LOWER_BETTER: "▼", Direction.HIGHER_BETTER: "▲"}

# метрики, которые могут быть не определены для генератора (null)
OPTIONAL_METRICS = frozenset({"self_bleu"})

MISSING_CELL = "n/a"


class ReportMetadata(BaseModel):
    real_count: int = 0
    synthetic_counts: Dict[str, int] = Field(default_factory=dict)
    config_fingerprint: str = ""
    created_at: str = ""
    settings: Dict[str, Any] = Field(default_factory=dict)


class ReportAnnexes(BaseModel):
    yields: Dict[str, List[CodeYield]] = Field(default_factory=dict)
    flagged: Dict[str, List[FlaggedPair]] = Field(default_factory=dict)
    bertscore_pr: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    top_ngrams: Dict[str, List[List[Any]]] = Field(default_factory=dict)


class EvaluationReport(BaseModel):
    rows: Dict[str, Dict[str, Optional[float]]]
    directions: Dict[str, Direction] = Field(default_factory=lambda: dict(DIRECTIONS))
    best: Dict[str, List[str]]
    metadata: ReportMetadata = Field(default_factory=ReportMetadata)
    annexes: ReportAnnexes = Field(default_factory=ReportAnnexes)

    @field_validator("directions")
    @classmethod
    def _fixed_directions(cls, value):
        if value != DIRECTIONS:
            raise ValueError("metric directions are fixed")
        return value


def scores_row(fidelity: FidelityScores, diversity: DiversityScores, privacy: PrivacyScores) -> Dict[str, Optional[float]]:
    """Flatten the three dimensions into one table row"""
    return {
        "mmd": fidelity.mmd,
        "bertscore_f1": fidelity.bertscore_f1,
        "sms": fidelity.sms,
        "rouge1": fidelity.rouge1,
        "rouge2": fidelity.rouge2,
        "rougeL": fidelity.rougeL,
        "meteor": fidelity.meteor,
        "self_bleu": diversity.self_bleu,
        "ttr": diversity.ttr,
        "mean_nnd": privacy.mean_nnd,
        "plagiarism_rate": privacy.plagiarism_rate,
    }


def best_generators(rows: Mapping[str, Mapping[str, Optional[float]]]) -> Dict[str, List[str]]:
    """Generators holding the best value of each metric; ties are all kept, null values never win"""
    best: Dict[str, List[str]] = {}
    for metric in METRICS:
        values = {generator: row[metric] for generator, row in rows.items() if row[metric] is not None}
        if not values:
            best[metric] = []
            continue
        pick = min if DIRECTIONS[metric] == Direction.LOWER_BETTER else max
        target = pick(values.values())
        best[metric] = sorted(g for g, v in values.items() if v == target)
    return best


def build_report(per_generator: Mapping[str, Mapping[str, Optional[float]]],
                 metadata: Optional[ReportMetadata] = None,
                 annexes: Optional[ReportAnnexes] = None) -> EvaluationReport:
    """
    Assemble the comparison table

    Raises:
        ReportError: no generator, or a generator with a missing or non-finite metric.
            Only OPTIONAL_METRICS may be null.
    """
    if not per_generator:
        raise ReportError("no generator scores to report")

    rows: Dict[str, Dict[str, Optional[float]]] = {}
    for generator in sorted(per_generator):
        scores = per_generator[generator]
        row: Dict[str, Optional[float]] = {}
        for metric in METRICS:
            if metric in scores and scores[metric] is None and metric in OPTIONAL_METRICS:
                row[metric] = None
                continue
            if metric not in scores or scores[metric] is None:
                raise ReportError(f"generator {generator}: missing metric {metric}")
            value = float(scores[metric])
            if not math.isfinite(value):
                raise ReportError(f"generator {generator}: metric {metric} is not finite ({value})")
            row[metric] = value
        rows[generator] = row

    return EvaluationReport(
        rows=rows,
        best=best_generators(rows),
        metadata=metadata or ReportMetadata(),
        annexes=annexes or ReportAnnexes(),
    )


def render_markdown(report: EvaluationReport) -> str:
    header = [f"{LABELS[m]} {MARKERS[report.directions[m]]}" for m in METRICS]
    table = []
    for generator, row in report.rows.items():
        cells = []
        for metric in METRICS:
            if row[metric] is None:
                cells.append(MISSING_CELL)
                continue
            text = f"{row[metric]:.3f}"
            cells.append(f"**{text}**" if generator in report.best[metric] else text)
        table.append({"generator": generator, "cells": cells})
    return render_template("report.md.j2", header=header, table=table, report=report,
                           markers=MARKERS)


def render_structured(report: EvaluationReport, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise ReportError(f"cannot write {path}: {e}") from e
    logger.info(f"Wrote structured report to {path}")


def load_report(path: Path) -> EvaluationReport:
    try:
        return EvaluationReport.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, ValueError, ValidationError) as e:
        raise ReportError(f"cannot read report {path}: {e}") from e
