import csv
import logging
import math
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from .config import PrivacyConfig
from .corpus import Corpus
from .embedding_service import EmbeddingSet, Granularity
from .errors import MetricError

logger = logging.getLogger(__name__)

AUDIT_COLUMNS = ["synthetic_id", "real_id", "distance", "synthetic_text", "real_text"]


class Neighbor(NamedTuple):
    real_id: str
    distance: float


class FlaggedPair(BaseModel):
    synthetic_id: str
    real_id: str
    distance: float


class PrivacyScores(BaseModel):
    mean_nnd: float
    plagiarism_rate: float
    threshold: float
    flagged: List[FlaggedPair]


def nnd(synthetic_emb: EmbeddingSet, real_emb: EmbeddingSet) -> Dict[str, Neighbor]:
    """
    Exact nearest real neighbour of every synthetic vector under cosine distance

    Ties go to the smallest real id; a byte-identical vector is at distance 0.
    """
    for name, embeddings in (("synthetic", synthetic_emb), ("real", real_emb)):
        if len(embeddings) == 0:
            raise MetricError(f"{name} embedding set is empty")
        if embeddings.granularity != Granularity.TEXT:
            raise MetricError(f"{name} embeddings must be text-granularity")
    if synthetic_emb.dim != real_emb.dim:
        raise MetricError(f"dim mismatch: synthetic {synthetic_emb.dim} vs real {real_emb.dim}")

    real_ids = sorted(real_emb.ids())
    real_matrix = real_emb.matrix(real_ids)
    neighbors: Dict[str, Neighbor] = {}
    for synthetic_id in sorted(synthetic_emb.ids()):
        vector = synthetic_emb.get(synthetic_id)
        distances = np.clip(1.0 - real_matrix @ vector, 0.0, 2.0)
        distances[np.all(real_matrix == vector, axis=1)] = 0.0
        best = int(np.argmin(distances))
        neighbors[synthetic_id] = Neighbor(real_ids[best], float(distances[best]))
    return neighbors


def privacy_scores(nnd_map: Dict[str, Neighbor], config: Optional[PrivacyConfig] = None) -> PrivacyScores:
    """Mean NND and the share of synthetic reports strictly closer than the threshold"""
    config = config or PrivacyConfig()
    if not nnd_map:
        raise MetricError("no nearest-neighbour distances to score")

    flagged = [
        FlaggedPair(synthetic_id=synthetic_id, real_id=neighbor.real_id, distance=neighbor.distance)
        for synthetic_id, neighbor in sorted(nnd_map.items())
        if neighbor.distance < config.threshold
    ]
    scores = PrivacyScores(
        mean_nnd=math.fsum(n.distance for n in nnd_map.values()) / len(nnd_map),
        plagiarism_rate=len(flagged) / len(nnd_map),
        threshold=config.threshold,
        flagged=flagged,
    )
    if flagged:
        logger.warning(f"{len(flagged)} of {len(nnd_map)} synthetic reports are within {config.threshold} of a real report")
    return scores


def write_audit(flagged: Sequence[FlaggedPair], synthetic: Corpus, real: Corpus, path: Path) -> None:
    """Flagged pairs with both texts side by side, tab-separated"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
        writer.writerow(AUDIT_COLUMNS)
        for pair in flagged:
            writer.writerow([
                pair.synthetic_id, pair.real_id, repr(pair.distance),
                synthetic.get(pair.synthetic_id).text, real.get(pair.real_id).text,
            ])
    logger.info(f"Wrote {len(flagged)} flagged pairs to {path}")
