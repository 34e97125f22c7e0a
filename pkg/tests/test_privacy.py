import csv
import math
import random

import numpy as np
import pytest

from synthaudit.config import PrivacyConfig
from synthaudit.corpus import Corpus
from synthaudit.embedding_service import EmbeddingSet, Granularity
from synthaudit.errors import MetricError
from synthaudit.privacy import FlaggedPair, Neighbor, nnd, privacy_scores, write_audit

from .conftest import real_report, synthetic_report


def unit(*components):
    vector = np.asarray(components, dtype=float)
    return vector / np.linalg.norm(vector)


class TestNearestNeighbour:
    """Exact cosine nearest real report"""

    def test_copy_is_zero(self):
        vector = unit(0.3, -0.2, 0.9)
        synthetic = EmbeddingSet(3, {"s1": vector})
        real = EmbeddingSet(3, {"r1": unit(1, 0, 0), "r2": vector.copy()})
        assert nnd(synthetic, real) == {"s1": Neighbor("r2", 0.0)}

    def test_blend_is_nearest(self):
        synthetic = EmbeddingSet(2, {"s1": unit(1, 0)})
        real = EmbeddingSet(2, {"r1": unit(0, 1), "r2": unit(1, 1)})
        neighbor = nnd(synthetic, real)["s1"]
        assert neighbor.real_id == "r2"
        assert abs(neighbor.distance - (1 - 1 / math.sqrt(2))) <= 1e-12

    def test_tie_goes_to_smallest_id(self):
        synthetic = EmbeddingSet(2, {"s1": unit(1, 1)})
        real = EmbeddingSet(2, {"rb": unit(1, 0), "ra": unit(0, 1)})
        assert nnd(synthetic, real)["s1"].real_id == "ra"

    def test_adding_real_never_increases(self):
        rng = np.random.default_rng(5)
        vectors = {f"r{i}": unit(*rng.normal(size=4)) for i in range(6)}
        synthetic = EmbeddingSet(4, {f"s{i}": unit(*rng.normal(size=4)) for i in range(5)})
        before = nnd(synthetic, EmbeddingSet(4, dict(list(vectors.items())[:3])))
        after = nnd(synthetic, EmbeddingSet(4, vectors))
        assert all(after[k].distance <= before[k].distance for k in before)

    def test_dim_mismatch(self):
        with pytest.raises(MetricError, match="dim mismatch"):
            nnd(EmbeddingSet(2, {"s": unit(1, 0)}), EmbeddingSet(3, {"r": unit(1, 0, 0)}))

    def test_empty(self):
        with pytest.raises(MetricError, match="empty"):
            nnd(EmbeddingSet(0, {}), EmbeddingSet(2, {"r": unit(1, 0)}))

    def test_token_granularity_rejected(self):
        tokens = EmbeddingSet(2, {"s": np.vstack([unit(1, 0)])}, Granularity.TOKEN)
        with pytest.raises(MetricError, match="text-granularity"):
            nnd(tokens, EmbeddingSet(2, {"r": unit(1, 0)}))


class TestPrivacyScores:
    """Mean NND and strict-threshold plagiarism rate"""

    def test_all_copies(self):
        scores = privacy_scores({"s1": Neighbor("r1", 0.0), "s2": Neighbor("r2", 0.0)})
        assert scores.mean_nnd == 0.0
        assert scores.plagiarism_rate == 1.0

    def test_strict_threshold(self):
        scores = privacy_scores({"s1": Neighbor("r1", 0.04), "s2": Neighbor("r2", 0.06)}, PrivacyConfig(threshold=0.05))
        assert scores.plagiarism_rate == 0.5
        assert abs(scores.mean_nnd - 0.05) <= 1e-12
        assert scores.flagged == [FlaggedPair(synthetic_id="s1", real_id="r1", distance=0.04)]

    def test_boundary_not_flagged(self):
        scores = privacy_scores({"s1": Neighbor("r1", 0.05)}, PrivacyConfig(threshold=0.05))
        assert scores.plagiarism_rate == 0.0
        assert scores.flagged == []

    def test_rate_monotone_in_threshold(self):
        rng = random.Random(11)
        for _ in range(100):
            distances = {f"s{i}": Neighbor("r", rng.uniform(0.0, 0.3)) for i in range(rng.randint(1, 20))}
            thresholds = sorted(rng.uniform(0.001, 0.5) for _ in range(5))
            rates = [privacy_scores(distances, PrivacyConfig(threshold=t)).plagiarism_rate for t in thresholds]
            assert rates == sorted(rates)
            for t, rate in zip(thresholds, rates):
                flagged = privacy_scores(distances, PrivacyConfig(threshold=t)).flagged
                assert all(pair.distance < t for pair in flagged)
                assert rate == len(flagged) / len(distances)

    def test_empty(self):
        with pytest.raises(MetricError):
            privacy_scores({})


class TestAudit:

    def test_side_by_side(self, tmp_path):
        real = Corpus([real_report("r1", "Animo bajo\tcon tabulador")])
        synthetic = Corpus([synthetic_report("s1", "Animo bajo")])
        path = tmp_path / "audit.tsv"
        write_audit([FlaggedPair(synthetic_id="s1", real_id="r1", distance=0.01)], synthetic, real, path)
        with open(path, encoding="utf-8", newline="") as handle:
            rows = list(csv.reader(handle, delimiter="\t"))
        assert rows[0] == ["synthetic_id", "real_id", "distance", "synthetic_text", "real_text"]
        assert rows[1] == ["s1", "r1", "0.01", "Animo bajo", "Animo bajo\tcon tabulador"]

    def test_header_only(self, tmp_path):
        path = tmp_path / "audit.tsv"
        write_audit([], Corpus(), Corpus(), path)
        assert path.read_text(encoding="utf-8") == "synthetic_id\treal_id\tdistance\tsynthetic_text\treal_text\n"
