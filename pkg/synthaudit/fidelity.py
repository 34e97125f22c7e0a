"""Semantic fidelity: MMD, BERTScore, sentence mover's distance, ROUGE and METEOR."""

import logging
import math
import re
from collections import Counter
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp

from .config import (
    DEFAULT_M, SMS_EPSILON, SMS_MAX_ITER, SMS_TOL,
    KernelParams, PairingAggregation, PairingStrategy, ReferencePairing, TokenizerConfig,
)
from .corpus import ClinicalReport, Corpus, sample_examples
from .diversity import DEFAULT_TOKENIZER, ngrams, tokenize
from .embedding_service import EmbeddingProvider, EmbeddingSet, Granularity, cosine_distances, normalize_rows
from .errors import ConvergenceError, MetricError

logger = logging.getLogger(__name__)

MARGINAL_TOLERANCE = 1e-9

_SENTENCE_BREAK = re.compile(r"[.;?!\n]")

Matrix = Union[np.ndarray, EmbeddingSet]


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float


class OTResult(NamedTuple):
    plan: np.ndarray
    cost_total: float
    iterations: int
    residual: float


class FidelityScores(BaseModel):
    mmd: float
    bertscore_p: float
    bertscore_r: float
    bertscore_f1: float
    sms: float
    rouge1: float
    rouge2: float
    rougeL: float
    meteor: float
    fallback_count: int = 0
    sms_unconverged: int = 0


def harmonic(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _as_matrix(value: Matrix) -> np.ndarray:
    if isinstance(value, EmbeddingSet):
        return value.matrix()
    return np.atleast_2d(np.asarray(value, dtype=np.float64))


def _canonical_rows(matrix: np.ndarray) -> np.ndarray:
    """Rows in lexicographic order, so row permutations give identical arrays"""
    if len(matrix) < 2:
        return matrix
    order = np.lexsort(matrix.T[::-1])
    return matrix[order]


def median_bandwidth(vectors: np.ndarray) -> float:
    """Median pairwise Euclidean distance over sqrt(2); 1.0 when every point coincides"""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if len(vectors) < 2:
        raise MetricError(f"median bandwidth needs at least 2 vectors, got {len(vectors)}")
    median = float(np.median(pdist(vectors, "euclidean")))
    if median == 0.0:
        return 1.0
    return median / math.sqrt(2.0)


def mmd(real: Matrix, synthetic: Matrix, params: Optional[KernelParams] = None) -> float:
    """
    Biased (V-statistic) RBF-kernel maximum mean discrepancy

    Returns sqrt(max(MMD^2, 0)). Both sets are put in a canonical order first, so the value is
    exactly symmetric and exactly zero for equal multisets.
    """
    params = params or KernelParams()
    x = _canonical_rows(_as_matrix(real))
    y = _canonical_rows(_as_matrix(synthetic))
    if x.size == 0 or y.size == 0:
        raise MetricError("MMD needs two non-empty sets")
    if x.shape[1] != y.shape[1]:
        raise MetricError(f"MMD dim mismatch: {x.shape[1]} vs {y.shape[1]}")
    if (x.shape, x.tobytes()) > (y.shape, y.tobytes()):
        x, y = y, x

    if params.bandwidth == "auto":
        sigma = median_bandwidth(np.vstack([x, y]))
    else:
        sigma = float(params.bandwidth)
    gamma = 1.0 / (2.0 * sigma * sigma)

    k_xx = np.exp(-gamma * cdist(x, x, "sqeuclidean")).mean()
    k_yy = np.exp(-gamma * cdist(y, y, "sqeuclidean")).mean()
    k_xy = np.exp(-gamma * cdist(x, y, "sqeuclidean")).mean()
    squared = k_xx + k_yy - 2.0 * k_xy
    return math.sqrt(max(float(squared), 0.0))


def bertscore(candidate_tokens: np.ndarray, reference_tokens: np.ndarray) -> PRF:
    """Greedy cosine matching of token vectors, no IDF weighting"""
    candidate_tokens = np.atleast_2d(candidate_tokens)
    reference_tokens = np.atleast_2d(reference_tokens)
    if candidate_tokens.size == 0 or reference_tokens.size == 0:
        raise MetricError("BERTScore needs non-empty token lists")
    similarity = candidate_tokens @ reference_tokens.T
    precision = float(np.clip(similarity.max(axis=1), 0.0, 1.0).mean())
    recall = float(np.clip(similarity.max(axis=0), 0.0, 1.0).mean())
    return PRF(precision, recall, harmonic(precision, recall))


def _forced_plan(cost: np.ndarray, weights_a: np.ndarray, weights_b: np.ndarray) -> OTResult:
    if cost.shape[0] == 1:
        plan = weights_b[None, :].copy()
    else:
        plan = weights_a[:, None].copy()
    return OTResult(plan, float(np.sum(plan * cost)), 0, 0.0)


def solve_ot(cost: np.ndarray, weights_a: Sequence[float], weights_b: Sequence[float],
             epsilon: float = SMS_EPSILON, tol: float = SMS_TOL, max_iter: int = SMS_MAX_ITER) -> OTResult:
    """
    Entropic optimal transport by log-domain Sinkhorn scaling

    A single row or column leaves one feasible plan, which is returned exactly.

    Raises:
        MetricError: invalid marginals or costs
        ConvergenceError: max_iter reached; carries the last plan, its cost and the residual
    """
    cost = np.atleast_2d(np.asarray(cost, dtype=np.float64))
    a = np.asarray(weights_a, dtype=np.float64)
    b = np.asarray(weights_b, dtype=np.float64)
    if cost.shape != (a.size, b.size):
        raise MetricError(f"cost shape {cost.shape} does not match weights ({a.size}, {b.size})")
    if not np.all(np.isfinite(cost)) or np.any(cost < 0):
        raise MetricError("transport costs must be finite and non-negative")
    for name, weights in (("weights_a", a), ("weights_b", b)):
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > MARGINAL_TOLERANCE:
            raise MetricError(f"invalid marginals: {name} must be non-negative and sum to 1")
    if epsilon <= 0:
        raise MetricError(f"epsilon must be > 0, got {epsilon}")

    if 1 in cost.shape:
        return _forced_plan(cost, a, b)

    rows, cols = a > 0, b > 0
    sub_cost = cost[np.ix_(rows, cols)]
    log_a, log_b = np.log(a[rows]), np.log(b[cols])
    f = np.zeros(rows.sum())
    g = np.zeros(cols.sum())

    sub_plan = None
    residual = math.inf
    iteration = 0
    for iteration in range(1, max_iter + 1):
        f = epsilon * (log_a - logsumexp((g[None, :] - sub_cost) / epsilon, axis=1))
        g = epsilon * (log_b - logsumexp((f[:, None] - sub_cost) / epsilon, axis=0))
        sub_plan = np.exp((f[:, None] + g[None, :] - sub_cost) / epsilon)
        residual = float(np.abs(sub_plan.sum(axis=1) - a[rows]).max())
        if residual < tol:
            break

    plan = np.zeros_like(cost)
    plan[np.ix_(rows, cols)] = sub_plan
    cost_total = float(np.sum(plan * cost))
    if residual >= tol:
        raise ConvergenceError(
            f"Sinkhorn did not converge in {max_iter} iterations (residual {residual:.3e})",
            residual=residual, plan=plan, cost_total=cost_total, iterations=iteration,
        )
    return OTResult(plan, cost_total, iteration, residual)


def split_sentences(text: str) -> List[str]:
    return [part.strip() for part in _SENTENCE_BREAK.split(text) if part.strip()]


def sentence_weights(sentences: Sequence[str], tokenizer: TokenizerConfig = DEFAULT_TOKENIZER) -> np.ndarray:
    """Token counts normalized per document; uniform when no sentence has a token"""
    counts = np.array([len(tokenize(s, tokenizer)) for s in sentences], dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return np.full(len(sentences), 1.0 / len(sentences))
    return counts / total


def _sms_from_parts(emb_a: np.ndarray, w_a: np.ndarray, emb_b: np.ndarray, w_b: np.ndarray) -> float:
    result = solve_ot(cosine_distances(emb_a, emb_b), w_a, w_b, SMS_EPSILON, SMS_TOL, SMS_MAX_ITER)
    return result.cost_total


def sentence_movers_distance(doc_a: str, doc_b: str, provider: EmbeddingProvider,
                             tokenizer: TokenizerConfig = DEFAULT_TOKENIZER) -> float:
    """Transport cost between the token-weighted sentence embeddings of two documents"""
    parts = []
    for doc in (doc_a, doc_b):
        sentences = split_sentences(doc)
        if not sentences:
            raise MetricError(f"document has no sentences: {doc!r}")
        parts.append((normalize_rows(provider.embed_texts(sentences)), sentence_weights(sentences, tokenizer)))
    (emb_a, w_a), (emb_b, w_b) = parts
    return _sms_from_parts(emb_a, w_a, emb_b, w_b)


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> PRF:
    """Clipped n-gram overlap; sequences shorter than n score zero"""
    if n < 1:
        raise MetricError(f"ROUGE order must be >= 1, got {n}")
    if len(candidate) < n or len(reference) < n:
        return PRF(0.0, 0.0, 0.0)
    cand = Counter(ngrams(candidate, n))
    ref = Counter(ngrams(reference, n))
    match = sum(min(count, ref[gram]) for gram, count in cand.items())
    precision = match / (len(candidate) - n + 1)
    recall = match / (len(reference) - n + 1)
    return PRF(precision, recall, harmonic(precision, recall))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, start=1):
            current.append(previous[j - 1] + 1 if token == other else max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> PRF:
    length = lcs_length(candidate, reference)
    if length == 0:
        return PRF(0.0, 0.0, 0.0)
    precision = length / len(candidate)
    recall = length / len(reference)
    return PRF(precision, recall, harmonic(precision, recall))


def _longest_free_run(candidate: Sequence[str], reference: Sequence[str],
                      used_c: List[bool], used_r: List[bool]) -> Tuple[int, int, int]:
    """Longest run equal in both sequences and unaligned in both; earliest wins ties"""
    best = (0, 0, 0)
    previous = [0] * (len(reference) + 1)
    for i, token in enumerate(candidate):
        current = [0] * (len(reference) + 1)
        if not used_c[i]:
            for j, other in enumerate(reference):
                if token == other and not used_r[j]:
                    current[j + 1] = previous[j] + 1
                    if current[j + 1] > best[0]:
                        best = (current[j + 1], i - current[j + 1] + 1, j - current[j + 1] + 1)
        previous = current
    return best


def align_exact(candidate: Sequence[str], reference: Sequence[str]) -> List[Tuple[int, int]]:
    """
    Exact-match alignment as (candidate index, reference index) pairs

    Repeatedly takes the longest common run of unaligned tokens. Every token that can be matched
    is matched; chunk count is minimal up to the greedy run choice.
    """
    used_c = [False] * len(candidate)
    used_r = [False] * len(reference)
    pairs: List[Tuple[int, int]] = []
    while True:
        length, start_c, start_r = _longest_free_run(candidate, reference, used_c, used_r)
        if length == 0:
            break
        for offset in range(length):
            used_c[start_c + offset] = True
            used_r[start_r + offset] = True
            pairs.append((start_c + offset, start_r + offset))
    return sorted(pairs)


def count_chunks(pairs: Sequence[Tuple[int, int]]) -> int:
    chunks = 0
    last = None
    for i, j in pairs:
        if last is None or i != last[0] + 1 or j != last[1] + 1:
            chunks += 1
        last = (i, j)
    return chunks


def meteor(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """METEOR with exact matching only: Fmean = 10PR/(R+9P), penalty 0.5 * (chunks/matches)^3"""
    pairs = align_exact(candidate, reference)
    matches = len(pairs)
    if matches == 0:
        return 0.0
    precision = matches / len(candidate)
    recall = matches / len(reference)
    fmean = 10 * precision * recall / (recall + 9 * precision)
    penalty = 0.5 * (count_chunks(pairs) / matches) ** 3
    return fmean * (1.0 - penalty)


class _ReportView(NamedTuple):
    tokens: List[str]
    token_vectors: np.ndarray
    sentence_vectors: np.ndarray
    sentence_weights: np.ndarray


class _PairScore(NamedTuple):
    bert: PRF
    sms: float
    rouge1: float
    rouge2: float
    rougeL: float
    meteor: float


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


class _FidelityScorer:
    """Per-report caches shared by every pair a report takes part in"""

    def __init__(self, token_embeddings: EmbeddingSet, provider: EmbeddingProvider, tokenizer: TokenizerConfig):
        if token_embeddings.granularity != Granularity.TOKEN:
            raise MetricError("pairwise fidelity needs token-granularity embeddings")
        self.token_embeddings = token_embeddings
        self.provider = provider
        self.tokenizer = tokenizer
        self.unconverged = 0
        self._views: Dict[str, _ReportView] = {}

    def view(self, report: ClinicalReport) -> _ReportView:
        cached = self._views.get(report.id)
        if cached is None:
            sentences = split_sentences(report.text) or [report.text]
            cached = _ReportView(
                tokens=tokenize(report.text, self.tokenizer),
                token_vectors=self.token_embeddings.get(report.id),
                sentence_vectors=normalize_rows(self.provider.embed_texts(sentences)),
                sentence_weights=sentence_weights(sentences, self.tokenizer),
            )
            self._views[report.id] = cached
        return cached

    def pair(self, candidate: ClinicalReport, reference: ClinicalReport) -> _PairScore:
        c, r = self.view(candidate), self.view(reference)
        try:
            sms = _sms_from_parts(c.sentence_vectors, c.sentence_weights, r.sentence_vectors, r.sentence_weights)
        except ConvergenceError as e:
            logger.warning(f"SMS {candidate.id} vs {reference.id}: {e.message}; using last iterate")
            self.unconverged += 1
            sms = e.cost_total
        return _PairScore(
            bert=bertscore(c.token_vectors, r.token_vectors),
            sms=sms,
            rouge1=rouge_n(c.tokens, r.tokens, 1).f1,
            rouge2=rouge_n(c.tokens, r.tokens, 2).f1,
            rougeL=rouge_l(c.tokens, r.tokens).f1,
            meteor=meteor(c.tokens, r.tokens),
        )


def _aggregate(scores: Sequence[_PairScore], aggregation: PairingAggregation) -> _PairScore:
    if aggregation == PairingAggregation.MEAN:
        return _PairScore(
            bert=PRF(_mean([s.bert.precision for s in scores]), _mean([s.bert.recall for s in scores]),
                     _mean([s.bert.f1 for s in scores])),
            sms=_mean([s.sms for s in scores]),
            rouge1=_mean([s.rouge1 for s in scores]),
            rouge2=_mean([s.rouge2 for s in scores]),
            rougeL=_mean([s.rougeL for s in scores]),
            meteor=_mean([s.meteor for s in scores]),
        )
    # лучшее совпадение по каждой метрике; тройка BERTScore берется у эталона с максимальным F1
    best_bert = max(scores, key=lambda s: s.bert.f1).bert
    return _PairScore(
        bert=best_bert,
        sms=min(s.sms for s in scores),
        rouge1=max(s.rouge1 for s in scores),
        rouge2=max(s.rouge2 for s in scores),
        rougeL=max(s.rougeL for s in scores),
        meteor=max(s.meteor for s in scores),
    )


def reference_pool(report: ClinicalReport, real: Corpus, strategy: PairingStrategy,
                   few_shot_m: int = DEFAULT_M, few_shot_seed: int = 0) -> Optional[List[str]]:
    """Sorted real ids to score `report` against; None when its code has no real reports"""
    if strategy == PairingStrategy.ALL_REAL:
        return sorted(real.ids())
    if strategy == PairingStrategy.FEW_SHOT:
        code = report.codes[0]
        if code not in real.by_code:
            return None
        return sorted(example.id for example in sample_examples(real, code, few_shot_m, few_shot_seed))
    ids = {real_id for code in report.codes for real_id in real.by_code.get(code, ())}
    return sorted(ids) if ids else None


def corpus_fidelity(synthetic: Corpus, real: Corpus, embeddings: EmbeddingSet, token_embeddings: EmbeddingSet,
                    pairing: ReferencePairing, provider: EmbeddingProvider,
                    kernel: Optional[KernelParams] = None, tokenizer: TokenizerConfig = DEFAULT_TOKENIZER,
                    few_shot_m: int = DEFAULT_M, few_shot_seed: int = 0) -> FidelityScores:
    """
    Fidelity of one synthetic corpus against the real corpus

    Pairwise metrics are aggregated over each synthetic report's reference pool, then averaged
    over synthetic reports in id order. MMD is computed once on the two text embedding sets.
    The FEW_SHOT pool is re-derived with the generation seed and example count.
    """
    if len(synthetic) == 0 or len(real) == 0:
        raise MetricError("fidelity needs non-empty synthetic and real corpora")

    real_matrix = embeddings.matrix(sorted(real.ids()))
    synthetic_matrix = embeddings.matrix(sorted(synthetic.ids()))
    mmd_value = mmd(real_matrix, synthetic_matrix, kernel)

    scorer = _FidelityScorer(token_embeddings, provider, tokenizer)
    per_report: List[_PairScore] = []
    fallback = 0
    pool_cache: Dict[Tuple[str, ...], Optional[List[str]]] = {}
    for report in sorted(synthetic.reports, key=lambda r: r.id):
        key = report.codes
        if key not in pool_cache:
            pool_cache[key] = reference_pool(report, real, pairing.strategy, few_shot_m, few_shot_seed)
        pool = pool_cache[key]
        if pool is None:
            logger.warning(f"No real reports for {', '.join(report.codes)}; scoring {report.id} against all real reports")
            fallback += 1
            pool = sorted(real.ids())
        scores = [scorer.pair(report, real.get(real_id)) for real_id in pool]
        per_report.append(_aggregate(scores, pairing.aggregation))

    precision = _mean([s.bert.precision for s in per_report])
    recall = _mean([s.bert.recall for s in per_report])
    result = FidelityScores(
        mmd=mmd_value,
        bertscore_p=precision,
        bertscore_r=recall,
        bertscore_f1=harmonic(precision, recall),
        sms=_mean([s.sms for s in per_report]),
        rouge1=_mean([s.rouge1 for s in per_report]),
        rouge2=_mean([s.rouge2 for s in per_report]),
        rougeL=_mean([s.rougeL for s in per_report]),
        meteor=_mean([s.meteor for s in per_report]),
        fallback_count=fallback,
        sms_unconverged=scorer.unconverged,
    )
    logger.info(f"Fidelity over {len(per_report)} synthetic reports: MMD {result.mmd:.4f}, "
                f"BERTScore F1 {result.bertscore_f1:.4f}, SMS {result.sms:.4f}")
    return result
