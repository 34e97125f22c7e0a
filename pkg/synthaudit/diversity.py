"""Lexical diversity: tokenizer, BLEU / Self-BLEU, type-token ratio and frequent n-grams.

The tokenizer defined here is shared by every metric and by the hash embedding provider.
"""

import csv
import logging
import math
import re
from collections import Counter
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from nltk.translate.bleu_score import brevity_penalty, closest_ref_length, modified_precision
from nltk.util import ngrams as nltk_ngrams
from pydantic import BaseModel

from .config import DEFAULT_SELF_BLEU_ORDER, DiversityConfig, TokenizerConfig, TtrMode
from .corpus import Corpus
from .errors import MetricError

logger = logging.getLogger(__name__)

DEFAULT_TOKENIZER = TokenizerConfig()

# Буквы и цифры любого алфавита; "_" считается разделителем
_WORD = re.compile(r"[^\W_]+")
_WORD_OR_SYMBOL = re.compile(r"[^\W_]+|[^\w\s]")

Ngram = Tuple[str, ...]


class DiversityScores(BaseModel):
    self_bleu: Optional[float]
    ttr: float
    top_ngrams: List[Tuple[str, int]]


def tokenize(text: str, config: TokenizerConfig = DEFAULT_TOKENIZER) -> List[str]:
    if config.lowercase:
        text = text.lower()
    pattern = _WORD if config.strip_punctuation else _WORD_OR_SYMBOL
    return pattern.findall(text)


def ngrams(tokens: Sequence[str], n: int) -> List[Ngram]:
    if n < 1:
        raise MetricError(f"n-gram order must be >= 1, got {n}")
    return list(nltk_ngrams(tokens, n))


def bleu(candidate: Sequence[str], references: Sequence[Sequence[str]],
         max_n: int = DEFAULT_SELF_BLEU_ORDER, smoothing: bool = True) -> float:
    """
    Sentence BLEU with uniform weights

    Clipped precisions and brevity penalty come from nltk; add-one smoothing applies to
    zero-count orders n >= 2, and a zero unigram precision scores 0.
    """
    if max_n < 1:
        raise MetricError(f"max_n must be >= 1, got {max_n}")
    c = len(candidate)
    if c == 0 or not references:
        return 0.0

    log_sum = 0.0
    for n in range(1, max_n + 1):
        precision = modified_precision(references, candidate, n)
        if precision.numerator == 0:
            if n == 1 or not smoothing:
                return 0.0
            # пустой порядок: 1 / (число n-грамм кандидата + 1)
            log_sum += math.log(1.0 / (max(c - n + 1, 0) + 1))
        else:
            log_sum += math.log(float(precision))

    ref_length = closest_ref_length(references, c)
    return math.exp(log_sum / max_n) * brevity_penalty(ref_length, c)


def self_bleu(corpus: Corpus, max_n: int = DEFAULT_SELF_BLEU_ORDER,
              tokenizer: TokenizerConfig = DEFAULT_TOKENIZER, smoothing: bool = True) -> float:
    """Mean BLEU of every report against all the others, in id order"""
    if len(corpus) < 2:
        raise MetricError(f"Self-BLEU needs at least 2 reports, got {len(corpus)}")
    if max_n < 1:
        raise MetricError(f"max_n must be >= 1, got {max_n}")

    ordered = sorted(corpus.reports, key=lambda r: r.id)
    docs = [tokenize(report.text, tokenizer) for report in ordered]
    scores = [
        bleu(tokens, docs[:index] + docs[index + 1:], max_n, smoothing)
        for index, tokens in enumerate(docs)
    ]

    result = math.fsum(scores) / len(scores)
    logger.debug(f"Self-BLEU-{max_n} over {len(scores)} reports: {result:.4f}")
    return result


def ttr(corpus: Corpus, mode: TtrMode = TtrMode.PER_DOC,
        tokenizer: TokenizerConfig = DEFAULT_TOKENIZER) -> float:
    """
    Type-token ratio

    PER_DOC averages per-report ratios over reports with at least one token; CORPUS pools all tokens.
    """
    if len(corpus) == 0:
        raise MetricError("TTR of an empty corpus")

    streams = [tokenize(report.text, tokenizer) for report in sorted(corpus.reports, key=lambda r: r.id)]
    streams = [tokens for tokens in streams if tokens]
    if not streams:
        raise MetricError("TTR undefined: every report has an empty token stream")

    if TtrMode(mode) == TtrMode.CORPUS:
        pooled = [token for tokens in streams for token in tokens]
        return len(set(pooled)) / len(pooled)
    return math.fsum(len(set(tokens)) / len(tokens) for tokens in streams) / len(streams)


def top_ngrams(corpus: Corpus, n: int, k: int,
               tokenizer: TokenizerConfig = DEFAULT_TOKENIZER) -> List[Tuple[str, int]]:
    """k most frequent n-grams, count descending then lexicographic; n-grams never span reports"""
    if n < 1 or k < 1:
        raise MetricError(f"top_ngrams needs n >= 1 and k >= 1, got n={n}, k={k}")

    counts: Counter = Counter()
    for report in corpus.reports:
        counts.update(" ".join(gram) for gram in ngrams(tokenize(report.text, tokenizer), n))
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return ranked[:k]


def export_top_ngrams(rows: Sequence[Tuple[str, int]], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
        writer.writerow(["ngram", "count"])
        writer.writerows(rows)
    logger.info(f"Wrote {len(rows)} n-grams to {path}")


def diversity_scores(corpus: Corpus, config: Optional[DiversityConfig] = None,
                     tokenizer: TokenizerConfig = DEFAULT_TOKENIZER) -> DiversityScores:
    config = config or DiversityConfig()
    if len(corpus) < 2:
        # Self-BLEU не определен, остальные метрики считаем
        logger.warning(f"Self-BLEU skipped: {len(corpus)} report(s), need at least 2")
        self_bleu_value = None
    else:
        self_bleu_value = self_bleu(corpus, config.self_bleu_max_n, tokenizer)
    return DiversityScores(
        self_bleu=self_bleu_value,
        ttr=ttr(corpus, config.ttr_mode, tokenizer),
        top_ngrams=top_ngrams(corpus, config.ngram_n, config.ngram_k, tokenizer),
    )
