import json
import logging
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .config import read_yaml
from .errors import ConfigError, CorpusError

logger = logging.getLogger(__name__)

RECORD_FIELDS = ("id", "text", "codes", "source", "generator")


def normalize_code(code: str) -> str:
    """Trim and uppercase a diagnostic code; rejects empty or whitespace-containing codes"""
    if not isinstance(code, str):
        raise ValueError(f"code must be text, got {type(code).__name__}")
    normalized = code.strip().upper()
    if not normalized:
        raise ValueError("code is empty")
    if any(ch.isspace() for ch in normalized):
        raise ValueError(f"code '{normalized}' contains whitespace")
    return normalized


class IcdCode(BaseModel):
    model_config = ConfigDict(frozen=True)

    code: str
    name: Optional[str] = None

    @field_validator("code", mode="before")
    @classmethod
    def _normalize(cls, value):
        return normalize_code(value)


CodeLike = Union[str, IcdCode]


def _code_of(code: CodeLike) -> str:
    return code.code if isinstance(code, IcdCode) else normalize_code(code)


class ReportSource(str, Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


class ClinicalReport(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str
    text: str
    codes: Tuple[str, ...]
    source: ReportSource
    generator: Optional[str] = None

    @field_validator("id")
    @classmethod
    def _id_present(cls, value: str) -> str:
        if not value:
            raise ValueError("empty id")
        return value

    @field_validator("text")
    @classmethod
    def _text_present(cls, value: str) -> str:
        if len(value) < 1:
            raise ValueError("empty text")
        return value

    @field_validator("codes", mode="before")
    @classmethod
    def _codes(cls, value):
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"codes must be a list, got {type(value).__name__}")
        if not value:
            raise ValueError("empty codes")
        normalized = tuple(_code_of(code) for code in value)
        if len(set(normalized)) != len(normalized):
            raise ValueError(f"duplicate codes {list(normalized)}")
        return normalized

    @model_validator(mode="after")
    def _provenance(self) -> "ClinicalReport":
        if self.source == ReportSource.SYNTHETIC and not self.generator:
            raise ValueError("synthetic report needs a generator")
        if self.source == ReportSource.REAL and self.generator is not None:
            raise ValueError("real report must not carry a generator")
        return self

    def to_record(self) -> Dict[str, object]:
        return {
            "id": self.id,
            "text": self.text,
            "codes": list(self.codes),
            "source": self.source.value,
            "generator": self.generator,
        }


class Corpus:
    """Immutable, id-indexed report collection with a code -> ids index"""

    def __init__(self, reports: Iterable[ClinicalReport] = ()):
        self._reports: Tuple[ClinicalReport, ...] = tuple(reports)
        by_id: Dict[str, ClinicalReport] = {}
        by_code: Dict[str, List[str]] = {}
        for report in self._reports:
            if report.id in by_id:
                raise CorpusError(f"duplicate id '{report.id}'")
            by_id[report.id] = report
            for code in report.codes:
                by_code.setdefault(code, []).append(report.id)
        self._by_id = by_id
        self._by_code = {code: tuple(ids) for code, ids in by_code.items()}

    @property
    def reports(self) -> Tuple[ClinicalReport, ...]:
        return self._reports

    @property
    def by_code(self) -> Mapping[str, Tuple[str, ...]]:
        return MappingProxyType(self._by_code)

    @property
    def report_count(self) -> int:
        return len(self._reports)

    def __len__(self) -> int:
        return len(self._reports)

    def __iter__(self) -> Iterator[ClinicalReport]:
        return iter(self._reports)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return self._reports == other._reports

    def __repr__(self) -> str:
        return f"Corpus(report_count={self.report_count}, codes={len(self._by_code)})"

    def get(self, report_id: str) -> Optional[ClinicalReport]:
        return self._by_id.get(report_id)

    def ids(self) -> List[str]:
        return [report.id for report in self._reports]

    def codes(self) -> List[str]:
        return sorted(self._by_code)

    def generators(self) -> List[str]:
        return sorted({report.generator for report in self._reports if report.generator})

    def by_generator(self, generator: str) -> "Corpus":
        return Corpus(r for r in self._reports if r.generator == generator)


class CorpusStats(BaseModel):
    report_count: int
    mean_chars: float
    min_chars: int
    max_chars: int
    code_histogram: Dict[str, int]


def load_corpus(path: Path, expected_source: Optional[ReportSource] = None) -> Corpus:
    """
    Load a line-delimited corpus file

    Args:
        path: JSON-lines file, one report per line
        expected_source: If given, every record must carry this source

    Returns:
        Corpus: validated, indexed corpus
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"{path}: no such file")

    reports: List[ClinicalReport] = []
    seen: Dict[str, int] = {}
    with open(path, "rb") as handle:
        for line_number, raw in enumerate(handle, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise CorpusError(f"{path}:{line_number}: malformed line: not valid UTF-8 ({e.reason})") from e
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{line_number}: malformed line: {e.msg}") from e
            if not isinstance(record, dict):
                raise CorpusError(f"{path}:{line_number}: malformed line: expected an object")
            keys = set(record)
            if keys != set(RECORD_FIELDS):
                missing = sorted(set(RECORD_FIELDS) - keys)
                extra = sorted(keys - set(RECORD_FIELDS))
                raise CorpusError(
                    f"{path}:{line_number}: malformed line: missing fields {missing}, unexpected fields {extra}"
                )
            try:
                report = ClinicalReport.model_validate(record)
            except ValidationError as e:
                raise CorpusError(f"{path}:{line_number}: {e.errors()[0]['msg']}") from e
            if report.id in seen:
                raise CorpusError(
                    f"{path}:{line_number}: duplicate id '{report.id}' (first seen on line {seen[report.id]})"
                )
            seen[report.id] = line_number
            if expected_source is not None and report.source != expected_source:
                raise CorpusError(
                    f"{path}:{line_number}: source mismatch: expected {expected_source.value}, got {report.source.value}"
                )
            reports.append(report)

    corpus = Corpus(reports)
    logger.info(f"Loaded {corpus.report_count} reports ({len(corpus.by_code)} codes) from {path}")
    return corpus


def save_corpus(corpus: Corpus, path: Path) -> None:
    """Write one JSON object per line; newlines inside texts are JSON-escaped"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            for report in corpus.reports:
                handle.write(json.dumps(report.to_record(), ensure_ascii=False))
                handle.write("\n")
    except OSError as e:
        raise CorpusError(f"cannot write {path}: {e}") from e
    logger.info(f"Saved {corpus.report_count} reports to {path}")


def concat_corpora(corpora: Iterable[Corpus]) -> Corpus:
    return Corpus(report for corpus in corpora for report in corpus.reports)


def corpus_stats(corpus: Corpus) -> CorpusStats:
    """Character statistics count Unicode code points, not bytes"""
    if corpus.report_count == 0:
        raise CorpusError("cannot compute statistics of an empty corpus")
    lengths = [len(report.text) for report in corpus.reports]
    histogram = {code: len(ids) for code, ids in sorted(corpus.by_code.items())}
    return CorpusStats(
        report_count=corpus.report_count,
        mean_chars=sum(lengths) / len(lengths),
        min_chars=min(lengths),
        max_chars=max(lengths),
        code_histogram=histogram,
    )


def save_stats(stats: CorpusStats, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(stats.model_dump_json(indent=2) + "\n", encoding="utf-8")


def filter_by_code(corpus: Corpus, code: CodeLike) -> Corpus:
    target = _code_of(code)
    ids = set(corpus.by_code.get(target, ()))
    return Corpus(r for r in corpus.reports if r.id in ids)


def sample_examples(corpus: Corpus, code: CodeLike, m: int, seed: int) -> List[ClinicalReport]:
    """
    Seeded uniform draw of few-shot examples for one code

    Draws min(m, available) distinct reports without replacement; candidates keep corpus order,
    so the draw is reproducible for a fixed corpus order and seed.
    """
    target = _code_of(code)
    candidate_ids = corpus.by_code.get(target, ())
    if not candidate_ids:
        raise CorpusError(f"no reports for code {target}")
    if m < 1:
        raise CorpusError(f"m must be >= 1, got {m}")

    size = min(m, len(candidate_ids))
    if size < m:
        logger.warning(f"Only {size} reports available for code {target}; using {size} of {m} requested examples")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidate_ids), size=size, replace=False)
    return [corpus.get(candidate_ids[int(i)]) for i in picks]


def load_code_names(path: Path) -> Dict[str, str]:
    """Read the YAML code -> description map"""
    data = read_yaml(Path(path))
    names: Dict[str, str] = {}
    for code, name in data.items():
        try:
            key = normalize_code(str(code))
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(name, str) or not name.strip():
            raise ConfigError(f"{path}: code {key} has no name")
        names[key] = name.strip()
    return names
