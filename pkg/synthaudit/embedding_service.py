import hashlib
import json
import logging
from abc import ABC, abstractmethod
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import httpx
import numpy as np

from .config import DEFAULT_EMBED_BATCH, DEFAULT_REQUEST_TIMEOUT, EmbeddingKind, EmbeddingProviderConfig, TokenizerConfig
from .corpus import ClinicalReport, Corpus
from .diversity import DEFAULT_TOKENIZER, tokenize
from .errors import EmbeddingError

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-6

Vectors = Union[np.ndarray, Sequence[float]]


class Granularity(str, Enum):
    TEXT = "text"
    TOKEN = "token"


def basis_vector(dim: int) -> np.ndarray:
    vector = np.zeros(dim)
    vector[0] = 1.0
    return vector


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """L2-normalize each row; all-zero rows become e_0"""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    norms = np.linalg.norm(matrix, axis=1)
    out = np.empty_like(matrix)
    zero = norms == 0.0
    out[~zero] = matrix[~zero] / norms[~zero, None]
    if zero.any():
        out[zero] = basis_vector(matrix.shape[1])
    return out


class EmbeddingSet:
    """Unit-norm vectors keyed by report id; token sets hold one (k, dim) array per id"""

    def __init__(self, dim: int, vectors: Mapping[str, np.ndarray], granularity: Granularity = Granularity.TEXT):
        self.dim = int(dim)
        self.granularity = Granularity(granularity)
        self._vectors: Dict[str, np.ndarray] = {}
        if vectors and self.dim < 2:
            raise EmbeddingError(f"embedding dim must be >= 2, got {dim}")

        for report_id, value in vectors.items():
            array = np.asarray(value, dtype=np.float64)
            if self.granularity == Granularity.TEXT:
                if array.ndim != 1:
                    raise EmbeddingError(f"text embedding for {report_id} must be a single vector")
                rows = array[None, :]
            else:
                if array.ndim != 2 or array.shape[0] == 0:
                    raise EmbeddingError(f"token embedding for {report_id} must be a non-empty list of vectors")
                rows = array
            if rows.shape[1] != self.dim:
                raise EmbeddingError(f"embedding for {report_id} has dim {rows.shape[1]}, expected {self.dim}")
            if not np.all(np.isfinite(rows)):
                raise EmbeddingError(f"embedding for {report_id} has non-finite components")
            norms = np.linalg.norm(rows, axis=1)
            if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
                raise EmbeddingError(f"embedding for {report_id} is not unit-norm")
            self._vectors[report_id] = array

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, report_id: str) -> bool:
        return report_id in self._vectors

    def __iter__(self) -> Iterator[str]:
        return iter(self._vectors)

    def __repr__(self) -> str:
        return f"EmbeddingSet(n={len(self)}, dim={self.dim}, granularity={self.granularity.value})"

    def ids(self) -> List[str]:
        return list(self._vectors)

    def items(self):
        return self._vectors.items()

    def get(self, report_id: str) -> np.ndarray:
        try:
            return self._vectors[report_id]
        except KeyError:
            raise EmbeddingError(f"no embedding for report id {report_id}") from None

    def matrix(self, ids: Optional[Sequence[str]] = None) -> np.ndarray:
        """Stack text vectors as rows, in `ids` order (default: insertion order)"""
        if self.granularity != Granularity.TEXT:
            raise EmbeddingError("matrix() needs a text-granularity set")
        ids = self.ids() if ids is None else ids
        if not ids:
            return np.zeros((0, self.dim))
        return np.vstack([self.get(i) for i in ids])

    def subset(self, ids: Iterable[str]) -> "EmbeddingSet":
        return EmbeddingSet(self.dim, {i: self.get(i) for i in ids}, self.granularity)


def merge_embedding_sets(sets: Sequence[EmbeddingSet]) -> EmbeddingSet:
    sets = [s for s in sets if len(s)]
    if not sets:
        return EmbeddingSet(0, {})
    dim, granularity = sets[0].dim, sets[0].granularity
    merged: Dict[str, np.ndarray] = {}
    for item in sets:
        if item.dim != dim or item.granularity != granularity:
            raise EmbeddingError(f"cannot merge embedding sets: dim {item.dim} vs {dim}")
        for report_id, vector in item.items():
            if report_id in merged:
                raise EmbeddingError(f"duplicate embedding id {report_id}")
            merged[report_id] = vector
    return EmbeddingSet(dim, merged, granularity)


def hash_bucket(token: str, dim: int, seed: int) -> Tuple[int, int]:
    """Bucket in [0, dim) and sign in {-1, +1} of one token"""
    digest = hashlib.blake2b(f"{seed}:{token}".encode("utf-8"), digest_size=8).digest()
    value = int.from_bytes(digest, "big")
    sign = -1 if value >> 63 else 1
    return value % dim, sign


def hash_embed(text: str, dim: int, seed: int, tokenizer: TokenizerConfig = DEFAULT_TOKENIZER) -> np.ndarray:
    """Signed feature-hashing bag of tokens, L2-normalized; no tokens (or full cancellation) gives e_0"""
    if dim < 2:
        raise EmbeddingError(f"hash embedding dim must be >= 2, got {dim}")
    vector = np.zeros(dim)
    for token in tokenize(text, tokenizer):
        bucket, sign = hash_bucket(token, dim, seed)
        vector[bucket] += sign
    return normalize_rows(vector)[0]


def cosine_distance(a: Vectors, b: Vectors) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EmbeddingError(f"dim mismatch: {a.shape} vs {b.shape}")
    if np.array_equal(a, b):
        return 0.0
    return float(np.clip(1.0 - np.dot(a, b), 0.0, 2.0))


def cosine_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise 1 - a_i . b_j for unit-norm rows, clipped to [0, 2]"""
    if a.shape[1] != b.shape[1]:
        raise EmbeddingError(f"dim mismatch: {a.shape[1]} vs {b.shape[1]}")
    return np.clip(1.0 - a @ b.T, 0.0, 2.0)


class EmbeddingProvider(ABC):
    name: str = "provider"

    @abstractmethod
    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        """Unit-norm row per text"""

    @abstractmethod
    def dimension(self) -> int:
        ...

    def embed_reports(self, reports: Sequence[ClinicalReport]) -> np.ndarray:
        return self.embed_texts([report.text for report in reports])

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()


class HashEmbeddingProvider(EmbeddingProvider):
    name = "hash"

    def __init__(self, dim: int, seed: int = 0, tokenizer: TokenizerConfig = DEFAULT_TOKENIZER):
        if dim < 2:
            raise EmbeddingError(f"hash embedding dim must be >= 2, got {dim}")
        self.dim = dim
        self.seed = seed
        self.tokenizer = tokenizer

    def dimension(self) -> int:
        return self.dim

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([hash_embed(text, self.dim, self.seed, self.tokenizer) for text in texts])


class HttpEmbeddingProvider(EmbeddingProvider):
    """Remote sentence embedder speaking POST /api/embed"""

    name = "http"

    def __init__(self, base_url: str, model: str, batch_size: int = DEFAULT_EMBED_BATCH,
                 timeout: float = DEFAULT_REQUEST_TIMEOUT,
                 transport: Optional[httpx.BaseTransport] = None):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.batch_size = batch_size
        self._dim: Optional[int] = None
        self._http_client = httpx.Client(base_url=self.base_url, timeout=timeout, transport=transport)
        logger.info(f"HttpEmbeddingProvider initialized for model {model} at {self.base_url}")

    def close(self) -> None:
        self._http_client.close()

    def dimension(self) -> int:
        if self._dim is None:
            self.embed_texts([""])
        return self._dim

    def _post_batch(self, batch: Sequence[str]) -> List[List[float]]:
        try:
            response = self._http_client.post("/api/embed", json={"model": self.model, "input": list(batch)})
            response.raise_for_status()
            embeddings = response.json()["embeddings"]
        except httpx.HTTPError as e:
            raise EmbeddingError(f"embedding request to {self.base_url} failed: {e}") from e
        except (ValueError, KeyError, TypeError) as e:
            raise EmbeddingError(f"malformed embedding response from {self.base_url}: {e}") from e
        if not isinstance(embeddings, list):
            raise EmbeddingError(f"malformed embedding response from {self.base_url}: embeddings is not a list")
        if len(embeddings) != len(batch):
            raise EmbeddingError(f"embedding endpoint returned {len(embeddings)} vectors for {len(batch)} inputs")
        return embeddings

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        rows: List[np.ndarray] = []
        for start in range(0, len(texts), self.batch_size):
            batch = texts[start:start + self.batch_size]
            for vector in self._post_batch(batch):
                array = np.asarray(vector, dtype=np.float64)
                if array.ndim != 1 or array.size < 2:
                    raise EmbeddingError(f"embedding endpoint returned a malformed vector of shape {array.shape}")
                if self._dim is None:
                    self._dim = array.size
                    logger.info(f"Model {self.model} reports dim {self._dim}")
                elif array.size != self._dim:
                    raise EmbeddingError(f"embedding endpoint returned dim {array.size}, expected {self._dim}")
                rows.append(array)
        if not rows:
            return np.zeros((0, self._dim or 0))
        return normalize_rows(np.vstack(rows))


class FileEmbeddingProvider(EmbeddingProvider):
    """Serves stored text vectors by report id"""

    name = "file"

    def __init__(self, paths: Sequence[Path]):
        if not paths:
            raise EmbeddingError("file embedding provider needs at least one path")
        self.paths = [Path(p) for p in paths]
        self._dim: Optional[int] = None
        self._vectors: Dict[str, np.ndarray] = {}
        for path in self.paths:
            stored = load_embeddings(path)
            if stored.granularity != Granularity.TEXT:
                raise EmbeddingError(f"{path}: file provider serves text embeddings only")
            if not len(stored):
                continue
            if self._dim is None:
                self._dim = stored.dim
            elif stored.dim != self._dim:
                raise EmbeddingError(f"{path}: embedding dim {stored.dim} does not match dim {self._dim} of {self.paths[0]}")
            for report_id, vector in stored.items():
                if report_id in self._vectors:
                    raise EmbeddingError(f"{path}: duplicate embedding id {report_id}")
                self._vectors[report_id] = vector

    def dimension(self) -> int:
        if self._dim is None:
            raise EmbeddingError("embedding files are empty")
        return self._dim

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        raise EmbeddingError("file embedding provider cannot embed free text; configure a hash or http provider")

    def embed_reports(self, reports: Sequence[ClinicalReport]) -> np.ndarray:
        missing = [r.id for r in reports if r.id not in self._vectors]
        if missing:
            raise EmbeddingError(f"no stored embedding for report id {missing[0]}"
                                 + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
        if not reports:
            return np.zeros((0, self.dimension()))
        return np.vstack([self._vectors[r.id] for r in reports])


def build_provider(config: EmbeddingProviderConfig, tokenizer: TokenizerConfig = DEFAULT_TOKENIZER,
                   transport: Optional[httpx.BaseTransport] = None,
                   extra_paths: Sequence[Path] = ()) -> EmbeddingProvider:
    if config.kind == EmbeddingKind.FILE:
        return FileEmbeddingProvider([config.path, *extra_paths])
    if config.kind == EmbeddingKind.HTTP:
        return HttpEmbeddingProvider(config.base_url, config.resolved_model, config.batch_size,
                                     config.request_timeout, transport=transport)
    return HashEmbeddingProvider(config.resolved_dim, config.resolved_seed, tokenizer)


def embed_corpus(provider: EmbeddingProvider, corpus: Corpus, granularity: Granularity = Granularity.TEXT,
                 tokenizer: TokenizerConfig = DEFAULT_TOKENIZER) -> EmbeddingSet:
    """
    Embed every report of a corpus

    Token sets embed each distinct token once through the provider; a report without tokens
    gets the single vector e_0.
    """
    reports = list(corpus.reports)
    if granularity == Granularity.TEXT:
        matrix = normalize_rows(provider.embed_reports(reports)) if reports else None
        if matrix is None:
            return EmbeddingSet(0, {})
        result = EmbeddingSet(matrix.shape[1], {r.id: row for r, row in zip(reports, matrix)})
        logger.info(f"Embedded {len(result)} reports with the {provider.name} provider (dim {result.dim})")
        return result

    streams = {r.id: tokenize(r.text, tokenizer) for r in reports}
    vocabulary = sorted({token for tokens in streams.values() for token in tokens})
    if vocabulary:
        table = normalize_rows(provider.embed_texts(vocabulary))
        dim = table.shape[1]
    else:
        table = None
        dim = provider.dimension()
    index = {token: i for i, token in enumerate(vocabulary)}

    vectors: Dict[str, np.ndarray] = {}
    for report_id, tokens in streams.items():
        if tokens:
            vectors[report_id] = table[[index[t] for t in tokens]]
        else:
            vectors[report_id] = basis_vector(dim)[None, :]
    logger.info(f"Embedded {len(vocabulary)} distinct tokens for {len(vectors)} reports")
    return EmbeddingSet(dim, vectors, Granularity.TOKEN)


def save_embeddings(embeddings: EmbeddingSet, path: Path) -> None:
    """One JSON record per line at float32 precision"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    key = "vector" if embeddings.granularity == Granularity.TEXT else "vectors"
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            for report_id, value in embeddings.items():
                record = {"id": report_id, key: value.astype(np.float32).tolist()}
                handle.write(json.dumps(record, ensure_ascii=False))
                handle.write("\n")
    except OSError as e:
        raise EmbeddingError(f"cannot write {path}: {e}") from e
    logger.info(f"Saved {len(embeddings)} embeddings to {path}")


def load_embeddings(path: Path) -> EmbeddingSet:
    """
    Read an embedding file

    Text records are {id, vector}, token records {id, vectors}; one file holds a single kind.
    An empty file loads as an empty text set.
    """
    path = Path(path)
    try:
        lines = path.read_bytes().splitlines()
    except OSError as e:
        raise EmbeddingError(f"cannot read {path}: {e}") from e

    granularity: Optional[Granularity] = None
    dim: Optional[int] = None
    vectors: Dict[str, np.ndarray] = {}
    for line_no, raw in enumerate(lines, start=1):
        try:
            line = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise EmbeddingError(f"{path}:{line_no}: malformed record: not valid UTF-8 ({e.reason})") from e
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            report_id = record["id"]
        except (ValueError, KeyError, TypeError) as e:
            raise EmbeddingError(f"{path}:{line_no}: malformed record: {e}") from e
        kind = Granularity.TEXT if "vector" in record else Granularity.TOKEN if "vectors" in record else None
        if kind is None or set(record) != {"id", "vector" if kind == Granularity.TEXT else "vectors"}:
            raise EmbeddingError(f"{path}:{line_no}: expected fields id and vector (or vectors)")
        if granularity is None:
            granularity = kind
        elif kind != granularity:
            raise EmbeddingError(f"{path}:{line_no}: mixed text and token records")

        try:
            array = np.asarray(record["vector" if kind == Granularity.TEXT else "vectors"], dtype=np.float64)
        except (ValueError, TypeError) as e:
            raise EmbeddingError(f"{path}:{line_no}: malformed vector: {e}") from e
        width = array.shape[-1] if array.ndim else 0
        if dim is None:
            dim = width
        elif width != dim:
            raise EmbeddingError(f"{path}:{line_no}: inconsistent dim {width}, expected {dim}")
        if report_id in vectors:
            raise EmbeddingError(f"{path}:{line_no}: duplicate id {report_id}")
        vectors[report_id] = array

    try:
        return EmbeddingSet(dim or 0, vectors, granularity or Granularity.TEXT)
    except EmbeddingError as e:
        raise EmbeddingError(f"{path}: {e.message}") from e
