import hashlib
import json
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

# Цикл генерации
DEFAULT_M: int = 10  # примеров в промпте
DEFAULT_N: int = 10  # диагнозов на один запрос
DEFAULT_MAX_RETRIES: int = 3
DEFAULT_PARALLELISM: int = 2
DEFAULT_REQUEST_TIMEOUT: float = 120.0
DEFAULT_BASE_URL: str = "http://localhost:11434"  # Ollama-совместимый сервер
BASE_URL_ENV: str = "SYNTHAUDIT_BASE_URL"

# Embeddings
DEFAULT_EMBEDDING_MODEL: str = "all-MiniLM-L6-v2"
DEFAULT_HASH_DIM: int = 256
DEFAULT_EMBED_BATCH: int = 64

# Приватность
DEFAULT_PLAGIARISM_THRESHOLD: float = 0.05

# Sentence mover's distance
SMS_EPSILON: float = 0.01
SMS_TOL: float = 1e-9
SMS_MAX_ITER: int = 10000

# Diversity
DEFAULT_SELF_BLEU_ORDER: int = 4
DEFAULT_TOP_NGRAM_N: int = 2
DEFAULT_TOP_NGRAM_K: int = 20

# t-SNE, параметры из исходной публикации t-SNE
TSNE_EXAGGERATION_ITERATIONS: int = 250
TSNE_INITIAL_MOMENTUM: float = 0.5
TSNE_FINAL_MOMENTUM: float = 0.8
TSNE_INIT_STD: float = 1e-4
TSNE_MIN_GAIN: float = 0.01
# предел смещения одной точки за итерацию
TSNE_MAX_STEP: float = 1.0
# learning_rate="auto": max(N / early_exaggeration / 4, 50)
TSNE_AUTO_LR_FLOOR: float = 50.0


class GenerationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_url: str = DEFAULT_BASE_URL
    model: Optional[str] = None
    m: int = Field(DEFAULT_M, ge=1)
    n: int = Field(DEFAULT_N, ge=1)
    max_retries: int = Field(DEFAULT_MAX_RETRIES, ge=0)
    parallelism: int = Field(DEFAULT_PARALLELISM, ge=1)
    request_timeout: float = Field(DEFAULT_REQUEST_TIMEOUT, gt=0)
    seed: int = 0
    # Передаются как "options" запроса; если пусто, действуют настройки сервера
    options: Dict[str, Any] = Field(default_factory=dict)


class EmbeddingKind(str, Enum):
    FILE = "file"
    HASH = "hash"
    HTTP = "http"


class EmbeddingProviderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: EmbeddingKind = EmbeddingKind.HASH
    path: Optional[Path] = None
    dim: Optional[int] = None
    hash_seed: Optional[int] = None
    base_url: Optional[str] = None
    model: Optional[str] = None
    batch_size: int = Field(DEFAULT_EMBED_BATCH, ge=1)
    request_timeout: float = Field(DEFAULT_REQUEST_TIMEOUT, gt=0)

    @model_validator(mode="after")
    def _one_kind(self) -> "EmbeddingProviderConfig":
        file_fields = self.path is not None
        hash_fields = self.dim is not None or self.hash_seed is not None
        http_fields = self.base_url is not None or self.model is not None
        populated = {
            EmbeddingKind.FILE: file_fields,
            EmbeddingKind.HASH: hash_fields,
            EmbeddingKind.HTTP: http_fields,
        }
        foreign = [kind.value for kind, present in populated.items() if present and kind != self.kind]
        if foreign:
            raise ValueError(f"embedding kind '{self.kind.value}' does not take fields of: {', '.join(foreign)}")
        if self.kind == EmbeddingKind.FILE and self.path is None:
            raise ValueError("file embedding provider needs 'path'")
        if self.kind == EmbeddingKind.HTTP and self.base_url is None:
            raise ValueError("http embedding provider needs 'base_url'")
        if self.dim is not None and self.dim < 2:
            raise ValueError("embedding dim must be >= 2")
        return self

    @property
    def resolved_dim(self) -> int:
        return self.dim if self.dim is not None else DEFAULT_HASH_DIM

    @property
    def resolved_seed(self) -> int:
        return self.hash_seed if self.hash_seed is not None else 0

    @property
    def resolved_model(self) -> str:
        return self.model or DEFAULT_EMBEDDING_MODEL


class PrivacyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    threshold: float = Field(DEFAULT_PLAGIARISM_THRESHOLD, gt=0.0, lt=2.0)


class KernelParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    bandwidth: Union[Literal["auto"], float] = "auto"

    @field_validator("bandwidth")
    @classmethod
    def _positive(cls, value):
        if value != "auto" and not value > 0:
            raise ValueError("kernel bandwidth must be > 0")
        return value


class PairingStrategy(str, Enum):
    SAME_CODE = "same-code"
    FEW_SHOT = "few-shot"
    ALL_REAL = "all"


class PairingAggregation(str, Enum):
    BEST_MATCH = "best-match"
    MEAN = "mean"


class ReferencePairing(BaseModel):
    model_config = ConfigDict(extra="forbid")

    strategy: PairingStrategy = PairingStrategy.SAME_CODE
    aggregation: PairingAggregation = PairingAggregation.BEST_MATCH


class TsneParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    perplexity: float = Field(30.0, ge=2.0)
    learning_rate: Union[Literal["auto"], float] = "auto"
    iterations: int = Field(1000, ge=TSNE_EXAGGERATION_ITERATIONS)
    early_exaggeration_factor: float = Field(12.0, gt=0)
    seed: int = 0

    @field_validator("learning_rate")
    @classmethod
    def _positive_rate(cls, value):
        if value != "auto" and not value > 0:
            raise ValueError("learning rate must be > 0")
        return value

    def resolved_learning_rate(self, n_points: int) -> float:
        if self.learning_rate != "auto":
            return float(self.learning_rate)
        return max(n_points / self.early_exaggeration_factor / 4.0, TSNE_AUTO_LR_FLOOR)


class TokenizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lowercase: bool = True
    strip_punctuation: bool = True


class TtrMode(str, Enum):
    PER_DOC = "per-doc"
    CORPUS = "corpus"


class DiversityConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    self_bleu_max_n: int = Field(DEFAULT_SELF_BLEU_ORDER, ge=1)
    ttr_mode: TtrMode = TtrMode.PER_DOC
    ngram_n: int = Field(DEFAULT_TOP_NGRAM_N, ge=1)
    ngram_k: int = Field(DEFAULT_TOP_NGRAM_K, ge=1)


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    real: Optional[Path] = None
    synthetic: List[Path] = Field(default_factory=list)
    embeddings: List[Path] = Field(default_factory=list)
    out: Path = Path("out")
    templates: Optional[Path] = None
    code_names: Optional[Path] = None

    @field_validator("synthetic", "embeddings", mode="before")
    @classmethod
    def _listify(cls, value):
        if value is None:
            return []
        if isinstance(value, (str, Path)):
            return [value]
        return value


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    generation: GenerationConfig = Field(default_factory=GenerationConfig)
    embedding: EmbeddingProviderConfig = Field(default_factory=EmbeddingProviderConfig)
    privacy: PrivacyConfig = Field(default_factory=PrivacyConfig)
    kernel: KernelParams = Field(default_factory=KernelParams)
    pairing: ReferencePairing = Field(default_factory=ReferencePairing)
    tsne: TsneParams = Field(default_factory=TsneParams)
    tokenizer: TokenizerConfig = Field(default_factory=TokenizerConfig)
    diversity: DiversityConfig = Field(default_factory=DiversityConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)


def _deep_merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _deep_merge(dict(merged[key]), value)
        else:
            merged[key] = value
    return merged


def read_yaml(path: Path) -> Dict[str, Any]:
    """Read a YAML mapping; an empty document is an empty mapping"""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return data


def load_run_config(path: Optional[Path] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Build the run configuration

    Precedence: environment > flag overrides > config file > defaults.

    Args:
        path: Optional YAML config file
        overrides: Nested mapping of flag values (only set flags)

    Returns:
        RunConfig: validated configuration
    """
    load_dotenv()

    data: Dict[str, Any] = read_yaml(path) if path else {}
    if overrides:
        data = _deep_merge(data, overrides)

    base_url = os.getenv(BASE_URL_ENV)
    if base_url:
        logger.info(f"{BASE_URL_ENV} overrides generation.base_url")
        data = _deep_merge(data, {"generation": {"base_url": base_url}})

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        source = str(path) if path else "configuration"
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"{source}: {location}: {first['msg']}") from e


def config_fingerprint(config: RunConfig) -> str:
    """SHA-256 over the canonical JSON dump of the config"""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
