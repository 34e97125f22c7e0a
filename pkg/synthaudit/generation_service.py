import asyncio
import hashlib
import json
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence

import httpx
from pydantic import BaseModel

from .config import GenerationConfig
from .corpus import ClinicalReport, Corpus, IcdCode, ReportSource
from .errors import ConfigError, CorpusError, ExtractionError, GenerationError, SynthAuditError
from .promptkit import PromptBundle, PromptTemplateSet, build_prompt

logger = logging.getLogger(__name__)

CHAT_PATH = "/api/chat"
LIST_KEY = "diagnosticos"


class RawGeneration(BaseModel):
    code: IcdCode
    model: str
    raw_text: str
    extracted_json: Optional[str] = None
    attempt: int
    error: Optional[str] = None


class CodeYield(BaseModel):
    """Per-code outcome of one pipeline run"""
    code: str
    requested: int
    produced: int = 0
    attempts: int = 0
    example_ids: List[str] = []
    error: Optional[str] = None


class CodeOutcome(NamedTuple):
    reports: List[ClinicalReport]
    code_yield: CodeYield
    raw: List[RawGeneration]


class PipelineResult(NamedTuple):
    corpus: Corpus
    yields: List[CodeYield]
    raw: List[RawGeneration]


def model_slug(model: str) -> str:
    """File-name-safe form of a model identifier"""
    slug = re.sub(r"[^A-Za-z0-9._-]+", "-", model).strip("-.")
    return slug or "model"


def synthetic_report_id(model: str, code: str, ordinal: int, text: str) -> str:
    payload = json.dumps([model, code, ordinal, text], ensure_ascii=False)
    return "syn-" + hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def extract_json_block(raw: str) -> str:
    """
    First brace-balanced {...} block of a model response

    Braces inside JSON string literals (including escaped quotes) do not count.
    """
    start = raw.find("{")
    if start < 0:
        raise ExtractionError("no opening brace")

    depth = 0
    in_string = False
    escaped = False
    for index in range(start, len(raw)):
        char = raw[index]
        if in_string:
            if escaped:
                escaped = False
            elif char == "\\":
                escaped = True
            elif char == '"':
                in_string = False
        elif char == '"':
            in_string = True
        elif char == "{":
            depth += 1
        elif char == "}":
            depth -= 1
            if depth == 0:
                return raw[start:index + 1]
    raise ExtractionError("unbalanced braces")


def _diagnosis_texts(payload: Mapping[str, Any]) -> List[str]:
    if LIST_KEY in payload:
        items = payload[LIST_KEY]
        if not isinstance(items, list):
            raise ExtractionError(f"'{LIST_KEY}' must be a list")
        return items

    texts: List[Any] = []
    for key, case in payload.items():
        if isinstance(case, dict):
            texts.extend(case.values())
        elif isinstance(case, str):
            texts.append(case)
        else:
            logger.debug(f"Ignoring non-case entry {key!r} in generation")
    return texts


def parse_generation(json_text: str, code: IcdCode, model: str) -> List[ClinicalReport]:
    """
    Turn an extracted response into synthetic reports

    Accepts {"caso k": {"[codes]": "text"}} and {"diagnosticos": ["text", ...]}; every diagnosis is
    labeled with the target code alone.
    """
    try:
        payload = json.loads(json_text)
    except ValueError as e:
        raise ExtractionError(f"malformed object: {e}") from e
    if not isinstance(payload, dict):
        raise ExtractionError("malformed object: top level is not an object")

    reports: List[ClinicalReport] = []
    for ordinal, text in enumerate(_diagnosis_texts(payload), start=1):
        if not isinstance(text, str):
            raise ExtractionError(f"diagnosis {ordinal} is not text")
        text = text.strip()
        if not text:
            raise ExtractionError(f"empty diagnosis text at position {ordinal}")
        reports.append(ClinicalReport(
            id=synthetic_report_id(model, code.code, ordinal, text),
            text=text,
            codes=(code.code,),
            source=ReportSource.SYNTHETIC,
            generator=model,
        ))
    if not reports:
        raise ExtractionError("zero diagnoses extracted")
    return reports


class GenerationService:
    """Few-shot generation against an Ollama-style chat endpoint"""

    def __init__(self, config: GenerationConfig, templates: Optional[PromptTemplateSet] = None,
                 transport: Optional[httpx.AsyncBaseTransport] = None):
        if not config.model:
            raise ConfigError("generation.model is not set")
        self.config = config
        self.templates = templates or PromptTemplateSet()
        self._http_client = httpx.AsyncClient(
            base_url=config.base_url.rstrip("/"),
            timeout=config.request_timeout,
            transport=transport,
        )
        logger.info(f"GenerationService initialized for model {config.model} at {config.base_url}")

    async def stop(self) -> None:
        await self._http_client.aclose()
        logger.info("Generation service stopped")

    async def __aenter__(self):
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        await self.stop()

    def _request_body(self, bundle: PromptBundle) -> Dict[str, Any]:
        body: Dict[str, Any] = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": bundle.system},
                {"role": "user", "content": bundle.user},
            ],
            "stream": False,
        }
        if self.config.options:
            body["options"] = dict(self.config.options)
        return body

    async def chat(self, bundle: PromptBundle) -> str:
        """Post one chat request and return message.content"""
        try:
            response = await self._http_client.post(CHAT_PATH, json=self._request_body(bundle))
            response.raise_for_status()
            data = response.json()
        except httpx.HTTPStatusError as e:
            raise GenerationError(f"chat endpoint returned HTTP {e.response.status_code}") from e
        except httpx.HTTPError as e:
            raise GenerationError(f"chat endpoint unreachable: {e!r}") from e
        except ValueError as e:
            raise GenerationError(f"chat endpoint returned invalid JSON: {e}") from e

        message = data.get("message") if isinstance(data, dict) else None
        content = message.get("content") if isinstance(message, dict) else None
        if not isinstance(content, str):
            raise GenerationError("chat response has no message.content")
        return content

    async def generate_code(self, corpus: Corpus, code: IcdCode) -> CodeOutcome:
        """
        Generate up to n reports for one code, retrying with the identical prompt

        Raises:
            GenerationError: every attempt failed
        """
        config = self.config
        bundle = build_prompt(self.templates, corpus, code, config.m, config.n, config.seed)
        attempts = 1 + config.max_retries
        raw_log: List[RawGeneration] = []
        last_error: Optional[SynthAuditError] = None

        for attempt in range(1, attempts + 1):
            raw_text = ""
            block = None
            try:
                raw_text = await self.chat(bundle)
                block = extract_json_block(raw_text)
                reports = parse_generation(block, code, config.model)
            except (GenerationError, ExtractionError) as e:
                last_error = e
                raw_log.append(RawGeneration(code=code, model=config.model, raw_text=raw_text,
                                             extracted_json=block, attempt=attempt, error=e.one_line()))
                logger.warning(f"Attempt {attempt}/{attempts} for {code.code} failed: {e.message}")
                continue

            raw_log.append(RawGeneration(code=code, model=config.model, raw_text=raw_text,
                                         extracted_json=block, attempt=attempt))
            if len(reports) > config.n:
                logger.warning(f"{code.code}: model returned {len(reports)} cases, keeping the first {config.n}")
                reports = reports[:config.n]
            elif len(reports) < config.n:
                logger.warning(f"{code.code}: partial yield {len(reports)}/{config.n}")
            logger.info(f"Generated {len(reports)} cases for code {code.code}")
            code_yield = CodeYield(code=code.code, requested=config.n, produced=len(reports), attempts=attempt,
                                   example_ids=list(bundle.example_ids))
            return CodeOutcome(reports, code_yield, raw_log)

        raise GenerationError(f"code {code.code}: all {attempts} attempts failed; last error: {last_error.message}",
                              attempts=attempts, raw=raw_log, example_ids=bundle.example_ids)

    async def generate_for_code(self, corpus: Corpus, code: IcdCode) -> List[ClinicalReport]:
        return (await self.generate_code(corpus, code)).reports

    async def run_pipeline(self, real_corpus: Corpus, code_names: Mapping[str, str]) -> PipelineResult:
        """
        Generate for every code of the real corpus with at most `parallelism` requests in flight

        Failed codes are logged and skipped; output is ordered by (code, ordinal).
        """
        if len(real_corpus) == 0:
            raise CorpusError("real corpus is empty")

        semaphore = asyncio.Semaphore(self.config.parallelism)
        codes = real_corpus.codes()

        async def bounded(code: str) -> CodeOutcome:
            async with semaphore:
                return await self.generate_code(real_corpus, IcdCode(code=code, name=code_names.get(code)))

        results = await asyncio.gather(*(bounded(code) for code in codes), return_exceptions=True)

        reports: List[ClinicalReport] = []
        yields: List[CodeYield] = []
        raw: List[RawGeneration] = []
        for code, result in zip(codes, results):
            if isinstance(result, SynthAuditError):
                logger.error(f"Skipping code {code}: {result.message}")
                failure = result if isinstance(result, GenerationError) else GenerationError(result.message)
                yields.append(CodeYield(code=code, requested=self.config.n, attempts=failure.attempts,
                                        example_ids=failure.example_ids, error=result.one_line()))
                raw.extend(failure.raw)
                continue
            if isinstance(result, BaseException):
                raise result
            reports.extend(result.reports)
            yields.append(result.code_yield)
            raw.extend(result.raw)

        if not reports:
            raise GenerationError(f"generation failed for every code ({len(codes)} codes)")
        failed = sum(1 for y in yields if y.error)
        logger.info(f"Pipeline for {self.config.model}: {len(reports)} reports, {failed}/{len(codes)} codes failed")
        return PipelineResult(Corpus(reports), yields, raw)


async def generate_for_code(config: GenerationConfig, templates: PromptTemplateSet, corpus: Corpus, code: IcdCode,
                            transport: Optional[httpx.AsyncBaseTransport] = None) -> List[ClinicalReport]:
    async with GenerationService(config, templates, transport) as service:
        return await service.generate_for_code(corpus, code)


async def run_pipeline(config: GenerationConfig, templates: PromptTemplateSet, real_corpus: Corpus,
                       code_names: Mapping[str, str],
                       transport: Optional[httpx.AsyncBaseTransport] = None) -> PipelineResult:
    async with GenerationService(config, templates, transport) as service:
        return await service.run_pipeline(real_corpus, code_names)


def save_yields(yields: Sequence[CodeYield], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for item in yields:
            handle.write(item.model_dump_json() + "\n")


def load_yields(path: Path) -> List[CodeYield]:
    path = Path(path)
    return [CodeYield.model_validate_json(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def save_raw_generations(raw: Sequence[RawGeneration], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for item in raw:
            handle.write(json.dumps(item.model_dump(mode="json"), ensure_ascii=False) + "\n")
