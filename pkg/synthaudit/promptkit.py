"""Few-shot prompt templates and rendering.

The defaults are the Spanish prompt listings used for diagnosis-conditioned generation,
kept in their printed ASCII form (no accents).
"""

import logging
import re
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .config import read_yaml
from .corpus import ClinicalReport, Corpus, IcdCode, sample_examples
from .errors import ConfigError, PromptError

logger = logging.getLogger(__name__)

SYSTEM_PROMPT = (
    "Eres un asistente medico especializado en generar diagnosticos clinicos breves en espanol.\n"
    "Devuelve unicamente un JSON **valido y cerrado correctamente** (todas las llaves deben estar balanceadas).\n"
    "No incluyas comillas triples ni texto adicional.\n"
    "\n"
    "El JSON debe tener esta estructura exacta: \n"
    "{\n"
    '    "diagnosticos": ["Diagnostico A", "Diagnostico B", ...]\n'
    "}"
)

START_PROMPT = "A continuacion tienes informacion sobre una etiqueta CIE-10 y ejemplos de diagnosticos asociados:"

EXAMPLE_PROMPT = (
    "- Codigos CIE-10 asociados al ejemplo: {code}\n"
    "- Nombre de la etiqueta: {code_name}\n"
    "- Diagnostico de ejemplo: {example}"
)

END_PROMPT = (
    "Tu tarea es generar exactamente {n} diagnosticos clinicos nuevos, distintos de los anteriores, "
    "que correspondan a la etiqueta {code}-{code_name}.\n"
    "\n"
    "Devuelve la respuesta como un JSON con esta estructura exacta:\n"
    "\n"
    "{\n"
    '  "caso 1": {\n'
    '      "[lista_codigos]":"Diagnostico 1"\n'
    "  },\n"
    '  "caso 2": {\n'
    '      "[lista_codigos]":"Diagnostico 2"\n'
    "  },\n"
    "  ...\n"
    "}\n"
    "\n"
    "Debe ser JSON valido, sin ningun texto adicional."
)

SEGMENT_SEPARATOR = "\n\n"
CODE_LIST_SEPARATOR = ", "

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

ALLOWED_PLACEHOLDERS: Dict[str, FrozenSet[str]] = {
    "system_prompt": frozenset(),
    "start_prompt": frozenset({"n", "code", "code_name"}),
    "example_prompt": frozenset({"code", "code_name", "example"}),
    "end_prompt": frozenset({"n", "code", "code_name"}),
}


class PromptTemplateSet(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    system_prompt: str = SYSTEM_PROMPT
    start_prompt: str = START_PROMPT
    example_prompt: str = EXAMPLE_PROMPT
    end_prompt: str = END_PROMPT

    @model_validator(mode="after")
    def _known_placeholders(self) -> "PromptTemplateSet":
        for field, allowed in ALLOWED_PLACEHOLDERS.items():
            names = set(_PLACEHOLDER.findall(getattr(self, field)))
            unknown = sorted(names - allowed)
            if unknown:
                raise ValueError(f"{field} uses placeholders without a substitution rule: {unknown}")
        return self


class PromptBundle(BaseModel):
    model_config = ConfigDict(frozen=True)

    system: str
    user: str
    code: IcdCode
    n: int
    example_ids: Tuple[str, ...] = ()


def _substitute(template: str, values: Mapping[str, str]) -> str:
    # один проход: подставленный текст повторно не сканируется
    return _PLACEHOLDER.sub(lambda match: values.get(match.group(1), match.group(0)), template)


def load_templates(path: Path) -> PromptTemplateSet:
    """Read a YAML override file; absent keys keep the defaults"""
    data = read_yaml(Path(path))
    try:
        return PromptTemplateSet.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e.errors()[0]['msg']}") from e


def render_system_prompt(templates: PromptTemplateSet) -> str:
    return templates.system_prompt


def render_user_prompt(templates: PromptTemplateSet, code: IcdCode,
                       examples: Sequence[ClinicalReport], n: int) -> str:
    """
    Render start, one block per example, then the task segment

    Example blocks show the example's own code list; the task segment names the target code.
    """
    if not examples:
        raise PromptError(f"no examples to render for code {code.code}")
    if n < 1:
        raise PromptError(f"n must be >= 1, got {n}")
    if not code.name:
        raise PromptError(f"missing code name for {code.code}")

    target = {"n": str(n), "code": code.code, "code_name": code.name}
    segments: List[str] = [_substitute(templates.start_prompt, target)]
    for example in examples:
        segments.append(_substitute(templates.example_prompt, {
            "code": CODE_LIST_SEPARATOR.join(example.codes),
            "code_name": code.name,
            "example": example.text,
        }))
    segments.append(_substitute(templates.end_prompt, target))
    return SEGMENT_SEPARATOR.join(segments)


def build_prompt(templates: PromptTemplateSet, corpus: Corpus, code: IcdCode,
                 m: int, n: int, seed: int) -> PromptBundle:
    examples = sample_examples(corpus, code, m, seed)
    user = render_user_prompt(templates, code, examples, n)
    logger.debug(f"Built prompt for {code.code} with {len(examples)} examples")
    return PromptBundle(
        system=render_system_prompt(templates),
        user=user,
        code=code,
        n=n,
        example_ids=tuple(example.id for example in examples),
    )
