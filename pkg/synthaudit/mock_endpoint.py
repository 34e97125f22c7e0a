"""Deterministic offline stand-in for an Ollama-style chat and embedding server."""

import hashlib
import json
import logging
import re
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Union

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .embedding_service import hash_embed

logger = logging.getLogger(__name__)

MOCK_EMBED_DIM = 384
MOCK_CREATED_AT = "1970-01-01T00:00:00Z"

_TASK = re.compile(r"exactamente (\d+) diagnosticos.*?etiqueta (\S+?)-", re.DOTALL)

_WORDS = [
    "animo", "bajo", "insomnio", "ansiedad", "leve", "moderado", "persistente", "episodio", "tristeza",
    "fatiga", "irritabilidad", "apetito", "disminuido", "concentracion", "alterada", "pensamiento",
    "lento", "inquietud", "tension", "preocupacion", "recurrente", "sueno", "fragmentado", "afecto",
    "plano", "juicio", "conservado", "orientado", "colaborador", "discurso", "coherente",
]


class ChatMessage(BaseModel):
    role: str
    content: str


class ChatRequest(BaseModel):
    model: str
    messages: List[ChatMessage]
    stream: bool = False
    options: Optional[Dict[str, Any]] = None


class EmbedRequest(BaseModel):
    model: str
    input: Union[str, List[str]]


def _placeholder_text(model: str, code: str, case: int) -> str:
    digest = hashlib.sha256(f"{model}|{code}|{case}".encode("utf-8")).digest()
    words = [_WORDS[b % len(_WORDS)] for b in digest[:6]]
    return f"{words[0].capitalize()} {' '.join(words[1:3])}, {' '.join(words[3:])}."


def mock_generation(model: str, code: str, n: int) -> str:
    """Shape-(a) JSON wrapped in conversational text"""
    cases = {f"caso {k}": {f"[{code}]": _placeholder_text(model, code, k)} for k in range(1, n + 1)}
    return f"Claro, aqui tienes los diagnosticos:\n{json.dumps(cases, ensure_ascii=False, indent=2)}\nEspero que sirva."


def create_mock_app(fail_codes: Iterable[str] = ()) -> FastAPI:
    """Build the mock app; codes in `fail_codes` always get an answer without JSON"""
    failing: FrozenSet[str] = frozenset(code.upper() for code in fail_codes)
    app = FastAPI(title="synthaudit mock endpoint")

    @app.post("/api/chat")
    async def chat(request: ChatRequest):
        user = next((m.content for m in reversed(request.messages) if m.role == "user"), None)
        if user is None:
            raise HTTPException(status_code=400, detail="no user message")
        match = _TASK.search(user)
        n, code = (int(match.group(1)), match.group(2)) if match else (10, "UNKNOWN")
        if code.upper() in failing:
            content = "Lo siento, no puedo ayudar con eso."
        else:
            content = mock_generation(request.model, code, n)
        logger.debug(f"Mock chat for {request.model}: code {code}, n={n}")
        return {
            "model": request.model,
            "created_at": MOCK_CREATED_AT,
            "message": {"role": "assistant", "content": content},
            "done": True,
        }

    @app.post("/api/embed")
    async def embed(request: EmbedRequest):
        texts = [request.input] if isinstance(request.input, str) else request.input
        vectors = [hash_embed(text, MOCK_EMBED_DIM, 0).tolist() for text in texts]
        return {"model": request.model, "embeddings": vectors}

    @app.get("/health")
    async def health_check():
        """Health check endpoint"""
        return {"status": "healthy"}

    return app


app = create_mock_app()


if __name__ == "__main__":
    import uvicorn

    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=logging.INFO
    )
    uvicorn.run("synthaudit.mock_endpoint:app", host="0.0.0.0", port=11434)
