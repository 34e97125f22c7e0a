class SynthAuditError(Exception):
    """Base error; `code` is the stable token printed by the CLI"""

    code = "ERROR"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        """Single-line machine-parsable form used on stderr"""
        text = " ".join(self.message.split())
        return f"error={self.code} {text}"


class ConfigError(SynthAuditError, ValueError):
    code = "CONFIG"


class CorpusError(SynthAuditError, ValueError):
    code = "CORPUS"


class PromptError(SynthAuditError, ValueError):
    code = "PROMPT"


class ExtractionError(SynthAuditError, ValueError):
    code = "EXTRACTION"


class GenerationError(SynthAuditError, RuntimeError):
    """Generation failure; per-code failures carry the attempt log"""

    code = "GENERATION"

    def __init__(self, message: str, attempts: int = 0, raw=None, example_ids=None):
        super().__init__(message)
        self.attempts = attempts
        self.raw = list(raw or [])
        self.example_ids = list(example_ids or [])


class EmbeddingError(SynthAuditError, ValueError):
    code = "EMBEDDING"


class MetricError(SynthAuditError, ValueError):
    code = "METRIC"


class ConvergenceError(MetricError):
    """Sinkhorn stopped at max_iter; the last iterate is kept for callers that can live with it"""

    code = "CONVERGENCE"

    def __init__(self, message: str, residual: float, plan=None, cost_total: float = float("nan"),
                 iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.plan = plan
        self.cost_total = cost_total
        self.iterations = iterations


class ProjectionError(SynthAuditError, RuntimeError):
    code = "PROJECTION"


class ReportError(SynthAuditError, ValueError):
    code = "REPORT"
