import logging
from functools import lru_cache

from jinja2 import Environment, PackageLoader, StrictUndefined, TemplateError, select_autoescape

from .errors import ReportError

logger = logging.getLogger(__name__)


def markdown_cell(value) -> str:
    """Text safe inside a Markdown table cell"""
    return str(value).replace("\\", "\\\\").replace("|", "\\|").replace("\n", " ")


@lru_cache(maxsize=1)
def template_environment() -> Environment:
    """Jinja2 environment over the package's templates directory"""
    env = Environment(
        loader=PackageLoader("synthaudit", "templates"),
        undefined=StrictUndefined,
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
        autoescape=select_autoescape(enabled_extensions=("svg.j2",), default=False),
    )
    env.filters["fixed3"] = lambda value: f"{value:.3f}"
    env.filters["cell"] = markdown_cell
    return env


def render_template(name: str, **context) -> str:
    try:
        return template_environment().get_template(name).render(**context)
    except TemplateError as e:
        logger.error(f"Failed to render template {name}: {e}")
        raise ReportError(f"cannot render {name}: {e}") from e
