"""Command-line front end.

Commands:
    synthaudit ingest      Validate a corpus file and write it back normalized, with statistics
    synthaudit generate    Few-shot generation for every code of the real corpus
    synthaudit embed       Text (or token) embeddings of the real and synthetic corpora
    synthaudit evaluate    Fidelity, diversity and privacy per generator
    synthaudit project     t-SNE of the pooled embeddings
    synthaudit report      Markdown and structured renderings of the evaluation

Examples:
    python -m synthaudit generate --config run.yaml --model llama3 --model qwen3
    python -m synthaudit evaluate --config run.yaml --embeddings out/embeddings/real.jsonl
"""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import httpx

from .config import EmbeddingKind, PairingStrategy, RunConfig, TtrMode, config_fingerprint, load_run_config
from .corpus import Corpus, ReportSource, concat_corpora, corpus_stats, load_code_names, load_corpus, save_corpus, save_stats
from .diversity import diversity_scores, export_top_ngrams
from .embedding_service import (
    EmbeddingProvider, EmbeddingSet, FileEmbeddingProvider, Granularity,
    build_provider, embed_corpus, merge_embedding_sets, save_embeddings,
)
from .errors import ConfigError, SynthAuditError
from .fidelity import corpus_fidelity
from .generation_service import load_yields, model_slug, run_pipeline, save_raw_generations, save_yields
from .lifecycle import RunLifecycle, current_timestamp
from .privacy import FlaggedPair, nnd, privacy_scores, write_audit
from .projection import export_scatter, group_label, tsne
from .promptkit import PromptTemplateSet, load_templates
from .report import (
    ReportAnnexes, ReportMetadata, build_report, load_report, render_markdown, render_structured, scores_row,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_ERROR = 2

EVALUATION_FILE = "evaluation.json"


def _create_parser() -> argparse.ArgumentParser:
    """Create argument parser with subcommands."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--real", type=Path, help="Real corpus file")
    common.add_argument("--synthetic", type=Path, action="append", help="Synthetic corpus file (repeatable)")
    common.add_argument("--embeddings", type=Path, action="append",
                        help="Precomputed text embedding file (repeatable)")
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument("--seed", type=int, help="Seed for example sampling and t-SNE")
    common.add_argument("--model", action="append", help="Generator model name (repeatable)")
    common.add_argument("--base-url", help="Chat endpoint base URL")
    common.add_argument("--threshold", type=float, help="Plagiarism distance threshold")
    common.add_argument("--pairing", choices=[s.value for s in PairingStrategy], help="Reference pool for pairwise metrics")
    common.add_argument("--ttr-mode", choices=[m.value for m in TtrMode], help="TTR averaging mode")
    common.add_argument("--code-names", type=Path, help="YAML map of code -> name")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(
        prog="synthaudit",
        description="Generate synthetic clinical reports and audit them against a real corpus",
    )
    subparsers = parser.add_subparsers(dest="command", required=True, help="Available commands")

    ingest = subparsers.add_parser("ingest", parents=[common], help="Validate and normalize a corpus file")
    ingest.add_argument("path", type=Path, nargs="?", help="Corpus file (default: --real)")
    ingest.add_argument("--source", choices=[s.value for s in ReportSource], default=ReportSource.REAL.value,
                        help="Expected source of every record (default: real)")

    subparsers.add_parser("generate", parents=[common], help="Generate synthetic reports for every code")

    embed = subparsers.add_parser("embed", parents=[common], help="Embed the real and synthetic corpora")
    embed.add_argument("corpora", type=Path, nargs="*", help="Corpus files (default: --real and --synthetic)")
    embed.add_argument("--granularity", choices=[g.value for g in Granularity], default=Granularity.TEXT.value)

    subparsers.add_parser("evaluate", parents=[common], help="Score every generator")

    project = subparsers.add_parser("project", parents=[common], help="t-SNE projection of pooled embeddings")
    project.add_argument("--svg", action="store_true", help="Also write an SVG scatter")

    report = subparsers.add_parser("report", parents=[common], help="Render the evaluation report")
    report.add_argument("--evaluation", type=Path, help=f"Structured evaluation (default: <out>/{EVALUATION_FILE})")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested config overrides for the flags that were given"""
    overrides: Dict[str, Dict[str, Any]] = {}

    def put(section: str, key: str, value: Any) -> None:
        if value is not None:
            overrides.setdefault(section, {})[key] = value

    put("paths", "real", args.real)
    put("paths", "synthetic", args.synthetic)
    put("paths", "embeddings", args.embeddings)
    put("paths", "out", args.out)
    put("paths", "code_names", args.code_names)
    put("generation", "seed", args.seed)
    put("tsne", "seed", args.seed)
    put("generation", "model", args.model[0] if args.model else None)
    put("generation", "base_url", args.base_url)
    put("privacy", "threshold", args.threshold)
    put("pairing", "strategy", args.pairing)
    put("diversity", "ttr_mode", args.ttr_mode)
    return overrides


def _require(value: Optional[Path], name: str) -> Path:
    if value is None:
        raise ConfigError(f"{name} is not set")
    return value


def _load_synthetic(config: RunConfig, lifecycle: RunLifecycle) -> Corpus:
    if not config.paths.synthetic:
        raise ConfigError("paths.synthetic is not set")
    corpora = [load_corpus(lifecycle.record_input(p), ReportSource.SYNTHETIC) for p in config.paths.synthetic]
    return concat_corpora(corpora)


def _text_embeddings(config: RunConfig, corpus: Corpus, lifecycle: RunLifecycle,
                     embed_transport: Optional[httpx.BaseTransport]) -> EmbeddingSet:
    """Stored vectors when embedding files are given, else the configured provider"""
    if config.paths.embeddings:
        stored = [lifecycle.record_input(p) for p in config.paths.embeddings]
        if config.embedding.kind == EmbeddingKind.FILE:
            stored.insert(0, lifecycle.record_input(config.embedding.path))
        provider: EmbeddingProvider = FileEmbeddingProvider(stored)
    else:
        provider = build_provider(config.embedding, config.tokenizer, transport=embed_transport)
    with provider:
        return embed_corpus(provider, corpus, Granularity.TEXT, config.tokenizer)


async def cmd_ingest(args, config: RunConfig, lifecycle: RunLifecycle, **_) -> None:
    path = lifecycle.record_input(args.path or _require(config.paths.real, "paths.real"))
    corpus = load_corpus(path, ReportSource(args.source))
    out_dir = config.paths.out / "corpus"
    save_corpus(corpus, lifecycle.record_output(out_dir / f"{path.stem}.jsonl"))
    if len(corpus):
        save_stats(corpus_stats(corpus), lifecycle.record_output(out_dir / f"{path.stem}.stats.json"))


async def cmd_generate(args, config: RunConfig, lifecycle: RunLifecycle,
                       transport: Optional[httpx.AsyncBaseTransport] = None, **_) -> None:
    models: List[str] = args.model or ([config.generation.model] if config.generation.model else [])
    if not models:
        raise ConfigError("no generator model: set generation.model or pass --model")
    real = load_corpus(lifecycle.record_input(_require(config.paths.real, "paths.real")), ReportSource.REAL)
    code_names = load_code_names(lifecycle.record_input(_require(config.paths.code_names, "paths.code_names")))
    templates = load_templates(lifecycle.record_input(config.paths.templates)) if config.paths.templates \
        else PromptTemplateSet()

    out_dir = config.paths.out / "synthetic"
    for model in models:
        generation = config.generation.model_copy(update={"model": model})
        result = await run_pipeline(generation, templates, real, code_names, transport=transport)
        slug = model_slug(model)
        save_corpus(result.corpus, lifecycle.record_output(out_dir / f"{slug}.jsonl"))
        save_yields(result.yields, lifecycle.record_output(out_dir / f"{slug}.yields.jsonl"))
        save_raw_generations(result.raw, lifecycle.record_output(out_dir / f"{slug}.raw.jsonl"))


async def cmd_embed(args, config: RunConfig, lifecycle: RunLifecycle,
                    embed_transport: Optional[httpx.BaseTransport] = None, **_) -> None:
    paths = list(args.corpora)
    if not paths:
        paths = ([config.paths.real] if config.paths.real else []) + list(config.paths.synthetic)
    if not paths:
        raise ConfigError("no corpus to embed: pass corpus files or set paths.real / paths.synthetic")
    if config.embedding.kind == EmbeddingKind.FILE:
        raise ConfigError("embed needs a hash or http embedding provider")

    granularity = Granularity(args.granularity)
    suffix = ".jsonl" if granularity == Granularity.TEXT else ".tokens.jsonl"
    with build_provider(config.embedding, config.tokenizer, transport=embed_transport) as provider:
        for path in paths:
            corpus = load_corpus(lifecycle.record_input(path))
            embeddings = embed_corpus(provider, corpus, granularity, config.tokenizer)
            target = config.paths.out / "embeddings" / f"{Path(path).stem}{suffix}"
            save_embeddings(embeddings, lifecycle.record_output(target))


def _yields_for(config: RunConfig) -> Dict[str, list]:
    """Yield logs stored next to each synthetic corpus file, keyed by generator"""
    yields: Dict[str, list] = {}
    for path in config.paths.synthetic:
        log = Path(path).with_suffix(".yields.jsonl")
        if not log.is_file():
            continue
        generators = load_corpus(path).generators()
        if len(generators) == 1:
            yields[generators[0]] = load_yields(log)
    return yields


async def cmd_evaluate(args, config: RunConfig, lifecycle: RunLifecycle,
                       embed_transport: Optional[httpx.BaseTransport] = None, **_) -> None:
    real = load_corpus(lifecycle.record_input(_require(config.paths.real, "paths.real")), ReportSource.REAL)
    synthetic = _load_synthetic(config, lifecycle)
    if config.embedding.kind == EmbeddingKind.FILE:
        raise ConfigError("pairwise fidelity metrics need a hash or http embedding provider")

    pooled = concat_corpora([real, synthetic])
    text_embeddings = _text_embeddings(config, pooled, lifecycle, embed_transport)
    out_dir = config.paths.out

    rows: Dict[str, Dict[str, Optional[float]]] = {}
    annexes = ReportAnnexes(yields=_yields_for(config))
    flagged: List[FlaggedPair] = []
    with build_provider(config.embedding, config.tokenizer, transport=embed_transport) as provider:
        real_tokens = embed_corpus(provider, real, Granularity.TOKEN, config.tokenizer)
        for generator in synthetic.generators():
            subset = synthetic.by_generator(generator)
            logger.info(f"Evaluating {generator} ({len(subset)} reports)")
            tokens = merge_embedding_sets([real_tokens, embed_corpus(provider, subset, Granularity.TOKEN,
                                                                     config.tokenizer)])
            fidelity = corpus_fidelity(
                subset, real, text_embeddings, tokens, config.pairing, provider,
                kernel=config.kernel, tokenizer=config.tokenizer,
                few_shot_m=config.generation.m, few_shot_seed=config.generation.seed,
            )
            diversity = diversity_scores(subset, config.diversity, config.tokenizer)
            privacy = privacy_scores(
                nnd(text_embeddings.subset(subset.ids()), text_embeddings.subset(real.ids())), config.privacy)

            rows[generator] = scores_row(fidelity, diversity, privacy)
            annexes.flagged[generator] = privacy.flagged
            annexes.bertscore_pr[generator] = {"precision": fidelity.bertscore_p, "recall": fidelity.bertscore_r}
            annexes.top_ngrams[generator] = [[gram, count] for gram, count in diversity.top_ngrams]
            flagged.extend(privacy.flagged)
            export_top_ngrams(diversity.top_ngrams,
                              lifecycle.record_output(out_dir / "top_ngrams" / f"{model_slug(generator)}.tsv"))

    write_audit(flagged, synthetic, real, lifecycle.record_output(out_dir / "plagiarism_audit.tsv"))
    metadata = ReportMetadata(
        real_count=len(real),
        synthetic_counts={g: len(synthetic.by_generator(g)) for g in synthetic.generators()},
        config_fingerprint=config_fingerprint(config),
        created_at=current_timestamp(),
        settings={
            "pairing": config.pairing.model_dump(mode="json"),
            "ttr_mode": config.diversity.ttr_mode.value,
            "threshold": config.privacy.threshold,
            "embedding": config.embedding.kind.value,
        },
    )
    report = build_report(rows, metadata, annexes)
    render_structured(report, lifecycle.record_output(out_dir / EVALUATION_FILE))


async def cmd_project(args, config: RunConfig, lifecycle: RunLifecycle,
                      embed_transport: Optional[httpx.BaseTransport] = None, **_) -> None:
    corpora = []
    if config.paths.real:
        corpora.append(load_corpus(lifecycle.record_input(config.paths.real), ReportSource.REAL))
    if config.paths.synthetic:
        corpora.append(_load_synthetic(config, lifecycle))
    if not corpora:
        raise ConfigError("nothing to project: set paths.real and/or paths.synthetic")
    pooled = concat_corpora(corpora)
    embeddings = _text_embeddings(config, pooled, lifecycle, embed_transport)
    groups = {report.id: group_label(report) for report in pooled}
    points = tsne(embeddings, config.tsne, groups)
    svg_path = lifecycle.record_output(config.paths.out / "projection.svg") if args.svg else None
    export_scatter(points, lifecycle.record_output(config.paths.out / "projection.tsv"), svg_path)


async def cmd_report(args, config: RunConfig, lifecycle: RunLifecycle, **_) -> None:
    source = lifecycle.record_input(args.evaluation or config.paths.out / EVALUATION_FILE)
    report = load_report(source)
    markdown = render_markdown(report)
    target = lifecycle.record_output(config.paths.out / "report.md")
    target.write_text(markdown, encoding="utf-8")
    render_structured(report, lifecycle.record_output(config.paths.out / "report.json"))
    print(markdown)


COMMANDS = {
    "ingest": cmd_ingest,
    "generate": cmd_generate,
    "embed": cmd_embed,
    "evaluate": cmd_evaluate,
    "project": cmd_project,
    "report": cmd_report,
}


async def _run(args: argparse.Namespace, argv: Sequence[str], config: RunConfig, **transports) -> None:
    async with RunLifecycle(args.command, argv, config, config.paths.out) as lifecycle:
        await COMMANDS[args.command](args, config, lifecycle, **transports)


def main(argv: Optional[Sequence[str]] = None,
         transport: Optional[httpx.AsyncBaseTransport] = None,
         embed_transport: Optional[httpx.BaseTransport] = None) -> int:
    """
    Entry point

    Returns 0 on success, 2 on a reported error (one `error=<CODE> message` line on stderr)
    and 1 on an unexpected failure.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _create_parser().parse_args(argv)

    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=logging.DEBUG if args.verbose else logging.INFO
    )

    try:
        config = load_run_config(args.config, _overrides(args))
        asyncio.run(_run(args, argv, config, transport=transport, embed_transport=embed_transport))
    except SynthAuditError as e:
        print(e.one_line(), file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:
        logger.exception(f"Unexpected failure in {args.command}")
        print(f"error=INTERNAL {' '.join(str(e).split())}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK
