import csv
import json
from unittest.mock import AsyncMock, patch

import httpx
import pytest

from synthaudit import cli
from synthaudit.cli import EXIT_ERROR, EXIT_INTERNAL, EXIT_OK, main
from synthaudit.corpus import ReportSource, load_corpus
from synthaudit.embedding_service import load_embeddings
from synthaudit.mock_endpoint import create_mock_app
from synthaudit.projection import load_scatter
from synthaudit.report import load_report


def error_line(capsys):
    """Last stderr line; log records may precede it"""
    return capsys.readouterr().err.strip().splitlines()[-1]


class Workspace:
    """Paths of one end-to-end run against the mock endpoint"""

    def __init__(self, root, fixtures_dir):
        self.out = root / "out"
        self.real = fixtures_dir / "toy_real.jsonl"
        self.code_names = fixtures_dir / "code_names.yaml"
        self.bad_dim = fixtures_dir / "bad_dim.jsonl"
        self.synthetic = self.out / "synthetic" / "mock-model.jsonl"

    def run(self, command, *extra, **transports):
        argv = [command, "--out", str(self.out), "--real", str(self.real), *map(str, extra)]
        return main(argv, **transports)

    def generate(self, *extra):
        transport = httpx.ASGITransport(app=create_mock_app())
        return self.run("generate", "--model", "mock-model", "--code-names", self.code_names, *extra,
                        transport=transport)

    def evaluate(self, *extra):
        return self.run("evaluate", "--synthetic", self.synthetic, *extra)

    def manifest(self, command):
        return json.loads((self.out / "manifests" / f"{command}.json").read_text(encoding="utf-8"))


@pytest.fixture
def workspace(tmp_path, fixtures_dir):
    return Workspace(tmp_path, fixtures_dir)


@pytest.fixture
def generated(workspace):
    assert workspace.generate() == EXIT_OK
    return workspace


class TestIngest:

    def test_normalized_copy_and_stats(self, workspace):
        assert workspace.run("ingest") == EXIT_OK
        corpus = load_corpus(workspace.out / "corpus" / "toy_real.jsonl", ReportSource.REAL)
        assert len(corpus) == 15
        stats = json.loads((workspace.out / "corpus" / "toy_real.stats.json").read_text(encoding="utf-8"))
        assert stats["report_count"] == 15
        assert stats["code_histogram"] == {"F32": 5, "F41": 5, "G47": 5}
        assert workspace.manifest("ingest")["command"] == "ingest"

    def test_wrong_source(self, workspace, capsys):
        assert workspace.run("ingest", "--source", "synthetic") == EXIT_ERROR
        assert error_line(capsys).startswith("error=CORPUS ")
        assert not (workspace.out / "manifests" / "ingest.json").exists()

    def test_invalid_utf8(self, workspace, tmp_path, capsys):
        workspace.real = tmp_path / "broken.jsonl"
        workspace.real.write_bytes(b"\xff\n")
        assert workspace.run("ingest") == EXIT_ERROR
        err = error_line(capsys)
        assert err.startswith("error=CORPUS ")
        assert "broken.jsonl:1: " in err


class TestGenerate:
    """Generation through the mock chat endpoint"""

    def test_outputs(self, generated):
        synthetic = load_corpus(generated.synthetic, ReportSource.SYNTHETIC)
        assert len(synthetic) == 30
        assert synthetic.codes() == ["F32", "F41", "G47"]
        assert synthetic.generators() == ["mock-model"]
        yields = (generated.out / "synthetic" / "mock-model.yields.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(yields) == 3
        assert (generated.out / "synthetic" / "mock-model.raw.jsonl").is_file()

    def test_manifest(self, generated):
        manifest = generated.manifest("generate")
        assert manifest["seeds"]["generation"] == 0
        assert "synthetic/mock-model.jsonl" in manifest["outputs"]
        assert manifest["config"]["generation"]["model"] == "mock-model"

    def test_missing_model(self, workspace, capsys):
        code = workspace.run("generate", "--code-names", workspace.code_names)
        assert code == EXIT_ERROR
        err = error_line(capsys)
        assert err.startswith("error=CONFIG ")
        assert "no generator model" in err
        assert not (workspace.out / "manifests" / "generate.json").exists()

    def test_base_url_from_environment(self, workspace, monkeypatch):
        monkeypatch.setenv("SYNTHAUDIT_BASE_URL", "http://gpu-box:11434")
        assert workspace.run("ingest", "--base-url", "http://flag-host:1") == EXIT_OK
        assert workspace.manifest("ingest")["config"]["generation"]["base_url"] == "http://gpu-box:11434"


class TestEmbed:

    def test_text_and_tokens(self, generated):
        assert generated.run("embed", generated.real, generated.synthetic) == EXIT_OK
        real = load_embeddings(generated.out / "embeddings" / "toy_real.jsonl")
        assert len(real) == 15
        assert real.dim == 256
        assert generated.run("embed", generated.real, "--granularity", "token") == EXIT_OK
        assert (generated.out / "embeddings" / "toy_real.tokens.jsonl").is_file()


class TestEvaluate:
    """Per-generator scores end to end"""

    def test_structured_report(self, generated):
        assert generated.evaluate() == EXIT_OK
        report = load_report(generated.out / "evaluation.json")
        assert list(report.rows) == ["mock-model"]
        row = report.rows["mock-model"]
        assert 0.0 <= row["ttr"] <= 1.0
        assert 0.0 <= row["plagiarism_rate"] <= 1.0
        assert row["mean_nnd"] >= 0.0
        assert report.metadata.real_count == 15
        assert report.metadata.synthetic_counts == {"mock-model": 30}
        assert [y.code for y in report.annexes.yields["mock-model"]] == ["F32", "F41", "G47"]
        assert (generated.out / "top_ngrams" / "mock-model.tsv").is_file()
        with open(generated.out / "plagiarism_audit.tsv", encoding="utf-8", newline="") as handle:
            header = next(csv.reader(handle, delimiter="\t"))
        assert header == ["synthetic_id", "real_id", "distance", "synthetic_text", "real_text"]

    def test_single_report_generator(self, generated):
        record = {"id": "solo-1", "text": "Animo bajo y fatiga persistente", "codes": ["F32"],
                  "source": "synthetic", "generator": "solo"}
        with open(generated.synthetic, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(record) + "\n")
        assert generated.evaluate() == EXIT_OK
        report = load_report(generated.out / "evaluation.json")
        assert report.rows["solo"]["self_bleu"] is None
        assert report.rows["solo"]["ttr"] == 1.0
        assert report.best["self_bleu"] == ["mock-model"]

    def test_stored_embeddings(self, generated):
        assert generated.run("embed", generated.real, generated.synthetic) == EXIT_OK
        stored = generated.out / "embeddings"
        assert generated.evaluate("--embeddings", stored / "toy_real.jsonl",
                                  "--embeddings", stored / "mock-model.jsonl") == EXIT_OK

    def test_dim_mismatch_names_file(self, generated, capsys):
        assert generated.run("embed", generated.real) == EXIT_OK
        capsys.readouterr()
        code = generated.evaluate("--embeddings", generated.out / "embeddings" / "toy_real.jsonl",
                                  "--embeddings", generated.bad_dim)
        assert code == EXIT_ERROR
        err = error_line(capsys)
        assert err.startswith("error=EMBEDDING ")
        assert "bad_dim.jsonl: embedding dim 3 does not match dim 256" in err

    def test_rerun_is_bit_identical(self, generated, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
        assert generated.evaluate() == EXIT_OK
        first = (generated.out / "evaluation.json").read_bytes()
        first_manifest = (generated.out / "manifests" / "evaluate.json").read_bytes()
        assert generated.evaluate() == EXIT_OK
        assert (generated.out / "evaluation.json").read_bytes() == first
        assert (generated.out / "manifests" / "evaluate.json").read_bytes() == first_manifest
        assert load_report(generated.out / "evaluation.json").metadata.created_at == "2023-11-14T22:13:20+00:00"


class TestProjectAndReport:

    def test_project_with_svg(self, generated):
        assert generated.run("project", "--synthetic", generated.synthetic, "--svg") == EXIT_OK
        points = load_scatter(generated.out / "projection.tsv")
        assert len(points) == 45
        assert {p.group for p in points} == {"real", "synthetic:mock-model"}
        assert (generated.out / "projection.svg").read_text(encoding="utf-8").startswith("<svg")

    def test_report(self, generated, capsys):
        assert generated.evaluate() == EXIT_OK
        capsys.readouterr()
        assert generated.run("report") == EXIT_OK
        printed = capsys.readouterr().out
        assert "| mock-model |" in printed
        assert printed == (generated.out / "report.md").read_text(encoding="utf-8") + "\n"
        assert load_report(generated.out / "report.json") == load_report(generated.out / "evaluation.json")
        assert set(p.name for p in (generated.out / "manifests").iterdir()) >= {
            "generate.json", "evaluate.json", "report.json"}

    def test_report_without_evaluation(self, workspace, capsys):
        assert workspace.run("report") == EXIT_ERROR
        assert error_line(capsys).startswith("error=REPORT ")


class TestExitCodes:

    def test_unexpected_failure(self, workspace, capsys):
        failing = AsyncMock(side_effect=RuntimeError("boom"))
        with patch.dict(cli.COMMANDS, {"ingest": failing}):
            assert workspace.run("ingest") == EXIT_INTERNAL
        assert error_line(capsys) == "error=INTERNAL boom"

    def test_invalid_config_file(self, workspace, tmp_path, capsys):
        config = tmp_path / "run.yaml"
        config.write_text("privacy:\n  threshold: 5\n", encoding="utf-8")
        assert workspace.run("ingest", "--config", config) == EXIT_ERROR
        assert error_line(capsys).startswith("error=CONFIG ")

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            main(["transmogrify"])
