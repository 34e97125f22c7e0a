import json

import pytest

from synthaudit.config import RunConfig
from synthaudit.errors import CorpusError
from synthaudit.lifecycle import RunLifecycle, current_timestamp, sha256_file


class TestTimestamp:

    def test_pinned(self, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
        assert current_timestamp() == "1970-01-01T00:00:00+00:00"

    def test_invalid_pin_ignored(self, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "yesterday")
        assert current_timestamp().endswith("+00:00")


class TestRunLifecycle:
    """Manifest bookkeeping around one command"""

    @pytest.mark.asyncio
    async def test_manifest_on_success(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
        source = tmp_path / "input.txt"
        source.write_text("hola\n", encoding="utf-8")
        async with RunLifecycle("ingest", ["ingest"], RunConfig(), tmp_path) as lifecycle:
            assert lifecycle.is_running
            lifecycle.record_input(source)
            target = lifecycle.record_output(tmp_path / "corpus" / "out.jsonl")
            target.parent.mkdir()
            target.write_text("{}\n", encoding="utf-8")

        assert not lifecycle.is_running
        manifest = json.loads((tmp_path / "manifests" / "ingest.json").read_text(encoding="utf-8"))
        assert manifest["outputs"] == {"corpus/out.jsonl": sha256_file(target)}
        assert manifest["inputs"] == {"input.txt": sha256_file(source)}
        assert manifest["created_at"] == "1970-01-01T00:00:00+00:00"
        assert set(manifest["versions"]) == {"synthaudit", "python", "numpy", "scipy"}
        assert manifest["seeds"] == {"generation": 0, "tsne": 0, "hash_embedding": 0}

    @pytest.mark.asyncio
    async def test_no_manifest_on_failure(self, tmp_path):
        with pytest.raises(CorpusError):
            async with RunLifecycle("ingest", [], RunConfig(), tmp_path):
                raise CorpusError("broken")
        assert not (tmp_path / "manifests").exists()

    def test_missing_files_are_skipped(self, tmp_path):
        lifecycle = RunLifecycle("report", [], RunConfig(), tmp_path)
        lifecycle.record_output(tmp_path / "never-written.md")
        assert lifecycle.manifest()["outputs"] == {}
