import json
import math

import httpx
import numpy as np
import pytest

from synthaudit.config import EmbeddingProviderConfig
from synthaudit.corpus import Corpus
from synthaudit.embedding_service import (
    EmbeddingSet,
    FileEmbeddingProvider,
    Granularity,
    HashEmbeddingProvider,
    HttpEmbeddingProvider,
    basis_vector,
    build_provider,
    cosine_distance,
    cosine_distances,
    embed_corpus,
    hash_bucket,
    hash_embed,
    load_embeddings,
    merge_embedding_sets,
    save_embeddings,
)
from synthaudit.errors import EmbeddingError
from synthaudit.mock_endpoint import create_mock_app

from .conftest import real_report


def unit(*components):
    vector = np.asarray(components, dtype=float)
    return vector / np.linalg.norm(vector)


class TestEmbeddingSet:
    """Shape and norm invariants"""

    def test_valid(self):
        embeddings = EmbeddingSet(2, {"a": unit(1, 0), "b": unit(1, 1)})
        assert len(embeddings) == 2
        assert "a" in embeddings
        np.testing.assert_array_equal(embeddings.matrix(["b", "a"])[1], [1.0, 0.0])

    def test_rejects_wrong_dim(self):
        with pytest.raises(EmbeddingError, match="has dim 3, expected 2"):
            EmbeddingSet(2, {"a": unit(1, 0, 0)})

    def test_rejects_non_unit(self):
        with pytest.raises(EmbeddingError, match="not unit-norm"):
            EmbeddingSet(2, {"a": np.array([2.0, 0.0])})

    def test_rejects_non_finite(self):
        with pytest.raises(EmbeddingError, match="non-finite"):
            EmbeddingSet(2, {"a": np.array([np.nan, 1.0])})

    def test_token_set(self):
        embeddings = EmbeddingSet(2, {"a": np.vstack([unit(1, 0), unit(0, 1)])}, Granularity.TOKEN)
        assert embeddings.get("a").shape == (2, 2)
        with pytest.raises(EmbeddingError):
            embeddings.matrix()

    def test_missing_id(self):
        with pytest.raises(EmbeddingError, match="no embedding for report id zz"):
            EmbeddingSet(2, {"a": unit(1, 0)}).get("zz")

    def test_merge(self):
        merged = merge_embedding_sets([EmbeddingSet(2, {"a": unit(1, 0)}), EmbeddingSet(2, {"b": unit(0, 1)})])
        assert sorted(merged.ids()) == ["a", "b"]
        with pytest.raises(EmbeddingError, match="duplicate"):
            merge_embedding_sets([merged, EmbeddingSet(2, {"a": unit(1, 0)})])


class TestHashEmbed:
    """Feature-hashing provider"""

    def test_identical_texts(self):
        assert cosine_distance(hash_embed("Animo bajo", 64, 0), hash_embed("animo  BAJO.", 64, 0)) == 0.0

    def test_unit_norm(self):
        assert math.isclose(np.linalg.norm(hash_embed("tristeza persistente y fatiga", 32, 1)), 1.0)

    def test_empty_text_is_e0(self):
        np.testing.assert_array_equal(hash_embed("", 16, 0), basis_vector(16))

    def test_disjoint_tokens_orthogonal_when_buckets_differ(self):
        dim = 1024
        words = ["gato", "perro", "raton", "pajaro", "pez"]
        buckets = {w: hash_bucket(w, dim, 0)[0] for w in words}
        for i, a in enumerate(words):
            for b in words[i + 1:]:
                dot = float(np.dot(hash_embed(a, dim, 0), hash_embed(b, dim, 0)))
                if buckets[a] != buckets[b]:
                    assert dot == 0.0
                else:
                    assert abs(dot) == 1.0

    def test_seed_changes_buckets(self):
        dim = 1 << 20
        assert any(hash_bucket(w, dim, 0) != hash_bucket(w, dim, 1) for w in ["a", "b", "c"])

    def test_provider_shape(self):
        provider = HashEmbeddingProvider(dim=48, seed=0)
        corpus = Corpus([real_report(f"r{i}", f"texto {i}") for i in range(3)])
        embeddings = embed_corpus(provider, corpus)
        assert len(embeddings) == 3
        assert embeddings.dim == 48

    def test_dim_below_two(self):
        with pytest.raises(EmbeddingError):
            HashEmbeddingProvider(dim=1)


class TestCosineDistance:

    def test_identity(self):
        v = unit(0.3, 0.4, 0.5)
        assert cosine_distance(v, v) == 0.0

    def test_orthogonal(self):
        assert cosine_distance(unit(1, 0), unit(0, 1)) == 1.0

    def test_opposite(self):
        assert cosine_distance(unit(1, 0), unit(-1, 0)) == 2.0

    def test_dim_mismatch(self):
        with pytest.raises(EmbeddingError):
            cosine_distance(unit(1, 0), unit(1, 0, 0))

    def test_matrix(self):
        result = cosine_distances(np.vstack([unit(1, 0), unit(0, 1)]), np.vstack([unit(1, 0)]))
        np.testing.assert_allclose(result, [[0.0], [1.0]])


class TestTokenGranularity:

    def test_one_vector_per_token(self):
        provider = HashEmbeddingProvider(dim=32)
        corpus = Corpus([real_report("r1", "animo bajo animo"), real_report("r2", "...")])
        tokens = embed_corpus(provider, corpus, Granularity.TOKEN)
        assert tokens.granularity == Granularity.TOKEN
        assert tokens.get("r1").shape == (3, 32)
        np.testing.assert_array_equal(tokens.get("r1")[0], tokens.get("r1")[2])
        np.testing.assert_array_equal(tokens.get("r2"), basis_vector(32)[None, :])


class TestFileProvider:
    """Stored text vectors"""

    def test_serves_stored_vectors(self, tmp_path):
        path = tmp_path / "e.jsonl"
        save_embeddings(EmbeddingSet(2, {"r1": unit(1, 0), "r2": unit(0, 1)}), path)
        corpus = Corpus([real_report("r2", "x"), real_report("r1", "y")])
        with FileEmbeddingProvider([path]) as provider:
            embeddings = embed_corpus(provider, corpus)
        np.testing.assert_allclose(embeddings.get("r2"), [0.0, 1.0])

    def test_missing_id_named(self, tmp_path):
        path = tmp_path / "e.jsonl"
        save_embeddings(EmbeddingSet(2, {"r1": unit(1, 0)}), path)
        with pytest.raises(EmbeddingError, match="no stored embedding for report id r9"):
            embed_corpus(FileEmbeddingProvider([path]), Corpus([real_report("r9", "x")]))

    def test_dim_mismatch_names_file(self, tmp_path):
        first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_embeddings(EmbeddingSet(2, {"r1": unit(1, 0)}), first)
        save_embeddings(EmbeddingSet(3, {"r2": unit(1, 0, 0)}), second)
        with pytest.raises(EmbeddingError, match="b.jsonl: embedding dim 3 does not match dim 2"):
            FileEmbeddingProvider([first, second])

    def test_cannot_embed_free_text(self, tmp_path):
        path = tmp_path / "e.jsonl"
        save_embeddings(EmbeddingSet(2, {"r1": unit(1, 0)}), path)
        with pytest.raises(EmbeddingError, match="cannot embed free text"):
            FileEmbeddingProvider([path]).embed_texts(["hola"])

    def test_build_provider(self, tmp_path):
        path = tmp_path / "e.jsonl"
        save_embeddings(EmbeddingSet(2, {"r1": unit(1, 0)}), path)
        provider = build_provider(EmbeddingProviderConfig(kind="file", path=path))
        assert isinstance(provider, FileEmbeddingProvider)
        assert provider.dimension() == 2


class TestHttpProvider:
    """Remote embedder over a mocked transport"""

    def test_provider_reported_dim(self):
        def handler(request):
            body = json.loads(request.content)
            return httpx.Response(200, json={"embeddings": [[1.0] + [0.0] * 383 for _ in body["input"]]})

        with HttpEmbeddingProvider("http://mock", "all-MiniLM-L6-v2", batch_size=2,
                                   transport=httpx.MockTransport(handler)) as provider:
            corpus = Corpus([real_report(f"r{i}", f"texto {i}") for i in range(5)])
            embeddings = embed_corpus(provider, corpus)
        assert embeddings.dim == 384
        assert len(embeddings) == 5

    def test_batches(self):
        sizes = []

        def handler(request):
            batch = json.loads(request.content)["input"]
            sizes.append(len(batch))
            return httpx.Response(200, json={"embeddings": [[0.0, 3.0, 4.0] for _ in batch]})

        with HttpEmbeddingProvider("http://mock", "m", batch_size=2, transport=httpx.MockTransport(handler)) as p:
            matrix = p.embed_texts(["a", "b", "c", "d", "e"])
        assert sizes == [2, 2, 1]
        np.testing.assert_allclose(matrix[0], [0.0, 0.6, 0.8])

    def test_inconsistent_dim(self):
        replies = iter([[[1.0, 0.0]], [[1.0, 0.0, 0.0]]])

        def handler(request):
            return httpx.Response(200, json={"embeddings": next(replies)})

        with HttpEmbeddingProvider("http://mock", "m", batch_size=1, transport=httpx.MockTransport(handler)) as p:
            with pytest.raises(EmbeddingError, match="dim 3, expected 2"):
                p.embed_texts(["a", "b"])

    def test_http_failure(self):
        with HttpEmbeddingProvider("http://mock", "m",
                                   transport=httpx.MockTransport(lambda request: httpx.Response(503))) as p:
            with pytest.raises(EmbeddingError, match="embedding request"):
                p.embed_texts(["a"])

    def test_against_mock_app(self):
        """The mock app speaks the same /api/embed contract"""
        from fastapi.testclient import TestClient

        client = TestClient(create_mock_app())
        response = client.post("/api/embed", json={"model": "m", "input": ["animo bajo", "animo bajo"]})
        assert response.status_code == 200
        vectors = response.json()["embeddings"]
        assert len(vectors) == 2
        assert len(vectors[0]) == 384
        assert vectors[0] == vectors[1]


class TestSaveLoad:
    """Embedding file format"""

    def test_round_trip_precision(self, tmp_path):
        original = EmbeddingSet(3, {"a": unit(0.1, 0.2, 0.3), "b": unit(-1, 2, 0.5)})
        path = tmp_path / "e.jsonl"
        save_embeddings(original, path)
        loaded = load_embeddings(path)
        for key in ("a", "b"):
            np.testing.assert_allclose(loaded.get(key), original.get(key), atol=1e-7, rtol=0)

    def test_token_round_trip(self, tmp_path):
        original = EmbeddingSet(2, {"a": np.vstack([unit(1, 0), unit(0, 1)])}, Granularity.TOKEN)
        path = tmp_path / "t.jsonl"
        save_embeddings(original, path)
        loaded = load_embeddings(path)
        assert loaded.granularity == Granularity.TOKEN
        assert loaded.get("a").shape == (2, 2)

    def test_empty_set(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        save_embeddings(EmbeddingSet(0, {}), path)
        assert path.read_text(encoding="utf-8") == ""
        assert len(load_embeddings(path)) == 0

    def test_mixed_dims(self, tmp_path):
        path = tmp_path / "e.jsonl"
        path.write_text('{"id": "a", "vector": [1.0, 0.0]}\n{"id": "b", "vector": [1.0, 0.0, 0.0]}\n',
                        encoding="utf-8")
        with pytest.raises(EmbeddingError, match="e.jsonl:2: inconsistent dim 3, expected 2"):
            load_embeddings(path)

    def test_mixed_kinds(self, tmp_path):
        path = tmp_path / "e.jsonl"
        path.write_text('{"id": "a", "vector": [1.0, 0.0]}\n{"id": "b", "vectors": [[1.0, 0.0]]}\n',
                        encoding="utf-8")
        with pytest.raises(EmbeddingError, match="mixed text and token records"):
            load_embeddings(path)

    def test_duplicate_id(self, tmp_path):
        path = tmp_path / "e.jsonl"
        path.write_text('{"id": "a", "vector": [1.0, 0.0]}\n{"id": "a", "vector": [0.0, 1.0]}\n',
                        encoding="utf-8")
        with pytest.raises(EmbeddingError, match="duplicate id a"):
            load_embeddings(path)

    def test_invalid_utf8_names_line(self, tmp_path):
        path = tmp_path / "e.jsonl"
        path.write_bytes(b'{"id": "a", "vector": [1.0, 0.0]}\n\xff\n')
        with pytest.raises(EmbeddingError, match="e.jsonl:2: malformed record: not valid UTF-8"):
            load_embeddings(path)
