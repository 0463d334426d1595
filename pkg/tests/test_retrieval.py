import numpy as np
import pytest
import torch

from fragdesign.corpus import FragmentAnnotation, ProteinRecord
from fragdesign.model import Model
from fragdesign.retrieval import (
    EmbeddingIndex,
    ModelTextEmbedder,
    RetrievalError,
    SupportingDocument,
    build_index,
    docs_from_corpus,
    embed_description,
    fragment_candidates,
    load_index,
    retrieve_topk,
    retrieve_topk_by_vector,
    save_index,
)
from fragdesign.synthetic import synthetic_records


def dummy_doc(tag="doc", description=None):
    record = ProteinRecord(
        id=tag, sequence="MKTAYIAKQR", description=description or f"protein {tag}",
        fragments=(FragmentAnnotation(2, 7, "Domain", "a domain"),),
    )
    return SupportingDocument(description=record.description, record=record)


def random_index(rng, count, dim, with_ties=False):
    vectors = rng.normal(size=(count, dim))
    if with_ties and count >= 4:
        vectors[1] = vectors[0]
        vectors[3] = vectors[2]
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    docs = [dummy_doc(f"d{i}") for i in range(count)]
    return EmbeddingIndex(vectors=vectors, documents=docs, embedder_fingerprint="test")


def brute_force_topk(index, query, k):
    """Pure-python exhaustive cosine scan, ties by insertion order."""
    scores = []
    for i, row in enumerate(index.vectors):
        dot = sum(float(a) * float(b) for a, b in zip(row, query))
        scores.append((i, dot))
    ranked = sorted(scores, key=lambda item: (-item[1], item[0]))
    return [i for i, _ in ranked[:k]]


class TestEmbedder:
    def test_unit_norm(self, small_model):
        vec = embed_description("an enzyme that binds zinc", small_model)
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-9

    def test_equal_texts_equal_vectors(self, small_model):
        embedder = ModelTextEmbedder(small_model)
        a = embedder.embed("the same text")
        b = embedder.embed("the same text")
        assert np.array_equal(a, b)
        assert float(a @ b) == pytest.approx(1.0, abs=1e-9)

    def test_empty_text_errors(self, small_model):
        with pytest.raises(RetrievalError, match="empty"):
            ModelTextEmbedder(small_model).embed("")

    def test_batch_embed_matches_single(self, small_model):
        embedder = ModelTextEmbedder(small_model)
        texts = ["first text", "second longer text", "x"]
        batch = embedder.embed_batch(texts)
        for row, text in zip(batch, texts):
            assert np.allclose(row, embedder.embed(text), atol=1e-12)


class TestBuildIndex:
    def test_empty_docs_errors(self, small_model):
        with pytest.raises(RetrievalError, match="zero documents"):
            build_index([], ModelTextEmbedder(small_model))

    def test_single_doc_always_retrieved(self, small_model):
        embedder = ModelTextEmbedder(small_model)
        index = build_index([dummy_doc()], embedder)
        results = retrieve_topk(index, "anything at all", 1, embedder)
        assert results[0][0].record.id == "doc"

    def test_duplicate_docs_retained(self, small_model):
        embedder = ModelTextEmbedder(small_model)
        doc = dummy_doc(description="same description")
        index = build_index([doc, doc], embedder)
        assert len(index) == 2

    def test_non_unit_rows_rejected(self):
        with pytest.raises(RetrievalError, match="unit"):
            EmbeddingIndex(
                vectors=np.ones((2, 3)), documents=[dummy_doc(), dummy_doc()],
                embedder_fingerprint="x",
            )


class TestRetrieve:
    def test_k_equals_size_returns_all_sorted(self, rng):
        index = random_index(rng, 16, 8)
        query = rng.normal(size=8)
        results = retrieve_topk_by_vector(index, query, 16)
        scores = [score for _, score in results]
        assert len(results) == 16
        assert all(b <= a for a, b in zip(scores, scores[1:]))

    def test_k_out_of_range(self, rng):
        index = random_index(rng, 4, 8)
        for bad in (0, 5):
            with pytest.raises(RetrievalError, match="K="):
                retrieve_topk_by_vector(index, rng.normal(size=8), bad)

    def test_matches_brute_force_with_ties(self, rng):
        for trial in range(25):
            count = int(rng.integers(2, 64))
            dim = int(rng.integers(2, 32))
            index = random_index(rng, count, dim, with_ties=True)
            query = rng.normal(size=dim)
            k = int(rng.integers(1, count + 1))
            got = [d.record.id for d, _ in retrieve_topk_by_vector(index, query, k)]
            expected = [index.documents[i].record.id for i in brute_force_topk(index, query, k)]
            assert got == expected, f"trial {trial}"

    def test_tie_broken_by_insertion_index(self, rng):
        vectors = np.tile(rng.normal(size=8), (3, 1))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        index = EmbeddingIndex(
            vectors=vectors, documents=[dummy_doc(f"d{i}") for i in range(3)],
            embedder_fingerprint="t",
        )
        results = retrieve_topk_by_vector(index, vectors[0], 2)
        assert [d.record.id for d, _ in results] == ["d0", "d1"]

    def test_fingerprint_mismatch_rejected(self, small_model, small_config):
        embedder = ModelTextEmbedder(small_model)
        index = build_index([dummy_doc()], embedder)
        torch.manual_seed(99)
        other = ModelTextEmbedder(Model(small_config))
        with pytest.raises(RetrievalError, match="different embedder"):
            retrieve_topk(index, "query", 1, other)


class TestIndexSerialization:
    def test_round_trip_identical_queries(self, small_model, tmp_path):
        rng = np.random.default_rng(2)
        records = synthetic_records(12, rng)
        embedder = ModelTextEmbedder(small_model)
        index = build_index(docs_from_corpus(records), embedder)
        path = tmp_path / "index.bin"
        save_index(index, path)
        loaded = load_index(path)
        assert loaded.embedder_fingerprint == index.embedder_fingerprint
        assert np.array_equal(loaded.vectors, index.vectors)
        query = "some protein function"
        before = [(d.record.id, s) for d, s in retrieve_topk(index, query, 5, embedder)]
        after = [(d.record.id, s) for d, s in retrieve_topk(loaded, query, 5, embedder)]
        assert before == after


class TestFragmentCandidates:
    def test_docs_without_fragments(self):
        record = ProteinRecord(id="x", sequence="MKTA", description="d", fragments=())
        assert fragment_candidates([SupportingDocument("d", record)]) == []

    def test_duplicate_fragment_across_docs_appears_once(self):
        docs = [dummy_doc("a"), dummy_doc("b")]
        candidates = fragment_candidates(docs)
        assert len(candidates) == 1
        assert candidates[0].text == "TAYIA"

    def test_first_seen_order(self):
        r1 = ProteinRecord(
            id="r1", sequence="MKTAYIAKQR", description="d",
            fragments=(FragmentAnnotation(0, 3, "Domain", "one"),
                       FragmentAnnotation(5, 8, "Repeat", "two")),
        )
        r2 = ProteinRecord(
            id="r2", sequence="GGSSAAMKTT", description="d",
            fragments=(FragmentAnnotation(0, 4, "Family", "three"),),
        )
        candidates = fragment_candidates([
            SupportingDocument("d", r1), SupportingDocument("d", r2)
        ])
        assert [c.text for c in candidates] == ["MKT", "IAK", "GGSS"]

    def test_idempotent_on_own_output(self):
        docs = [dummy_doc("a")]
        first = fragment_candidates(docs)
        # wrap the candidate list as one synthetic document
        sequence = "".join(c.text for c in first)
        spans = []
        offset = 0
        for c in first:
            spans.append(FragmentAnnotation(offset, offset + len(c.text), c.ftype, c.description))
            offset += len(c.text)
        wrapped = ProteinRecord(id="w", sequence=sequence, description="wrapped",
                                fragments=tuple(spans))
        second = fragment_candidates([SupportingDocument("wrapped", wrapped)])
        assert second == first
