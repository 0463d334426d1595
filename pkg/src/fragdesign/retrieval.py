"""Inference-time supporting-document retrieval: unit-norm description
embeddings, an exact (brute-force) top-K cosine index, and assembly of the
fragment candidate list from retrieved records.

The embedder is pluggable; the default uses the model's own text encoder,
fingerprinted by checkpoint hash so stale indexes are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .checkpoint import fingerprint
from .corpus import FragmentStep, ProteinRecord, record_from_dict, record_to_dict
from .model import Model


class RetrievalError(RuntimeError):
    pass


@dataclass(frozen=True)
class SupportingDocument:
    description: str
    record: ProteinRecord


def docs_from_corpus(records: Sequence[ProteinRecord]) -> list[SupportingDocument]:
    return [SupportingDocument(description=r.description, record=r) for r in records]


class TextEmbedder(Protocol):
    fingerprint: str

    def embed(self, text: str) -> np.ndarray: ...


class ModelTextEmbedder:
    """Mean-pooled, L2-normalized text-encoder states of a model checkpoint."""

    def __init__(self, model: Model):
        self._model = model
        self.fingerprint = fingerprint(model)

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise RetrievalError("cannot embed empty text")
        with self._model.inference_mode():
            pooled = self._model.pooled_description(text).numpy()
        return pooled / np.linalg.norm(pooled)

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        with self._model.inference_mode():
            pooled = self._model.pooled_description_batch(texts).numpy()
        return pooled / np.linalg.norm(pooled, axis=1, keepdims=True)


def embed_description(text: str, model: Model) -> np.ndarray:
    return ModelTextEmbedder(model).embed(text)


@dataclass
class EmbeddingIndex:
    """Unit-norm description embeddings over supporting documents."""

    vectors: np.ndarray
    documents: list[SupportingDocument]
    embedder_fingerprint: str

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.documents):
            raise RetrievalError("vector rows must match the document count")
        norms = np.linalg.norm(self.vectors, axis=1)
        if self.vectors.shape[0] and not np.allclose(norms, 1.0, atol=1e-9):
            raise RetrievalError("index rows must be unit-normalized")

    def __len__(self) -> int:
        return len(self.documents)


def build_index(docs: Sequence[SupportingDocument], embedder) -> EmbeddingIndex:
    if not docs:
        raise RetrievalError("cannot build an index over zero documents")
    if hasattr(embedder, "embed_batch"):
        vectors = np.asarray(embedder.embed_batch([d.description for d in docs]), dtype=np.float64)
    else:
        vectors = np.stack([embedder.embed(d.description) for d in docs]).astype(np.float64)
    return EmbeddingIndex(
        vectors=vectors,
        documents=list(docs),
        embedder_fingerprint=embedder.fingerprint,
    )


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    header = {
        "dim": int(index.vectors.shape[1]),
        "count": len(index),
        "embedder_fingerprint": index.embedder_fingerprint,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f8").tobytes())
        for doc in index.documents:
            line = json.dumps(
                {"description": doc.description, "record": record_to_dict(doc.record)}
            )
            fh.write(line.encode("utf-8") + b"\n")


def load_index(path: str | Path) -> EmbeddingIndex:
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise RetrievalError(f"unreadable index header in {path}") from exc
        count, dim = header["count"], header["dim"]
        raw = fh.read(count * dim * 8)
        if len(raw) != count * dim * 8:
            raise RetrievalError(f"truncated vector block in {path}")
        vectors = np.frombuffer(raw, dtype="<f8").reshape(count, dim).copy()
        documents = []
        for line_no in range(count):
            obj = json.loads(fh.readline().decode("utf-8"))
            documents.append(
                SupportingDocument(
                    description=obj["description"],
                    record=record_from_dict(obj["record"], line_no + 1),
                )
            )
    return EmbeddingIndex(
        vectors=vectors,
        documents=documents,
        embedder_fingerprint=header["embedder_fingerprint"],
    )


def retrieve_topk_by_vector(
    index: EmbeddingIndex, query: np.ndarray, k: int
) -> list[tuple[SupportingDocument, float]]:
    """Exact top-K by cosine, descending; ties broken by insertion index."""
    if not 1 <= k <= len(index):
        raise RetrievalError(f"K={k} outside [1, {len(index)}]")
    scores = index.vectors @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    return [(index.documents[i], float(scores[i])) for i in order]


def retrieve_topk(
    index: EmbeddingIndex, query_text: str, k: int, embedder
) -> list[tuple[SupportingDocument, float]]:
    if embedder.fingerprint != index.embedder_fingerprint:
        raise RetrievalError(
            "index was built with a different embedder "
            f"({index.embedder_fingerprint[:12]}... vs {embedder.fingerprint[:12]}...)"
        )
    return retrieve_topk_by_vector(index, embedder.embed(query_text), k)


def fragment_candidates(docs: Sequence[SupportingDocument]) -> list[FragmentStep]:
    """Deduped (exact residue string) union of the documents' fragments,
    first-seen order, first occurrence's annotation kept."""
    out: dict[str, FragmentStep] = {}
    for doc in docs:
        record = doc.record
        for frag in record.fragments:
            text = record.fragment_text(frag)
            if text not in out:
                out[text] = FragmentStep(text=text, ftype=frag.ftype, description=frag.description)
    return list(out.values())
