"""Autoregressive design of novel sequences over the dynamic vocabulary.

A generation call retrieves supporting documents (or samples fragments at
random in unconditional mode), encodes the candidate fragments once, then
decodes from BOS with top-k sampling; a sampled fragment appends its whole
residue string in a single step.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import fingerprint
from .corpus import EOS_ID, VOCAB_SIZE, FragmentStep, ProteinRecord, ResidueStep, Step
from .model import DynamicVocabulary, Model
from .retrieval import EmbeddingIndex, ModelTextEmbedder, fragment_candidates, retrieve_topk

UNCONDITIONAL_INSTRUCTION = "Design a novel protein sequence"


@dataclass(frozen=True)
class GenerationParams:
    top_k: int = 10
    temperature: float = 1.0
    max_residues: int = 512
    seed: int = 0
    retrieval_k: int = 16

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_residues < 1:
            raise ValueError("max_residues must be at least 1")
        if self.retrieval_k < 1:
            raise ValueError("retrieval_k must be at least 1")


@dataclass(frozen=True)
class TraceStep:
    """One decoding step: the chosen entry, its model probability (after
    masking over-length fragments, before top-k filtering), and the
    cumulative residue count after the step."""

    entry: str
    probability: float
    is_fragment: bool
    residues: int


def trace_sequence(trace: Sequence[TraceStep]) -> str:
    return "".join(s.entry for s in trace if s.entry != "<EOS>")


def top_k_filter_sample(
    dist: np.ndarray, top_k: int, temperature: float, rng: np.random.Generator
) -> int:
    """Sample an index after keeping the top_k most probable entries (ties by
    ascending index) and renormalizing temperature-scaled log-probabilities."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 1 or dist.size == 0 or np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-6:
        raise ValueError("dist must be a probability vector summing to 1")
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    order = np.lexsort((np.arange(dist.size), -dist))
    kept = order[: min(top_k, dist.size)]
    with np.errstate(divide="ignore"):
        logits = np.log(dist[kept]) / temperature
    logits -= logits.max()
    weights = np.exp(logits)
    weights /= weights.sum()
    return int(rng.choice(kept, p=weights))


def _decode(
    model: Model,
    description: str,
    dynvocab: DynamicVocabulary,
    params: GenerationParams,
    rng: np.random.Generator,
) -> tuple[str, list[TraceStep]]:
    prefix: list[Step] = []
    trace: list[TraceStep] = []
    residues = 0
    while residues < params.max_residues:
        dist = model.joint_step_distribution(description, prefix, dynvocab)
        # A fragment that would overshoot the residue budget leaves the
        # support for this step; truncating it would emit a non-candidate.
        masked = dist.copy()
        for i, frag in enumerate(dynvocab.fragments):
            if residues + len(frag.text) > params.max_residues:
                masked[VOCAB_SIZE + i] = 0.0
        masked /= masked.sum()
        idx = top_k_filter_sample(masked, params.top_k, params.temperature, rng)
        prob = float(masked[idx])
        if idx == EOS_ID:
            trace.append(TraceStep("<EOS>", prob, False, residues))
            break
        if idx < VOCAB_SIZE:
            step: Step = ResidueStep(idx)
            residues += 1
        else:
            frag = dynvocab.fragments[idx - VOCAB_SIZE]
            step = frag
            residues += len(frag.text)
        prefix.append(step)
        trace.append(TraceStep(step.text, prob, isinstance(step, FragmentStep), residues))
    return trace_sequence(trace), trace


def generate(
    model: Model,
    description: str,
    index: EmbeddingIndex,
    params: GenerationParams,
    embedder=None,
) -> tuple[str, list[TraceStep]]:
    """Retrieve candidates for a description and decode one design."""
    if embedder is None:
        embedder = ModelTextEmbedder(model)
    retrieved = retrieve_topk(index, description, params.retrieval_k, embedder)
    candidates = fragment_candidates([doc for doc, _ in retrieved])
    dynvocab = model.encode_fragments(candidates)
    rng = np.random.default_rng(params.seed)
    return _decode(model, description, dynvocab, params, rng)


def unconditional_candidate_pool(records: Sequence[ProteinRecord]) -> list[FragmentStep]:
    """Every fragment occurrence across the corpus, in record order."""
    pool = []
    for record in records:
        for frag in record.fragments:
            pool.append(
                FragmentStep(
                    text=record.fragment_text(frag),
                    ftype=frag.ftype,
                    description=frag.description,
                )
            )
    return pool


def generate_unconditional(
    model: Model,
    records: Sequence[ProteinRecord],
    params: GenerationParams,
) -> tuple[str, list[TraceStep]]:
    """Decode under the fixed design instruction with randomly sampled
    corpus fragments as candidates (sample size: retrieval_k times the mean
    fragment count per record, rounded up, drawn with replacement)."""
    if not records:
        raise ValueError("unconditional generation needs a non-empty corpus")
    rng = np.random.default_rng(params.seed)
    pool = unconditional_candidate_pool(records)
    candidates: list[FragmentStep] = []
    if pool:
        sample_size = math.ceil(params.retrieval_k * len(pool) / len(records))
        draws = rng.integers(0, len(pool), size=sample_size)
        candidates = [pool[i] for i in draws]
    dynvocab = model.encode_fragments(candidates)
    return _decode(model, UNCONDITIONAL_INSTRUCTION, dynvocab, params, rng)


def design_record(
    design_id: str,
    description: str,
    sequence: str,
    trace: Sequence[TraceStep],
    params: GenerationParams,
    checkpoint_fingerprint: str,
) -> dict:
    return {
        "id": design_id,
        "description": description,
        "sequence": sequence,
        "trace": [asdict(step) for step in trace],
        "params": asdict(params),
        "checkpoint": checkpoint_fingerprint,
    }


def write_designs(designs: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for design in designs:
            fh.write(json.dumps(design, sort_keys=True) + "\n")


def load_designs(path: str | Path) -> list[dict]:
    designs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                designs.append(json.loads(line))
    return designs


def model_fingerprint(model: Model) -> str:
    return fingerprint(model)
