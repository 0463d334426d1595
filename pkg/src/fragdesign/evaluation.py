"""Sequence-level metrics and random baselines.

Perplexity scores a sequence under a checkpoint run token-only and
unconditionally; identity/diversity use an exact global alignment with
match=1, mismatch=0, gap=0; retrieval accuracy uses the contrastively
aligned fragment/description embedding pathways.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .checkpoint import fingerprint
from .corpus import AMINO_ACIDS, RESIDUE_TO_ID, ResidueStep
from .generation import UNCONDITIONAL_INSTRUCTION
from .model import Model


def perplexity(scorer: Model, sequence: str) -> float:
    """Exp of the mean per-step negative log-likelihood (EOS included),
    scored token-only (no fragment candidates) under the fixed design
    instruction."""
    try:
        steps = [ResidueStep(RESIDUE_TO_ID[ch]) for ch in sequence]
    except KeyError as exc:
        raise ValueError(f"invalid residue letter {exc.args[0]!r} in sequence") from exc
    logp = scorer.sequence_step_log_probs(UNCONDITIONAL_INSTRUCTION, steps)
    return float(np.exp(-logp.mean()))


def repetitiveness(sequence: str, n: int = 3) -> float:
    """Fraction of n-gram occurrences whose n-gram appears more than once."""
    if len(sequence) < n:
        raise ValueError(f"sequence of length {len(sequence)} is shorter than n={n}")
    grams = [sequence[i:i + n] for i in range(len(sequence) - n + 1)]
    counts: dict[str, int] = {}
    for gram in grams:
        counts[gram] = counts.get(gram, 0) + 1
    repeated = sum(1 for gram in grams if counts[gram] > 1)
    return repeated / len(grams)


def _max_match_count(a: str, b: str) -> int:
    # Global alignment with match=1, mismatch=0, gap=0; row-wise DP where the
    # within-row dependency reduces to a prefix maximum.
    b_arr = np.frombuffer(b.encode("ascii"), dtype=np.uint8)
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    cur = np.zeros(len(b) + 1, dtype=np.int64)
    for ch in a.encode("ascii"):
        matched = prev[:-1] + (b_arr == ch)
        np.maximum(prev[1:], matched, out=cur[1:])
        np.maximum.accumulate(cur, out=cur)
        prev, cur = cur, prev
    return int(prev[-1])


def pairwise_identity(a: str, b: str) -> float:
    """Maximal aligned match count divided by the longer length."""
    if not a or not b:
        raise ValueError("sequences must be non-empty")
    return _max_match_count(a, b) / max(len(a), len(b))


def sequence_diversity(sequences: Sequence[str]) -> float:
    """100 * (1 - mean pairwise identity) over all unordered pairs."""
    n = len(sequences)
    if n < 2:
        raise ValueError("diversity needs at least 2 sequences")
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += pairwise_identity(sequences[i], sequences[j])
    return 100.0 * (1.0 - total / (n * (n - 1) / 2))


def _pair_embeddings(model: Model, pairs: Sequence[tuple[str, str]]) -> tuple[np.ndarray, np.ndarray]:
    if not model.has_training_heads:
        raise ValueError("retrieval accuracy needs a checkpoint with training heads")
    descriptions = [d for d, _ in pairs]
    sequences = [s for _, s in pairs]
    with model.inference_mode():
        u = model.fragment_hidden_batch(sequences)
        v = model.desc_head(model.pooled_description_batch(descriptions))
    u = u.numpy()
    v = v.numpy()
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return u, v


def retrieval_accuracy(
    pairs: Sequence[tuple[str, str]], model: Model, t: int = 20, seed: int = 0
) -> float:
    """Fraction of pairs whose true sequence beats T-1 seeded-random
    distractor sequences in cosine similarity to the description."""
    n = len(pairs)
    if n < t:
        raise ValueError(f"need at least T={t} pairs, got {n}")
    u, v = _pair_embeddings(model, pairs)
    rng = np.random.default_rng(seed)
    hits = 0
    for i in range(n):
        others = np.concatenate([np.arange(i), np.arange(i + 1, n)])
        distractors = rng.choice(others, size=t - 1, replace=False)
        true_sim = float(v[i] @ u[i])
        best_distractor = float(np.max(u[distractors] @ v[i])) if t > 1 else -np.inf
        if true_sim > best_distractor:
            hits += 1
    return hits / n


def embedding_cosines(
    model: Model, pairs: Sequence[tuple[str, str]]
) -> np.ndarray:
    """Cosine matrix between every description (rows) and sequence (cols)."""
    u, v = _pair_embeddings(model, pairs)
    return v @ u.T


# ------------------------------------------------------------ random baselines


def random_uniform(length: int, rng: np.random.Generator) -> str:
    """I.i.d. uniform draws over the 20 residues."""
    if length < 1:
        raise ValueError("length must be at least 1")
    return "".join(AMINO_ACIDS[i] for i in rng.integers(0, len(AMINO_ACIDS), size=length))


def _check_distribution(dist: np.ndarray) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape != (len(AMINO_ACIDS),) or np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-9:
        raise ValueError("dist must be a probability vector over the 20 residues")
    return dist


def random_empirical(dist: np.ndarray, length: int, rng: np.random.Generator) -> str:
    """I.i.d. draws from an empirical residue distribution."""
    dist = _check_distribution(dist)
    if length < 1:
        raise ValueError("length must be at least 1")
    return "".join(AMINO_ACIDS[i] for i in rng.choice(len(AMINO_ACIDS), size=length, p=dist))


def random_plus_with_stats(
    dist: np.ndarray,
    fragment_pool: Sequence[str],
    target_length: int,
    rng: np.random.Generator,
    p_frag: float = 0.10,
) -> tuple[str, int, int]:
    """Residue-or-fragment decisions until the residue count reaches the
    target; returns (sequence, fragment_decisions, residue_decisions)."""
    dist = _check_distribution(dist)
    if not 0.0 <= p_frag <= 1.0:
        raise ValueError("p_frag must lie in [0, 1]")
    if p_frag > 0 and not fragment_pool:
        raise ValueError("fragment pool is empty but p_frag > 0")
    if target_length < 1:
        raise ValueError("target_length must be at least 1")
    parts: list[str] = []
    count = 0
    frag_decisions = 0
    residue_decisions = 0
    while count < target_length:
        if rng.random() < p_frag:
            frag = fragment_pool[int(rng.integers(0, len(fragment_pool)))]
            parts.append(frag)
            count += len(frag)
            frag_decisions += 1
        else:
            parts.append(AMINO_ACIDS[int(rng.choice(len(AMINO_ACIDS), p=dist))])
            count += 1
            residue_decisions += 1
    return "".join(parts), frag_decisions, residue_decisions


def random_plus(
    dist: np.ndarray,
    fragment_pool: Sequence[str],
    target_length: int,
    rng: np.random.Generator,
    p_frag: float = 0.10,
) -> str:
    sequence, _, _ = random_plus_with_stats(dist, fragment_pool, target_length, rng, p_frag)
    return sequence


# ---------------------------------------------------------------- reporting


def _aggregate(values: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "std": float(arr.std()),
    }


def evaluate_designs(
    designs: Sequence[Mapping],
    scorer: Model | None = None,
    rep_n: int = 3,
    retrieval_t: int = 20,
    seed: int = 0,
) -> dict:
    """Build a metric report over generation-output records.

    Per-sequence perplexity (scorer permitting) and repetitiveness, batch
    diversity, and retrieval accuracy when the scorer carries training heads
    and enough pairs exist. Aggregates are recomputable from the
    per-sequence values.
    """
    notices: list[str] = []
    per_sequence: list[dict] = []
    for design in designs:
        entry: dict = {"id": design["id"], "length": len(design["sequence"])}
        if len(design["sequence"]) >= rep_n:
            entry["repetitiveness"] = repetitiveness(design["sequence"], rep_n)
        else:
            notices.append(f"{design['id']}: shorter than rep_n={rep_n}, repetitiveness skipped")
        if scorer is not None:
            entry["perplexity"] = perplexity(scorer, design["sequence"])
        per_sequence.append(entry)
    if scorer is None:
        notices.append("no scorer checkpoint: perplexity omitted")

    aggregates = {}
    for metric in ("repetitiveness", "perplexity", "length"):
        values = [e[metric] for e in per_sequence if metric in e]
        if values:
            aggregates[metric] = _aggregate(values)

    batch: dict = {}
    sequences = [d["sequence"] for d in designs]
    if len(sequences) >= 2:
        batch["sequence_diversity"] = sequence_diversity(sequences)
    else:
        notices.append("fewer than 2 designs: sequence_diversity omitted")
    pairs = [(d["description"], d["sequence"]) for d in designs]
    if scorer is not None and scorer.has_training_heads and len(pairs) >= retrieval_t:
        batch["retrieval_accuracy"] = retrieval_accuracy(pairs, scorer, t=retrieval_t, seed=seed)
    else:
        notices.append("retrieval_accuracy omitted (needs a training-heads scorer "
                       f"and at least T={retrieval_t} designs)")

    return {
        "metadata": {
            "count": len(designs),
            "rep_n": rep_n,
            "retrieval_t": retrieval_t,
            "seed": seed,
            "scorer_fingerprint": fingerprint(scorer) if scorer is not None else None,
        },
        "per_sequence": per_sequence,
        "aggregates": aggregates,
        "batch": batch,
        "notices": notices,
    }


def render_table(report: Mapping) -> str:
    """Fixed-width text rendering of the aggregate metrics."""
    lines = []
    header = f"{'metric':<20}{'mean':>12}{'median':>12}{'std':>12}"
    lines.append(header)
    lines.append("-" * len(header))
    for metric, stats in sorted(report["aggregates"].items()):
        lines.append(
            f"{metric:<20}{stats['mean']:>12.4f}{stats['median']:>12.4f}{stats['std']:>12.4f}"
        )
    for metric, value in sorted(report["batch"].items()):
        lines.append(f"{metric:<20}{value:>12.4f}")
    return "\n".join(lines) + "\n"
