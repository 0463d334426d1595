"""Synthetic corpus generators for demos and tests."""

from __future__ import annotations

import numpy as np

from .corpus import AMINO_ACIDS, FRAGMENT_TYPES, FragmentAnnotation, ProteinRecord


def _random_sequence(rng: np.random.Generator, length: int) -> str:
    return "".join(AMINO_ACIDS[i] for i in rng.integers(0, len(AMINO_ACIDS), size=length))


def synthetic_records(
    n: int,
    rng: np.random.Generator,
    min_len: int = 20,
    max_len: int = 80,
    max_fragments: int = 3,
    id_prefix: str = "syn",
) -> list[ProteinRecord]:
    """Random records whose fragment spans may nest and overlap."""
    records = []
    for i in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        sequence = _random_sequence(rng, length)
        fragments = []
        for _ in range(int(rng.integers(0, max_fragments + 1))):
            start = int(rng.integers(0, length))
            end = int(rng.integers(start + 1, min(length, start + 16) + 1))
            ftype = FRAGMENT_TYPES[int(rng.integers(0, len(FRAGMENT_TYPES)))]
            fragments.append(
                FragmentAnnotation(
                    start=start,
                    end=end,
                    ftype=ftype,
                    description=f"{ftype} region at {start}",
                )
            )
        records.append(
            ProteinRecord(
                id=f"{id_prefix}{i:04d}",
                sequence=sequence,
                description=f"synthetic protein number {i} with {len(fragments)} annotations",
                fragments=tuple(fragments),
            )
        )
    return records


_MOTIF_NAMES = ("kinase", "zinc", "helix", "loop", "sheet", "barrel", "clamp", "hinge")


def overfit_records(
    n: int = 8,
    seed: int = 7,
    min_len: int = 30,
    max_len: int = 60,
    motif_min: int = 8,
    motif_max: int = 12,
) -> list[ProteinRecord]:
    """Distinctive text-protein pairs: each sequence embeds one unique motif
    named by its description, sized for quick memorization runs."""
    if min_len < motif_max + 6:
        raise ValueError("min_len must leave room for the motif plus flanks")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        name = _MOTIF_NAMES[i % len(_MOTIF_NAMES)]
        motif_len = int(rng.integers(motif_min, motif_max + 1))
        motif = _random_sequence(rng, motif_len)
        total = int(rng.integers(min_len, max_len + 1))
        prefix_len = int(rng.integers(3, total - motif_len - 2))
        suffix_len = total - motif_len - prefix_len
        sequence = _random_sequence(rng, prefix_len) + motif + _random_sequence(rng, suffix_len)
        ftype = FRAGMENT_TYPES[i % len(FRAGMENT_TYPES)]
        records.append(
            ProteinRecord(
                id=f"pair{i}",
                sequence=sequence,
                description=f"Design a protein containing the {name}-{i} motif",
                fragments=(
                    FragmentAnnotation(
                        start=prefix_len,
                        end=prefix_len + motif_len,
                        ftype=ftype,
                        description=f"the {name}-{i} motif",
                    ),
                ),
            )
        )
    return records
