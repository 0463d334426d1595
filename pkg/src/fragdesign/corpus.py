"""Corpus ingestion, residue vocabulary, and token/fragment segmentation.

A corpus is a JSON-lines file of annotated text-protein pairs. Each record
is segmented into an ordered list of steps, where a step is either a single
residue token or a whole annotated fragment; concatenating the steps always
reproduces the original sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
RESIDUE_TO_ID = {aa: i for i, aa in enumerate(AMINO_ACIDS)}
BOS_ID = 20
EOS_ID = 21
PAD_ID = 22
VOCAB_SIZE = 23

# The 8 annotation categories, spelled exactly as they appear in corpus files.
FRAGMENT_TYPES = (
    "Domain",
    "Family",
    "HomologousSuperfamily",
    "Repeat",
    "ConservedSite",
    "ActiveSite",
    "BindingSite",
    "PTM",
)
FRAGMENT_TYPE_TO_ID = {t: i for i, t in enumerate(FRAGMENT_TYPES)}


class CorpusError(ValueError):
    """Raised for malformed corpus files or invalid records."""

    def __init__(self, message: str, line: int | None = None, record_id: str | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        if record_id is not None:
            message = f"record {record_id!r}: {message}"
        super().__init__(message)
        self.line = line
        self.record_id = record_id


@dataclass(frozen=True)
class FragmentAnnotation:
    """A 0-based, end-exclusive annotated span within a protein sequence."""

    start: int
    end: int
    ftype: str
    description: str

    def validate(self, sequence_length: int, record_id: str | None = None) -> None:
        if not (0 <= self.start < self.end <= sequence_length):
            raise CorpusError(
                f"invalid fragment span [{self.start}, {self.end}) for sequence of "
                f"length {sequence_length}",
                record_id=record_id,
            )
        if self.ftype not in FRAGMENT_TYPE_TO_ID:
            raise CorpusError(
                f"unknown fragment type {self.ftype!r}; expected one of {FRAGMENT_TYPES}",
                record_id=record_id,
            )


@dataclass(frozen=True)
class ProteinRecord:
    """One text-protein pair with fragment annotations."""

    id: str
    sequence: str
    description: str
    fragments: tuple[FragmentAnnotation, ...] = ()

    def validate(self) -> None:
        if not self.sequence:
            raise CorpusError("empty sequence", record_id=self.id)
        for ch in self.sequence:
            if ch not in RESIDUE_TO_ID:
                raise CorpusError(
                    f"invalid residue letter {ch!r}", record_id=self.id
                )
        for frag in self.fragments:
            frag.validate(len(self.sequence), record_id=self.id)

    def fragment_text(self, frag: FragmentAnnotation) -> str:
        return self.sequence[frag.start:frag.end]


@dataclass(frozen=True)
class ResidueStep:
    """A single-residue step, identified by its token id."""

    token_id: int

    @property
    def text(self) -> str:
        return AMINO_ACIDS[self.token_id]


@dataclass(frozen=True)
class FragmentStep:
    """A whole-fragment step carrying its annotation.

    Also used as the unit of fragment candidate lists: identity for
    deduplication is the residue string alone, type and description are
    metadata of the first occurrence.
    """

    text: str
    ftype: str
    description: str


Step = ResidueStep | FragmentStep


@dataclass(frozen=True)
class SegmentedSequence:
    """A protein rendered as an ordered list of residue/fragment steps."""

    steps: tuple[Step, ...]
    source: str

    def sequence(self) -> str:
        return "".join(s.text for s in self.steps)


def segment(record: ProteinRecord) -> SegmentedSequence:
    """Greedy left-to-right segmentation of a record into steps.

    At each residue position, if any fragment annotation starts there, the
    longest one (ties: lowest annotation index) is emitted as a single step
    and its span consumed; otherwise one residue step is emitted. Fragments
    whose start falls inside an already-consumed span are skipped.
    """
    record.validate()
    starts: dict[int, list[tuple[int, int]]] = {}
    for idx, frag in enumerate(record.fragments):
        starts.setdefault(frag.start, []).append((idx, frag.end))

    steps: list[Step] = []
    pos = 0
    n = len(record.sequence)
    while pos < n:
        candidates = starts.get(pos)
        if candidates:
            idx, end = min(candidates, key=lambda c: (-(c[1]), c[0]))
            frag = record.fragments[idx]
            steps.append(
                FragmentStep(
                    text=record.fragment_text(frag),
                    ftype=frag.ftype,
                    description=frag.description,
                )
            )
            pos = end
        else:
            steps.append(ResidueStep(RESIDUE_TO_ID[record.sequence[pos]]))
            pos += 1
    return SegmentedSequence(steps=tuple(steps), source=record.id)


def detokenize(seg: SegmentedSequence) -> str:
    """Concatenate step substrings back into the residue string."""
    return seg.sequence()


_RECORD_FIELDS = {"id", "sequence", "description", "fragments"}
_FRAGMENT_FIELDS = {"start", "end", "type", "description"}


def record_from_dict(obj: dict, line: int | None = None) -> ProteinRecord:
    """Strictly parse one record object; unknown fields are errors."""
    return _parse_record(obj, line)


def _parse_record(obj: dict, line: int | None) -> ProteinRecord:
    if not isinstance(obj, dict):
        raise CorpusError("record is not a JSON object", line=line)
    unknown = set(obj) - _RECORD_FIELDS
    if unknown:
        raise CorpusError(f"unknown record fields {sorted(unknown)}", line=line)
    missing = _RECORD_FIELDS - set(obj)
    if missing:
        raise CorpusError(f"missing record fields {sorted(missing)}", line=line)
    if not isinstance(obj["id"], str) or not isinstance(obj["sequence"], str) \
            or not isinstance(obj["description"], str):
        raise CorpusError("id, sequence and description must be strings", line=line)
    if not isinstance(obj["fragments"], list):
        raise CorpusError("fragments must be an array", line=line)

    fragments = []
    for fobj in obj["fragments"]:
        if not isinstance(fobj, dict):
            raise CorpusError("fragment is not a JSON object", line=line)
        funknown = set(fobj) - _FRAGMENT_FIELDS
        if funknown:
            raise CorpusError(f"unknown fragment fields {sorted(funknown)}", line=line)
        fmissing = _FRAGMENT_FIELDS - set(fobj)
        if fmissing:
            raise CorpusError(f"missing fragment fields {sorted(fmissing)}", line=line)
        if not isinstance(fobj["start"], int) or not isinstance(fobj["end"], int) \
                or isinstance(fobj["start"], bool) or isinstance(fobj["end"], bool):
            raise CorpusError("fragment start/end must be integers", line=line)
        if not isinstance(fobj["type"], str) or not isinstance(fobj["description"], str):
            raise CorpusError("fragment type/description must be strings", line=line)
        fragments.append(
            FragmentAnnotation(
                start=fobj["start"],
                end=fobj["end"],
                ftype=fobj["type"],
                description=fobj["description"],
            )
        )
    record = ProteinRecord(
        id=obj["id"],
        sequence=obj["sequence"],
        description=obj["description"],
        fragments=tuple(fragments),
    )
    record.validate()
    return record


def load_corpus(path: str | Path) -> list[ProteinRecord]:
    """Load and strictly validate a JSON-lines corpus file."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"malformed JSON ({exc.msg})", line=line_no) from exc
            records.append(_parse_record(obj, line_no))
    return records


def record_to_dict(record: ProteinRecord) -> dict:
    return {
        "id": record.id,
        "sequence": record.sequence,
        "description": record.description,
        "fragments": [
            {
                "start": f.start,
                "end": f.end,
                "type": f.ftype,
                "description": f.description,
            }
            for f in record.fragments
        ],
    }


def write_corpus(records: list[ProteinRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record)) + "\n")


def empirical_aa_distribution(records: list[ProteinRecord]) -> np.ndarray:
    """Normalized residue frequencies over the corpus, indexed like AMINO_ACIDS."""
    counts = np.zeros(len(AMINO_ACIDS), dtype=np.float64)
    for record in records:
        for ch in record.sequence:
            counts[RESIDUE_TO_ID[ch]] += 1
    total = counts.sum()
    if total == 0:
        raise CorpusError("corpus contains no residues")
    return counts / total


def compute_type_weights(records: list[ProteinRecord]) -> dict[str, float]:
    """Balanced inverse-frequency weights per fragment type.

    w_c = N_total / (C_present * N_c) over the whole corpus; types absent
    from the corpus receive no entry. Computed once per training run, never
    per minibatch.
    """
    counts: dict[str, int] = {}
    for record in records:
        for frag in record.fragments:
            counts[frag.ftype] = counts.get(frag.ftype, 0) + 1
    if not counts:
        raise CorpusError("corpus contains no fragment annotations")
    total = sum(counts.values())
    present = len(counts)
    return {t: total / (present * n) for t, n in counts.items()}


def fragment_type_histogram(records: list[ProteinRecord]) -> dict[str, int]:
    hist = {t: 0 for t in FRAGMENT_TYPES}
    for record in records:
        for frag in record.fragments:
            hist[frag.ftype] += 1
    return hist
