"""Three-component design model: a byte-level text encoder producing the
conditioning prefix, a fragment encoder producing the dynamic-vocabulary
embedding block, and a causal decoder backbone whose per-step output space
is the union of residue tokens and fragment candidates.

All parameters are kept in double precision; the model is small enough that
exactness is worth more than speed.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import (
    AMINO_ACIDS,
    BOS_ID,
    EOS_ID,
    FRAGMENT_TYPE_TO_ID,
    FRAGMENT_TYPES,
    PAD_ID,
    RESIDUE_TO_ID,
    VOCAB_SIZE,
    FragmentStep,
    ProteinRecord,
    ResidueStep,
    Step,
    segment,
)

# Byte-level text vocabulary: 256 byte values plus a padding symbol.
TEXT_PAD_ID = 256
TEXT_VOCAB_SIZE = 257

# Fragment-encoder vocabulary: 20 residues plus a padding symbol.
FRAG_PAD_ID = 20
FRAG_VOCAB_SIZE = 21


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    text_d_model: int = 32
    text_n_layers: int = 2
    text_n_heads: int = 2
    frag_d_model: int = 32
    frag_n_layers: int = 2
    frag_n_heads: int = 2
    max_steps: int = 1024
    max_text_len: int = 256
    max_fragment_len: int = 512
    dropout: float = 0.0
    tau: float = 0.07
    alpha: float = 0.2
    beta: float = 0.2

    def __post_init__(self) -> None:
        for d, h, what in (
            (self.d_model, self.n_heads, "backbone"),
            (self.text_d_model, self.text_n_heads, "text encoder"),
            (self.frag_d_model, self.frag_n_heads, "fragment encoder"),
        ):
            if d <= 0 or h <= 0 or d % h != 0:
                raise ValueError(f"{what} width {d} must be a positive multiple of its head count {h}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        # no qkv bias: a key bias is a dead direction under the softmax's
        # shift invariance, which would leave exactly-zero gradients for
        # finite differences to probe as pure rounding noise
        self.qkv = nn.Linear(d_model, 3 * d_model, bias=False)
        self.proj = nn.Linear(d_model, d_model)
        self.attn_dropout = nn.Dropout(dropout)
        self.resid_dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, c = x.shape
        q, k, v = self.qkv(x).split(c, dim=2)
        hs = c // self.n_heads
        q = q.view(b, t, self.n_heads, hs).transpose(1, 2)
        k = k.view(b, t, self.n_heads, hs).transpose(1, 2)
        v = v.view(b, t, self.n_heads, hs).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hs)
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        att = att.masked_fill(mask, float("-inf"))
        att = F.softmax(att, dim=-1)
        att = self.attn_dropout(att)
        y = (att @ v).transpose(1, 2).reshape(b, t, c)
        return self.resid_dropout(self.proj(y))


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.ln_1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads, dropout)
        self.ln_2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x))
        x = x + self.mlp(self.ln_2(x))
        return x


class CausalTransformer(nn.Module):
    """Pre-LN causal transformer over token ids or precomputed embeddings."""

    def __init__(
        self,
        d_model: int,
        n_layers: int,
        n_heads: int,
        max_positions: int,
        dropout: float,
        vocab_size: int | None = None,
    ):
        super().__init__()
        self.max_positions = max_positions
        self.tok_emb = nn.Embedding(vocab_size, d_model) if vocab_size else None
        self.pos_emb = nn.Embedding(max_positions, d_model)
        self.drop = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(Block(d_model, n_heads, dropout) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(d_model)

    def forward(self, ids: torch.Tensor | None = None, embeds: torch.Tensor | None = None) -> torch.Tensor:
        if embeds is None:
            embeds = self.tok_emb(ids)
        t = embeds.shape[1]
        if t > self.max_positions:
            raise ValueError(f"sequence of {t} positions exceeds the table of {self.max_positions}")
        pos = torch.arange(t, device=embeds.device)
        x = self.drop(embeds + self.pos_emb(pos))
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)


@dataclass
class DynamicVocabulary:
    """Per-context candidate fragments with their d_model embedding block.

    Row i of ``weights`` corresponds to ``fragments[i]``; the block serves as
    extra input-embedding rows and, transposed, as extra output-head columns.
    """

    fragments: tuple[FragmentStep, ...]
    weights: torch.Tensor
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.index:
            self.index = {f.text: i for i, f in enumerate(self.fragments)}

    @property
    def size(self) -> int:
        return len(self.fragments)


@dataclass(frozen=True)
class TrainingExample:
    description: str
    steps: tuple[Step, ...]


@dataclass(frozen=True)
class TrainingBatch:
    examples: tuple[TrainingExample, ...]
    candidates: tuple[FragmentStep, ...]

    def record_fragments(self) -> list[FragmentStep]:
        """All fragment-step occurrences in batch order (duplicates kept)."""
        return [s for e in self.examples for s in e.steps if isinstance(s, FragmentStep)]


def dedup_fragments(fragments: Sequence[FragmentStep]) -> tuple[FragmentStep, ...]:
    """Dedupe by exact residue string, keeping first-seen order/annotations."""
    seen: dict[str, FragmentStep] = {}
    for frag in fragments:
        if frag.text not in seen:
            seen[frag.text] = frag
    return tuple(seen.values())


def build_training_batch(records: Sequence[ProteinRecord]) -> TrainingBatch:
    """Segment records and collect their deduped fragment union as candidates."""
    examples = []
    occurrences: list[FragmentStep] = []
    for record in records:
        seg = segment(record)
        examples.append(TrainingExample(description=record.description, steps=seg.steps))
        occurrences.extend(s for s in seg.steps if isinstance(s, FragmentStep))
    return TrainingBatch(examples=tuple(examples), candidates=dedup_fragments(occurrences))


def infonce_alignment_loss(u: torch.Tensor, v: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE over cosine similarities with in-batch negatives.

    Positives are matching rows of ``u`` and ``v``; every row pair in the
    batch enters the denominator. Mean over rows, i.e. normalized by the
    number of pairs.
    """
    if u.shape != v.shape or u.ndim != 2:
        raise ValueError("u and v must be matching (n, d) matrices")
    un = u / u.norm(dim=1, keepdim=True)
    vn = v / v.norm(dim=1, keepdim=True)
    sims = (un @ vn.T) / tau
    targets = torch.arange(u.shape[0], device=u.device)
    return F.cross_entropy(sims, targets)


def weighted_type_cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor
) -> torch.Tensor:
    """Per-occurrence weighted cross entropy, normalized by occurrence count."""
    logp = F.log_softmax(logits, dim=1)
    nll = -logp[torch.arange(logits.shape[0]), labels]
    return (weights * nll).sum() / logits.shape[0]


class Model(nn.Module):
    """Joint token/fragment design model with optional training-only heads."""

    def __init__(self, config: ModelConfig, with_training_heads: bool = True):
        super().__init__()
        self.config = config
        d = config.d_model
        self.token_emb_in = nn.Parameter(torch.empty(VOCAB_SIZE, d))
        self.token_head = nn.Parameter(torch.empty(d, VOCAB_SIZE))
        # +1 position for the BOS step in front of up to max_steps entries.
        self.backbone = CausalTransformer(
            d, config.n_layers, config.n_heads, config.max_steps + 1, config.dropout
        )
        self.text_encoder = CausalTransformer(
            config.text_d_model,
            config.text_n_layers,
            config.text_n_heads,
            config.max_text_len,
            config.dropout,
            vocab_size=TEXT_VOCAB_SIZE,
        )
        self.text_proj = nn.Linear(config.text_d_model, d)
        self.frag_encoder = CausalTransformer(
            config.frag_d_model,
            config.frag_n_layers,
            config.frag_n_heads,
            config.max_fragment_len,
            config.dropout,
            vocab_size=FRAG_VOCAB_SIZE,
        )
        self.frag_proj = nn.Linear(config.frag_d_model, d)
        if with_training_heads:
            self.type_head = nn.Sequential(
                nn.Dropout(config.dropout),
                nn.Linear(config.frag_d_model, len(FRAGMENT_TYPES)),
            )
            self.desc_head = nn.Sequential(
                nn.Dropout(config.dropout),
                nn.Linear(config.text_d_model, config.frag_d_model),
            )
        self.apply(self._init_weights)
        nn.init.normal_(self.token_emb_in, mean=0.0, std=0.02)
        nn.init.normal_(self.token_head, mean=0.0, std=0.02)
        self.double()

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)

    @property
    def has_training_heads(self) -> bool:
        return hasattr(self, "type_head")

    @contextmanager
    def inference_mode(self):
        """Eval mode (dropout off) without gradients, restored on exit."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                yield
        finally:
            self.train(was_training)

    # ------------------------------------------------------------------ text

    def _text_ids(self, description: str) -> torch.Tensor:
        data = description.encode("utf-8")
        if not data:
            raise ValueError("description is empty after byte tokenization")
        if len(data) > self.config.max_text_len:
            raise ValueError(
                f"description of {len(data)} bytes exceeds the text cap "
                f"of {self.config.max_text_len}"
            )
        return torch.tensor(list(data), dtype=torch.long)

    def text_hidden(self, description: str) -> torch.Tensor:
        """Final text-encoder states, one row per byte token."""
        ids = self._text_ids(description)
        return self.text_encoder(ids=ids.unsqueeze(0))[0]

    def encode_text(self, description: str) -> torch.Tensor:
        """Conditioning prefix: text states projected into the backbone space."""
        return self.text_proj(self.text_hidden(description))

    def pooled_description(self, description: str) -> torch.Tensor:
        return self.text_hidden(description).mean(dim=0)

    def pooled_description_batch(self, descriptions: Sequence[str]) -> torch.Tensor:
        """Mean-pooled text states for a batch, right-padded internally."""
        ids = [self._text_ids(d) for d in descriptions]
        lengths = torch.tensor([len(i) for i in ids], dtype=torch.float64)
        padded = torch.full((len(ids), int(lengths.max())), TEXT_PAD_ID, dtype=torch.long)
        for row, seq in enumerate(ids):
            padded[row, : len(seq)] = seq
        hidden = self.text_encoder(ids=padded)
        mask = torch.arange(padded.shape[1])[None, :] < lengths[:, None]
        return (hidden * mask.unsqueeze(-1)).sum(dim=1) / lengths[:, None]

    # ------------------------------------------------------------- fragments

    def _fragment_ids(self, text: str) -> list[int]:
        if not text:
            raise ValueError("fragment string is empty")
        if len(text) > self.config.max_fragment_len:
            raise ValueError(
                f"fragment of {len(text)} residues exceeds the fragment-encoder "
                f"cap of {self.config.max_fragment_len}"
            )
        try:
            return [RESIDUE_TO_ID[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"invalid residue letter {exc.args[0]!r} in fragment") from exc

    def fragment_hidden_batch(self, texts: Sequence[str]) -> torch.Tensor:
        """Mean-pooled fragment-encoder states per string (the u vectors)."""
        if not texts:
            return torch.zeros((0, self.config.frag_d_model), dtype=torch.float64)
        ids = [self._fragment_ids(t) for t in texts]
        lengths = torch.tensor([len(i) for i in ids], dtype=torch.float64)
        padded = torch.full((len(ids), int(lengths.max())), FRAG_PAD_ID, dtype=torch.long)
        for row, seq in enumerate(ids):
            padded[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        hidden = self.frag_encoder(ids=padded)
        mask = torch.arange(padded.shape[1])[None, :] < lengths[:, None]
        return (hidden * mask.unsqueeze(-1)).sum(dim=1) / lengths[:, None]

    def _fragment_block(self, candidates: Sequence[FragmentStep]) -> torch.Tensor:
        """Differentiable embedding block for a deduped candidate list."""
        if not candidates:
            return torch.zeros((0, self.config.d_model), dtype=torch.float64)
        return self.frag_proj(self.fragment_hidden_batch([c.text for c in candidates]))

    def encode_fragments(self, fragments: Sequence[FragmentStep]) -> DynamicVocabulary:
        """Dedupe, encode, and package fragments for inference-time use."""
        unique = dedup_fragments(fragments)
        with self.inference_mode():
            weights = self._fragment_block(unique)
        return DynamicVocabulary(fragments=unique, weights=weights)

    # ----------------------------------------------------------- joint model

    def _support_mask(self, m: int) -> torch.Tensor:
        # BOS and PAD are never valid next steps; EOS terminates generation.
        mask = torch.zeros(VOCAB_SIZE + m, dtype=torch.float64)
        mask[BOS_ID] = float("-inf")
        mask[PAD_ID] = float("-inf")
        return mask

    def _step_ids(self, steps: Sequence[Step], index: Mapping[str, int]) -> torch.Tensor:
        ids = []
        for step in steps:
            if isinstance(step, ResidueStep):
                if not 0 <= step.token_id < len(AMINO_ACIDS):
                    raise ValueError(f"residue step id {step.token_id} out of range")
                ids.append(step.token_id)
            else:
                if step.text not in index:
                    raise ValueError(
                        f"fragment {step.text!r} is not in the dynamic vocabulary"
                    )
                ids.append(VOCAB_SIZE + index[step.text])
        return torch.tensor(ids, dtype=torch.long)

    def _check_length(self, text_len: int, n_steps: int) -> None:
        if text_len + n_steps > self.config.max_steps:
            raise ValueError(
                f"{n_steps} steps plus {text_len} text tokens exceed "
                f"max_steps={self.config.max_steps}"
            )

    def _step_logits(self, h_t: torch.Tensor, ids: torch.Tensor, w_frag: torch.Tensor) -> torch.Tensor:
        """Masked joint logits at every step position (BOS and given steps)."""
        w_in = torch.cat([self.token_emb_in, w_frag], dim=0)
        bos = torch.tensor([BOS_ID], dtype=torch.long)
        step_rows = w_in[torch.cat([bos, ids])]
        x = torch.cat([h_t, step_rows], dim=0).unsqueeze(0)
        hidden = self.backbone(embeds=x)[0]
        w_out = torch.cat([self.token_head, w_frag.T], dim=1)
        logits = hidden[h_t.shape[0]:] @ w_out
        return logits + self._support_mask(w_frag.shape[0])

    def _sequence_log_probs(
        self, description: str, steps: Sequence[Step], index: Mapping[str, int], w_frag: torch.Tensor
    ) -> torch.Tensor:
        """Log-probability of each gold step plus the terminating EOS."""
        h_t = self.encode_text(description)
        self._check_length(h_t.shape[0], len(steps))
        ids = self._step_ids(steps, index)
        logits = self._step_logits(h_t, ids, w_frag)
        targets = torch.cat([ids, torch.tensor([EOS_ID], dtype=torch.long)])
        logp = F.log_softmax(logits, dim=1)
        return logp[torch.arange(len(targets)), targets]

    def joint_step_distribution(
        self,
        description: str,
        prefix_steps: Sequence[Step],
        dynvocab: DynamicVocabulary,
    ) -> np.ndarray:
        """Next-step probability vector over tokens then candidate fragments."""
        with self.inference_mode():
            h_t = self.encode_text(description)
            self._check_length(h_t.shape[0], len(prefix_steps))
            ids = self._step_ids(prefix_steps, dynvocab.index)
            logits = self._step_logits(h_t, ids, dynvocab.weights)
            return F.softmax(logits[-1], dim=0).numpy()

    def sequence_step_log_probs(
        self,
        description: str,
        steps: Sequence[Step],
        dynvocab: DynamicVocabulary | None = None,
    ) -> np.ndarray:
        """Per-step gold log-probabilities (including EOS), inference mode."""
        if dynvocab is None:
            dynvocab = DynamicVocabulary(fragments=(), weights=torch.zeros((0, self.config.d_model), dtype=torch.float64))
        with self.inference_mode():
            logp = self._sequence_log_probs(description, steps, dynvocab.index, dynvocab.weights)
            return logp.numpy()

    # ---------------------------------------------------------------- losses

    def forward(
        self, batch: TrainingBatch, type_weights: Mapping[str, float] | None = None
    ) -> dict:
        """All training losses for a batch sharing one fragment encoding.

        Returns ntp/type/desc/total tensors plus presence flags; the type and
        description terms are zero (flagged absent) for fragment-free batches.
        """
        texts = [c.text for c in batch.candidates]
        if len(set(texts)) != len(texts):
            raise ValueError("batch candidates must be deduplicated")
        index = {t: i for i, t in enumerate(texts)}
        if texts:
            u_unique = self.fragment_hidden_batch(texts)
            w_frag = self.frag_proj(u_unique)
        else:
            u_unique = torch.zeros((0, self.config.frag_d_model), dtype=torch.float64)
            w_frag = torch.zeros((0, self.config.d_model), dtype=torch.float64)

        per_record = []
        for example in batch.examples:
            logp = self._sequence_log_probs(example.description, example.steps, index, w_frag)
            per_record.append(-logp.mean())
        ntp = torch.stack(per_record).mean()

        occurrences = batch.record_fragments()
        zero = torch.zeros((), dtype=torch.float64)
        type_loss, desc_loss = zero, zero
        has_fragments = bool(occurrences) and self.has_training_heads
        if has_fragments:
            u_occ = u_unique[[index[f.text] for f in occurrences]]
            labels = torch.tensor(
                [FRAGMENT_TYPE_TO_ID[f.ftype] for f in occurrences], dtype=torch.long
            )
            if type_weights is None:
                weights = torch.ones(len(occurrences), dtype=torch.float64)
            else:
                weights = torch.tensor(
                    [type_weights.get(f.ftype, 1.0) for f in occurrences], dtype=torch.float64
                )
            type_loss = weighted_type_cross_entropy(self.type_head(u_occ), labels, weights)

            desc_texts = [f.description for f in occurrences]
            unique_desc = list(dict.fromkeys(desc_texts))
            desc_index = {t: i for i, t in enumerate(unique_desc)}
            pooled = self.pooled_description_batch(unique_desc)
            v_occ = self.desc_head(pooled)[[desc_index[t] for t in desc_texts]]
            desc_loss = infonce_alignment_loss(u_occ, v_occ, self.config.tau)

        total = ntp + self.config.alpha * type_loss + self.config.beta * desc_loss
        return {
            "ntp": ntp,
            "type": type_loss,
            "desc": desc_loss,
            "total": total,
            "type_present": has_fragments,
            "desc_present": has_fragments,
        }


def loss_ntp(model: Model, batch: TrainingBatch) -> torch.Tensor:
    """Mean per-record next-step negative log-likelihood (EOS included)."""
    return model(batch)["ntp"]


def loss_type(
    model: Model, batch: TrainingBatch, type_weights: Mapping[str, float] | None = None
) -> tuple[torch.Tensor, bool]:
    out = model(batch, type_weights=type_weights)
    return out["type"], out["type_present"]


def loss_desc(model: Model, batch: TrainingBatch) -> tuple[torch.Tensor, bool]:
    out = model(batch)
    return out["desc"], out["desc_present"]


def total_loss(
    model: Model, batch: TrainingBatch, type_weights: Mapping[str, float] | None = None
) -> dict:
    return model(batch, type_weights=type_weights)


def loss_computation(
    model: Model,
    batch: TrainingBatch,
    type_weights: Mapping[str, float] | None = None,
    term: str = "total",
):
    """Adapter exposing a model loss as a pure parameter computation.

    Returns a (computation, params) pair for the gradient-check contract;
    the computation runs the model functionally in eval mode over the given
    parameter tensors, leaving the module untouched.
    """
    params = {
        name: p.detach().clone() for name, p in model.named_parameters() if p.requires_grad
    }

    def computation(tensors: Mapping[str, torch.Tensor]) -> torch.Tensor:
        was_training = model.training
        model.eval()
        try:
            out = torch.func.functional_call(
                model, dict(tensors), args=(batch,), kwargs={"type_weights": type_weights}
            )
        finally:
            model.train(was_training)
        return out[term]

    return computation, params
