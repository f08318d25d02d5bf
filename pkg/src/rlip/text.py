"""Free-form label encoding and label-sequence assembly.

Labels tokenize by whitespace over the corpus token inventory (one
reserved unknown token). A small transformer encoder with a learned
classification token produces one feature per label; the classification
position's output is the label feature. Entity sequences end with a
reserved no-objects label backed by its own learned embedding, which is
never sampled during sequence extension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor
from .nn import TransformerEncoder, embedding_init
from .dataset import Scene, Vocabulary

NO_OBJECT_LABEL = "__no_object__"


@dataclass
class LabelSequence:
    kind: str                       # "entity" | "relation"
    labels: list[str]
    n_in_batch: int                 # in-batch labels occupy the prefix
    no_object_index: int | None = None
    features: Tensor | None = None  # (len, D), attached by the encoder

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate labels in sequence")
        if self.kind == "entity":
            if self.labels.count(NO_OBJECT_LABEL) != 1:
                raise ValueError("entity sequence needs exactly one no-objects label")
        elif self.kind != "relation":
            raise ValueError(f"unknown sequence kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.labels)

    def index_of(self, label: str) -> int:
        return self.labels.index(label)


class TextEncoder:
    """Tiny transformer over whitespace tokens; [classification token] +
    token embeddings + positions -> encoder -> feature at position 0."""

    def __init__(self, params: Parameters, prefix: str, tokens: list[str],
                 dim: int, heads: int, layers: int, ffn_dim: int,
                 max_tokens: int, rng: np.random.Generator):
        self.token_to_id = {tok: i + 2 for i, tok in enumerate(tokens)}  # 0 pad, 1 unk
        self.max_tokens = max_tokens
        self.dim = dim
        n_vocab = len(tokens) + 2
        self.embed = params.create(f"{prefix}.embed", embedding_init(rng, (n_vocab, dim)))
        self.pos = params.create(f"{prefix}.pos", embedding_init(rng, (max_tokens + 1, dim)))
        self.cls = params.create(f"{prefix}.cls", embedding_init(rng, (1, dim)))
        self.encoder = TransformerEncoder(params, f"{prefix}.enc", dim, heads,
                                          ffn_dim, layers, rng)
        self.no_object = params.create(f"{prefix}.no_object", embedding_init(rng, (1, dim)))

    def tokenize(self, text: str) -> list[int]:
        if not text.strip():
            raise ValueError("cannot encode empty text")
        return [self.token_to_id.get(w, 1) for w in text.split()[: self.max_tokens]]

    def encode_labels(self, labels: list[str]) -> Tensor:
        """Encode a batch of label strings -> (n, D) features."""
        if not labels:
            raise ValueError("no labels to encode")
        n = len(labels)
        length = self.max_tokens + 1
        ids = np.zeros((n, self.max_tokens), dtype=np.intp)
        pad = np.ones((n, length), dtype=bool)
        pad[:, 0] = False  # the classification position is always live
        for i, text in enumerate(labels):
            toks = self.tokenize(text)
            ids[i, : len(toks)] = toks
            pad[i, 1 : 1 + len(toks)] = False
        tok_emb = ad.gather_rows(self.embed, ids.reshape(-1))
        tok_emb = ad.reshape(tok_emb, (n, self.max_tokens, self.dim))
        cls = ad.broadcast_to(ad.reshape(self.cls, (1, 1, self.dim)), (n, 1, self.dim))
        x = ad.concat([cls, tok_emb], axis=1) + ad.reshape(self.pos, (1, length, self.dim))
        mask = np.where(pad, -1e9, 0.0)[:, None, None, :]  # hide padded keys
        encoded = self.encoder(x, mask=mask)
        return ad.reshape(ad.narrow(encoded, 1, 0, 1), (n, self.dim))

    def encode_sequence(self, seq: LabelSequence) -> Tensor:
        """Encode a LabelSequence, routing the no-objects slot to its
        dedicated embedding row."""
        if seq.kind == "entity":
            real = [lbl for lbl in seq.labels if lbl != NO_OBJECT_LABEL]
            if seq.no_object_index != len(seq.labels) - 1:
                raise ValueError("no-objects label must sit at the end")
            feats = self.encode_labels(real) if real else None
            parts = ([feats, self.no_object] if feats is not None else [self.no_object])
            return ad.concat(parts, axis=0) if len(parts) > 1 else self.no_object
        return self.encode_labels(seq.labels)


def build_label_sequences(batch: list[Scene]) -> tuple[LabelSequence, LabelSequence]:
    """Deduplicated in-batch label unions in first-occurrence order; the
    entity sequence gains the no-objects label at the end."""
    if not batch:
        raise ValueError("empty batch")
    ent: list[str] = []
    rel: list[str] = []
    for sc in batch:
        for e in sc.entities:
            if e.label not in ent:
                ent.append(e.label)
        for t in sc.triplets:
            if t.relation not in rel:
                rel.append(t.relation)
    ent_seq = LabelSequence("entity", ent + [NO_OBJECT_LABEL], len(ent) + 1,
                            no_object_index=len(ent))
    rel_seq = LabelSequence("relation", rel, len(rel))
    return ent_seq, rel_seq


def full_label_sequences(vocab: Vocabulary) -> tuple[LabelSequence, LabelSequence]:
    """Fixed sequences over the whole downstream vocabulary (fine-tuning
    and evaluation)."""
    ent = list(vocab.entity_labels)
    ent_seq = LabelSequence("entity", ent + [NO_OBJECT_LABEL], len(ent) + 1,
                            no_object_index=len(ent))
    rel_seq = LabelSequence("relation", list(vocab.relation_labels),
                            len(vocab.relation_labels))
    return ent_seq, rel_seq


def extension_quota(budget: int) -> tuple[int, int]:
    """Split an extension budget: ceil(2B/3) entity slots, rest relations."""
    n_ent = math.ceil(2 * budget / 3)
    return n_ent, budget - n_ent


def extend_label_sequence(ent_seq: LabelSequence, rel_seq: LabelSequence,
                          vocab: Vocabulary, n_label_budget: int,
                          strategy: str, rng: np.random.Generator
                          ) -> tuple[LabelSequence, LabelSequence]:
    """Append out-of-batch labels: two thirds of the extension budget go to
    entity labels, one third to relation labels, sampled without
    replacement and never duplicating in-batch labels.

    ``uniform`` samples candidates equiprobably; ``frequency`` samples
    proportionally to corpus annotation counts. Quotas truncate when the
    vocabulary (or, under ``frequency``, its nonzero-count part) runs out.
    Returns the sequences unchanged when the budget is already exhausted.
    """
    if strategy not in ("uniform", "frequency"):
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    budget = n_label_budget - (len(ent_seq) + len(rel_seq))
    if budget <= 0:
        return ent_seq, rel_seq
    n_ent, n_rel = extension_quota(budget)
    ent_extra = _sample_labels(vocab.entity_labels, set(ent_seq.labels),
                               vocab.entity_freq, n_ent, strategy, rng)
    rel_extra = _sample_labels(vocab.relation_labels, set(rel_seq.labels),
                               vocab.relation_freq, n_rel, strategy, rng)
    new_ent = ent_seq.labels[:-1] + ent_extra + [NO_OBJECT_LABEL]
    ent_out = LabelSequence("entity", new_ent, ent_seq.n_in_batch,
                            no_object_index=len(new_ent) - 1)
    rel_out = LabelSequence("relation", rel_seq.labels + rel_extra, rel_seq.n_in_batch)
    return ent_out, rel_out


def _sample_labels(candidates: list[str], exclude: set[str], freq: dict[str, int],
                   count: int, strategy: str, rng: np.random.Generator) -> list[str]:
    pool = [c for c in candidates if c not in exclude and c != NO_OBJECT_LABEL]
    if count <= 0 or not pool:
        return []
    if strategy == "frequency":
        weights = np.array([freq.get(c, 0) for c in pool], dtype=np.float64)
        total = weights.sum()
        if total == 0:
            return []
        p = weights / total
        count = min(count, int((weights > 0).sum()))
        picks = rng.choice(len(pool), size=count, replace=False, p=p)
    else:
        count = min(count, len(pool))
        picks = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in picks]
