"""The triplet-detection network: patch encoding with cross-modal fusion,
parallel entity decoding, conditional relation-query generation, sequential
relation decoding, and the alignment / box / classifier heads.

Subject, object and relation features are fully decoupled: two independent
query sets run jointly through the entity decoder (so index-paired queries
can coordinate through self-attention), their outputs are summed index-wise
into relation queries, and a second decoder refines those against the image
features. Classification is either alignment against fused text features
(language-image modes) or a plain linear classifier (uni-modal detection
and relation-detection pre-training).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor
from .nn import Linear, MLP, TransformerDecoder, TransformerEncoder, embedding_init
from .text import LabelSequence, TextEncoder


@dataclass
class ParSeConfig:
    hidden_dim: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 3
    ffn_dim: int = 128
    n_queries: int = 20
    patch_size: int = 8
    image_size: int = 64
    text_layers: int = 2
    text_ffn_dim: int = 64
    max_label_tokens: int = 3
    focal_gamma: float = 2.0
    qfl_beta: float = 2.0
    bias_prior: float = 0.01
    n_entity_classes: int = 0      # uni-modal classifier head sizes
    n_relation_classes: int = 0
    tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")

    @property
    def n_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ParSeConfig":
        return cls(**doc)


def prior_bias(pi: float) -> float:
    """The constant added to relation logits so untrained sigmoid scores
    calibrate near ``pi``."""
    return -math.log((1.0 - pi) / pi)


def inverse_sigmoid(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-4, 1 - 1e-4)
    return np.log(p / (1.0 - p))


def reference_grid(n_queries: int, box_size: float = 0.35) -> np.ndarray:
    """Pre-sigmoid box priors on a regular grid of centers: queries start
    owning distinct image regions, which keeps bipartite matching stable
    early in training."""
    cols = math.ceil(math.sqrt(n_queries))
    rows = math.ceil(n_queries / cols)
    refs = np.zeros((n_queries, 4))
    for i in range(n_queries):
        r, c = divmod(i, cols)
        refs[i] = [(c + 0.5) / cols, (r + 0.5) / rows, box_size, box_size]
    return inverse_sigmoid(refs)


@dataclass
class ModelOutput:
    image_features: Tensor                  # (B, P, D)
    entity_label_features: Tensor | None    # (B, N_E, D) fused
    relation_label_features: Tensor | None  # (B, N_R, D) fused
    subject_features: Tensor                # (B, N_Q, D)
    object_features: Tensor
    relation_features: Tensor | None
    subject_boxes: Tensor                   # (B, N_Q, 4) center form in [0,1]
    object_boxes: Tensor
    subject_logits: Tensor                  # (B, N_Q, N_E) or classifier width
    object_logits: Tensor
    relation_logits: Tensor | None          # (B, N_Q, N_R)


class ParSe:
    def __init__(self, config: ParSeConfig, rng: np.random.Generator):
        self.config = config
        p = Parameters()
        self.params = p
        d, heads = config.hidden_dim, config.heads
        patch_dim = config.patch_size * config.patch_size * 3
        self.text = TextEncoder(p, "text", config.tokens, d, heads,
                                config.text_layers, config.text_ffn_dim,
                                config.max_label_tokens, rng)
        self.patch_proj = Linear(p, "image.patch", patch_dim, d, rng)
        self.patch_pos = p.create("image.pos", embedding_init(rng, (config.n_patches, d)))
        self.fusion = TransformerEncoder(p, "fusion", d, heads, config.ffn_dim,
                                         config.enc_layers, rng)
        self.entity_decoder = TransformerDecoder(p, "entity_decoder", d, heads,
                                                 config.ffn_dim, config.dec_layers, rng)
        self.relation_decoder = TransformerDecoder(p, "relation_decoder", d, heads,
                                                   config.ffn_dim, config.dec_layers, rng)
        self.subject_queries = p.create("queries.subject",
                                        embedding_init(rng, (config.n_queries, d)))
        self.object_queries = p.create("queries.object",
                                       embedding_init(rng, (config.n_queries, d)))
        self.subject_refs = p.create("queries.subject_ref", reference_grid(config.n_queries))
        self.object_refs = p.create("queries.object_ref", reference_grid(config.n_queries))
        self.box_head = MLP(p, "box_head", [d, d, d, 4], rng)
        self.relation_bias = Linear(p, "relation_bias", d, d, rng, bias=False)
        if config.n_entity_classes:
            self.entity_classifier = Linear(p, "classifier.entity", d,
                                            config.n_entity_classes + 1, rng)
        if config.n_relation_classes:
            self.relation_classifier = Linear(p, "classifier.relation", d,
                                              config.n_relation_classes, rng)

    # -- encoding ---------------------------------------------------------

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W, 3) rasters -> (B, P, patch_size^2 * 3), centered."""
        ps = self.config.patch_size
        b, h, w, c = images.shape
        if h != self.config.image_size or w != self.config.image_size:
            raise ValueError(f"expected {self.config.image_size}^2 images, got {h}x{w}")
        x = images.reshape(b, h // ps, ps, w // ps, ps, c)
        x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, self.config.n_patches, ps * ps * c)
        return x.astype(np.float64) - 0.5

    def image_tokens(self, images: np.ndarray) -> Tensor:
        x = self.patch_proj(ad.constant(self.patchify(images)))
        return x + self.patch_pos

    def encode_and_fuse(
        self, images: np.ndarray,
        entity_seq: LabelSequence | None, relation_seq: LabelSequence | None,
    ) -> tuple[Tensor, Tensor | None, Tensor | None]:
        """Run the shared encoder over [patch tokens; entity label features;
        relation label features] with full attention and split the output.
        Label tokens carry no positional encodings. Sequences may be None
        (uni-modal mode), in which case the encoder sees patches only."""
        tokens = self.image_tokens(images)
        b = tokens.shape[0]
        d = self.config.hidden_dim
        parts = [tokens]
        n_ent = n_rel = 0
        if entity_seq is not None and len(entity_seq):
            ent = self.text.encode_sequence(entity_seq)
            entity_seq.features = ent
            n_ent = ent.shape[0]
            parts.append(ad.broadcast_to(ad.reshape(ent, (1, n_ent, d)), (b, n_ent, d)))
        if relation_seq is not None and len(relation_seq):
            rel = self.text.encode_sequence(relation_seq)
            relation_seq.features = rel
            n_rel = rel.shape[0]
            parts.append(ad.broadcast_to(ad.reshape(rel, (1, n_rel, d)), (b, n_rel, d)))
        fused = self.fusion(parts[0] if len(parts) == 1 else ad.concat(parts, axis=1))
        n_patch = self.config.n_patches
        image_feats = ad.narrow(fused, 1, 0, n_patch)
        ent_feats = ad.narrow(fused, 1, n_patch, n_ent) if n_ent else None
        rel_feats = ad.narrow(fused, 1, n_patch + n_ent, n_rel) if n_rel else None
        return image_feats, ent_feats, rel_feats

    # -- decoding ---------------------------------------------------------

    def decode_entities(self, image_feats: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Joint decode of both query sets; returns subject/object features
        and center-form boxes from the shared box head (offsets against each
        query's learned reference box)."""
        b = image_feats.shape[0]
        nq, d = self.config.n_queries, self.config.hidden_dim
        queries = ad.concat([self.subject_queries, self.object_queries], axis=0)
        queries = ad.broadcast_to(ad.reshape(queries, (1, 2 * nq, d)), (b, 2 * nq, d))
        decoded = self.entity_decoder(queries, image_feats,
                                      memory_keys=self._positional_keys(image_feats))
        refs = ad.concat([self.subject_refs, self.object_refs], axis=0)
        boxes = self.predict_boxes(decoded, refs)
        subj = ad.narrow(decoded, 1, 0, nq)
        obj = ad.narrow(decoded, 1, nq, nq)
        return subj, obj, ad.narrow(boxes, 1, 0, nq), ad.narrow(boxes, 1, nq, nq)

    def _positional_keys(self, image_feats: Tensor) -> Tensor:
        # cross-attention keys carry patch positions again; values stay pure
        return image_feats + self.patch_pos

    def predict_boxes(self, features: Tensor, reference_logits: Tensor) -> Tensor:
        return ad.sigmoid(self.box_head(features) + reference_logits)

    @staticmethod
    def relation_queries(subject_features: Tensor, object_features: Tensor) -> Tensor:
        """Conditional query generation: index-matched addition."""
        if subject_features.shape != object_features.shape:
            raise ValueError("subject/object feature shapes differ")
        return subject_features + object_features

    def decode_relations(self, relation_queries: Tensor, image_feats: Tensor) -> Tensor:
        return self.relation_decoder(relation_queries, image_feats,
                                     memory_keys=self._positional_keys(image_feats))

    # -- heads --------------------------------------------------------------

    def _alignment_scale(self) -> float:
        # fixed temperature keeps initial logits near zero so the prior
        # bias dominates untrained relation scores
        return 1.0 / math.sqrt(self.config.hidden_dim)

    def entity_alignment_logits(self, features: Tensor, label_feats: Tensor) -> Tensor:
        """(B, N_Q, D) x (B, N_E, D) -> (B, N_Q, N_E); softmax downstream."""
        if label_feats.shape[-2] == 0:
            raise ValueError("empty entity label sequence")
        return (features @ ad.swap_last2(label_feats)) * self._alignment_scale()

    def relation_alignment_logits(self, features: Tensor, label_feats: Tensor) -> Tensor:
        """(B, N_Q, D) x (B, N_R, D) -> (B, N_Q, N_R) logits with the learned
        bias projection and the constant prior offset; sigmoid downstream."""
        if label_feats.shape[-2] == 0:
            raise ValueError("empty relation label sequence")
        sim = features @ ad.swap_last2(label_feats)
        bias = features @ ad.swap_last2(self.relation_bias(label_feats))
        return (sim + bias) * self._alignment_scale() + prior_bias(self.config.bias_prior)

    # -- full passes --------------------------------------------------------

    def forward_align(self, images: np.ndarray, entity_seq: LabelSequence,
                      relation_seq: LabelSequence | None,
                      with_relations: bool = True) -> ModelOutput:
        """Language-image pass: classification by alignment with fused label
        features (pre-training and fine-tuning)."""
        image_feats, ent_feats, rel_feats = self.encode_and_fuse(
            images, entity_seq, relation_seq)
        subj, obj, boxes_s, boxes_o = self.decode_entities(image_feats)
        rel = rel_logits = None
        if with_relations and rel_feats is not None:
            rel = self.decode_relations(self.relation_queries(subj, obj), image_feats)
            rel_logits = self.relation_alignment_logits(rel, rel_feats)
        return ModelOutput(
            image_features=image_feats,
            entity_label_features=ent_feats,
            relation_label_features=rel_feats,
            subject_features=subj, object_features=obj, relation_features=rel,
            subject_boxes=boxes_s, object_boxes=boxes_o,
            subject_logits=self.entity_alignment_logits(subj, ent_feats),
            object_logits=self.entity_alignment_logits(obj, ent_feats),
            relation_logits=rel_logits,
        )

    def forward_classifier(self, images: np.ndarray,
                           with_relations: bool) -> ModelOutput:
        """Uni-modal pass: linear classifier heads, no text (detection-only
        when ``with_relations`` is false, relation detection otherwise)."""
        if not self.config.n_entity_classes:
            raise ValueError("model built without classifier heads")
        image_feats, _, _ = self.encode_and_fuse(images, None, None)
        subj, obj, boxes_s, boxes_o = self.decode_entities(image_feats)
        rel = rel_logits = None
        if with_relations:
            if not self.config.n_relation_classes:
                raise ValueError("model built without a relation classifier head")
            rel = self.decode_relations(self.relation_queries(subj, obj), image_feats)
            rel_logits = self.relation_classifier(rel) + prior_bias(self.config.bias_prior)
        return ModelOutput(
            image_features=image_feats,
            entity_label_features=None, relation_label_features=None,
            subject_features=subj, object_features=obj, relation_features=rel,
            subject_boxes=boxes_s, object_boxes=boxes_o,
            subject_logits=self.entity_classifier(subj),
            object_logits=self.entity_classifier(obj),
            relation_logits=rel_logits,
        )
