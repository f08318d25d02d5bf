"""Training objectives and the two relation-target transforms.

The relation branch is supervised per (query, label) element: annotated
labels start as hard ones, quality calibration (box-quality scaling) and
pseudo-labeling (embedding-distance expansion) soften them, after which the
Quality Focal form replaces the plain Focal form. Targets are treated as
constants: gradients flow through predictions only, never through the
quality scores or pseudo values, and the bipartite assignment is an input.

Scalar reference implementations (``focal_loss``, ``quality_focal_loss``,
``entity_ce_loss``) operate on plain probabilities/logits; the graph path
used by ``total_loss`` recomputes the same quantities from logits via
softplus for numerical stability. Tests pin the two against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import center_to_corner, giou_scaled01, giou_tensor
from .model import ModelOutput

PROV_NEGATIVE, PROV_ANNOTATED, PROV_RQL, PROV_PSEUDO = 0, 1, 2, 3

_PROB_FLOOR = 1e-12
_clamp_events = 0


def clamp_event_count() -> int:
    return _clamp_events


def reset_clamp_events() -> None:
    global _clamp_events
    _clamp_events = 0


def _clamped_log(p: np.ndarray) -> np.ndarray:
    global _clamp_events
    p = np.asarray(p, dtype=np.float64)
    low = p < _PROB_FLOOR
    _clamp_events += int(np.count_nonzero(low))
    return np.log(np.maximum(p, _PROB_FLOOR))


def focal_loss(p, gamma: float = 2.0):
    """-(1 - p)^gamma * log(p) on probabilities in (0, 1]."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    p = np.asarray(p, dtype=np.float64)
    out = -((1.0 - p) ** gamma) * _clamped_log(p)
    return float(out) if out.ndim == 0 else out


def quality_focal_loss(p, y, beta: float = 2.0):
    """|y - p|^beta * BCE(p, y) for soft targets y in [0, 1]; zero iff p == y."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    bce = -(y * _clamped_log(p) + (1.0 - y) * _clamped_log(1.0 - p))
    out = np.abs(y - p) ** beta * bce
    return float(out) if out.ndim == 0 else out


def entity_ce_loss(logits, target: int) -> float:
    """-log softmax(logits)[target] on a single row."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("empty logits")
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[target])


def box_losses(pred_center: np.ndarray, gt_center: np.ndarray) -> tuple[float, float]:
    """(mean absolute coordinate error, mean (1 - giou)) over matched pairs."""
    pred_center = np.asarray(pred_center, dtype=np.float64)
    gt_center = np.asarray(gt_center, dtype=np.float64)
    l1 = float(np.abs(pred_center - gt_center).mean()) if pred_center.size else 0.0
    if pred_center.size:
        from .geometry import giou as giou_np
        g = giou_np(center_to_corner(pred_center, 1.0), center_to_corner(gt_center, 1.0))
        g_loss = float(np.mean(1.0 - g))
    else:
        g_loss = 0.0
    return l1, g_loss


# -- relation target transforms --------------------------------------------


@dataclass
class RelationTargets:
    """Per-matched-query soft relation targets with per-entry provenance."""
    values: np.ndarray       # (n_matched, N_R) in [0, 1]
    provenance: np.ndarray   # uint8 codes (PROV_*)


def rql_calibrate(targets: RelationTargets,
                  pred_subject_boxes: np.ndarray, pred_object_boxes: np.ndarray,
                  gt_subject_boxes: np.ndarray, gt_object_boxes: np.ndarray
                  ) -> RelationTargets:
    """Scale each row by the worse of the subject/object detection
    qualities, measured as GIoU mapped to [0, 1]. Boxes are center-form in
    the normalized frame; predictions are detached values."""
    if len(targets.values) == 0:
        return targets
    qs = giou_scaled01(center_to_corner(pred_subject_boxes, 1.0),
                       center_to_corner(gt_subject_boxes, 1.0))
    qo = giou_scaled01(center_to_corner(pred_object_boxes, 1.0),
                       center_to_corner(gt_object_boxes, 1.0))
    quality = np.minimum(np.atleast_1d(qs), np.atleast_1d(qo))
    values = targets.values * quality[:, None]
    prov = targets.provenance.copy()
    scaled = (targets.provenance == PROV_ANNOTATED) & (quality[:, None] < 1.0)
    prov[scaled] = PROV_RQL
    return RelationTargets(values, prov)


def rpl_expand(targets: RelationTargets, annotated_rows: np.ndarray,
               relation_label_features: np.ndarray, eta: float) -> RelationTargets:
    """Add pseudo-positive labels whose scaled embedding distance clears the
    global threshold ``eta``.

    For row i with binary annotation R(i): M(i, j) = sum_k R(i, k) *
    ||f_k - f_j||_2 over the fused relation label features; the scaled
    score is (max_k M(i, k) - M(i, j)) / max_k M(i, k). Entries scoring
    above ``eta`` become pseudo labels carrying that score; annotated
    positives keep their upstream value; rows with an all-zero distance
    profile pass through unchanged."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    n = len(targets.values)
    if n == 0:
        return targets
    feats = np.asarray(relation_label_features, dtype=np.float64)
    diff = feats[:, None, :] - feats[None, :, :]
    dists = np.sqrt((diff * diff).sum(-1))
    values = targets.values.copy()
    prov = targets.provenance.copy()
    annotated = np.asarray(annotated_rows, dtype=np.float64)
    m = annotated @ dists                      # (n, N_R)
    for i in range(n):
        max_m = m[i].max()
        if max_m <= 0:
            continue
        scaled = (max_m - m[i]) / max_m
        pseudo = (scaled > eta) & (annotated[i] <= 0)
        values[i, pseudo] = scaled[pseudo]
        prov[i, pseudo] = PROV_PSEUDO
    return RelationTargets(values, prov)


def prepare_relation_targets(annotated_rows: np.ndarray,
                             pred_subject_boxes: np.ndarray,
                             pred_object_boxes: np.ndarray,
                             gt_subject_boxes: np.ndarray,
                             gt_object_boxes: np.ndarray,
                             relation_label_features: np.ndarray | None,
                             use_rql: bool, use_rpl: bool, eta: float
                             ) -> RelationTargets:
    """Annotated hard rows -> (optionally) quality-scaled -> (optionally)
    pseudo-expanded. Pseudo values are not quality-scaled."""
    values = np.asarray(annotated_rows, dtype=np.float64).copy()
    prov = np.where(values > 0, PROV_ANNOTATED, PROV_NEGATIVE).astype(np.uint8)
    targets = RelationTargets(values, prov)
    if use_rql:
        targets = rql_calibrate(targets, pred_subject_boxes, pred_object_boxes,
                                gt_subject_boxes, gt_object_boxes)
    if use_rpl:
        if relation_label_features is None:
            raise ValueError("pseudo-labeling needs relation label features")
        targets = rpl_expand(targets, annotated_rows, relation_label_features, eta)
    return targets


# -- composite objective -----------------------------------------------------


@dataclass
class LossWeights:
    l1: float = 2.5
    giou: float = 1.0
    cls: float = 1.0
    rel: float = 1.0


@dataclass
class SceneTargets:
    """Ground truth for one scene plus its query assignment.

    ``relation_targets`` rows align with the assignment order and are
    treated as constants by the loss.
    """
    assignment: np.ndarray        # (n_gt,) query indices
    subject_labels: np.ndarray    # (n_gt,) class indices
    object_labels: np.ndarray
    subject_boxes: np.ndarray     # (n_gt, 4) center form, normalized
    object_boxes: np.ndarray
    relation_targets: np.ndarray | None   # (n_gt, N_R) soft values


def _focal_terms(logits: Tensor, targets: np.ndarray, gamma: float) -> Tensor:
    """Elementwise focal loss from logits with hard 0/1 targets."""
    y = np.asarray(targets, dtype=np.float64)
    p = ad.sigmoid(logits)
    pos = ad.power(1.0 - p, gamma) * ad.softplus(-logits)
    neg = ad.power(p, gamma) * ad.softplus(logits)
    return ad.constant(y) * pos + ad.constant(1.0 - y) * neg


def _qfl_terms(logits: Tensor, targets: np.ndarray, beta: float) -> Tensor:
    """Elementwise quality focal loss from logits with soft targets."""
    y = ad.constant(np.asarray(targets, dtype=np.float64))
    p = ad.sigmoid(logits)
    bce = y * ad.softplus(-logits) + (1.0 - y) * ad.softplus(logits)
    return ad.power(ad.tabs(y - p), beta) * bce


def _weighted_ce(logits: Tensor, target_idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean CE over (B, N_Q) rows of (B, N_Q, C) logits."""
    b, nq, c = logits.shape
    onehot = np.zeros((b, nq, c))
    grid_b, grid_q = np.meshgrid(np.arange(b), np.arange(nq), indexing="ij")
    onehot[grid_b, grid_q, target_idx] = 1.0
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.tsum(logp * ad.constant(onehot), axis=-1)
    return -ad.tsum(picked * ad.constant(weights)) * (1.0 / weights.sum())


def total_loss(outputs: ModelOutput, targets: list[SceneTargets],
               no_object_index: int, mode: str = "pretrain",
               weights: LossWeights | None = None, soft_relation_targets: bool = False,
               gamma: float = 2.0, beta: float = 2.0,
               no_object_weight: float = 0.1) -> tuple[Tensor, dict]:
    """Weighted sum of box regression, GIoU, entity classification and
    relation terms over one batch.

    Matched queries supervise boxes, classes and positive relation labels;
    unmatched queries contribute the no-objects class (down-weighted by
    ``no_object_weight``) and negative relation terms. The subject CE term
    is dropped in fine-tune mode. Relation terms use the focal form for
    hard targets and the quality-focal form when ``soft_relation_targets``.
    """
    if mode not in ("pretrain", "finetune"):
        raise ValueError(f"unknown mode {mode!r}")
    w = weights or LossWeights()
    b, nq, _ = outputs.subject_logits.shape

    subj_idx = np.full((b, nq), no_object_index, dtype=np.intp)
    obj_idx = np.full((b, nq), no_object_index, dtype=np.intp)
    ce_weights = np.full((b, nq), no_object_weight)
    flat_matched: list[int] = []
    gt_sboxes, gt_oboxes = [], []
    for i, tg in enumerate(targets):
        if len(tg.assignment) == 0:
            continue
        subj_idx[i, tg.assignment] = tg.subject_labels
        obj_idx[i, tg.assignment] = tg.object_labels
        ce_weights[i, tg.assignment] = 1.0
        flat_matched.extend(i * nq + int(q) for q in tg.assignment)
        gt_sboxes.append(tg.subject_boxes)
        gt_oboxes.append(tg.object_boxes)

    ce_o = _weighted_ce(outputs.object_logits, obj_idx, ce_weights)
    if mode == "pretrain":
        ce_s = _weighted_ce(outputs.subject_logits, subj_idx, ce_weights)
        ce_total = ce_s + ce_o
        ce_s_val = ce_s.item()
    else:
        ce_total = ce_o
        ce_s_val = 0.0

    if flat_matched:
        idx = np.asarray(flat_matched, dtype=np.intp)
        gt_s = np.concatenate(gt_sboxes, axis=0)
        gt_o = np.concatenate(gt_oboxes, axis=0)
        d4 = outputs.subject_boxes.shape[-1]
        pred_s = ad.gather_rows(ad.reshape(outputs.subject_boxes, (b * nq, d4)), idx)
        pred_o = ad.gather_rows(ad.reshape(outputs.object_boxes, (b * nq, d4)), idx)
        pred_all = ad.concat([pred_s, pred_o], axis=0)
        gt_all = np.concatenate([gt_s, gt_o], axis=0)
        l1 = ad.tmean(ad.tabs(pred_all - ad.constant(gt_all)))
        g = giou_tensor(pred_all, center_to_corner(gt_all, 1.0))
        giou_loss = ad.tmean(1.0 - g)
    else:
        l1 = ad.constant(0.0)
        giou_loss = ad.constant(0.0)

    if outputs.relation_logits is not None:
        n_rel = outputs.relation_logits.shape[-1]
        rel_y = np.zeros((b, nq, n_rel))
        for i, tg in enumerate(targets):
            if tg.relation_targets is not None and len(tg.assignment):
                rel_y[i, tg.assignment] = tg.relation_targets
        terms = (_qfl_terms(outputs.relation_logits, rel_y, beta)
                 if soft_relation_targets
                 else _focal_terms(outputs.relation_logits, rel_y, gamma))
        rel_loss = ad.tsum(terms) * (1.0 / (b * nq))
    else:
        rel_loss = ad.constant(0.0)

    total = (w.l1 * l1 + w.giou * giou_loss + w.cls * ce_total + w.rel * rel_loss)
    breakdown = {
        "total": total.item(),
        "l1": l1.item(),
        "giou": giou_loss.item(),
        "ce_subject": ce_s_val,
        "ce_object": ce_o.item(),
        "relation": rel_loss.item(),
        "matched": len(flat_matched),
    }
    return total, breakdown
