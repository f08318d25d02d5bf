"""Triplet prediction, mAP evaluation over protocol splits, and the
uniformity/alignment representation metrics.

A prediction instance is one (query, relation-label) candidate scored by
sigmoid(relation logit) * top-1 object probability. A true positive needs
subject-box IoU > 0.5 AND object-box IoU > 0.5 against a not-yet-matched
ground-truth triplet of the same (relation, object-label) class, consumed
greedily in score order. Per-class AP uses all-point interpolation (exact
area under the precision envelope); a split's mAP averages classes with at
least one ground-truth instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import Scene, Vocabulary
from .geometry import center_to_corner, iou
from .matching import MatchWeights, hungarian_assign, match_cost
from .model import ParSe
from .text import full_label_sequences
from .training import (Checkpoint, build_model, scene_pair_ground_truth,
                       _sigmoid_np, _softmax_np, images_array)

DEFAULT_TOP_K = 100
DEFAULT_IOU_THRESHOLD = 0.5


@dataclass
class TripletPrediction:
    subject_box: np.ndarray          # corner form, pixels
    object_box: np.ndarray
    subject_probs: np.ndarray        # softmax over entity labels + no-objects
    object_probs: np.ndarray
    relation_scores: np.ndarray      # sigmoid scores over the eval vocabulary
    relation_label: str
    object_label: str
    score: float
    query_index: int
    relation_feature: np.ndarray     # (D,), retained for metrics


@dataclass
class EvalReport:
    protocol: str
    per_class_ap: dict[str, float]
    aggregates: dict[str, float | None]
    class_counts: dict[str, int]
    n_scenes: int
    n_predictions: int
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "protocol": self.protocol,
            "aggregates": self.aggregates,
            "per_class_ap": self.per_class_ap,
            "class_counts": self.class_counts,
            "n_scenes": self.n_scenes,
            "n_predictions": self.n_predictions,
            "details": self.details,
        }, indent=2, sort_keys=True)


def class_key(relation: str, object_label: str) -> str:
    return f"{relation}|{object_label}"


def predict_triplets(model: ParSe, scenes: list[Scene], vocab: Vocabulary,
                     top_k: int = DEFAULT_TOP_K, nf_filter: bool = False,
                     agent_label: str | None = None, batch_size: int = 16,
                     score_rng: np.random.Generator | None = None
                     ) -> list[list[TripletPrediction]]:
    """Ranked top-K predictions per scene using the full downstream
    vocabulary as the label sequence.

    ``nf_filter`` drops queries whose subject argmax is not ``agent_label``
    before ranking. ``score_rng`` replaces every candidate score with a
    uniform random draw (the chance baseline), leaving localization and
    object classes untouched.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if nf_filter and agent_label is None:
        raise ValueError("nf_filter requires an agent label")
    ent_seq, rel_seq = full_label_sequences(vocab)
    if not rel_seq.labels:
        raise ValueError("empty relation vocabulary")
    agent_index = ent_seq.index_of(agent_label) if agent_label is not None else -1
    no_object_index = ent_seq.no_object_index

    results: list[list[TripletPrediction]] = []
    for start in range(0, len(scenes), batch_size):
        batch = scenes[start : start + batch_size]
        images = images_array(batch)
        with ad.no_grad():
            out = model.forward_align(images, ent_seq, rel_seq, with_relations=True)
            subj_probs = _softmax_np(out.subject_logits.data)
            obj_probs = _softmax_np(out.object_logits.data)
            rel_sig = _sigmoid_np(out.relation_logits.data)
            rel_feats = out.relation_features.data
            s_boxes = out.subject_boxes.data
            o_boxes = out.object_boxes.data
        for i, scene in enumerate(batch):
            results.append(_rank_scene(
                scene, subj_probs[i], obj_probs[i], rel_sig[i], rel_feats[i],
                s_boxes[i], o_boxes[i], ent_seq.labels, rel_seq.labels,
                no_object_index, agent_index if nf_filter else -1,
                top_k, score_rng))
    return results


def _rank_scene(scene, subj_probs, obj_probs, rel_sig, rel_feats,
                s_boxes, o_boxes, ent_labels, rel_labels,
                no_object_index, agent_index, top_k, score_rng):
    n_q, n_rel = rel_sig.shape
    size = (scene.width, scene.height)
    s_corner = center_to_corner(s_boxes, size)
    o_corner = center_to_corner(o_boxes, size)
    real_obj = obj_probs[:, :no_object_index]
    obj_cls = real_obj.argmax(axis=1)
    obj_score = real_obj[np.arange(n_q), obj_cls]
    final = rel_sig * obj_score[:, None]
    if score_rng is not None:
        final = score_rng.uniform(size=final.shape)
    keep_queries = np.arange(n_q)
    if agent_index >= 0:
        keep_queries = keep_queries[subj_probs.argmax(axis=1) == agent_index]
    if keep_queries.size == 0:
        return []
    cand = [(float(final[q, r]), int(q), int(r)) for q in keep_queries for r in range(n_rel)]
    cand.sort(key=lambda t: (-t[0], t[1], t[2]))
    preds = []
    for score, q, r in cand[:top_k]:
        preds.append(TripletPrediction(
            subject_box=s_corner[q], object_box=o_corner[q],
            subject_probs=subj_probs[q], object_probs=obj_probs[q],
            relation_scores=rel_sig[q], relation_label=rel_labels[r],
            object_label=ent_labels[obj_cls[q]], score=score,
            query_index=q, relation_feature=rel_feats[q]))
    return preds


# -- mAP ----------------------------------------------------------------------


def average_precision(flags: list[bool], n_positive: int) -> float:
    """All-point interpolated AP from TP/FP flags already sorted by score."""
    if n_positive == 0:
        return 0.0
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / n_positive
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.where(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]).sum())


def evaluate_map(predictions: list[list[TripletPrediction]], scenes: list[Scene],
                 vocab: Vocabulary | None = None,
                 rare_classes: set | None = None,
                 unseen_combos: set | None = None,
                 iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                 protocol: str = "finetune") -> EvalReport:
    """Score predictions against ground truth and aggregate per split."""
    if len(predictions) != len(scenes):
        raise ValueError("predictions and scenes differ in length")
    if vocab is not None:
        known_rel = set(vocab.relation_labels)
        known_ent = set(vocab.entity_labels)
        for preds in predictions:
            for p in preds:
                if p.relation_label not in known_rel or p.object_label not in known_ent:
                    raise ValueError(
                        f"prediction class ({p.relation_label}, {p.object_label}) "
                        "absent from vocabulary")

    gt_by_class: dict[tuple[str, str], dict[int, list]] = {}
    counts: dict[tuple[str, str], int] = {}
    for si, scene in enumerate(scenes):
        ents = {e.id: e for e in scene.entities}
        for t in scene.triplets:
            cls = (t.relation, ents[t.object].label)
            counts[cls] = counts.get(cls, 0) + 1
            gt_by_class.setdefault(cls, {}).setdefault(si, []).append(
                [np.asarray(ents[t.subject].box), np.asarray(ents[t.object].box), False])

    pred_by_class: dict[tuple[str, str], list] = {}
    n_predictions = 0
    for si, preds in enumerate(predictions):
        for p in preds:
            n_predictions += 1
            cls = (p.relation_label, p.object_label)
            pred_by_class.setdefault(cls, []).append((p.score, si, p))

    per_class_ap: dict[str, float] = {}
    for cls, n_pos in counts.items():
        entries = sorted(pred_by_class.get(cls, []), key=lambda e: (-e[0], e[1]))
        flags = []
        scene_gts = gt_by_class[cls]
        for score, si, p in entries:
            flags.append(_claim_gt(scene_gts.get(si, []), p, iou_threshold))
        per_class_ap[class_key(*cls)] = average_precision(flags, n_pos)

    def agg(selector) -> float | None:
        aps = [per_class_ap[class_key(*c)] for c in counts if selector(c)]
        return float(np.mean(aps)) if aps else None

    aggregates: dict[str, float | None] = {"Full": agg(lambda c: True)}
    if rare_classes is not None:
        aggregates["Rare"] = agg(lambda c: c in rare_classes)
        aggregates["Non-Rare"] = agg(lambda c: c not in rare_classes)
    if unseen_combos is not None:
        unseen = {tuple(c) for c in unseen_combos}
        aggregates["Unseen"] = agg(lambda c: c in unseen)
        aggregates["Seen"] = agg(lambda c: c not in unseen)
    return EvalReport(
        protocol=protocol, per_class_ap=per_class_ap, aggregates=aggregates,
        class_counts={class_key(*c): n for c, n in counts.items()},
        n_scenes=len(scenes), n_predictions=n_predictions)


def _claim_gt(gt_list, pred, threshold) -> bool:
    """Greedily consume the best-overlap unmatched GT; True on a hit."""
    best, best_q = -1, -1.0
    for gi, (s_box, o_box, used) in enumerate(gt_list):
        if used:
            continue
        q = min(iou(pred.subject_box, s_box), iou(pred.object_box, o_box))
        if q > threshold and q > best_q:
            best, best_q = gi, q
    if best >= 0:
        gt_list[best][2] = True
        return True
    return False


# -- representation metrics ------------------------------------------------------


def representation_metrics(features: np.ndarray, positive_features: np.ndarray,
                           t: float = 2.0, alpha: float = 2.0) -> tuple[float, float]:
    """Hypersphere quality metrics on L2-normalized features.

    uniformity = log mean over unordered distinct feature pairs of
    exp(-t * ||f_x - f_y||^2); alignment = mean over positive pairs of
    ||f_x - f_y||^alpha. Needs at least two features.
    """
    f = _l2_normalize(np.asarray(features, dtype=np.float64))
    if f.shape[0] < 2:
        raise ValueError("uniformity needs at least two features")
    g = _l2_normalize(np.asarray(positive_features, dtype=np.float64))
    if g.shape != f.shape:
        raise ValueError("feature/positive shapes differ")
    sq = np.sum(f * f, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (f @ f.T)
    iu = np.triu_indices(f.shape[0], k=1)
    uniformity = float(np.log(np.mean(np.exp(-t * np.maximum(d2[iu], 0.0)))))
    align = float(np.mean(np.sum((f - g) ** 2, axis=1) ** (alpha / 2.0)))
    return uniformity, align


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def collect_relation_pairs(model: ParSe, scenes: list[Scene], vocab: Vocabulary,
                           batch_size: int = 16,
                           match_weights: MatchWeights | None = None
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Matched (relation query feature, fused text feature of the assigned
    ground-truth relation label) pairs from a zero-shot pass; one pair per
    positive label of each matched query."""
    ent_seq, rel_seq = full_label_sequences(vocab)
    rel_map = {lbl: i for i, lbl in enumerate(rel_seq.labels)}
    ent_map = {lbl: i for i, lbl in enumerate(ent_seq.labels)}
    weights = match_weights or MatchWeights()
    q_feats, t_feats = [], []
    for start in range(0, len(scenes), batch_size):
        batch = scenes[start : start + batch_size]
        with ad.no_grad():
            out = model.forward_align(images_array(batch), ent_seq, rel_seq)
            subj_probs = _softmax_np(out.subject_logits.data)
            obj_probs = _softmax_np(out.object_logits.data)
            rel_sig = _sigmoid_np(out.relation_logits.data)
        for i, scene in enumerate(batch):
            gt = scene_pair_ground_truth(scene, ent_map, rel_map)
            if len(gt.subject_labels) == 0:
                continue
            cost = match_cost(subj_probs[i], obj_probs[i], rel_sig[i],
                              out.subject_boxes.data[i], out.object_boxes.data[i],
                              gt.subject_labels, gt.object_labels, gt.relation_rows,
                              gt.subject_boxes, gt.object_boxes, weights)
            assign = hungarian_assign(cost)
            text_feats = out.relation_label_features.data[i]
            query_feats = out.relation_features.data[i]
            for j, q in enumerate(assign):
                for r in np.flatnonzero(gt.relation_rows[j]):
                    q_feats.append(query_feats[q])
                    t_feats.append(text_feats[r])
    if not q_feats:
        return np.zeros((0, model.config.hidden_dim)), np.zeros((0, model.config.hidden_dim))
    return np.stack(q_feats), np.stack(t_feats)


# -- protocol orchestration --------------------------------------------------------


PROTOCOLS = ("finetune", "NF", "UC-RF", "UC-NF", "fewshot", "noise")


def run_protocol(checkpoint: Checkpoint, scenes: list[Scene], vocab: Vocabulary,
                 protocol: str, options: dict | None = None) -> EvalReport:
    """Predict and evaluate a checkpoint under one protocol.

    Options: ``top_k``, ``iou_threshold``, ``agent_label`` (enables the
    subject filter for NF), ``rare_classes`` (set of (relation, object)
    tuples), ``unseen_combos`` (UC protocols), ``chance_seed`` (replaces all
    scores with uniform random draws), ``batch_size``.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r} (missing split definition?)")
    opts = options or {}
    model = build_model(checkpoint)
    rng = (np.random.default_rng(opts["chance_seed"])
           if opts.get("chance_seed") is not None else None)
    nf_filter = protocol == "NF" and opts.get("agent_label") is not None
    preds = predict_triplets(
        model, scenes, vocab,
        top_k=opts.get("top_k", DEFAULT_TOP_K),
        nf_filter=nf_filter, agent_label=opts.get("agent_label"),
        batch_size=opts.get("batch_size", 16), score_rng=rng)
    if protocol in ("UC-RF", "UC-NF"):
        if "unseen_combos" not in opts:
            raise ValueError(f"{protocol} needs an unseen_combos split definition")
        report = evaluate_map(preds, scenes, vocab,
                              unseen_combos=set(map(tuple, opts["unseen_combos"])),
                              iou_threshold=opts.get("iou_threshold", DEFAULT_IOU_THRESHOLD),
                              protocol=protocol)
    else:
        rare = opts.get("rare_classes")
        report = evaluate_map(preds, scenes, vocab,
                              rare_classes=set(map(tuple, rare)) if rare else None,
                              iou_threshold=opts.get("iou_threshold", DEFAULT_IOU_THRESHOLD),
                              protocol=protocol)
    report.details["checkpoint_epoch"] = checkpoint.epoch
    if rng is not None:
        report.details["chance_baseline"] = True
    return report
