"""Training loops, optimizer, schedules and checkpointing.

Three pre-training paradigms share one loop:
  - ``rlip``: cross-modal alignment against in-batch (optionally extended)
    label sequences,
  - ``relation_detection``: uni-modal linear classifiers over the corpus
    vocabulary for entities and relations,
  - ``detection_only``: entity branch only.

Fine-tuning always runs the alignment path over the full downstream
vocabulary, drops the subject classification term and uses its own query
count (query embeddings truncate to the first rows when loading a larger
checkpoint).

Checkpoint file layout: magic ``RLIPCKPT``, u32 version, u64 manifest
length, UTF-8 JSON manifest, then little-endian float32 parameter payloads
in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters
from .dataset import Scene, Vocabulary
from .geometry import corner_to_center
from .losses import (LossWeights, SceneTargets, prepare_relation_targets,
                     total_loss)
from .matching import MatchWeights, hungarian_assign, match_cost
from .model import ModelOutput, ParSe, ParSeConfig
from .text import (LabelSequence, build_label_sequences, extend_label_sequence,
                   full_label_sequences)

CHECKPOINT_MAGIC = b"RLIPCKPT"
CHECKPOINT_VERSION = 1

ENCODER_PREFIXES = ("image.", "fusion.", "text.")

PARADIGMS = ("rlip", "relation_detection", "detection_only")


@dataclass
class TrainConfig:
    mode: str = "pretrain"              # pretrain | finetune
    paradigm: str = "rlip"              # pretraining paradigm
    epochs: int = 30
    batch_size: int = 8
    lr_main: float = 1e-4
    lr_encoders: float = 1e-5
    lr_drop_epoch: int = 24
    lr_drop_factor: float = 10.0
    seed: int = 0
    use_lse: bool = True
    use_rql: bool = True
    use_rpl: bool = True
    sampling: str = "frequency"         # uniform | frequency
    n_label_budget: int = 500
    eta: float = 0.3
    n_queries: int = 20
    weight_decay: float = 0.0
    grad_clip: float | None = None      # L2 threshold; None disables
    no_object_weight: float = 0.1
    loss_weights: tuple[float, float, float, float] = (2.5, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}")
        if self.lr_main <= 0 or self.lr_encoders <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.lr_drop_epoch < max(self.epochs, 1):
            raise ValueError("lr_drop_epoch must fall before the last epoch")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "loss_weights" in doc:
            doc["loss_weights"] = tuple(doc["loss_weights"])
        return cls(**doc)


def desk_pretrain_config(**overrides) -> TrainConfig:
    """CPU-trainable defaults: 30 epochs, drop at 24, 20 queries."""
    return TrainConfig(**{**dict(mode="pretrain", epochs=30, lr_drop_epoch=24,
                                 n_queries=20, n_label_budget=48), **overrides})


def desk_finetune_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**dict(mode="finetune", epochs=10, lr_drop_epoch=8,
                                 n_queries=12, use_lse=False, use_rql=False,
                                 use_rpl=False), **overrides})


def paper_pretrain_config(**overrides) -> TrainConfig:
    """The full-scale schedule kept as a named preset (not desk-runnable)."""
    return TrainConfig(**{**dict(mode="pretrain", epochs=50, lr_drop_epoch=40,
                                 n_queries=100, n_label_budget=500), **overrides})


def make_model_config(vocab: Vocabulary, n_queries: int, **arch_overrides) -> ParSeConfig:
    """Architecture config bound to a vocabulary; classifier heads are always
    allocated so checkpoints stay uniform across paradigms."""
    return ParSeConfig(n_queries=n_queries,
                       n_entity_classes=len(vocab.entity_labels),
                       n_relation_classes=len(vocab.relation_labels),
                       tokens=list(vocab.tokens), **arch_overrides)


# -- optimizer ------------------------------------------------------------------


class AdamW:
    """Adaptive-moment optimizer with bias correction, decoupled weight decay
    and two learning-rate groups (encoders vs the rest)."""

    def __init__(self, params: Parameters, lr_main: float, lr_encoders: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.skipped_steps = 0
        self.group_lr = {name: (lr_encoders if name.startswith(ENCODER_PREFIXES)
                                else lr_main)
                         for name in params.names()}
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, lr_scale: float = 1.0) -> bool:
        """One update from the accumulated gradients; returns False (and
        leaves all state untouched) when any gradient is non-finite."""
        grads = {}
        for name, tensor in self.params.items():
            g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            if not np.all(np.isfinite(g)):
                self.skipped_steps += 1
                return False
            grads[name] = g
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, tensor in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            lr = self.group_lr[name] * lr_scale
            if self.weight_decay:
                tensor.data -= lr * self.weight_decay * tensor.data
            tensor.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return True


def clip_gradients(params: Parameters, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for _, t in params.items():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = total**0.5
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, t in params.items():
            if t.grad is not None:
                t.grad *= scale
    return norm


# -- checkpoints ------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ParSeConfig
    params: dict[str, np.ndarray]        # float32 payload arrays
    epoch: int = 0
    rng_state: dict | None = None
    train_config: dict | None = None
    metrics: list = field(default_factory=list)

    @classmethod
    def from_model(cls, model: ParSe, epoch: int = 0, rng: np.random.Generator | None = None,
                   train_config: TrainConfig | None = None, metrics: list | None = None
                   ) -> "Checkpoint":
        params = {name: t.data.astype(np.float32)
                  for name, t in model.params.items()}
        return cls(model.config, params, epoch,
                   rng.bit_generator.state if rng is not None else None,
                   train_config.to_dict() if train_config else None,
                   metrics or [])


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    entries = [{"name": name, "shape": list(arr.shape), "dtype": "float32"}
               for name, arr in ckpt.params.items()]
    manifest = {
        "config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "metrics": ckpt.metrics,
        "params": entries,
    }
    blob = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for entry in entries:
            f.write(np.ascontiguousarray(ckpt.params[entry["name"]], dtype="<f4").tobytes())


def load_checkpoint(path: Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 12 or not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"not a checkpoint file: {path}")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unknown checkpoint version {version}")
    (manifest_len,) = struct.unpack_from("<Q", raw, off + 4)
    off += 12
    manifest = json.loads(raw[off : off + manifest_len].decode("utf-8"))
    off += manifest_len
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        if off + nbytes > len(raw):
            raise ValueError(f"truncated checkpoint payload in {path}")
        params[entry["name"]] = np.frombuffer(
            raw[off : off + nbytes], dtype="<f4").reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise ValueError(f"trailing bytes in checkpoint {path}")
    return Checkpoint(ParSeConfig.from_dict(manifest["config"]), params,
                      manifest["epoch"], manifest["rng_state"],
                      manifest["train_config"], manifest.get("metrics", []))


def load_into_model(ckpt: Checkpoint, model: ParSe) -> None:
    """Load checkpoint parameters, truncating query embeddings to the
    model's first rows when the checkpoint carries more (pretrain -> finetune
    query-count transfer); every other shape must match exactly."""
    arrays = {}
    n_q = model.config.n_queries
    for name, arr in ckpt.params.items():
        if name not in model.params:
            raise KeyError(f"checkpoint parameter {name} unknown to the model")
        target_shape = model.params[name].shape
        value = arr
        if name.startswith("queries.") and arr.shape[0] != target_shape[0]:
            if arr.shape[0] < n_q:
                raise ValueError(
                    f"checkpoint has {arr.shape[0]} query rows, model needs {n_q}")
            value = arr[:n_q]
        if value.shape != target_shape:
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {value.shape} vs model {target_shape}")
        arrays[name] = value
    model.params.load_arrays({k: v.astype(np.float64) for k, v in arrays.items()})


def build_model(ckpt: Checkpoint) -> ParSe:
    model = ParSe(ckpt.model_config, np.random.default_rng(0))
    load_into_model(ckpt, model)
    return model


# -- batch assembly ---------------------------------------------------------------


@dataclass
class PairGroundTruth:
    """Per-scene triplets merged by (subject, object) pair: one matching unit
    per pair with a multi-hot relation row."""
    subject_labels: np.ndarray
    object_labels: np.ndarray
    relation_rows: np.ndarray          # (n_pairs, N_R) binary
    subject_boxes: np.ndarray          # center form, normalized
    object_boxes: np.ndarray


def scene_pair_ground_truth(scene: Scene, entity_index: dict[str, int],
                            relation_index: dict[str, int]) -> PairGroundTruth:
    ent = {e.id: e for e in scene.entities}
    pairs: dict[tuple[int, int], int] = {}
    rows: list[np.ndarray] = []
    s_lab, o_lab, s_box, o_box = [], [], [], []
    n_rel = len(relation_index)
    size = (scene.width, scene.height)
    for t in scene.triplets:
        key = (t.subject, t.object)
        if key not in pairs:
            pairs[key] = len(rows)
            rows.append(np.zeros(n_rel))
            s_lab.append(entity_index[ent[t.subject].label])
            o_lab.append(entity_index[ent[t.object].label])
            s_box.append(corner_to_center(ent[t.subject].box, size))
            o_box.append(corner_to_center(ent[t.object].box, size))
        rows[pairs[key]][relation_index[t.relation]] = 1.0
    if not rows:
        empty = np.zeros((0, 4))
        return PairGroundTruth(np.zeros(0, np.intp), np.zeros(0, np.intp),
                               np.zeros((0, n_rel)), empty, empty)
    return PairGroundTruth(np.asarray(s_lab, np.intp), np.asarray(o_lab, np.intp),
                           np.stack(rows), np.stack(s_box), np.stack(o_box))


def images_array(batch: list[Scene]) -> np.ndarray:
    missing = [sc.id for sc in batch if sc.image is None]
    if missing:
        raise ValueError(f"scenes without images: {missing[:3]}")
    return np.stack([sc.image for sc in batch]).astype(np.float64)


def match_batch(outputs: ModelOutput, ground_truths: list[PairGroundTruth],
                weights: MatchWeights) -> list[np.ndarray]:
    """Hungarian assignment per scene on detached model outputs."""
    with ad.no_grad():
        subj_probs = _softmax_np(outputs.subject_logits.data)
        obj_probs = _softmax_np(outputs.object_logits.data)
        rel_scores = (_sigmoid_np(outputs.relation_logits.data)
                      if outputs.relation_logits is not None else None)
    assignments = []
    for i, gt in enumerate(ground_truths):
        cost = match_cost(subj_probs[i], obj_probs[i],
                          rel_scores[i] if rel_scores is not None else None,
                          outputs.subject_boxes.data[i], outputs.object_boxes.data[i],
                          gt.subject_labels, gt.object_labels,
                          gt.relation_rows if rel_scores is not None else None,
                          gt.subject_boxes, gt.object_boxes, weights)
        assignments.append(hungarian_assign(cost))
    return assignments


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def build_scene_targets(outputs: ModelOutput, ground_truths: list[PairGroundTruth],
                        assignments: list[np.ndarray], config: TrainConfig,
                        alignment_mode: bool) -> list[SceneTargets]:
    """Relation target transforms (quality scaling, pseudo-labels) applied on
    detached values; pseudo-labels need fused text features, so they only
    apply on alignment passes."""
    use_rpl = config.use_rpl and alignment_mode
    targets = []
    for i, (gt, assign) in enumerate(zip(ground_truths, assignments)):
        rel_values = None
        if outputs.relation_logits is not None and len(assign):
            feats = None
            if use_rpl and outputs.relation_label_features is not None:
                feats = outputs.relation_label_features.data[i]
            rel = prepare_relation_targets(
                gt.relation_rows,
                outputs.subject_boxes.data[i][assign],
                outputs.object_boxes.data[i][assign],
                gt.subject_boxes, gt.object_boxes,
                feats, config.use_rql, use_rpl, config.eta)
            rel_values = rel.values
        targets.append(SceneTargets(assign, gt.subject_labels, gt.object_labels,
                                    gt.subject_boxes, gt.object_boxes, rel_values))
    return targets


# -- training loops ----------------------------------------------------------------


def _batch_iter(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _lr_scale(config: TrainConfig, epoch: int) -> float:
    return 1.0 / config.lr_drop_factor if epoch >= config.lr_drop_epoch else 1.0


def run_pretraining(scenes: list[Scene], vocab: Vocabulary, config: TrainConfig,
                    arch: ParSeConfig | None = None,
                    log_fn=None) -> tuple[Checkpoint, list[dict]]:
    """Pre-train per the configured paradigm; returns the final checkpoint
    and the metrics log (one record per step plus per-epoch summaries).
    Aborts on a non-finite loss, returning the last epoch-end checkpoint."""
    if config.mode != "pretrain":
        raise ValueError("config.mode must be 'pretrain'")
    arch = arch or make_model_config(vocab, config.n_queries)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    model = ParSe(arch, np.random.default_rng(seeds[0]))
    sample_rng = np.random.default_rng(seeds[1])
    return _train(model, scenes, vocab, config, sample_rng, seeds[2], log_fn)


def run_finetuning(scenes: list[Scene], vocab: Vocabulary, config: TrainConfig,
                   init: Checkpoint | None = None, arch: ParSeConfig | None = None,
                   log_fn=None) -> tuple[Checkpoint, list[dict]]:
    """Fine-tune from a checkpoint (or from random init): alignment over the
    full downstream vocabulary, no label-sequence extension, no subject CE."""
    if config.mode != "finetune":
        raise ValueError("config.mode must be 'finetune'")
    arch = arch or make_model_config(vocab, config.n_queries)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    model = ParSe(arch, np.random.default_rng(seeds[0]))
    if init is not None:
        if init.model_config.hidden_dim != arch.hidden_dim:
            raise ValueError("hidden dim mismatch between checkpoint and config")
        load_into_model(init, model)
    sample_rng = np.random.default_rng(seeds[1])
    return _train(model, scenes, vocab, config, sample_rng, seeds[2], log_fn)


def _train(model: ParSe, scenes: list[Scene], vocab: Vocabulary,
           config: TrainConfig, sample_rng: np.random.Generator,
           order_seed, log_fn) -> tuple[Checkpoint, list[dict]]:
    if not scenes:
        raise ValueError("empty corpus")
    finetune = config.mode == "finetune"
    alignment = finetune or config.paradigm == "rlip"
    with_relations = config.paradigm != "detection_only"
    weights = LossWeights(*config.loss_weights)
    match_weights = MatchWeights(*config.loss_weights)
    optimizer = AdamW(model.params, config.lr_main, config.lr_encoders,
                      weight_decay=config.weight_decay)
    entity_index = {lbl: i for i, lbl in enumerate(vocab.entity_labels)}
    relation_index = {lbl: i for i, lbl in enumerate(vocab.relation_labels)}
    fixed_seqs = full_label_sequences(vocab) if finetune else None

    metrics: list[dict] = []
    last_good = Checkpoint.from_model(model, epoch=0, rng=sample_rng,
                                      train_config=config)
    ad.set_finite_checks(False)
    try:
        step = 0
        for epoch in range(config.epochs):
            order_rng = np.random.default_rng([_entropy(order_seed), epoch])
            scale = _lr_scale(config, epoch)
            epoch_losses: list[dict] = []
            for batch_idx in _batch_iter(len(scenes), config.batch_size, order_rng):
                batch = [scenes[i] for i in batch_idx]
                record = _train_step(model, batch, vocab, config, optimizer,
                                     sample_rng, weights, match_weights,
                                     entity_index, relation_index,
                                     alignment, with_relations, finetune,
                                     fixed_seqs, scale)
                if record is None:
                    metrics.append({"kind": "abort", "epoch": epoch, "step": step})
                    if log_fn:
                        log_fn(metrics[-1])
                    return last_good, metrics
                record.update(kind="step", epoch=epoch, step=step,
                              lr=config.lr_main * scale)
                metrics.append(record)
                epoch_losses.append(record)
                if log_fn:
                    log_fn(record)
                step += 1
            summary = {
                "kind": "epoch", "epoch": epoch,
                "loss_mean": float(np.mean([r["total"] for r in epoch_losses])),
                "lr": config.lr_main * scale,
                "skipped_steps": optimizer.skipped_steps,
            }
            metrics.append(summary)
            if log_fn:
                log_fn(summary)
            last_good = Checkpoint.from_model(model, epoch=epoch + 1, rng=sample_rng,
                                              train_config=config, metrics=[summary])
    finally:
        ad.set_finite_checks(True)
    final = Checkpoint.from_model(model, epoch=config.epochs, rng=sample_rng,
                                  train_config=config,
                                  metrics=[m for m in metrics if m["kind"] == "epoch"])
    return final, metrics


def _entropy(seed_seq) -> int:
    if isinstance(seed_seq, np.random.SeedSequence):
        return int(seed_seq.generate_state(1, np.uint64)[0])
    return int(seed_seq)


def _train_step(model, batch, vocab, config, optimizer, sample_rng,
                weights, match_weights, entity_index, relation_index,
                alignment, with_relations, finetune, fixed_seqs, lr_scale):
    """One optimization step; returns the loss breakdown, or None on a
    non-finite loss (divergence)."""
    images = images_array(batch)
    if alignment:
        if finetune:
            ent_seq, rel_seq = fixed_seqs
            ent_seq = LabelSequence(ent_seq.kind, ent_seq.labels, ent_seq.n_in_batch,
                                    ent_seq.no_object_index)
            rel_seq = LabelSequence(rel_seq.kind, rel_seq.labels, rel_seq.n_in_batch)
        else:
            ent_seq, rel_seq = build_label_sequences(batch)
            if config.use_lse:
                ent_seq, rel_seq = extend_label_sequence(
                    ent_seq, rel_seq, vocab, config.n_label_budget,
                    config.sampling, sample_rng)
        ent_map = {lbl: i for i, lbl in enumerate(ent_seq.labels)}
        rel_map = {lbl: i for i, lbl in enumerate(rel_seq.labels)}
        rel_for_pass = rel_seq if len(rel_seq) else None
        outputs = model.forward_align(images, ent_seq, rel_for_pass,
                                      with_relations=with_relations)
        no_object_index = ent_seq.no_object_index
    else:
        ent_map, rel_map = entity_index, relation_index
        outputs = model.forward_classifier(images, with_relations=with_relations)
        no_object_index = len(vocab.entity_labels)

    gts = [scene_pair_ground_truth(sc, ent_map, rel_map) for sc in batch]
    assignments = match_batch(outputs, gts, match_weights)
    targets = build_scene_targets(outputs, gts, assignments, config, alignment)
    soft = config.use_rql or (config.use_rpl and alignment)
    loss, breakdown = total_loss(
        outputs, targets, no_object_index,
        mode=config.mode, weights=weights, soft_relation_targets=soft,
        gamma=model.config.focal_gamma, beta=model.config.qfl_beta,
        no_object_weight=config.no_object_weight)
    if not np.isfinite(breakdown["total"]):
        return None
    model.params.zero_grad()
    loss.backward()
    if config.grad_clip is not None:
        clip_gradients(model.params, config.grad_clip)
    optimizer.step(lr_scale)
    return breakdown
