"""Synthetic relational-scene corpus: generation, rendering, preprocessing,
corruption and protocol splits.

Scenes hold colored geometric shapes; relation triplets are derived
deterministically from box geometry (above/below, left/right, inside,
overlapping, near, larger-than), optionally rewritten with synonyms.
Long-tail structure comes from Zipf-weighted attribute/shape choice and
Zipf-weighted placement modes.

File formats:
  - annotations: line-delimited JSON, one scene per line,
  - images: per-scene raw little-endian float32 raster behind an 8-byte
    header (height, width as u32),
  - vocabulary: a single JSON document.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .geometry import iou

# canonical relation -> synonyms (all are valid labels; derivation emits
# the canonical form, generation may swap in a synonym)
RELATION_SYNONYMS: dict[str, tuple[str, ...]] = {
    "above": ("over",),
    "below": ("beneath",),
    "left of": (),
    "right of": (),
    "inside": ("within",),
    "overlapping": ("touching",),
    "near": ("next to",),
    "larger than": ("bigger than",),
}

COLOR_RGB: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.70),
    "orange": (0.95, 0.55, 0.05),
}

# placement modes in rank order for the Zipf draw
_PLACEMENT_MODES = ("stack", "row", "scatter", "contrast", "overlap", "nest")


@dataclass
class Entity:
    id: int
    box: tuple[float, float, float, float]  # corner form, pixels
    label: str


@dataclass
class Triplet:
    subject: int
    object: int
    relation: str


@dataclass
class Scene:
    id: str
    width: int
    height: int
    entities: list[Entity]
    triplets: list[Triplet]
    image: np.ndarray | None = None


@dataclass
class Vocabulary:
    entity_labels: list[str]
    relation_labels: list[str]
    synonym_groups: list[list[str]]
    tokens: list[str]
    entity_freq: dict[str, int] = field(default_factory=dict)
    relation_freq: dict[str, int] = field(default_factory=dict)


@dataclass
class CorpusConfig:
    image_size: int = 64
    min_entities: int = 2
    max_entities: int = 4
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow", "purple", "orange")
    shapes: tuple[str, ...] = ("circle", "square", "triangle", "diamond")
    zipf_exponent: float = 1.2
    synonym_prob: float = 0.3
    near_threshold: float = 0.35      # fraction of the image diagonal
    larger_ratio: float = 2.0
    max_triplets: int = 20            # per-scene cap applied by preprocess
    min_radius: int = 6
    max_radius: int = 13


# -- relation derivation -------------------------------------------------------


def _overlap_1d(a0, a1, b0, b1) -> float:
    return min(a1, b1) - max(a0, b0)


def derive_relations(entities: list[Entity], image_size: float = 64.0,
                     near_threshold: float = 0.35, larger_ratio: float = 2.0) -> list[Triplet]:
    """All relation triplets implied by box geometry (canonical labels).

    left-of(A,B) emits right-of(B,A) and vice versa; symmetric predicates
    (overlapping, near) emit both directions; inside and larger-than are
    one-directional. Output is a pure function of the boxes, invariant to
    entity order up to triplet-set equality.
    """
    out: list[Triplet] = []
    diag = float(np.hypot(image_size, image_size))
    ordered = sorted(entities, key=lambda e: e.id)
    for a in ordered:
        ax0, ay0, ax1, ay1 = a.box
        area_a = (ax1 - ax0) * (ay1 - ay0)
        for b in ordered:
            if a.id == b.id:
                continue
            bx0, by0, bx1, by1 = b.box
            area_b = (bx1 - bx0) * (by1 - by0)
            x_overlap = _overlap_1d(ax0, ax1, bx0, bx1)
            y_overlap = _overlap_1d(ay0, ay1, by0, by1)
            if ay1 <= by0 and x_overlap > 0:
                out.append(Triplet(a.id, b.id, "above"))
                out.append(Triplet(b.id, a.id, "below"))
            if ax1 <= bx0 and y_overlap > 0:
                out.append(Triplet(a.id, b.id, "left of"))
                out.append(Triplet(b.id, a.id, "right of"))
            inside_ab = (ax0 >= bx0 and ay0 >= by0 and ax1 <= bx1 and ay1 <= by1
                         and area_a < area_b)
            inside_ba = (bx0 >= ax0 and by0 >= ay0 and bx1 <= ax1 and by1 <= ay1
                         and area_b < area_a)
            if inside_ab:
                out.append(Triplet(a.id, b.id, "inside"))
            intersects = x_overlap > 0 and y_overlap > 0
            if intersects and not inside_ab and not inside_ba:
                out.append(Triplet(a.id, b.id, "overlapping"))
            if not intersects:
                ca = ((ax0 + ax1) / 2, (ay0 + ay1) / 2)
                cb = ((bx0 + bx1) / 2, (by0 + by1) / 2)
                if np.hypot(ca[0] - cb[0], ca[1] - cb[1]) < near_threshold * diag:
                    out.append(Triplet(a.id, b.id, "near"))
            if area_b > 0 and area_a > larger_ratio * area_b:
                out.append(Triplet(a.id, b.id, "larger than"))
    seen: set[tuple[int, int, str]] = set()
    unique = []
    for t in out:
        key = (t.subject, t.object, t.relation)
        if key not in seen:
            seen.add(key)
            unique.append(t)
    return unique


# -- rendering -----------------------------------------------------------------

_SUPERSAMPLE = 4
_BACKGROUND = 0.82


def render_scene(entities: list[Entity], image_size: int) -> np.ndarray:
    """Rasterize entities as filled anti-aliased shapes; larger shapes are
    drawn first so nested ones stay visible. Returns (H, W, 3) float32 in
    [0, 1]."""
    s = _SUPERSAMPLE
    hi = image_size * s
    canvas = np.full((hi, hi, 3), _BACKGROUND, dtype=np.float64)
    yy, xx = np.mgrid[0:hi, 0:hi]
    # pixel centers in image coordinates
    px = (xx + 0.5) / s
    py = (yy + 0.5) / s
    order = sorted(entities, key=lambda e: -_box_area(e.box))
    for ent in order:
        color_name, shape_name = ent.label.split(" ", 1)
        x0, y0, x1, y1 = ent.box
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        r = min(x1 - x0, y1 - y0) / 2
        mask = _shape_mask(shape_name, px, py, cx, cy, r)
        canvas[mask] = COLOR_RGB[color_name]
    out = canvas.reshape(image_size, s, image_size, s, 3).mean(axis=(1, 3))
    return out.astype(np.float32)


def _box_area(box) -> float:
    return (box[2] - box[0]) * (box[3] - box[1])


def _shape_mask(shape: str, px, py, cx, cy, r) -> np.ndarray:
    dx, dy = px - cx, py - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "triangle":
        # upward triangle inscribed in the box: apex on top edge
        below_apex = dy >= -r
        above_base = dy <= r
        slope = (dy + r) / 2.0  # half-width at this height
        return below_apex & above_base & (np.abs(dx) <= slope)
    raise ValueError(f"unknown shape {shape!r}")


# -- corpus generation ---------------------------------------------------------


def _zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = (np.arange(1, n + 1, dtype=np.float64)) ** (-exponent)
    return w / w.sum()


def generate_corpus(config: CorpusConfig, seed: int, n_scenes: int,
                    id_prefix: str = "scene") -> tuple[list[Scene], Vocabulary]:
    """Generate a preprocessed corpus plus its vocabulary.

    Scene layout, attribute choice and synonym substitution all draw from
    a generator seeded per scene (derived from ``seed``), so scenes are
    reproducible and independent.
    """
    if not config.colors or not config.shapes:
        raise ValueError("empty attribute or shape inventory")
    if config.min_entities < 1 or config.min_entities > config.max_entities:
        raise ValueError("unsatisfiable entity count range")
    seeds = np.random.SeedSequence(seed).spawn(n_scenes)
    scenes = []
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        scenes.append(_generate_scene(f"{id_prefix}-{i:05d}", config, rng))
    scenes = preprocess(scenes, config.max_triplets)
    vocab = build_vocabulary(config, scenes)
    return scenes, vocab


def build_vocabulary(config: CorpusConfig, scenes: list[Scene]) -> Vocabulary:
    entity_labels = [f"{c} {s}" for c in config.colors for s in config.shapes]
    relation_labels = []
    groups = []
    for canon, syns in RELATION_SYNONYMS.items():
        relation_labels.append(canon)
        relation_labels.extend(syns)
        if syns:
            groups.append([canon, *syns])
    tokens = sorted({w for lbl in entity_labels + relation_labels for w in lbl.split()})
    ent_freq = {lbl: 0 for lbl in entity_labels}
    rel_freq = {lbl: 0 for lbl in relation_labels}
    for sc in scenes:
        for e in sc.entities:
            ent_freq[e.label] = ent_freq.get(e.label, 0) + 1
        for t in sc.triplets:
            rel_freq[t.relation] = rel_freq.get(t.relation, 0) + 1
    return Vocabulary(entity_labels, relation_labels, [list(g) for g in groups],
                      tokens, ent_freq, rel_freq)


def _generate_scene(scene_id: str, config: CorpusConfig, rng: np.random.Generator) -> Scene:
    size = config.image_size
    n = int(rng.integers(config.min_entities, config.max_entities + 1))
    color_w = _zipf_weights(len(config.colors), config.zipf_exponent)
    shape_w = _zipf_weights(len(config.shapes), config.zipf_exponent)
    mode_w = _zipf_weights(len(_PLACEMENT_MODES), config.zipf_exponent)

    entities: list[Entity] = []
    for idx in range(n):
        color = config.colors[rng.choice(len(config.colors), p=color_w)]
        shape = config.shapes[rng.choice(len(config.shapes), p=shape_w)]
        r = float(rng.integers(config.min_radius, config.max_radius + 1))
        if not entities:
            cx, cy = _random_center(rng, size, r)
        else:
            mode = _PLACEMENT_MODES[rng.choice(len(_PLACEMENT_MODES), p=mode_w)]
            anchor = entities[int(rng.integers(0, len(entities)))]
            cx, cy, r = _place_relative(rng, anchor, mode, r, size, config)
        box = (cx - r, cy - r, cx + r, cy + r)
        entities.append(Entity(idx, box, f"{color} {shape}"))

    triplets = derive_relations(entities, image_size=size,
                                near_threshold=config.near_threshold,
                                larger_ratio=config.larger_ratio)
    for t in triplets:
        syns = RELATION_SYNONYMS.get(t.relation, ())
        if syns and rng.random() < config.synonym_prob:
            t.relation = syns[int(rng.integers(0, len(syns)))]
    image = render_scene(entities, size)
    return Scene(scene_id, size, size, entities, triplets, image)


def _random_center(rng, size, r):
    return (float(rng.uniform(r, size - r)), float(rng.uniform(r, size - r)))


def _clamp_center(cx, cy, r, size):
    return (float(np.clip(cx, r, size - r)), float(np.clip(cy, r, size - r)))


def _place_relative(rng, anchor: Entity, mode: str, r: float, size: int,
                    config: CorpusConfig) -> tuple[float, float, float]:
    ax0, ay0, ax1, ay1 = anchor.box
    acx, acy = (ax0 + ax1) / 2, (ay0 + ay1) / 2
    ar = (ax1 - ax0) / 2
    if mode == "stack":
        gap = rng.uniform(2, 8)
        cy = acy + (ar + gap + r) * (1 if rng.random() < 0.5 else -1)
        cx = acx + rng.uniform(-ar / 2, ar / 2)
    elif mode == "row":
        gap = rng.uniform(2, 8)
        cx = acx + (ar + gap + r) * (1 if rng.random() < 0.5 else -1)
        cy = acy + rng.uniform(-ar / 2, ar / 2)
    elif mode == "scatter":
        return (*_random_center(rng, size, r), r)
    elif mode == "contrast":
        r = max(config.min_radius - 2, round(ar / 2.2))
        ang = rng.uniform(0, 2 * np.pi)
        d = ar + r + rng.uniform(2, 6)
        cx, cy = acx + d * np.cos(ang), acy + d * np.sin(ang)
    elif mode == "overlap":
        ang = rng.uniform(0, 2 * np.pi)
        d = rng.uniform(0.4, 0.9) * (ar + r)
        cx, cy = acx + d * np.cos(ang), acy + d * np.sin(ang)
    elif mode == "nest":
        r = min(r, max(2.0, ar * 0.45))
        cx = acx + rng.uniform(-0.3, 0.3) * ar
        cy = acy + rng.uniform(-0.3, 0.3) * ar
        return (*_clamp_inside(cx, cy, r, anchor.box), r)
    else:
        raise ValueError(mode)
    return (*_clamp_center(cx, cy, r, size), r)


def _clamp_inside(cx, cy, r, box):
    x0, y0, x1, y1 = box
    return (float(np.clip(cx, x0 + r, x1 - r)), float(np.clip(cy, y0 + r, y1 - r)))


# -- preprocessing -------------------------------------------------------------


def preprocess(scenes: list[Scene], n_queries: int) -> list[Scene]:
    """Canonical cleanup, idempotent by construction:

    1. each entity keeps exactly one label (the first, when given several),
    2. exact duplicate triplets collapse to one,
    3. among triplets with identical subject/object/relation label texts
       whose subject boxes and object boxes both overlap with IoU > 0.5,
       only the first survives,
    4. per-scene triplet count is capped at ``n_queries`` in stable order.
    """
    out = []
    for sc in scenes:
        entities = []
        by_id: dict[int, Entity] = {}
        for e in sc.entities:
            label = e.label[0] if isinstance(e.label, (list, tuple)) else e.label
            ent = Entity(e.id, tuple(e.box), label)
            entities.append(ent)
            by_id[ent.id] = ent
        kept: list[Triplet] = []
        seen_exact: set[tuple[int, int, str]] = set()
        for t in sc.triplets:
            key = (t.subject, t.object, t.relation)
            if key in seen_exact:
                continue
            if t.subject not in by_id or t.object not in by_id:
                raise ValueError(f"scene {sc.id}: triplet references unknown entity")
            redundant = False
            for k in kept:
                if (k.relation == t.relation
                        and by_id[k.subject].label == by_id[t.subject].label
                        and by_id[k.object].label == by_id[t.object].label
                        and iou(by_id[k.subject].box, by_id[t.subject].box) > 0.5
                        and iou(by_id[k.object].box, by_id[t.object].box) > 0.5):
                    redundant = True
                    break
            if redundant:
                continue
            seen_exact.add(key)
            kept.append(Triplet(t.subject, t.object, t.relation))
        out.append(Scene(sc.id, sc.width, sc.height, entities, kept[:n_queries], sc.image))
    return out


# -- corruption & protocol splits ----------------------------------------------


def inject_relation_noise(scenes: list[Scene], ratio: float, seed: int,
                          relation_labels: list[str]) -> list[Scene]:
    """Flip the relation text of exactly round(ratio * n_triplets) triplets,
    chosen uniformly without replacement, to a uniformly random different
    label from ``relation_labels``."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    if len(relation_labels) < 2:
        raise ValueError("need at least two relation labels to flip")
    out = copy.deepcopy(scenes)
    slots = [(i, j) for i, sc in enumerate(out) for j in range(len(sc.triplets))]
    n_flip = int(round(ratio * len(slots)))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(slots), size=n_flip, replace=False) if n_flip else []
    for c in chosen:
        i, j = slots[c]
        current = out[i].triplets[j].relation
        alternatives = [r for r in relation_labels if r != current]
        out[i].triplets[j].relation = alternatives[int(rng.integers(0, len(alternatives)))]
    return out


def sample_fewshot_subset(scenes: list[Scene], fraction: float, seed: int) -> list[Scene]:
    """Keep round(fraction * n_triplets) triplet annotations while ensuring
    every object label and every relation label stays represented: a greedy
    coverage pass first, then uniform fill. Raises when the budget cannot
    cover all labels."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    slots = []
    for i, sc in enumerate(scenes):
        labels = {e.id: e.label for e in sc.entities}
        for j, t in enumerate(sc.triplets):
            slots.append((i, j, labels[t.object], t.relation))
    budget = int(round(fraction * len(slots)))
    needed = sorted({s[2] for s in slots}) + sorted({s[3] for s in slots})
    rng = np.random.default_rng(seed)

    selected: set[int] = set()
    covered: set[str] = set()
    order = rng.permutation(len(slots))
    for label in needed:
        if label in covered:
            continue
        for idx in order:
            if idx in selected:
                continue
            _, _, obj_label, rel = slots[idx]
            if label == obj_label or label == rel:
                selected.add(idx)
                covered.add(obj_label)
                covered.add(rel)
                break
    if len(selected) > budget:
        raise ValueError(
            f"budget {budget} below label-coverage minimum {len(selected)}")
    remaining = [i for i in order if i not in selected]
    for idx in remaining[: budget - len(selected)]:
        selected.add(idx)

    out = copy.deepcopy(scenes)
    keep_by_scene: dict[int, set[int]] = {}
    for idx in selected:
        i, j, _, _ = slots[idx]
        keep_by_scene.setdefault(i, set()).add(j)
    for i, sc in enumerate(out):
        keep = keep_by_scene.get(i, set())
        sc.triplets = [t for j, t in enumerate(sc.triplets) if j in keep]
    return out


def combo_frequencies(scenes: list[Scene]) -> dict[tuple[str, str], int]:
    """Observed (relation, object-label) pair counts."""
    freq: dict[tuple[str, str], int] = {}
    for sc in scenes:
        labels = {e.id: e.label for e in sc.entities}
        for t in sc.triplets:
            key = (t.relation, labels[t.object])
            freq[key] = freq.get(key, 0) + 1
    return freq


def build_uc_split(scenes: list[Scene], mode: str, unseen_fraction: float
                   ) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
    """Partition observed (relation, object-label) combos into seen and
    unseen sets. ``rare-first`` removes the least frequent combos,
    ``non-rare-first`` the most frequent; combos are skipped when removing
    them would leave a relation or object label with no seen combo."""
    if mode not in ("rare-first", "non-rare-first"):
        raise ValueError(f"unknown mode {mode!r}")
    if unseen_fraction >= 1.0 or unseen_fraction < 0.0:
        raise ValueError("unseen_fraction must lie in [0, 1)")
    freq = combo_frequencies(scenes)
    combos = sorted(freq, key=lambda c: (freq[c], c))
    if mode == "non-rare-first":
        combos = sorted(freq, key=lambda c: (-freq[c], c))
    target = int(round(unseen_fraction * len(combos)))

    rel_live: dict[str, int] = {}
    obj_live: dict[str, int] = {}
    for r, o in freq:
        rel_live[r] = rel_live.get(r, 0) + 1
        obj_live[o] = obj_live.get(o, 0) + 1
    unseen = []
    for combo in combos:
        if len(unseen) >= target:
            break
        r, o = combo
        if rel_live[r] <= 1 or obj_live[o] <= 1:
            continue
        rel_live[r] -= 1
        obj_live[o] -= 1
        unseen.append(combo)
    unseen_set = set(unseen)
    seen = [c for c in sorted(freq, key=lambda c: (freq[c], c)) if c not in unseen_set]
    return seen, unseen


def remove_unseen_combos(scenes: list[Scene], unseen: list[tuple[str, str]]) -> list[Scene]:
    """Drop training triplets whose (relation, object-label) combo is unseen."""
    unseen_set = {tuple(c) for c in unseen}
    out = copy.deepcopy(scenes)
    for sc in out:
        labels = {e.id: e.label for e in sc.entities}
        sc.triplets = [t for t in sc.triplets
                       if (t.relation, labels[t.object]) not in unseen_set]
    return out


def refresh_frequencies(vocab: Vocabulary, scenes: list[Scene]) -> Vocabulary:
    """Recount label frequencies against a (possibly transformed) corpus."""
    ent_freq = {lbl: 0 for lbl in vocab.entity_labels}
    rel_freq = {lbl: 0 for lbl in vocab.relation_labels}
    for sc in scenes:
        for e in sc.entities:
            ent_freq[e.label] = ent_freq.get(e.label, 0) + 1
        for t in sc.triplets:
            rel_freq[t.relation] = rel_freq.get(t.relation, 0) + 1
    return Vocabulary(list(vocab.entity_labels), list(vocab.relation_labels),
                      [list(g) for g in vocab.synonym_groups], list(vocab.tokens),
                      ent_freq, rel_freq)


def rare_classes(scenes: list[Scene], threshold: int = 10) -> set[tuple[str, str]]:
    """Combos with fewer than ``threshold`` training annotations."""
    freq = combo_frequencies(scenes)
    return {c for c, n in freq.items() if n < threshold}


# -- serialization -------------------------------------------------------------


def scene_to_json(scene: Scene) -> str:
    doc = {
        "id": scene.id,
        "width": scene.width,
        "height": scene.height,
        "entities": [{"id": e.id, "box": [float(v) for v in e.box], "label": e.label}
                     for e in scene.entities],
        "triplets": [{"s": t.subject, "o": t.object, "r": t.relation}
                     for t in scene.triplets],
    }
    return json.dumps(doc, separators=(",", ":"))


def scene_from_json(line: str) -> Scene:
    doc = json.loads(line)
    entities = []
    for e in doc["entities"]:
        label = e.get("label")
        if label is None and "labels" in e:
            label = e["labels"][0] if e["labels"] else ""
        entities.append(Entity(int(e["id"]), tuple(float(v) for v in e["box"]), label))
    triplets = [Triplet(int(t["s"]), int(t["o"]), t["r"]) for t in doc["triplets"]]
    return Scene(doc["id"], int(doc["width"]), int(doc["height"]), entities, triplets)


def write_image_file(path: Path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_image_file(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"truncated image file {path}")
    h, w = struct.unpack("<II", raw[:8])
    expected = 8 + h * w * 3 * 4
    if len(raw) != expected:
        raise ValueError(f"image payload length mismatch in {path}")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(h, w, 3).copy()


def save_corpus(directory: Path, scenes: list[Scene], vocab: Vocabulary,
                with_images: bool = True) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "annotations.jsonl", "w") as f:
        for sc in scenes:
            f.write(scene_to_json(sc) + "\n")
    with open(directory / "vocab.json", "w") as f:
        json.dump(asdict(vocab), f, separators=(",", ":"), indent=None)
    if with_images:
        img_dir = directory / "images"
        img_dir.mkdir(exist_ok=True)
        for sc in scenes:
            if sc.image is None:
                raise ValueError(f"scene {sc.id} has no image to save")
            write_image_file(img_dir / f"{sc.id}.img", sc.image)


def load_corpus(directory: Path, with_images: bool = True) -> tuple[list[Scene], Vocabulary]:
    directory = Path(directory)
    scenes = []
    with open(directory / "annotations.jsonl") as f:
        for line in f:
            line = line.strip()
            if line:
                scenes.append(scene_from_json(line))
    with open(directory / "vocab.json") as f:
        doc = json.load(f)
    vocab = Vocabulary(doc["entity_labels"], doc["relation_labels"],
                       doc["synonym_groups"], doc["tokens"],
                       doc.get("entity_freq", {}), doc.get("relation_freq", {}))
    if with_images:
        img_dir = directory / "images"
        for sc in scenes:
            sc.image = read_image_file(img_dir / f"{sc.id}.img")
    return scenes, vocab
