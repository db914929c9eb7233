"""Synthetic multimodal worlds: shapes in a 64x64 frame with captions,
questions and phrase-to-region groundings, plus split bookkeeping."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import iou

SHAPES = ("circle", "square", "triangle")
PLURALS = {"circle": "circles", "square": "squares", "triangle": "triangles"}
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
COUNT_WORDS = ("zero", "one", "two", "three", "four")

PAD = "<pad>"
VOCAB: tuple[str, ...] = (
    PAD, "a", "and", "is", "there", "how", "many", "what", "color", "the",
    *SIZES, *COLORS, *SHAPES, *PLURALS.values(),
)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

ANSWERS: tuple[str, ...] = ("yes", "no", *COUNT_WORDS, *COLORS)
ANSWER_ID = {a: i for i, a in enumerate(ANSWERS)}

TASKS = ("ICR", "VQA", "VG")

FRAME = 64.0
FEATURE_DIM = 16
NUM_DISTRACTORS = 2
NUM_ANNOTATORS = 10
FEATURE_NOISE = 0.05
SCHEMA = "mtvl-worlds"
SCHEMA_VERSION = 1


class DatasetError(ValueError):
    pass


class ContaminationError(RuntimeError):
    """A world used for evaluation also feeds some task's training pool."""

    def __init__(self, world_id, task, split):
        self.world_id = world_id
        super().__init__(
            f"world {world_id} of {task}/{split} appears in a training pool of this run"
        )


class RegimeError(RuntimeError):
    pass


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    box: tuple[float, float, float, float]


@dataclass
class World:
    world_id: int
    objects: list[SceneObject]
    region_boxes: list[tuple[float, float, float, float]]
    region_features: list[list[float]]
    caption: list[str]
    question: list[str]
    question_type: str
    answers: list[tuple[int, float]]
    answer_annotations: list[int]
    phrases: list[tuple[int, int]]  # 1-based inclusive word spans
    phrase_objects: list[int]
    gold_regions: list[list[int]]  # 0-based region indices, best IoU first

    @property
    def num_regions(self) -> int:
        return len(self.region_boxes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        return cls(
            world_id=int(d["world_id"]),
            objects=[
                SceneObject(o["shape"], o["color"], o["size"], tuple(o["box"]))
                for o in d["objects"]
            ],
            region_boxes=[tuple(b) for b in d["region_boxes"]],
            region_features=[list(f) for f in d["region_features"]],
            caption=list(d["caption"]),
            question=list(d["question"]),
            question_type=d["question_type"],
            answers=[(int(a), float(w)) for a, w in d["answers"]],
            answer_annotations=[int(a) for a in d["answer_annotations"]],
            phrases=[(int(b), int(e)) for b, e in d["phrases"]],
            phrase_objects=[int(i) for i in d["phrase_objects"]],
            gold_regions=[[int(r) for r in g] for g in d["gold_regions"]],
        )


# ------------------------------------------------------------------ generator


def _overlap_fraction(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return inter / smaller


def _random_box(rng, lo: float, hi: float):
    w, h = rng.uniform(lo, hi, size=2)
    x1 = rng.uniform(0, FRAME - w)
    y1 = rng.uniform(0, FRAME - h)
    return (round(x1, 3), round(y1, 3), round(x1 + w, 3), round(y1 + h, 3))


def _place_objects(rng, sizes):
    for _ in range(1000):
        boxes = []
        for size in sizes:
            lo, hi = (10.0, 16.0) if size == "small" else (20.0, 30.0)
            for _ in range(200):
                box = _random_box(rng, lo, hi)
                if all(_overlap_fraction(box, b) <= 0.5 for b in boxes):
                    boxes.append(box)
                    break
            else:
                break
        if len(boxes) == len(sizes):
            return boxes
    raise RuntimeError("could not place objects")


def _jitter(rng, box, amount=1.5):
    x1, y1, x2, y2 = (c + rng.uniform(-amount, amount) for c in box)
    x1, y1 = max(0.0, x1), max(0.0, y1)
    x2, y2 = min(FRAME, x2), min(FRAME, y2)
    return (round(x1, 3), round(y1, 3), round(x2, 3), round(y2, 3))


def _features(rng, obj: SceneObject | None, box) -> list[float]:
    f = np.zeros(FEATURE_DIM)
    if obj is not None:
        f[SHAPES.index(obj.shape)] = 1.0
        f[3 + COLORS.index(obj.color)] = 1.0
        f[7 + SIZES.index(obj.size)] = 1.0
        f[13] = 1.0
    f[9:13] = np.asarray(box) / FRAME
    f += rng.normal(0.0, FEATURE_NOISE, size=FEATURE_DIM)
    return [round(float(v), 6) for v in f]


def answer_question(objects: Sequence[SceneObject], question: Sequence[str]) -> str:
    """Reference answer computed directly from the object list."""
    q = list(question)
    if q[:2] == ["is", "there"]:
        color, shape = q[3], q[4]
        return "yes" if any(o.color == color and o.shape == shape for o in objects) else "no"
    if q[:2] == ["how", "many"]:
        shape = next(s for s, p in PLURALS.items() if p == q[2])
        return COUNT_WORDS[sum(o.shape == shape for o in objects)]
    if q[:2] == ["what", "color"]:
        shape = q[4]
        (match,) = [o for o in objects if o.shape == shape]
        return match.color
    raise ValueError(f"unrecognized question {' '.join(q)!r}")


def _make_question(rng, objects):
    shape_counts = {s: sum(o.shape == s for o in objects) for s in SHAPES}
    kinds = ["existence", "counting"]
    unique_shapes = [s for s, c in shape_counts.items() if c == 1]
    if unique_shapes:
        kinds.append("attribute")
    kind = kinds[rng.integers(len(kinds))]
    if kind == "existence":
        present = {(o.color, o.shape) for o in objects}
        if rng.random() < 0.5:
            color, shape = sorted(present)[rng.integers(len(present))]
        else:
            absent = sorted((c, s) for c in COLORS for s in SHAPES if (c, s) not in present)
            color, shape = absent[rng.integers(len(absent))]
        q = ["is", "there", "a", color, shape]
    elif kind == "counting":
        q = ["how", "many", PLURALS[SHAPES[rng.integers(len(SHAPES))]]]
    else:
        q = ["what", "color", "is", "the", unique_shapes[rng.integers(len(unique_shapes))]]
    return kind, q


def generate_world(seed: int, world_id: int) -> World:
    """Deterministic function of ``(seed, world_id)``."""
    rng = np.random.default_rng([int(seed), int(world_id), 0x5EED])
    n = int(rng.integers(2, 5))
    kinds = [(c, s) for c in COLORS for s in SHAPES]
    picks = rng.choice(len(kinds), size=n, replace=False)
    sizes = [SIZES[rng.integers(2)] for _ in range(n)]
    boxes = _place_objects(rng, sizes)
    objects = [
        SceneObject(kinds[k][1], kinds[k][0], size, box)
        for k, size, box in zip(picks, sizes, boxes)
    ]

    entries = []
    for obj in objects:
        rbox = _jitter(rng, obj.box)
        entries.append((rbox, obj))
    for _ in range(NUM_DISTRACTORS):
        while True:
            rbox = _random_box(rng, 8.0, 30.0)
            if all(iou(rbox, o.box) < 0.5 for o in objects):
                break
        entries.append((rbox, None))
    order = rng.permutation(len(entries))
    region_boxes, region_features = [], []
    for idx in order:
        rbox, obj = entries[idx]
        region_boxes.append(rbox)
        region_features.append(_features(rng, obj, rbox))

    caption, phrases = [], []
    for j, obj in enumerate(objects):
        if j:
            caption.append("and")
        caption.append("a")
        start = len(caption) + 1
        caption.extend([obj.size, obj.color, obj.shape])
        phrases.append((start, start + 2))

    gold = []
    for obj in objects:
        scored = [(iou(b, obj.box), r) for r, b in enumerate(region_boxes)]
        hits = sorted((-s, r) for s, r in scored if s >= 0.5)
        gold.append([r for _, r in hits])

    qtype, question = _make_question(rng, objects)
    ans = ANSWER_ID[answer_question(objects, question)]
    return World(
        world_id=int(world_id),
        objects=objects,
        region_boxes=region_boxes,
        region_features=region_features,
        caption=caption,
        question=question,
        question_type=qtype,
        answers=[(ans, 1.0)],
        answer_annotations=[ans] * NUM_ANNOTATORS,
        phrases=phrases,
        phrase_objects=list(range(n)),
        gold_regions=gold,
    )


def generate_dataset(num_worlds: int, seed: int) -> list[World]:
    return [generate_world(seed, i) for i in range(num_worlds)]


# ------------------------------------------------------------------ persistence


def save_dataset(worlds: Iterable[World], path, seed: int | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": SCHEMA, "version": SCHEMA_VERSION, "seed": seed}) + "\n")
        for w in worlds:
            fh.write(json.dumps(w.to_dict(), separators=(",", ":")) + "\n")


def load_dataset(path) -> list[World]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        return []
    worlds = []
    for lineno, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
            if lineno == 1:
                if rec.get("schema") != SCHEMA:
                    raise ValueError(f"unknown schema {rec.get('schema')!r}")
                if rec.get("version") != SCHEMA_VERSION:
                    raise ValueError(f"unsupported schema version {rec.get('version')}")
                continue
            worlds.append(World.from_dict(rec))
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
    return worlds


# ------------------------------------------------------------------ splits


@dataclass
class SplitManifest:
    """Per-task world-id pools for one training run.

    ``forbidden`` lists (task, split) evaluations that would be contaminated
    under the chosen regime.
    """

    regime: str
    pools: dict[str, dict[str, list[int]]]
    forbidden: list[tuple[str, str]] = field(default_factory=list)

    def training_ids(self) -> set[int]:
        out: set[int] = set()
        for task in self.pools:
            out.update(self.pools[task]["train"])
        return out

    def check_contamination(self) -> None:
        """Raise :class:`ContaminationError` on the first evaluable id seen in training."""
        seen = self.training_ids()
        for task in sorted(self.pools):
            for split in ("val", "test"):
                if (task, split) in self.forbidden:
                    continue
                for wid in self.pools[task][split]:
                    if wid in seen:
                        raise ContaminationError(wid, task, split)

    def assert_can_evaluate(self, task: str, split: str) -> None:
        if (task, split) in self.forbidden:
            raise RegimeError(
                f"evaluating {task} on {split} is not allowed under regime {self.regime!r}"
            )

    def to_dict(self) -> dict:
        return {"regime": self.regime, "pools": self.pools, "forbidden": [list(f) for f in self.forbidden]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(
            regime=d["regime"],
            pools={t: {s: [int(i) for i in ids] for s, ids in v.items()} for t, v in d["pools"].items()},
            forbidden=[tuple(f) for f in d.get("forbidden", [])],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


REGIMES = ("standard", "vqa-trainval")


def make_splits(num_worlds: int, seed: int, regime: str = "standard") -> SplitManifest:
    """80/10/10 split by world id.

    ``vqa-trainval`` adds the val worlds to VQA's training pool; ICR/VG
    evaluation is then contaminated on both val and test, and VQA can only
    be scored on test.
    """
    if num_worlds < 30:
        raise ValueError(f"need at least 30 worlds to split, got {num_worlds}")
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    ids = np.random.default_rng([int(seed), 0x5B17]).permutation(num_worlds).tolist()
    n_train = int(0.8 * num_worlds)
    n_val = int(0.1 * num_worlds)
    train = sorted(ids[:n_train])
    val = sorted(ids[n_train : n_train + n_val])
    test = sorted(ids[n_train + n_val :])
    pools = {t: {"train": list(train), "val": list(val), "test": list(test)} for t in TASKS}
    forbidden: list[tuple[str, str]] = []
    if regime == "vqa-trainval":
        pools["VQA"]["train"] = sorted(train + val)
        forbidden = [("ICR", "val"), ("ICR", "test"), ("VG", "val"), ("VG", "test"), ("VQA", "val")]
    return SplitManifest(regime=regime, pools=pools, forbidden=forbidden)


def select(worlds: Sequence[World], ids: Iterable[int]) -> list[World]:
    by_id = {w.world_id: w for w in worlds}
    return [by_id[i] for i in ids]


# ------------------------------------------------------------------ batching


def token_ids(tokens: Sequence[str]) -> list[int]:
    try:
        return [TOKEN_ID[t] for t in tokens]
    except KeyError as exc:
        raise DatasetError(f"token {exc.args[0]!r} not in vocabulary") from None


@dataclass
class SentenceBatch:
    ids: np.ndarray  # (B, N) int
    mask: np.ndarray  # (B, N) float, 1 = real word

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(int)


@dataclass
class ImageBatch:
    features: np.ndarray  # (B, T, d_in)
    mask: np.ndarray  # (B, T)
    boxes: np.ndarray  # (B, T, 4)


def collate_sentences(seqs: Sequence[Sequence[str]]) -> SentenceBatch:
    if any(len(s) == 0 for s in seqs):
        raise DatasetError("empty sentence")
    n = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), n), dtype=np.int64)
    mask = np.zeros((len(seqs), n))
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = token_ids(s)
        mask[b, : len(s)] = 1.0
    return SentenceBatch(ids, mask)


def collate_images(worlds: Sequence[World]) -> ImageBatch:
    t = max(w.num_regions for w in worlds)
    feats = np.zeros((len(worlds), t, FEATURE_DIM))
    mask = np.zeros((len(worlds), t))
    boxes = np.zeros((len(worlds), t, 4))
    boxes[..., 2:] = 1.0
    for b, w in enumerate(worlds):
        feats[b, : w.num_regions] = w.region_features
        mask[b, : w.num_regions] = 1.0
        boxes[b, : w.num_regions] = w.region_boxes
    return ImageBatch(feats, mask, boxes)


@dataclass
class GroundingBatch:
    pool: np.ndarray  # (B, N, H) averaging weights per phrase
    phrase_mask: np.ndarray  # (B, H)
    targets: np.ndarray  # (B, H, T) 1 on gold regions
    gold_boxes: np.ndarray  # (B, H, 4)


def phrase_pool_matrix(spans: Sequence[tuple[int, int]], n_words: int, n_cols: int | None = None) -> np.ndarray:
    """Columns hold uniform weights over 1-based inclusive spans."""
    h = len(spans) if n_cols is None else n_cols
    P = np.zeros((n_words, h))
    for j, (b, e) in enumerate(spans):
        if not 1 <= b <= e <= n_words:
            raise DatasetError(f"phrase span ({b}, {e}) outside 1..{n_words}")
        P[b - 1 : e, j] = 1.0 / (e - b + 1)
    return P


def collate_grounding(worlds: Sequence[World], n_words: int, n_regions: int) -> GroundingBatch:
    h = max(len(w.phrases) for w in worlds)
    B = len(worlds)
    pool = np.zeros((B, n_words, h))
    pmask = np.zeros((B, h))
    targets = np.zeros((B, h, n_regions))
    gold_boxes = np.zeros((B, h, 4))
    gold_boxes[..., 2:] = 1.0
    for b, w in enumerate(worlds):
        pool[b] = phrase_pool_matrix(w.phrases, n_words, h)
        pmask[b, : len(w.phrases)] = 1.0
        for j, regions in enumerate(w.gold_regions):
            targets[b, j, regions] = 1.0
            gold_boxes[b, j] = w.objects[w.phrase_objects[j]].box
    return GroundingBatch(pool, pmask, targets, gold_boxes)


def answer_targets(worlds: Sequence[World]) -> np.ndarray:
    y = np.zeros((len(worlds), len(ANSWERS)))
    for b, w in enumerate(worlds):
        for a, weight in w.answers:
            y[b, a] = weight
    return y
