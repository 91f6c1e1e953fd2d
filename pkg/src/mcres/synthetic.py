"""Grid-world referring-expression segmentation task.

Scenes are small grids of attributed objects. Expressions follow
``EXPR -> NP | NP REL NP`` with ``NP -> [size] [color] shape``; the head noun
phrase alone singles out the referent and a relational tail names a landmark
that really stands in that relation. Some colour-shape pairs are banned from
training expressions and reappear at test time as novel compositions.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .compositions import Level
from .parse import SyntheticGrammar, parse_bracketed, parse_synthetic
from .splitter import Sample

SHAPES = ("circle", "square", "triangle", "star", "heart", "cross", "diamond", "ring", "moon", "arrow",
          "hexagon", "oval", "bolt", "drop", "leaf", "bell", "key", "flag", "gear", "shield",
          "pentagon", "spiral", "crown", "cloud", "anchor", "bone", "cup", "fish", "house", "tree",
          "flower", "kite", "lock", "note", "pin", "sun", "tag", "wave", "wheel", "wing")
COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "white", "black", "pink", "brown",
          "gray", "cyan", "olive", "navy", "teal", "maroon", "gold", "silver", "lime", "beige",
          "amber", "azure", "coral", "crimson", "indigo", "ivory", "jade", "khaki", "lavender", "magenta",
          "mint", "peach", "plum", "ruby", "rust", "salmon", "scarlet", "tan", "turquoise", "violet")
SIZES = ("small", "large")
RELATIONS = (("left", "of"), ("right", "of"), ("north", "of"), ("south", "of"))
FOOTPRINT = {"small": 1, "large": 2}


class InfeasibleHoldout(ValueError):
    pass


class OverlapViolation(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    anchor: tuple[int, int]

    @property
    def footprint(self) -> frozenset[tuple[int, int]]:
        k = FOOTPRINT[self.size]
        r, c = self.anchor
        return frozenset((r + i, c + j) for i in range(k) for j in range(k))

    @property
    def rows(self) -> tuple[int, int]:
        return self.anchor[0], self.anchor[0] + FOOTPRINT[self.size] - 1

    @property
    def cols(self) -> tuple[int, int]:
        return self.anchor[1], self.anchor[1] + FOOTPRINT[self.size] - 1


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    objects: tuple[SceneObject, ...]
    referent: int = 0

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width, "referent": self.referent,
                "objects": [[o.shape, o.color, o.size, list(o.anchor)] for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        objs = tuple(SceneObject(s, c, z, (int(a[0]), int(a[1]))) for s, c, z, a in d["objects"])
        return cls(int(d["height"]), int(d["width"]), objs, int(d["referent"]))

    def mask(self) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=np.uint8)
        for r, c in self.objects[self.referent].footprint:
            m[r, c] = 1
        return m


@dataclass(frozen=True)
class SyntheticConfig:
    height: int = 16
    width: int = 16
    n_shapes: int = 40
    n_colors: int = 40
    n_train: int = 8000
    n_test: int = 2000
    holdout_fraction: float = 0.15
    n_relations: int = 4
    relational_prob: float = 0.3
    size_prob: float = 0.3
    landmark_color_prob: float = 0.5
    max_extra_distractors: int = 3
    pair_zipf: float = 1.0          # long-tail exponent over colour-shape pairs
    test_novel_fraction: float = 0.5

    @property
    def grammar(self) -> SyntheticGrammar:
        return SyntheticGrammar(SIZES, COLORS[:self.n_colors], SHAPES[:self.n_shapes],
                                RELATIONS[:self.n_relations])

    @property
    def feature_dim(self) -> int:
        return self.n_shapes + self.n_colors + len(SIZES) + 2


@dataclass(frozen=True)
class HoldoutPlan:
    banned: dict[str, frozenset[tuple[str, str]]] = field(default_factory=dict)

    def banned_at(self, level: Level) -> frozenset[tuple[str, str]]:
        return self.banned.get(level.value, frozenset())

    def to_json(self) -> str:
        doc = {lv: sorted(list(k) for k in keys) for lv, keys in sorted(self.banned.items())}
        return json.dumps({"banned": doc}, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> HoldoutPlan:
        doc = json.loads(text)["banned"]
        return cls({lv: frozenset(tuple(k) for k in keys) for lv, keys in doc.items()})


# --------------------------------------------------------------------------
# rendering

def cell_codes(scene: SceneSpec, grammar: SyntheticGrammar) -> np.ndarray:
    """(H*W, 3) int array of shape/colour/size indices per cell, -1 for empty cells."""
    codes = np.full((scene.height, scene.width, 3), -1, dtype=np.int8)
    s_idx = {s: i for i, s in enumerate(grammar.shapes)}
    c_idx = {c: i for i, c in enumerate(grammar.colors)}
    z_idx = {z: i for i, z in enumerate(grammar.sizes)}
    for obj in scene.objects:
        for r, c in obj.footprint:
            if not (0 <= r < scene.height and 0 <= c < scene.width):
                raise OverlapViolation(f"{obj} leaves the {scene.height}x{scene.width} grid")
            if codes[r, c, 0] >= 0:
                raise OverlapViolation(f"cell {(r, c)} is covered by more than one object")
            codes[r, c] = (s_idx[obj.shape], c_idx[obj.color], z_idx[obj.size])
    return codes.reshape(-1, 3)


def coordinate_channels(height: int, width: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([rows / max(height - 1, 1), cols / max(width - 1, 1)], axis=-1).reshape(-1, 2)


def features_from_codes(codes: np.ndarray, height: int, width: int, n_shapes: int, n_colors: int) -> np.ndarray:
    n_sizes = len(SIZES)
    out = np.zeros((codes.shape[0], n_shapes + n_colors + n_sizes + 2))
    occupied = codes[:, 0] >= 0
    cells = np.nonzero(occupied)[0]
    out[cells, codes[cells, 0]] = 1.0
    out[cells, n_shapes + codes[cells, 1]] = 1.0
    out[cells, n_shapes + n_colors + codes[cells, 2]] = 1.0
    out[:, -2:] = coordinate_channels(height, width)
    return out


def render(scene: SceneSpec, grammar: SyntheticGrammar) -> np.ndarray:
    """Per-cell feature grid (H, W, F): one-hot shape, colour, size, then row/col in [0, 1]."""
    codes = cell_codes(scene, grammar)
    feats = features_from_codes(codes, scene.height, scene.width, len(grammar.shapes), len(grammar.colors))
    return feats.reshape(scene.height, scene.width, -1)


# --------------------------------------------------------------------------
# symbolic interpreter (independent of any model)

def _np_matches(obj: SceneObject, words: Sequence[str], grammar: SyntheticGrammar) -> bool:
    *attrs, noun = words
    if obj.shape != noun:
        return False
    for a in attrs:
        if a in grammar.sizes and obj.size != a:
            return False
        if a in grammar.colors and obj.color != a:
            return False
    return True


def _holds(rel: tuple[str, str], a: SceneObject, b: SceneObject) -> bool:
    name = rel[0]
    if name == "left":
        return a.cols[1] < b.cols[0]
    if name == "right":
        return a.cols[0] > b.cols[1]
    if name == "north":
        return a.rows[1] < b.rows[0]
    if name == "south":
        return a.rows[0] > b.rows[1]
    raise ValueError(f"unknown relation {rel}")


def _split_expression(tokens: Sequence[str], grammar: SyntheticGrammar):
    shapes = set(grammar.shapes)
    head_end = next(i for i, t in enumerate(tokens) if t in shapes) + 1
    if head_end == len(tokens):
        return list(tokens), None, None
    return list(tokens[:head_end]), tuple(tokens[head_end:head_end + 2]), list(tokens[head_end + 2:])


def interpret(tokens: Sequence[str], scene: SceneSpec, grammar: SyntheticGrammar) -> set[int]:
    """Indices of scene objects satisfying the expression."""
    head, rel, land = _split_expression(tokens, grammar)
    hits = {i for i, o in enumerate(scene.objects) if _np_matches(o, head, grammar)}
    if rel is None:
        return hits
    return {i for i in hits
            if any(j != i and _np_matches(o, land, grammar) and _holds(rel, scene.objects[i], o)
                   for j, o in enumerate(scene.objects))}


# --------------------------------------------------------------------------
# generation

@dataclass
class Dataset:
    train: list[Sample]
    test: list[Sample]
    holdout: HoldoutPlan
    config: SyntheticConfig


def _choose_bans(cfg: SyntheticConfig, rng: np.random.Generator) -> frozenset[tuple[str, str]]:
    g = cfg.grammar
    pairs = [(c, s) for c in g.colors for s in g.shapes]
    n_ban = int(round(cfg.holdout_fraction * len(pairs)))
    for _ in range(100):
        idx = rng.choice(len(pairs), size=n_ban, replace=False)
        banned = frozenset(pairs[i] for i in idx)
        allowed = [p for p in pairs if p not in banned]
        if {c for c, _ in allowed} == set(g.colors) and {s for _, s in allowed} == set(g.shapes):
            return banned
    raise InfeasibleHoldout(f"cannot ban {n_ban} of {len(pairs)} pairs and keep every attribute and noun")


def _place(rng: np.random.Generator, size: str, h: int, w: int, taken: set[tuple[int, int]]):
    k = FOOTPRINT[size]
    for _ in range(200):
        anchor = (int(rng.integers(0, h - k + 1)), int(rng.integers(0, w - k + 1)))
        fp = {(anchor[0] + i, anchor[1] + j) for i in range(k) for j in range(k)}
        if not fp & taken:
            return anchor, fp
    return None


class _Generator:
    def __init__(self, cfg: SyntheticConfig, banned: frozenset[tuple[str, str]], seed: int):
        self.cfg = cfg
        self.g = cfg.grammar
        self.banned = banned
        rng = np.random.default_rng([seed, 1])
        self.allowed = [(c, s) for c in self.g.colors for s in self.g.shapes if (c, s) not in banned]
        order = rng.permutation(len(self.allowed))
        ranks = np.empty(len(self.allowed))
        ranks[order] = np.arange(1, len(self.allowed) + 1)
        w = ranks ** -cfg.pair_zipf
        self.weights = w / w.sum()
        self.banned_list = sorted(banned)

    def _pair(self, rng, novel: bool) -> tuple[str, str]:
        if novel:
            return self.banned_list[int(rng.integers(len(self.banned_list)))]
        return self.allowed[int(rng.choice(len(self.allowed), p=self.weights))]

    def _landmark_words(self, rng, obj: SceneObject, allow_banned: bool) -> list[str]:
        if rng.random() < self.cfg.landmark_color_prob and (allow_banned or (obj.color, obj.shape) not in self.banned):
            return [obj.color, obj.shape]
        return [obj.shape]

    def sample(self, rng: np.random.Generator, novel: bool, allow_banned: bool):
        cfg, g = self.cfg, self.g
        for _ in range(100):
            out = self._attempt(rng, novel, allow_banned)
            if out is not None:
                return out
        raise RuntimeError("scene generation failed repeatedly; grid too small for the object budget")

    def _attempt(self, rng, novel: bool, allow_banned: bool):
        cfg, g = self.cfg, self.g
        h, w = cfg.height, cfg.width
        color, shape = self._pair(rng, novel)
        size = SIZES[int(rng.integers(2))]
        head = [color, shape]
        if rng.random() < cfg.size_prob:
            head = [size] + head
        relational = rng.random() < cfg.relational_prob

        taken: set[tuple[int, int]] = set()
        placed = _place(rng, size, h, w, taken)
        if placed is None:
            return None
        ref = SceneObject(shape, color, size, placed[0])
        taken |= placed[1]
        objects = [ref]

        tail: list[str] = []
        if relational:
            rel = g.relations[int(rng.integers(len(g.relations)))]
            for _ in range(50):
                lm_color, lm_shape = self._pair(rng, novel=False)
                lm = SceneObject(lm_shape, lm_color, SIZES[int(rng.integers(2))], (0, 0))
                spot = _place(rng, lm.size, h, w, taken)
                if spot is None:
                    continue
                lm = SceneObject(lm.shape, lm.color, lm.size, spot[0])
                if (_holds(rel, ref, lm) and not _np_matches(lm, head, g)
                        and (allow_banned or (lm.color, lm.shape) not in self.banned)):
                    objects.append(lm)
                    taken |= spot[1]
                    tail = list(rel) + self._landmark_words(rng, lm, allow_banned)
                    break
            else:
                return None

        # a distractor sharing the noun but differing in a mentioned attribute
        if len(head) == 3 and rng.random() < 0.5:
            d_attr = (shape, color, SIZES[1 - SIZES.index(size)])
        else:
            others = [c for c in g.colors if c != color and (allow_banned or (c, shape) not in self.banned)]
            d_attr = (shape, others[int(rng.integers(len(others)))], SIZES[int(rng.integers(2))])
        distractors = [d_attr]
        for _ in range(int(rng.integers(1, cfg.max_extra_distractors + 1))):
            distractors.append((g.shapes[int(rng.integers(len(g.shapes)))],
                                g.colors[int(rng.integers(len(g.colors)))], SIZES[int(rng.integers(2))]))
        for k, (s_, c_, z_) in enumerate(distractors):
            cand = SceneObject(s_, c_, z_, (0, 0))
            if _np_matches(cand, head, g) or (not allow_banned and (c_, s_) in self.banned):
                continue
            spot = _place(rng, z_, h, w, taken)
            if spot is None:
                if k == 0:
                    return None
                continue
            objects.append(SceneObject(s_, c_, z_, spot[0]))
            taken |= spot[1]
        if len(objects) < 2 + int(relational):
            return None

        order = rng.permutation(len(objects))
        objects = [objects[i] for i in order]
        scene = SceneSpec(h, w, tuple(objects), int(np.nonzero(order == 0)[0][0]))
        tokens = head + tail
        if interpret(tokens, scene, g) != {scene.referent}:
            return None
        return tokens, scene


def _make_sample(sid: str, tokens: list[str], scene: SceneSpec, grammar: SyntheticGrammar) -> Sample:
    return Sample(sid, parse_synthetic(tokens, grammar), scene, scene.mask())


def generate_dataset(config: SyntheticConfig, seed: int) -> Dataset:
    rng = np.random.default_rng([seed, 0])
    banned = _choose_bans(config, rng)
    gen = _Generator(config, banned, seed)
    g = config.grammar

    train = []
    for i in range(config.n_train):
        tokens, scene = gen.sample(np.random.default_rng([seed, 2, i]), novel=False, allow_banned=False)
        train.append(_make_sample(f"tr{i:06d}", tokens, scene, g))
    test = []
    for i in range(config.n_test):
        srng = np.random.default_rng([seed, 3, i])
        novel = bool(banned) and srng.random() < config.test_novel_fraction
        tokens, scene = gen.sample(srng, novel=novel, allow_banned=True)
        test.append(_make_sample(f"te{i:06d}", tokens, scene, g))

    words = {w for s in train for w in s.tokens}
    missing = sorted({x for pair in banned for x in pair} - words)
    if missing:
        raise InfeasibleHoldout(f"banned components never seen in training: {missing}")
    plan = HoldoutPlan({Level.WW.value: banned})
    return Dataset(train, test, plan, config)


# --------------------------------------------------------------------------
# dataset files: one JSON object per line

def sample_record(s: Sample) -> dict:
    rec = {"id": s.id, "tree": s.tree.to_bracketed()}
    if isinstance(s.image, SceneSpec):
        rec["image"] = s.image.to_dict()
    else:
        rec["image"] = s.image
    mask = np.asarray(s.mask, dtype=np.uint8)
    rec["mask"] = ["".join(str(int(v)) for v in row) for row in mask]
    return rec


def sample_from_record(rec: dict) -> Sample:
    image = rec.get("image")
    if isinstance(image, dict):
        image = SceneSpec.from_dict(image)
    mask = rec.get("mask")
    if isinstance(mask, list):
        mask = np.array([[int(ch) for ch in row] for row in mask], dtype=np.uint8)
    return Sample(str(rec["id"]), parse_bracketed(rec["tree"]), image, mask)


def write_samples(path: Path, samples: Iterable[Sample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(sample_record(s), sort_keys=True, separators=(",", ":")) + "\n")


def read_samples(path: Path) -> list[Sample]:
    with open(path, encoding="utf-8") as fh:
        return [sample_from_record(json.loads(line)) for line in fh if line.strip()]


def write_dataset(ds: Dataset, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_samples(out_dir / "train.jsonl", ds.train)
    write_samples(out_dir / "test.jsonl", ds.test)
    (out_dir / "holdout.json").write_text(ds.holdout.to_json(), encoding="utf-8")
    (out_dir / "synthetic.json").write_text(
        json.dumps(asdict(ds.config), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_dataset(out_dir: Path) -> Dataset:
    cfg = SyntheticConfig(**json.loads((out_dir / "synthetic.json").read_text(encoding="utf-8")))
    return Dataset(read_samples(out_dir / "train.jsonl"), read_samples(out_dir / "test.jsonl"),
                   HoldoutPlan.from_json((out_dir / "holdout.json").read_text(encoding="utf-8")), cfg)
