"""Virtual training / testing set construction.

Each epoch the training corpus is split at random into a virtual training set
and a pool of candidates. Compositions at each level are recorded in binary
occurrence matrices; the difference ``M_candi - M_vtr`` exposes compositions
present among the candidates but absent from the virtual training set, and
those whose components also occur in the virtual training set are novel.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from .compositions import (
    LEVELS, Component, Composition, Kind, Level, constituent_yields,
    extract_compositions, group_by_level,
)
from .parse import ParseTree

log = logging.getLogger(__name__)

PAIRING_RETRIES = 16


class EmptyCorpus(ValueError):
    pass


class UnindexedComponent(KeyError):
    pass


class DimensionMismatch(ValueError):
    pass


class DegenerateSplit(ValueError):
    pass


class NoNovelCompositions(RuntimeError):
    """Some level has an empty virtual testing set."""

    def __init__(self, levels: Iterable[Level]):
        self.levels = tuple(levels)
        super().__init__("no novel compositions at level(s) " + ",".join(lv.value for lv in self.levels))


class PairingFailed(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    tree: ParseTree
    image: Any = None
    mask: Any = None

    @cached_property
    def tokens(self) -> tuple[str, ...]:
        return self.tree.tokens

    @cached_property
    def compositions(self) -> dict[Level, frozenset[Composition]]:
        return group_by_level(extract_compositions(self.tree))

    @cached_property
    def words(self) -> frozenset[str]:
        return frozenset(self.tokens)

    @cached_property
    def phrases(self) -> frozenset[str]:
        return constituent_yields(self.tree)

    @cached_property
    def component_keys(self) -> frozenset[str]:
        return self.words | self.phrases


# --------------------------------------------------------------------------
# index spaces

@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]

    @cached_property
    def index(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def __getitem__(self, word: str) -> int:
        return self.index[word]


@dataclass(frozen=True)
class PhraseInventory:
    phrases: tuple[str, ...]

    @cached_property
    def index(self) -> dict[str, int]:
        return {p: i for i, p in enumerate(self.phrases)}

    def __len__(self) -> int:
        return len(self.phrases)

    def __contains__(self, phrase: str) -> bool:
        return phrase in self.index

    def __getitem__(self, phrase: str) -> int:
        return self.index[phrase]


def build_vocab(corpus: Iterable[Sample]) -> Vocabulary:
    words = {w for s in corpus for w in s.tokens}
    if not words:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    return Vocabulary(tuple(sorted(words)))


def build_phrases(corpus: Iterable[Sample]) -> PhraseInventory:
    return PhraseInventory(tuple(sorted({p for s in corpus for p in s.phrases})))


# --------------------------------------------------------------------------
# occurrence matrices

@dataclass(frozen=True, eq=False)
class OccurrenceMatrix:
    """Binary matrix of ordered (left, right) compositions at one level.

    Axes: words for WW, phrases for PP; for WP a joint axis of words followed
    by phrases, which holds both the word-phrase and phrase-word blocks.
    """

    level: Level
    data: sparse.csr_matrix
    vocab: Vocabulary
    phrases: PhraseInventory

    def to_dense(self) -> np.ndarray:
        return self.data.toarray()

    def entries(self) -> set[tuple[int, int]]:
        coo = self.data.tocoo()
        return {(int(i), int(j)) for i, j, v in zip(coo.row, coo.col, coo.data) if v}


def _axis_size(level: Level, vocab: Vocabulary, phrases: PhraseInventory) -> int:
    return {Level.WW: len(vocab), Level.PP: len(phrases), Level.WP: len(vocab) + len(phrases)}[level]


def _component_index(comp: Component, level: Level, vocab: Vocabulary, phrases: PhraseInventory) -> int:
    try:
        if comp.kind is Kind.WORD:
            if level is Level.PP:
                raise KeyError(comp.key)
            return vocab[comp.key]
        if level is Level.WW:
            raise KeyError(comp.key)
        return phrases[comp.key] + (len(vocab) if level is Level.WP else 0)
    except KeyError:
        raise UnindexedComponent(f"{comp.kind.value} {comp.key!r} is not indexed for level {level.value}") from None


def _component_at(idx: int, level: Level, vocab: Vocabulary, phrases: PhraseInventory) -> Component:
    if level is Level.WW:
        return Component.from_key(vocab.words[idx])
    if level is Level.PP:
        return Component.from_key(phrases.phrases[idx])
    if idx < len(vocab):
        return Component.from_key(vocab.words[idx])
    return Component.from_key(phrases.phrases[idx - len(vocab)])


def build_matrix(samples: Iterable[Sample], level: Level, vocab: Vocabulary,
                 phrases: PhraseInventory) -> OccurrenceMatrix:
    rows, cols = [], []
    for s in samples:
        for c in s.compositions[level]:
            rows.append(_component_index(c.left, level, vocab, phrases))
            cols.append(_component_index(c.right, level, vocab, phrases))
    n = _axis_size(level, vocab, phrases)
    m = sparse.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    m.sum_duplicates()
    m.data[:] = 1
    return OccurrenceMatrix(level, m, vocab, phrases)


@dataclass(frozen=True)
class ComponentInventory:
    """Words and constituent phrases occurring in some sample set."""

    words: frozenset[str]
    phrases: frozenset[str]

    @classmethod
    def of(cls, samples: Iterable[Sample]) -> ComponentInventory:
        words: set[str] = set()
        phrases: set[str] = set()
        for s in samples:
            words |= s.words
            phrases |= s.phrases
        return cls(frozenset(words), frozenset(phrases))

    def has(self, comp: Component) -> bool:
        return comp.key in (self.words if comp.kind is Kind.WORD else self.phrases)


def identify_novel(m_candi: OccurrenceMatrix, m_vtr: OccurrenceMatrix,
                   vtr_components: ComponentInventory, level: Level) -> frozenset[Composition]:
    if (m_candi.data.shape != m_vtr.data.shape or m_candi.level is not level
            or m_vtr.level is not level or m_candi.vocab != m_vtr.vocab
            or m_candi.phrases != m_vtr.phrases):
        raise DimensionMismatch(f"matrices do not share the {level.value} index space")
    diff = (m_candi.data.astype(np.int8) - m_vtr.data.astype(np.int8)).tocoo()
    out = set()
    for i, j, v in zip(diff.row, diff.col, diff.data):
        if v != 1:
            continue
        comp = Composition(_component_at(int(i), level, m_candi.vocab, m_candi.phrases),
                           _component_at(int(j), level, m_candi.vocab, m_candi.phrases))
        if vtr_components.has(comp.left) and vtr_components.has(comp.right):
            out.add(comp)
    return frozenset(out)


# --------------------------------------------------------------------------
# virtual splits

def _annotation_key(level: Level, comp: Composition) -> tuple[str, str, str]:
    return (level.value, comp.left.key, comp.right.key)


@dataclass(frozen=True)
class VirtualSplit:
    epoch: int
    seed: int
    vtr_ids: tuple[str, ...]
    vte_ids: Mapping[Level, tuple[str, ...]]
    # sample id -> sorted (level, left key, right key) triples
    annotations: Mapping[str, tuple[tuple[str, str, str], ...]]
    candidate_ids: tuple[str, ...] = ()

    @property
    def empty_levels(self) -> tuple[Level, ...]:
        return tuple(lv for lv in LEVELS if not self.vte_ids.get(lv))

    def novelties(self, sample_id: str, levels: Iterable[Level] | None = None) -> list[Composition]:
        wanted = None if levels is None else {lv.value for lv in levels}
        return [Composition.from_keys(l, r) for lv, l, r in self.annotations.get(sample_id, ())
                if wanted is None or lv in wanted]

    def to_json(self) -> str:
        doc = {
            "epoch": self.epoch,
            "seed": self.seed,
            "vtr_ids": list(self.vtr_ids),
            "candidate_ids": list(self.candidate_ids),
            "vte_ids": {lv.value: list(self.vte_ids.get(lv, ())) for lv in LEVELS},
            "annotations": {k: [list(a) for a in v] for k, v in sorted(self.annotations.items())},
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> VirtualSplit:
        doc = json.loads(text)
        return cls(
            epoch=doc["epoch"], seed=doc["seed"], vtr_ids=tuple(doc["vtr_ids"]),
            vte_ids={Level(k): tuple(v) for k, v in doc["vte_ids"].items()},
            annotations={k: tuple(tuple(a) for a in v) for k, v in doc["annotations"].items()},
            candidate_ids=tuple(doc.get("candidate_ids", ())),
        )


def construct_split(train_set: Sequence[Sample], vtr_fraction: float, seed: int, epoch: int = 0,
                    vocab: Vocabulary | None = None, phrases: PhraseInventory | None = None) -> VirtualSplit:
    """Randomly split ``train_set`` and build one virtual testing set per level.

    Levels without any novel composition end up with an empty testing set and
    are logged; callers skip them for the epoch.
    """
    if not 0.0 < vtr_fraction < 1.0:
        raise DegenerateSplit(f"vtr_fraction must lie in (0, 1), got {vtr_fraction}")
    n = len(train_set)
    n_vtr = int(round(vtr_fraction * n))
    if n_vtr < 1 or n_vtr >= n:
        raise DegenerateSplit(f"{n} samples at fraction {vtr_fraction} leave one side empty")
    vocab = vocab or build_vocab(train_set)
    phrases = phrases or build_phrases(train_set)

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    vtr = [train_set[i] for i in np.sort(perm[:n_vtr])]
    cand = [train_set[i] for i in np.sort(perm[n_vtr:])]
    inventory = ComponentInventory.of(vtr)

    vte: dict[Level, tuple[str, ...]] = {}
    annotations: dict[str, set[tuple[str, str, str]]] = {}
    for level in LEVELS:
        novel = identify_novel(build_matrix(cand, level, vocab, phrases),
                               build_matrix(vtr, level, vocab, phrases), inventory, level)
        members = []
        for s in cand:
            hits = s.compositions[level] & novel
            if hits:
                members.append(s.id)
                annotations.setdefault(s.id, set()).update(_annotation_key(level, c) for c in hits)
        vte[level] = tuple(members)

    split = VirtualSplit(
        epoch=epoch, seed=seed, vtr_ids=tuple(s.id for s in vtr), vte_ids=vte,
        annotations={k: tuple(sorted(v)) for k, v in annotations.items()},
        candidate_ids=tuple(s.id for s in cand),
    )
    if split.empty_levels:
        log.warning("epoch %d: %s", epoch, NoNovelCompositions(split.empty_levels))
    return split


# --------------------------------------------------------------------------
# batch pairing

@dataclass(frozen=True)
class PairedBatch:
    train: tuple[str, ...]
    test: Mapping[str, tuple[str, ...]]   # testing-set name -> sample ids
    cover_size: int = 0                   # train samples chosen by the cover, before padding
    retries: int = 0

    @property
    def test_ids(self) -> tuple[str, ...]:
        return tuple(i for ids in self.test.values() for i in ids)


class CoverIndex:
    """Inverted index from component key to positions of D_vtr samples holding it."""

    def __init__(self, vtr: Sequence[Sample]):
        self.ids = tuple(s.id for s in vtr)
        postings: dict[str, list[int]] = {}
        for pos, s in enumerate(vtr):
            for key in s.component_keys:
                postings.setdefault(key, []).append(pos)
        self.postings = {k: np.asarray(v, dtype=np.int64) for k, v in postings.items()}

    def greedy_cover(self, needed: Iterable[str], rng: np.random.Generator) -> list[int] | None:
        """Greedy set cover; random tie-breaking. None if some key is held by no sample."""
        uncovered = set(needed)
        if any(k not in self.postings for k in uncovered):
            return None
        jitter = rng.random(len(self.ids)) * 0.5
        chosen: list[int] = []
        while uncovered:
            keys = sorted(uncovered)
            counts = np.bincount(np.concatenate([self.postings[k] for k in keys]), minlength=len(self.ids))
            best = int(np.argmax(counts + jitter))
            chosen.append(best)
            uncovered = {k for k in keys if not np.any(self.postings[k] == best)}
        return chosen


def _shares(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def pair_batches(split: VirtualSplit, active_levels: Sequence[Level], batch_size_te: int,
                 batch_size_tr: int, seed: int, cover: CoverIndex,
                 pools: Mapping[str, Sequence[str]] | None = None,
                 retries: int = PAIRING_RETRIES) -> PairedBatch:
    """Draw a virtual testing batch and a virtual training batch that covers it.

    ``pools`` overrides the testing sets (name -> ids); by default the pools are
    the split's per-level testing sets restricted to ``active_levels``. The
    training batch contains, for every novel composition annotated on a test
    sample, samples holding each of its components; the rest is padded at
    random from D_vtr.
    """
    if pools is None:
        pools = {lv.value: split.vte_ids.get(lv, ()) for lv in active_levels}
    empty = [name for name, ids in pools.items() if not ids]
    if empty:
        raise NoNovelCompositions(Level(n) for n in empty if n in Level.__members__)
    level_names = {lv.value for lv in active_levels}
    rng = np.random.default_rng(seed)
    shares = _shares(batch_size_te, len(pools))

    for attempt in range(retries + 1):
        test: dict[str, tuple[str, ...]] = {}
        for (name, ids), k in zip(pools.items(), shares):
            take = min(k, len(ids))
            test[name] = tuple(ids[i] for i in np.sort(rng.choice(len(ids), size=take, replace=False)))
        needed = set()
        for sid in (i for ids in test.values() for i in ids):
            for lv, left, right in split.annotations.get(sid, ()):
                if lv in level_names:
                    needed.update((left, right))
        chosen = cover.greedy_cover(needed, rng)
        if chosen is not None and len(chosen) <= batch_size_tr:
            break
    else:
        raise PairingFailed(f"no covering training batch within {batch_size_tr} samples after {retries} retries")

    n_pad = min(batch_size_tr, len(cover.ids)) - len(chosen)
    if n_pad > 0:
        rest = np.setdiff1d(np.arange(len(cover.ids)), np.asarray(chosen, dtype=np.int64))
        chosen = chosen + [int(x) for x in rng.choice(rest, size=n_pad, replace=False)]
    return PairedBatch(train=tuple(cover.ids[i] for i in chosen), test=test,
                       cover_size=len(chosen) - max(n_pad, 0), retries=attempt)


# --------------------------------------------------------------------------
# curriculum

def curriculum_levels(epoch: int, total_epochs: int) -> tuple[Level, ...]:
    """Active testing-set levels: WW for the first third, +WP for the middle, all after."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch < math.ceil(total_epochs / 3):
        return (Level.WW,)
    if epoch < math.ceil(2 * total_epochs / 3):
        return (Level.WW, Level.WP)
    return LEVELS


@dataclass(frozen=True)
class CurriculumSchedule:
    total_epochs: int
    enabled: bool = True

    @property
    def boundaries(self) -> tuple[int, int]:
        return math.ceil(self.total_epochs / 3), math.ceil(2 * self.total_epochs / 3)

    def levels(self, epoch: int) -> tuple[Level, ...]:
        return curriculum_levels(epoch, self.total_epochs) if self.enabled else LEVELS
