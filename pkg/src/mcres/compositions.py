"""Sibling-pair compositions extracted from constituency trees."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import Iterable

from .parse import Internal, Leaf, Node, ParseTree, yield_of


class Level(str, Enum):
    WW = "WW"
    WP = "WP"
    PP = "PP"


LEVELS = (Level.WW, Level.WP, Level.PP)


class Kind(str, Enum):
    WORD = "word"
    PHRASE = "phrase"


@dataclass(frozen=True)
class Component:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("component needs at least one token")
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def kind(self) -> Kind:
        return Kind.WORD if len(self.tokens) == 1 else Kind.PHRASE

    @property
    def key(self) -> str:
        return " ".join(self.tokens)

    @classmethod
    def from_key(cls, key: str) -> Component:
        return cls(tuple(key.split(" ")))


def level_of(left: Component, right: Component) -> Level:
    if left.kind is Kind.WORD and right.kind is Kind.WORD:
        return Level.WW
    if left.kind is Kind.PHRASE and right.kind is Kind.PHRASE:
        return Level.PP
    return Level.WP


@dataclass(frozen=True)
class Composition:
    """An ordered (left, right) sibling pair; identity is (level, left key, right key)."""

    left: Component
    right: Component
    # token offsets of the two yields within the source expression
    span: tuple[tuple[int, int], tuple[int, int]] | None = field(default=None, compare=False)

    @property
    def level(self) -> Level:
        return level_of(self.left, self.right)

    @property
    def key(self) -> tuple[str, str]:
        return (self.left.key, self.right.key)

    @classmethod
    def from_keys(cls, left: str, right: str) -> Composition:
        return cls(Component.from_key(left), Component.from_key(right))

    def __repr__(self) -> str:
        return f"{self.level.value}({self.left.key!r}, {self.right.key!r})"


def components_of(comp: Composition) -> tuple[Component, Component]:
    return comp.left, comp.right


def extract_compositions(tree: ParseTree) -> frozenset[Composition]:
    """All pairs of children under a common parent, ordered by surface position.

    N-ary nodes contribute every unordered pair of distinct children.
    """
    found: dict[tuple[Level, tuple[str, str]], Composition] = {}

    def walk(node: Node, start: int) -> int:
        if isinstance(node, Leaf):
            return start + 1
        spans = []
        pos = start
        for child in node.children:
            end = walk(child, pos)
            spans.append((pos, end, child))
            pos = end
        for (s1, e1, a), (s2, e2, b) in combinations(spans, 2):
            comp = Composition(Component(yield_of(a)), Component(yield_of(b)), ((s1, e1), (s2, e2)))
            found.setdefault((comp.level, comp.key), comp)
        return pos

    walk(tree.root, 0)
    return frozenset(found.values())


def group_by_level(comps: Iterable[Composition]) -> dict[Level, frozenset[Composition]]:
    out: dict[Level, set[Composition]] = {lv: set() for lv in LEVELS}
    for c in comps:
        out[c.level].add(c)
    return {lv: frozenset(s) for lv, s in out.items()}


def constituent_yields(tree: ParseTree) -> frozenset[str]:
    """Keys of every constituent spanning two or more tokens."""
    return frozenset(
        " ".join(yield_of(n)) for n in tree.nodes()
        if isinstance(n, Internal) and len(yield_of(n)) >= 2
    )


def dump_compositions(comps: Iterable[Composition]) -> str:
    lines = sorted(f"{c.level.value}\t{c.left.key}\t{c.right.key}" for c in comps)
    return "".join(line + "\n" for line in lines)


def load_compositions(text: str) -> frozenset[Composition]:
    out = set()
    for line in text.splitlines():
        if not line:
            continue
        level, left, right = line.split("\t")
        comp = Composition.from_keys(left, right)
        if comp.level.value != level:
            raise ValueError(f"level {level} does not match components in {line!r}")
        out.add(comp)
    return frozenset(out)
