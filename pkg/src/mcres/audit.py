"""Set-based re-derivation of novel compositions and split invariants.

Nothing here touches the occurrence matrices: compositions are recomputed
from the parse trees and compared with plain Python sets, so these checks
stay independent of the matrix route in :mod:`mcres.splitter`.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Iterable, Mapping

from .compositions import LEVELS, Composition, Level, extract_compositions
from .parse import Internal, ParseTree, yield_of
from .splitter import Sample, VirtualSplit


def _comps(tree: ParseTree, level: Level) -> set[tuple[str, str]]:
    return {c.key for c in extract_compositions(tree) if c.level is level}


def _phrases(tree: ParseTree) -> set[str]:
    out = set()
    for node in tree.nodes():
        toks = yield_of(node)
        if isinstance(node, Internal) and len(toks) > 1:
            out.add(" ".join(toks))
    return out


@lru_cache(maxsize=65536)
def _derived(tree: ParseTree) -> tuple[dict[Level, frozenset[tuple[str, str]]], frozenset[str], frozenset[str]]:
    """Per-level composition keys, words and phrases of one tree (trees are immutable)."""
    return ({lv: frozenset(_comps(tree, lv)) for lv in LEVELS}, frozenset(tree.tokens), frozenset(_phrases(tree)))


def _present(key: str, words: set[str], phrases: set[str]) -> bool:
    return key in words if " " not in key else key in phrases


def naive_novel(vtr: Iterable[Sample], candidates: Iterable[Sample], level: Level) -> set[tuple[str, str]]:
    """Every candidate composition absent from D_vtr whose two components occur in D_vtr."""
    vtr = list(vtr)
    seen, words, phrases = set(), set(), set()
    for s in vtr:
        comps, w, p = _derived(s.tree)
        seen |= comps[level]
        words |= w
        phrases |= p
    out = set()
    for s in candidates:
        for left, right in _derived(s.tree)[0][level]:
            if (left, right) not in seen and _present(left, words, phrases) and _present(right, words, phrases):
                out.add((left, right))
    return out


def audit_split(split: VirtualSplit, samples: Mapping[str, Sample]) -> list[str]:
    """Violations of the split invariants; an empty list means the split is sound.

    Checks disjointness, per-level novelty of every testing sample, component
    existence for every annotation, and that no qualifying candidate is missing.
    """
    problems: list[str] = []
    vtr_ids = set(split.vtr_ids)
    vtr = [samples[i] for i in split.vtr_ids]
    seen = {lv: set() for lv in LEVELS}
    words, phrases = set(), set()
    for s in vtr:
        comps, w, p = _derived(s.tree)
        for lv in LEVELS:
            seen[lv] |= comps[lv]
        words |= w
        phrases |= p

    def novel_in(s: Sample, lv: Level) -> set[tuple[str, str]]:
        return {k for k in _derived(s.tree)[0][lv]
                if k not in seen[lv] and _present(k[0], words, phrases) and _present(k[1], words, phrases)}

    for lv in LEVELS:
        members = split.vte_ids.get(lv, ())
        overlap = vtr_ids.intersection(members)
        if overlap:
            problems.append(f"{lv.value}: {len(overlap)} samples in both D_vtr and the testing set")
        for sid in members:
            if not novel_in(samples[sid], lv):
                problems.append(f"{lv.value}: {sid} has no novel composition at this level")
        if split.candidate_ids:
            expected = {sid for sid in split.candidate_ids if novel_in(samples[sid], lv)}
            missing = expected - set(members)
            if missing:
                problems.append(f"{lv.value}: {len(missing)} qualifying candidates missing, e.g. {sorted(missing)[0]}")

    for sid, notes in split.annotations.items():
        for lv_name, left, right in notes:
            lv = Level(lv_name)
            if sid not in split.vte_ids.get(lv, ()):
                problems.append(f"{sid}: annotated at {lv_name} but not in that testing set")
            if (left, right) in seen[lv]:
                problems.append(f"{sid}: {lv_name}({left!r}, {right!r}) occurs in D_vtr")
            for part in (left, right):
                if not _present(part, words, phrases):
                    problems.append(f"{sid}: component {part!r} absent from D_vtr")
            if (left, right) not in _derived(samples[sid].tree)[0][lv]:
                problems.append(f"{sid}: annotated {lv_name}({left!r}, {right!r}) not in its tree")
    return problems


def as_compositions(keys: Iterable[tuple[str, str]]) -> set[Composition]:
    return {Composition.from_keys(l, r) for l, r in keys}
