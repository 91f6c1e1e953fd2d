import logging

import numpy as np
import pytest

from mcres.audit import audit_split, naive_novel
from mcres.compositions import LEVELS, Component, Level
from mcres.splitter import (
    ComponentInventory, CoverIndex, CurriculumSchedule, DegenerateSplit, DimensionMismatch,
    EmptyCorpus, NoNovelCompositions, PairingFailed, UnindexedComponent, VirtualSplit, build_matrix,
    build_phrases, build_vocab, construct_split, curriculum_levels, identify_novel, pair_batches,
)

from conftest import flat_sample, tree_sample


def _novel(vtr, cand, level=Level.WW):
    everything = vtr + cand
    vocab, phrases = build_vocab(everything), build_phrases(everything)
    found = identify_novel(build_matrix(cand, level, vocab, phrases), build_matrix(vtr, level, vocab, phrases),
                           ComponentInventory.of(vtr), level)
    return {c.key for c in found}


def test_vocab_sizes():
    corpus = [flat_sample("a", "dark table"), flat_sample("b", "black coffee")]
    assert len(build_vocab(corpus)) == 4
    assert len(build_vocab([flat_sample("a", "dog")])) == 1
    assert build_vocab(corpus + corpus).words == build_vocab(corpus).words
    with pytest.raises(EmptyCorpus):
        build_vocab([])


def test_matrix_entries():
    corpus = [flat_sample("a", "dark table"), flat_sample("b", "black coffee")]
    vocab, phrases = build_vocab(corpus), build_phrases(corpus)
    m = build_matrix(corpus, Level.WW, vocab, phrases)
    assert m.entries() == {(vocab["dark"], vocab["table"]), (vocab["black"], vocab["coffee"])}
    assert build_matrix([], Level.WW, vocab, phrases).data.nnz == 0


def test_matrix_union_is_entrywise_max():
    a = [flat_sample("a", "dark table"), tree_sample("c", "(S (NP (W x) (W y)) (W z))")]
    b = [flat_sample("b", "black coffee"), flat_sample("d", "dark coffee")]
    vocab, phrases = build_vocab(a + b), build_phrases(a + b)
    for lv in LEVELS:
        union = build_matrix(a + b, lv, vocab, phrases).to_dense()
        assert np.array_equal(union, np.maximum(build_matrix(a, lv, vocab, phrases).to_dense(),
                                                build_matrix(b, lv, vocab, phrases).to_dense()))


def test_matrix_unindexed():
    corpus = [flat_sample("a", "dark table")]
    with pytest.raises(UnindexedComponent):
        build_matrix([flat_sample("b", "red fox")], Level.WW, build_vocab(corpus), build_phrases(corpus))


def test_dark_coffee_is_novel():
    vtr = [flat_sample("a", "dark table"), flat_sample("b", "black coffee")]
    assert _novel(vtr, [flat_sample("c", "dark coffee")]) == {("dark", "coffee")}


def test_missing_component_is_not_novel():
    assert _novel([flat_sample("b", "black coffee")], [flat_sample("c", "dark coffee")]) == set()


def test_same_corpus_gives_nothing():
    vtr = [flat_sample("a", "dark table")]
    assert _novel(vtr, list(vtr)) == set()


def test_dimension_mismatch():
    a, b = [flat_sample("a", "dark table")], [flat_sample("b", "black coffee")]
    ma = build_matrix(a, Level.WW, build_vocab(a), build_phrases(a))
    mb = build_matrix(b, Level.WW, build_vocab(a + b), build_phrases(a + b))
    with pytest.raises(DimensionMismatch):
        identify_novel(mb, ma, ComponentInventory.of(a), Level.WW)


def test_phrase_levels_need_phrase_components():
    vtr = [tree_sample("a", "(S (NP (W red) (W box)) (VP (W on) (W mat)))"),
           tree_sample("b", "(S (NP (W blue) (W cup)) (VP (W on) (W rug)))")]
    cand = [tree_sample("c", "(S (NP (W red) (W box)) (VP (W on) (W rug)))"),
            tree_sample("d", "(S (NP (W green) (W cup)) (VP (W on) (W rug)))")]
    assert _novel(vtr, cand, Level.PP) == {("red box", "on rug")}
    assert _novel(vtr, cand, Level.PP) == naive_novel(vtr, cand, Level.PP)


def _toy():
    words = ["dark table", "black coffee", "dark coffee", "black table", "red cup", "blue cup"]
    return [flat_sample(f"s{i}", w) for i, w in enumerate(words)]


def test_split_sizes_and_fraction():
    corpus = [flat_sample(f"s{i:03d}", f"w{i % 7} v{i % 5}") for i in range(100)]
    split = construct_split(corpus, 0.6, 0)
    assert len(split.vtr_ids) == 60
    assert audit_split(split, {s.id: s for s in corpus}) == []
    with pytest.raises(DegenerateSplit):
        construct_split(corpus, 1.0, 0)


def test_split_single_ww_novelty():
    # the 6-sample toy corpus: pick a seed that puts "dark coffee" among the candidates
    corpus = _toy()
    by_id = {s.id: s for s in corpus}
    for seed in range(200):
        split = construct_split(corpus, 0.5, seed)
        vtr = [by_id[i] for i in split.vtr_ids]
        cand = [by_id[i] for i in split.candidate_ids]
        expected = {s.id for s in cand if s.compositions[Level.WW] and
                    {c.key for c in s.compositions[Level.WW]} & naive_novel(vtr, cand, Level.WW)}
        assert set(split.vte_ids[Level.WW]) == expected
        if expected == {"s2"}:
            assert split.annotations["s2"] == (("WW", "dark", "coffee"),)
            break
    else:
        pytest.fail("no seed produced the single-novelty split")


def test_no_novelty_anywhere(caplog):
    corpus = [tree_sample(f"d{i}", "(NN dog)") for i in range(10)]
    with caplog.at_level(logging.WARNING):
        split = construct_split(corpus, 0.6, 0)
    assert split.empty_levels == LEVELS
    assert "no novel compositions" in caplog.text.lower()
    cover = CoverIndex([s for s in corpus if s.id in split.vtr_ids])
    with pytest.raises(NoNovelCompositions):
        pair_batches(split, [Level.WW], 4, 4, 0, cover)


def test_manifest_round_trip_and_determinism():
    corpus = _toy() * 1
    a = construct_split(corpus, 0.5, 11)
    b = construct_split(corpus, 0.5, 11)
    assert a.to_json() == b.to_json()
    assert VirtualSplit.from_json(a.to_json()).to_json() == a.to_json()
    seeds = {construct_split(corpus, 0.5, s).vtr_ids for s in range(20)}
    assert len(seeds) > 1


def _manual_split(vtr, vte, notes):
    return VirtualSplit(0, 0, tuple(s.id for s in vtr), {Level.WW: tuple(s.id for s in vte), Level.WP: (), Level.PP: ()},
                        notes, tuple(s.id for s in vte))


def test_pairing_covers_components():
    vtr = [flat_sample("a", "dark table"), flat_sample("b", "black coffee"), flat_sample("x", "red cup"),
           flat_sample("y", "blue mug")]
    vte = [flat_sample("c", "dark coffee")]
    split = _manual_split(vtr, vte, {"c": (("WW", "dark", "coffee"),)})
    pb = pair_batches(split, [Level.WW], 1, 2, 0, CoverIndex(vtr))
    assert set(pb.train) == {"a", "b"} and pb.cover_size == 2
    assert pb.test == {"WW": ("c",)}


def test_single_sample_cover_then_padding():
    vtr = [flat_sample("a", "dark coffee table"), flat_sample("b", "red cup"), flat_sample("x", "blue mug")]
    vte = [flat_sample("c", "dark table")]
    split = _manual_split(vtr, vte, {"c": (("WW", "dark", "table"),)})
    pb = pair_batches(split, [Level.WW], 1, 3, 0, CoverIndex(vtr))
    assert pb.cover_size == 1 and pb.train[0] == "a" and len(set(pb.train)) == 3


def test_pairing_fails_when_cover_too_large():
    vtr = [flat_sample("a", "dark table"), flat_sample("b", "black coffee")]
    vte = [flat_sample("c", "dark coffee")]
    split = _manual_split(vtr, vte, {"c": (("WW", "dark", "coffee"),)})
    with pytest.raises(PairingFailed):
        pair_batches(split, [Level.WW], 1, 1, 0, CoverIndex(vtr), retries=2)


def test_active_levels_restrict_test_pools(small_dataset):
    corpus = small_dataset.train
    split = construct_split(corpus, 0.6, 4)
    by_id = {s.id: s for s in corpus}
    cover = CoverIndex([by_id[i] for i in split.vtr_ids])
    pb = pair_batches(split, [Level.WW], 8, 32, 1, cover)
    assert set(pb.test) == {"WW"}
    assert set(pb.test_ids) <= set(split.vte_ids[Level.WW])
    assert not set(pb.train) & set(pb.test_ids)
    pb = pair_batches(split, LEVELS, 9, 32, 1, cover)
    assert [len(v) for v in pb.test.values()] == [3, 3, 3]


@pytest.mark.parametrize("E,expected", [
    (1, ["W"]), (2, ["W", "WP"]), (3, ["W", "WP", "WPP"]),
    (9, ["W"] * 3 + ["WP"] * 3 + ["WPP"] * 3),
    (10, ["W"] * 4 + ["WP"] * 3 + ["WPP"] * 3),
    (12, ["W"] * 4 + ["WP"] * 4 + ["WPP"] * 4),
])
def test_curriculum_table(E, expected):
    code = {(Level.WW,): "W", (Level.WW, Level.WP): "WP", LEVELS: "WPP"}
    assert [code[curriculum_levels(e, E)] for e in range(E)] == expected


def test_curriculum_nested_and_disabled():
    for E in range(1, 30):
        sets = [set(curriculum_levels(e, E)) for e in range(E)]
        assert all(a <= b for a, b in zip(sets, sets[1:]))
    assert CurriculumSchedule(6, enabled=False).levels(0) == LEVELS
    with pytest.raises(ValueError):
        curriculum_levels(3, 3)


def test_inventory_has():
    inv = ComponentInventory.of([tree_sample("a", "(S (NP (W red) (W box)) (W now))")])
    assert inv.has(Component(("red",))) and inv.has(Component(("red", "box")))
    assert not inv.has(Component(("box", "now")))
