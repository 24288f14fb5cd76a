"""F1 scoring, punctuation remapping, word-piece collapse, oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from synlm.corpus import parse_bracketed
from synlm.evaluation import (F1Config, all_binary_trees, collapse_piece_spans,
                              corpus_f1, oracle_enumerate_actions, remap_spans,
                              sentence_f1)
from synlm.trees import right_branching, tree_spans


class TestSentenceF1:
    def test_identical_singleton(self):
        assert sentence_f1({(1, 2)}, {(1, 2)}) == 1.0

    def test_disjoint_zero(self):
        assert sentence_f1({(1, 2)}, {(2, 3)}) == 0.0

    def test_hand_arithmetic_half(self):
        # pred {(1,2),(1,4)}, gold {(1,2),(3,4)}, trivial spans excluded with
        # n=4: the whole-sentence span (1,4) drops, P=R=1 over... keep the
        # spec's framing: excluding trivial spans here means (1,4) is gone,
        # pred {(1,2)} vs gold {(1,2),(3,4)} -> P=1, R=0.5 -> F1=2/3; without
        # trivial exclusion P=R=0.5 -> F1=0.5
        cfg = F1Config(exclude_trivial=False)
        f1 = sentence_f1({(1, 2), (1, 4)}, {(1, 2), (3, 4)}, cfg, n=4)
        assert abs(f1 - 0.5) < 1e-12

    def test_both_empty_convention(self):
        assert sentence_f1(set(), set()) == 1.0

    def test_one_empty_zero(self):
        assert sentence_f1({(1, 2)}, set()) == 0.0
        assert sentence_f1(set(), {(1, 2)}) == 0.0

    def test_trivial_exclusion(self):
        cfg = F1Config(exclude_trivial=True)
        pred = {(1, 1), (1, 3), (2, 3)}
        gold = {(2, 2), (1, 3), (2, 3)}
        assert sentence_f1(pred, gold, cfg, n=3) == 1.0

    def test_out_of_range_raises(self):
        with pytest.raises(ValueError):
            sentence_f1({(0, 2)}, {(1, 2)}, n=3)

    @settings(max_examples=50, deadline=None)
    @given(st.sets(st.tuples(st.integers(1, 6), st.integers(1, 6)).map(
        lambda p: (min(p), max(p)))),
        st.sets(st.tuples(st.integers(1, 6), st.integers(1, 6)).map(
            lambda p: (min(p), max(p)))))
    def test_symmetric(self, a, b):
        cfg = F1Config(exclude_trivial=False)
        assert sentence_f1(a, b, cfg) == sentence_f1(b, a, cfg)


class TestRemap:
    def test_drop_and_reindex(self):
        spans = {(1, 3), (2, 2), (4, 5)}
        keep = [True, False, True, True, True]
        out = remap_spans(spans, keep)
        # token 2 vanishes: (1,3)->(1,2); (2,2)->(2,2)... the punct token
        # maps to its surviving neighbors; (4,5)->(3,4)
        assert (1, 2) in out and (3, 4) in out

    def test_span_of_only_dropped_tokens_vanishes(self):
        out = remap_spans({(2, 2)}, [True, False, True])
        assert out == set()

    @settings(max_examples=50, deadline=None)
    @given(keep=st.lists(st.booleans(), min_size=2, max_size=8))
    def test_order_preserved(self, keep):
        n = len(keep)
        spans = {(i, j) for i in range(1, n + 1) for j in range(i, n + 1)}
        out = remap_spans(spans, keep)
        kept = sum(keep)
        for (i, j) in out:
            assert 1 <= i <= j <= kept


class TestCollapse:
    def test_piece_spans_to_words(self):
        # pieces: [w1] [w2a w2b w2c] [w3]  -> atomic (2,4)
        spans = {(1, 1), (2, 4), (1, 4), (5, 5), (2, 5)}
        out = collapse_piece_spans(spans, [(2, 4)], 5)
        assert out == {(1, 1), (2, 2), (1, 2), (3, 3), (2, 3)}


class TestCorpusF1:
    def _golds(self, text):
        return parse_bracketed(text)

    def test_identical_trees_score_one(self):
        golds = self._golds("(S (NP a b) (VP c d))\n(S (A x) (B y z))")
        preds = [g.spans for g in golds]
        rep = corpus_f1(preds, golds)
        assert rep.mean_f1 == 1.0
        assert rep.count == 2 and rep.skipped == 0

    def test_right_branching_vs_right_branching_gold(self):
        golds = self._golds("(S a (X b (Y c d)))")
        pred = tree_spans(right_branching(4))
        rep = corpus_f1([pred], golds)
        assert rep.mean_f1 == 1.0

    def test_punctuation_removed_before_scoring(self):
        golds = self._golds("(S (NP a b) (. .))")
        pred = {(1, 2), (1, 3)}  # model attached the punct
        rep = corpus_f1([pred], golds)
        assert rep.mean_f1 == 1.0  # post-removal both reduce to {(1,2)} minus trivia
        assert rep.count == 1

    def test_short_after_filtering_skipped(self):
        golds = self._golds("(S (NP a) (. .))")
        rep = corpus_f1([{(1, 2)}], golds)
        assert rep.skipped == 1 and rep.count == 0

    def test_misaligned_corpora_error(self):
        golds = self._golds("(S a b)")
        with pytest.raises(ValueError):
            corpus_f1([], golds)

    def test_length_breakdown(self):
        golds = self._golds("(S a b c)\n" + "(S " + " ".join("abcdefghijkl") + ")")
        preds = [g.spans for g in golds]
        rep = corpus_f1(preds, golds)
        assert "<=10" in rep.by_length and "11-20" in rep.by_length


class TestOracles:
    def test_catalan_counts(self):
        assert len(all_binary_trees(1, 3)) == 2
        assert len(all_binary_trees(1, 4)) == 5
        assert len(all_binary_trees(1, 5)) == 14

    def test_oracle_inside_size_limit(self, f64):
        from synlm.gradsuite import toy_model
        from synlm.evaluation import oracle_inside
        model = toy_model(seed=0)
        with pytest.raises(ValueError):
            oracle_inside(model.fns, np.zeros((9, model.cfg.composition.width)))

    def test_enumeration_limit(self, f64):
        from synlm.decoding import ModelDecoder
        from synlm.gradsuite import toy_model
        dec = ModelDecoder(toy_model(seed=1))
        with pytest.raises(ValueError):
            oracle_enumerate_actions(dec, [5] * 6)

    def test_total_marginal_subprobability(self, f64):
        from synlm.decoding import ModelDecoder
        from synlm.gradsuite import toy_model
        dec = ModelDecoder(toy_model(seed=2, vocab_size=8))
        _, _, results, marg = oracle_enumerate_actions(dec, [5, 6, 7])
        total = sum(np.exp(lp) for lp, _ in results)
        assert 0.0 < total <= 1.0
        # the prefix marginal at n dominates the completed-tree mass
        assert np.exp(marg[3]) >= total - 1e-12
