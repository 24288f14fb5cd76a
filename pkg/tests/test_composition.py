"""Composition functions, pruning schedules, inside-outside charts."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from synlm import tape as T
from synlm.composition import (CompositionConfig, CompositionModel,
                               ScheduleError, build_inside, build_merge_schedule,
                               build_outside, full_merge_schedule, induce_tree,
                               schedule_from_tree)
from synlm.evaluation import all_binary_trees, oracle_inside, oracle_outside
from synlm.optim import ParamStore
from synlm.tape import Tensor
from synlm.trees import random_tree, tree_height, tree_spans


def make_fns(seed=0, width=12, gen_width=12, score_dim=6):
    store = ParamStore(seed=seed)
    cfg = CompositionConfig(width=width, compose_layers=1, decompose_layers=1,
                            heads=2, ffn_mult=2, score_dim=score_dim,
                            parser_layers=1, gen_width=gen_width, max_len=64)
    return store, CompositionModel(store, cfg)


def leaves_for(fns, n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, fns.cfg.width))


class TestCompose:
    def test_zero_weight_blocks_reduce_to_role_sums(self, f64):
        """With all transformer block weights zeroed the blocks are the
        identity, so the output is layernorm((l + e_left) + (r + e_right)):
        the role embeddings enter additively."""
        store, fns = make_fns(seed=1)
        for name, t in store.items():
            if ".f_alpha.block" in name:
                t.data = np.zeros_like(t.data)
        rng = np.random.default_rng(0)
        l = rng.normal(size=(1, fns.cfg.width))
        r = rng.normal(size=(1, fns.cfg.width))
        with T.no_grad():
            got = fns.compose(Tensor(l), Tensor(r)).data[0]
            s = (l[0] + fns.role_left.data) + (r[0] + fns.role_right.data)
            want = T.layer_norm(Tensor(s[None, :]), fns.alpha_ln.gamma,
                                fns.alpha_ln.beta).data[0]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_not_commutative(self, f64):
        store, fns = make_fns(seed=2)
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(1, fns.cfg.width)))
        b = Tensor(rng.normal(size=(1, fns.cfg.width)))
        with T.no_grad():
            ab = fns.compose(a, b).data
            ba = fns.compose(b, a).data
        assert np.abs(ab - ba).max() > 1e-6

    def test_output_normalized_pre_affine(self, f64):
        # default affine is identity at init, so the stats survive it
        store, fns = make_fns(seed=4)
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(7, fns.cfg.width)))
        y = Tensor(rng.normal(size=(7, fns.cfg.width)))
        with T.no_grad():
            out = fns.compose(x, y).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-7)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_width_mismatch_error(self, f64):
        store, fns = make_fns()
        with pytest.raises(T.ShapeError):
            fns.compose(Tensor(np.zeros((1, 5))), Tensor(np.zeros((1, 5))))


class TestScores:
    def test_orthogonal_features_score_zero(self, f64):
        store, fns = make_fns(seed=0)
        d, ds = fns.cfg.width, fns.cfg.score_dim
        wl = np.zeros((d, ds)); wl[0, 0] = 1.0
        wr = np.zeros((d, ds)); wr[0, 1] = 1.0
        fns.phi_a_left.w.data = wl
        fns.phi_a_left.b.data = np.zeros(ds)
        fns.phi_a_right.w.data = wr
        fns.phi_a_right.b.data = np.zeros(ds)
        x = Tensor(np.ones((1, d)))
        with T.no_grad():
            s = fns.score_alpha(x, x).data[0]
        assert s == 0.0

    def test_bilinear_scaling(self, f64):
        store, fns = make_fns(seed=1)
        fns.phi_a_left.b.data = np.zeros_like(fns.phi_a_left.b.data)
        fns.phi_a_right.b.data = np.zeros_like(fns.phi_a_right.b.data)
        rng = np.random.default_rng(2)
        l = Tensor(rng.normal(size=(1, fns.cfg.width)))
        r = Tensor(rng.normal(size=(1, fns.cfg.width)))
        with T.no_grad():
            s1 = fns.score_alpha(l, r).data[0]
            fns.phi_a_left.w.data = fns.phi_a_left.w.data * 2
            fns.phi_a_right.w.data = fns.phi_a_right.w.data * 2
            s2 = fns.score_alpha(l, r).data[0]
        np.testing.assert_allclose(s2, 4 * s1, rtol=1e-10)

    def test_reproducible_bit_exact(self, f64):
        store, fns = make_fns(seed=3)
        rng = np.random.default_rng(4)
        l = Tensor(rng.normal(size=(2, fns.cfg.width)))
        r = Tensor(rng.normal(size=(2, fns.cfg.width)))
        with T.no_grad():
            a = fns.score_alpha(l, r).data
            b = fns.score_alpha(l, r).data
        np.testing.assert_array_equal(a, b)


class TestParserScores:
    def test_one_score_for_two_tokens(self, f64):
        store, fns = make_fns()
        leaves = Tensor(leaves_for(fns, 2))
        with T.no_grad():
            out = fns.parser_scores(leaves, [2])
        assert out[0].shape == (1,)

    def test_permutation_sensitive(self, f64):
        store, fns = make_fns(seed=5)
        lv = leaves_for(fns, 6, seed=6)
        with T.no_grad():
            s1 = fns.parser_scores(Tensor(lv), [6])[0].data
            s2 = fns.parser_scores(Tensor(lv[::-1].copy()), [6])[0].data
        assert np.abs(s1 - s2).max() > 1e-8

    def test_identical_rows_finite(self, f64):
        # all-<unk> input: every row identical
        store, fns = make_fns(seed=7)
        lv = np.tile(leaves_for(fns, 1, seed=8), (5, 1))
        with T.no_grad():
            s = fns.parser_scores(Tensor(lv), [5])[0].data
        assert np.isfinite(s).all()


class TestMergeSchedule:
    def test_hand_traced_example(self):
        sch = build_merge_schedule(np.array([3.0, 1.0, 2.0]))
        assert sch.batches == [[2], [3], [1]]
        assert tree_spans(sch.tree) == {(2, 3), (2, 4), (1, 4)}

    def test_uniform_scores_right_branching(self):
        sch = build_merge_schedule(np.zeros(5))
        assert tree_spans(sch.tree) == tree_spans(
            __import__("synlm.trees", fromlist=["right_branching"]).right_branching(6))
        # merge order is descending boundary index
        merges = [k for b in sch.batches for k in b]
        assert merges == [5, 4, 3, 2, 1]

    def test_balanced_batch_count(self):
        # scores shaped so splits recurse evenly: 3 batches for n=8
        v = np.array([1.0, 2.0, 1.0, 3.0, 1.0, 2.0, 1.0])
        sch = build_merge_schedule(v)
        assert len(sch.batches) == 3

    def test_batches_equal_tree_height(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(2, 33))
            sch = build_merge_schedule(rng.normal(size=n - 1))
            assert len(sch.batches) == tree_height(sch.tree)
            assert sorted(k for b in sch.batches for k in b) == list(range(1, n))

    def test_cell_count_linear(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 65))
            sch = build_merge_schedule(rng.normal(size=n - 1))
            assert sch.cell_count() <= 3 * n

    def test_atomic_boundaries_merge_first(self):
        v = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
        sch = build_merge_schedule(v, atomic_spans=[(2, 4)])
        spans = tree_spans(sch.tree)
        assert (2, 4) in spans  # the word is a complete node
        first_batch = set(sch.batches[0])
        assert first_batch & {2, 3}  # its pieces merge before anything above

    def test_n1_trivial(self):
        sch = build_merge_schedule(np.zeros(0), n=1)
        assert sch.batches == [] and sch.steps == []
        assert sch.cell_count() == 1

    def test_k_and_parent_maps_consistent(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = int(rng.integers(3, 20))
            sch = build_merge_schedule(rng.normal(size=n - 1))
            kmap = sch.k_map()
            pmap = sch.parent_map()
            for span, ks in kmap.items():
                i, j = span
                for k in ks:
                    assert (i, k) in kmap or i == k
                    assert (k + 1, j) in kmap or k + 1 == j
            for span in kmap:
                if span != (1, n):
                    assert span in pmap and pmap[span]


class TestInsideCharts:
    def test_n1_chart_only_leaf(self, f64):
        store, fns = make_fns()
        chart = build_inside(fns, Tensor(leaves_for(fns, 1)), [1],
                             [full_merge_schedule(1)])
        assert chart.materialized_count(0) == 1
        assert chart.split_scores(0, (1, 1)).size == 0

    def test_n2_single_split(self, f64):
        store, fns = make_fns(seed=3)
        lv = leaves_for(fns, 2, seed=4)
        with T.no_grad():
            chart = build_inside(fns, Tensor(lv), [2], [full_merge_schedule(2)])
            direct = fns.compose(Tensor(lv[0:1]), Tensor(lv[1:2])).data[0]
        np.testing.assert_allclose(chart.inside_vec(0, (1, 2)), direct, atol=1e-12)

    def test_full_matches_oracle_recursion(self, f64):
        store, fns = make_fns(seed=5)
        lv = leaves_for(fns, 5, seed=6)
        with T.no_grad():
            chart = build_inside(fns, Tensor(lv), [5], [full_merge_schedule(5)])
        ref = oracle_inside(fns, lv)
        for span, (vec, scores) in ref.items():
            np.testing.assert_allclose(chart.inside_vec(0, span), vec, atol=1e-10)
            got = chart.split_scores(0, span)
            if scores.size:
                np.testing.assert_allclose(got, scores, atol=1e-10)

    def test_pruned_unpruned_equivalence(self, f64):
        store, fns = make_fns(seed=7)
        lv = leaves_for(fns, 6, seed=8)
        with T.no_grad():
            c1 = build_inside(fns, Tensor(lv), [6], [full_merge_schedule(6)])
            c2 = build_inside(fns, Tensor(lv), [6], [full_merge_schedule(6)])
        for i in range(1, 7):
            for j in range(i, 7):
                np.testing.assert_allclose(c1.inside_vec(0, (i, j)),
                                           c2.inside_vec(0, (i, j)), atol=1e-10)

    def test_pruned_cells_within_bound(self, f64):
        store, fns = make_fns(seed=9)
        rng = np.random.default_rng(10)
        for _ in range(10):
            n = int(rng.integers(2, 33))
            lv = leaves_for(fns, n, seed=int(rng.integers(1e6)))
            sch = build_merge_schedule(rng.normal(size=n - 1))
            with T.no_grad():
                chart = build_inside(fns, Tensor(lv), [n], [sch])
            assert chart.materialized_count(0) <= 3 * n

    def test_split_weights_normalize(self, f64):
        store, fns = make_fns(seed=11)
        n = 7
        lv = leaves_for(fns, n, seed=12)
        sch = build_merge_schedule(np.random.default_rng(13).normal(size=n - 1))
        with T.no_grad():
            chart = build_inside(fns, Tensor(lv), [n], [sch])
        for span, rec in chart.cells[0].items():
            if rec.level < 0:
                continue
            sc = chart.split_scores(0, span)
            w = np.exp(sc - sc.max())
            w /= w.sum()
            np.testing.assert_allclose(w.sum(), 1.0, rtol=1e-12)

    def test_no_information_leakage(self, f64):
        """i[i][j] depends only on tokens i..j."""
        store, fns = make_fns(seed=14)
        n = 6
        lv = leaves_for(fns, n, seed=15)
        lv2 = lv.copy()
        lv2[4] += 1.0  # perturb token 5
        with T.no_grad():
            c1 = build_inside(fns, Tensor(lv), [n], [full_merge_schedule(n)])
            c2 = build_inside(fns, Tensor(lv2), [n], [full_merge_schedule(n)])
        for (i, j) in [(1, 2), (2, 4), (1, 4), (2, 3)]:
            np.testing.assert_array_equal(c1.inside_vec(0, (i, j)),
                                          c2.inside_vec(0, (i, j)))
        assert np.abs(c1.inside_vec(0, (1, 5)) - c2.inside_vec(0, (1, 5))).max() > 0

    def test_missing_cell_reference_raises(self, f64):
        store, fns = make_fns()
        sch = build_merge_schedule(np.array([2.0, 1.0]))
        sch.steps[-1][-1].splits.append(99)
        with pytest.raises((ScheduleError, KeyError)):
            build_inside(fns, Tensor(leaves_for(fns, 3)), [3], [sch])

    def test_length_mismatch_raises(self, f64):
        store, fns = make_fns()
        with pytest.raises(ScheduleError):
            build_inside(fns, Tensor(leaves_for(fns, 3)), [3],
                         [full_merge_schedule(4)])

    def test_heights_weighted(self, f64):
        store, fns = make_fns(seed=16)
        n = 4
        lv = leaves_for(fns, n, seed=17)
        with T.no_grad():
            chart = build_inside(fns, Tensor(lv), [n], [full_merge_schedule(n)])
        assert chart.weighted_height(0, (1, 1)) == 0.0
        h12 = chart.weighted_height(0, (1, 2))
        assert abs(h12 - 1.0) < 1e-12  # two leaves: height exactly 1
        hroot = chart.weighted_height(0)
        assert 2.0 <= hroot <= 3.0  # mixture over heights 2 and 3


class TestOutside:
    def test_n1_root_vector(self, f64):
        store, fns = make_fns()
        chart = build_inside(fns, Tensor(leaves_for(fns, 1)), [1],
                             [full_merge_schedule(1)])
        with T.no_grad():
            build_outside(chart)
        np.testing.assert_array_equal(chart.outside_vec(0, (1, 1)),
                                      fns.root_outside.data)

    def test_n2_unit_parent_weight(self, f64):
        store, fns = make_fns(seed=18)
        lv = leaves_for(fns, 2, seed=19)
        with T.no_grad():
            chart = build_inside(fns, Tensor(lv), [2], [full_merge_schedule(2)])
            build_outside(chart)
            i22 = chart.inside_vec(0, (2, 2))
            want = fns.decompose(Tensor(fns.root_outside.data[None, :]),
                                 Tensor(i22[None, :]), "right").data[0]
        np.testing.assert_allclose(chart.outside_vec(0, (1, 1)), want, atol=1e-12)

    def test_full_matches_oracle(self, f64):
        store, fns = make_fns(seed=20)
        lv = leaves_for(fns, 5, seed=21)
        with T.no_grad():
            chart = build_inside(fns, Tensor(lv), [5], [full_merge_schedule(5)])
            build_outside(chart)
        ref = oracle_outside(fns, lv)
        for span, vec in ref.items():
            np.testing.assert_allclose(chart.outside_vec(0, span), vec, atol=1e-10)

    def test_outside_depends_only_on_context(self, f64):
        store, fns = make_fns(seed=22)
        n = 5
        lv = leaves_for(fns, n, seed=23)
        lv2 = lv.copy()
        lv2[2] += 1.0  # perturb token 3
        with T.no_grad():
            c1 = build_inside(fns, Tensor(lv), [n], [full_merge_schedule(n)])
            build_outside(c1)
            c2 = build_inside(fns, Tensor(lv2), [n], [full_merge_schedule(n)])
            build_outside(c2)
        # o(3,3) is a function of tokens 1,2,4,5 only -> unchanged
        np.testing.assert_allclose(c1.outside_vec(0, (3, 3)),
                                   c2.outside_vec(0, (3, 3)), atol=1e-12)
        assert np.abs(c1.outside_vec(0, (1, 1)) -
                      c2.outside_vec(0, (1, 1))).max() > 0

    def test_pruned_outside_covers_all_cells(self, f64):
        store, fns = make_fns(seed=24)
        rng = np.random.default_rng(25)
        n = 9
        lv = leaves_for(fns, n, seed=26)
        sch = build_merge_schedule(rng.normal(size=n - 1))
        with T.no_grad():
            chart = build_inside(fns, Tensor(lv), [n], [sch])
            build_outside(chart)
        for span in chart.cells[0]:
            assert np.isfinite(chart.outside_vec(0, span)).all()


class TestInduceTree:
    def test_n2(self, f64):
        store, fns = make_fns()
        with T.no_grad():
            chart = build_inside(fns, Tensor(leaves_for(fns, 2)), [2],
                                 [full_merge_schedule(2)])
        t = induce_tree(chart, 0)
        assert tree_spans(t) == {(1, 2)}

    def test_argmax_choice_respected(self, f64):
        store, fns = make_fns(seed=27)
        with T.no_grad():
            chart = build_inside(fns, Tensor(leaves_for(fns, 3, seed=28)), [3],
                                 [full_merge_schedule(3)])
        sc = chart.split_scores(0, (1, 3))
        t = induce_tree(chart, 0)
        if sc[0] >= sc[1]:
            # split k=1 gives (x1 (x2 x3))
            assert tree_spans(t) == {(2, 3), (1, 3)}
        else:
            assert tree_spans(t) == {(1, 2), (1, 3)}

    def test_matches_chain_argmax_enumeration(self, f64):
        """The induced tree is the unique member of the Catalan enumeration
        whose every split is the argmax within its span."""
        store, fns = make_fns(seed=29)
        for n in (4, 5, 6):
            with T.no_grad():
                chart = build_inside(fns, Tensor(leaves_for(fns, n, seed=n)),
                                     [n], [full_merge_schedule(n)])
            greedy = induce_tree(chart, 0)

            def is_chain_argmax(tree):
                for node in tree:
                    if node.is_leaf:
                        continue
                    rec = chart.cell(0, (node.i, node.j))
                    sc = chart.split_scores(0, (node.i, node.j))
                    best = rec.splits[int(np.argmax(sc))]
                    if node.split != best:
                        return False
                return True

            matches = [t for t in all_binary_trees(1, n) if is_chain_argmax(t)]
            assert len(matches) == 1
            assert tree_spans(matches[0]) == tree_spans(greedy)

    def test_never_splits_atomic_span(self, f64):
        store, fns = make_fns(seed=30)
        rng = np.random.default_rng(31)
        for _ in range(10):
            n = 8
            atomic = [(3, 5)]
            lv = leaves_for(fns, n, seed=int(rng.integers(1e6)))
            sch = build_merge_schedule(rng.normal(size=n - 1), atomic_spans=atomic)
            with T.no_grad():
                chart = build_inside(fns, Tensor(lv), [n], [sch])
            t = induce_tree(chart, 0)
            for node in t:
                if node.is_leaf:
                    continue
                # a split inside (3,5) from a node not inside (3,5) is illegal
                if 3 <= node.split < 5:
                    assert 3 <= node.i and node.j <= 5

    def test_parallel_step_counts(self):
        # balanced schedule: ceil(log2 n) steps
        v = np.array([1.0, 2.0, 1.0, 3.0, 1.0, 2.0, 1.0])
        sch = build_merge_schedule(v)
        assert len(sch.steps) == 3
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(2, 33))
            sch = build_merge_schedule(rng.normal(size=n - 1))
            assert len(sch.steps) == tree_height(sch.tree)


class TestScheduleFromTree:
    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(2, 12), seed=st.integers(0, 999))
    def test_tree_cells_are_materialized(self, n, seed):
        tree = random_tree(n, np.random.default_rng(seed))
        sch = schedule_from_tree(tree, n)
        kmap = sch.k_map()
        for span in tree_spans(tree):
            assert span in kmap
        assert sch.cell_count() <= 3 * n
