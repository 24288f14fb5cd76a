"""Loss definitions, gradient routing, the hard-EM step."""

import math

import numpy as np

from synlm import tape as T
from synlm.composition import (build_inside, build_merge_schedule, build_outside,
                               full_merge_schedule, induce_tree)
from synlm.corpus import Batch, TokenizedSentence
from synlm.generator import assemble_batch, forward_train, linearize_postorder, \
    with_eos
from synlm.gradsuite import toy_model, toy_sentences
from synlm.optim import adam_step
from synlm.tape import Tensor
from synlm.training import (TrainConfig, loss_ae, loss_ar, loss_height,
                            loss_parser, train_step)
from synlm.trees import branch, leaf, random_tree


def encode(model, sents, barrier=None, full=False):
    lengths = [len(s) for s in sents]
    ids = np.concatenate([np.asarray(s.ids, np.intp) for s in sents])
    leaves = model.leaf_vectors(ids)
    scores = model.fns.parser_scores(leaves, lengths)
    if full:
        schedules = [full_merge_schedule(n) for n in lengths]
    else:
        schedules = [build_merge_schedule(sc.data, s.atomic_spans, n)
                     for sc, s, n in zip(scores, sents, lengths)]
    chart = build_inside(model.fns, leaves, lengths, schedules,
                         barrier_label=barrier)
    return ids, lengths, scores, chart


class TestLossAE:
    def test_singleton_vocab_zero(self, f64):
        model = toy_model(seed=0)
        sents = [TokenizedSentence([0, 0])]
        tape = T.Tape()
        with tape:
            ids, lengths, _, chart = encode(model, sents)
            build_outside(chart)
            one_row = T.gather_rows(model.down_embeddings(), np.array([0]))
            val = loss_ae(chart, np.zeros(2, np.intp), one_row, lengths)
        assert abs(val.item()) < 1e-12

    def test_uniform_logits_log_v(self, f64):
        model = toy_model(seed=1)
        sents = [TokenizedSentence([5, 6, 7])]
        tape = T.Tape()
        with tape:
            ids, lengths, _, chart = encode(model, sents)
            build_outside(chart)
            chart.outside = Tensor(np.zeros_like(chart.outside.data))
            val = loss_ae(chart, ids, model.down_embeddings(), lengths)
        assert abs(val.item() - math.log(model.cfg.vocab_size)) < 1e-10

    def test_hand_computed_cross_entropy(self, f64):
        model = toy_model(seed=2)
        sents = [TokenizedSentence([5, 6])]
        tape = T.Tape()
        with tape:
            ids, lengths, _, chart = encode(model, sents)
            build_outside(chart)
            emb = model.down_embeddings()
            val = loss_ae(chart, ids, emb, lengths)
            logits = chart.outside.data[chart.leaf_rows(0)] @ emb.data.T
        want = 0.0
        for r, target in enumerate(ids):
            row = logits[r]
            want += -(row[target] - np.logaddexp.reduce(row))
        want /= len(ids)
        assert abs(val.item() - want) < 1e-10


class TestLossAR:
    def test_uniform_heads_hand_value(self, f64):
        """[GEN, GEN, COMP] with uniform 2-way and 4-way heads:
        -(1/3) [2 (ln 1/2 + ln 1/4) + ln 1/2]"""
        from synlm.generator import ActionSequence, TrainBatch

        seq = ActionSequence([True, True, False], [5, 6, -1],
                             [(1, 1), (2, 2), (1, 2)])
        bsz, tmax, mmax, V = 1, 3, 2, 4
        batch = TrainBatch(
            inputs=Tensor(np.zeros((bsz, tmax, 2))),
            w_ids=np.array([[0, 1, 2]]),
            is_gen=np.array([[True, True, False]]),
            valid=np.ones((1, 3), dtype=bool),
            gen_steps=np.array([[0, 1]]),
            gen_valid=np.ones((1, 2), dtype=bool),
            targets=np.array([[1, 2]]),
            seqs=[seq])
        tl = Tensor(np.zeros((bsz, tmax, 2)))
        kl = Tensor(np.zeros((bsz, mmax, V)))
        val = loss_ar(tl, kl, batch, word_counts=[2])
        want = -(2 * (math.log(0.5) + math.log(0.25)) + math.log(0.5)) / 3
        assert abs(val.item() - want) < 1e-12
        assert abs(val.item() - 1.617) < 1e-3

    def test_perfect_model_zero(self, f64):
        from synlm.generator import ActionSequence, TrainBatch

        seq = ActionSequence([True], [1], [(1, 1)])
        big = 1e3
        tl = np.zeros((1, 1, 2)); tl[0, 0, 1] = big
        kl = np.zeros((1, 1, 3)); kl[0, 0, 1] = big
        batch = TrainBatch(Tensor(np.zeros((1, 1, 2))), np.zeros((1, 1), np.intp),
                           np.array([[True]]), np.ones((1, 1), bool),
                           np.array([[0]]), np.ones((1, 1), bool),
                           np.array([[1]]), [seq])
        val = loss_ar(Tensor(tl), Tensor(kl), batch, word_counts=[1])
        assert abs(val.item()) < 1e-10

    def test_padding_invariance(self, f64):
        model = toy_model(seed=3)
        rng = np.random.default_rng(4)
        sents = toy_sentences(rng, 3, model.cfg.vocab_size, n_max=5)
        with T.no_grad():
            ids, lengths, _, chart = encode(model, sents)
            trees = [induce_tree(chart, i) for i in range(len(sents))]
            seqs = [with_eos(linearize_postorder(t, s.ids))
                    for t, s in zip(trees, sents)]
            big = assemble_batch(seqs, [(chart, i) for i in range(len(sents))],
                                 model.gen, model.fns)
            tl, kl = forward_train(model.gen, big)
            batch_val = loss_ar(tl, kl, big, word_counts=lengths).item()
            total_words = sum(lengths)
            want = 0.0
            for i, (seq, s) in enumerate(zip(seqs, sents)):
                single = assemble_batch([seq], [(chart, i)], model.gen, model.fns)
                tls, kls = forward_train(model.gen, single)
                li = loss_ar(tls, kls, single, word_counts=[lengths[i]]).item()
                want += li * lengths[i] / total_words
        assert abs(batch_val - want) < 1e-9


class TestLossParser:
    def test_two_tokens_zero(self, f64):
        scores = [Tensor(np.array([0.7]))]
        val = loss_parser(scores, [branch(leaf(1), leaf(2))])
        assert abs(val.item()) < 1e-12

    def test_three_tokens_uniform_ln2(self, f64):
        scores = [Tensor(np.zeros(2))]
        tree = branch(branch(leaf(1), leaf(2)), leaf(3))
        val = loss_parser(scores, [tree])
        assert abs(val.item() - math.log(2.0)) < 1e-12

    def test_decreases_after_adam_step(self, f64):
        model = toy_model(seed=5)
        rng = np.random.default_rng(6)
        sents = toy_sentences(rng, 4, model.cfg.vocab_size, n_max=6)
        trees = [random_tree(len(s), rng) for s in sents]

        def value():
            tape = T.Tape()
            with tape:
                ids = np.concatenate([np.asarray(s.ids, np.intp) for s in sents])
                leaves = model.leaf_vectors(ids)
                scores = model.fns.parser_scores(leaves, [len(s) for s in sents])
                val = loss_parser(scores, trees)
            return tape, val

        tape, before = value()
        tape.backward(before)
        adam_step(model.store, lr=1e-2)
        _, after = value()
        assert after.item() < before.item()


class TestLossHeight:
    def test_below_threshold_zero(self, f64):
        model = toy_model(seed=7)
        sents = [TokenizedSentence([5, 6, 7, 8])]
        with T.no_grad():
            ids, lengths, _, chart = encode(model, sents)
        val = loss_height(chart, 15.0, lengths)
        assert val.item() == 0.0

    def test_arithmetic_above_threshold(self, f64):
        # h_root = 20, threshold 15, n = 10 -> 0.5
        chart = _FakeChart(heights=[20.0], lengths=[10])
        val = loss_height(chart, 15.0, [10])
        assert abs(val.item() - 0.5) < 1e-12

    def test_gradient_reaches_split_weights(self, f64):
        model = toy_model(seed=8)
        sents = [TokenizedSentence([5, 6, 7, 8, 9])]
        tape = T.Tape()
        with tape:
            ids, lengths, scores, chart = encode(model, sents)
            val = loss_height(chart, 0.5, lengths)  # forced above threshold
        tape.backward(val)
        score_params = [model.store[n] for n in model.store.names()
                        if "phi_a" in n]
        assert any(p.grad is not None and np.abs(p.grad).max() > 0
                   for p in score_params)


class _FakeChart:
    def __init__(self, heights, lengths):
        self.heights = Tensor(np.asarray(heights))
        self._lengths = lengths

    def cell(self, s, span):
        class R:
            row = 0
        return R()


class TestTrainStep:
    def _batch(self, model, rng, count=6, n_max=6):
        return Batch(toy_sentences(rng, count, model.cfg.vocab_size, n_max))

    def test_smoke_loss_decreases_on_repeated_batch(self):
        wins = 0
        for seed in range(3):
            model = toy_model(seed=seed)
            rng = np.random.default_rng(seed)
            batch = self._batch(model, rng)
            cfg = TrainConfig(lr=3e-3, parser_noise=0.0)
            first = train_step(model, batch, cfg)
            for _ in range(4):
                last = train_step(model, batch, cfg)
            if last.total <= first.total:
                wins += 1
        assert wins >= 2

    def test_report_fields_finite(self):
        model = toy_model(seed=9)
        rng = np.random.default_rng(10)
        rep = train_step(model, self._batch(model, rng), TrainConfig(lr=1e-3))
        for key, val in rep.as_dict().items():
            if isinstance(val, float):
                assert math.isfinite(val)
        assert rep.tokens > 0 and not rep.skipped

    def test_barrier_blocks_ar_gradient_to_scores(self, f64):
        """With the barrier on, the auto-regression root contributes exactly
        zero gradient to the split compatibility scores while span vectors
        still receive it."""
        model = toy_model(seed=11)
        rng = np.random.default_rng(12)
        sents = toy_sentences(rng, 2, model.cfg.vocab_size, n_max=5)
        tape = T.Tape()
        with tape:
            ids, lengths, scores, chart = encode(model, sents, barrier="ar")
            for sc in chart.level_scores:
                sc.retain_grad = True
            chart.storage.retain_grad = True
            trees = [induce_tree(chart, i) for i in range(len(sents))]
            seqs = [with_eos(linearize_postorder(t, s.ids))
                    for t, s in zip(trees, sents)]
            tb = assemble_batch(seqs, [(chart, i) for i in range(len(sents))],
                                model.gen, model.fns)
            tl, kl = forward_train(model.gen, tb)
            l_ar = loss_ar(tl, kl, tb, word_counts=lengths)
        tape.backward(l_ar, root_label="ar")
        for sc in chart.level_scores:
            assert sc.grad is None or not np.abs(sc.grad).any()
        assert chart.storage.grad is not None
        assert np.abs(chart.storage.grad).max() > 0

    def test_barrier_accumulation_matches_unblocked_root(self, f64):
        """Accumulated score gradients across both roots equal the gradient
        from the reconstruction-side root alone (elementwise, 1e-10)."""
        model = toy_model(seed=13)
        rng = np.random.default_rng(14)
        sents = toy_sentences(rng, 2, model.cfg.vocab_size, n_max=4)

        def run(barrier):
            model.store.zero_grad()
            tape = T.Tape()
            with tape:
                ids, lengths, scores, chart = encode(model, sents,
                                                     barrier=barrier)
                build_outside(chart)
                for sc in chart.level_scores:
                    sc.retain_grad = True
                trees = [induce_tree(chart, i) for i in range(len(sents))]
                l_ae = loss_ae(chart, ids, model.down_embeddings(), lengths)
                l_p = loss_parser(scores, trees, word_counts=lengths)
                l_h = loss_height(chart, 1.0, lengths)
                l_star = T.add(T.add(l_ae, l_p), l_h)
                seqs = [with_eos(linearize_postorder(t, s.ids))
                        for t, s in zip(trees, sents)]
                tb = assemble_batch(seqs, [(chart, i) for i in range(len(sents))],
                                    model.gen, model.fns)
                tl, kl = forward_train(model.gen, tb)
                l_ar = loss_ar(tl, kl, tb, word_counts=lengths)
            tape.backward(l_star, root_label="ae")
            if barrier is not None:
                tape.backward(l_ar, root_label="ar")
            return [None if sc.grad is None else sc.grad.copy()
                    for sc in chart.level_scores]

        both = run("ar")
        ae_only = run(None)  # reconstruction-side root only, no barrier
        for g1, g2 in zip(both, ae_only):
            if g1 is None and g2 is None:
                continue
            np.testing.assert_allclose(g1, g2, atol=1e-10)

    def test_wo_surrogate_isolates_composition_from_ar(self, f64):
        model = toy_model(seed=15)
        model.gen.cfg.use_surrogate = False
        rng = np.random.default_rng(16)
        sents = toy_sentences(rng, 2, model.cfg.vocab_size, n_max=4)
        tape = T.Tape()
        with tape:
            ids, lengths, scores, chart = encode(model, sents)
            trees = [induce_tree(chart, i) for i in range(len(sents))]
            seqs = [with_eos(linearize_postorder(t, s.ids))
                    for t, s in zip(trees, sents)]
            tb = assemble_batch(seqs, [(chart, i) for i in range(len(sents))],
                                model.gen, model.fns)
            tl, kl = forward_train(model.gen, tb)
            l_ar = loss_ar(tl, kl, tb, word_counts=lengths)
        tape.backward(l_ar, root_label="ar")
        comp_names = [n for n in model.store.names() if n.startswith("comp.")]
        for name in comp_names:
            g = model.store[name].grad
            assert g is None or not np.abs(g).any(), name

    def test_symmetric_feedback_through_outside(self, f64):
        """The reconstruction gradient of token 1's embedding changes when
        a right-context token changes: feedback crosses the whole context."""
        model = toy_model(seed=17)

        def grad_of_embed_row(third_token):
            model.store.zero_grad()
            sents = [TokenizedSentence([5, 6, third_token])]
            tape = T.Tape()
            with tape:
                ids, lengths, _, chart = encode(model, sents)
                build_outside(chart)
                val = loss_ae(chart, ids, model.down_embeddings(), lengths)
            tape.backward(val)
            return model.gen.embed.grad[5].copy()

        g7 = grad_of_embed_row(7)
        g8 = grad_of_embed_row(8)
        assert np.abs(g7 - g8).max() > 0

    def test_nonfinite_loss_skips(self):
        model = toy_model(seed=18)
        model.gen.embed.data[:] = np.inf
        rng = np.random.default_rng(19)
        batch = Batch(toy_sentences(rng, 2, model.cfg.vocab_size, n_max=3))
        with np.errstate(all="ignore"):
            rep = train_step(model, batch, TrainConfig(lr=1e-3))
        assert rep.skipped

    def test_checkpoint_round_trip_bit_exact_losses(self, tmp_path):
        model = toy_model(seed=20)
        rng = np.random.default_rng(21)
        batch = Batch(toy_sentences(rng, 4, model.cfg.vocab_size, n_max=5))
        cfg = TrainConfig(lr=1e-3, parser_noise=0.0)
        for _ in range(2):
            train_step(model, batch, cfg)
        path = tmp_path / "m.ckpt"
        model.save(path, {"step": 2})
        rep1 = train_step(model, batch, cfg, update=False)

        fresh = toy_model(seed=99)
        fresh.load(path)
        rep2 = train_step(fresh, batch, cfg, update=False)
        assert rep1.as_dict() == rep2.as_dict()
