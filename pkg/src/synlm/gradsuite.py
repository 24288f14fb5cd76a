"""Finite-difference validation of the end-to-end objective.

Structures (pruning schedules and induced trees) are discrete; the losses
are differentiable given fixed structures, and at a generic random point a
small parameter perturbation cannot flip an argmax.  The suite therefore
freezes the structures once and re-derives every loss inside the closure,
which is exactly the function the optimizer differentiates.

Gradient-shaping ops (the selective barrier, the parser's embedding stop)
are intentionally absent here: they make the applied gradient deviate from
the true gradient by design, so the chain rule must be validated without
them.  Their own contracts have separate tests.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import tape as T
from .composition import (CompositionConfig, build_inside, build_merge_schedule,
                          build_outside, induce_tree)
from .corpus import TokenizedSentence
from .generator import GeneratorConfig, assemble_batch, forward_train, \
    linearize_postorder, with_eos
from .model import Model, ModelConfig
from .optim import grad_check
from .training import loss_ae, loss_ar, loss_height, loss_parser

__all__ = ["toy_model", "toy_sentences", "FixedStructureObjective",
           "full_objective_gradcheck"]


def toy_model(seed: int = 0, vocab_size: int = 12, width: int = 16,
              gen_width: int = 16, layers: int = 2) -> Model:
    cfg = ModelConfig(
        vocab_size=vocab_size,
        composition=CompositionConfig(width=width, compose_layers=1,
                                      decompose_layers=1, heads=2, ffn_mult=2,
                                      score_dim=8, parser_layers=1,
                                      gen_width=gen_width, max_len=64),
        generator=GeneratorConfig(width=gen_width, type_layers=layers,
                                  token_layers=layers, heads=2, ffn_mult=2,
                                  max_words=32))
    return Model(cfg, seed=seed)


def toy_sentences(rng, count: int, vocab_size: int, n_max: int = 6
                  ) -> list[TokenizedSentence]:
    out = []
    for _ in range(count):
        n = int(rng.integers(2, n_max + 1))
        out.append(TokenizedSentence(list(rng.integers(5, vocab_size, size=n))))
    return out


class FixedStructureObjective:
    """Loss closures over frozen schedules and trees.

    ``which`` selects one of: ae, ar, parser, height, combined.  Every call
    rebuilds the graph from the store's current parameter values and runs
    backward into ``Tensor.grad`` (unlabeled: no barrier in this graph).
    """

    def __init__(self, model: Model, sentences: list[TokenizedSentence],
                 height_threshold: float = 2.0):
        self.model = model
        self.sents = sentences
        self.lengths = [len(s) for s in sentences]
        self.ids = np.concatenate([np.asarray(s.ids, np.intp) for s in sentences])
        self.h_thr = height_threshold
        with T.no_grad():
            leaves = model.leaf_vectors(self.ids)
            scores = model.fns.parser_scores(leaves, self.lengths)
            self.schedules = [build_merge_schedule(sc.data, s.atomic_spans, n)
                              for sc, s, n in zip(scores, sentences, self.lengths)]
            chart = build_inside(model.fns, leaves, self.lengths, self.schedules)
            self.trees = [induce_tree(chart, i) for i in range(len(sentences))]

    def closure(self, which: str) -> Callable[[], T.Tensor]:
        def run() -> T.Tensor:
            tape = T.Tape()
            with tape:
                leaves = self.model.leaf_vectors(self.ids)
                loss = None
                need_chart = which in ("ae", "ar", "height", "combined")
                if need_chart:
                    chart = build_inside(self.model.fns, leaves, self.lengths,
                                         self.schedules)
                if which in ("ae", "combined"):
                    build_outside(chart)
                    l_ae = loss_ae(chart, self.ids, self.model.down_embeddings(),
                                   self.lengths)
                    loss = l_ae if loss is None else T.add(loss, l_ae)
                if which in ("parser", "combined"):
                    scores = self.model.fns.parser_scores(leaves, self.lengths)
                    l_p = loss_parser(scores, self.trees, word_counts=self.lengths)
                    loss = l_p if loss is None else T.add(loss, l_p)
                if which in ("height", "combined"):
                    l_h = loss_height(chart, self.h_thr, self.lengths)
                    loss = l_h if loss is None else T.add(loss, l_h)
                if which in ("ar", "combined"):
                    seqs = [with_eos(linearize_postorder(t, s.ids))
                            for t, s in zip(self.trees, self.sents)]
                    tb = assemble_batch(seqs, [(chart, i) for i in range(len(self.sents))],
                                        self.model.gen, self.model.fns)
                    tl, kl = forward_train(self.model.gen, tb)
                    l_ar = loss_ar(tl, kl, tb, word_counts=self.lengths)
                    loss = l_ar if loss is None else T.add(loss, l_ar)
                if loss is None:
                    raise ValueError(f"unknown objective {which!r}")
            tape.backward(loss)
            return loss
        return run

    def check(self, which: str, eps: float = 1e-5, coords: int = 200,
              seed: int = 0, param_names: Optional[list[str]] = None) -> float:
        return grad_check(self.closure(which), self.model.store, eps=eps,
                          max_coords=coords, seed=seed, param_names=param_names)


def full_objective_gradcheck(seed: int = 0, n_tokens: int = 4,
                             coords: int = 250) -> float:
    """Max relative FD error of the combined objective on a toy model."""
    prev = T.default_dtype()
    T.set_default_dtype(np.float64)
    try:
        model = toy_model(seed=seed)
        rng = np.random.default_rng(seed + 1)
        sents = toy_sentences(rng, 2, model.cfg.vocab_size, n_max=n_tokens)
        obj = FixedStructureObjective(model, sents, height_threshold=1.5)
        return obj.check("combined", coords=coords, seed=seed)
    finally:
        T.set_default_dtype(prev)
