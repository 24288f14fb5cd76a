"""Word-level synchronized beam search, sampling, parsing, surprisal.

All hypotheses in a beam share the same number of generated words, so
ranking compares structures over identical prefixes.  One word step first
expands every hypothesis one action, then keeps re-expanding whichever
survivors still end in a structure action until the whole top-k ends in a
word emission.

The searcher talks to the model through a small adapter (start / type
probabilities / token probabilities / apply), which keeps it testable with
scripted models and keeps attention-cache handling in one place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tape as T
from .corpus import BOS, COMP, EOS, PAD
from .generator import (ActionSequence, DecodeState, Y_COMP, Y_GEN, advance,
                        init_state, token_distribution, tree_from_actions)
from .model import Model
from .trees import TreeNode

__all__ = ["Hypothesis", "Beam", "ModelDecoder", "EmptyBeamError",
           "word_beam_step", "generate", "parse", "surprisal",
           "GenerateResult", "ParseResult"]


class EmptyBeamError(RuntimeError):
    """All hypotheses died: nothing feasible to expand."""


_RESERVED_NON_WORDS = np.array([PAD, BOS, COMP], dtype=np.intp)

# constraint_fn sentinel: the hypothesis may not emit any word this step
NO_EMISSION = -1


@dataclass
class Hypothesis:
    """One search state: action history, model state, cumulative log p.

    ``sync`` is true when the last action emitted a word.  Model states are
    never mutated, so branched hypotheses share cache prefixes for free.
    """

    actions: tuple
    state: object
    logp: float
    words: int
    sync: bool
    done: bool = False

    def sort_key(self):
        return (-self.logp, len(self.actions), self.actions)


@dataclass
class Beam:
    k: int
    hyps: list[Hypothesis] = field(default_factory=list)

    @property
    def synced(self) -> bool:
        return all(h.sync or not h.actions for h in self.hyps)


class ModelDecoder:
    """Adapter from the trained model to the beam searcher."""

    def __init__(self, model: Model):
        self.gen = model.gen
        self.fns = model.fns
        self.vocab_size = model.gen.vocab_size
        self.eos_id = EOS

    def start(self) -> DecodeState:
        return init_state(self.gen)

    def type_probs(self, state: DecodeState) -> np.ndarray:
        return state.p_type

    def token_probs(self, state: DecodeState):
        return token_distribution(self.gen, state)

    def apply_gen(self, state: DecodeState, token: int, handle) -> DecodeState:
        return advance(self.gen, self.fns, state, ("gen", token), tok_caches=handle)

    def apply_comp(self, state: DecodeState) -> DecodeState:
        return advance(self.gen, self.fns, state, ("comp",))

    def depth(self, state: DecodeState) -> int:
        return state.depth


ConstraintFn = Callable[[Hypothesis], Optional[int]]


def _expand(dec, hyp: Hypothesis, constraint_fn: Optional[ConstraintFn],
            top_m: int, max_words: int, rng=None,
            topk_sample: int = 0) -> list[Hypothesis]:
    """All feasible one-action successors of one hypothesis.

    The terminating token is only offered at stack depth 1, and once the
    word budget is spent it is the only word left to emit.
    """
    out: list[Hypothesis] = []
    p_type = dec.type_probs(hyp.state)
    depth = dec.depth(hyp.state)
    if depth >= 2:
        state = dec.apply_comp(hyp.state)
        out.append(Hypothesis(hyp.actions + (("c",),), state,
                              hyp.logp + _log(p_type[Y_COMP]),
                              hyp.words, sync=False))

    forced = constraint_fn(hyp) if constraint_fn is not None else None
    cands: list[tuple[int, float]] = []
    handle = None
    if forced == NO_EMISSION:
        pass  # only structure actions remain for this hypothesis
    elif forced is not None:
        probs, handle = dec.token_probs(hyp.state)
        cands = [(int(forced), probs[forced])]
    elif hyp.words >= max_words:
        if depth == 1:
            probs, handle = dec.token_probs(hyp.state)
            cands = [(dec.eos_id, probs[dec.eos_id])]
    else:
        probs, handle = dec.token_probs(hyp.state)
        probs = probs.copy()
        probs[_RESERVED_NON_WORDS] = 0.0  # never emit pad/bos/comp markers
        if topk_sample and rng is not None:
            top = np.argsort(-probs)[:topk_sample]
            renorm = probs[top] / probs[top].sum()
            pick = int(top[rng.choice(len(top), p=renorm)])
            cands = [(pick, probs[pick])]
        else:
            top = np.argsort(-probs)[:top_m]
            cands = [(int(t), float(probs[t])) for t in top if probs[t] > 0]
    base = hyp.logp + _log(p_type[Y_GEN])
    for tok, p in cands:
        if tok == dec.eos_id and depth != 1:
            continue
        state = dec.apply_gen(hyp.state, tok, handle)
        out.append(Hypothesis(hyp.actions + (("g", tok),), state,
                              base + _log(p), hyp.words + 1, sync=True,
                              done=tok == dec.eos_id))
    return out


def _log(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf


def word_beam_step(dec, beam: Beam, constraint: Optional[int] = None,
                   constraint_fn: Optional[ConstraintFn] = None,
                   top_m: int = 50, max_words: int = 10 ** 9,
                   rng=None, topk_sample: int = 0) -> Beam:
    """Advance a synchronized beam by exactly one word.

    Expand every hypothesis, pool and rank; then repeatedly re-expand only
    the survivors whose last action was a structure action, pooling them
    against the untouched word-ended ones, until the whole top-k ends in a
    word emission.  Ties break toward shorter histories then action ids.
    """
    if not beam.synced:
        raise ValueError("word_beam_step requires a sync beam")
    if any(h.done for h in beam.hyps):
        raise ValueError("completed hypotheses must leave the beam between steps")
    if constraint is not None:
        constraint_fn = lambda hyp: constraint  # noqa: E731
    pool: list[Hypothesis] = []
    for hyp in beam.hyps:
        pool.extend(_expand(dec, hyp, constraint_fn, top_m, max_words, rng,
                            topk_sample))
    if not pool:
        raise EmptyBeamError("no feasible expansion")
    pool.sort(key=Hypothesis.sort_key)
    selected = pool[:beam.k]

    # a hypothesis only shrinks its stack while re-expanding, so the round
    # count is bounded by the deepest stack in the selection
    max_rounds = max((dec.depth(h.state) for h in selected), default=1) + 1
    for _ in range(max_rounds):
        pending = [h for h in selected if not h.sync and not h.done]
        if not pending:
            break
        keep = [h for h in selected if h.sync or h.done]
        for hyp in pending:
            keep.extend(_expand(dec, hyp, constraint_fn, top_m, max_words,
                                rng, topk_sample))
        if not keep:
            raise EmptyBeamError("no feasible expansion during re-expansion")
        keep.sort(key=Hypothesis.sort_key)
        selected = keep[:beam.k]
    else:
        if any(not h.sync and not h.done for h in selected):
            raise EmptyBeamError("structure re-expansion failed to converge")
    return Beam(beam.k, selected)


def _action_beam_step(dec, beam: Beam, constraint_fn: Optional[ConstraintFn],
                      top_m: int, max_words: int, rng=None,
                      topk_sample: int = 0) -> Beam:
    """Plain action-level beam step (the non-synchronized ablation)."""
    pool: list[Hypothesis] = []
    for hyp in beam.hyps:
        if hyp.done:
            pool.append(hyp)
            continue
        pool.extend(_expand(dec, hyp, constraint_fn, top_m, max_words, rng,
                            topk_sample))
    if not pool:
        raise EmptyBeamError("no feasible expansion")
    pool.sort(key=Hypothesis.sort_key)
    return Beam(beam.k, pool[:beam.k])


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

@dataclass
class GenerateResult:
    tokens: list[int]
    tree: Optional[TreeNode]
    logp: float
    truncated: bool
    actions: tuple = ()


def generate(model_or_dec, prompt: list[int] = (), k: int = 4,
             mode: str = "beam", max_words: int = 32, seed: int = 0,
             top_m: int = 50, topk_sample: int = 2,
             sync: bool = True) -> GenerateResult:
    """Generate a sentence with its tree.

    ``mode='beam'`` ranks deterministically; ``mode='topk_sample'`` draws
    each emitted word from the renormalized top-k token distribution while
    structure actions follow the same synchronized procedure.  The prompt
    is consumed through constrained steps first.  Deterministic under
    ``seed``.  When no hypothesis terminates within ``max_words`` the best
    incomplete one is returned with ``truncated`` set.
    """
    if mode not in ("beam", "topk_sample"):
        raise ValueError(f"unknown mode {mode!r}")
    dec = ModelDecoder(model_or_dec) if isinstance(model_or_dec, Model) else model_or_dec
    rng = np.random.default_rng(seed)
    sample_k = topk_sample if mode == "topk_sample" else 0

    with T.no_grad():
        beam = Beam(k, [Hypothesis((), dec.start(), 0.0, 0, sync=True)])
        completed: list[Hypothesis] = []
        try:
            for tok in prompt:
                beam = _step(dec, beam, sync, constraint_fn=lambda h, t=int(tok): t,
                             top_m=top_m, max_words=10 ** 9)
            while True:
                active = [h for h in beam.hyps if not h.done]
                completed.extend(h for h in beam.hyps if h.done)
                if not active:
                    break
                best_done = max((h.logp for h in completed), default=-math.inf)
                if completed and best_done >= max(h.logp for h in active):
                    break
                beam = _step(dec, Beam(beam.k, active), sync, constraint_fn=None,
                             top_m=top_m, max_words=max_words, rng=rng,
                             topk_sample=sample_k)
        except EmptyBeamError:
            pass

    if completed:
        best = min(completed, key=Hypothesis.sort_key)
        truncated = False
    elif beam.hyps:
        best = min(beam.hyps, key=Hypothesis.sort_key)
        truncated = True
    else:
        return GenerateResult([], None, -math.inf, True)
    tokens = [a[1] for a in best.actions if a[0] == "g" and a[1] != dec.eos_id]
    tree = _tree_from_action_tuples(best.actions, dec.eos_id)
    return GenerateResult(tokens, tree, best.logp, truncated, best.actions)


def _step(dec, beam, sync, constraint_fn, **kw):
    if sync:
        return word_beam_step(dec, beam, constraint_fn=constraint_fn, **kw)
    return _action_beam_step(dec, beam, constraint_fn, **kw)


def _tree_from_action_tuples(actions: tuple, eos_id: int) -> Optional[TreeNode]:
    is_gen, tokens = [], []
    for a in actions:
        if a[0] == "g":
            if a[1] == eos_id:
                continue
            is_gen.append(True)
            tokens.append(a[1])
        else:
            is_gen.append(False)
            tokens.append(-1)
    if not is_gen:
        return None
    # close any constituents a truncated hypothesis left open
    depth = sum(1 if g else -1 for g in is_gen)
    while depth > 1:
        is_gen.append(False)
        tokens.append(-1)
        depth -= 1
    seq = ActionSequence(is_gen, tokens, [None] * len(is_gen))
    return tree_from_actions(seq)


# ---------------------------------------------------------------------------
# Constrained parsing and surprisal
# ---------------------------------------------------------------------------

@dataclass
class ParseResult:
    tree: Optional[TreeNode]
    logp: float                 # joint log p(x, y_best) including <eos>
    marginals: list[float]      # log p(x_<t): index t = words generated, 0..n
    beams: list[list[float]]    # surviving hypothesis log ps at each position
    actions: tuple = ()         # the winning action history


def parse(model_or_dec, tokens, k: int = 20, sync: bool = True) -> ParseResult:
    """Search over trees of a given sentence: every emission is forced to
    the observed next token.  Retains the surviving hypotheses' joint log
    probabilities at every word position for surprisal marginalization."""
    dec = ModelDecoder(model_or_dec) if isinstance(model_or_dec, Model) else model_or_dec
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise ValueError("parse requires a nonempty sentence")
    n = len(tokens)
    with T.no_grad():
        beam = Beam(k, [Hypothesis((), dec.start(), 0.0, 0, sync=True)])
        marginals = [0.0]
        beams = [[0.0]]
        if sync:
            for tok in tokens:
                beam = word_beam_step(dec, beam, constraint=tok, top_m=1)
                logs = [h.logp for h in beam.hyps]
                marginals.append(_logsumexp(logs))
                beams.append(logs)
            hyps = beam.hyps
        else:
            marg_acc: dict[int, list[float]] = {}
            fn = lambda h: tokens[h.words]  # noqa: E731
            while any(h.words < n for h in beam.hyps):
                pool: list[Hypothesis] = []
                fresh: list[Hypothesis] = []
                for h in beam.hyps:
                    if h.words < n:
                        fresh.extend(_expand(dec, h, fn, 1, 10 ** 9))
                    else:
                        pool.append(h)  # finished consuming: waits for closing
                if not fresh and not pool:
                    raise EmptyBeamError("no feasible expansion")
                pool.extend(fresh)
                pool.sort(key=Hypothesis.sort_key)
                beam = Beam(k, pool[:k])
                for h in fresh:
                    if h in beam.hyps and h.actions[-1][0] == "g":
                        marg_acc.setdefault(h.words, []).append(h.logp)
            for t in range(1, n + 1):
                logs = marg_acc.get(t, [])
                marginals.append(_logsumexp(logs))
                beams.append(logs)
            hyps = beam.hyps

        # termination: close all brackets, then the forced <eos>
        for _ in range(n + 1):
            if all(dec.depth(h.state) == 1 for h in hyps):
                break
            nxt: list[Hypothesis] = []
            for h in hyps:
                if dec.depth(h.state) == 1:
                    nxt.append(h)
                else:
                    p_type = dec.type_probs(h.state)
                    nxt.append(Hypothesis(h.actions + (("c",),),
                                          dec.apply_comp(h.state),
                                          h.logp + _log(p_type[Y_COMP]),
                                          h.words, sync=False))
            nxt.sort(key=Hypothesis.sort_key)
            hyps = nxt[:k]
        finals: list[Hypothesis] = []
        for h in hyps:
            p_type = dec.type_probs(h.state)
            probs, handle = dec.token_probs(h.state)
            state = dec.apply_gen(h.state, dec.eos_id, handle)
            finals.append(Hypothesis(h.actions + (("g", dec.eos_id),), state,
                                     h.logp + _log(p_type[Y_GEN]) +
                                     _log(probs[dec.eos_id]),
                                     h.words + 1, sync=True, done=True))
        finals.sort(key=Hypothesis.sort_key)
    best = finals[0]
    tree = _tree_from_action_tuples(best.actions, dec.eos_id)
    return ParseResult(tree, best.logp, marginals, beams, best.actions)


def _logsumexp(logs) -> float:
    logs = [l for l in logs if l > -math.inf]
    if not logs:
        return -math.inf
    m = max(logs)
    return m + math.log(sum(math.exp(l - m) for l in logs))


def surprisal(model_or_dec, tokens, regions, b: int = 300) -> list[dict]:
    """Bits of surprisal per (start, end) word region, 1-based inclusive.

    The prefix probability p(x_<t) is approximated by the total probability
    mass of the ``b`` best hypotheses retained at position t.  A region is
    flagged degenerate when its marginal underflows to zero mass.
    """
    res = parse(model_or_dec, tokens, k=b)
    out = []
    for (s, e) in regions:
        if not (1 <= s <= e <= len(tokens)):
            raise ValueError(f"region ({s},{e}) out of range for n={len(tokens)}")
        num = res.marginals[e]
        den = res.marginals[s - 1]
        if num == -math.inf:
            out.append({"start": s, "end": e, "bits": math.inf, "degenerate": True})
        else:
            bits = -(num - den) / math.log(2.0)
            out.append({"start": s, "end": e, "bits": bits, "degenerate": False})
    return out
