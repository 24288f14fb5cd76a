"""Stack-based generative model: action types from shallow layers, tokens
from deep layers.

Training runs one parallel pass over a pre-assembled input sequence (the
chart's span vectors standing in for incrementally composed nodes), so
there is no sequential dependency.  Inference steps one action at a time
with per-layer attention caches; hypotheses share cache prefixes because
appends always allocate fresh tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tape as T
from .composition import Chart, CompositionModel
from .corpus import BOS, COMP, EOS
from .layers import Linear, TransformerEncoder
from .optim import ParamStore
from .tape import Tensor
from .trees import TreeNode, branch, leaf

__all__ = ["GeneratorConfig", "Generator", "ActionSequence",
           "linearize_postorder", "with_eos", "assemble_inputs",
           "assemble_batch", "forward_train", "DecodeState", "init_state",
           "token_distribution", "advance", "replay_logprob",
           "tree_from_actions", "Y_COMP", "Y_GEN", "PAPER_SMALL",
           "PAPER_MEDIUM"]

Y_COMP, Y_GEN = 0, 1


@dataclass
class GeneratorConfig:
    width: int = 64
    type_layers: int = 2
    token_layers: int = 4
    heads: int = 4
    ffn_mult: int = 4
    max_words: int = 64
    use_surrogate: bool = True   # False: COMP-placeholder inputs, no chart coupling


# reference scales reported for the full-size models
PAPER_SMALL = GeneratorConfig(width=768, type_layers=3, token_layers=9,
                              heads=12, ffn_mult=4, max_words=1024)
PAPER_MEDIUM = GeneratorConfig(width=1024, type_layers=3, token_layers=21,
                               heads=16, ffn_mult=4, max_words=1024)


class Generator:
    def __init__(self, store: ParamStore, cfg: GeneratorConfig, vocab_size: int,
                 name: str = "gen"):
        self.cfg = cfg
        self.vocab_size = vocab_size
        d = cfg.width
        self.embed = store.param(f"{name}.embed", (vocab_size, d), scale=0.02)
        self.type_pos = store.param(f"{name}.type_pos", (cfg.max_words + 2, d), scale=0.02)
        self.tok_pos = store.param(f"{name}.tok_pos", (cfg.max_words + 2, d), scale=0.02)
        self.type_enc = TransformerEncoder(store, f"{name}.type", d,
                                           cfg.type_layers, cfg.heads,
                                           cfg.ffn_mult * d)
        self.token_enc = TransformerEncoder(store, f"{name}.token", d,
                                            cfg.token_layers, cfg.heads,
                                            cfg.ffn_mult * d)
        self.type_head = Linear(store, f"{name}.type_head", d, 2)
        self.token_head = Linear(store, f"{name}.token_head", d, vocab_size)

    def token_vec(self, token_id: int) -> Tensor:
        return T.gather_rows(self.embed, np.array([token_id]))


# ---------------------------------------------------------------------------
# Action sequences
# ---------------------------------------------------------------------------

@dataclass
class ActionSequence:
    """Aligned action records in generation order.

    ``tokens[t]`` is the generated token id at GEN steps and -1 at COMP
    steps; ``spans[t]`` is the chart span completed by the action (None for
    the terminating <eos>).
    """

    is_gen: list[bool]
    tokens: list[int]
    spans: list[Optional[tuple[int, int]]]

    def __len__(self) -> int:
        return len(self.is_gen)

    @property
    def word_positions(self) -> list[int]:
        """w_t: number of GEN actions strictly before step t."""
        w, out = 0, []
        for g in self.is_gen:
            out.append(w)
            if g:
                w += 1
        return out

    @property
    def n_words(self) -> int:
        return sum(self.is_gen)

    def validate(self) -> None:
        depth = 0
        for t, g in enumerate(self.is_gen):
            if g:
                if self.tokens[t] < 0:
                    raise ValueError(f"GEN step {t} has no token")
                depth += 1
            else:
                if depth < 2:
                    raise ValueError(f"COMP at step {t} with stack depth {depth}")
                depth -= 1
        has_eos = self.is_gen and self.is_gen[-1] and self.tokens[-1] == EOS
        want = 2 if has_eos else 1
        if depth != want:
            raise ValueError(f"sequence leaves stack depth {depth}, want {want}")


def linearize_postorder(tree: TreeNode, token_ids) -> ActionSequence:
    """Left-to-right post-order walk: leaves emit GEN, internals COMP."""
    is_gen: list[bool] = []
    tokens: list[int] = []
    spans: list[Optional[tuple[int, int]]] = []
    for node in tree:
        if node.is_leaf:
            is_gen.append(True)
            tokens.append(int(token_ids[node.i - 1]))
        else:
            is_gen.append(False)
            tokens.append(-1)
        spans.append((node.i, node.j))
    return ActionSequence(is_gen, tokens, spans)


def with_eos(seq: ActionSequence) -> ActionSequence:
    """Append the terminating GEN(<eos>) emitted at stack depth 1."""
    return ActionSequence(seq.is_gen + [True], seq.tokens + [EOS],
                          seq.spans + [None])


def tree_from_actions(seq: ActionSequence) -> TreeNode:
    """Replay the stack to recover the tree shape (<eos> steps ignored)."""
    stack: list[TreeNode] = []
    pos = 0
    for t, g in enumerate(seq.is_gen):
        if g:
            if seq.tokens[t] == EOS:
                continue
            pos += 1
            stack.append(leaf(pos))
        else:
            r = stack.pop()
            l = stack.pop()
            stack.append(branch(l, r))
    if len(stack) != 1:
        raise ValueError(f"incomplete action sequence leaves {len(stack)} roots")
    return stack[0]


# ---------------------------------------------------------------------------
# Training-side assembly and parallel forward
# ---------------------------------------------------------------------------

def assemble_inputs(seq: ActionSequence, chart: Chart, sent: int,
                    gen: Generator, fns: CompositionModel) -> Tensor:
    """Type-layer inputs for one sentence: <bos> then, at position t, the
    representation of the node completed at step t-1.

    With the surrogate enabled this is the up-projected chart vector of the
    completed span (token path for leaves).  In placeholder mode internal
    nodes all share the COMP embedding and leaves use raw token embeddings,
    so the generator sees no chart quantities at all.
    """
    spans = seq.spans[:-1]  # the completed node of the final action feeds nothing
    d = gen.cfg.width
    bos_row = T.gather_rows(gen.embed, np.array([BOS]))
    if not spans:
        return bos_row
    if gen.cfg.use_surrogate:
        rows = []
        for t, span in enumerate(spans):
            if span is None:
                raise ValueError(f"step {t}: missing span for surrogate input")
            rows.append(chart.cell(sent, span).row)
        vecs = fns.up(T.gather_rows(chart.storage, np.asarray(rows, np.intp)))
    else:
        ids = []
        for t, span in enumerate(spans):
            ids.append(seq.tokens[t] if seq.is_gen[t] else COMP)
        vecs = T.gather_rows(gen.embed, np.asarray(ids, np.intp))
    return T.concat([bos_row, vecs], axis=0)


@dataclass
class TrainBatch:
    """Padded tensors for one forward_train call."""

    inputs: Tensor            # (B, Tmax, d)
    w_ids: np.ndarray         # (B, Tmax) word-count position per step
    is_gen: np.ndarray        # (B, Tmax) bool
    valid: np.ndarray         # (B, Tmax) bool
    gen_steps: np.ndarray     # (B, Mmax) flat index of each GEN step, -1 pad
    gen_valid: np.ndarray     # (B, Mmax) bool
    targets: np.ndarray       # (B, Mmax) token id emitted at each GEN step
    seqs: list[ActionSequence]


def assemble_batch(seqs: list[ActionSequence], charts_sent: list[tuple[Chart, int]],
                   gen: Generator, fns: CompositionModel) -> TrainBatch:
    """Pad per-sentence assembled inputs into one (B, Tmax, d) tensor."""
    per = []
    for seq, (chart, sent) in zip(seqs, charts_sent):
        per.append(assemble_inputs(seq, chart, sent, gen, fns))
    bsz = len(seqs)
    tmax = max(len(s) for s in seqs)
    mmax = max(s.n_words for s in seqs)
    d = gen.cfg.width
    dt = per[0].dtype

    padded = []
    w_ids = np.zeros((bsz, tmax), dtype=np.intp)
    is_gen = np.zeros((bsz, tmax), dtype=bool)
    valid = np.zeros((bsz, tmax), dtype=bool)
    gen_steps = np.full((bsz, mmax), -1, dtype=np.intp)
    gen_valid = np.zeros((bsz, mmax), dtype=bool)
    targets = np.zeros((bsz, mmax), dtype=np.intp)
    for b, (seq, x) in enumerate(zip(seqs, per)):
        tlen = len(seq)
        if tlen < tmax:
            pad = Tensor(np.zeros((tmax - tlen, d), dtype=dt))
            x = T.concat([x, pad], axis=0)
        padded.append(T.reshape(x, (1, tmax, d)))
        w_ids[b, :tlen] = seq.word_positions
        is_gen[b, :tlen] = seq.is_gen
        valid[b, :tlen] = True
        m = 0
        for t, g in enumerate(seq.is_gen):
            if g:
                gen_steps[b, m] = b * tmax + t
                gen_valid[b, m] = True
                targets[b, m] = seq.tokens[t]
                m += 1
    inputs = T.concat(padded, axis=0) if bsz > 1 else padded[0]
    return TrainBatch(inputs, w_ids, is_gen, valid, gen_steps, gen_valid,
                      targets, seqs)


def forward_train(gen: Generator, batch: TrainBatch):
    """One parallel pass.  Returns (type_logits (B,T,2), token_logits (B,M,V)).

    Type layers attend causally over action steps; token layers attend
    causally over the gathered subsequence of GEN-step states.  Inputs must
    be pre-assembled so no sequential dependency remains.
    """
    bsz, tmax = batch.w_ids.shape
    d = gen.cfg.width
    if batch.inputs.shape != (bsz, tmax, d):
        raise T.ShapeError(
            f"forward_train: inputs {batch.inputs.shape} vs actions ({bsz},{tmax})")
    x = T.add(batch.inputs,
              T.reshape(T.gather_rows(gen.type_pos, batch.w_ids.reshape(-1)),
                        (bsz, tmax, d)))
    causal = np.tril(np.ones((tmax, tmax), dtype=bool))
    mask = causal[None, :, :] & batch.valid[:, None, :]
    mask |= np.eye(tmax, dtype=bool)[None, :, :]
    h = gen.type_enc(x, mask=mask)
    type_logits = gen.type_head(h)

    mmax = batch.gen_steps.shape[1]
    flat = T.reshape(h, (bsz * tmax, d))
    rows = np.where(batch.gen_steps >= 0, batch.gen_steps, 0)
    tok_x = T.reshape(T.gather_rows(flat, rows.reshape(-1)), (bsz, mmax, d))
    tok_x = T.add(tok_x, T.gather_rows(gen.tok_pos, np.arange(mmax)))
    causal_m = np.tril(np.ones((mmax, mmax), dtype=bool))
    mask_m = causal_m[None, :, :] & batch.gen_valid[:, None, :]
    mask_m |= np.eye(mmax, dtype=bool)[None, :, :]
    g = gen.token_enc(tok_x, mask=mask_m)
    token_logits = gen.token_head(g)
    return type_logits, token_logits


# ---------------------------------------------------------------------------
# Incremental inference
# ---------------------------------------------------------------------------

@dataclass
class DecodeState:
    """State after feeding the latest completed node: ready to pick the
    next action.  ``stack`` holds generator-width vectors with the <bos>
    sentinel at the bottom; it is never popped."""

    stack: tuple
    type_caches: list
    tok_caches: list
    w: int
    h: Tensor                 # type-layer output at the current step
    p_type: np.ndarray        # (2,) softmax over [COMP, GEN]

    @property
    def depth(self) -> int:
        """Stack depth excluding the <bos> sentinel."""
        return len(self.stack) - 1


def _type_step(gen: Generator, caches, vec: Tensor, w: int):
    x = T.reshape(T.add(vec, T.gather_rows(gen.type_pos, np.array([w]))), (1, 1, gen.cfg.width))
    h, new_caches = gen.type_enc.step(x, caches)
    logits = T.reshape(gen.type_head(h), (2,))
    p = T.softmax(logits)
    return T.reshape(h, (1, gen.cfg.width)), p.data, new_caches


def init_state(gen: Generator) -> DecodeState:
    bos = T.gather_rows(gen.embed, np.array([BOS]))
    caches = [None] * len(gen.type_enc.blocks)
    h, p, type_caches = _type_step(gen, caches, bos, 0)
    return DecodeState(stack=(bos,), type_caches=type_caches,
                       tok_caches=[None] * len(gen.token_enc.blocks),
                       w=0, h=h, p_type=p)


def token_distribution(gen: Generator, state: DecodeState):
    """Token softmax after a GEN-type decision; returns the advanced token
    caches so the chosen expansion can reuse them."""
    x = T.reshape(T.add(state.h, T.gather_rows(gen.tok_pos, np.array([state.w]))),
                  (1, 1, gen.cfg.width))
    g, new_caches = gen.token_enc.step(x, state.tok_caches)
    logits = T.reshape(gen.token_head(g), (gen.vocab_size,))
    return T.softmax(logits).data, new_caches


def advance(gen: Generator, fns: Optional[CompositionModel], state: DecodeState,
            action: tuple, tok_caches: Optional[list] = None) -> DecodeState:
    """Apply an action and run the next type step.

    ``action`` is ("gen", token_id) or ("comp",).  For GEN, pass the caches
    returned by token_distribution to avoid recomputing them.  COMP pops
    the top two vectors and pushes their composition (projected through the
    chart widths when the surrogate pathway is enabled).
    """
    if action[0] == "gen":
        token_id = action[1]
        if tok_caches is None:
            _, tok_caches = token_distribution(gen, state)
        vec = _leaf_vec(gen, fns, token_id)
        new_stack = state.stack + (vec,)
        new_w = state.w + 1
        new_tok = tok_caches
    elif action[0] == "comp":
        if state.depth < 2:
            raise ValueError(f"COMP with stack depth {state.depth}")
        l, r = state.stack[-2], state.stack[-1]
        vec = _compose_vec(gen, fns, l, r)
        new_stack = state.stack[:-2] + (vec,)
        new_w = state.w
        new_tok = state.tok_caches
    else:
        raise ValueError(f"unknown action {action!r}")
    h, p, type_caches = _type_step(gen, state.type_caches, vec, new_w)
    return DecodeState(stack=new_stack, type_caches=type_caches,
                       tok_caches=new_tok, w=new_w, h=h, p_type=p)


def _leaf_vec(gen: Generator, fns: Optional[CompositionModel], token_id: int) -> Tensor:
    emb = T.gather_rows(gen.embed, np.array([token_id]))
    if gen.cfg.use_surrogate:
        if fns is None:
            raise ValueError("surrogate mode requires the composition model")
        return fns.up(fns.down(emb))
    return emb


def _compose_vec(gen: Generator, fns: Optional[CompositionModel], l: Tensor,
                 r: Tensor) -> Tensor:
    if gen.cfg.use_surrogate:
        if fns is None:
            raise ValueError("surrogate mode requires the composition model")
        return fns.up(fns.compose(fns.down(l), fns.down(r)))
    return T.gather_rows(gen.embed, np.array([COMP]))


def replay_logprob(gen: Generator, fns: Optional[CompositionModel],
                   seq: ActionSequence,
                   inputs: Optional[Tensor] = None) -> float:
    """Teacher-forced incremental replay; returns total log p of ``seq``.

    When ``inputs`` (the training-side assembled sequence) is given, the
    surrogate vectors are fed instead of stack compositions so the result
    is comparable to forward_train log-likelihoods step for step.
    """
    total = 0.0
    caches = [None] * len(gen.type_enc.blocks)
    tok_caches = [None] * len(gen.token_enc.blocks)
    w = 0
    for t in range(len(seq)):
        if inputs is not None:
            vec = T.gather_rows(inputs, np.array([t]))
        elif t == 0:
            vec = T.gather_rows(gen.embed, np.array([BOS]))
        else:
            raise ValueError("replay without assembled inputs not supported here")
        h, p_type, caches = _type_step(gen, caches, vec, w)
        if seq.is_gen[t]:
            total += float(np.log(p_type[Y_GEN]))
            x = T.reshape(T.add(h, T.gather_rows(gen.tok_pos, np.array([w]))),
                          (1, 1, gen.cfg.width))
            g, tok_caches = gen.token_enc.step(x, tok_caches)
            logits = T.reshape(gen.token_head(g), (gen.vocab_size,))
            probs = T.softmax(logits).data
            total += float(np.log(probs[seq.tokens[t]]))
            w += 1
        else:
            total += float(np.log(p_type[Y_COMP]))
    return total
