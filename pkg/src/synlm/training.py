"""Hard-EM training: structure induction, four losses, two-pass backward.

Each step induces fresh trees (no caching), then optimizes

    L*_ae = L_ae + L_p + L_h        (reconstruction, parser, height hinge)
    L     = L*_ae + L_ar            (plus the action-level language model)

with backward run once per root.  The split weights pass through a
selective barrier so the auto-regressive root contributes no gradient to
the raw compatibility scores; span vectors still receive it.  Both
behaviors are ablation flags.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tape as T
from .composition import build_inside, build_merge_schedule, build_outside, induce_tree
from .corpus import Batch, TokenizedSentence
from .generator import assemble_batch, forward_train, linearize_postorder, with_eos
from .model import Model
from .optim import adam_step
from .tape import Tensor
from .trees import TreeNode, tree_height

__all__ = ["TrainConfig", "LossReport", "loss_ae", "loss_ar", "loss_parser",
           "loss_height", "train_step", "train_loop"]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_tokens: int = 512
    total_steps: int = 2000
    seed: int = 0
    height_threshold: float = 15.0
    grad_clip: float = 5.0             # global-norm cap, 0 disables
    disable_grad_stop: bool = False    # ablation: no selective barrier
    parser_noise: float = 1.0          # exploration noise on schedule scores
    noise_anneal_frac: float = 0.5     # fraction of total steps to anneal over
    checkpoint_every: int = 1000
    log_every: int = 25
    eval_every: int = 500              # 0 disables periodic held-out parses

    def noise_scale(self, step: int) -> float:
        """Linearly annealed exploration noise for the pruning schedule.

        Hard-EM can lock in an early wrong segmentation (the parser learns
        the induced trees, which then shape the next charts).  Perturbing
        only the schedule input keeps every loss exact while letting the
        chart see alternative bracketings early in training.
        """
        if self.parser_noise <= 0:
            return 0.0
        horizon = max(1, int(self.total_steps * self.noise_anneal_frac))
        return self.parser_noise * max(0.0, 1.0 - step / horizon)


@dataclass
class LossReport:
    loss_ae: float = 0.0
    loss_ar: float = 0.0
    loss_parser: float = 0.0
    loss_height: float = 0.0
    total: float = 0.0
    tokens: int = 0
    height_max: float = 0.0
    height_mean: float = 0.0
    skipped: bool = False

    def as_dict(self) -> dict:
        return {"ae": self.loss_ae, "ar": self.loss_ar, "parser": self.loss_parser,
                "height": self.loss_height, "total": self.total,
                "tokens": self.tokens, "height_max": self.height_max,
                "height_mean": self.height_mean, "skipped": self.skipped}


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss_ae(chart, ids_concat: np.ndarray, down_embed: Tensor,
            lengths: list[int]) -> Tensor:
    """Reconstruct every token from its outside vector.

    Mean token NLL of <o_ii, e_x> softmaxed over the down-projected
    vocabulary.  The per-sentence means recombine token-count weighted,
    which equals one global mean over tokens.
    """
    rows = np.concatenate([chart.leaf_rows(s) for s in range(len(lengths))])
    leaf_out = T.gather_rows(chart.outside, rows)
    logits = T.matmul(leaf_out, T.transpose(down_embed, (1, 0)))
    nll = T.cross_entropy(logits, ids_concat)
    return T.mean_(nll)


def loss_ar(type_logits: Tensor, token_logits: Tensor, batch,
            word_counts: Optional[list[int]] = None) -> Tensor:
    """Mean action NLL per sentence, recombined token-count weighted.

    GEN steps contribute -log p(y=GEN) - log p(x); COMP steps
    -log p(y=COMP).  Padding steps carry zero weight.
    """
    bsz, tmax = batch.valid.shape
    if word_counts is None:
        word_counts = [seq.n_words for seq in batch.seqs]
    total_words = float(sum(word_counts))
    steps = np.array([len(seq) for seq in batch.seqs], dtype=np.float64)
    coef = np.asarray(word_counts, dtype=np.float64) / (steps * total_words)

    flat_logits = T.reshape(type_logits, (bsz * tmax, 2))
    type_targets = batch.is_gen.astype(np.intp).reshape(-1)
    type_nll = T.cross_entropy(flat_logits, type_targets)
    type_w = np.where(batch.valid, coef[:, None], 0.0).reshape(-1)
    total = T.sum_(T.mul(type_nll, Tensor(type_w.astype(flat_logits.dtype))))

    mmax = batch.gen_steps.shape[1]
    tok_flat = T.reshape(token_logits, (bsz * mmax, token_logits.shape[-1]))
    tok_targets = batch.targets.reshape(-1)
    tok_nll = T.cross_entropy(tok_flat, tok_targets)
    tok_w = np.where(batch.gen_valid, coef[:, None], 0.0).reshape(-1)
    total = T.add(total, T.sum_(T.mul(tok_nll, Tensor(tok_w.astype(tok_flat.dtype)))))
    return total


def loss_parser(scores: list[Tensor], trees: list[TreeNode],
                word_counts: Optional[list[int]] = None) -> Tensor:
    """Top-down split NLL of the induced trees under the boundary scores.

    Per sentence this is a sum over the tree's internal nodes of the
    softmax NLL of the chosen boundary within the node's span; sentences
    recombine token-count weighted.  The trees are targets only: no
    gradient reaches them.
    """
    if word_counts is None:
        word_counts = [t.j for t in trees]
    total_words = float(sum(word_counts))
    flat_scores = T.concat(scores, axis=0) if len(scores) > 1 else scores[0]
    offsets = np.cumsum([0] + [s.shape[0] for s in scores])

    pair_idx: list[int] = []
    seg: list[int] = []
    chosen_idx: list[int] = []
    chosen_coef: list[float] = []
    node_id = 0
    for b, tree in enumerate(trees):
        coef = word_counts[b] / total_words
        for node in tree:
            if node.is_leaf:
                continue
            for k in range(node.i, node.j):
                pair_idx.append(offsets[b] + k - 1)
                seg.append(node_id)
            chosen_idx.append(offsets[b] + node.split - 1)
            chosen_coef.append(coef)
            node_id += 1
    if node_id == 0:
        return Tensor(np.zeros((), dtype=flat_scores.dtype))

    gathered = T.gather_rows(flat_scores, np.asarray(pair_idx, np.intp))
    seg_a = np.asarray(seg, np.intp)
    smax = np.full(node_id, -np.inf, dtype=gathered.dtype)
    np.maximum.at(smax, seg_a, gathered.data)
    shifted = T.sub(gathered, Tensor(smax[seg_a]))
    lse = T.add(T.log(T.segment_sum(T.exp(shifted), seg_a, node_id)), Tensor(smax))
    chosen = T.gather_rows(flat_scores, np.asarray(chosen_idx, np.intp))
    nll = T.sub(lse, chosen)
    return T.sum_(T.mul(nll, Tensor(np.asarray(chosen_coef, dtype=nll.dtype))))


def loss_height(chart, threshold: float, lengths: list[int]) -> Tensor:
    """Hinge on each root's weighted height over the threshold, 1/n scaled,
    recombined token-count weighted (the n's cancel into one global sum)."""
    rows = np.array([chart.cell(s, (1, n)).row for s, n in enumerate(lengths)],
                    np.intp)
    roots = T.gather_rows(chart.heights, rows)
    dt = roots.dtype
    over = T.maximum(T.sub(roots, Tensor(np.asarray(threshold, dtype=dt))),
                     Tensor(np.zeros(len(lengths), dtype=dt)))
    return T.div(T.sum_(over), Tensor(np.asarray(float(sum(lengths)), dtype=dt)))


# ---------------------------------------------------------------------------
# One step of hard-EM
# ---------------------------------------------------------------------------

def train_step(model: Model, batch: Batch, config: TrainConfig,
               update: bool = True, step: int = 0) -> LossReport:
    """E-step: parser scores -> pruning schedule -> inside chart -> tree.
    M-step: outside + generator forward, two-pass backward, Adam update.

    Returns the loss report; on non-finite loss the step is skipped and
    reported instead of raising.
    """
    sents = batch.sentences
    lengths = [len(s) for s in sents]
    ids_concat = np.concatenate([np.asarray(s.ids, dtype=np.intp) for s in sents])
    barrier = None if config.disable_grad_stop else "ar"
    sigma = config.noise_scale(step)
    noise_rng = np.random.default_rng(config.seed * 1_000_003 + step)

    tape = T.Tape()
    with tape:
        leaves = model.leaf_vectors(ids_concat)
        # the parser is a student of the induced trees; its loss should not
        # reshape the embeddings, so it reads them through a gradient stop
        scores = model.fns.parser_scores(T.stop_gradient(leaves), lengths)
        schedules = [build_merge_schedule(
            sc.data + (sigma * noise_rng.normal(size=sc.shape) if sigma else 0.0),
            s.atomic_spans, n)
            for sc, s, n in zip(scores, sents, lengths)]
        chart = build_inside(model.fns, leaves, lengths, schedules,
                             barrier_label=barrier)
        build_outside(chart)
        trees = [induce_tree(chart, s) for s in range(len(sents))]

        l_ae = loss_ae(chart, ids_concat, model.down_embeddings(), lengths)
        l_p = loss_parser(scores, trees, word_counts=lengths)
        l_h = loss_height(chart, config.height_threshold, lengths)
        seqs = [with_eos(linearize_postorder(tree, s.ids))
                for tree, s in zip(trees, sents)]
        tb = assemble_batch(seqs, [(chart, i) for i in range(len(sents))],
                            model.gen, model.fns)
        type_logits, token_logits = forward_train(model.gen, tb)
        l_ar = loss_ar(type_logits, token_logits, tb, word_counts=lengths)

        l_ae_star = T.add(T.add(l_ae, l_p), l_h)
        total = T.add(l_ae_star, l_ar)

    report = LossReport(
        loss_ae=float(l_ae.data), loss_ar=float(l_ar.data),
        loss_parser=float(l_p.data), loss_height=float(l_h.data),
        total=float(total.data), tokens=sum(lengths),
        height_max=max(tree_height(t) for t in trees),
        height_mean=float(np.mean([tree_height(t) for t in trees])))

    if not math.isfinite(report.total):
        model.store.zero_grad()
        report.skipped = True
        return report

    if update:
        tape.backward(l_ae_star, root_label="ae")
        tape.backward(l_ar, root_label="ar")
        if config.grad_clip > 0:
            model.store.clip_grad_norm(config.grad_clip)
        bad = adam_step(model.store, config.lr,
                        betas=(config.adam_beta1, config.adam_beta2),
                        eps=config.adam_eps)
        if bad:
            report.skipped = True
    return report


def train_loop(model: Model, dataset: list[TokenizedSentence], config: TrainConfig,
               log_fn: Optional[Callable[[dict], None]] = None,
               checkpoint_fn: Optional[Callable[[int], None]] = None,
               eval_fn: Optional[Callable[[int], None]] = None,
               start_step: int = 0,
               deadline: Optional[float] = None) -> LossReport:
    """Run up to ``config.total_steps`` optimizer steps over the dataset.

    The batch stream reshuffles each epoch (seeded); logging, checkpoints
    and held-out evaluation are callbacks so callers own the files.
    Returns the last report.
    """
    from .corpus import batch_iter

    step = start_step
    epoch = 0
    last = LossReport()
    t0 = time.time()
    window_tokens = 0
    while step < config.total_steps:
        made_progress = False
        for batch in batch_iter(dataset, config.batch_tokens,
                                seed=config.seed + epoch):
            if step >= config.total_steps:
                break
            if deadline is not None and time.time() > deadline:
                return last
            last = train_step(model, batch, config, step=step)
            step += 1
            made_progress = True
            window_tokens += last.tokens
            if log_fn and (step % config.log_every == 0 or step == 1):
                dt = time.time() - t0
                rec = {"step": step, "epoch": epoch,
                       "tokens_per_sec": window_tokens / max(dt, 1e-9)}
                rec.update(last.as_dict())
                log_fn(rec)
                t0, window_tokens = time.time(), 0
            if checkpoint_fn and config.checkpoint_every > 0 \
                    and step % config.checkpoint_every == 0:
                checkpoint_fn(step)
            if eval_fn and config.eval_every > 0 and step % config.eval_every == 0:
                eval_fn(step)
        if not made_progress:
            break
        epoch += 1
    return last
