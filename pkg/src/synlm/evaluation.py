"""Unlabeled bracketing F1, punctuation handling, and brute-force oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tape as T
from .composition import CompositionModel
from .corpus import DEFAULT_PUNCT, GoldTree
from .tape import Tensor
from .trees import TreeNode, branch, leaf

__all__ = ["F1Config", "sentence_f1", "corpus_f1", "CorpusF1Report",
           "remap_spans", "collapse_piece_spans", "oracle_inside",
           "oracle_outside", "oracle_enumerate_actions", "all_binary_trees"]


@dataclass
class F1Config:
    lowercase: bool = True
    punct: tuple = DEFAULT_PUNCT
    exclude_trivial: bool = True   # drop whole-sentence and width-1 spans


def sentence_f1(pred: set, gold: set, cfg: F1Config = F1Config(),
                n: Optional[int] = None) -> float:
    """Unlabeled F1 over span sets sharing one post-filter token indexing.

    Both sets empty scores 1.0 by convention; exactly one empty scores 0.
    """
    pred = set(pred)
    gold = set(gold)
    if n is not None:
        for (i, j) in pred | gold:
            if not (1 <= i <= j <= n):
                raise ValueError(f"span ({i},{j}) out of range for n={n}")
    if cfg.exclude_trivial and n is not None:
        pred = {s for s in pred if s[0] != s[1] and s != (1, n)}
        gold = {s for s in gold if s[0] != s[1] and s != (1, n)}
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    hit = len(pred & gold)
    if hit == 0:
        return 0.0
    p = hit / len(pred)
    r = hit / len(gold)
    return 2 * p * r / (p + r)


def remap_spans(spans: set, keep_mask: Sequence[bool]) -> set:
    """Re-index spans after dropping flagged tokens.

    A span maps to the range of its surviving tokens; spans with no
    surviving token disappear.  Relative order is preserved.
    """
    new_index = {}
    nxt = 0
    for old, keep in enumerate(keep_mask, start=1):
        if keep:
            nxt += 1
            new_index[old] = nxt
    out = set()
    for (i, j) in spans:
        inside = [new_index[t] for t in range(i, j + 1) if t in new_index]
        if inside:
            out.add((inside[0], inside[-1]))
    return out


def collapse_piece_spans(spans: set, atomic_spans: Sequence[tuple[int, int]],
                         n_pieces: int) -> set:
    """Map piece-level spans to word-level spans by collapsing each atomic
    span (multi-piece word) to one position."""
    word_of = {}
    word = 0
    pos = 1
    starts = {a: (a, b) for a, b in atomic_spans}
    while pos <= n_pieces:
        word += 1
        if pos in starts:
            a, b = starts[pos]
            for p in range(a, b + 1):
                word_of[p] = word
            pos = b + 1
        else:
            word_of[pos] = word
            pos += 1
    return {(word_of[i], word_of[j]) for (i, j) in spans}


@dataclass
class CorpusF1Report:
    mean_f1: float
    count: int
    skipped: int
    by_length: dict = field(default_factory=dict)
    config: Optional[F1Config] = None

    def as_dict(self) -> dict:
        return {"mean_f1": self.mean_f1, "count": self.count,
                "skipped": self.skipped,
                "by_length": {str(k): v for k, v in self.by_length.items()},
                "config": None if self.config is None else {
                    "lowercase": self.config.lowercase,
                    "exclude_trivial": self.config.exclude_trivial,
                    "punct": list(self.config.punct)}}


def corpus_f1(pred_spans: list[set], golds: list[GoldTree],
              cfg: F1Config = F1Config()) -> CorpusF1Report:
    """Unweighted mean of sentence F1 with punctuation removed first.

    ``pred_spans[i]`` must index the same token positions as ``golds[i]``
    before punctuation removal.  Sentences shorter than two tokens after
    filtering are skipped (reported, not scored).
    """
    if len(pred_spans) != len(golds):
        raise ValueError(f"{len(pred_spans)} predictions vs {len(golds)} golds")
    scores = []
    skipped = 0
    buckets: dict[str, list[float]] = {}
    for pred, gold in zip(pred_spans, golds):
        keep = [not p for p in gold.punct]
        n_kept = sum(keep)
        if n_kept < 2:
            skipped += 1
            continue
        p = remap_spans(set(pred), keep)
        g = remap_spans(gold.spans, keep)
        f1 = sentence_f1(p, g, cfg, n=n_kept)
        scores.append(f1)
        buckets.setdefault(_bucket(n_kept), []).append(f1)
    mean = float(np.mean(scores)) if scores else 0.0
    by_len = {k: float(np.mean(v)) for k, v in sorted(buckets.items())}
    return CorpusF1Report(mean, len(scores), skipped, by_len, cfg)


def _bucket(n: int) -> str:
    if n <= 10:
        return "<=10"
    if n <= 20:
        return "11-20"
    if n <= 40:
        return "21-40"
    return ">40"


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------

def oracle_inside(fns: CompositionModel, leaves: np.ndarray,
                  atomic_spans=()) -> dict:
    """Reference inside recursion: naive, memo disabled, n <= 8.

    Returns {span: (vector, scores over valid splits)} computed by direct
    recursion through the same composition functions, sharing none of the
    chart engine's batching or scheduling.
    """
    n = leaves.shape[0]
    if n > 8:
        raise ValueError(f"oracle_inside limited to n<=8, got {n}")
    interior = {}
    for a, b in atomic_spans:
        for k in range(a, b):
            interior[k] = (a, b)

    def valid_splits(i, j):
        out = []
        for k in range(i, j):
            if k in interior:
                a, b = interior[k]
                if not (a <= i and j <= b):
                    continue
            out.append(k)
        return out

    out: dict = {}

    def rec(i, j):
        if i == j:
            return leaves[i - 1]
        vecs, scores = [], []
        for k in valid_splits(i, j):
            l = rec(i, k)
            r = rec(k + 1, j)
            with T.no_grad():
                vecs.append(fns.compose(Tensor(l[None, :]), Tensor(r[None, :])).data[0])
                scores.append(float(fns.score_alpha(Tensor(l[None, :]),
                                                    Tensor(r[None, :])).data[0]))
        sc = np.asarray(scores)
        w = np.exp(sc - sc.max())
        w /= w.sum()
        vec = (w[:, None] * np.asarray(vecs)).sum(axis=0)
        out[(i, j)] = (vec, sc)
        return vec

    root = rec(1, n)
    out[(1, n)] = out.get((1, n), (root, np.zeros(0)))
    for i in range(1, n + 1):
        out[(i, i)] = (leaves[i - 1], np.zeros(0))
    return out


def oracle_outside(fns: CompositionModel, leaves: np.ndarray) -> dict:
    """Reference outside recursion over the full chart, n <= 8."""
    n = leaves.shape[0]
    if n > 8:
        raise ValueError(f"oracle_outside limited to n<=8, got {n}")
    ins = {span: vec for span, (vec, _) in oracle_inside(fns, leaves).items()}
    outs = {(1, n): fns.root_outside.data.copy()}
    spans = sorted(((i, j) for i in range(1, n + 1) for j in range(i, n + 1)
                    if (i, j) != (1, n)),
                   key=lambda s: s[1] - s[0], reverse=True)
    with T.no_grad():
        for (i, j) in spans:
            vecs, scores = [], []
            for k in range(j + 1, n + 1):
                p, s = outs[(i, k)], ins[(j + 1, k)]
                vecs.append(fns.decompose(Tensor(p[None, :]), Tensor(s[None, :]),
                                          "right").data[0])
                scores.append(float(fns.score_beta(Tensor(p[None, :]),
                                                   Tensor(s[None, :]), "right").data[0]))
            for k in range(1, i):
                p, s = outs[(k, j)], ins[(k, i - 1)]
                vecs.append(fns.decompose(Tensor(p[None, :]), Tensor(s[None, :]),
                                          "left").data[0])
                scores.append(float(fns.score_beta(Tensor(p[None, :]),
                                                   Tensor(s[None, :]), "left").data[0]))
            sc = np.asarray(scores)
            w = np.exp(sc - sc.max())
            w /= w.sum()
            outs[(i, j)] = (w[:, None] * np.asarray(vecs)).sum(axis=0)
    return outs


def all_binary_trees(i: int, j: int) -> list[TreeNode]:
    """Every binary tree over the span (i, j); Catalan(j - i) of them."""
    if i == j:
        return [leaf(i)]
    out = []
    for k in range(i, j):
        for l in all_binary_trees(i, k):
            for r in all_binary_trees(k + 1, j):
                out.append(branch(l, r))
    return out


def oracle_enumerate_actions(dec, tokens: Sequence[int], max_n: int = 5):
    """Exhaustive search over structures for a fixed sentence.

    Scores every binary tree's full action sequence (with the terminating
    token) by stepping the model, and accumulates exact prefix marginals
    p(x_<t) as sums over all action prefixes ending at the t-th emission.
    Returns (best_tree, best_logp, tree_logps, marginals).
    """
    tokens = [int(t) for t in tokens]
    n = len(tokens)
    if n > max_n:
        raise ValueError(f"enumeration limited to n<={max_n}, got {n}")
    marginals = [-math.inf] * (n + 1)
    marginals[0] = 0.0

    results: list[tuple[float, TreeNode]] = []

    with T.no_grad():
        def dfs(state, words, depth, logp, splits):
            """splits: stack of subtree roots mirroring the vector stack."""
            nonlocal results
            p_type = dec.type_probs(state)
            if words < n:
                probs, handle = dec.token_probs(state)
                lp = logp + _safe_log(p_type[1]) + _safe_log(probs[tokens[words]])
                st = dec.apply_gen(state, tokens[words], handle)
                marginals[words + 1] = _logadd(marginals[words + 1], lp)
                dfs(st, words + 1, depth + 1, lp, splits + [leaf(words + 1)])
            if depth >= 2:
                lp = logp + _safe_log(p_type[0])
                st = dec.apply_comp(state)
                merged = splits[:-2] + [branch(splits[-2], splits[-1])]
                dfs(st, words, depth - 1, lp, merged)
            if words == n and depth == 1:
                probs, handle = dec.token_probs(state)
                lp = logp + _safe_log(p_type[1]) + _safe_log(probs[dec.eos_id])
                results.append((lp, splits[0]))

        dfs(dec.start(), 0, 0, 0.0, [])

    results.sort(key=lambda r: -r[0])
    best_logp, best_tree = results[0]
    return best_tree, best_logp, results, marginals


def _safe_log(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf


def _logadd(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))
