"""Vocabulary, tokenization, gold-tree ingestion, and batching."""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

__all__ = ["Vocab", "TokenizedSentence", "GoldTree", "Batch",
           "build_vocab", "tokenize", "detokenize", "read_bracketed_trees",
           "parse_bracketed", "batch_iter", "DEFAULT_PUNCT"]

PAD, BOS, EOS, UNK, COMP = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>", "<comp>")

# Tags and tokens discarded before F1 scoring, editable via F1Config.
DEFAULT_PUNCT = (",", ".", ":", ";", "``", "''", "`", "'", "-LRB-", "-RRB-",
                 "(", ")", "?", "!", "--", "...", "-", "#", "$")


@dataclass
class Vocab:
    """Dense token/id bijection with stable reserved ids."""

    token_to_id: dict[str, int]
    id_to_token: list[str]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, idx in sorted(self.token_to_id.items(), key=lambda kv: kv[1]):
                fh.write(f"{tok}\t{idx}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                tok, idx = line.rstrip("\n").split("\t")
                pairs.append((tok, int(idx)))
        pairs.sort(key=lambda kv: kv[1])
        ids = [idx for _, idx in pairs]
        if ids != list(range(len(ids))):
            raise ValueError("vocab file ids are not dense from 0")
        id_to_token = [tok for tok, _ in pairs]
        return cls({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def build_vocab(lines: Iterable[str], size_limit: int = 30000,
                min_freq: int = 1, mode: str = "whitespace") -> Vocab:
    """Count tokens and keep the most frequent, reserved ids first.

    Ties break lexicographically.  ``mode='wordpiece'`` builds a subword
    inventory (single characters plus frequent prefixes/continuations)
    instead of whole words.
    """
    counts: Counter[str] = Counter()
    n_lines = 0
    for line in lines:
        words = line.split()
        if not words:
            continue
        n_lines += 1
        counts.update(words)
    if n_lines == 0:
        raise ValueError("empty corpus")

    if mode == "whitespace":
        items = _most_common(counts, size_limit - len(RESERVED), min_freq)
    elif mode == "wordpiece":
        items = _wordpiece_inventory(counts, size_limit - len(RESERVED), min_freq)
    else:
        raise ValueError(f"unknown vocab mode {mode!r}")

    id_to_token = list(RESERVED) + items
    return Vocab({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def _most_common(counts: Counter, limit: int, min_freq: int) -> list[str]:
    kept = [(tok, c) for tok, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda kv: (-kv[1], kv[0]))
    return [tok for tok, _ in kept[:limit]]


def _wordpiece_inventory(word_counts: Counter, limit: int, min_freq: int) -> list[str]:
    """Characters always included; frequent word prefixes and '##'
    continuation substrings fill the remaining budget."""
    sub_counts: Counter[str] = Counter()
    chars: set[str] = set()
    for word, c in word_counts.items():
        for ch in word:
            chars.add(ch)
            sub_counts[f"##{ch}"] += 0  # ensure continuations exist for every char
        for ln in range(2, len(word) + 1):
            sub_counts[word[:ln]] += c
            for start in range(1, len(word) - ln + 1):
                sub_counts[f"##{word[start:start + ln]}"] += c
    base = sorted(chars) + sorted(f"##{ch}" for ch in chars)
    budget = max(0, limit - len(base))
    extras = [(s, c) for s, c in sub_counts.items() if c >= min_freq and s not in base]
    extras.sort(key=lambda kv: (-kv[1], kv[0]))
    return base + [s for s, _ in extras[:budget]]


@dataclass
class TokenizedSentence:
    """Token ids with the word-piece groups that parsing must not split.

    ``atomic_spans`` are 1-based inclusive (i, j) ranges; only multi-piece
    words appear.  ``words`` keeps the source words for round-trips.
    """

    ids: list[int]
    atomic_spans: list[tuple[int, int]] = field(default_factory=list)
    words: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(line: str, vocab: Vocab, mode: str = "whitespace") -> TokenizedSentence:
    """Map a sentence to ids; unknowns become <unk>.

    In wordpiece mode every source word is greedily split into the longest
    matching vocabulary pieces and multi-piece words become atomic spans.
    """
    words = line.split()
    if not words:
        raise ValueError("empty line")
    if mode == "whitespace":
        return TokenizedSentence([vocab.id(w) for w in words], [], words)
    if mode != "wordpiece":
        raise ValueError(f"unknown tokenize mode {mode!r}")

    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    pieces_out: list[str] = []
    for word in words:
        pieces = _wordpiece_split(word, vocab)
        start = len(ids) + 1
        ids.extend(vocab.id(p) for p in pieces)
        pieces_out.extend(pieces)
        if len(pieces) > 1:
            spans.append((start, len(ids)))
    return TokenizedSentence(ids, spans, pieces_out)


def _wordpiece_split(word: str, vocab: Vocab) -> list[str]:
    pieces = []
    pos = 0
    while pos < len(word):
        prefix = "##" if pos else ""
        end = len(word)
        while end > pos:
            cand = prefix + word[pos:end]
            if cand in vocab:
                pieces.append(cand)
                break
            end -= 1
        else:
            pieces.append("<unk>")
            end = pos + 1
        pos = end
    return pieces


def detokenize(sent: TokenizedSentence, vocab: Vocab) -> str:
    toks = [vocab.token(i) for i in sent.ids]
    out = []
    for t in toks:
        if t.startswith("##") and out:
            out[-1] += t[2:]
        else:
            out.append(t)
    return " ".join(out)


# ---------------------------------------------------------------------------
# Bracketed trees
# ---------------------------------------------------------------------------

@dataclass
class GoldTree:
    """Tokens plus the labeled constituent spans of a bracketed tree.

    Spans are 1-based inclusive and deduplicated (unary chains collapse).
    ``punct`` flags tokens whose preterminal label or surface form is in
    the punctuation list.
    """

    tokens: list[str]
    spans: set[tuple[int, int]]
    punct: list[bool]


class BracketError(ValueError):
    pass


def read_bracketed_trees(path, punct=DEFAULT_PUNCT) -> list[GoldTree]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_bracketed(text, punct=punct)


def parse_bracketed(text: str, punct=DEFAULT_PUNCT) -> list[GoldTree]:
    """Parse a stream of s-expressions into GoldTrees.

    Raises BracketError naming the line of the first imbalance.
    """
    punct_set = set(punct)
    trees: list[GoldTree] = []
    stack: list[list] = []
    token = ""
    line_no = 1
    start_line = 1

    def flush_token():
        nonlocal token
        if token:
            if not stack:
                raise BracketError(f"line {line_no}: token outside brackets")
            stack[-1].append(token)
            token = ""

    for ch in text:
        if ch == "\n":
            flush_token()
            line_no += 1
            continue
        if ch == "(":
            flush_token()
            if not stack:
                start_line = line_no
            stack.append([])
        elif ch == ")":
            flush_token()
            if not stack:
                raise BracketError(f"line {line_no}: unbalanced ')'")
            node = stack.pop()
            if stack:
                stack[-1].append(node)
            else:
                trees.append(_gold_from_sexpr(node, punct_set, start_line))
        elif ch.isspace():
            flush_token()
        else:
            token += ch
    flush_token()
    if stack:
        raise BracketError(f"line {start_line}: unbalanced '(' (unclosed tree)")
    return trees


def _gold_from_sexpr(node, punct_set, line_no) -> GoldTree:
    tokens: list[str] = []
    punct: list[bool] = []
    spans: set[tuple[int, int]] = set()

    def walk(nd) -> tuple[int, int]:
        if isinstance(nd, str):
            tokens.append(nd)
            punct.append(nd in punct_set)
            pos = len(tokens)
            return pos, pos
        if not nd:
            raise BracketError(f"line {line_no}: empty bracket")
        label = nd[0] if isinstance(nd[0], str) else None
        children = nd[1:] if label is not None else nd
        if not children:
            raise BracketError(f"line {line_no}: constituent {label!r} has no children")
        if label is not None and len(children) == 1 and isinstance(children[0], str):
            # preterminal: the label classifies the token
            tokens.append(children[0])
            punct.append(label in punct_set or children[0] in punct_set)
            pos = len(tokens)
            spans.add((pos, pos))
            return pos, pos
        lo = None
        hi = None
        for child in children:
            i, j = walk(child)
            lo = i if lo is None else lo
            hi = j
        spans.add((lo, hi))
        return lo, hi

    walk(node)
    return GoldTree(tokens, spans, punct)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    sentences: list[TokenizedSentence]

    @property
    def max_len(self) -> int:
        return max(len(s) for s in self.sentences)

    @property
    def total_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)

    def padded_ids(self) -> np.ndarray:
        """(B, max_len) int array padded with <pad>."""
        out = np.full((len(self.sentences), self.max_len), PAD, dtype=np.int64)
        for b, s in enumerate(self.sentences):
            out[b, :len(s)] = s.ids
        return out

    def lengths(self) -> np.ndarray:
        return np.array([len(s) for s in self.sentences], dtype=np.int64)


def batch_iter(dataset: list[TokenizedSentence], max_tokens: int, seed: int = 0,
               context_limit: int = 512, shuffle: bool = True) -> Iterator[Batch]:
    """Yield length-bucketed batches with at most ``max_tokens`` padded slots.

    Deterministic under ``seed``.  Over-long sentences are truncated with a
    warning (atomic spans crossing the cut are dropped).
    """
    if not dataset:
        return
    sents = []
    for s in dataset:
        if len(s) > context_limit:
            warnings.warn(f"truncating sentence of length {len(s)} to {context_limit}")
            s = TokenizedSentence(
                s.ids[:context_limit],
                [sp for sp in s.atomic_spans if sp[1] <= context_limit],
                s.words[:context_limit] if s.words else [])
        sents.append(s)

    order = np.arange(len(sents))
    if shuffle:
        rng = np.random.default_rng(seed)
        rng.shuffle(order)
    # stable length sort of shuffled order groups similar lengths while the
    # shuffle decides ordering inside each length class
    order = sorted(order, key=lambda idx: len(sents[idx]))

    batches: list[list[int]] = []
    current: list[int] = []
    cur_max = 0
    for idx in order:
        n = len(sents[idx])
        new_max = max(cur_max, n)
        if current and new_max * (len(current) + 1) > max_tokens:
            batches.append(current)
            current, cur_max = [], 0
            new_max = n
        current.append(idx)
        cur_max = new_max
    if current:
        batches.append(current)

    if shuffle:
        rng = np.random.default_rng(seed + 1)
        rng.shuffle(batches)
    for b in batches:
        yield Batch([sents[i] for i in b])
