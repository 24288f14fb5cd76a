"""A small binary PCFG sampler for synthetic grammar-induction corpora.

The toy grammar mixes left-recursive modifier attachment with
right-recursive complements so neither pure-left nor pure-right branching
matches the derivations well, which is what makes the induction task
discriminative at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trees import TreeNode, branch, leaf

__all__ = ["PCFG", "Derivation", "TOY_GRAMMAR", "TOY_LEXICON",
           "sample_corpus", "write_corpus"]


@dataclass
class Derivation:
    tokens: list[str]
    tree: TreeNode          # spans over token positions
    labels: dict            # (i, j) -> nonterminal label

    def bracketed(self) -> str:
        def render(node: TreeNode) -> str:
            if node.is_leaf:
                lab = self.labels.get((node.i, node.j))
                word = self.tokens[node.i - 1]
                return f"({lab} {word})" if lab else word
            lab = self.labels.get((node.i, node.j), "X")
            return f"({lab} {render(node.left)} {render(node.right)})"

        return render(self.tree)


class PCFG:
    """Binary rules lhs -> (A, B) with probabilities, plus a lexicon of
    preterminal -> word choices (uniform)."""

    def __init__(self, rules: dict, lexicon: dict, start: str = "S"):
        self.rules = {}
        for lhs, options in rules.items():
            total = sum(p for _, p in options)
            self.rules[lhs] = [(rhs, p / total) for rhs, p in options]
        self.lexicon = lexicon
        self.start = start

    @property
    def num_rules(self) -> int:
        return sum(len(v) for v in self.rules.values())

    def sample(self, rng, max_len: int = 20, max_tries: int = 200) -> Derivation:
        for _ in range(max_tries):
            tokens: list[str] = []
            labels: dict = {}

            def expand(sym: str) -> TreeNode:
                if sym in self.lexicon:
                    word = self.lexicon[sym][int(rng.integers(len(self.lexicon[sym])))]
                    tokens.append(word)
                    pos = len(tokens)
                    node = leaf(pos)
                    labels[(pos, pos)] = sym
                    return node
                options = self.rules[sym]
                probs = np.array([p for _, p in options])
                idx = int(rng.choice(len(options), p=probs))
                a, b = options[idx][0]
                if len(tokens) > max_len:
                    raise _TooLong()
                left = expand(a)
                right = expand(b)
                node = branch(left, right)
                labels[(node.i, node.j)] = sym
                return node

            try:
                tree = expand(self.start)
            except (_TooLong, RecursionError):
                continue
            if len(tokens) <= max_len and len(tokens) >= 2:
                return Derivation(tokens, tree, labels)
        raise RuntimeError("could not sample a sentence within the length cap")


class _TooLong(Exception):
    pass


# ten binary rules; the lexicon supplies the preterminals
TOY_GRAMMAR = {
    "S": [(("NP", "VP"), 1.0)],
    "NP": [(("D", "N"), 0.55), (("D", "AP"), 0.25), (("NP", "PP"), 0.20)],
    "AP": [(("A", "N"), 0.70), (("A", "AP"), 0.30)],
    "VP": [(("V", "NP"), 0.55), (("VP", "PP"), 0.25), (("V", "S"), 0.20)],
    "PP": [(("P", "NP"), 1.0)],
}

TOY_LEXICON = {
    "D": ["the", "a"],
    "N": ["cat", "dog", "bird", "fox", "cow", "owl", "pig", "rat"],
    "A": ["big", "old", "red", "shy", "wet"],
    "V": ["sees", "hears", "likes", "bites", "chases", "believes"],
    "P": ["near", "under", "behind", "above"],
}


def sample_corpus(n_sentences: int, seed: int = 0, max_len: int = 20,
                  grammar: dict = TOY_GRAMMAR, lexicon: dict = TOY_LEXICON
                  ) -> list[Derivation]:
    pcfg = PCFG(grammar, lexicon)
    rng = np.random.default_rng(seed)
    return [pcfg.sample(rng, max_len=max_len) for _ in range(n_sentences)]


def write_corpus(derivations: list[Derivation], text_path, tree_path) -> None:
    """One sentence per line; gold derivations as bracketed trees."""
    with open(text_path, "w", encoding="utf-8") as ft:
        for d in derivations:
            ft.write(" ".join(d.tokens) + "\n")
    with open(tree_path, "w", encoding="utf-8") as fg:
        for d in derivations:
            fg.write(d.bracketed() + "\n")
