"""Binary trees over token spans.

Spans are 1-based and inclusive on both ends: (i, i) is the i-th token,
(1, n) the whole sentence.  Internal nodes carry the split point k, meaning
the children cover (i, k) and (k+1, j).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

__all__ = ["TreeNode", "leaf", "branch", "tree_spans", "postorder",
           "tree_height", "right_branching", "left_branching", "random_tree",
           "to_sexpr", "spans_to_tree"]


@dataclass
class TreeNode:
    i: int
    j: int
    split: Optional[int] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.i == self.j

    def __iter__(self) -> Iterator["TreeNode"]:
        if self.left is not None:
            yield from self.left
        if self.right is not None:
            yield from self.right
        yield self


def leaf(i: int) -> TreeNode:
    return TreeNode(i, i)


def branch(left: TreeNode, right: TreeNode) -> TreeNode:
    if right.i != left.j + 1:
        raise ValueError(f"non-adjacent children ({left.i},{left.j}) ({right.i},{right.j})")
    return TreeNode(left.i, right.j, split=left.j, left=left, right=right)


def tree_spans(root: TreeNode, include_leaves: bool = False) -> set[tuple[int, int]]:
    return {(n.i, n.j) for n in root if include_leaves or not n.is_leaf}


def postorder(root: TreeNode) -> list[TreeNode]:
    """Left-child-first post-order node list (leaves and internals mixed)."""
    return list(root)


def tree_height(root: TreeNode) -> int:
    if root.is_leaf:
        return 0
    return 1 + max(tree_height(root.left), tree_height(root.right))


def right_branching(n: int, start: int = 1) -> TreeNode:
    if n == 1:
        return leaf(start)
    return branch(leaf(start), right_branching(n - 1, start + 1))


def left_branching(n: int, start: int = 1) -> TreeNode:
    node = leaf(start)
    for k in range(1, n):
        node = branch(node, leaf(start + k))
    return node


def random_tree(n: int, rng) -> TreeNode:
    """Uniformly random split recursion (not uniform over tree shapes)."""

    def build(i, j):
        if i == j:
            return leaf(i)
        k = int(rng.integers(i, j))
        return branch(build(i, k), build(k + 1, j))

    return build(1, n)


def to_sexpr(root: TreeNode, tokens, label: str = "X") -> str:
    """Bracketed rendering with a uniform constituent label."""

    def render(node: TreeNode) -> str:
        if node.is_leaf:
            return str(tokens[node.i - 1])
        return f"({label} {render(node.left)} {render(node.right)})"

    if root.is_leaf:
        return f"({label} {render(root)})"
    return render(root)


def spans_to_tree(spans: set[tuple[int, int]], n: int) -> Optional[TreeNode]:
    """Rebuild a binary tree from its internal-node span set, if consistent."""
    want = set(spans) | {(i, i) for i in range(1, n + 1)}

    def build(i, j):
        if i == j:
            return leaf(i)
        for k in range(i, j):
            if (i, k) in want and (k + 1, j) in want:
                l = build(i, k)
                r = build(k + 1, j)
                if l is not None and r is not None:
                    return branch(l, r)
        return None

    if n >= 2 and (1, n) not in want:
        return None
    return build(1, n)
