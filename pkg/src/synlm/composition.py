"""Composition model: inside-outside charts, pruning schedules, tree induction.

Span convention matches trees.py: 1-based inclusive (i, j).  Chart vectors
for a batch of sentences live in one flat row storage so each parallel step
is a handful of vectorized ops regardless of how many cells it encodes.

The pruned chart materializes, per sentence: the n leaves, the n-1 nodes of
the top-down parser's split tree, and at most one extra cell per tree node
(the sibling completion that makes a second split point valid).  That keeps
the cell count at most 3n - 2 while still giving interior cells more than
one valid split wherever the tree is locally unbalanced, which is what lets
the induced tree disagree with the parser.  Each cell's valid splits K are
the block boundaries alive when the cell is encoded; the parent map P is
the reverse of K restricted to materialized cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tape as T
from .layers import LayerNormLayer, Linear, TransformerEncoder
from .optim import ParamStore
from .tape import Tensor
from .trees import TreeNode, branch, leaf

__all__ = ["CompositionConfig", "CompositionModel", "MergeSchedule",
           "build_merge_schedule", "full_merge_schedule", "Chart",
           "build_inside", "build_outside", "induce_tree", "inside_full",
           "inside_pruned", "ScheduleError"]


class ScheduleError(ValueError):
    pass


@dataclass
class CompositionConfig:
    width: int = 64              # chart vector width
    compose_layers: int = 1      # transformer layers in the composition fn
    decompose_layers: int = 1
    heads: int = 4
    ffn_mult: int = 4
    score_dim: int = 32          # feature width of the split/parent scorers
    parser_layers: int = 2
    parser_heads: int = 4
    max_len: int = 1024          # parser position table
    gen_width: int = 64          # width of the generator embeddings


class CompositionModel:
    """Composition/decomposition functions, scorers, projections, parser."""

    def __init__(self, store: ParamStore, cfg: CompositionConfig, name: str = "comp"):
        self.cfg = cfg
        d = cfg.width
        self.role_left = store.param(f"{name}.role_left", (d,))
        self.role_right = store.param(f"{name}.role_right", (d,))
        self.role_parent = store.param(f"{name}.role_parent", (d,))
        self.f_alpha = TransformerEncoder(store, f"{name}.f_alpha", d,
                                          cfg.compose_layers, cfg.heads,
                                          cfg.ffn_mult * d, final_ln=False)
        self.alpha_ln = LayerNormLayer(store, f"{name}.f_alpha.ln_sum", d)
        self.f_beta = TransformerEncoder(store, f"{name}.f_beta", d,
                                         cfg.decompose_layers, cfg.heads,
                                         cfg.ffn_mult * d, final_ln=False)
        self.beta_ln = LayerNormLayer(store, f"{name}.f_beta.ln_sum", d)
        self.phi_a_left = Linear(store, f"{name}.phi_a_left", d, cfg.score_dim)
        self.phi_a_right = Linear(store, f"{name}.phi_a_right", d, cfg.score_dim)
        self.phi_b_parent = Linear(store, f"{name}.phi_b_parent", d, cfg.score_dim)
        self.phi_b_left = Linear(store, f"{name}.phi_b_left", d, cfg.score_dim)
        self.phi_b_right = Linear(store, f"{name}.phi_b_right", d, cfg.score_dim)
        self.down_proj = Linear(store, f"{name}.down", cfg.gen_width, d)
        self.up_proj = Linear(store, f"{name}.up", d, cfg.gen_width)
        self.root_outside = store.param(f"{name}.root_outside", (d,))
        self.parser_pos = store.param(f"{name}.parser_pos", (cfg.max_len, d))
        self.parser_enc = TransformerEncoder(store, f"{name}.parser", d,
                                             cfg.parser_layers, cfg.parser_heads,
                                             2 * d)
        self.parser_score1 = Linear(store, f"{name}.parser_score1", 2 * d, d)
        self.parser_score2 = Linear(store, f"{name}.parser_score2", d, 1)
        self._scale = 1.0 / np.sqrt(cfg.score_dim)

    # -- projections ------------------------------------------------------
    def down(self, x: Tensor) -> Tensor:
        return self.down_proj(x)

    def up(self, x: Tensor) -> Tensor:
        return self.up_proj(x)

    # -- composition ------------------------------------------------------
    def compose(self, l: Tensor, r: Tensor) -> Tensor:
        """f_alpha over (..., d) pairs: role-tagged two-token transformer;
        the position outputs are summed and layer-normalized."""
        d = self.cfg.width
        if l.shape[-1] != d or r.shape[-1] != d:
            raise T.ShapeError(f"compose: widths {l.shape} / {r.shape}, want {d}")
        lead = l.shape[:-1]
        x = T.concat([T.reshape(T.add(l, self.role_left), lead + (1, d)),
                      T.reshape(T.add(r, self.role_right), lead + (1, d))],
                     axis=len(lead))
        y = self.f_alpha(x)
        return self.alpha_ln(T.sum_(y, axis=len(lead)))

    def decompose(self, parent: Tensor, sibling: Tensor, sibling_side: str) -> Tensor:
        """f_beta: outside vector of the child opposite ``sibling``."""
        d = self.cfg.width
        role = self.role_right if sibling_side == "right" else self.role_left
        lead = parent.shape[:-1]
        x = T.concat([T.reshape(T.add(parent, self.role_parent), lead + (1, d)),
                      T.reshape(T.add(sibling, role), lead + (1, d))],
                     axis=len(lead))
        y = self.f_beta(x)
        return self.beta_ln(T.sum_(y, axis=len(lead)))

    # -- scorers ------------------------------------------------------------
    def score_alpha(self, l: Tensor, r: Tensor) -> Tensor:
        """Split compatibility: dot of left/right features over sqrt(d)."""
        fl = self.phi_a_left(l)
        fr = self.phi_a_right(r)
        return T.mul(T.sum_(T.mul(fl, fr), axis=-1), Tensor(self._scale))

    def score_beta(self, parent: Tensor, sibling: Tensor, sibling_side: str) -> Tensor:
        fp = self.phi_b_parent(parent)
        fs = (self.phi_b_right if sibling_side == "right" else self.phi_b_left)(sibling)
        return T.mul(T.sum_(T.mul(fp, fs), axis=-1), Tensor(self._scale))

    # -- top-down parser ------------------------------------------------------
    def parser_scores(self, leaf_vecs: Tensor, lengths: Sequence[int]) -> list[Tensor]:
        """Boundary scores per sentence.

        ``leaf_vecs``: flat (total_tokens, d) chart-width token vectors in
        sentence order.  Returns one (n_b - 1,) tensor per sentence
        (empty-length sentences yield zero-length tensors).
        """
        lengths = list(lengths)
        total = sum(lengths)
        if leaf_vecs.shape[0] != total:
            raise T.ShapeError(
                f"parser_scores: {leaf_vecs.shape[0]} rows for lengths {lengths}")
        bsz, tmax = len(lengths), max(lengths)
        d = self.cfg.width
        # pad into (B, T, d)
        pad_rows = np.zeros((bsz, tmax), dtype=np.intp)
        valid = np.zeros((bsz, tmax), dtype=bool)
        off = 0
        for b, n in enumerate(lengths):
            pad_rows[b, :n] = np.arange(off, off + n)
            valid[b, :n] = True
            off += n
        x = T.gather_rows(leaf_vecs, pad_rows.reshape(-1))
        x = T.reshape(x, (bsz, tmax, d))
        x = T.add(x, T.gather_rows(self.parser_pos, np.arange(tmax)))
        mask = valid[:, None, :] & valid[:, :, None]
        mask |= np.eye(tmax, dtype=bool)  # padded rows attend to self only
        enc = self.parser_enc(x, mask=mask)
        flat = T.reshape(enc, (bsz * tmax, d))
        out: list[Tensor] = []
        for b, n in enumerate(lengths):
            if n < 2:
                out.append(Tensor(np.zeros((0,), dtype=leaf_vecs.dtype)))
                continue
            li = b * tmax + np.arange(n - 1)
            pair = T.concat([T.gather_rows(flat, li), T.gather_rows(flat, li + 1)],
                            axis=-1)
            h = T.gelu(self.parser_score1(pair))
            out.append(T.reshape(self.parser_score2(h), (n - 1,)))
        return out


# ---------------------------------------------------------------------------
# Merge schedules
# ---------------------------------------------------------------------------

@dataclass
class EncodeCell:
    span: tuple[int, int]
    splits: list[int]


@dataclass
class FastLevel:
    """Vectorized encode arrays for one parallel step (full charts).

    Rows are sentence-relative construction indices: leaves first, then
    cells in step order.  ``seg`` maps each (cell, split) pair to its local
    cell index; pairs of one cell are contiguous in split order.
    """

    spans: np.ndarray    # (C, 2)
    seg: np.ndarray      # (P,)
    splits: np.ndarray   # (P,)
    lrel: np.ndarray     # (P,) relative row of the left child
    rrel: np.ndarray     # (P,)
    counts: np.ndarray   # (C,) splits per cell


@dataclass
class MergeSchedule:
    """Encode order for a pruned (or full) chart.

    ``batches`` lists merge points grouped by pruning-tree height (the
    spec's operator-facing view); ``steps`` lists the cells each parallel
    step encodes with their valid splits.  ``tree`` is the pruning tree.
    ``fast_levels``, when present, carries the same information as index
    arrays so wide charts avoid per-pair bookkeeping.
    """

    n: int
    batches: list[list[int]]
    steps: list[list[EncodeCell]]
    tree: Optional[TreeNode]
    fast_levels: Optional[list[FastLevel]] = None

    @property
    def height(self) -> int:
        return len(self.batches)

    def cell_count(self) -> int:
        """Materialized cells including leaves."""
        return self.n + sum(len(s) for s in self.steps)

    def k_map(self) -> dict[tuple[int, int], list[int]]:
        out = {}
        for step in self.steps:
            for cell in step:
                out[cell.span] = list(cell.splits)
        return out

    def parent_map(self) -> dict[tuple[int, int], list[int]]:
        """Span -> endpoints k of parents (i, k) with k > j or (k, j) with
        k < i, per the reverse of the split map."""
        out: dict[tuple[int, int], list[int]] = {}
        for step in self.steps:
            for cell in step:
                i, j = cell.span
                for k in cell.splits:
                    out.setdefault((i, k), []).append(j)
                    out.setdefault((k + 1, j), []).append(i)
        return out


_ATOMIC_PENALTY = 1e9


def _interior_boundaries(atomic_spans) -> set[int]:
    interior = set()
    for a, b in atomic_spans:
        interior.update(range(a, b))
    return interior


def build_merge_schedule(v: np.ndarray, atomic_spans=(), n: Optional[int] = None) -> MergeSchedule:
    """Pruning schedule from boundary scores.

    The sentence splits recursively at the highest-scoring boundary (ties
    to the smallest index), giving a binary pruning tree; merge points are
    batched by their height in that tree.  Boundaries interior to atomic
    spans are forced to merge first.
    """
    v = np.asarray(v, dtype=np.float64)
    if n is None:
        n = v.shape[0] + 1
    if v.shape[0] != n - 1:
        raise ScheduleError(f"expected {n - 1} scores for n={n}, got {v.shape[0]}")
    if n == 1:
        return MergeSchedule(1, [], [], leaf(1))

    v_eff = v.copy()
    for b in _interior_boundaries(atomic_spans):
        if 1 <= b <= n - 1:
            v_eff[b - 1] -= _ATOMIC_PENALTY

    def split(i: int, j: int) -> TreeNode:
        if i == j:
            return leaf(i)
        seg = v_eff[i - 1:j - 1]
        k = i + int(np.argmax(seg))
        return branch(split(i, k), split(k + 1, j))

    tree = split(1, n)
    return schedule_from_tree(tree, n, atomic_spans=atomic_spans)


def schedule_from_tree(tree: TreeNode, n: int, atomic_spans=()) -> MergeSchedule:
    """Schedule whose pruning tree is ``tree`` (exposed for tests)."""
    atomic_cover = {}
    for a, b in atomic_spans:
        for k in range(a, b):
            atomic_cover[k] = (a, b)

    def alt_allowed(k: int, i: int, j: int) -> bool:
        # an alternative split inside an atomic span is legal only for
        # cells that live inside that span themselves
        if k not in atomic_cover:
            return True
        a, b = atomic_cover[k]
        return a <= i and j <= b

    heights: dict[tuple[int, int], int] = {}

    def fill(node: TreeNode) -> int:
        if node.is_leaf:
            heights[(node.i, node.j)] = 0
            return 0
        h = 1 + max(fill(node.left), fill(node.right))
        heights[(node.i, node.j)] = h
        return h

    root_h = fill(tree)
    batches: list[list[int]] = [[] for _ in range(root_h)]
    steps: list[list[EncodeCell]] = [[] for _ in range(root_h)]
    extra_step: dict[tuple[int, int], tuple[int, EncodeCell]] = {}

    def visit(node: TreeNode) -> None:
        if node.is_leaf:
            return
        visit(node.left)
        visit(node.right)
        h = heights[(node.i, node.j)]
        batches[h - 1].append(node.split)
        splits = [node.split]
        hl = heights[(node.left.i, node.left.j)]
        hr = heights[(node.right.i, node.right.j)]
        if hr > hl and not node.right.is_leaf \
                and alt_allowed(node.right.split, node.i, node.j):
            # alternative: adopt the right child's split; needs the cell
            # joining the left child with the right child's left part
            alt = node.right.split
            extra_span = (node.i, alt)
            e_h = max(hl, heights[(node.right.left.i, node.right.left.j)]) + 1
            _add_extra(extra_step, steps, extra_span, node.split, e_h)
            if extra_step[extra_span][0] < h:
                splits.append(alt)
        elif hl > hr and not node.left.is_leaf \
                and alt_allowed(node.left.split, node.i, node.j):
            alt = node.left.split
            extra_span = (alt + 1, node.j)
            e_h = max(heights[(node.left.right.i, node.left.right.j)], hr) + 1
            _add_extra(extra_step, steps, extra_span, node.split, e_h)
            if extra_step[extra_span][0] < h:
                splits.append(alt)
        steps[h - 1].append(EncodeCell((node.i, node.j), sorted(splits)))

    visit(tree)
    return MergeSchedule(n, batches, steps, tree)


def _add_extra(extra_step, steps, span, split_k, e_h) -> None:
    if span in extra_step:
        return
    cell = EncodeCell(span, [split_k])
    extra_step[span] = (e_h, cell)
    steps[e_h - 1].append(cell)


def full_merge_schedule(n: int, atomic_spans=()) -> MergeSchedule:
    """Unpruned schedule: every span, every non-violating split, by width.

    Without atomic spans the per-level index arrays are built in closed
    form, so constructing and consuming the cubic schedule never loops over
    individual (cell, split) pairs in Python.
    """
    if atomic_spans:
        return _full_schedule_constrained(n, atomic_spans)
    steps: list[list[EncodeCell]] = []
    fast: list[FastLevel] = []
    # relative row of span (i, j): leaves 0..n-1, then widths in order
    width_base = np.zeros(n + 2, dtype=np.intp)
    width_base[1] = 0
    for w in range(2, n + 2):
        width_base[w] = width_base[w - 1] + (n - (w - 1) + 1)

    def rel_row(i, w):
        return width_base[w] + i - 1

    for w in range(2, n + 1):
        c = n - w + 1
        i_grid = np.arange(1, c + 1)[:, None]            # (C, 1)
        off = np.arange(w - 1)[None, :]                  # (1, w-1)
        k_grid = i_grid + off                            # split points
        lw = off + 1                                     # left width
        rw = w - 1 - off                                 # right width
        lrel = width_base[lw] + i_grid - 1
        rrel = width_base[rw] + k_grid + 1 - 1
        fast.append(FastLevel(
            spans=np.stack([i_grid[:, 0], i_grid[:, 0] + w - 1], axis=1),
            seg=np.repeat(np.arange(c), w - 1),
            splits=k_grid.ravel(),
            lrel=lrel.ravel(),
            rrel=rrel.ravel(),
            counts=np.full(c, w - 1, dtype=np.intp)))
        steps.append([EncodeCell((i, i + w - 1), range(i, i + w - 1))
                      for i in range(1, c + 1)])
    # a full chart has no pruning tree; batches mirror the width levels
    return MergeSchedule(n, [[] for _ in steps], steps, None, fast)


def _full_schedule_constrained(n: int, atomic_spans) -> MergeSchedule:
    interior = _interior_boundaries(atomic_spans)
    cover = {}
    for a, b in atomic_spans:
        for k in range(a, b):
            cover[k] = (a, b)
    steps: list[list[EncodeCell]] = []
    for w in range(2, n + 1):
        step = []
        for i in range(1, n - w + 2):
            j = i + w - 1
            splits = []
            for k in range(i, j):
                if k in interior:
                    a, b = cover[k]
                    if not (a <= i and j <= b):
                        continue
                splits.append(k)
            if not splits:
                raise ScheduleError(
                    f"span ({i},{j}) has no valid splits under atomic spans")
            step.append(EncodeCell((i, j), splits))
        steps.append(step)
    return MergeSchedule(n, [[] for _ in steps], steps, None)


# ---------------------------------------------------------------------------
# Chart construction
# ---------------------------------------------------------------------------

@dataclass
class CellRec:
    span: tuple[int, int]
    row: int
    splits: list[int]
    level: int
    pair_start: int  # offset into the level's pair arrays
    parents: list[tuple[tuple[int, int], int, str]] = field(default_factory=list)
    # entries: (parent span, sibling row, sibling side)


@dataclass
class _LevelMeta:
    cell_rows: np.ndarray   # (C,) storage row per encoded cell
    seg: np.ndarray         # (P,) pair -> local cell index
    splits: np.ndarray      # (P,) split point of each pair
    sents: np.ndarray       # (C,) sentence of each cell


class Chart:
    """Inside (and optionally outside) chart over a batch of sentences."""

    def __init__(self, fns: CompositionModel, lengths: list[int],
                 schedules: list[MergeSchedule]):
        self.fns = fns
        self.lengths = lengths
        self.schedules = schedules
        self.leaf_offset: list[int] = []
        off = 0
        for n in lengths:
            self.leaf_offset.append(off)
            off += n
        self.num_leaves = off
        self.cells: list[dict[tuple[int, int], CellRec]] = [dict() for _ in lengths]
        for s, n in enumerate(lengths):
            for i in range(1, n + 1):
                self.cells[s][(i, i)] = CellRec((i, i), self.leaf_offset[s] + i - 1,
                                                [], -1, -1)
        self.storage: Optional[Tensor] = None       # (N, d) inside vectors
        self.heights: Optional[Tensor] = None       # (N,)
        self.level_scores: list[Tensor] = []        # per level (P,)
        self.level_meta: list[_LevelMeta] = []
        self.outside: Optional[Tensor] = None       # (N, d), filled by build_outside
        self.outside_scores: list[Tensor] = []

    # -- lookups -----------------------------------------------------------
    def cell(self, sent: int, span) -> CellRec:
        try:
            return self.cells[sent][tuple(span)]
        except KeyError:
            raise KeyError(f"span {span} not materialized in sentence {sent}") from None

    def inside_vec(self, sent: int, span) -> np.ndarray:
        return self.storage.data[self.cell(sent, span).row]

    def outside_vec(self, sent: int, span) -> np.ndarray:
        if self.outside is None:
            raise ValueError("outside pass has not run")
        return self.outside.data[self.cell(sent, span).row]

    def split_scores(self, sent: int, span) -> np.ndarray:
        """Compatibility scores over the cell's splits, in split order."""
        rec = self.cell(sent, span)
        if rec.level < 0:
            return np.zeros((0,))
        sc = self.level_scores[rec.level].data
        return sc[rec.pair_start:rec.pair_start + len(rec.splits)]

    def weighted_height(self, sent: int, span=None) -> float:
        if span is None:
            span = (1, self.lengths[sent])
        return float(self.heights.data[self.cell(sent, span).row])

    def root_height(self, sent: int) -> Tensor:
        rec = self.cell(sent, (1, self.lengths[sent]))
        return T.gather_rows(self.heights, np.array([rec.row]))

    def leaf_rows(self, sent: int) -> np.ndarray:
        off = self.leaf_offset[sent]
        return np.arange(off, off + self.lengths[sent])

    def materialized_count(self, sent: int) -> int:
        return len(self.cells[sent])


def build_inside(fns: CompositionModel, leaf_vecs: Tensor, lengths: Sequence[int],
                 schedules: Sequence[MergeSchedule],
                 barrier_label: Optional[str] = None) -> Chart:
    """Encode all scheduled cells bottom-up, one vectorized pass per step.

    ``leaf_vecs``: (total_tokens, width) chart-width token vectors laid out
    sentence after sentence.  When ``barrier_label`` is set, the normalized
    split weights pass through a selective barrier blocking that loss root.
    """
    lengths = list(lengths)
    schedules = list(schedules)
    if len(lengths) != len(schedules):
        raise ScheduleError("lengths / schedules count mismatch")
    for n, sch in zip(lengths, schedules):
        if sch.n != n:
            raise ScheduleError(f"schedule for n={sch.n} used with sentence n={n}")
    chart = Chart(fns, lengths, schedules)
    if leaf_vecs.shape[0] != chart.num_leaves:
        raise T.ShapeError(
            f"leaf rows {leaf_vecs.shape[0]} != total tokens {chart.num_leaves}")

    dt = leaf_vecs.dtype
    chart.storage = leaf_vecs
    chart.heights = Tensor(np.zeros(chart.num_leaves, dtype=dt))
    # absolute storage rows per sentence in construction order, so fast
    # schedules can translate their relative indices without lookups
    abs_rows = [list(chart.leaf_rows(s)) for s in range(len(lengths))]

    max_steps = max((len(s.steps) for s in schedules), default=0)
    next_row = chart.num_leaves
    for level in range(max_steps):
        cell_rows: list[int] = []
        cell_sents: list[int] = []
        seg_parts: list[np.ndarray] = []
        lrow_parts: list[np.ndarray] = []
        rrow_parts: list[np.ndarray] = []
        ks_parts: list[np.ndarray] = []
        pair_base = 0
        for s, sch in enumerate(schedules):
            if level >= len(sch.steps):
                continue
            fast = sch.fast_levels[level] if sch.fast_levels is not None else None
            if fast is not None:
                amap = np.asarray(abs_rows[s], dtype=np.intp)
                lrow_parts.append(amap[fast.lrel])
                rrow_parts.append(amap[fast.rrel])
                seg_parts.append(fast.seg + len(cell_rows))
                ks_parts.append(fast.splits)
                offsets = np.concatenate([[0], np.cumsum(fast.counts[:-1])])
                for (i, j), off in zip(fast.spans, offsets):
                    span = (int(i), int(j))
                    rec = CellRec(span, next_row, range(int(i), int(j)), level,
                                  pair_start=pair_base + int(off))
                    chart.cells[s][span] = rec
                    cell_rows.append(next_row)
                    cell_sents.append(s)
                    abs_rows[s].append(next_row)
                    next_row += 1
                pair_base += fast.splits.shape[0]
                continue
            seg: list[int] = []
            ks: list[int] = []
            lrow: list[int] = []
            rrow: list[int] = []
            for ec in sch.steps[level]:
                i, j = ec.span
                rec = CellRec(ec.span, next_row, list(ec.splits), level,
                              pair_start=pair_base + len(ks))
                local = len(cell_rows)
                for k in ec.splits:
                    left = chart.cells[s].get((i, k))
                    right = chart.cells[s].get((k + 1, j))
                    if left is None or right is None:
                        raise ScheduleError(
                            f"split {k} of span {ec.span} references a cell "
                            f"missing at step {level} (sentence {s})")
                    seg.append(local)
                    ks.append(k)
                    lrow.append(left.row)
                    rrow.append(right.row)
                chart.cells[s][ec.span] = rec
                cell_rows.append(next_row)
                cell_sents.append(s)
                abs_rows[s].append(next_row)
                next_row += 1
            seg_parts.append(np.asarray(seg, dtype=np.intp))
            ks_parts.append(np.asarray(ks, dtype=np.intp))
            lrow_parts.append(np.asarray(lrow, dtype=np.intp))
            rrow_parts.append(np.asarray(rrow, dtype=np.intp))
            pair_base += len(ks)
        if not cell_rows:
            chart.level_scores.append(Tensor(np.zeros(0, dtype=dt)))
            chart.level_meta.append(_LevelMeta(np.zeros(0, np.intp), np.zeros(0, np.intp),
                                               np.zeros(0, np.intp), np.zeros(0, np.intp)))
            continue

        seg_a = np.concatenate(seg_parts) if seg_parts else np.zeros(0, np.intp)
        lrow_a = np.concatenate(lrow_parts) if lrow_parts else np.zeros(0, np.intp)
        rrow_a = np.concatenate(rrow_parts) if rrow_parts else np.zeros(0, np.intp)
        ks_a = np.concatenate(ks_parts) if ks_parts else np.zeros(0, np.intp)
        n_cells = len(cell_rows)

        lvec = T.gather_rows(chart.storage, lrow_a)
        rvec = T.gather_rows(chart.storage, rrow_a)
        pair_vec = fns.compose(lvec, rvec)                     # (P, d)
        scores = fns.score_alpha(lvec, rvec)                    # (P,)

        w = _segment_softmax(scores, seg_a, n_cells)
        if barrier_label is not None:
            w = T.selective_barrier(w, barrier_label)

        mixed = T.segment_sum(T.mul(pair_vec, T.reshape(w, (-1, 1))), seg_a, n_cells)
        hl = T.gather_rows(chart.heights, lrow_a)
        hr = T.gather_rows(chart.heights, rrow_a)
        hpair = T.add(T.maximum(hl, hr), Tensor(np.ones((), dtype=dt)))
        hmix = T.segment_sum(T.mul(w, hpair), seg_a, n_cells)

        chart.storage = T.concat([chart.storage, mixed], axis=0)
        chart.heights = T.concat([chart.heights, hmix], axis=0)
        chart.level_scores.append(scores)
        chart.level_meta.append(_LevelMeta(np.asarray(cell_rows, np.intp), seg_a,
                                           ks_a,
                                           np.asarray(cell_sents, np.intp)))
    return chart


def _segment_softmax(scores: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
    """Softmax over variable-size contiguous segments of a flat score vector."""
    smax = np.full(num_segments, -np.inf, dtype=scores.dtype)
    np.maximum.at(smax, seg, scores.data)
    shifted = T.sub(scores, Tensor(smax[seg]))
    e = T.exp(shifted)
    denom = T.segment_sum(e, seg, num_segments)
    return T.div(e, T.gather_rows(denom, seg))


def build_outside(chart: Chart) -> Tensor:
    """Top-down decomposition pass; fills chart.outside and returns it.

    The root cell of every sentence gets the learned root outside vector;
    every other materialized cell mixes decompositions over its parent set.
    A non-root cell without parents means the schedule is inconsistent.
    """
    fns = chart.fns
    dt = chart.storage.dtype
    d = fns.cfg.width
    total_rows = chart.storage.shape[0]

    # resolve parents from the split sets
    parents: dict[tuple[int, tuple[int, int]], list[tuple[int, int, str]]] = {}
    levels: dict[tuple[int, tuple[int, int]], int] = {}
    for s, _ in enumerate(chart.lengths):
        for span, rec in chart.cells[s].items():
            levels[(s, span)] = rec.level
            i, j = span
            for k in rec.splits:
                left = chart.cells[s][(i, k)]
                right = chart.cells[s][(k + 1, j)]
                parents.setdefault((s, (i, k)), []).append((rec.row, right.row, "right"))
                parents.setdefault((s, (k + 1, j)), []).append((rec.row, left.row, "left"))

    root_rows = []
    for s, n in enumerate(chart.lengths):
        root_rows.append(chart.cells[s][(1, n)].row)
        for span, rec in chart.cells[s].items():
            if span != (1, n) and (s, span) not in parents:
                raise ScheduleError(
                    f"cell {span} (sentence {s}) has no parents; "
                    "schedule is inconsistent")

    root_vals = T.gather_rows(T.reshape(fns.root_outside, (1, d)),
                              np.zeros(len(root_rows), dtype=np.intp))
    outside = T.scatter_rows(root_vals, np.asarray(root_rows, np.intp), total_rows)

    # process cells by decreasing encode level; parents always come later
    # in encode order, so their outside vectors exist before the children's
    max_level = len(chart.level_scores)
    by_level: dict[int, list[tuple[int, tuple[int, int]]]] = {}
    for (s, span), lv in levels.items():
        n = chart.lengths[s]
        if span == (1, n):
            continue
        by_level.setdefault(lv, []).append((s, span))

    for lv in range(max_level - 1, -2, -1):
        entries = by_level.get(lv)
        if not entries:
            chart.outside_scores.append(Tensor(np.zeros(0, dtype=dt)))
            continue
        rows: list[int] = []
        seg: list[int] = []
        prow: list[int] = []
        sibrow: list[int] = []
        sides: list[str] = []
        for local, (s, span) in enumerate(entries):
            rec = chart.cells[s][span]
            plist = parents[(s, span)]
            for parent_row, sib_row, side in plist:
                seg.append(local)
                prow.append(parent_row)
                sibrow.append(sib_row)
                sides.append(side)
            rows.append(rec.row)
        seg_a = np.asarray(seg, np.intp)
        prow_a = np.asarray(prow, np.intp)
        sibrow_a = np.asarray(sibrow, np.intp)
        side_a = np.asarray([sd == "right" for sd in sides], dtype=bool)

        pvec = T.gather_rows(outside, prow_a)
        svec = T.gather_rows(chart.storage, sibrow_a)
        o_pair, b_scores = _decompose_pairs(fns, pvec, svec, side_a)
        wv = _segment_softmax(b_scores, seg_a, len(entries))
        o_new = T.segment_sum(T.mul(o_pair, T.reshape(wv, (-1, 1))), seg_a, len(entries))
        outside = T.add(outside, T.scatter_rows(o_new, np.asarray(rows, np.intp),
                                                total_rows))
        chart.outside_scores.append(b_scores)

    chart.outside = outside
    return outside


def _decompose_pairs(fns: CompositionModel, pvec: Tensor, svec: Tensor,
                     side_is_right: np.ndarray):
    """Run f_beta / phi_beta on mixed-side pair batches, preserving order."""
    idx_r = np.nonzero(side_is_right)[0]
    idx_l = np.nonzero(~side_is_right)[0]
    parts_o = []
    parts_b = []
    order = []
    if idx_r.size:
        pr = T.gather_rows(pvec, idx_r)
        sr = T.gather_rows(svec, idx_r)
        parts_o.append(fns.decompose(pr, sr, "right"))
        parts_b.append(fns.score_beta(pr, sr, "right"))
        order.append(idx_r)
    if idx_l.size:
        pl = T.gather_rows(pvec, idx_l)
        sl = T.gather_rows(svec, idx_l)
        parts_o.append(fns.decompose(pl, sl, "left"))
        parts_b.append(fns.score_beta(pl, sl, "left"))
        order.append(idx_l)
    o_cat = T.concat(parts_o, axis=0) if len(parts_o) > 1 else parts_o[0]
    b_cat = T.concat(parts_b, axis=0) if len(parts_b) > 1 else parts_b[0]
    perm = np.concatenate(order)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return T.gather_rows(o_cat, inv), T.gather_rows(b_cat, inv)


def inside_full(fns: CompositionModel, leaf_vecs: Tensor, atomic_spans=(),
                barrier_label: Optional[str] = None) -> Chart:
    """Cubic reference chart over one sentence: every span, every split."""
    n = leaf_vecs.shape[0]
    return build_inside(fns, leaf_vecs, [n],
                        [full_merge_schedule(n, atomic_spans)],
                        barrier_label=barrier_label)


def inside_pruned(fns: CompositionModel, leaf_vecs: Tensor,
                  schedule: MergeSchedule,
                  barrier_label: Optional[str] = None) -> Chart:
    """Pruned chart over one sentence following a merge schedule."""
    return build_inside(fns, leaf_vecs, [leaf_vecs.shape[0]], [schedule],
                        barrier_label=barrier_label)


# ---------------------------------------------------------------------------
# Tree induction
# ---------------------------------------------------------------------------

def induce_tree(chart: Chart, sent: int = 0) -> TreeNode:
    """Recursive argmax of the split compatibility scores from the root.

    Ties break to the smallest split point.  Only materialized splits are
    considered, so the result never violates the schedule (and therefore
    never splits an atomic span).
    """
    n = chart.lengths[sent]

    def walk(i: int, j: int) -> TreeNode:
        if i == j:
            return leaf(i)
        rec = chart.cell(sent, (i, j))
        scores = chart.split_scores(sent, (i, j))
        k = rec.splits[int(np.argmax(scores))]
        return branch(walk(i, k), walk(k + 1, j))

    return walk(1, n)
