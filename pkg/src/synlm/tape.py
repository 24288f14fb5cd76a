"""Dense-array reverse-mode autodiff on numpy.

A ``Tape`` records every primitive operation executed while it is active.
``Tape.backward`` walks the record once per declared loss root, so a single
forward graph can receive several independent backward passes whose
gradients accumulate into the leaves.  ``selective_barrier`` nodes pass the
forward value through unchanged but transmit zero gradient on backward
passes whose root label matches their blocked label, which is how one loss
can be kept away from selected upstream nodes without duplicating the
graph.

Constraints the implementation maintains:
  * forward values are never mutated by backward;
  * node order on the tape is a topological order by construction;
  * all ops are vectorized; nothing here loops over array elements;
  * under ``no_grad`` ops do not build closures or touch the tape.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "no_grad",
    "set_default_dtype",
    "default_dtype",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "gather_rows",
    "scatter_rows",
    "segment_sum",
    "sum_",
    "mean_",
    "maximum",
    "log",
    "exp",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "cross_entropy",
    "attention",
    "embedding",
    "stop_gradient",
    "selective_barrier",
]

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dt) -> None:
    """Set the dtype used for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dt).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype {dt}")
    _DEFAULT_DTYPE = dt


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    """Raised when an op receives incompatibly shaped inputs."""


class Tensor:
    """A numpy array plus grad bookkeeping.

    ``grad`` is populated only for tensors with ``requires_grad`` or
    ``retain_grad`` set, and accumulates across backward passes until
    ``zero_grad`` is called.
    """

    __slots__ = ("data", "requires_grad", "retain_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.retain_grad = False
        self.grad: Optional[np.ndarray] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, c):
        return power(self, c)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

_GATE_NONE = 0
_GATE_STOP = 1
_GATE_BARRIER = 2


class _Node:
    __slots__ = ("out_id", "vjp", "gate", "blocked")

    def __init__(self, out_id, vjp, gate=_GATE_NONE, blocked=None):
        self.out_id = out_id
        self.vjp = vjp
        self.gate = gate
        self.blocked = blocked


class Tape:
    """Append-only operation record, one per forward graph.

    Use as a context manager around forward computation, then call
    ``backward`` once per loss root.  Gradients of leaves accumulate into
    ``Tensor.grad`` across passes.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._ids: dict[int, int] = {}
        self._tensors: list[Tensor] = []
        self._prev_active: Optional[Tape] = None

    def __len__(self) -> int:
        return len(self.nodes)

    # -- context management ---------------------------------------------
    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev_active = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev_active
        self._prev_active = None
        return False

    # -- registration ----------------------------------------------------
    def tensor_id(self, t: Tensor) -> int:
        tid = self._ids.get(id(t))
        if tid is None:
            tid = len(self._tensors)
            self._ids[id(t)] = tid
            self._tensors.append(t)
        return tid

    def record(self, out: Tensor, vjp: Callable,
               gate: int = _GATE_NONE, blocked: Optional[str] = None) -> None:
        self.nodes.append(_Node(self.tensor_id(out), vjp, gate, blocked))

    # -- backward ----------------------------------------------------------
    def backward(self, root: Tensor, root_label: Optional[str] = None) -> None:
        """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

        ``root_label`` names the loss this pass belongs to; barrier nodes
        whose blocked label matches it transmit zero.  Encountering a
        barrier on an unlabeled pass is an error.
        """
        root_id = self._ids.get(id(root))
        if root_id is None:
            raise ValueError("backward root was not computed on this tape")
        if root.data.size != 1:
            raise ValueError("backward root must be a scalar")
        if not np.isfinite(root.data).all():
            raise FloatingPointError("backward root is not finite")
        grads: list[Optional[np.ndarray]] = [None] * len(self._tensors)
        grads[root_id] = np.ones_like(root.data)
        for node in reversed(self.nodes):
            g = grads[node.out_id]
            if g is None:
                continue
            if node.gate == _GATE_STOP:
                continue
            if node.gate == _GATE_BARRIER:
                if root_label is None:
                    raise ValueError(
                        "selective_barrier encountered on a backward pass "
                        "without a root label")
                if root_label == node.blocked:
                    continue
            for in_id, pg in node.vjp(g):
                if grads[in_id] is None:
                    grads[in_id] = pg
                else:
                    grads[in_id] = grads[in_id] + pg
        for tid, t in enumerate(self._tensors):
            if (t.requires_grad or t.retain_grad) and grads[tid] is not None:
                if t.grad is None:
                    t.grad = grads[tid].astype(t.data.dtype, copy=True)
                else:
                    t.grad = t.grad + grads[tid].astype(t.data.dtype, copy=False)


_ACTIVE_TAPE: Optional[Tape] = None
_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape recording (forward-only mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _recording() -> Optional[Tape]:
    return _ACTIVE_TAPE if _GRAD_ENABLED else None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    tape = _recording()
    if tape is not None:
        ia, ib = tape.tensor_id(a), tape.tensor_id(b)
        sa, sb = a.data.shape, b.data.shape
        tape.record(out, lambda g: ((ia, _unbroadcast(g, sa)),
                                    (ib, _unbroadcast(g, sb))))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    tape = _recording()
    if tape is not None:
        ia, ib = tape.tensor_id(a), tape.tensor_id(b)
        sa, sb = a.data.shape, b.data.shape
        tape.record(out, lambda g: ((ia, _unbroadcast(g, sa)),
                                    (ib, _unbroadcast(-g, sb))))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    tape = _recording()
    if tape is not None:
        ia, ib = tape.tensor_id(a), tape.tensor_id(b)
        ad, bd = a.data, b.data
        tape.record(out, lambda g: ((ia, _unbroadcast(g * bd, ad.shape)),
                                    (ib, _unbroadcast(g * ad, bd.shape))))
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    tape = _recording()
    if tape is not None:
        ia, ib = tape.tensor_id(a), tape.tensor_id(b)
        ad, bd = a.data, b.data
        tape.record(out, lambda g: ((ia, _unbroadcast(g / bd, ad.shape)),
                                    (ib, _unbroadcast(-g * ad / (bd * bd), bd.shape))))
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        tape.record(out, lambda g: ((ia, -g),))
    return out


def power(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data ** c)
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        ad = a.data
        tape.record(out, lambda g: ((ia, g * c * ad ** (c - 1)),))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    k_a = a.data.shape[-1]
    k_b = b.data.shape[-2] if b.data.ndim > 1 else b.data.shape[0]
    if k_a != k_b:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)
    tape = _recording()
    if tape is not None:
        ia, ib = tape.tensor_id(a), tape.tensor_id(b)
        ad, bd = a.data, b.data

        def vjp(g):
            if bd.ndim == 1:
                if ad.ndim == 1:
                    return ((ia, g * bd), (ib, g * ad))
                ga = g[..., None] * bd
                gb = _unbroadcast(g[..., None] * ad, bd.shape)
                return ((ia, ga), (ib, gb))
            if ad.ndim == 1:
                ga = _unbroadcast(g[..., None, :] @ np.swapaxes(bd, -1, -2), (1, ad.shape[0]))[0]
                gb = _unbroadcast(ad[:, None] * g[..., None, :], bd.shape)
                return ((ia, ga), (ib, gb))
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            if bd.ndim == 2 and ad.ndim > 2:
                # dense-layer weight: contract the batch dims directly
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
            return ((ia, ga), (ib, gb))

        tape.record(out, vjp)
    return out


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        orig = a.data.shape
        tape.record(out, lambda g: ((ia, g.reshape(orig)),))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        inv = np.argsort(axes)
        tape.record(out, lambda g: ((ia, np.transpose(g, inv)),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    tape = _recording()
    if tape is not None:
        ids = [tape.tensor_id(t) for t in tensors]
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            parts = []
            for tid, lo, hi in zip(ids, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                parts.append((tid, g[tuple(idx)]))
            return parts

        tape.record(out, vjp)
    return out


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx])
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        shape = a.data.shape

        def vjp(g):
            ga = np.zeros(shape, dtype=g.dtype)
            np.add.at(ga, idx, g)
            return ((ia, ga),)

        tape.record(out, vjp)
    return out


def scatter_rows(a: Tensor, idx, num_rows: int) -> Tensor:
    """Place rows of ``a`` at positions ``idx`` of a zero array (idx unique)."""
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((num_rows,) + a.data.shape[1:], dtype=a.data.dtype)
    data[idx] = a.data
    out = Tensor(data)
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        tape.record(out, lambda g: ((ia, g[idx]),))
    return out


def segment_sum(a: Tensor, seg_ids, num_segments: int) -> Tensor:
    """out[s] = sum of rows of ``a`` whose segment id is ``s``."""
    seg = np.asarray(seg_ids, dtype=np.intp)
    data = np.zeros((num_segments,) + a.data.shape[1:], dtype=a.data.dtype)
    np.add.at(data, seg, a.data)
    out = Tensor(data)
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        tape.record(out, lambda g: ((ia, g[seg]),))
    return out


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table (alias of gather_rows)."""
    return gather_rows(weight, ids)


# ---------------------------------------------------------------------------
# Reductions and elementwise nonlinearities
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        shape = a.data.shape

        def vjp(g):
            if axis is None:
                return ((ia, np.broadcast_to(g, shape)),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return ((ia, np.broadcast_to(gg, shape)),)

        tape.record(out, vjp)
    return out


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, Tensor(np.asarray(1.0 / n, dtype=a.data.dtype)))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    out = Tensor(np.maximum(a.data, b.data))
    tape = _recording()
    if tape is not None:
        ia, ib = tape.tensor_id(a), tape.tensor_id(b)
        take_a = a.data >= b.data
        sa, sb = a.data.shape, b.data.shape
        tape.record(out, lambda g: ((ia, _unbroadcast(g * take_a, sa)),
                                    (ib, _unbroadcast(g * ~take_a, sb))))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        ad = a.data
        tape.record(out, lambda g: ((ia, g / ad),))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        od = out.data
        tape.record(out, lambda g: ((ia, g * od),))
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        pos = a.data > 0
        tape.record(out, lambda g: ((ia, g * pos),))
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)

        def vjp(g):
            sech2 = 1.0 - t * t
            d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            return ((ia, g * d),)

        tape.record(out, vjp)
    return out


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; ``mask`` (bool, broadcastable) marks valid slots.

    A fully masked slice is an error: there is nothing to normalize over.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ShapeError("softmax: fully masked axis")
        neg = -1e9 if x.dtype == np.float32 else -1e30
        x = x + np.where(mask, 0.0, neg).astype(x.dtype)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        sd = out.data

        def vjp(g):
            dot = (g * sd).sum(axis=axis, keepdims=True)
            return ((ia, sd * (g - dot)),)

        tape.record(out, vjp)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = Tensor(x - lse)
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        sd = np.exp(out.data)
        tape.record(out, lambda g: ((ia, g - sd * g.sum(axis=axis, keepdims=True)),))
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood of ``targets`` under ``logits``.

    logits: (N, V); targets: int array (N,).  Returns (N,).
    """
    t = np.asarray(targets, dtype=np.intp)
    x = logits.data
    if x.ndim != 2 or t.shape != (x.shape[0],):
        raise ShapeError(f"cross_entropy: logits {x.shape}, targets {t.shape}")
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    out = Tensor(lse - x[np.arange(x.shape[0]), t])
    tape = _recording()
    if tape is not None:
        il = tape.tensor_id(logits)
        probs = np.exp(x - lse[:, None])

        def vjp(g):
            gl = probs * g[:, None]
            gl[np.arange(x.shape[0]), t] -= g
            return ((il, gl),)

        tape.record(out, vjp)
    return out


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    if gamma.data.shape != x.shape[-1:] or beta.data.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: x {x.shape}, gamma {gamma.data.shape}, beta {beta.data.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y * gamma.data + beta.data)
    tape = _recording()
    if tape is not None:
        ia, ig, ib = tape.tensor_id(a), tape.tensor_id(gamma), tape.tensor_id(beta)
        gd = gamma.data

        def vjp(g):
            dy = g * gd
            dmean = dy.mean(axis=-1, keepdims=True)
            dproj = (dy * y).mean(axis=-1, keepdims=True)
            dx = (dy - dmean - y * dproj) * inv
            axes = tuple(range(g.ndim - 1))
            return ((ia, dx), (ig, (g * y).sum(axis=axes)), (ib, g.sum(axis=axes)))

        tape.record(out, vjp)
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention with additive large-negative masking.

    q, k, v: (..., T, D) with matching leading dims; mask broadcastable to
    (..., Tq, Tk), True where attention is allowed.  A fully masked query
    row is an error.
    """
    if q.data.shape[-1] != k.data.shape[-1] or k.data.shape[:-1] != v.data.shape[:-1]:
        raise ShapeError(
            f"attention: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}")
    scale = 1.0 / math.sqrt(q.data.shape[-1])
    logits = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.broadcast_to(mask, logits.shape).any(axis=-1).all():
            raise ShapeError("attention: fully masked query row")
        neg = -1e9 if logits.dtype == np.float32 else -1e30
        logits = logits + np.where(mask, 0.0, neg).astype(logits.dtype)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    w = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(w @ v.data)
    tape = _recording()
    if tape is not None:
        iq, ik, iv = tape.tensor_id(q), tape.tensor_id(k), tape.tensor_id(v)
        qd, kd, vd = q.data, k.data, v.data

        def vjp(g):
            gw = g @ np.swapaxes(vd, -1, -2)
            gv = np.swapaxes(w, -1, -2) @ g
            gl = w * (gw - (gw * w).sum(axis=-1, keepdims=True))
            gq = (gl @ kd) * scale
            gk = (np.swapaxes(gl, -1, -2) @ qd) * scale
            return ((iq, _unbroadcast(gq, qd.shape)),
                    (ik, _unbroadcast(gk, kd.shape)),
                    (iv, _unbroadcast(gv, vd.shape)))

        tape.record(out, vjp)
    return out


# ---------------------------------------------------------------------------
# Gradient gates
# ---------------------------------------------------------------------------

def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity; transmits zero gradient."""
    out = Tensor(a.data)
    tape = _recording()
    if tape is not None:
        tape.tensor_id(a)
        tape.record(out, lambda g: (), gate=_GATE_STOP)
    return out


def selective_barrier(a: Tensor, blocked_root: str) -> Tensor:
    """Forward identity; zero gradient on backward passes rooted at
    ``blocked_root``, identity gradient on every other labeled pass."""
    out = Tensor(a.data)
    tape = _recording()
    if tape is not None:
        ia = tape.tensor_id(a)
        tape.record(out, lambda g: ((ia, g),), gate=_GATE_BARRIER,
                    blocked=blocked_root)
    return out
