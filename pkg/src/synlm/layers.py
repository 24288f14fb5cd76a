"""Small neural building blocks on top of the tape ops.

Layers register their parameters in a ParamStore under a dotted prefix at
construction time, so the same store can be checkpointed flat.  Forward
methods take and return Tensors and are pure given the parameters.
"""

from __future__ import annotations

import numpy as np

from . import tape as T
from .optim import ParamStore
from .tape import Tensor

__all__ = ["Linear", "LayerNormLayer", "FeedForward", "SelfAttention",
           "TransformerBlock", "TransformerEncoder", "causal_mask"]


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 bias: bool = True):
        self.w = store.param(f"{name}.w", (d_in, d_out), init="xavier")
        self.b = store.param(f"{name}.b", (d_out,), init="zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = T.add(y, self.b)
        return y


class LayerNormLayer:
    def __init__(self, store: ParamStore, name: str, d: int, eps: float = 1e-5):
        self.gamma = store.param(f"{name}.gamma", (d,), init="ones")
        self.beta = store.param(f"{name}.beta", (d,), init="zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward:
    def __init__(self, store: ParamStore, name: str, d: int, d_hidden: int):
        self.fc1 = Linear(store, f"{name}.fc1", d, d_hidden)
        self.fc2 = Linear(store, f"{name}.fc2", d_hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class SelfAttention:
    """Multi-head self-attention over (..., T, d) inputs."""

    def __init__(self, store: ParamStore, name: str, d: int, heads: int):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.wq = Linear(store, f"{name}.wq", d, d)
        self.wk = Linear(store, f"{name}.wk", d, d)
        self.wv = Linear(store, f"{name}.wv", d, d)
        self.wo = Linear(store, f"{name}.wo", d, d)

    def _split(self, x: Tensor, batch_shape) -> Tensor:
        t = x.shape[-2]
        x = T.reshape(x, batch_shape + (t, self.heads, self.head_dim))
        axes = tuple(range(len(batch_shape))) + (
            len(batch_shape) + 1, len(batch_shape), len(batch_shape) + 2)
        return T.transpose(x, axes)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        batch_shape = x.shape[:-2]
        t = x.shape[-2]
        q = self._split(self.wq(x), batch_shape)
        k = self._split(self.wk(x), batch_shape)
        v = self._split(self.wv(x), batch_shape)
        if mask is not None and mask.ndim == len(batch_shape) + 2:
            mask = np.expand_dims(mask, axis=len(batch_shape))
        o = T.attention(q, k, v, mask=mask)
        axes = tuple(range(len(batch_shape))) + (
            len(batch_shape) + 1, len(batch_shape), len(batch_shape) + 2)
        o = T.transpose(o, axes)
        o = T.reshape(o, batch_shape + (t, self.d))
        return self.wo(o)

    def step(self, x: Tensor, k_cache: Tensor, v_cache: Tensor):
        """Incremental decode: x (B, 1, d) against cached keys/values.

        k_cache/v_cache: (B, heads, T_prev, head_dim) or None.  Returns
        (out (B, 1, d), new_k, new_v) with the new position appended.
        """
        b = x.shape[0]
        q = self._split(self.wq(x), (b,))
        k_new = self._split(self.wk(x), (b,))
        v_new = self._split(self.wv(x), (b,))
        k = k_new if k_cache is None else T.concat([k_cache, k_new], axis=2)
        v = v_new if v_cache is None else T.concat([v_cache, v_new], axis=2)
        o = T.attention(q, k, v)
        o = T.transpose(o, (0, 2, 1, 3))
        o = T.reshape(o, (b, 1, self.d))
        return self.wo(o), k, v


class TransformerBlock:
    """Pre-norm block: x + attn(ln(x)); x + ffn(ln(x))."""

    def __init__(self, store: ParamStore, name: str, d: int, heads: int,
                 d_ffn: int):
        self.ln1 = LayerNormLayer(store, f"{name}.ln1", d)
        self.attn = SelfAttention(store, f"{name}.attn", d, heads)
        self.ln2 = LayerNormLayer(store, f"{name}.ln2", d)
        self.ffn = FeedForward(store, f"{name}.ffn", d, d_ffn)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), mask=mask))
        return T.add(x, self.ffn(self.ln2(x)))

    def step(self, x: Tensor, k_cache, v_cache):
        a, k, v = self.attn.step(self.ln1(x), k_cache, v_cache)
        x = T.add(x, a)
        x = T.add(x, self.ffn(self.ln2(x)))
        return x, k, v


class TransformerEncoder:
    """A stack of blocks, optionally capped with a final layer norm."""

    def __init__(self, store: ParamStore, name: str, d: int, layers: int,
                 heads: int, d_ffn: int, final_ln: bool = True):
        self.blocks = [TransformerBlock(store, f"{name}.block{i}", d, heads, d_ffn)
                       for i in range(layers)]
        self.ln_out = LayerNormLayer(store, f"{name}.ln_out", d) if final_ln else None

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        for blk in self.blocks:
            x = blk(x, mask=mask)
        return self.ln_out(x) if self.ln_out is not None else x

    def step(self, x: Tensor, caches):
        """caches: list of (k, v) per block, entries may be None."""
        new_caches = []
        for blk, kv in zip(self.blocks, caches):
            k_cache, v_cache = kv if kv is not None else (None, None)
            x, k, v = blk.step(x, k_cache, v_cache)
            new_caches.append((k, v))
        out = self.ln_out(x) if self.ln_out is not None else x
        return out, new_caches


def causal_mask(t: int) -> np.ndarray:
    """(t, t) lower-triangular boolean mask."""
    return np.tril(np.ones((t, t), dtype=bool))
