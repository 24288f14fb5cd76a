"""Parameter store, Adam, checkpoint format, and finite-difference checks."""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional

import numpy as np

from .tape import Tensor, default_dtype

__all__ = ["ParamStore", "AdamState", "adam_step", "grad_check",
           "save_checkpoint", "load_checkpoint", "CheckpointError",
           "CHECKPOINT_VERSION"]


class ParamStore:
    """Named trainable parameters plus their optimizer state.

    Names are hierarchical dotted paths and must be unique.  Every stored
    tensor has ``requires_grad`` set.  Layer constructors call ``param`` to
    register their weights; the store owns initialization randomness.
    """

    def __init__(self, seed: int = 0):
        self.params: dict[str, Tensor] = {}
        self.rng = np.random.default_rng(seed)
        self.adam: Optional["AdamState"] = None

    def param(self, name: str, shape, init: str = "normal", scale: float = 0.02) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        dt = default_dtype()
        if init == "normal":
            data = self.rng.normal(0.0, scale, size=shape).astype(dt)
        elif init == "zeros":
            data = np.zeros(shape, dtype=dt)
        elif init == "ones":
            data = np.ones(shape, dtype=dt)
        elif init == "xavier":
            fan_in, fan_out = shape[-2], shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-bound, bound, size=shape).astype(dt)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params.keys())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def global_grad_norm(self) -> float:
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.global_grad_norm()
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for t in self.params.values():
                if t.grad is not None:
                    t.grad = t.grad * scale
        return norm


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, store: ParamStore):
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.step_count = 0


def adam_step(store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One Adam update with bias correction over all accumulated gradients.

    Parameters with no gradient this step only have their moments decayed.
    If any gradient is non-finite the step is skipped entirely (moments and
    step count untouched) and the offending names are returned.
    """
    if store.adam is None:
        store.adam = AdamState(store)
    state = store.adam
    b1, b2 = betas

    bad = [n for n, t in store.items()
           if t.grad is not None and not np.isfinite(t.grad).all()]
    if bad:
        store.zero_grad()
        return bad

    state.step_count += 1
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for name, t in store.items():
        g = t.grad if t.grad is not None else 0.0
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grad()
    return []


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], store: ParamStore, eps: float = 1e-5,
               max_coords: int = 200, seed: int = 0,
               param_names: Optional[Iterable[str]] = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar loss graph from the store's current values and
    runs its own backward into ``Tensor.grad``.  The check samples at least
    ``max_coords`` coordinates across the selected parameters (all of them
    when fewer exist).  Requires 64-bit parameters for meaningful output.
    """
    if not (1e-6 <= eps <= 1e-4):
        raise ValueError(f"eps {eps} outside [1e-6, 1e-4]")
    store.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite loss")

    names = list(param_names) if param_names is not None else store.names()
    rng = np.random.default_rng(seed)
    coords = []
    for name in names:
        t = store[name]
        for flat in range(t.data.size):
            coords.append((name, flat))
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in pick]

    worst = 0.0
    for name, flat in coords:
        t = store[name]
        orig = t.data.flat[flat]
        t.data.flat[flat] = orig + eps
        with _silent_grads(store):
            up = float(f().data)
        t.data.flat[flat] = orig - eps
        with _silent_grads(store):
            down = float(f().data)
        t.data.flat[flat] = orig
        fd = (up - down) / (2 * eps)
        an = float(t.grad.flat[flat]) if t.grad is not None else 0.0
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-3)
        worst = max(worst, rel)
    return worst


class _silent_grads:
    """Snapshot and restore grads so FD re-evaluations do not pollute them."""

    def __init__(self, store: ParamStore):
        self.store = store

    def __enter__(self):
        self.saved = {n: t.grad for n, t in self.store.items()}
        return self

    def __exit__(self, exc_type, exc, tb):
        for n, t in self.store.items():
            t.grad = self.saved[n]
        return False


# ---------------------------------------------------------------------------
# Checkpoint format: flat records of (name, shape, dtype, little-endian raw
# values) with a leading magic + format version, optimizer state included.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SLMC"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                np.dtype(np.int64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(RuntimeError):
    pass


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_record(fh):
    head = fh.read(2)
    if not head:
        return None
    (nlen,) = struct.unpack("<H", head)
    name = fh.read(nlen).decode("utf-8")
    code, ndim = struct.unpack("<BB", fh.read(2))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
    dt = _CODE_DTYPES.get(code)
    if dt is None:
        raise CheckpointError(f"unknown dtype code {code} in record {name}")
    n = int(np.prod(shape)) if shape else 1
    raw = fh.read(n * dt.itemsize)
    arr = np.frombuffer(raw, dtype=dt.newbyteorder("<")).astype(dt).reshape(shape)
    return name, arr


def save_checkpoint(path, store: ParamStore, extra_scalars: Optional[dict] = None) -> None:
    """Write parameters plus Adam state to ``path``."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, t in store.items():
            _write_record(fh, f"param:{name}", t.data)
        if store.adam is not None:
            for name, arr in store.adam.m.items():
                _write_record(fh, f"adam.m:{name}", arr)
            for name, arr in store.adam.v.items():
                _write_record(fh, f"adam.v:{name}", arr)
            _write_record(fh, "adam.step", np.asarray(store.adam.step_count, dtype=np.int64))
        for key, val in (extra_scalars or {}).items():
            _write_record(fh, f"scalar:{key}", np.asarray(val, dtype=np.int64))


def load_checkpoint(path, store: ParamStore) -> dict:
    """Load a checkpoint into an already-constructed store.

    Shapes must match exactly.  Returns the extra scalar dict.
    """
    scalars: dict[str, int] = {}
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    adam_step_count = None
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        while True:
            rec = _read_record(fh)
            if rec is None:
                break
            name, arr = rec
            if name.startswith("param:"):
                pname = name[len("param:"):]
                if pname not in store.params:
                    raise CheckpointError(f"unexpected parameter {pname}")
                t = store[pname]
                if t.data.shape != arr.shape:
                    raise CheckpointError(
                        f"shape mismatch for {pname}: {t.data.shape} vs {arr.shape}")
                t.data = arr.astype(t.data.dtype)
            elif name.startswith("adam.m:"):
                adam_m[name[len("adam.m:"):]] = arr
            elif name.startswith("adam.v:"):
                adam_v[name[len("adam.v:"):]] = arr
            elif name == "adam.step":
                adam_step_count = int(arr)
            elif name.startswith("scalar:"):
                scalars[name[len("scalar:"):]] = int(arr)
    if adam_step_count is not None:
        store.adam = AdamState(store)
        store.adam.step_count = adam_step_count
        for n, arr in adam_m.items():
            store.adam.m[n] = arr.astype(store[n].data.dtype)
        for n, arr in adam_v.items():
            store.adam.v[n] = arr.astype(store[n].data.dtype)
    return scalars
