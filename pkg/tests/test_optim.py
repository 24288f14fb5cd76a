"""Optimizer, grad_check oracle behavior, checkpoint format."""

import numpy as np
import pytest

from synlm import tape as T
from synlm.optim import (CheckpointError, ParamStore, adam_step, grad_check,
                         load_checkpoint, save_checkpoint)
from synlm.tape import Tensor


class TestGradCheck:
    def test_square_at_three(self, f64):
        store = ParamStore(seed=0)
        x = store.param("x", (1,), init="zeros")
        x.data[:] = 3.0

        def f():
            tape = T.Tape()
            with tape:
                loss = T.sum_(T.mul(x, x))
            tape.backward(loss)
            return loss

        err = grad_check(f, store, eps=1e-5)
        assert err < 1e-8
        np.testing.assert_allclose(x.grad, [6.0])

    def test_constant_function_zero_gradient(self, f64):
        store = ParamStore(seed=0)
        store.param("x", (3,), init="normal")

        def f():
            tape = T.Tape()
            with tape:
                loss = T.sum_(Tensor(np.ones(1)))
            tape.backward(loss)
            return loss

        assert grad_check(f, store, eps=1e-5) == 0.0

    def test_eps_range_enforced(self, f64):
        store = ParamStore(seed=0)
        store.param("x", (1,))
        with pytest.raises(ValueError):
            grad_check(lambda: Tensor([1.0]), store, eps=1e-2)

    def test_nonfinite_loss_is_error(self, f64):
        store = ParamStore(seed=0)
        store.param("x", (1,))
        with pytest.raises(FloatingPointError):
            grad_check(lambda: Tensor([np.nan]), store)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        store = ParamStore(seed=0)
        p = store.param("p", (3,), init="normal")
        before = p.data.copy()
        p.grad = np.zeros(3, dtype=p.data.dtype)
        adam_step(store, lr=0.1)
        np.testing.assert_array_equal(p.data, before)
        assert store.adam.step_count == 1

    def test_single_scalar_first_step(self):
        # hand evaluation: m_hat = 1, v_hat = 1 -> delta = lr / (1 + eps)
        store = ParamStore(seed=0)
        p = store.param("p", (1,), init="zeros")
        p.data[:] = 1.0
        p.grad = np.array([1.0], dtype=p.data.dtype)
        adam_step(store, lr=0.1, betas=(0.9, 0.999), eps=1e-8)
        np.testing.assert_allclose(p.data, [1.0 - 0.1 / (1 + 1e-8)], rtol=1e-6)

    def test_identical_params_identical_updates(self):
        store = ParamStore(seed=0)
        a = store.param("a", (4,), init="zeros")
        b = store.param("b", (4,), init="zeros")
        g = np.array([1.0, -2.0, 0.5, 3.0], dtype=a.data.dtype)
        a.grad = g.copy()
        b.grad = g.copy()
        adam_step(store, lr=0.01)
        np.testing.assert_array_equal(a.data, b.data)

    def test_nonfinite_gradient_skips_step(self):
        store = ParamStore(seed=0)
        p = store.param("p", (2,), init="zeros")
        p.grad = np.array([1.0, np.nan], dtype=p.data.dtype)
        bad = adam_step(store, lr=0.1)
        assert bad == ["p"]
        np.testing.assert_array_equal(p.data, np.zeros(2))
        assert store.adam.step_count == 0
        assert p.grad is None

    def test_grad_clip(self):
        store = ParamStore(seed=0)
        p = store.param("p", (2,), init="zeros")
        p.grad = np.array([3.0, 4.0], dtype=p.data.dtype)
        norm = store.clip_grad_norm(1.0)
        assert abs(norm - 5.0) < 1e-6
        np.testing.assert_allclose(np.linalg.norm(p.grad), 1.0, rtol=1e-5)


class TestCheckpoint:
    def _store(self, seed=0):
        store = ParamStore(seed=seed)
        store.param("w1", (3, 4))
        store.param("w2", (5,))
        return store

    def test_round_trip_params_and_adam(self, tmp_path):
        store = self._store()
        for t in store.params.values():
            t.grad = np.ones_like(t.data)
        adam_step(store, lr=0.1)
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, store, {"step": 7})

        fresh = self._store(seed=99)
        scalars = load_checkpoint(path, fresh)
        assert scalars == {"step": 7}
        for name in store.names():
            np.testing.assert_array_equal(store[name].data, fresh[name].data)
            np.testing.assert_array_equal(store.adam.m[name], fresh.adam.m[name])
            np.testing.assert_array_equal(store.adam.v[name], fresh.adam.v[name])
        assert fresh.adam.step_count == 1

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, self._store())

    def test_shape_mismatch(self, tmp_path):
        store = self._store()
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, store)
        other = ParamStore(seed=0)
        other.param("w1", (3, 5))
        other.param("w2", (5,))
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_checkpoint(path, other)
