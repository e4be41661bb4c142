"""Optimizers, schedules, ParamStore contracts."""

import numpy as np
import pytest

from bandfuse import autodiff as ad
from bandfuse.errors import UsageError
from bandfuse.optim import Adam, ConstantSchedule, CosineSchedule, SGDMomentum
from bandfuse.params import ParamStore


def test_cosine_endpoints_exact():
    sched = CosineSchedule(1e-4, 1e-7, 1000)
    assert sched.lr(0) == 1e-4
    assert sched.lr(1000) == 1e-7
    assert 1e-7 < sched.lr(500) < 1e-4


def test_cosine_midpoint_formula():
    sched = CosineSchedule(1.0, 0.0, 2)
    assert sched.lr(1) == pytest.approx(0.5)


def test_constant_schedule():
    assert ConstantSchedule(0.3).lr(123) == 0.3


def test_sgd_zero_grad_zero_momentum_no_change(rng):
    store = ParamStore()
    w = store.add("w", rng.standard_normal(4))
    before = w.data.copy()
    w.grad = np.zeros(4, dtype=w.dtype)
    SGDMomentum().step(store, lr=0.5)
    np.testing.assert_array_equal(w.data, before)


def test_sgd_two_steps_hand_recurrence(rng):
    # v1 = g, w1 = w0 - lr*g; v2 = 0.9g + g, w2 = w1 - lr*1.9g
    # total dw = -lr*(g + 1.9g)
    store = ParamStore()
    w0 = rng.standard_normal(5)
    w = store.add("w", w0.copy())
    g = rng.standard_normal(5).astype(np.float32)
    opt = SGDMomentum(momentum=0.9)
    for _ in range(2):
        w.grad = g.copy()
        opt.step(store, lr=0.1)
    np.testing.assert_allclose(w.data, w0.astype(np.float32) - 0.1 * (g + 1.9 * g), rtol=1e-5)


def test_sgd_step_without_gradients_is_usage_error(rng):
    store = ParamStore()
    store.add("w", rng.standard_normal(3))
    with pytest.raises(UsageError):
        SGDMomentum().step(store, lr=0.1)


def test_adam_single_step_matches_hand_formula(rng):
    store = ParamStore()
    w0 = rng.standard_normal(4)
    w = store.add("w", w0.copy())
    g = rng.standard_normal(4).astype(np.float32)
    w.grad = g.copy()
    Adam().step(store, lr=0.01)
    # bias-corrected first step reduces to w - lr * g/(|g| + eps)
    expect = w0.astype(np.float32) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(w.data, expect, rtol=1e-5)


def test_adam_skips_frozen(rng):
    store = ParamStore()
    w = store.add("w", rng.standard_normal(3))
    frozen = store.add("f", rng.standard_normal(3))
    before = frozen.data.copy()
    store.freeze(lambda n: n == "f")
    for p in store.tensors():
        p.grad = np.ones(3, dtype=np.float32)
    Adam().step(store, lr=0.1)
    np.testing.assert_array_equal(frozen.data, before)
    assert not np.array_equal(w.data, w.data * 0)


def test_store_rejects_duplicate_names(rng):
    store = ParamStore()
    store.add("w", rng.standard_normal(2))
    with pytest.raises(UsageError):
        store.add("w", rng.standard_normal(2))


def test_store_load_arrays_shape_check(rng):
    store = ParamStore()
    store.add("w", rng.standard_normal((2, 3)))
    with pytest.raises(UsageError):
        store.load_arrays({"w": np.zeros((3, 2), dtype=np.float32)})
