import numpy as np
import pytest

from lst.errors import TrainingDivergenceError
from lst.optim import AdamState, adamw_step, clip_grad_norm, global_norm, warmup_cosine
from tests.utils.enums import Schedule


def schedule(step: int) -> float:
    return warmup_cosine(step, Schedule.PEAK_LR.value, Schedule.WARMUP.value, Schedule.TOTAL.value, 0.01)


def test_warmup_cosine_anchor_points():
    assert schedule(0) == 0.0
    assert schedule(1000) == pytest.approx(Schedule.PEAK_LR.value / 2)
    assert schedule(2000) == pytest.approx(Schedule.PEAK_LR.value)
    assert schedule(11000) == pytest.approx((Schedule.PEAK_LR.value + Schedule.MIN_LR.value) / 2)
    assert schedule(20000) == pytest.approx(Schedule.MIN_LR.value)
    assert schedule(25000) == pytest.approx(Schedule.MIN_LR.value)


def test_schedule_is_monotone_after_warmup():
    values = [schedule(s) for s in range(2000, 20001, 500)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_clip_scales_to_max_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert global_norm(clipped) == pytest.approx(1.0)
    np.testing.assert_allclose(clipped["a"], [0.6, 0.0])


def test_clip_leaves_small_gradients():
    grads = {"a": np.array([0.3, 0.4])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(0.5)
    np.testing.assert_array_equal(clipped["a"], grads["a"])


def test_clip_rejects_non_finite():
    with pytest.raises(TrainingDivergenceError) as e:
        clip_grad_norm({"ok": np.ones(2), "bad": np.array([np.nan])}, 1.0, step=7)
    assert e.value.step == 7
    assert "bad" in e.value.message


def test_first_adam_step_moves_by_lr():
    params = {"w": np.array([[1.0, -1.0]]), "b": np.array([0.5])}
    grads = {"w": np.array([[0.2, -3.0]]), "b": np.array([1.0])}
    state = AdamState()
    updated = adamw_step(params, grads, state, 0.1, weight_decay=0.0)
    np.testing.assert_allclose(updated["w"], [[0.9, -0.9]], atol=1e-6)
    np.testing.assert_allclose(updated["b"], [0.4], atol=1e-6)
    assert state.t == 1


def test_second_adam_step_matches_closed_form():
    p0 = np.array([[0.5, -2.0], [1.5, 0.25]])
    g1 = np.array([[0.1, -0.4], [2.0, 0.0]])
    g2 = np.array([[-0.3, 0.2], [1.0, 0.5]])
    lr, wd, b1, b2, eps = 0.05, 0.1, 0.9, 0.95, 1e-8
    state = AdamState()
    p1 = adamw_step({"w": p0}, {"w": g1}, state, lr, weight_decay=wd)["w"]
    p2 = adamw_step({"w": p1}, {"w": g2}, state, lr, weight_decay=wd)["w"]
    m = b1 * (1 - b1) * g1 + (1 - b1) * g2
    v = b2 * (1 - b2) * g1**2 + (1 - b2) * g2**2
    expected = p1 - lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps) - lr * wd * p1
    np.testing.assert_allclose(p2, expected, rtol=0, atol=1e-12)


def test_weight_decay_skips_vectors():
    params = {"w": np.ones((2, 2)), "g": np.ones(2)}
    grads = {"w": np.zeros((2, 2)), "g": np.zeros(2)}
    updated = adamw_step(params, grads, AdamState(), 0.1, weight_decay=0.5)
    np.testing.assert_allclose(updated["w"], 0.95)
    np.testing.assert_array_equal(updated["g"], 1.0)


def test_inputs_are_not_modified():
    params = {"w": np.ones((2, 2))}
    adamw_step(params, {"w": np.ones((2, 2))}, AdamState(), 0.1)
    np.testing.assert_array_equal(params["w"], 1.0)


def test_state_arrays_roundtrip():
    state = AdamState()
    adamw_step({"w": np.ones((2, 3))}, {"w": np.full((2, 3), 0.5)}, state, 0.1)
    restored = AdamState.from_arrays(state.arrays() | {"enc.proj": np.zeros(1)}, state.t)
    assert restored.t == 1
    np.testing.assert_array_equal(restored.m["w"], state.m["w"])
    np.testing.assert_array_equal(restored.v["w"], state.v["w"])
    assert set(restored.m) == {"w"}
