#!/usr/bin/env python3
"""
Tests for the autodiff tensor, Adam and the finite-difference checker
"""

import numpy as np
import pytest

from core import autodiff as ad
from core.autodiff import Tape, Tensor, grad, no_tape
from core.errors import ContractViolation, DegenerateInputError, DeterminismError, NumericError, TapeError
from core.gradcheck import finite_difference_check
from core.gradcheck_suite import PRIMITIVES, run_gradcheck_suite
from core.optimizer import DEFAULT_LEARNING_RATE, Adam, AdamState, adam_step
from core.rng import SeededRng


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    with Tape():
        y = x * x
        g = grad(y, {"x": x})
    assert g["x"].item() == pytest.approx(6.0)


def test_unreachable_parameter_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    p = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape():
        loss = (x * x).sum()
        g = grad(loss, {"x": x, "p": p})
    assert np.array_equal(g["p"].data, np.zeros((2, 3)))


def test_frozen_parameter_left_out():
    x = Tensor(2.0, requires_grad=True)
    frozen = Tensor(5.0)
    with Tape():
        loss = x * frozen
        g = grad(loss, {"x": x, "frozen": frozen})
    assert set(g) == {"x"}
    assert g["x"].item() == pytest.approx(5.0)


def test_fan_out_accumulates():
    x = Tensor([1.0, -2.0], requires_grad=True)
    with Tape():
        loss = (x * 3.0 + x * x).sum()
        g = grad(loss, {"x": x})
    assert np.allclose(g["x"].data, [5.0, -1.0])


def test_tensors_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_detached_loss_rejected():
    x = Tensor(1.0, requires_grad=True)
    loss = x * 2.0
    with pytest.raises(TapeError):
        grad(loss, {"x": x})


def test_loss_from_other_tape_rejected():
    x = Tensor(1.0, requires_grad=True)
    with Tape():
        loss = x * 2.0
    with Tape():
        with pytest.raises(TapeError):
            grad(loss, {"x": x})


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        with pytest.raises(ContractViolation):
            grad(x * 2.0, {"x": x})


def test_no_tape_records_nothing():
    x = Tensor(1.0, requires_grad=True)
    with Tape() as tape:
        with no_tape():
            y = x * 2.0
        assert len(tape) == 0
        assert y.node_id is None


def test_softmax_with_temperature_examples():
    assert np.allclose(ad.softmax_with_temperature(Tensor([0.0, 0.0]), 2.0).data, [0.5, 0.5])
    assert np.allclose(ad.softmax_with_temperature(Tensor([2.0, 0.0]), 2.0).data, [0.73106, 0.26894], atol=1e-5)
    logits = Tensor([0.3, -1.2, 2.0])
    assert np.allclose(ad.softmax_with_temperature(logits, 1.0).data, ad.softmax(logits).data)


def test_softmax_with_temperature_rejects_bad_input():
    with pytest.raises(ContractViolation):
        ad.softmax_with_temperature(Tensor([1.0, 2.0]), 0.0)
    with pytest.raises(NumericError):
        ad.softmax_with_temperature(Tensor([np.nan, 1.0]), 1.0)
    for bad in (np.inf, -np.inf):
        with pytest.raises(NumericError):
            ad.softmax_with_temperature(Tensor([bad, 1.0]), 2.0)


def test_cosine_similarity_examples():
    assert ad.cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 0.0])).item() == pytest.approx(1.0)
    assert ad.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == pytest.approx(0.0)
    assert ad.cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 1.0])).item() == pytest.approx(0.70711, abs=1e-5)
    with pytest.raises(DegenerateInputError):
        ad.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 1.0]))


def test_adam_zero_gradient_keeps_param():
    param = Tensor([1.0, -2.0], requires_grad=True)
    new, state = adam_step(param, np.zeros(2), AdamState.fresh((2,)))
    assert np.array_equal(new.data, param.data)
    assert state.t == 1


def test_adam_first_step_moves_by_lr_times_sign():
    param = Tensor(0.5, requires_grad=True)
    new, _ = adam_step(param, np.array(3.0), AdamState.fresh(()))
    assert new.item() == pytest.approx(0.5 - DEFAULT_LEARNING_RATE, abs=1e-9)
    new, _ = adam_step(param, np.array(-0.2), AdamState.fresh(()))
    assert new.item() == pytest.approx(0.5 + DEFAULT_LEARNING_RATE, abs=1e-7)


def test_adam_shape_mismatch():
    with pytest.raises(ContractViolation):
        adam_step(Tensor(np.zeros(3)), np.zeros(2), AdamState.fresh((3,)))


def test_adam_keeps_state_per_name():
    opt = Adam(lr=0.1)
    params = {"a": Tensor(1.0, requires_grad=True), "b": Tensor(2.0, requires_grad=True)}
    updated = opt.step(params, {"a": Tensor(1.0)})
    assert set(updated) == {"a"}
    assert opt.states["a"].t == 1 and "b" not in opt.states


def test_gradcheck_linear_is_exact():
    x = np.array([0.5, -1.5, 2.0])
    params = {"w": Tensor([0.1, 0.2, 0.3], requires_grad=True)}
    result = finite_difference_check(lambda p: (p["w"] * x).sum(), params)
    assert result.max_error <= 1e-10


def test_gradcheck_softmax_cross_entropy():
    rng = SeededRng(3, "ce")
    params = {"z": Tensor(rng.normal((5, 4)), requires_grad=True)}
    labels = np.array([0, 1, 2, 3, 0])
    result = finite_difference_check(lambda p: ad.cross_entropy(p["z"], labels), params)
    assert result.max_error <= 1e-6


def test_gradcheck_skips_frozen():
    params = {"w": Tensor([1.0, 2.0], requires_grad=True), "frozen": Tensor([3.0, 4.0])}
    result = finite_difference_check(lambda p: (p["w"] * p["frozen"]).sum(), params)
    assert result.checked == 2
    assert result.param == "w"


def test_gradcheck_rejects_bad_step_and_nondeterminism():
    params = {"w": Tensor(1.0, requires_grad=True)}
    with pytest.raises(ContractViolation):
        finite_difference_check(lambda p: p["w"] * 1.0, params, eps=1e-2)
    calls = []

    def drifting(p):
        calls.append(1)
        return p["w"] * float(len(calls))

    with pytest.raises(DeterminismError):
        finite_difference_check(drifting, params)


@pytest.mark.parametrize("check", PRIMITIVES, ids=lambda c: c.name)
def test_every_primitive_within_tolerance(check):
    (entry,) = run_gradcheck_suite([check])
    assert entry.passed, (entry.result, entry.error)


def test_seeded_rng_streams_are_reproducible():
    a = SeededRng(5, "x").normal((3,))
    b = SeededRng(5, "x").normal((3,))
    c = SeededRng(5, "x").split("child").normal((3,))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
