"""Tensor-engine unit tests: op semantics plus finite-difference gradients."""

import math

import numpy as np
import pytest

from lazyattn import core
from lazyattn.core import ShapeError, Tape, Tensor, backward

from oracles import check_grads, rel_err


def t64(arr, grad=True):
    return Tensor(np.asarray(arr), requires_grad=grad, dtype="float64")


def test_matmul_identity():
    m = t64([[1.0, 2.0], [3.0, 4.0]])
    eye = t64(np.eye(2), grad=False)
    out = core.matmul(eye, m)
    assert np.array_equal(out.data, m.data)


def test_matmul_hand_arithmetic():
    a = t64([[1.0, 2.0], [3.0, 4.0]])
    b = t64([[1.0], [1.0]])
    assert np.array_equal(core.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        core.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    a = t64(rng.normal(size=(5, 4)))
    b = t64(rng.normal(size=(4, 3)))
    err = check_grads(lambda: core.sum_all(core.matmul(a, b)), [a, b])
    assert err < 1e-6


def test_relu_values_and_subgradient_at_zero():
    x = t64([-1.0, 0.0, 2.0])
    with Tape() as tape:
        out = core.sum_all(core.relu(x))
    assert np.array_equal(core.relu(x).data, [0.0, 0.0, 2.0])
    backward(tape, out)
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])  # exactly 0 at the kink


def test_exp_gradient():
    rng = np.random.default_rng(3)
    x = t64(rng.normal(size=(4, 3)))
    err = check_grads(lambda: core.sum_all(core.exp(x)), [x])
    assert err < 1e-6


def test_elementwise_broadcast_rules():
    x = t64(np.ones((2, 2)))
    s = t64([2.0])
    assert np.array_equal(core.mul(x, s).data, 2 * np.ones((2, 2)))
    with pytest.raises(ShapeError):
        core.add(x, t64(np.ones(2)))


def test_scalar_broadcast_gradient():
    x = t64(np.arange(6.0).reshape(2, 3))
    s = t64([3.0])
    err = check_grads(lambda: core.sum_all(core.mul(x, s)), [x, s])
    assert err < 1e-6


def test_softmax_uniform_row():
    out = core.softmax_lastdim(t64([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_values_stable():
    out = core.softmax_lastdim(t64([1000.0, 1000.0]))
    assert np.all(np.isfinite(out.data))
    assert np.allclose(out.data, [0.5, 0.5])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(11)
    x32 = Tensor(rng.normal(size=(20, 9)), dtype="float32")
    x64 = Tensor(x32.data, dtype="float64")
    assert np.abs(core.softmax_lastdim(x32).data.sum(axis=-1) - 1).max() < 1e-6
    assert np.abs(core.softmax_lastdim(x64).data.sum(axis=-1) - 1).max() < 1e-12


def test_softmax_mask_excludes_entries():
    x = t64([[1.0, 5.0, 2.0]])
    mask = np.array([[False, True, False]])
    out = core.softmax_lastdim(x, mask=mask)
    assert out.data[0, 1] == 0.0
    assert math.isclose(out.data.sum(), 1.0, rel_tol=1e-12)
    with pytest.raises(ValueError):
        core.softmax_lastdim(x, mask=np.array([[True, True, True]]))


def test_softmax_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = t64(rng.normal(size=(4, 6)))
    w = rng.normal(size=(4, 6))  # fixed cotangent direction

    err = check_grads(lambda: core.sum_all(core.mul(core.softmax_lastdim(x), t64(w, grad=False))), [x])
    assert err < 1e-5


def test_layernorm_constant_row():
    x = t64(np.full((1, 8), 3.7))
    gain = t64(np.ones(8))
    bias = t64(np.zeros(8))
    out = core.layernorm(x, gain, bias)
    assert np.abs(out.data).max() < 1e-8  # variance guarded by eps


def test_layernorm_output_mean_tracks_bias():
    rng = np.random.default_rng(2)
    x = t64(rng.normal(size=(3, 16)))
    gain = t64(np.ones(16))
    bias = t64(rng.normal(size=16))
    out = core.layernorm(x, gain, bias)
    assert np.allclose(out.data.mean(axis=1), bias.data.mean(), atol=1e-6)


def test_layernorm_gradient():
    rng = np.random.default_rng(9)
    x = t64(rng.normal(size=(4, 8)))
    gain = t64(rng.normal(size=8))
    bias = t64(rng.normal(size=8))
    w = t64(rng.normal(size=(4, 8)), grad=False)
    err = check_grads(lambda: core.sum_all(core.mul(core.layernorm(x, gain, bias), w)),
                      [x, gain, bias])
    assert err < 1e-5


def test_cross_entropy_uniform_logits():
    logits = t64(np.zeros((5, 4)))
    loss = core.cross_entropy(logits, np.zeros(5, dtype=int))
    assert math.isclose(loss.item(), math.log(4), rel_tol=1e-12)


def test_cross_entropy_margin_drives_loss_to_zero():
    last = None
    for margin in (5.0, 20.0, 60.0):
        logits = np.zeros((3, 7))
        logits[np.arange(3), [1, 2, 3]] = margin
        loss = core.cross_entropy(t64(logits), np.array([1, 2, 3])).item()
        if last is not None:
            assert loss < last
        last = loss
    assert last < 1e-20


def test_cross_entropy_target_range():
    with pytest.raises(IndexError):
        core.cross_entropy(t64(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(13)
    logits = t64(rng.normal(size=(6, 5)))
    targets = rng.integers(0, 5, size=6)
    err = check_grads(lambda: core.cross_entropy(logits, targets), [logits])
    assert err < 1e-5


def test_backward_sum_gives_ones():
    x = t64(np.arange(12.0).reshape(3, 4))
    with Tape() as tape:
        loss = core.sum_all(x)
    backward(tape, loss)
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic():
    x = t64([1.0, -2.0, 3.0])
    with Tape() as tape:
        loss = core.sum_all(core.mul(x, x))
    backward(tape, loss)
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar_loss():
    x = t64(np.ones((2, 2)))
    with Tape() as tape:
        y = core.mul(x, x)
    with pytest.raises(ValueError):
        backward(tape, y)


def test_backward_rejects_off_tape_loss():
    x = t64(np.ones(3))
    with Tape():
        core.sum_all(x)
    loss = core.sum_all(x)  # produced outside any tape
    with Tape() as other:
        core.sum_all(x)
        with pytest.raises(ValueError):
            backward(other, loss)


def test_tape_replay_is_bit_identical():
    rng = np.random.default_rng(21)
    x = Tensor(rng.normal(size=(16, 8)), requires_grad=True, dtype="float32")
    w = Tensor(rng.normal(size=(8, 8)), requires_grad=True, dtype="float32")
    with Tape() as tape:
        loss = core.sum_all(core.gelu(core.matmul(x, w)))
    backward(tape, loss)
    first = (x.grad.tobytes(), w.grad.tobytes())
    tape.zero_grads()
    backward(tape, loss)
    assert (x.grad.tobytes(), w.grad.tobytes()) == first


def test_embedding_and_slice_and_concat_grads():
    rng = np.random.default_rng(17)
    table = t64(rng.normal(size=(9, 6)))
    ids = np.array([1, 4, 4, 8])

    def build():
        e = core.embedding(table, ids)
        left = core.slice_cols(e, 0, 3)
        right = core.slice_cols(e, 3, 6)
        return core.sum_all(core.mul(core.concat_cols([right, left]), core.concat_cols([right, left])))

    err = check_grads(build, [table])
    assert err < 1e-6


def test_add_row_and_gelu_grads():
    rng = np.random.default_rng(19)
    x = t64(rng.normal(size=(5, 4)))
    r = t64(rng.normal(size=4))
    err = check_grads(lambda: core.sum_all(core.gelu(core.add_row(x, r))), [x, r])
    assert err < 1e-6


def test_all_core_ops_gradient_sweep():
    """The module invariant: FD agreement at h=1e-5, 64-bit, over 20 seeds."""
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = t64(rng.normal(size=(4, 6)))
        w = t64(rng.normal(size=(6, 5)))
        gain = t64(rng.normal(size=5))
        bias = t64(rng.normal(size=5))
        targets = rng.integers(0, 5, size=4)

        def build():
            h = core.matmul(x, w)
            h = core.layernorm(h, gain, bias)
            h = core.add(core.gelu(h), core.scale(core.exp(core.scale(h, 0.1)), 0.5))
            h = core.mul(h, h)
            return core.cross_entropy(h, targets)

        worst = max(worst, check_grads(build, [x, w, gain, bias]))
    assert worst < 1e-4


def test_rel_err_helper_sane():
    assert rel_err(np.ones(3), np.ones(3)) == 0.0
