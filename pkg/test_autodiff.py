"""
Test script for the autodiff tensor, the tape and AdamW.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from app.core import autodiff as ad
from app.core.autodiff import Tape, Tensor, backward, gradcheck
from app.core.exceptions import NonFiniteError, PhaseKitError, ShapeMismatchError
from app.core.optim import AdamW, AdamWState, adamw_step, clip_grad_norm, cosine_with_warmup

RNG = np.random.default_rng(7)


def _rand(*shape):
    return RNG.uniform(-1.0, 1.0, size=shape)


# ============================================================================
# Forward ops
# ============================================================================

def test_matmul_identity():
    a = _rand(3, 3)
    np.testing.assert_allclose(ad.matmul(np.eye(3), a).data, a, atol=0.0)


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(ad.softmax(np.zeros(3)).data, np.full(3, 1.0 / 3.0))


def test_identity_kernel_leaves_signal_unchanged():
    signal = _rand(1, 10)
    out = ad.circular_conv1d(signal, np.ones((1, 1, 1)))
    np.testing.assert_allclose(out.data, signal)


def test_circular_conv_is_shift_equivariant():
    x = _rand(2, 12)
    kernel = _rand(3, 2, 3)
    conv_then_shift = np.roll(ad.circular_conv1d(x, kernel).data, 4, axis=-1)
    shift_then_conv = ad.circular_conv1d(np.roll(x, 4, axis=-1), kernel).data
    np.testing.assert_allclose(conv_then_shift, shift_then_conv, atol=1e-10)


def test_matmul_shape_mismatch_names_op():
    with pytest.raises(ShapeMismatchError) as info:
        ad.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    assert "matmul" in str(info.value)
    assert info.value.code == "E_SHAPE"


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError) as info:
        ad.log(np.zeros(2))
    assert info.value.op == "log"


def test_layer_norm_normalizes_last_axis():
    y = ad.layer_norm(_rand(4, 8)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-3)


# ============================================================================
# Backward
# ============================================================================

def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(ad.sum_(x * x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_sin_gradient_at_zero():
    x = Tensor(0.0, requires_grad=True)
    backward(ad.sin(x))
    assert float(x.grad) == pytest.approx(1.0)


def test_repeated_backward_accumulates():
    x = Tensor([3.0], requires_grad=True)
    backward(ad.sum_(x * 2.0))
    backward(ad.sum_(x * 2.0))
    np.testing.assert_allclose(x.grad, [4.0])
    x.zero_grad()
    assert x.grad is None


def test_non_scalar_loss_is_rejected():
    x = Tensor(_rand(3), requires_grad=True)
    with pytest.raises(ShapeMismatchError):
        backward(x * 2.0)


def test_backward_needs_a_tape():
    with pytest.raises(PhaseKitError):
        backward(Tensor(1.0))


def test_inference_records_nothing():
    out = ad.sum_(ad.tanh(Tensor(_rand(5))))
    assert out.is_leaf
    assert len(Tape.record(out)) == 0


def test_tape_is_topologically_ordered():
    x = Tensor(_rand(3), requires_grad=True)
    y = ad.exp(x) * ad.sin(x)
    loss = ad.mean(y + x)
    tape = Tape.record(loss)
    position = {id(entry.output): i for i, entry in enumerate(tape)}
    for i, entry in enumerate(tape):
        for t in entry.inputs:
            if not t.is_leaf:
                assert position[id(t)] < i


def test_arccos_gradient_is_finite_at_the_boundary():
    x = Tensor([1.0, -1.0, 0.3], requires_grad=True)
    backward(ad.sum_(ad.arccos(x)))
    assert np.all(np.isfinite(x.grad))
    np.testing.assert_allclose(ad.arccos(np.array([1.0, -1.0])).data, [0.0, np.pi])


GRADCHECK_CASES = {
    "add_broadcast": (lambda a, b: ad.sum_(a + b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sum_(ad.square(a - b)), [(3,), (3,)]),
    "mul_div": (lambda a, b: ad.sum_(a * b / (ad.square(b) + 2.0)), [(2, 3), (2, 3)]),
    "matmul": (lambda a, b: ad.sum_(ad.sin(ad.matmul(a, b))), [(2, 3), (3, 4)]),
    "linear": (lambda x, w, b: ad.sum_(ad.tanh(ad.linear(x, w, b))), [(5, 3), (3, 2), (2,)]),
    "transpose_reshape": (lambda a: ad.sum_(ad.reshape(ad.transpose(a), (6,)) * np.arange(6.0)), [(2, 3)]),
    "concat_stack": (lambda a, b: ad.sum_(ad.square(ad.concat([a, ad.stack([b, b])], axis=0))), [(1, 3), (3,)]),
    "getitem_take": (lambda a: ad.sum_(ad.square(a[1:, ::2])) + ad.sum_(ad.take(a, [0, 2], axis=1)), [(3, 4)]),
    "mean_axis": (lambda a: ad.sum_(ad.square(ad.mean(a, axis=0))), [(4, 3)]),
    "exp_log_sqrt": (lambda a: ad.sum_(ad.log(ad.exp(a) + 1.0) * ad.sqrt(ad.square(a) + 1.0)), [(4,)]),
    "cos_erf_gelu": (lambda a: ad.sum_(ad.cos(a) * ad.erf(a) + ad.gelu(a)), [(5,)]),
    "atan2": (lambda y, x: ad.sum_(ad.atan2(y, x + 3.0)), [(4,), (4,)]),
    "arccos": (lambda a: ad.sum_(ad.arccos(a * 0.5)), [(4,)]),
    "softmax": (lambda a: ad.sum_(ad.softmax(a) * np.arange(4.0)), [(2, 4)]),
    "layer_norm": (lambda a: ad.sum_(ad.layer_norm(a) * np.linspace(-1, 1, 5)), [(3, 5)]),
    "circular_conv1d": (lambda x, k, b: ad.sum_(ad.square(ad.circular_conv1d(x, k, b))), [(2, 6), (3, 2, 3), (3,)]),
    "power_neg": (lambda a: ad.sum_(-ad.power(ad.square(a) + 1.0, 1.5)), [(3,)]),
    "where": (lambda a, b: ad.sum_(ad.square(ad.where(np.array([True, False, True]), a, b))), [(3,), (3,)]),
}


@pytest.mark.parametrize("name", sorted(GRADCHECK_CASES))
def test_gradients_match_central_differences(name):
    fn, shapes = GRADCHECK_CASES[name]
    for seed in range(100):
        rng = np.random.default_rng(seed)
        inputs = [rng.uniform(-1.0, 1.0, size=shape) for shape in shapes]
        assert gradcheck(fn, inputs) <= 1e-4, f"seed {seed}"


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(0.2, 1.0)))
def test_composite_gradient_property(values):
    weights = np.linspace(-1.0, 1.0, 12).reshape(4, 3)
    fn = lambda a: ad.mean(ad.tanh(ad.matmul(a, weights)) * ad.sin(a[:, :3]))
    assert gradcheck(fn, [values]) <= 1e-4


def test_replay_is_bit_identical():
    def run():
        x = Tensor(np.linspace(-1.0, 1.0, 6).reshape(2, 3), requires_grad=True)
        loss = ad.mean(ad.softmax(ad.sin(x) * 3.0))
        backward(loss)
        return loss.item(), x.grad.copy()

    first, second = run(), run()
    assert first[0] == second[0]
    np.testing.assert_array_equal(first[1], second[1])


# ============================================================================
# AdamW
# ============================================================================

def test_zero_gradient_without_decay_leaves_params():
    params = {"w": Tensor(_rand(3), requires_grad=True)}
    state = AdamWState.zeros_like(params)
    new, _ = adamw_step(params, {"w": np.zeros(3)}, state, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(new["w"].data, params["w"].data)


def test_clip_scales_norm_five_by_a_tenth():
    grads = {"a": np.array([3.0, 4.0])}
    clipped, norm = clip_grad_norm(grads, 0.5)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(clipped["a"], [0.3, 0.4], rtol=1e-9)


def test_scalar_trajectory_matches_hand_computation():
    lr, b1, b2, wd, eps, g = 0.1, 0.9, 0.999, 0.01, 1e-8, 0.5
    params = {"p": Tensor(1.0, requires_grad=True)}
    state = AdamWState()
    p, m, v = 1.0, 0.0, 0.0
    for step in range(1, 4):
        params, state = adamw_step(params, {"p": np.array(g)}, state, lr=lr, betas=(b1, b2),
                                   weight_decay=wd, eps=eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd) - lr * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
        assert params["p"].item() == pytest.approx(p, abs=1e-12)
    assert state.step == 3


def test_adamw_wrapper_reports_unclipped_norm():
    x = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    backward(ad.sum_(x * np.array([3.0, 4.0])))
    optimizer = AdamW(lr=0.01, max_grad_norm=0.5)
    new, norm = optimizer.step({"x": x})
    assert norm == pytest.approx(5.0)
    assert optimizer.state.step == 1
    assert new["x"].requires_grad


def test_cosine_schedule_warms_up_then_decays():
    lrs = [cosine_with_warmup(s, 100, 1e-3, 0.1) for s in range(100)]
    assert lrs[0] == pytest.approx(1e-4)
    assert max(lrs) == pytest.approx(1e-3)
    assert lrs[-1] < 1e-6
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
