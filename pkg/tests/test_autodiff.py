import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from i2icodec.autodiff import ops
from i2icodec.autodiff.gradcheck import probe_gradients
from i2icodec.autodiff.params import (ParamFormatError, ParamTree, adam_step, dumps,
                                      fan_in_uniform, loads, tree_from_arrays)
from i2icodec.autodiff.tensor import ShapeError, Tensor, grad_enabled, no_grad

TOL = 1e-4


def away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalar probe: a fixed random weighting makes every partial distinct."""
    return ops.sum(ops.mul(out, Tensor(w)))


def check(fn_of_inputs, arrays, seed=0, n_probes=100):
    rng = np.random.default_rng(seed)
    inputs = [Tensor(np.array(a, dtype=np.float64)) for a in arrays]
    w = {}

    def fn():
        out = fn_of_inputs(*inputs)
        if out.ndim == 0:
            return out
        if "w" not in w:
            w["w"] = rng.standard_normal(out.shape)
        return weighted(out, w["w"])

    return probe_gradients(fn, inputs, n_probes=n_probes, rng=np.random.default_rng(seed + 1))


# -- every differentiable kernel under a central-difference oracle ------------

R = np.random.default_rng(7)
KERNELS = {
    "add": (lambda a, b: ops.add(a, b), [R.standard_normal((3, 4)), R.standard_normal((4,))]),
    "sub": (lambda a, b: ops.sub(a, b), [R.standard_normal((3, 4)), R.standard_normal((3, 1))]),
    "mul": (lambda a, b: ops.mul(a, b), [R.standard_normal((2, 3, 4)), R.standard_normal((3, 1))]),
    "div": (lambda a, b: ops.div(a, b), [R.standard_normal((3, 4)), 1.5 + R.random((3, 4))]),
    "neg": (lambda a: ops.neg(a), [R.standard_normal((5,))]),
    "leaky_relu": (lambda a: ops.leaky_relu(a), [away_from_zero(R, (4, 5))]),
    "sigmoid": (lambda a: ops.sigmoid(a), [R.standard_normal((4, 5))]),
    "tanh": (lambda a: ops.tanh(a), [R.standard_normal((4, 5))]),
    "softplus": (lambda a: ops.softplus(a), [R.standard_normal((4, 5))]),
    "exp": (lambda a: ops.exp(a), [R.standard_normal((4, 5))]),
    "log": (lambda a: ops.log(a), [0.5 + R.random((4, 5))]),
    "abs": (lambda a: ops.abs(a), [away_from_zero(R, (4, 5))]),
    "clamp_min": (lambda a: ops.clamp_min(a, 0.1), [0.1 + away_from_zero(R, (4, 5))]),
    "normal_cdf": (lambda a: ops.normal_cdf(a), [R.standard_normal((4, 5))]),
    "sum_axis": (lambda a: ops.sum(a, axis=(0, 2)), [R.standard_normal((2, 3, 4))]),
    "mean": (lambda a: ops.mean(a, axis=1, keepdims=True), [R.standard_normal((2, 3, 4))]),
    "l1_distance": (lambda a, b: ops.l1_distance(a, b),
                    [R.standard_normal((3, 4)), R.standard_normal((3, 4)) + 3.0]),
    "mse": (lambda a, b: ops.mse(a, b), [R.standard_normal((3, 4)), R.standard_normal((3, 4))]),
    "reshape": (lambda a: ops.reshape(a, (6, 2)), [R.standard_normal((3, 4))]),
    "transpose": (lambda a: ops.transpose(a, (2, 0, 1)), [R.standard_normal((2, 3, 4))]),
    "getitem_slice": (lambda a: ops.getitem(a, (slice(1, 3), slice(None, None, 2))),
                      [R.standard_normal((4, 5))]),
    "getitem_fancy": (lambda a: ops.getitem(a, np.array([0, 2, 2, 1])), [R.standard_normal((3, 4))]),
    "concat": (lambda a, b: ops.concat([a, b], axis=1),
               [R.standard_normal((2, 3)), R.standard_normal((2, 5))]),
    "select_rows": (lambda a: ops.select_rows(a, np.array([2, 0, 2])), [R.standard_normal((3, 4))]),
    "matmul": (lambda a, b: ops.matmul(a, b), [R.standard_normal((3, 4)), R.standard_normal((4, 2))]),
    "linear": (lambda x, w, b: ops.linear(x, w, b),
               [R.standard_normal((5, 4)), R.standard_normal((3, 4)), R.standard_normal((3,))]),
    "conv2d": (lambda x, k: ops.conv2d(x, k),
               [R.standard_normal((2, 5, 5)), R.standard_normal((3, 2, 3, 3))]),
    "conv2d_stride_pad_bias": (lambda x, k, b: ops.conv2d(x, k, b, stride=2, padding=1),
                               [R.standard_normal((2, 3, 6, 6)), R.standard_normal((4, 3, 3, 3)),
                                R.standard_normal((4,))]),
    "resample_up": (lambda x: ops.resample(x, 2, "up"), [R.standard_normal((2, 3, 3))]),
    "resample_down": (lambda x: ops.resample(x, 2, "down"), [R.standard_normal((2, 2, 4, 4))]),
    "normalize_instance": (lambda x: ops.normalize_instance(x), [R.standard_normal((2, 3, 4, 4))]),
    "global_mean": (lambda x: ops.global_mean(x), [R.standard_normal((2, 3, 4, 4))]),
}


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_kernel_gradient_matches_central_difference(name):
    fn, arrays = KERNELS[name]
    assert check(fn, arrays) < TOL


# -- convolution ---------------------------------------------------------------

def test_conv_identity_kernel_returns_input(rng):
    x = rng.standard_normal((1, 4, 4))
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_kernel_gives_zero(rng):
    out = ops.conv2d(Tensor(rng.standard_normal((3, 6, 6))), Tensor(np.zeros((2, 3, 3, 3))), padding=1)
    assert out.shape == (2, 6, 6)
    assert not out.data.any()


def test_conv_matches_direct_correlation(rng):
    x = rng.standard_normal((2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[o, i, j] = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


# -- linear ----------------------------------------------------------------------

def test_linear_zero_weight_gives_bias():
    b = np.array([1.0, -2.0, 3.0])
    out = ops.linear(Tensor(np.ones((2, 4))), Tensor(np.zeros((3, 4))), Tensor(b))
    np.testing.assert_array_equal(out.data, np.tile(b, (2, 1)))


def test_linear_identity_weight_returns_input(rng):
    x = rng.standard_normal((5, 4))
    out = ops.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)


# -- resampling --------------------------------------------------------------------

def test_constant_image_survives_down_then_up():
    x = np.full((3, 8, 8), 0.37)
    out = ops.resample(ops.resample(Tensor(x), 2, "down"), 2, "up")
    np.testing.assert_allclose(out.data, x, rtol=0, atol=1e-15)


def test_down_is_arithmetic_mean():
    out = ops.resample(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), 2, "down")
    np.testing.assert_array_equal(out.data, [[[2.5]]])


def test_resample_rejects_bad_arguments():
    with pytest.raises(ShapeError):
        ops.resample(Tensor(np.zeros((1, 3, 3))), 2, "down")
    with pytest.raises(ValueError):
        ops.resample(Tensor(np.zeros((1, 4, 4))), 2, "sideways")


# -- instance normalisation --------------------------------------------------------

def test_normalize_is_idempotent_on_normalized_input(rng):
    x = ops.normalize_instance(Tensor(rng.standard_normal((3, 8, 8)))).data
    again = ops.normalize_instance(Tensor(x)).data
    np.testing.assert_allclose(again, x, atol=1e-4)


def test_normalize_constant_channel_is_zero():
    out = ops.normalize_instance(Tensor(np.full((2, 4, 4), 5.0))).data
    np.testing.assert_array_equal(out, 0.0)


def test_normalize_output_statistics(rng):
    out = ops.normalize_instance(Tensor(rng.standard_normal((3, 4, 4)))).data
    assert np.abs(out.mean(axis=(1, 2))).max() < 1e-6
    assert np.abs(out.var(axis=(1, 2)) - 1).max() < 1e-3


# -- determinism and finiteness ------------------------------------------------------

def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        h = ops.conv2d(Tensor(x), Tensor(k), padding=1)
        return ops.normalize_instance(ops.leaky_relu(h)).data

    np.testing.assert_array_equal(run(), run())


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(0.01, 1e3))
def test_pointwise_kernels_stay_finite(v, scale):
    x = Tensor(np.array([v, -v, v * scale]))
    for f in (ops.sigmoid, ops.tanh, ops.softplus, ops.normal_cdf, ops.leaky_relu, ops.abs):
        out = f(x)
        out.backward(np.ones(3))
        assert np.isfinite(out.data).all()


def test_no_grad_builds_no_graph(rng):
    a = Tensor(rng.standard_normal(3), requires_grad=True)
    with no_grad():
        out = ops.mul(a, a)
    assert not out.requires_grad


def test_gradient_accumulates_over_shared_use():
    a = Tensor(np.array([2.0]), requires_grad=True)
    ops.sum(ops.add(ops.mul(a, a), a)).backward()
    np.testing.assert_array_equal(a.grad, [5.0])


# -- activation tape -----------------------------------------------------------------

def test_no_grad_and_tape_are_per_thread():
    # interleaved no_grad blocks on two threads must leave each thread's mode intact
    inside, release = threading.Event(), threading.Event()
    seen = {}

    def worker():
        with no_grad(), ops.activation_tape():
            inside.set()
            release.wait(5)
            seen["worker"] = grad_enabled()

    t = threading.Thread(target=worker)
    with no_grad():
        t.start()
        inside.wait(5)
    seen["main_during"] = grad_enabled()
    ops.leaky_relu(Tensor(np.ones(3)))     # no tape on this thread
    release.set()
    t.join()
    assert seen == {"main_during": True, "worker": False}
    assert grad_enabled()


def test_activation_tape_replays_recorded_masks():
    x = Tensor(np.array([-1.0, 2.0]))
    with ops.activation_tape() as masks:
        ops.leaky_relu(x)
    flipped = Tensor(np.array([1.0, -2.0]))
    with ops.activation_tape(masks):
        out = ops.leaky_relu(flipped)
    # replay applies the slopes recorded at x, not the signs of the new input
    np.testing.assert_allclose(out.data, [0.2, -2.0])


# -- Adam ------------------------------------------------------------------------------

def _scalar_tree(value=0.0):
    tree = ParamTree()
    tree.add("p", np.array([value]))
    return tree


def test_adam_zero_gradient_leaves_parameters():
    tree = _scalar_tree(0.5)
    for _ in range(3):
        adam_step(tree, {"p": np.zeros(1)}, lr=0.1)
    np.testing.assert_array_equal(tree["p"].data, [0.5])


def test_adam_first_step_hand_evaluated():
    tree = _scalar_tree(0.0)
    adam_step(tree, {"p": np.ones(1)}, lr=0.1)
    # t=1: mhat = 1, vhat = 1, step = lr / (1 + eps)
    np.testing.assert_allclose(tree["p"].data, [-0.1 / (1 + 1e-8)], rtol=1e-12)


def test_adam_matches_reference_recurrence(rng):
    grads = rng.standard_normal((20, 3))
    tree = ParamTree()
    tree.add("p", np.zeros(3))
    adam_step_args = dict(lr=0.01, beta1=0.0, beta2=0.99, eps=1e-8)
    p, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, start=1):
        adam_step(tree, {"p": g}, **adam_step_args)
        m = 0.0 * m + g
        v = 0.99 * v + 0.01 * g * g
        p = p - 0.01 * (m / (1 - 0.0 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-8)
    np.testing.assert_allclose(tree["p"].data, p, rtol=1e-12)


def test_adam_trajectories_are_bit_identical(rng):
    grads = rng.standard_normal((10, 4, 4)).astype(np.float32)

    def run():
        tree = tree_from_arrays({"w": fan_in_uniform(np.random.default_rng(5), (4, 4))})
        for g in grads:
            adam_step(tree, {"w": g}, lr=1e-3, beta1=0.0, beta2=0.99)
        return tree["w"].data

    np.testing.assert_array_equal(run(), run())


def test_adam_slots_keep_independent_moments():
    # a large-gradient objective in one slot must not shrink the other slot's steps
    tree = _scalar_tree(0.0)
    adam_step(tree, {"p": np.full(1, 1e4)}, lr=0.1, slot="A")
    before = tree["p"].data.copy()
    adam_step(tree, {"p": np.full(1, 1e-2)}, lr=0.1, slot="T")
    np.testing.assert_allclose(before - tree["p"].data, [0.1], rtol=1e-5)
    assert set(tree.adam) == {"A:p", "T:p"}
    assert tree.adam["A:p"].step == tree.adam["T:p"].step == 1


def test_adam_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        adam_step(_scalar_tree(), {"p": np.ones(1)}, lr=0.1, beta1=1.0)
    with pytest.raises(ShapeError):
        adam_step(_scalar_tree(), {"p": np.ones(2)}, lr=0.1)


# -- parameter file format --------------------------------------------------------

def test_param_file_round_trip(rng):
    arrays = {"a.w": rng.standard_normal((2, 3)).astype(np.float32),
              "b": rng.standard_normal((4,)).astype(np.float32)}
    back, meta = loads(dumps(arrays, {"k": 1}))
    assert meta == {"k": 1}
    assert list(back) == list(arrays)
    for n in arrays:
        np.testing.assert_array_equal(back[n], arrays[n])


def test_param_file_rejects_damage(rng):
    blob = dumps({"w": rng.standard_normal((3, 3)).astype(np.float32)})
    with pytest.raises(ParamFormatError):
        loads(b"XXXX" + blob[4:])
    with pytest.raises(ParamFormatError):
        loads(blob[:-5])
    with pytest.raises(ParamFormatError):
        loads(blob + b"\0")


def test_fan_in_uniform_bounds_and_zero_mean():
    w = fan_in_uniform(np.random.default_rng(0), (64, 8, 3, 3))
    bound = np.sqrt(3.0 / 72)
    assert np.abs(w).max() <= bound
    assert abs(w.mean()) < 0.01
