import concurrent.futures
import math
import threading

import numpy as np
import pytest

from multiscale_anomaly import OptimizerState
from multiscale_anomaly import Rng
from multiscale_anomaly import ShapeError
from multiscale_anomaly import Tape
from multiscale_anomaly import Tensor
from multiscale_anomaly import activation
from multiscale_anomaly import backward
from multiscale_anomaly import batch_norm
from multiscale_anomaly import clamp
from multiscale_anomaly import concat
from multiscale_anomaly import gaussian_sample
from multiscale_anomaly import leaky_relu
from multiscale_anomaly import log
from multiscale_anomaly import matmul
from multiscale_anomaly import reduce_mean
from multiscale_anomaly import reduce_sum
from multiscale_anomaly import rmsprop_step
from multiscale_anomaly import segment_softmax
from multiscale_anomaly import segment_sum
from multiscale_anomaly import sigmoid
from multiscale_anomaly import softmax
from multiscale_anomaly import stack
from multiscale_anomaly import stop_gradient
from multiscale_anomaly import take
from multiscale_anomaly import tanh

from gradcheck import check_gradient
from gradcheck import finite_difference
from gradcheck import relative_error


def test_tensor_values_are_read_only():
    values = np.array([1.0, 2.0])
    t = Tensor(values)
    values[0] = 5
    assert t.values[0] == 1.0
    with pytest.raises(ValueError):
        t.values[0] = 3


def test_matmul():
    identity = Tensor(np.eye(2))
    b = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul(identity, b).values, b.values)
    projected = matmul(Tensor([[1, 0], [0, 0]]), Tensor([[5], [7]]))
    np.testing.assert_array_equal(projected.values, [[5], [0]])


def test_matmul_shape_error():
    with pytest.raises(ShapeError) as e:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert '[2, 3]' in str(e.value)


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = Tensor(rng.normal(size=(4, 2)))
    x = Tensor.parameter(a)
    with Tape() as tape:
        loss = reduce_sum(matmul(x, b))
        grad = backward(loss, tape)[x]
    numeric = finite_difference(lambda v: matmul(Tensor(v), b).values.sum(),
                                a)
    assert relative_error(grad, numeric) < 1e-5
    np.testing.assert_allclose(grad, np.ones((3, 2)) @ b.values.T)


def test_activation_values():
    assert sigmoid(Tensor(0.0)).item() == 0.5
    x = Tensor.parameter(0.0)
    with Tape() as tape:
        grad = backward(sigmoid(x), tape)[x]
    assert grad == pytest.approx(0.25)

    for c in (-3.0, 0.0, 100.0):
        np.testing.assert_allclose(
            softmax(Tensor([c, c, c])).values, [1 / 3, 1 / 3, 1 / 3])

    assert leaky_relu(Tensor(-2.0), 0.01).item() == pytest.approx(-0.02)
    assert leaky_relu(Tensor(3.0), 0.01).item() == 3.0
    assert activation('leaky_relu', Tensor(-1.0),
                      slope=0.2).item() == pytest.approx(-0.2)
    assert activation('log', Tensor(math.e)).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        activation('relu6', Tensor(1.0))


def test_log_of_non_positive():
    with pytest.raises(AssertionError):
        log(Tensor([1.0, 0.0]))


def test_softmax_sums_to_one():
    rng = np.random.default_rng(1)
    y = softmax(Tensor(rng.normal(size=(4, 5)) * 10), axis=1).values
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize('build', [
    lambda x: reduce_sum(tanh(x)),
    lambda x: reduce_sum(sigmoid(x) * x),
    lambda x: reduce_sum(leaky_relu(x, 0.1) * x),
    lambda x: reduce_sum(softmax(x, axis=1) * Tensor(np.arange(12.0).
                                                     reshape(3, 4))),
    lambda x: reduce_sum(softmax(x, axis=0) * x),
    lambda x: reduce_sum(log(x * x + 1.0)),
    lambda x: reduce_sum(clamp(x, -10.0, 10.0) * x),
    lambda x: reduce_sum(x.T @ Tensor(np.ones((3, 2)))),
    lambda x: reduce_sum(x.reshape(4, 3) * Tensor(np.arange(12.0).
                                                  reshape(4, 3))),
    lambda x: reduce_mean(x, axis=0).sum() + reduce_sum(x, axis=1).sum(),
    lambda x: reduce_sum(concat([x, x * x], axis=1)),
    lambda x: reduce_sum(stack([x[0], x[2]]) * x[1]),
    lambda x: reduce_sum(take(x, np.array([0, 2, 2])) * x[1]),
    lambda x: reduce_sum((x - 1.0) * (2.0 - x)),
])
def test_operation_gradients(build):
    rng = np.random.default_rng(2)
    values = rng.uniform(0.2, 1.5, size=(3, 4)) * rng.choice([-1, 1],
                                                             size=(3, 4))
    check_gradient(build, values)


def test_batch_norm_values():
    x = Tensor([[0.0], [2.0]])
    np.testing.assert_allclose(batch_norm(x, 0.0).values, [[-1.0], [1.0]])
    np.testing.assert_array_equal(
        batch_norm(Tensor([[3.0, -1.0, 7.0]])).values, np.zeros((1, 3)))
    with pytest.raises(ShapeError):
        batch_norm(Tensor([1.0, 2.0]))


def test_batch_norm_statistics():
    rng = np.random.default_rng(3)
    values = rng.normal(size=(4, 3)) * 5 + 2
    epsilon = 1e-5
    y = batch_norm(Tensor(values), epsilon).values
    assert np.abs(y.mean(axis=0)).max() < 1e-9
    variance = values.var(axis=0)
    np.testing.assert_allclose(y.var(axis=0),
                               variance / (variance + epsilon),
                               atol=1e-6)


def test_batch_norm_gradient():
    rng = np.random.default_rng(4)
    weights = Tensor(rng.normal(size=(5, 3)))
    check_gradient(lambda x: reduce_sum(batch_norm(x) * weights),
                   rng.normal(size=(5, 3)))


def test_segment_operations():
    segments = np.array([0, 0, 1, 3, 3, 3])
    scores = Tensor([1.0, 1.0, 5.0, 0.0, 0.0, 0.0])
    weights = segment_softmax(scores, segments, 4).values
    np.testing.assert_allclose(weights, [.5, .5, 1., 1 / 3, 1 / 3, 1 / 3])

    values = Tensor(np.arange(12.0).reshape(6, 2))
    sums = segment_sum(values, segments, 4).values
    np.testing.assert_array_equal(sums[2], [0, 0])
    np.testing.assert_array_equal(sums[0], [2, 4])

    rng = np.random.default_rng(5)
    targets = Tensor(rng.normal(size=(4, 2)))
    check_gradient(
        lambda x: reduce_sum(
            segment_sum(
                x * reshape_column(segment_softmax(x[:, 0], segments, 4)),
                segments, 4) * targets), rng.normal(size=(6, 2)))


def reshape_column(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], 1)


def test_composite_gradient():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(3, )))
    check_gradient(lambda w: reduce_sum(tanh(matmul(w, reshape_column(x)))),
                   rng.normal(size=(4, 3)))


def test_backward_scalar_leaf():
    x = Tensor.parameter(3.0)
    with Tape() as tape:
        grads = backward(x, tape)
    assert grads[x] == 1.0


def test_backward_non_scalar():
    x = Tensor.parameter([1.0, 2.0])
    with Tape() as tape:
        y = tanh(x)
        with pytest.raises(ShapeError):
            backward(y, tape)


def test_backward_not_on_tape():
    x = Tensor.parameter([1.0, 2.0])
    with Tape():
        y = reduce_sum(x)
    with Tape() as other:
        with pytest.raises(ShapeError):
            backward(y, other)


def test_stop_gradient():
    x = Tensor.parameter([1.0, 2.0])
    w = Tensor.parameter([3.0, 4.0])
    with Tape() as tape:
        loss = reduce_sum(stop_gradient(x) * w)
        grads = backward(loss, tape)
    np.testing.assert_array_equal(grads[x], [0.0, 0.0])
    np.testing.assert_array_equal(grads[w], [1.0, 2.0])


def test_no_recording_outside_tape():
    x = Tensor.parameter([1.0])
    y = tanh(x)
    assert not y.requires_grad
    with Tape() as tape:
        tanh(Tensor([1.0]))
    assert len(tape) == 0


def test_gaussian_sample():
    a = gaussian_sample((3, 4), Rng(7))
    b = gaussian_sample((3, 4), Rng(7))
    np.testing.assert_array_equal(a.values, b.values)
    c = gaussian_sample((3, 4), Rng(8))
    assert (a.values != c.values).any()

    samples = gaussian_sample((100000, ), Rng(0)).values
    assert abs(samples.mean()) < 0.02
    assert abs(samples.var() - 1) < 0.03


def test_rng_streams_and_state():
    rng = Rng(3)
    a = rng.stream('noise').normal(4)
    b = rng.stream('noise').normal(4)
    np.testing.assert_array_equal(a, b)
    assert (rng.stream('init').normal(4) != a).any()

    state = rng.state
    first = rng.normal(3)
    rng.state = state
    np.testing.assert_array_equal(rng.normal(3), first)


def test_rmsprop_zero_gradient():
    params = {'p': Tensor.parameter([1.0, -2.0])}
    state = OptimizerState()
    state.accumulators['p'] = np.array([1.0, 0.5])
    new_params, new_state = rmsprop_step(params, {'p': np.zeros(2)}, state)
    np.testing.assert_array_equal(new_params['p'].values, [1.0, -2.0])
    np.testing.assert_allclose(new_state.accumulators['p'], [0.9, 0.45])
    # The input state is not modified.
    np.testing.assert_array_equal(state.accumulators['p'], [1.0, 0.5])


def test_rmsprop_one_step():
    params = {'p': Tensor.parameter(1.0)}
    state = OptimizerState(learning_rate=0.01, decay=0.9, epsilon=1e-8)
    new_params, new_state = rmsprop_step(params, {'p': np.array(2.0)}, state)
    assert new_state.accumulators['p'] == pytest.approx(0.4)
    assert new_params['p'].item() == pytest.approx(
        1 - 0.01 * 2 / math.sqrt(0.4 + 1e-8), abs=1e-15)


def test_rmsprop_deterministic():

    def run():
        params = {'w': Tensor.parameter(Rng(1).normal((3, 2)))}
        state = OptimizerState()
        for _ in range(2):
            with Tape() as tape:
                loss = reduce_sum(tanh(params['w']) * params['w'])
                grads = backward(loss, tape)
            params, state = rmsprop_step(params, grads.for_names(params),
                                         state)
        return params['w'].values

    np.testing.assert_array_equal(run(), run())


def test_rmsprop_clip():
    params = {'p': Tensor.parameter(0.0)}
    state = OptimizerState(clip=1.0)
    _, new_state = rmsprop_step(params, {'p': np.array(5.0)}, state)
    assert new_state.accumulators['p'] == pytest.approx(0.1)


def test_rmsprop_shape_mismatch():
    params = {'p': Tensor.parameter([1.0, 2.0])}
    with pytest.raises(ShapeError):
        rmsprop_step(params, {'p': np.zeros(3)}, OptimizerState())


def test_tapes_are_per_thread():
    barrier = threading.Barrier(2, timeout=10)

    def run(scale: float):
        x = Tensor.parameter([1.0, 2.0, 3.0])
        with Tape() as tape:
            barrier.wait()
            y = tanh(x * scale)
            barrier.wait()
            loss = reduce_sum(y * y)
            barrier.wait()
            grads = backward(loss)
            assert loss in tape and y in tape
        return grads[x], x.numpy(), scale

    with concurrent.futures.ThreadPoolExecutor(max_workers=2) as executor:
        results = list(executor.map(run, [0.5, 2.0]))
    assert Tape.current() is None
    for grad, values, scale in results:
        t = np.tanh(values * scale)
        np.testing.assert_allclose(grad, 2 * t * (1 - t * t) * scale)
