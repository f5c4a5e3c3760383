import math

import numpy as np
import pytest

from multiscale_anomaly import PROB_MAX
from multiscale_anomaly import AutoencoderParams
from multiscale_anomaly import BlockState
from multiscale_anomaly import DiscriminatorParams
from multiscale_anomaly import Rng
from multiscale_anomaly import ShapeError
from multiscale_anomaly import Tape
from multiscale_anomaly import Tensor
from multiscale_anomaly import backward
from multiscale_anomaly import block_forward
from multiscale_anomaly import clamp_probability
from multiscale_anomaly import discriminate
from multiscale_anomaly import generate_block
from multiscale_anomaly import generate_instance
from multiscale_anomaly import reduce_sum


def _autoencoder(W_enc, b_enc, W_dec, b_dec, parameter=False):
    make = Tensor.parameter if parameter else Tensor
    return AutoencoderParams(make(W_enc), make(b_enc), make(W_dec),
                             make(b_dec))


def _zero_autoencoder(width=4, code=2):
    return _autoencoder(np.zeros((width, code)), np.zeros(code),
                        np.zeros((code, width)), np.zeros(width))


def test_generate_instance_zero_weights():
    v = Tensor([[0.3, -1.2, 0.5, 2.0], [1.0, 0.0, -0.4, 0.2]])
    resembled, noise = generate_instance(v, _zero_autoencoder())
    np.testing.assert_array_equal(resembled.values, np.zeros((2, 4)))
    np.testing.assert_array_equal(noise.values, np.zeros((2, 4)))


@pytest.mark.parametrize('output', ['linear', 'leaky_relu'])
def test_generate_instance_by_hand(output):
    rng = np.random.default_rng(21)
    W_enc = rng.uniform(-0.5, 0.5, (3, 2))
    b_enc = rng.uniform(-0.1, 0.1, 2)
    W_dec = rng.uniform(-0.5, 0.5, (2, 3))
    b_dec = rng.uniform(-0.1, 0.1, 3)
    v = [0.4, -0.9, 0.25]

    def f(x):
        return x if x > 0 else 0.01 * x

    g = f if output == 'leaky_relu' else (lambda x: x)
    code = [
        b_enc[k] + sum(f(v[j]) * W_enc[j][k] for j in range(3))
        for k in range(2)
    ]
    expected = [
        g(b_dec[j] + sum(f(code[k]) * W_dec[k][j] for k in range(2)))
        for j in range(3)
    ]
    resembled, _ = generate_instance(Tensor(v),
                                     _autoencoder(W_enc, b_enc, W_dec, b_dec),
                                     output=output)
    np.testing.assert_allclose(resembled.values, expected, rtol=0, atol=1e-12)


def test_generate_instance_reaches_negative_entries():
    # A rank-one path that maps v to v for inputs along (1, -1, 1, -1).
    u = np.array([1.0, -1.0, 1.0, -1.0]) / 2
    v = Tensor(np.outer([1.5, -2.0, 0.5], u * 2))
    params = _autoencoder(u[:, None], np.zeros(1), u[None, :],
                          np.zeros(4))
    linear, _ = generate_instance(v, params, slope=1.0)
    np.testing.assert_allclose(linear.values, v.values, atol=1e-12)
    assert linear.values.min() < -1

    leaky, _ = generate_instance(v, params, slope=0.01, output='leaky_relu')
    assert leaky.values.min() > -0.1
    with pytest.raises(ValueError):
        generate_instance(v, params, output='sigmoid')


def test_generate_instance_noise_deterministic():
    params = _autoencoder(np.full((4, 2), 0.2), np.zeros(2),
                          np.full((2, 4), -0.3), np.zeros(4))
    v = Tensor(np.linspace(-1, 1, 8).reshape(2, 4))
    a, noise_a = generate_instance(v, params, Rng(5).stream('noise'))
    b, noise_b = generate_instance(v, params, Rng(5).stream('noise'))
    np.testing.assert_array_equal(noise_a.values, noise_b.values)
    np.testing.assert_array_equal(a.values, b.values)
    assert (noise_a.values != 0).any()

    disabled, noise = generate_instance(v,
                                        params,
                                        Rng(5).stream('noise'),
                                        noise_enabled=False)
    centered, _ = generate_instance(v, params)
    np.testing.assert_array_equal(noise.values, np.zeros((2, 4)))
    np.testing.assert_array_equal(disabled.values, centered.values)


def test_generate_instance_noise_cancels():
    # An identity path: the same noise is added and subtracted.
    width = 4
    params = _autoencoder(np.eye(width), np.zeros(width), np.eye(width),
                          np.zeros(width))
    v = Tensor([0.3, -1.2, 0.5, 2.0])
    for seed in range(3):
        resembled, noise = generate_instance(v,
                                             params,
                                             Rng(seed),
                                             slope=1.0)
        assert (noise.values != 0).all()
        np.testing.assert_allclose(resembled.values, v.values, atol=1e-12)


def test_generate_instance_shape_error():
    with pytest.raises(ShapeError):
        generate_instance(Tensor(np.zeros(3)), _zero_autoencoder())


def test_generate_block_matches_real_chain(tiny_model):
    rnn = tiny_model.rnn
    width = rnn.W_in.shape[0]
    vectors = Tensor(np.random.default_rng(3).normal(size=(5, width)))
    prev = Tensor(np.linspace(-0.5, 0.5, rnn.hidden_size))
    real = block_forward(vectors, prev, rnn)
    fake = generate_block(vectors, rnn, prev)
    np.testing.assert_array_equal(fake.final.values, real.final.values)
    np.testing.assert_array_equal(fake.states.values, real.states.values)

    # Biases are initialized to zero.
    zero = generate_block(Tensor(np.zeros((3, width))), rnn.snapshot(),
                          BlockState.zeros(rnn.hidden_size))
    np.testing.assert_array_equal(zero.final.values,
                                  np.zeros(rnn.hidden_size))


def test_generate_block_stops_rnn_gradient(tiny_model):
    rnn = tiny_model.rnn
    width = rnn.W_in.shape[0]
    inputs = Tensor.parameter(
        np.random.default_rng(4).normal(size=(3, width)))
    with Tape() as tape:
        fake = generate_block(inputs, rnn, BlockState.zeros(rnn.hidden_size))
        grads = backward(reduce_sum(fake.final), tape)
    for tensor in (rnn.W_in, rnn.W_rec, rnn.b):
        assert tensor not in grads
        np.testing.assert_array_equal(grads[tensor], np.zeros(tensor.shape))
    assert np.abs(grads[inputs]).max() > 0


def _discriminator(W_i, b_i, W_b=((0.0, ), (0.0, )), b_b=(0.0, )):
    return DiscriminatorParams(Tensor(W_i), Tensor(b_i), Tensor(W_b),
                               Tensor(b_b))


def test_discriminate_zero_weights():
    params = _discriminator(np.zeros((3, 1)), [0.0])
    x = Tensor([[5.0, -3.0, 1.0], [0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(
        discriminate(x, params, 'instance').values, [0.5, 0.5])
    assert discriminate(Tensor([1.0, 2.0]), params,
                        'block').item() == 0.5


def test_discriminate_saturation():
    params = _discriminator(np.zeros((3, 1)), [40.0])
    y = discriminate(Tensor([1.0, 2.0, 3.0]), params, 'instance')
    assert y.item() <= 1.0
    assert clamp_probability(y).item() == PROB_MAX


def test_discriminate_by_hand():
    W = [[0.2], [-0.5], [0.1]]
    params = _discriminator(W, [0.05])
    x = [0.4, 0.3, -1.0]
    z = 0.05 + sum(x[j] * W[j][0] for j in range(3))
    expected = 1 / (1 + math.exp(-z))
    assert discriminate(Tensor(x), params,
                        'instance').item() == pytest.approx(expected,
                                                            abs=1e-15)


def test_discriminate_errors():
    params = _discriminator(np.zeros((3, 1)), [0.0])
    with pytest.raises(ShapeError):
        discriminate(Tensor([1.0, 2.0]), params, 'instance')
    with pytest.raises(ValueError):
        discriminate(Tensor([1.0, 2.0]), params, 'attribute')
    with pytest.raises(ShapeError):
        DiscriminatorParams(Tensor(np.zeros((3, 2))), Tensor([0.0]),
                            Tensor(np.zeros((2, 1))), Tensor([0.0]))
