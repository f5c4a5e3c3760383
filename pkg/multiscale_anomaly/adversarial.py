"""The generators of resembled vectors and the real/resembled classifiers."""
import logging
from typing import Dict
from typing import Optional
from typing import Tuple

import numpy as np

from multiscale_anomaly.representation import BlockState
from multiscale_anomaly.representation import Params
from multiscale_anomaly.representation import RnnParams
from multiscale_anomaly.representation import block_forward
from multiscale_anomaly.tensor import Rng
from multiscale_anomaly.tensor import ShapeError
from multiscale_anomaly.tensor import Tensor
from multiscale_anomaly.tensor import gaussian_sample
from multiscale_anomaly.tensor import leaky_relu
from multiscale_anomaly.tensor import matmul
from multiscale_anomaly.tensor import reshape
from multiscale_anomaly.tensor import sigmoid

logger = logging.getLogger('adversarial')

HEADS = ('instance', 'block')


class AutoencoderParams(object):

    def __init__(self, W_enc: Tensor, b_enc: Tensor, W_dec: Tensor,
                 b_dec: Tensor):
        width, code = W_enc.shape
        if (b_enc.shape != (code, ) or W_dec.shape != (code, width)
                or b_dec.shape != (width, )):
            raise ShapeError(f'autoencoder: W_enc {list(W_enc.shape)}, '
                             f'W_dec {list(W_dec.shape)}')
        self.W_enc = W_enc
        self.b_enc = b_enc
        self.W_dec = W_dec
        self.b_dec = b_dec

    @staticmethod
    def from_params(params: Params) -> 'AutoencoderParams':
        return AutoencoderParams(params['ae.W_enc'], params['ae.b_enc'],
                                 params['ae.W_dec'], params['ae.b_dec'])

    @staticmethod
    def shapes(width: int, code: int) -> Dict[str, Tuple[int, ...]]:
        return {
            'ae.W_enc': (width, code),
            'ae.b_enc': (code, ),
            'ae.W_dec': (code, width),
            'ae.b_dec': (width, ),
        }

    @property
    def width(self) -> int:
        return self.W_enc.shape[0]

    @property
    def code_width(self) -> int:
        return self.W_enc.shape[1]


def generate_instance(v_instance: Tensor,
                      params: AutoencoderParams,
                      rng: Optional[Rng] = None,
                      noise_enabled: bool = True,
                      slope: float = 0.01,
                      output: str = 'linear') -> Tuple[Tensor, Tensor]:
    """The resembled instance vectors and the noise used.

    h = (f(v) + noise) W_enc + b_enc
    v* = g(f(h) W_dec + b_dec) - noise
    where g is the identity for the "linear" `output`, and f for
    "leaky_relu". With "leaky_relu" the zero-noise output has no entries
    below -slope * |x|, while standardized instance vectors do.
    The same noise sample is added before the encoder and subtracted after
    the decoder. Without `rng`, or when disabled, the noise is zero.
    `v_instance` is one vector or one row per instance."""
    if v_instance.shape[-1] != params.width:
        raise ShapeError(f'generate_instance: input {list(v_instance.shape)}'
                         f', autoencoder width {params.width}')
    if noise_enabled and rng is not None:
        noise = gaussian_sample(v_instance.shape, rng)
    else:
        noise = Tensor(np.zeros(v_instance.shape))
    code = matmul(leaky_relu(v_instance, slope) + noise,
                  params.W_enc) + params.b_enc
    decoded = matmul(leaky_relu(code, slope), params.W_dec) + params.b_dec
    if output == 'leaky_relu':
        decoded = leaky_relu(decoded, slope)
    elif output != 'linear':
        raise ValueError(f'Unknown decoder output "{output}"')
    return decoded - noise, noise


def generate_block(resembled_instances: Tensor,
                   rnn: RnnParams,
                   prev_state: Tensor,
                   slope: float = 0.01) -> BlockState:
    """Runs a value copy of the block RNN over the resembled instances.

    Gradients reach the resembled instances but never the RNN parameters."""
    return block_forward(resembled_instances, prev_state, rnn.snapshot(),
                         slope)


class DiscriminatorParams(object):
    """One-layer sigmoid classifiers for instance and block vectors."""

    def __init__(self, W_i: Tensor, b_i: Tensor, W_b: Tensor, b_b: Tensor):
        for W, b in ((W_i, b_i), (W_b, b_b)):
            if W.ndim != 2 or W.shape[1] != 1 or b.shape != (1, ):
                raise ShapeError(f'discriminator: W {list(W.shape)}, b '
                                 f'{list(b.shape)}')
        self.W_i = W_i
        self.b_i = b_i
        self.W_b = W_b
        self.b_b = b_b

    @staticmethod
    def from_params(params: Params) -> 'DiscriminatorParams':
        return DiscriminatorParams(params['disc.W_i'], params['disc.b_i'],
                                   params['disc.W_b'], params['disc.b_b'])

    @staticmethod
    def shapes(instance_dim: int,
               hidden: int) -> Dict[str, Tuple[int, ...]]:
        return {
            'disc.W_i': (instance_dim, 1),
            'disc.b_i': (1, ),
            'disc.W_b': (hidden, 1),
            'disc.b_b': (1, ),
        }

    def head(self, head: str) -> Tuple[Tensor, Tensor]:
        if head == 'instance':
            return self.W_i, self.b_i
        if head == 'block':
            return self.W_b, self.b_b
        raise ValueError(f'Unknown discriminator head "{head}"')


def discriminate(x: Tensor, params: DiscriminatorParams,
                 head: str) -> Tensor:
    """The probability that `x` is real; one per row when `x` is a matrix."""
    W, b = params.head(head)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f'discriminate[{head}]: input {list(x.shape)}, '
                         f'expected width {W.shape[0]}')
    probability = sigmoid(matmul(x, W) + b)
    return reshape(probability, x.shape[:-1])
