"""Pure-numpy versions of the elementwise training kernels.

Each function mirrors one in ``_kernels.pyx`` operation for operation, so the
two backends agree bit for bit on IEEE-754 hardware.
"""

import numpy as np


def bias_act_forward(z, bias, slope):
    """Add ``bias`` to ``z`` in place; return ``(activation, all_finite)``.

    ``slope`` of ``None`` means linear, in which case the activation is ``z``.
    """
    z += bias
    finite = bool(np.isfinite(z).all())
    if slope is None:
        return z, finite
    return np.where(z >= 0.0, z, slope * z), finite


def leaky_relu_backward(grad, z, slope):
    """Return ``(delta, column_sums)`` with ``delta = grad * act'(z)``."""
    delta = np.where(z >= 0.0, grad, slope * grad)
    return delta, delta.sum(axis=0)


def add_l1_subgradient(grad, weights, coef):
    # np.sign(0) == 0 gives the zero subgradient at the kink
    grad += coef * np.sign(weights)
    return grad


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, corr1, corr2):
    """In-place ADAM step; ``corr1``/``corr2`` are ``1 - beta**t``."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    param -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
