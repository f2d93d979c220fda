"""Neural-network primitives with explicit forward/backward pairs.

No autodiff tape anywhere in this package: every trainable op comes as a
(forward, backward) pair whose adjoint is written out by hand and pinned by
finite-difference tests.  Convolutions are 3x3, zero-padded, expressed as
im2col + GEMM.
"""

from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.01


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def leaky_relu_grad(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """d(leaky_relu)/dx * grad_out, using slope at x == 0."""
    return np.where(x > 0, 1.0, LEAKY_SLOPE) * grad_out


def _patches(x: np.ndarray) -> np.ndarray:
    """(h, w, cin) -> (h, w, 9*cin) of zero-padded 3x3 neighborhoods."""
    h, w, c = x.shape
    p = np.zeros((h + 2, w + 2, c), dtype=x.dtype)
    p[1:-1, 1:-1] = x
    cols = [p[di:di + h, dj:dj + w] for di in range(3) for dj in range(3)]
    return np.concatenate(cols, axis=-1)


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 convolution: (h,w,cin) x (3,3,cin,cout) -> (h,w,cout)."""
    h, w, cin = x.shape
    cout = weight.shape[-1]
    out = _patches(x).reshape(h * w, 9 * cin) @ weight.reshape(9 * cin, cout)
    return out.reshape(h, w, cout) + bias


def conv3x3_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dweight, dbias) for conv3x3.

    dweight comes from the im2col product; dx is the correlation of grad_out
    with the kernel flipped in both spatial directions and transposed in
    channels — implemented by reusing conv3x3 itself.
    """
    h, w, cin = x.shape
    cout = weight.shape[-1]
    g = grad_out.reshape(h * w, cout)
    dweight = (_patches(x).reshape(h * w, 9 * cin).T @ g).reshape(weight.shape)
    dbias = grad_out.sum(axis=(0, 1))
    flipped = weight[::-1, ::-1].transpose(0, 1, 3, 2)  # (3,3,cout,cin)
    dx = conv3x3(grad_out, flipped, np.zeros(cin, dtype=x.dtype))
    return dx, dweight, dbias


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus_grad(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out / (1.0 + np.exp(-x))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stable softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over leading axes plus gradient wrt logits.

    logits: (..., C); labels: (...) integer class indices.
    Returns (loss, grad) with grad = (softmax - onehot) / n_pixels.
    """
    flat = logits.reshape(-1, logits.shape[-1])
    lab = labels.reshape(-1)
    n = flat.shape[0]
    z = flat - flat.max(axis=-1, keepdims=True)
    logprob = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -logprob[np.arange(n), lab].mean()
    grad = np.exp(logprob)
    grad[np.arange(n), lab] -= 1.0
    return float(loss), (grad / n).reshape(logits.shape)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              scale: float = 1.0) -> np.ndarray:
    """He-style normal init; ``scale`` < 1 keeps residual branches gentle."""
    return rng.normal(0.0, scale * np.sqrt(2.0 / fan_in), size=shape)
