"""Sum-of-outer-products pooling and its backward pass.

``out[i, j] = sum_{h,w} alpha[i, h, w] * beta[j, h, w]``: the outer product
of the two channel vectors at each location, summed over all locations.
Sums are accumulated in float64 whatever the input dtype.
"""

import numpy as np

from .errors import ShapeMismatch, SpatialShapeMismatch


def _flat(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def bilinear_pool_forward(alpha, beta) -> np.ndarray:
    alpha = np.asarray(alpha)
    beta = np.asarray(beta)
    if alpha.ndim != 3 or beta.ndim != 3 or alpha.shape[1:] != beta.shape[1:]:
        raise SpatialShapeMismatch(f"cannot pool {alpha.shape} with {beta.shape}")
    return _flat(alpha) @ _flat(beta).T


def bilinear_pool_backward(grad_out, alpha, beta):
    """Return ``(grad_alpha, grad_beta)`` shaped like ``alpha`` and ``beta``."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    alpha = np.asarray(alpha)
    beta = np.asarray(beta)
    if (alpha.ndim != 3 or beta.ndim != 3 or alpha.shape[1:] != beta.shape[1:]
            or grad_out.shape != (alpha.shape[0], beta.shape[0])):
        raise ShapeMismatch(f"grad {grad_out.shape} inconsistent with {alpha.shape} x {beta.shape}")
    grad_alpha = (grad_out @ _flat(beta)).reshape(alpha.shape)
    grad_beta = (grad_out.T @ _flat(alpha)).reshape(beta.shape)
    return grad_alpha, grad_beta


# Classic bilinear-CNN post-processing: y = sign(x) sqrt(|x|), z = y / ||y||.
# Off by default in the model; enabled with ``bcnn_normalize``.

_EPS = 1e-12


def bcnn_normalize_forward(pooled):
    pooled = np.asarray(pooled, dtype=np.float64)
    y = np.sign(pooled) * np.sqrt(np.abs(pooled))
    norm = max(np.linalg.norm(y), _EPS)
    return y / norm, (pooled, y, norm)


def bcnn_normalize_backward(grad_z, cache):
    pooled, y, norm = cache
    z = y / norm
    grad_y = (grad_z - z * np.sum(grad_z * z)) / norm
    # d sqrt|x| sign(x) / dx = 1 / (2 sqrt|x|); zero entries get a zero subgradient
    root = np.sqrt(np.abs(pooled))
    with np.errstate(divide="ignore", invalid="ignore"):
        dydx = np.where(root > 0, 0.5 / root, 0.0)
    return grad_y * dydx
