"""C -> K channel reduction fitted on sampled feature vectors (PCA whitening, FastICA).

The fitted basis is used as the initial value of a 1x1 convolution
``beta[k, h, w] = sum_c weights[c, k] * alpha[c, h, w] + bias[k]``; after
initialization both tensors are ordinary trainable parameters.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from ._binio import Reader, check_trailing_crc, crc32
from .errors import (
    ConvergenceWarning,
    CorruptRecord,
    DegenerateSamples,
    PerImageTooLarge,
    RankDeficient,
    ShapeMismatch,
)

FTPJ_MAGIC = b"FTPJ"
FTPJ_VERSION = 1
METHOD_CODES = {"pca": 0, "ica": 1}

DEFAULT_COMPONENTS = 20
DEFAULT_PER_IMAGE = 50
DEFAULT_MAX_ITER = 200
DEFAULT_TOL = 1e-4


@dataclass
class SampleBank:
    samples: np.ndarray  # [M, C]
    seed: int = 0


@dataclass
class ProjectionBasis:
    """Weights ``[C, K]`` and bias ``[K]`` of the 1x1 projection plus fit diagnostics.

    ``whitening`` is the ``[C, K]`` PCA whitening matrix the basis was built
    on and ``mean`` the ``[C]`` sample mean; both are ``None`` for a basis
    loaded from disk.
    """

    weights: np.ndarray
    bias: np.ndarray
    method: str
    mean: np.ndarray | None = None
    whitening: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None
    n_iter: int = 0
    converged: bool = True
    extra: dict = field(default_factory=dict)

    @property
    def channels(self) -> int:
        return self.weights.shape[0]

    @property
    def components(self) -> int:
        return self.weights.shape[1]


def sample_locations(store, ids, per_image: int, seed: int) -> SampleBank:
    """Draw ``per_image`` distinct spatial positions from each map (seeded) as C-vectors."""
    rng = seeding.stream(seed, "sample_locations")
    rows = []
    for image_id in ids:
        fm = store.read(image_id)
        c, h, w = fm.values.shape
        if per_image > h * w:
            raise PerImageTooLarge(f"per_image={per_image} exceeds {h}x{w} locations of image {image_id}")
        pick = rng.choice(h * w, size=per_image, replace=False)
        rows.append(fm.values.reshape(c, h * w)[:, pick].T)
    if rows:
        samples = np.concatenate(rows).astype(np.float64)
    else:
        samples = np.zeros((0, store.channels))
    if samples.shape[0] < 10 * samples.shape[1]:
        warnings.warn(f"only {samples.shape[0]} samples for {samples.shape[1]} channels; at least 10x recommended")
    return SampleBank(samples, seed)


def _fix_signs(weights):
    """Flip each column so its largest-magnitude entry is positive."""
    pivot = weights[np.argmax(np.abs(weights), axis=0), np.arange(weights.shape[1])]
    return weights * np.where(pivot < 0, -1.0, 1.0)


def _bank_array(bank):
    return bank.samples if isinstance(bank, SampleBank) else np.asarray(bank, dtype=np.float64)


def _whiten(x, k):
    m, c = x.shape
    if k > c:
        raise RankDeficient(f"requested {k} components from {c}-channel samples")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / m
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = evals[0] if evals.size else 0.0
    if not top > 0:
        raise DegenerateSamples("samples have zero variance")
    positive = int(np.sum(evals > top * max(c, m) * np.finfo(float).eps))
    if k > positive:
        raise RankDeficient(f"requested {k} components but covariance has only {positive} positive eigenvalues")
    return mean, evals, evecs


def fit_pca(bank, k: int) -> ProjectionBasis:
    """Whitening PCA: top-``k`` eigenvectors scaled so projections have unit variance.

    Variance uses the 1/M normalization, and the bias centers the projected
    samples at zero.
    """
    x = _bank_array(bank)
    mean, evals, evecs = _whiten(x, k)
    weights = _fix_signs(evecs[:, :k] / np.sqrt(evals[:k]))
    return ProjectionBasis(
        weights=weights,
        bias=-weights.T @ mean,
        method="pca",
        mean=mean,
        whitening=weights.copy(),
        eigenvalues=evals,
    )


def _sym_decorrelate(w):
    # W <- (W W^T)^{-1/2} W
    s, u = np.linalg.eigh(w @ w.T)
    s = np.clip(s, np.finfo(float).tiny, None)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ w


def fit_fastica(bank, k: int, max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL,
                seed: int = 0) -> ProjectionBasis:
    """Symmetric fixed-point FastICA with the log-cosh contrast (g = tanh).

    Data are first whitened to ``k`` dimensions, then the unmixing matrix is
    iterated from a seeded random start until the largest
    ``|1 - |<w_new, w_old>||`` over rows drops below ``tol``. Stopping at
    ``max_iter`` sets ``converged=False`` and emits a ``ConvergenceWarning``.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if not tol > 0:
        raise ValueError("tol must be positive")
    x = _bank_array(bank)
    pca = fit_pca(x, k)
    z = (x - pca.mean) @ pca.whitening
    m = z.shape[0]

    rng = seeding.stream(seed, "fastica")
    w = _sym_decorrelate(rng.standard_normal((k, k)))
    converged = False
    for n_iter in range(1, max_iter + 1):
        g = np.tanh(z @ w.T)
        g_prime = 1.0 - g ** 2
        w_new = _sym_decorrelate(g.T @ z / m - g_prime.mean(axis=0)[:, None] * w)
        lim = np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0))
        w = w_new
        if lim < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"FastICA did not reach tol={tol} in {max_iter} iterations", ConvergenceWarning)

    weights = _fix_signs(pca.whitening @ w.T)
    return ProjectionBasis(
        weights=weights,
        bias=-weights.T @ pca.mean,
        method="ica",
        mean=pca.mean,
        whitening=pca.whitening,
        eigenvalues=pca.eigenvalues,
        n_iter=n_iter,
        converged=converged,
    )


def project_forward(weights, bias, alpha) -> np.ndarray:
    """1x1 convolution of a ``[C, H, W]`` map to ``[K, H, W]``."""
    weights = np.asarray(weights)
    alpha = np.asarray(alpha)
    if alpha.ndim != 3 or alpha.shape[0] != weights.shape[0] or np.shape(bias) != (weights.shape[1],):
        raise ShapeMismatch(
            f"projection weights {weights.shape} / bias {np.shape(bias)} do not fit feature map {alpha.shape}"
        )
    return np.einsum("ck,chw->khw", weights, alpha) + np.asarray(bias)[:, None, None]


def project_backward(grad_beta, alpha, weights):
    """Gradients of :func:`project_forward` w.r.t. alpha, weights and bias."""
    grad_beta = np.asarray(grad_beta)
    alpha = np.asarray(alpha)
    weights = np.asarray(weights)
    if (alpha.ndim != 3 or grad_beta.ndim != 3 or alpha.shape[0] != weights.shape[0]
            or grad_beta.shape != (weights.shape[1],) + alpha.shape[1:]):
        raise ShapeMismatch(
            f"grad {grad_beta.shape} inconsistent with alpha {alpha.shape} and weights {weights.shape}"
        )
    grad_alpha = np.einsum("ck,khw->chw", weights, grad_beta)
    grad_weights = np.einsum("chw,khw->ck", alpha, grad_beta)
    grad_bias = grad_beta.sum(axis=(1, 2))
    return grad_alpha, grad_weights, grad_bias


def write_basis(basis: ProjectionBasis, sink) -> None:
    c, k = basis.weights.shape
    out = bytearray(FTPJ_MAGIC)
    out += struct.pack("<IIIB", FTPJ_VERSION, c, k, METHOD_CODES[basis.method])
    out += np.ascontiguousarray(basis.weights, dtype="<f4").tobytes()
    out += np.ascontiguousarray(basis.bias, dtype="<f4").tobytes()
    out += struct.pack("<I", crc32(out))
    sink.write(bytes(out))


def read_basis(source) -> ProjectionBasis:
    buf = source.read() if hasattr(source, "read") else source
    r = Reader(check_trailing_crc(buf, "FTPJ file"), "FTPJ file")
    r.expect_magic(FTPJ_MAGIC)
    version, c, k, code = r.unpack("<IIIB")
    if version != FTPJ_VERSION:
        raise ValueError(f"unsupported FTPJ version {version}")
    methods = {v: name for name, v in METHOD_CODES.items()}
    if code not in methods:
        raise CorruptRecord(f"FTPJ file: unknown method code {code}")
    method = methods[code]
    weights = np.frombuffer(r.take(4 * c * k), dtype="<f4").reshape(c, k).astype(np.float32)
    bias = np.frombuffer(r.take(4 * k), dtype="<f4").astype(np.float32)
    return ProjectionBasis(weights, bias, method)
