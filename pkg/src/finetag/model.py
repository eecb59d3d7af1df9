"""The FineTag head: 1x1 projection -> bilinear pooling -> flatten -> linear layer.

Flatten order is channel-major: pooled entry ``[c, k]`` is feature
``c * K + k`` and multiplies row ``c * K + k`` of ``fc_weights`` (shape
``[C*K, N]``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from . import seeding
from ._binio import Reader, check_trailing_crc, crc32
from .bilinear import (
    bcnn_normalize_backward,
    bcnn_normalize_forward,
    bilinear_pool_backward,
    bilinear_pool_forward,
)
from .errors import DimMismatch, ShapeMismatch, StaleCache
from .projection import project_backward, project_forward

FTMD_MAGIC = b"FTMD"
FTMD_VERSION = 1

# VGG16 classifier: fc6 25088 -> 4096, fc7 4096 -> 4096, then 4096 -> N.
VGG16_FC_SHAPES = ((25088, 4096), (4096, 4096))


@dataclass
class ModelConfig:
    channels: int = 512
    components: int = 20
    num_classes: int = 312
    dtype: str = "f64"
    bcnn_normalize: bool = False

    def __post_init__(self):
        if min(self.channels, self.components, self.num_classes) < 1:
            raise ValueError("channels, components and num_classes must be >= 1")
        if self.components > self.channels:
            raise ValueError(f"components ({self.components}) must not exceed channels ({self.channels})")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ModelParams:
    """Trainable tensors. The same class holds their gradients.

    ``version`` is bumped by the trainer after every update so a forward
    cache taken before the update can be recognized as stale.
    """

    proj_weights: np.ndarray  # [C, K]
    proj_bias: np.ndarray  # [K]
    fc_weights: np.ndarray  # [C*K, N]
    fc_bias: np.ndarray  # [N]
    version: int = 0

    NAMES = ("proj_weights", "proj_bias", "fc_weights", "fc_bias")

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in self.NAMES}

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(np.zeros_like(t) for t in self.tensors().values()))

    def copy(self) -> "ModelParams":
        return ModelParams(*(t.copy() for t in self.tensors().values()), version=self.version)

    def count(self) -> int:
        return sum(t.size for t in self.tensors().values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors().values())


@dataclass
class ForwardCache:
    alpha: np.ndarray
    beta: np.ndarray
    pooled: np.ndarray
    features: np.ndarray
    norm_cache: tuple | None
    params_id: int
    params_version: int


def _config_of(params):
    c, k = params.proj_weights.shape
    return c, k, params.fc_weights.shape[1]


def forward(params: ModelParams, alpha, bcnn_normalize=False):
    """Logits ``[N]`` for one ``[C, H, W]`` feature map, plus the cache for :func:`backward`."""
    alpha = np.asarray(getattr(alpha, "values", alpha))
    c, k, n = _config_of(params)
    if alpha.ndim != 3 or alpha.shape[0] != c:
        raise ShapeMismatch(f"feature map {alpha.shape} does not have {c} channels")
    if params.fc_weights.shape[0] != c * k:
        raise ShapeMismatch(f"fc_weights {params.fc_weights.shape} do not match C*K={c * k}")
    beta = project_forward(params.proj_weights, params.proj_bias, alpha)
    pooled = bilinear_pool_forward(alpha, beta)
    norm_cache = None
    if bcnn_normalize:
        pooled_out, norm_cache = bcnn_normalize_forward(pooled)
    else:
        pooled_out = pooled
    features = pooled_out.reshape(-1)
    logits = features @ params.fc_weights + params.fc_bias
    cache = ForwardCache(alpha, beta, pooled, features, norm_cache, id(params), params.version)
    return logits, cache


def backward(params: ModelParams, cache: ForwardCache, grad_logits):
    """Gradients of ``grad_logits . logits`` w.r.t. every parameter and the input map.

    Returns ``(grads, grad_alpha)`` where ``grads`` is a :class:`ModelParams`.
    The input map feeds both the projection and the pooling, so
    ``grad_alpha`` is the sum of both paths.
    """
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise StaleCache("parameters changed since the forward pass")
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    c, k, n = _config_of(params)
    if grad_logits.shape != (n,):
        raise ShapeMismatch(f"grad_logits shape {grad_logits.shape} != ({n},)")

    grad_fc_w = np.outer(cache.features, grad_logits)
    grad_fc_b = grad_logits.copy()
    grad_pooled = (params.fc_weights @ grad_logits).reshape(c, k)
    if cache.norm_cache is not None:
        grad_pooled = bcnn_normalize_backward(grad_pooled, cache.norm_cache)
    grad_alpha_pool, grad_beta = bilinear_pool_backward(grad_pooled, cache.alpha, cache.beta)
    grad_alpha_proj, grad_pw, grad_pb = project_backward(grad_beta, cache.alpha, params.proj_weights)
    grads = ModelParams(grad_pw, grad_pb, grad_fc_w, grad_fc_b)
    return grads, grad_alpha_pool + grad_alpha_proj


def count_parameters(config: ModelConfig) -> int:
    ck = config.channels * config.components
    return ck + config.components + ck * config.num_classes + config.num_classes


def count_baseline_fc(num_classes: int) -> int:
    total = sum(i * o + o for i, o in VGG16_FC_SHAPES)
    return total + 4096 * num_classes + num_classes


def ratio_report(config: ModelConfig) -> dict:
    head = count_parameters(config)
    baseline = count_baseline_fc(config.num_classes)
    return {"head": head, "baseline_fc": baseline, "ratio": baseline / head}


def init_params(config: ModelConfig, basis, seed: int) -> ModelParams:
    """Copy the fitted projection and draw Xavier-uniform FC weights (zero FC bias)."""
    if basis.weights.shape != (config.channels, config.components) or basis.bias.shape != (config.components,):
        raise DimMismatch(
            f"basis {basis.weights.shape} does not match C={config.channels}, K={config.components}"
        )
    dt = config.np_dtype
    fan_in = config.channels * config.components
    bound = np.sqrt(6.0 / (fan_in + config.num_classes))
    rng = seeding.stream(seed, "init_params")
    fc_w = rng.uniform(-bound, bound, size=(fan_in, config.num_classes))
    return ModelParams(
        proj_weights=np.array(basis.weights, dtype=dt),
        proj_bias=np.array(basis.bias, dtype=dt),
        fc_weights=fc_w.astype(dt),
        fc_bias=np.zeros(config.num_classes, dtype=dt),
    )


def write_checkpoint(config: ModelConfig, params: ModelParams, sink) -> None:
    """FTMD: magic, version, C, K, N, normalize flag, four f32 tensors, CRC32."""
    if not params.all_finite():
        raise ValueError("refusing to save non-finite parameters")
    out = bytearray(FTMD_MAGIC)
    out += struct.pack("<IIIIB", FTMD_VERSION, config.channels, config.components,
                       config.num_classes, int(config.bcnn_normalize))
    for t in params.tensors().values():
        out += np.ascontiguousarray(t, dtype="<f4").tobytes()
    out += struct.pack("<I", crc32(out))
    sink.write(bytes(out))


def read_checkpoint(source):
    """Return ``(config, params)``; tensors come back as float32."""
    buf = source.read() if hasattr(source, "read") else source
    r = Reader(check_trailing_crc(buf, "FTMD checkpoint"), "FTMD checkpoint")
    r.expect_magic(FTMD_MAGIC)
    version, c, k, n, norm = r.unpack("<IIIIB")
    if version != FTMD_VERSION:
        raise ValueError(f"unsupported FTMD version {version}")
    config = ModelConfig(c, k, n, dtype="f32", bcnn_normalize=bool(norm))
    shapes = ((c, k), (k,), (c * k, n), (n,))
    tensors = []
    for shape in shapes:
        size = int(np.prod(shape))
        tensors.append(np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32))
    return config, ModelParams(*tensors)
