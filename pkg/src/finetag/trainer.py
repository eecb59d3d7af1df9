"""Mini-batch training of the head with SGD-momentum or Adam."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import seeding
from .errors import AllImagesSkipped, NonFiniteLoss, ShapeMismatch
from .losses import batch_loss
from .metrics import dataset_avgprec
from .model import ModelConfig, ModelParams, backward, forward, write_checkpoint

log = logging.getLogger(__name__)

DEFAULT_LR = {"adam": 1e-5, "momentum": 1e-4}


@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    buffers: dict = field(default_factory=dict)
    t: int = 0


def _tensors(p):
    return p.tensors() if isinstance(p, ModelParams) else p


def _check_shapes(params, grads):
    if params.keys() != grads.keys():
        raise ShapeMismatch(f"parameter names {sorted(params)} != gradient names {sorted(grads)}")
    for name, p in params.items():
        if np.shape(grads[name]) != np.shape(p):
            raise ShapeMismatch(f"{name}: parameter {np.shape(p)} vs gradient {np.shape(grads[name])}")


def sgd_momentum_step(params, grads, state: OptimizerState):
    """Classical momentum, in place: ``v = mu * v + g``; ``p -= lr * v``."""
    params, grads = _tensors(params), _tensors(grads)
    _check_shapes(params, grads)
    for name, p in params.items():
        v = state.buffers.setdefault(name, np.zeros_like(p, dtype=np.float64))
        v *= state.momentum
        v += grads[name]
        p -= (state.lr * v).astype(p.dtype, copy=False)
    state.t += 1
    return params, state


def adam_step(params, grads, state: OptimizerState):
    """Adam with bias-corrected moments, in place."""
    params, grads = _tensors(params), _tensors(grads)
    _check_shapes(params, grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.buffers.setdefault(name + ".m", np.zeros_like(p, dtype=np.float64))
        v = state.buffers.setdefault(name + ".v", np.zeros_like(p, dtype=np.float64))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return params, state


STEPS = {"momentum": sgd_momentum_step, "adam": adam_step}


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float | None = None  # None -> DEFAULT_LR[optimizer]
    epochs: int = 1
    loss: str = "smooth"
    optimizer: str = "adam"
    seed: int = 0
    shuffle: bool = True
    momentum: float = 0.9
    hinge_sum: bool = False
    threads: int = 1
    debug: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in STEPS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("smooth", "hinge"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.optimizer]
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


def make_optimizer(tcfg: TrainConfig) -> OptimizerState:
    return OptimizerState(tcfg.optimizer, tcfg.lr, momentum=tcfg.momentum)


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def predict(params, store, ids, bcnn_normalize=False, threads=1) -> np.ndarray:
    """``[len(ids), N]`` logits."""
    def one(image_id):
        return forward(params, store.read(image_id).values, bcnn_normalize)[0]
    out = _map(one, list(ids), threads)
    return np.stack(out) if out else np.zeros((0, params.fc_bias.size))


def mean_loss(params, store, labels, ids, loss="smooth", bcnn_normalize=False, hinge_sum=False, threads=1):
    logits = predict(params, store, ids, bcnn_normalize, threads)
    value, _, _ = batch_loss(logits, labels.rows_for(ids), loss, hinge_sum)
    return value


def _reduce(grads_list, template):
    total = template.zeros_like()
    acc = total.tensors()
    for g in grads_list:  # fixed order
        for name, t in g.tensors().items():
            acc[name] += t
    return total


def train(config: ModelConfig, params: ModelParams, store, labels, split, tcfg: TrainConfig, out_dir=None):
    """Run ``tcfg.epochs`` epochs over ``split.train_ids``; returns ``(params, history)``.

    Each history record is ``{epoch, mean_loss, val_avgprec, skipped}``. With
    ``out_dir`` a checkpoint per epoch and a ``history.jsonl`` are written.
    The per-epoch shuffle comes from the ``"shuffle"`` stream of the seed.
    """
    train_ids = list(split.train_ids)
    val_ids = list(split.val_ids)
    for image_id in train_ids + val_ids:
        if image_id not in store:
            raise ShapeMismatch(f"image {image_id} missing from the feature store")
        labels.row_index(image_id)
    if store.channels != config.channels or labels.cols != config.num_classes:
        raise ShapeMismatch(
            f"store has {store.channels} channels / labels {labels.cols} columns, "
            f"model expects {config.channels} / {config.num_classes}"
        )

    state = make_optimizer(tcfg)
    step = STEPS[tcfg.optimizer]
    rng = seeding.stream(tcfg.seed, "shuffle")
    norm = config.bcnn_normalize
    history = []
    hist_path = None
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        hist_path = os.path.join(out_dir, "history.jsonl")
        open(hist_path, "w").close()

    for epoch in range(1, tcfg.epochs + 1):
        order = np.array(train_ids)
        if tcfg.shuffle:
            order = order[rng.permutation(len(order))]
        total, kept_total, skipped = 0.0, 0, 0
        for start in range(0, len(order), tcfg.batch_size):
            batch = [int(i) for i in order[start:start + tcfg.batch_size]]
            fwd = _map(lambda i: forward(params, store.read(i).values, norm), batch, tcfg.threads)
            logits = np.stack([f[0] for f in fwd])
            try:
                loss, grad, n_skip = batch_loss(logits, labels.rows_for(batch), tcfg.loss, tcfg.hinge_sum)
            except AllImagesSkipped:
                skipped += len(batch)
                continue
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} in epoch {epoch}")
            kept = len(batch) - n_skip
            total += loss * kept
            kept_total += kept
            skipped += n_skip
            grads = _map(lambda b: backward(params, fwd[b][1], grad[b])[0], range(len(batch)), tcfg.threads)
            step(params, _reduce(grads, params), state)
            params.version += 1
            if tcfg.debug and not params.all_finite():
                raise NonFiniteLoss(f"non-finite parameters after step {state.t}")
        if kept_total == 0:
            raise AllImagesSkipped("no training image has both positive and negative labels")

        record = {"epoch": epoch, "mean_loss": total / kept_total, "val_avgprec": None, "skipped": skipped}
        if val_ids:
            val_logits = predict(params, store, val_ids, norm, tcfg.threads)
            record["val_avgprec"] = dataset_avgprec(val_logits, labels.rows_for(val_ids))[0]
        history.append(record)
        log.info("epoch %d: loss %.6f val_avgprec %s", epoch, record["mean_loss"], record["val_avgprec"])
        if out_dir is not None:
            if not params.all_finite():
                raise NonFiniteLoss(f"non-finite parameters at the end of epoch {epoch}")
            with open(os.path.join(out_dir, "checkpoints", f"epoch_{epoch:03d}.ftmd"), "wb") as fh:
                write_checkpoint(config, params, fh)
            with open(hist_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return params, history


def train_config_json(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)
