"""Brute-force reference implementations used to check the production code.

Nothing here imports from the rest of the package: every quantity is
recomputed from its definition with explicit scalar loops in float64.
Speed is irrelevant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


# -- layers -----------------------------------------------------------------

def naive_project(weights, bias, alpha):
    c_dim, h_dim, w_dim = alpha.shape
    k_dim = weights.shape[1]
    beta = np.zeros((k_dim, h_dim, w_dim))
    for k in range(k_dim):
        for h in range(h_dim):
            for w in range(w_dim):
                acc = float(bias[k])
                for c in range(c_dim):
                    acc += float(weights[c, k]) * float(alpha[c, h, w])
                beta[k, h, w] = acc
    return beta


def naive_bilinear(alpha, beta):
    c1, h_dim, w_dim = alpha.shape
    c2 = beta.shape[0]
    out = np.zeros((c1, c2))
    for i in range(c1):
        for j in range(c2):
            acc = 0.0
            for h in range(h_dim):
                for w in range(w_dim):
                    acc += float(alpha[i, h, w]) * float(beta[j, h, w])
            out[i, j] = acc
    return out


def naive_forward(proj_weights, proj_bias, fc_weights, fc_bias, alpha):
    """Logits of the head: projection, pooling, channel-major flatten, linear layer."""
    alpha = np.asarray(alpha, dtype=np.float64)
    c_dim, k_dim = np.shape(proj_weights)
    if alpha.ndim != 3 or alpha.shape[0] != c_dim:
        raise ValueError(f"alpha {alpha.shape} does not have {c_dim} channels")
    pooled = naive_bilinear(alpha, naive_project(proj_weights, proj_bias, alpha))
    n_dim = np.shape(fc_weights)[1]
    logits = np.zeros(n_dim)
    for n in range(n_dim):
        acc = float(fc_bias[n])
        for c in range(c_dim):
            for k in range(k_dim):
                acc += pooled[c, k] * float(fc_weights[c * k_dim + k, n])
        logits[n] = acc
    return logits


# -- derivatives ------------------------------------------------------------

def fd_gradient(fn, point, step=1e-5):
    """Central-difference gradient of a real-valued ``fn`` at ``point`` (any shape)."""
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn(x))
        flat[i] = orig - step
        down = float(fn(x))
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (up - down) / (2 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6, peak_fraction=1e-3):
    """max |a - n| / max(|a|, |n|, peak_fraction * peak, floor).

    Entries far below the largest one are judged against a fraction of
    that peak: their finite-difference estimate carries rounding noise of
    order eps * |f| / step, which is meaningless relative to a tiny value.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    peak = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))))
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(peak_fraction * peak, floor))
    return float(np.max(np.abs(a - n) / scale))


# -- losses -----------------------------------------------------------------

def brute_force_hinge(logits, positives):
    """Worst-pair hinge loss by scanning every (v, u) pair; first maximum wins.

    Returns ``(loss, pair)`` where ``pair`` is ``None`` when the loss is zero.
    """
    n = len(logits)
    pos = sorted(set(positives))
    neg = [i for i in range(n) if i not in set(pos)]
    best, pair = None, None
    for v in neg:
        for u in pos:
            m = 1.0 + float(logits[v]) - float(logits[u])
            if best is None or m > best:
                best, pair = m, (v, u)
    if best is None or not best > 0:
        return 0.0, None
    return best, pair


def brute_force_smooth(logits, positives):
    pos = set(positives)
    total = 0.0
    for v in range(len(logits)):
        if v in pos:
            continue
        for u in pos:
            total += math.exp(float(logits[v]) - float(logits[u]))
    return math.log(1.0 + total)


# -- metrics ----------------------------------------------------------------

def _positions(scores):
    """1-based rank of each item: higher score first, ties by lower index."""
    n = len(scores)
    pos = []
    for i in range(n):
        ahead = 0
        for j in range(n):
            if scores[j] > scores[i] or (scores[j] == scores[i] and j < i):
                ahead += 1
        pos.append(ahead + 1)
    return pos


def exhaustive_avgprec(scores, relevant):
    """AVGPREC straight from its definition: for each relevant label, count relevant labels ranked at or above it."""
    tau = _positions(scores)
    rel = [i for i in range(len(scores)) if relevant[i]]
    total = 0.0
    for lam in rel:
        above = sum(1 for other in rel if tau[other] <= tau[lam])
        total += above / tau[lam]
    return total / len(rel)


def exhaustive_ap(scores, relevant):
    """Non-interpolated AP via precision@k at every relevant rank; ``None`` without relevant items."""
    tau = _positions(scores)
    n = len(scores)
    by_rank = [0] * n
    for i in range(n):
        by_rank[tau[i] - 1] = i
    n_rel = sum(1 for i in range(n) if relevant[i])
    if n_rel == 0:
        return None
    total = 0.0
    hits = 0
    for k in range(1, n + 1):
        if relevant[by_rank[k - 1]]:
            hits += 1
            total += hits / k
    return total / n_rel


def interpolated_ap(scores, relevant):
    """AP with interpolated precision: at each relevant rank, the best precision at that rank or deeper."""
    tau = _positions(scores)
    n = len(scores)
    by_rank = [0] * n
    for i in range(n):
        by_rank[tau[i] - 1] = i
    precision = []
    hits = 0
    for k in range(1, n + 1):
        if relevant[by_rank[k - 1]]:
            hits += 1
        precision.append(hits / k)
    n_rel = hits
    if n_rel == 0:
        return None
    total = 0.0
    for k in range(1, n + 1):
        if relevant[by_rank[k - 1]]:
            total += max(precision[k - 1:])
    return total / n_rel


# -- planted synthetic data -------------------------------------------------

@dataclass
class PlantedDataset:
    """Feature maps whose labels come from a known projection + bilinear + linear score."""

    features: np.ndarray  # [M, C, H, W]
    labels: np.ndarray  # [M, N] uint8
    true_proj: np.ndarray  # [C, K]
    true_fc: np.ndarray  # [C*K, N]
    thresholds: np.ndarray  # [N]
    seed: int

    @property
    def image_ids(self):
        return list(range(1, self.features.shape[0] + 1))


def _planted_scores(alpha, proj, fc):
    c_dim, h_dim, w_dim = alpha.shape
    flat = np.asarray(alpha, dtype=np.float64).reshape(c_dim, h_dim * w_dim)
    beta = proj.T @ flat
    pooled = flat @ beta.T
    return pooled.reshape(-1) @ fc


def make_planted(num_images=200, channels=4, height=2, width=2, components=2, num_labels=6, seed=0,
                 margin=1.0):
    """Draw Gaussian feature maps labelled by a planted projection + bilinear + linear score.

    The label weights are made orthogonal to the projection so scores are
    zero-mean. Each label's score is standardized over a pilot draw and thresholded at
    its median. Images are redrawn until every standardized score is at
    least ``margin`` away from its threshold and the image has at least one
    positive and one negative label, so the set is separable with a margin.
    """
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((channels, components)) / math.sqrt(channels)
    fc = rng.standard_normal((channels * components, num_labels))
    # E[alpha alpha^T] = I, so the expected score is <vec(proj), fc_n> * H * W;
    # removing that component makes every score zero-mean.
    p = proj.reshape(-1)
    fc -= np.outer(p, p @ fc) / (p @ p)
    pilot = rng.standard_normal((2000, channels, height, width))
    pilot_scores = np.stack([_planted_scores(a, proj, fc) for a in pilot])
    spread = pilot_scores.std(axis=0)
    fc = fc / spread
    thresholds = np.median(pilot_scores / spread, axis=0)

    feats = np.zeros((num_images, channels, height, width), dtype=np.float32)
    labels = np.zeros((num_images, num_labels), dtype=np.uint8)
    for i in range(num_images):
        while True:
            alpha = rng.standard_normal((channels, height, width)).astype(np.float32)
            z = _planted_scores(alpha, proj, fc) - thresholds
            row = (z > 0).astype(np.uint8)
            if np.min(np.abs(z)) >= margin and 0 < row.sum() < num_labels:
                break
        feats[i] = alpha
        labels[i] = row
    return PlantedDataset(feats, labels, proj, fc, thresholds, seed)
