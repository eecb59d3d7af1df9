"""Pairwise ranking losses over one image's logits.

Both losses look at every (negative v, positive u) pair through the margin
``f_v - f_u``. The hinge loss keeps the single worst pair; the smooth loss
aggregates all pairs with ``log(1 + sum exp(f_v - f_u))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllImagesSkipped, EmptyNegativeSet, EmptyPositiveSet, NonFiniteLogit


@dataclass(frozen=True)
class RelevanceSets:
    positives: np.ndarray
    negatives: np.ndarray
    n: int

    @classmethod
    def from_mask(cls, mask) -> "RelevanceSets":
        mask = np.asarray(mask).astype(bool)
        return cls(np.flatnonzero(mask), np.flatnonzero(~mask), mask.size)

    @classmethod
    def from_indices(cls, positives, n) -> "RelevanceSets":
        mask = np.zeros(n, dtype=bool)
        mask[list(positives)] = True
        return cls.from_mask(mask)

    def check(self):
        if self.positives.size == 0:
            raise EmptyPositiveSet("ranking loss needs at least one positive label")
        if self.negatives.size == 0:
            raise EmptyNegativeSet("ranking loss needs at least one negative label")


def _prepare(logits, rel):
    logits = np.asarray(logits, dtype=np.float64)
    if not isinstance(rel, RelevanceSets):
        rel = RelevanceSets.from_mask(rel)
    if rel.n != logits.size:
        raise ValueError(f"relevance covers {rel.n} labels, logits have {logits.size}")
    rel.check()
    return logits, rel


def hinge_rank_loss(logits, rel, summed=False):
    """Worst-pair hinge ``max_{v not in Y, u in Y} max(0, 1 + f_v - f_u)``.

    The subgradient is +1 at the chosen negative and -1 at the chosen
    positive. Ties go to the first pair in row-major (v, u) order over
    ascending label indices. ``summed=True`` sums the hinge over all pairs
    instead.
    """
    logits, rel = _prepare(logits, rel)
    neg, pos = rel.negatives, rel.positives
    margins = 1.0 + logits[neg][:, None] - logits[pos][None, :]
    grad = np.zeros_like(logits)
    if summed:
        active = margins > 0
        loss = float(np.sum(margins[active]))
        np.add.at(grad, neg, active.sum(axis=1))
        np.subtract.at(grad, pos, active.sum(axis=0))
        return loss, grad
    flat = int(np.argmax(margins))
    worst = margins.flat[flat]
    if not worst > 0:
        return 0.0, grad
    v, u = divmod(flat, pos.size)
    grad[neg[v]] = 1.0
    grad[pos[u]] = -1.0
    return float(worst), grad


def hinge_worst_pair(logits, rel):
    """Label indices ``(v, u)`` selected by :func:`hinge_rank_loss`, or ``None`` when the loss is 0."""
    logits, rel = _prepare(logits, rel)
    margins = 1.0 + logits[rel.negatives][:, None] - logits[rel.positives][None, :]
    flat = int(np.argmax(margins))
    if not margins.flat[flat] > 0:
        return None
    v, u = divmod(flat, rel.positives.size)
    return int(rel.negatives[v]), int(rel.positives[u])


def smooth_rank_loss(logits, rel):
    """``log(1 + sum_{v,u} exp(f_v - f_u))`` and its gradient, evaluated with a log-sum-exp shift."""
    logits, rel = _prepare(logits, rel)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLogit("smooth ranking loss got a non-finite logit")
    neg, pos = rel.negatives, rel.positives
    diff = logits[neg][:, None] - logits[pos][None, :]
    shift = max(float(diff.max()), 0.0)
    e = np.exp(diff - shift)
    denom = np.exp(-shift) + e.sum()
    loss = shift + np.log(denom) if shift > 0 else np.log1p(e.sum())
    p = e / denom
    grad = np.zeros_like(logits)
    grad[neg] = p.sum(axis=1)
    grad[pos] = -p.sum(axis=0)
    return float(loss), grad


LOSSES = {"smooth": smooth_rank_loss, "hinge": hinge_rank_loss}


def batch_loss(logits, relevance, which="smooth", hinge_sum=False):
    """Mean loss over a ``[B, N]`` batch.

    Rows with no positive or no negative label are skipped and counted. The
    returned gradient is already divided by the number of rows kept.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    relevance = np.atleast_2d(np.asarray(relevance)).astype(bool)
    if logits.shape != relevance.shape:
        raise ValueError(f"logits {logits.shape} and relevance {relevance.shape} differ")
    grad = np.zeros_like(logits)
    total = 0.0
    kept = 0
    for b in range(logits.shape[0]):
        npos = int(relevance[b].sum())
        if npos == 0 or npos == relevance.shape[1]:
            continue
        if which == "hinge":
            loss, g = hinge_rank_loss(logits[b], relevance[b], summed=hinge_sum)
        elif which == "smooth":
            loss, g = smooth_rank_loss(logits[b], relevance[b])
        else:
            raise ValueError(f"unknown loss {which!r}")
        total += loss
        grad[b] = g
        kept += 1
    if kept == 0:
        raise AllImagesSkipped("no image in the batch has both positive and negative labels")
    return total / kept, grad / kept, logits.shape[0] - kept
