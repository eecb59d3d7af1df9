"""Multi-label evaluation: per-image AVGPREC, per-label non-interpolated AP, weighted MAP.

Ranking convention: scores are sorted descending, ties broken by ascending
index, and positions are 1-based. ``ties="optimistic"`` / ``"pessimistic"``
instead place tied relevant items before / after tied irrelevant ones.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AllImagesSkipped, EmptyRelevantSet, LengthMismatch

TIE_RULES = ("index", "optimistic", "pessimistic")


def rank_order(scores, relevant=None, ties="index") -> np.ndarray:
    """Indices sorted by descending score under the chosen tie rule."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(scores.size)
    if ties == "index" or relevant is None:
        return np.lexsort((idx, -scores))
    rel = np.asarray(relevant).astype(bool)
    if ties == "optimistic":
        return np.lexsort((idx, ~rel, -scores))
    if ties == "pessimistic":
        return np.lexsort((idx, rel, -scores))
    raise ValueError(f"unknown tie rule {ties!r}")


def _relevant_mask(relevant, n):
    if isinstance(relevant, (set, frozenset)):
        mask = np.zeros(n, dtype=bool)
        mask[list(relevant)] = True
        return mask
    mask = np.asarray(relevant).astype(bool)
    if mask.shape != (n,):
        raise LengthMismatch(f"relevance mask has shape {mask.shape}, expected ({n},)")
    return mask


def _precision_at_hits(hits):
    """Mean over relevant positions k of (#relevant in top k) / k; ``hits`` is in rank order."""
    positions = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, positions.size + 1) / positions))


def avgprec(logits, relevant, ties="index") -> float:
    """Ranking-based average precision of one image's label ranking.

    ``relevant`` is a binary mask over labels or a ``set`` of label indices.
    For each relevant label at position tau, take the fraction of the top
    tau labels that are relevant, then average over relevant labels.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = _relevant_mask(relevant, logits.size)
    if not mask.any():
        raise EmptyRelevantSet("AVGPREC is undefined without relevant labels")
    order = rank_order(logits, mask, ties)
    return _precision_at_hits(mask[order])


def dataset_avgprec(logits, labels, ties="index", skip_full=False):
    """Mean AVGPREC over images; images with no relevant label are skipped.

    ``skip_full=True`` also skips images whose labels are all relevant.
    Returns ``(mean, skipped)``.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels)).astype(bool)
    if logits.shape != labels.shape:
        raise LengthMismatch(f"logits {logits.shape} and labels {labels.shape} differ")
    values = []
    for row, rel in zip(logits, labels):
        npos = rel.sum()
        if npos == 0 or (skip_full and npos == rel.size):
            continue
        values.append(avgprec(row, rel, ties))
    skipped = labels.shape[0] - len(values)
    if not values:
        raise AllImagesSkipped("every image has an empty relevant set")
    return float(np.mean(values)), skipped


def average_precision_noninterp(scores, relevance, ties="index"):
    """Non-interpolated AP of one label across images, or ``None`` when no image is relevant.

    Images are ranked by score; AP is the mean of precision@k over the
    ranks k holding a relevant image.
    """
    scores = np.asarray(scores, dtype=np.float64)
    relevance = np.asarray(relevance).astype(bool)
    if scores.shape != relevance.shape or scores.ndim != 1:
        raise LengthMismatch(f"scores {scores.shape} and relevance {relevance.shape} differ")
    if scores.size == 0:
        raise LengthMismatch("need at least one image")
    if not relevance.any():
        return None
    order = rank_order(scores, relevance, ties)
    return _precision_at_hits(relevance[order])


def per_label_ap(logits, labels, ties="index"):
    """AP for every label column; undefined labels are NaN. Returns ``(ap, defined_mask)``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels)).astype(bool)
    if logits.shape != labels.shape:
        raise LengthMismatch(f"logits {logits.shape} and labels {labels.shape} differ")
    ap = np.full(labels.shape[1], np.nan)
    for j in range(labels.shape[1]):
        value = average_precision_noninterp(logits[:, j], labels[:, j], ties)
        if value is not None:
            ap[j] = value
    return ap, ~np.isnan(ap)


def _weighted(ap, counts):
    defined = ~np.isnan(ap) & (counts > 0)
    total = counts[defined].sum()
    if total == 0:
        return None
    return float(np.sum(ap[defined] * counts[defined]) / total)


def weighted_map(ap, counts, groups=None):
    """Frequency-weighted mean AP overall and per group.

    Labels with undefined (NaN) AP are left out and the weights renormalized
    over the rest. A group with no defined label maps to ``None``.
    """
    ap = np.asarray(ap, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if ap.shape != counts.shape:
        raise LengthMismatch(f"{ap.size} APs but {counts.size} counts")
    per_group = {}
    for name, idx in (groups or {}).items():
        idx = np.asarray(idx, dtype=int)
        if idx.size and idx.max() >= ap.size:
            raise LengthMismatch(f"group {name!r} refers to label {idx.max()} beyond {ap.size}")
        per_group[name] = _weighted(ap[idx], counts[idx])
    return _weighted(ap, counts), per_group


def ap_vs_frequency_table(ap, counts):
    """Rows ``(label, count, ap)`` for defined labels sorted by count; also the undefined count."""
    ap = np.asarray(ap, dtype=np.float64)
    counts = np.asarray(counts)
    if ap.shape != counts.shape:
        raise LengthMismatch(f"{ap.size} APs but {counts.size} counts")
    defined = np.flatnonzero(~np.isnan(ap))
    order = defined[np.lexsort((defined, counts[defined]))]
    rows = [(int(j), int(counts[j]), float(ap[j])) for j in order]
    return rows, int(ap.size - defined.size)


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


@dataclass
class MetricsReport:
    avgprec_mean: float
    per_label_ap: np.ndarray
    label_counts: np.ndarray
    wmap_overall: float | None
    per_group_wmap: dict
    skipped_images: int
    label_names: list = field(default_factory=list)

    @property
    def defined_mask(self):
        return ~np.isnan(self.per_label_ap)

    def summary(self) -> dict:
        return {
            "avgprec": self.avgprec_mean,
            "wmap": self.wmap_overall,
            "skipped": self.skipped_images,
            "undefined_labels": int((~self.defined_mask).sum()),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def per_label_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "name", "count", "ap"])
        for j, (count, ap) in enumerate(zip(self.label_counts, self.per_label_ap)):
            name = self.label_names[j] if j < len(self.label_names) else ""
            w.writerow([j + 1, name, int(count), _fmt(ap)])
        return buf.getvalue()

    def per_group_csv(self) -> str:
        """One header row of group names and one row of W_MAP values."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(self.per_group_wmap))
        w.writerow([_fmt(v) for v in self.per_group_wmap.values()])
        return buf.getvalue()

    def ap_vs_frequency_csv(self) -> str:
        rows, undefined = ap_vs_frequency_table(self.per_label_ap, self.label_counts)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "count", "ap"])
        for label, count, ap in rows:
            w.writerow([label + 1, count, repr(ap)])
        buf.write(f"# undefined_labels={undefined}\n")
        return buf.getvalue()


def evaluate(logits, labels, groups=None, label_names=None, ties="index") -> MetricsReport:
    """Full report for a ``[M, N]`` score matrix against ``[M, N]`` binary labels."""
    labels = np.atleast_2d(np.asarray(labels)).astype(bool)
    mean, skipped = dataset_avgprec(logits, labels, ties)
    ap, _ = per_label_ap(logits, labels, ties)
    counts = labels.sum(axis=0).astype(np.int64)
    overall, per_group = weighted_map(ap, counts, groups)
    return MetricsReport(mean, ap, counts, overall, per_group, skipped, list(label_names or []))
