"""Ranking metrics, reporting-bias estimates and h-vs-v diagnostics.

Scores and labels are ``(N, W)`` arrays (images by concepts) unless noted.
Undefined per-concept results are ``None`` (AP) or ``nan`` (array outputs).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, InvalidInputError


def _ranking(scores, ids):
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("scores must be finite")
    ids = np.arange(scores.size) if ids is None else np.asarray(ids)
    # descending score, ties by ascending id
    return np.lexsort((ids, -scores))


def average_precision(scores, labels, ids=None):
    """Mean over positives of the precision at each positive's rank.

    Returns ``None`` when there are no positives.
    """
    labels = np.asarray(labels).astype(bool)
    order = _ranking(scores, ids)
    hits = labels[order]
    n_pos = int(hits.sum())
    if n_pos == 0:
        return None
    ranks = np.flatnonzero(hits) + 1.0
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def average_precisions(scores, labels, ids=None):
    """Per-concept AP list for ``(N, W)`` inputs."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise InvalidInputError(f"scores {scores.shape} and labels {labels.shape} differ")
    return [average_precision(scores[:, w], labels[:, w], ids) for w in range(scores.shape[1])]


@dataclass
class MeanAP:
    overall: float
    per_group: dict = field(default_factory=dict)
    n_excluded: int = 0


def mean_ap(aps, groups=None):
    """Unweighted mean of the defined APs, overall and per group tag."""
    aps = list(aps)
    defined = [a for a in aps if a is not None]
    if not defined:
        raise InvalidInputError("no concept has a defined AP")
    per_group = {}
    if groups is not None:
        if len(groups) != len(aps):
            raise InvalidInputError("need one group tag per concept")
        for tag in dict.fromkeys(groups):
            vals = [a for a, g in zip(aps, groups) if g == tag and a is not None]
            per_group[tag] = float(np.mean(vals)) if vals else None
    return MeanAP(float(np.mean(defined)), per_group, len(aps) - len(defined))


def human_recall(refs):
    """Leave-one-out recall of a single annotator against the others.

    ``refs`` has shape ``(N, k, W)``. For each held-out reference ``t`` an
    image is eligible if another reference mentions the concept; the result
    is the fraction of eligible (image, t) pairs in which ``t`` mentions it.
    ``nan`` where no pair is eligible.
    """
    refs = np.asarray(refs).astype(np.int64)
    if refs.ndim != 3 or refs.shape[1] < 2:
        raise InvalidInputError("human recall needs k >= 2 references per image")
    total = refs.sum(axis=1)
    k = refs.shape[1]
    eligible = sum(((total - refs[:, t]) >= 1).sum(axis=0) for t in range(k))
    hits = sum((refs[:, t] * (total >= 2)).sum(axis=0) for t in range(k))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(eligible > 0, hits / np.maximum(eligible, 1), np.nan)


def precision_at_recall(scores, labels, recall, ids=None):
    """Precision on the PR curve at ``recall``, linear in recall between positives."""
    labels = np.asarray(labels).astype(bool)
    hits = labels[_ranking(scores, ids)]
    n_pos = int(hits.sum())
    if n_pos == 0 or not np.isfinite(recall):
        return float("nan")
    ranks = np.flatnonzero(hits) + 1.0
    tp = np.arange(1, n_pos + 1)
    recalls = tp / n_pos
    precisions = tp / ranks
    i = int(np.searchsorted(recalls, recall, side="left"))
    if i >= n_pos:
        return float(precisions[-1])
    if i == 0:
        return float(precisions[0])
    frac = (recall - recalls[i - 1]) / (recalls[i] - recalls[i - 1])
    return float(precisions[i - 1] + frac * (precisions[i] - precisions[i - 1]))


def precision_at_human_recall(scores, refs, ids=None):
    """Per-concept PHR.

    Ground truth is the union of the references. Returns ``(phr, hr)``, two
    length-``W`` arrays with ``nan`` for undefined concepts.
    """
    scores = np.asarray(scores, dtype=np.float64)
    refs = np.asarray(refs)
    hr = human_recall(refs)
    union = refs.max(axis=1)
    phr = np.array([precision_at_recall(scores[:, w], union[:, w], hr[w], ids)
                    for w in range(scores.shape[1])])
    return phr, hr


@dataclass
class BiasReport:
    """Per-concept estimates of P(y = 0 | z = 1)."""

    estimate: np.ndarray  # (W,), nan when support is 0
    support: np.ndarray  # (W,)
    bucket_estimate: Optional[np.ndarray] = None  # (W, B)
    bucket_support: Optional[np.ndarray] = None  # (W, B)
    bucket_edges: Optional[np.ndarray] = None  # (W, B + 1)

    @property
    def undefined(self):
        return [int(w) for w in np.flatnonzero(self.support == 0)]

    def half_width(self, z=1.96):
        """Normal-approximation confidence half-width of ``estimate``."""
        p = self.estimate
        with np.errstate(invalid="ignore", divide="ignore"):
            return z * np.sqrt(p * (1.0 - p) / self.support)


def _rate(missed, support):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, missed / np.maximum(support, 1), np.nan)


def reporting_bias(y, z, covariate=None, n_buckets=4):
    """Count-based omission rates, optionally split by covariate quantiles.

    ``covariate`` is per image ``(N,)`` or per image and concept ``(N, W)``;
    bucket edges are the quantiles of the covariate among each concept's
    present instances.
    """
    y = np.asarray(y).astype(bool)
    z = np.asarray(z).astype(bool)
    if y.shape != z.shape:
        raise InvalidInputError("y and z must have the same shape")
    missed = z & ~y
    support = z.sum(axis=0)
    report = BiasReport(_rate(missed.sum(axis=0), support), support)
    if covariate is None:
        return report
    cov = np.asarray(covariate, dtype=np.float64)
    if cov.ndim == 1:
        cov = np.broadcast_to(cov[:, None], z.shape)
    W = z.shape[1]
    est = np.full((W, n_buckets), np.nan)
    sup = np.zeros((W, n_buckets), dtype=np.int64)
    edges = np.full((W, n_buckets + 1), np.nan)
    for w in range(W):
        sel = z[:, w]
        if not sel.any():
            continue
        c = cov[sel, w]
        edges[w] = np.quantile(c, np.linspace(0.0, 1.0, n_buckets + 1))
        bucket = np.clip(np.searchsorted(edges[w, 1:-1], c, side="right"), 0, n_buckets - 1)
        miss = missed[sel, w]
        for b in range(n_buckets):
            inb = bucket == b
            sup[w, b] = inb.sum()
            est[w, b] = miss[inb].mean() if inb.any() else np.nan
    report.bucket_estimate, report.bucket_support, report.bucket_edges = est, sup, edges
    return report


def merge_concepts(scores, merge_groups, names=None):
    """Max-merge synonym groups.

    ``merge_groups`` maps a group name to member concept indices. Returns
    ``(merged, merged_names)``: groups first in mapping order, then every
    ungrouped concept unchanged in index order. Also works on 0/1 labels,
    where the max is the logical OR.
    """
    scores = np.asarray(scores)
    W = scores.shape[1]
    names = list(names) if names is not None else [str(w) for w in range(W)]
    used = set()
    cols, out_names = [], []
    for group, members in merge_groups.items():
        members = list(members)
        if not members:
            raise ConfigError(f"merge group {group!r} is empty")
        for m in members:
            if not 0 <= m < W:
                raise ConfigError(f"merge group {group!r}: concept {m} out of range")
            if m in used:
                raise ConfigError(f"concept {m} belongs to more than one merge group")
            used.add(m)
        cols.append(scores[:, members].max(axis=1))
        out_names.append(group)
    for w in range(W):
        if w not in used:
            cols.append(scores[:, w])
            out_names.append(names[w])
    return np.stack(cols, axis=1), out_names


def bin_index(p, bins):
    """Bin of each probability on a uniform grid over [0, 1]; 1.0 joins the last bin."""
    return np.clip((np.asarray(p, dtype=np.float64) * bins).astype(np.int64), 0, bins - 1)


@dataclass
class DecouplingHistogram:
    counts: np.ndarray  # (bins, bins), first axis v, second axis h
    boundaries: np.ndarray  # h quantile boundaries among v >= threshold
    representatives: list  # one image id per h quantile, increasing h
    truncated: bool = False


def decoupling_histogram(v, h, bins=10, v_threshold=0.8, quantiles=4, ids=None):
    """2-D histogram of (v, h) and representative images per h-quantile.

    Among images with ``v >= v_threshold`` the h-quantile boundaries are
    computed, and for quantile ``q`` the image whose h is closest to the
    ``(q + 0.5) / quantiles`` quantile is picked (ties to the smallest id).
    With fewer qualifying images than ``quantiles``, one quantile per image is
    used and ``truncated`` is set.
    """
    v = np.asarray(v, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if v.shape != h.shape or v.ndim != 1:
        raise InvalidInputError("v and h must be aligned 1-D arrays")
    if bins < 1 or quantiles < 1:
        raise InvalidInputError("bins and quantiles must be positive")
    ids = np.arange(v.size) if ids is None else np.asarray(ids)
    counts = np.zeros((bins, bins), dtype=np.int64)
    np.add.at(counts, (bin_index(v, bins), bin_index(h, bins)), 1)

    sel = v >= v_threshold
    hs, sids = h[sel], ids[sel]
    q = quantiles
    truncated = hs.size < quantiles
    if truncated:
        q = hs.size
    if q == 0:
        return DecouplingHistogram(counts, np.array([]), [], truncated)
    boundaries = np.quantile(hs, np.linspace(0.0, 1.0, q + 1))
    reps = []
    for level in (np.arange(q) + 0.5) / q:
        target = np.quantile(hs, level)
        dist = np.abs(hs - target)
        best = np.flatnonzero(dist == dist.min())
        reps.append(int(sids[best].min()))
    return DecouplingHistogram(counts, boundaries, reps, truncated)
