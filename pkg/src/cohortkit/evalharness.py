"""Metric suite: confusion metrics, rank-based ROC-AUC, KS statistic, the
1:4 linear probe, and a deterministic 2-D principal-component projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import (
    CalibrationError, DegenerateInputError, DimensionError, InputError,
)
from .nn import tensor as T
from .nn.tensor import Tensor


@dataclass
class BinaryEval:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    flags: list[str] = field(default_factory=list)

    def as_tuple(self):
        return self.accuracy, self.precision, self.recall


def accuracy_precision_recall(pred, labels) -> BinaryEval:
    """Standard confusion metrics; precision with zero predicted positives is
    defined as 0 and flagged."""
    pred = np.asarray(pred).astype(np.int64)
    labels = np.asarray(labels).astype(np.int64)
    if pred.shape != labels.shape:
        raise DimensionError(f"length mismatch: {pred.shape} vs {labels.shape}")
    if pred.size == 0:
        raise InputError("empty inputs")
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    flags = []
    if tp + fp == 0:
        precision = 0.0
        flags.append("no_predicted_positives")
    else:
        precision = tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn else 0.0
    return BinaryEval(tp=tp, fp=fp, tn=tn, fn=fn,
                      accuracy=(tp + tn) / pred.size, precision=precision,
                      recall=recall, flags=flags)


def _check_two_classes(labels: np.ndarray):
    if labels.min() == labels.max():
        raise DegenerateInputError("both classes must be present")


def _midranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels length mismatch")
    _check_two_classes(labels)
    ranks = _midranks(scores)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def ks_stat(scores, labels) -> float:
    """Max gap between the positive and negative score CDFs over observed
    thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise DimensionError("scores and labels length mismatch")
    _check_two_classes(labels)
    thresholds = np.unique(scores)
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    cdf_pos = np.searchsorted(pos, thresholds, side="right") / len(pos)
    cdf_neg = np.searchsorted(neg, thresholds, side="right") / len(neg)
    return float(np.abs(cdf_pos - cdf_neg).max())


def linear_probe(embeddings, labels, seed: int, fit_fraction: float = 0.2,
                 lr: float = 0.05, weight_decay: float = 1e-4, tol: float = 1e-6,
                 max_iters: int = 4000) -> tuple[float, float]:
    """Train a logistic layer on the small split, report AUC/KS on the rest.

    The split is stratified by label; features are standardized with fitting
    split statistics; training runs full-batch AdamW until the loss delta
    drops below `tol`.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise DimensionError("embeddings must be (N, d) aligned with labels")
    _check_two_classes(y)
    rng = np.random.default_rng([seed, 0x9A0BE])
    fit_idx, eval_idx = [], []
    for cls in (0, 1):
        members = np.nonzero(y == cls)[0]
        members = members[rng.permutation(len(members))]
        take = max(1, int(round(fit_fraction * len(members))))
        fit_idx.extend(members[:take].tolist())
        eval_idx.extend(members[take:].tolist())
    fit_idx, eval_idx = np.sort(fit_idx), np.sort(eval_idx)
    if y[fit_idx].min() == y[fit_idx].max() or len(eval_idx) == 0 \
            or y[eval_idx].min() == y[eval_idx].max():
        raise CalibrationError("degenerate probe split")

    mean = x[fit_idx].mean(axis=0)
    std = np.maximum(x[fit_idx].std(axis=0), 1e-6)
    xf = (x[fit_idx] - mean) / std
    yf = y[fit_idx].astype(np.float64)

    w = Tensor(np.zeros((x.shape[1], 1), dtype=np.float64), requires_grad=True)
    b = Tensor(np.zeros((1,), dtype=np.float64), requires_grad=True)
    opt = nn.AdamW([w, b], lr=lr, weight_decay=weight_decay)
    xf_t = Tensor(xf)
    y_t = Tensor(yf.reshape(-1, 1))
    prev = None
    for _ in range(max_iters):
        logits = T.add(T.matmul(xf_t, w), b)
        loss = T.tmean(T.sub(T.softplus(logits), T.mul(y_t, logits)))
        value = loss.item()
        opt.zero_grad()
        nn.backward(loss)
        opt.step()
        if prev is not None and abs(prev - value) < tol:
            break
        prev = value

    xe = (x[eval_idx] - mean) / std
    scores = (xe @ w.data + b.data).reshape(-1)
    return roc_auc(scores, y[eval_idx]), ks_stat(scores, y[eval_idx])


def pca_projection(embeddings) -> np.ndarray:
    """Top-2 principal components via deterministic power iteration.

    Fixed uniform start vector, 100 iterations, deflation for the second
    component with re-orthogonalization, and the sign convention that each
    component's largest-magnitude coordinate is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DimensionError("pca_projection needs an (N>=2, d) matrix")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    if np.trace(cov) < 1e-12:
        raise DegenerateInputError("zero-variance data has no principal directions")

    d = x.shape[1]
    components = []
    work = cov.copy()
    for _ in range(2):
        v = np.ones(d) / np.sqrt(d)
        for u in components:
            v -= (v @ u) * u
        for _ in range(100):
            v_new = work @ v
            for u in components:
                v_new -= (v_new @ u) * u
            norm = np.linalg.norm(v_new)
            if norm < 1e-30:
                break
            v = v_new / norm
        peak = np.argmax(np.abs(v))
        if v[peak] < 0:
            v = -v
        components.append(v)
        lam = float(v @ work @ v)
        work = work - lam * np.outer(v, v)
    return centered @ np.stack(components, axis=1)
