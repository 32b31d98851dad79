"""The four training losses and their weighted combination.

All losses operate on embedding vectors and return scalar graph tensors:

* triplet:   [ ||a-p||^2 + m - ||a-n||^2 ]+
* tuplet:    log(1 + sum_i exp(f.f_i - f.f+))  over the negatives f_i
* n-pair:    sum_i log(1 + sum_{j != i} exp(f_i.f_j+ - f_i.f_i+))
* angular:   [ ||a-p||^2 - 4 tan^2(alpha) ||n-c||^2 ]+  with c = (a+p)/2,
             i.e. the hinge penalizes violations of
             ||a-p||^2 <= 4 tan^2(alpha) ||n-c||^2, pushing the angle at the
             negative vertex of the (a, p, n) triangle below alpha.

Triplet and angular consume unit-norm embeddings; the n-pair term uses
pre-normalization embeddings (its inner products carry magnitude); the
softmax term reads a classifier head on pre-normalization embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, softmax_cross_entropy


@dataclass
class LossWeights:
    """Combination weights plus the triplet margin and angular threshold."""

    lambda_npair: float = 0.5
    lambda_soft: float = 0.1
    lambda_tri: float = 1.0
    lambda_ang: float = 1.0
    margin: float = 0.3
    alpha_deg: float = 45.0

    def __post_init__(self):
        for name in ("lambda_npair", "lambda_soft", "lambda_tri", "lambda_ang"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if self.margin < 0:
            raise ContractError("margin must be >= 0")
        if not 0.0 < self.alpha_deg < 90.0:
            raise ContractError("alpha_deg must lie strictly between 0 and 90 degrees")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _as_vector(x, name: str) -> Tensor:
    t = _as_tensor(x)
    if t.ndim != 1:
        raise ShapeError(f"{name} must be a 1-D vector, got shape {t.shape}")
    return t


def _sq_dist(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return (d * d).sum()


def triplet_loss(anchor, positive, negative, margin: float) -> Tensor:
    """Hinge on squared distances: [ ||a-p||^2 + m - ||a-n||^2 ]+ ."""
    a = _as_vector(anchor, "anchor")
    p = _as_vector(positive, "positive")
    n = _as_vector(negative, "negative")
    if not a.shape == p.shape == n.shape:
        raise ShapeError(f"triplet vectors disagree: {a.shape}, {p.shape}, {n.shape}")
    return (_sq_dist(a, p) + float(margin) - _sq_dist(a, n)).relu()


def tuplet_loss(anchor, positive, negatives) -> Tensor:
    """Softmax-style identification of the positive among the negatives."""
    f = _as_vector(anchor, "anchor")
    fp = _as_vector(positive, "positive")
    negs = _as_tensor(negatives)
    if negs.ndim == 1:
        negs = negs.reshape((1, negs.shape[0]))
    if negs.ndim != 2 or negs.shape[0] < 1 or negs.shape[1] != f.shape[0]:
        raise ShapeError(f"negatives must be (k, {f.shape[0]}) with k >= 1, got {negs.shape}")
    dim = f.shape[0]
    s_neg = negs.matmul(f.reshape((dim, 1))).reshape((negs.shape[0],))
    s_pos = (f * fp).sum()
    return (s_neg - s_pos).log1p_sum_exp()


def angular_loss(anchor, positive, negative, alpha_deg: float) -> Tensor:
    """Hinge on the angle at the negative vertex of the (a, p, n) triangle."""
    if not 0.0 < alpha_deg < 90.0:
        raise ContractError("alpha_deg must lie strictly between 0 and 90 degrees")
    a = _as_vector(anchor, "anchor")
    p = _as_vector(positive, "positive")
    n = _as_vector(negative, "negative")
    if not a.shape == p.shape == n.shape:
        raise ShapeError(f"angular vectors disagree: {a.shape}, {p.shape}, {n.shape}")
    tan2 = math.tan(math.radians(alpha_deg)) ** 2
    center = (a + p) * 0.5
    return (_sq_dist(a, p) - _sq_dist(n, center) * (4.0 * tan2)).relu()


def npair_loss(anchors, positives, labels=None) -> Tensor:
    """Sum over anchors of the tuplet comparison against the other positives.

    ``anchors`` and ``positives`` are (N, D) with one pair per class; when
    ``labels`` is given the N classes must be distinct.
    """
    f = _as_tensor(anchors)
    fp = _as_tensor(positives)
    if f.ndim != 2 or fp.shape != f.shape:
        raise ShapeError(f"need matching (N, D) matrices, got {f.shape} and {fp.shape}")
    n = f.shape[0]
    if n < 2:
        raise ContractError("n-pair loss needs at least two classes")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ShapeError("labels must have one entry per pair")
        if len(np.unique(labels)) != n:
            raise ContractError("n-pair classes must be distinct")
    sims = f.matmul(fp.T)  # sims[i, j] = f_i . f_j+
    total = None
    for i in range(n):
        row = sims.index_rows([i]).reshape((n,))
        others = row.gather([j for j in range(n) if j != i])
        own = row.gather([i])
        term = (others - own).log1p_sum_exp()
        total = term if total is None else total + term
    return total


def softmax_ce_loss(logits, labels) -> Tensor:
    """Mean cross-entropy over the batch, max-shifted for stability."""
    return softmax_cross_entropy(_as_tensor(logits), labels)


def triplet_hinges(unit: Tensor, anchors, positives, negatives, margin: float) -> Tensor:
    """Vector of triplet hinge values for index triples into a (B, D) matrix."""
    a = unit.index_rows(anchors)
    p = unit.index_rows(positives)
    n = unit.index_rows(negatives)
    d_ap = ((a - p) ** 2.0).sum(axis=1)
    d_an = ((a - n) ** 2.0).sum(axis=1)
    return (d_ap + float(margin) - d_an).relu()


def angular_hinges(unit: Tensor, anchors, positives, negatives, alpha_deg: float) -> Tensor:
    """Vector of angular hinge values for index triples into a (B, D) matrix."""
    tan2 = math.tan(math.radians(alpha_deg)) ** 2
    a = unit.index_rows(anchors)
    p = unit.index_rows(positives)
    n = unit.index_rows(negatives)
    c = (a + p) * 0.5
    d_ap = ((a - p) ** 2.0).sum(axis=1)
    d_nc = ((n - c) ** 2.0).sum(axis=1)
    return (d_ap - d_nc * (4.0 * tan2)).relu()


def combined_loss(raw, unit, logits, labels, triplets, npairs, weights: LossWeights):
    """Weighted multi-task objective over one batch.

    Arguments: ``raw``/``unit`` are (B, D) embedding tensors before and after
    normalization, ``logits`` the classifier output (or None), ``triplets`` a
    list of mined index triples, ``npairs`` an object with ``anchor_idx`` and
    ``positive_idx`` arrays (or None). Terms whose weight is zero are skipped.
    Returns (total, per-term values dict); missing inputs for an active term
    raise ContractError.
    """
    w = weights
    parts = {"tri": 0.0, "npair": 0.0, "ang": 0.0, "soft": 0.0}
    total = None

    def _add(term: Tensor, lam: float, key: str):
        nonlocal total
        parts[key] = term.item()
        weighted = term * lam
        total = weighted if total is None else total + weighted

    if w.lambda_tri > 0 or w.lambda_ang > 0:
        if not triplets:
            raise ContractError("triplet/angular terms are active but no triplets were supplied")
        anchors = [t.anchor for t in triplets]
        positives = [t.positive for t in triplets]
        negatives = [t.negative for t in triplets]
    if w.lambda_tri > 0:
        _add(triplet_hinges(unit, anchors, positives, negatives, w.margin).mean(),
             w.lambda_tri, "tri")
    if w.lambda_ang > 0:
        _add(angular_hinges(unit, anchors, positives, negatives, w.alpha_deg).mean(),
             w.lambda_ang, "ang")
    if w.lambda_npair > 0:
        if npairs is None:
            raise ContractError("n-pair term is active but no pair structure was supplied")
        _add(npair_loss(raw.index_rows(npairs.anchor_idx),
                        raw.index_rows(npairs.positive_idx)),
             w.lambda_npair, "npair")
    if w.lambda_soft > 0:
        if logits is None:
            raise ContractError("softmax term is active but no logits were supplied")
        _add(softmax_ce_loss(logits, labels), w.lambda_soft, "soft")
    if total is None:
        total = Tensor(0.0)
    return total, parts
