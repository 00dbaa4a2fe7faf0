"""Auxiliary training objectives: the logistic alignment loss over the
in-batch cross-modal similarity matrix, and label-smoothed identity
classification through a projection head shared by both modalities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import ConfigError


@dataclass
class AlignConfig:
    tau_p: float = 10.0   # positive-pair temperature
    tau_n: float = 40.0   # negative-pair temperature
    alpha: float = 0.6    # positive margin
    beta: float = 0.4     # negative margin
    neg_reduction: str = "mean"  # aggregation over the B-1 negatives per anchor

    def validate(self):
        if self.tau_p <= 0 or self.tau_n <= 0:
            raise ConfigError("alignment temperatures must be > 0")
        if not 0.0 <= self.beta < self.alpha <= 1.0:
            raise ConfigError(
                f"margins must satisfy 0 <= beta < alpha <= 1, got "
                f"alpha={self.alpha}, beta={self.beta}")
        if self.neg_reduction not in ("mean", "sum"):
            raise ConfigError("neg_reduction must be 'mean' or 'sum'")


class ClassifierHead:
    """Projection matrix W (D x N) shared between modalities, plus the
    label-smoothing factor for the classification targets."""

    def __init__(self, feature_dim, num_classes, epsilon=0.1, rng=None):
        if num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not 0.0 <= epsilon < 1.0:
            raise ConfigError(f"label-smoothing epsilon must be in [0, 1), got {epsilon}")
        self.num_classes = int(num_classes)
        self.epsilon = float(epsilon)
        if rng is None:
            rng = np.random.default_rng(0)
        bound = 1.0 / np.sqrt(feature_dim)
        self.w = T.parameter(rng.uniform(-bound, bound, size=(feature_dim, num_classes)))

    def smoothed_targets(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_classes):
            raise ValueError(f"identity label out of range [0, {self.num_classes})")
        n = self.num_classes
        targets = np.full((ids.shape[0], n), self.epsilon / n)
        targets[np.arange(ids.shape[0]), ids] += 1.0 - self.epsilon
        return targets


def similarity_matrix(v_q, t_q):
    """S[i, j] = <v_i, t_j> for unit-norm rows, so entries are cosines."""
    from .moco import _check_unit_rows
    if v_q.data.shape != t_q.data.shape:
        raise T.ShapeError(
            f"similarity_matrix: shapes {v_q.data.shape} and {t_q.data.shape} differ")
    _check_unit_rows("v_q", v_q.data)
    _check_unit_rows("t_q", t_q.data)
    return T.matmul(v_q, T.transpose(t_q))


def align_loss(sim, cfg):
    """Logistic alignment loss over a B x B cross-modal similarity matrix.

    Per anchor i: log(1 + e^{-tau_p (S_ii - alpha)}) for the positive, plus
    the mean (or sum) over j != i of log(1 + e^{tau_n (S_ij - beta)}). The
    result is scaled by 2/B, the 2 covering both modal directions.
    """
    cfg.validate()
    if sim.data.ndim != 2 or sim.data.shape[0] != sim.data.shape[1]:
        raise T.ShapeError(f"align_loss expects a square matrix, got {sim.data.shape}")
    b = sim.data.shape[0]
    if b < 2:
        raise ValueError("align_loss needs batch size >= 2 (at least one negative)")

    eye = np.eye(b)
    pos_terms = T.softplus(T.scale(T.sub(sim, cfg.alpha), -cfg.tau_p))
    neg_terms = T.softplus(T.scale(T.sub(sim, cfg.beta), cfg.tau_n))
    pos_sum = T.sum_all(T.mul(pos_terms, T.constant(eye)))
    neg_sum = T.sum_all(T.mul(neg_terms, T.constant(1.0 - eye)))
    if cfg.neg_reduction == "mean":
        neg_sum = T.scale(neg_sum, 1.0 / (b - 1))
    return T.scale(T.add(pos_sum, neg_sum), 2.0 / b)


def align_pos_gradient(s_pos, cfg, b):
    """Closed-form d(align_loss)/dS_ii = -tau_p / (1 + e^{tau_p (S_ii - alpha)}),
    scaled by the same 2/B factor the loss applies per anchor."""
    return (2.0 / b) * (-cfg.tau_p / (1.0 + np.exp(cfg.tau_p * (s_pos - cfg.alpha))))


def _smoothed_ce(features, targets, w):
    logits = T.matmul(features, w)  # (B, N)
    lse = T.log(T.sum_axis(T.exp(logits), axis=1))
    ce = T.sub(T.sum_all(lse), T.sum_all(T.mul(T.constant(targets), logits)))
    return T.scale(ce, 1.0 / features.data.shape[0])


def id_loss(v_q, t_q, ids, head):
    """Label-smoothed identity cross-entropy on both modalities' query
    features through the shared head; each modal term is averaged over the
    batch, then the two are summed."""
    targets = head.smoothed_targets(ids)
    return T.add(_smoothed_ce(v_q, targets, head.w), _smoothed_ce(t_q, targets, head.w))


def total_loss(cmc, align, ident):
    """Unweighted sum of the three loss components."""
    return T.add(T.add(cmc, align), ident)
