"""Momentum-contrast machinery: lockstep FIFO key queues, identity-aware
negative filtering, the queue-backed cross-modal contrastive loss, and the
single training step that ties encoders, losses, momentum update and queue
maintenance together in the required order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import ConfigError, encode_text, encode_visual, momentum_update

UNIT_NORM_TOL = 1e-6


class ContractViolationError(ValueError):
    """An input violated a documented contract (e.g. non-unit-norm rows)."""


@dataclass
class CmcConfig:
    tau_c: float = 0.07
    reduction: str = "mean"  # "mean" or "sum" over the batch

    def validate(self):
        if self.tau_c <= 0:
            raise ConfigError(f"tau_c must be > 0, got {self.tau_c}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


class FeatureQueue:
    """Fixed-capacity FIFO of (key embedding, identity) pairs.

    Capacity 0 is the disabled queue: pushes are no-ops and the queue stays
    empty, which makes the contrastive loss contribute exactly zero.
    """

    def __init__(self, capacity, dim):
        if capacity < 0:
            raise ConfigError(f"queue capacity must be >= 0, got {capacity}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._keys = []
        self._ids = []

    def __len__(self):
        return len(self._keys)

    def keys(self):
        if not self._keys:
            return np.zeros((0, self.dim))
        return np.stack(self._keys)

    def identities(self):
        return list(self._ids)

    def push_batch(self, keys, ids):
        keys = np.asarray(keys, dtype=np.float64)
        ids = list(ids)
        if keys.shape[0] != len(ids):
            raise ValueError("push_batch: keys and ids disagree on batch size")
        if self.capacity == 0:
            return
        if keys.shape[0] > self.capacity:
            raise ConfigError(
                f"batch of {keys.shape[0]} exceeds queue capacity {self.capacity}")
        for row, i in zip(keys, ids):
            self._keys.append(row.copy())
            self._ids.append(int(i))
        while len(self._keys) > self.capacity:
            self._keys.pop(0)
            self._ids.pop(0)


@dataclass
class QueuePair:
    """Visual and textual key queues that always advance in lockstep; their
    shared identity sequence realizes the identity queue."""
    visual: FeatureQueue
    textual: FeatureQueue

    @classmethod
    def create(cls, capacity, dim):
        return cls(FeatureQueue(capacity, dim), FeatureQueue(capacity, dim))

    def aligned(self):
        return self.visual.identities() == self.textual.identities() and \
            len(self.visual) == len(self.textual)


def filter_negatives(queue, batch_ids):
    """Indices of queue entries whose identity is not in the current batch."""
    batch_ids = set(int(i) for i in batch_ids)
    return [i for i, qid in enumerate(queue.identities()) if qid not in batch_ids]


def enqueue_batch(queues, v_keys, t_keys, ids):
    """Push the batch into both queues in identical order (FIFO eviction)."""
    queues.visual.push_batch(v_keys, ids)
    queues.textual.push_batch(t_keys, ids)


def _check_unit_rows(name, rows):
    norms = np.linalg.norm(rows, axis=1)
    if rows.shape[0] and np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
        raise ContractViolationError(f"{name} rows must be unit-norm")


def _directional_cmc(anchors, pos_keys, neg_keys, tau_c):
    """Sum over anchors of softmax cross-entropy with the paired key as the
    positive and the filtered queue keys as negatives."""
    pos = T.sum_axis(T.mul(anchors, T.constant(pos_keys)), axis=1)  # (B,)
    pos_logit = T.scale(pos, 1.0 / tau_c)
    if neg_keys.shape[0] == 0:
        # Softmax over the single positive: each term is -log(1) = 0.
        return None
    neg_logits = T.scale(T.matmul(anchors, T.constant(neg_keys.T)), 1.0 / tau_c)
    denom = T.add(T.exp(pos_logit), T.sum_axis(T.exp(neg_logits), axis=1))
    return T.sum_all(T.sub(T.log(denom), pos_logit))


def cmc_loss(v_q, t_q, v_k, t_k, ids, queues, cfg):
    """Queue-backed symmetric contrastive loss.

    v_q, t_q are (B x D) tensors with gradients; v_k, t_k are plain arrays
    (keys are constants). Queue entries sharing an identity with the batch
    are filtered out of the negative sets. An empty filtered queue makes the
    corresponding direction contribute exactly zero.
    """
    cfg.validate()
    v_k = np.asarray(v_k, dtype=np.float64)
    t_k = np.asarray(t_k, dtype=np.float64)
    for name, rows in (("v_q", v_q.data), ("t_q", t_q.data), ("v_k", v_k), ("t_k", t_k)):
        _check_unit_rows(name, rows)

    batch_ids = [int(i) for i in ids]
    b = v_q.data.shape[0]

    t_neg_idx = filter_negatives(queues.textual, batch_ids)
    v_neg_idx = filter_negatives(queues.visual, batch_ids)
    t_negs = queues.textual.keys()[t_neg_idx] if t_neg_idx else np.zeros((0, v_q.data.shape[1]))
    v_negs = queues.visual.keys()[v_neg_idx] if v_neg_idx else np.zeros((0, v_q.data.shape[1]))

    terms = []
    img_term = _directional_cmc(v_q, t_k, t_negs, cfg.tau_c)
    if img_term is not None:
        terms.append(img_term)
    txt_term = _directional_cmc(t_q, v_k, v_negs, cfg.tau_c)
    if txt_term is not None:
        terms.append(txt_term)

    if not terms:
        return T.constant(0.0)
    total = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    if cfg.reduction == "mean":
        total = T.scale(total, 1.0 / b)
    return total


def train_step(batch, model, queues, lr, cfg):
    """One training step, in this exact order:
    (1) forward query and key encoders; (2) losses against the pre-update
    queues; (3) gradient step on query parameters and the classifier head;
    (4) momentum update of the key parameters; (5) enqueue the batch keys.

    Returns the loss breakdown as plain floats.
    """
    from .objectives import align_loss, id_loss, similarity_matrix, total_loss

    ids = [int(i) for i in batch.identities]

    with T.Tape() as tape:
        v_q = T.stack_rows([encode_visual(model.visual.theta_q, x)
                            for x in batch.image_features])
        t_q = T.stack_rows([encode_text(model.textual.theta_q, model.table, toks)
                            for toks in batch.caption_tokens])
        # Key encoders: constants, so nothing is recorded for them.
        vk_params = model.visual.key_tensors()
        tk_params = model.textual.key_tensors()
        v_k = np.stack([encode_visual(vk_params, x).data for x in batch.image_features])
        t_k = np.stack([encode_text(tk_params, model.table, toks).data
                        for toks in batch.caption_tokens])

        if cfg.cmc_enabled:
            l_cmc = cmc_loss(v_q, t_q, v_k, t_k, ids, queues, cfg.cmc)
        else:
            l_cmc = T.constant(0.0)
        sim = similarity_matrix(v_q, t_q)
        l_align = align_loss(sim, cfg.align)
        l_id = id_loss(v_q, t_q, model.labels_for(ids), model.head)
        total = total_loss(l_cmc, l_align, l_id)

        if not np.isfinite(total.data).all():
            raise FloatingPointError("non-finite training loss")

        for p in model.trainable_parameters():
            p.zero_grad()
        tape.backward(total)

    for p in model.trainable_parameters():
        if p.grad is not None:
            p.data -= lr * p.grad

    momentum_update([model.visual, model.textual], cfg.momentum)
    enqueue_batch(queues, v_k, t_k, ids)

    return {
        "lcmc": float(l_cmc.data),
        "lalign": float(l_align.data),
        "lid": float(l_id.data),
        "total": float(total.data),
    }
