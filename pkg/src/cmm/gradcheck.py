"""Randomized gradient-check suite covering every loss and both encoder
compositions. Each family runs many small random instances and reports the
worst relative error between analytic gradients and central differences.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import (EncoderConfig, FrozenWordTable, init_text_params,
                       init_visual_params, encode_text, encode_visual)
from .moco import CmcConfig, FeatureQueue, QueuePair, cmc_loss
from .objectives import AlignConfig, ClassifierHead, align_loss, id_loss

FAMILIES = ("align_loss", "id_loss", "cmc_loss", "encode_visual", "encode_text")

STEP = 1e-5
TOL = 1e-4


class FamilyResult:
    def __init__(self, family, max_rel_err, instances, tol=TOL):
        self.family = family
        self.max_rel_err = max_rel_err
        self.instances = instances
        self.tol = tol

    @property
    def passed(self):
        return self.max_rel_err <= self.tol


def _corrupted(x):
    """Identity forward with a deliberately wrong backward (test hook)."""
    out, tape = T._make_out(x.data.copy(), x)
    if tape is not None:
        def bwd():
            if out.grad is not None and x.requires_grad:
                T._accum(x, out.grad * 1.01)
        tape.record(bwd)
    return out


def _unit_rows(rng, n, d):
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _check_align(rng, wrap):
    b = int(rng.integers(2, 5))
    s = T.parameter(rng.uniform(-1.0, 1.0, size=(b, b)))
    cfg = AlignConfig()
    rep = T.grad_check(lambda: wrap(align_loss(s, cfg)), [s], step=STEP, tol=TOL)
    return rep.max_rel_err


def _check_id(rng, wrap):
    b, d, n = 3, 6, 4
    v = T.parameter(rng.standard_normal((b, d)))
    t = T.parameter(rng.standard_normal((b, d)))
    head = ClassifierHead(d, n, epsilon=0.1, rng=rng)
    ids = rng.integers(0, n, size=b)
    rep = T.grad_check(lambda: wrap(id_loss(v, t, ids, head)),
                       [v, t, head.w], step=STEP, tol=TOL)
    return rep.max_rel_err


def _check_cmc(rng, wrap):
    b, d = 2, 6
    vq_raw = [T.parameter(rng.standard_normal(d)) for _ in range(b)]
    tq_raw = [T.parameter(rng.standard_normal(d)) for _ in range(b)]
    v_k = _unit_rows(rng, b, d)
    t_k = _unit_rows(rng, b, d)
    ids = [0, 1]
    queues = QueuePair.create(8, d)
    queue_ids = [1, 2, 3, 4]  # one overlaps the batch, so filtering is live
    queues.visual.push_batch(_unit_rows(rng, 4, d), queue_ids)
    queues.textual.push_batch(_unit_rows(rng, 4, d), queue_ids)
    cfg = CmcConfig()

    def f():
        vq = T.stack_rows([T.l2_normalize(r) for r in vq_raw])
        tq = T.stack_rows([T.l2_normalize(r) for r in tq_raw])
        return wrap(cmc_loss(vq, tq, v_k, t_k, ids, queues, cfg))

    rep = T.grad_check(f, vq_raw + tq_raw, step=STEP, tol=TOL)
    return rep.max_rel_err


_TINY = EncoderConfig(input_dim=5, visual_hidden=6, embed_dim=5, gru_hidden=4,
                      feature_dim=6, vocab_size=12, max_len=16)


def _check_encode_visual(rng, wrap):
    params = init_visual_params(_TINY, rng)
    x = rng.standard_normal(_TINY.input_dim)
    readout = rng.standard_normal(_TINY.feature_dim)

    def f():
        return wrap(T.dot(encode_visual(params, x), T.constant(readout)))

    rep = T.grad_check(f, list(params.values()), step=STEP, tol=TOL,
                       max_coords_per_param=4, rng=rng)
    return rep.max_rel_err


def _check_encode_text(rng, wrap):
    params = init_text_params(_TINY, rng)
    table = FrozenWordTable(_TINY.vocab_size, _TINY.embed_dim,
                            int(rng.integers(0, 1000)))
    tokens = rng.integers(0, _TINY.vocab_size, size=int(rng.integers(2, 6)))
    readout = rng.standard_normal(_TINY.feature_dim)

    def f():
        return wrap(T.dot(encode_text(params, table, [int(t) for t in tokens]),
                          T.constant(readout)))

    rep = T.grad_check(f, list(params.values()), step=STEP, tol=TOL,
                       max_coords_per_param=4, rng=rng)
    return rep.max_rel_err


_CHECKS = {
    "align_loss": _check_align,
    "id_loss": _check_id,
    "cmc_loss": _check_cmc,
    "encode_visual": _check_encode_visual,
    "encode_text": _check_encode_text,
}


def run_suite(seed=0, instances=100, families=FAMILIES, corrupt=None):
    """Run every family over `instances` random instances each.

    corrupt names a family whose loss gets a deliberately wrong gradient
    injected (fault-injection hook for testing the failure path).
    """
    results = []
    for family in families:
        family_salt = int.from_bytes(family.encode("utf-8"), "little") % (2 ** 31)
        rng = np.random.default_rng([seed, family_salt])
        wrap = _corrupted if corrupt == family else (lambda x: x)
        worst = 0.0
        for _ in range(instances):
            worst = max(worst, _CHECKS[family](rng, wrap))
        results.append(FamilyResult(family, worst, instances))
    return results
