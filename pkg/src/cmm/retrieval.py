"""Inference stack: cosine ranking over a gallery, bidirectional Rank-K and
mAP evaluation, and the k-reciprocal Jaccard rerank adjustment.

Everything here is pure numpy over immutable inputs; ranking ties always
break toward the lower index so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

UNIT_NORM_TOL = 1e-5  # stores round-trip through f32, so looser than training


@dataclass
class Gallery:
    embeddings: np.ndarray   # (G, D), unit-norm rows
    identities: np.ndarray   # (G,)
    modality: str = ""

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] == 0:
            raise ValueError("gallery must be a non-empty 2-D embedding matrix")
        if self.identities.shape[0] != self.embeddings.shape[0]:
            raise ValueError("gallery identities and embeddings disagree on size")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
            raise ValueError("gallery rows must be unit-norm")

    def __len__(self):
        return self.embeddings.shape[0]


@dataclass
class RerankConfig:
    k: int = 5
    weight: float = 0.05
    enabled: bool = True
    # When True, the Jaccard *similarity* (1 - distance) is blended in, so
    # high neighbor overlap raises the score; False adds the raw distance.
    add_similarity: bool = True

    def validate(self):
        if self.k < 1:
            raise ValueError(f"rerank k must be >= 1, got {self.k}")
        if self.weight < 0:
            raise ValueError(f"rerank weight must be >= 0, got {self.weight}")


@dataclass
class RetrievalReport:
    direction: str            # "text_to_image" or "image_to_text"
    reranked: bool
    rank_k: dict              # {K: percentage}
    map_score: float          # percentage

    def validate(self):
        ks = sorted(self.rank_k)
        vals = [self.rank_k[k] for k in ks]
        assert all(0.0 <= v <= 100.0 for v in vals + [self.map_score])
        assert all(a <= b for a, b in zip(vals, vals[1:]))


def _ranked_indices(scores):
    """Indices sorted by descending score, ties broken by ascending index."""
    return np.argsort(-scores, kind="stable")


def rank_by_cosine(query, gallery):
    """Rank gallery indices by descending dot product with the query."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (gallery.embeddings.shape[1],):
        raise ValueError(
            f"query shape {query.shape} does not match gallery dim "
            f"{gallery.embeddings.shape[1]}")
    scores = gallery.embeddings @ query
    order = _ranked_indices(scores)
    return order, scores[order]


def rankings_from_scores(scores, gallery_ids):
    """Per-query ranked gallery identities from a (Q, G) score matrix."""
    gallery_ids = np.asarray(gallery_ids, dtype=np.int64)
    order = np.argsort(-scores, axis=1, kind="stable")
    return gallery_ids[order]


def rank_k(rankings, query_ids, k):
    """Percentage of queries with a matching identity in the top k."""
    rankings = np.asarray(rankings)
    query_ids = np.asarray(query_ids)
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if k > rankings.shape[1]:
        raise ValueError(f"K={k} exceeds gallery size {rankings.shape[1]}")
    hits = (rankings[:, :k] == query_ids[:, None]).any(axis=1)
    return 100.0 * float(hits.sum()) / rankings.shape[0]


def mean_ap(rankings, query_ids, gallery_ids):
    """Mean average precision (as a percentage) over all queries.

    AP per query is (1/R) * sum over relevant hits of precision at that
    hit's rank. Every query identity must occur in the gallery. Ranks are
    integers, so the whole mean is computed in exact rational arithmetic
    and rounded to float only once at the end.
    """
    rankings = np.asarray(rankings)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    ap_sum = Fraction(0)
    for qi, qid in enumerate(query_ids):
        rel = rankings[qi] == qid
        r = int(rel.sum())
        if r == 0:
            raise ValueError(
                f"query {qi} (identity {qid}) has no relevant gallery item")
        hit_ranks = np.nonzero(rel)[0] + 1  # 1-based ranks
        ap_sum += Fraction(
            sum(Fraction(n + 1, int(rank)) for n, rank in enumerate(hit_ranks)), r)
    return float(100 * ap_sum / len(query_ids))


def _topk_sets(scores, k):
    """Per-row top-k index sets, ties toward the lower index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return [set(row[:k].tolist()) for row in order]


def k_reciprocal_rerank(queries, gallery, cosine, cfg):
    """Adjusted similarity: cosine + weight * Jaccard overlap of the gallery
    item's unimodal k-neighborhood with the query's cross-modal one.

    Unimodal neighbor sets are computed within the gallery and include the
    item itself (it is trivially its own nearest neighbor), so k = G yields
    identical sets everywhere and a uniform shift.
    """
    cfg.validate()
    queries = np.asarray(queries, dtype=np.float64)
    cosine = np.asarray(cosine, dtype=np.float64)
    q, g = cosine.shape
    if queries.shape != (q, gallery.embeddings.shape[1]):
        raise ValueError("queries shape inconsistent with cosine matrix and gallery")
    if cfg.k > g:
        raise ValueError(f"rerank k={cfg.k} exceeds gallery size {g}")

    uni = gallery.embeddings @ gallery.embeddings.T
    uni_sets = _topk_sets(uni, cfg.k)       # neighbor set per gallery item
    cross_sets = _topk_sets(cosine, cfg.k)  # neighbor set per query

    adjusted = cosine.copy()
    for qi in range(q):
        cs = cross_sets[qi]
        for gi in range(g):
            us = uni_sets[gi]
            inter = len(us & cs)
            union = len(us | cs)
            d_j = 1.0 - inter / union
            blend = (1.0 - d_j) if cfg.add_similarity else d_j
            adjusted[qi, gi] += cfg.weight * blend
    return adjusted


def jaccard_distance(set_a, set_b):
    """1 - |intersection| / |union| of two neighbor index sets."""
    set_a, set_b = set(set_a), set(set_b)
    union = len(set_a | set_b)
    if union == 0:
        raise ValueError("Jaccard distance of two empty sets")
    return 1.0 - len(set_a & set_b) / union


def _direction_reports(direction, queries, query_ids, gallery, cfg, ks):
    cosine = queries @ gallery.embeddings.T
    reports = {}
    plain_rankings = rankings_from_scores(cosine, gallery.identities)
    reports[False] = RetrievalReport(
        direction=direction, reranked=False,
        rank_k={k: rank_k(plain_rankings, query_ids, k) for k in ks},
        map_score=mean_ap(plain_rankings, query_ids, gallery.identities))
    adjusted = k_reciprocal_rerank(queries, gallery, cosine, cfg)
    rr_rankings = rankings_from_scores(adjusted, gallery.identities)
    reports[True] = RetrievalReport(
        direction=direction, reranked=True,
        rank_k={k: rank_k(rr_rankings, query_ids, k) for k in ks},
        map_score=mean_ap(rr_rankings, query_ids, gallery.identities))
    return reports


def evaluate(text_store, image_store, cfg, ks=(1, 5, 10)):
    """Bidirectional evaluation, with and without rerank.

    Returns {(direction, reranked): RetrievalReport} for both directions.
    Ks larger than the gallery are dropped rather than erroring, so tiny
    test galleries still produce a report.
    """
    out = {}
    ks_i = tuple(k for k in ks if k <= len(image_store))
    out.update({("text_to_image", rr): rep for rr, rep in _direction_reports(
        "text_to_image", text_store.embeddings, text_store.identities,
        image_store, cfg, ks_i).items()})
    ks_t = tuple(k for k in ks if k <= len(text_store))
    out.update({("image_to_text", rr): rep for rr, rep in _direction_reports(
        "image_to_text", image_store.embeddings, image_store.identities,
        text_store, cfg, ks_t).items()})
    for rep in out.values():
        rep.validate()
    return out
