"""Training objective: bidirectional triplet ranking with an adaptive margin,
embedding reconstruction, and batch-level entropic-OT domain alignment.

All terms are built on one tape so a single backward pass covers the full
objective. The transport plan itself is solved outside the tape and re-enters
as a constant coupling (envelope-style gradient through the cost matrix only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    l2_distance,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    sub,
    tensor_sum,
    transpose,
)
from .layers import LinearParams, init_linear, linear
from .transport import sinkhorn, uniform_marginal

MARGIN_VARIANTS = ("decreasing", "increasing")


@dataclass
class LossWeights:
    """Nonnegative mixing weights for the objective terms."""

    query: float = 1.0        # triplet anchored on the target, ranking composed queries
    target: float = 0.4       # triplet anchored on the query, ranking candidate targets
    image_recon: float = 0.1
    text_recon: float = 1.0
    alignment: float = 0.01

    def __post_init__(self):
        for name in ("query", "target", "image_recon", "text_recon", "alignment"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")


@dataclass
class MarginConfig:
    """Adaptive-margin schedule: sweeps between 0 and `m` as the query/target
    similarity sweeps [0, 1], along an exponential curve with base `a`.

    variant "decreasing" (default) shrinks the margin as the pair grows more
    similar; "increasing" mirrors it.
    """

    m: float = 0.2
    a: float = 2.0
    variant: str = "decreasing"

    def __post_init__(self):
        if not (math.isfinite(self.m) and self.m > 0):
            raise ValueError(f"base margin must be positive, got {self.m}")
        if not (math.isfinite(self.a) and self.a > 0):
            raise ValueError(f"margin base must be positive, got {self.a}")
        if self.a == 1.0:
            raise ValueError("margin base a=1 divides by zero in the schedule")
        if self.variant not in MARGIN_VARIANTS:
            raise ValueError(f"unknown margin variant {self.variant!r}, "
                             f"expected one of {MARGIN_VARIANTS}")


@dataclass
class ReconstructionHeads:
    """Linear d->d projections mapping the composed embedding back toward the
    target image embedding and the target-text global embedding."""

    visual: LinearParams
    textual: LinearParams


def init_reconstruction_heads(rng: np.random.Generator, d: int) -> ReconstructionHeads:
    return ReconstructionHeads(visual=init_linear(rng, d, d), textual=init_linear(rng, d, d))


def triplet(positive: Tensor, negative: Tensor, anchor: Tensor, margin: float) -> Tensor:
    """max(0, ||positive - anchor|| - ||negative - anchor|| + margin)."""
    gap = sub(l2_distance(positive, anchor), l2_distance(negative, anchor))
    return relu(add(gap, float(margin)))


def adaptive_margin(similarity: float, cfg: MarginConfig) -> float:
    if not 0.0 <= similarity <= 1.0:
        raise ValueError(f"similarity must lie in [0, 1], got {similarity}")
    s = similarity if cfg.variant == "increasing" else 1.0 - similarity
    return (1.0 - cfg.a ** s) / (1.0 - cfg.a) * cfg.m


def pair_similarity(query_pooled: Tensor, target_pooled: Tensor) -> float:
    """Cosine mapped to [0, 1], computed outside the graph: a margin
    coefficient must not open a gradient path of its own."""
    q, t = query_pooled.data, target_pooled.data
    norms = np.linalg.norm(q) * np.linalg.norm(t)
    if norms == 0.0:
        raise ValueError("pair_similarity: zero-norm input")
    cos = float(np.dot(q, t) / norms)
    return min(1.0, max(0.0, (cos + 1.0) / 2.0))


def _mean_of(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return scale(total, 1.0 / len(terms))


def bidirectional_triplet(query_pooled: Tensor, target_pooled: Tensor,
                          composed_negatives: Sequence[Tensor],
                          target_negatives: Sequence[Tensor],
                          weights: LossWeights, margins: MarginConfig,
                          adaptive_margin_value: float | None = None) -> Tensor:
    """Two ranking directions sharing one positive pair.

    Forward: the target anchors; the composed query must beat composed
    embeddings of counterfactual queries at fixed margin. Backward: the
    composed query anchors; the true target must beat other candidate targets
    at a margin shrunk adaptively for near-duplicate pairs.

    `adaptive_margin_value` pins the backward margin to a caller-supplied
    constant; finite-difference verification needs this because the analytic
    gradient already treats the margin as a constant coefficient.
    """
    if not composed_negatives:
        raise ValueError("forward direction needs at least one composed negative")
    if not target_negatives:
        raise ValueError("backward direction needs at least one target negative")
    forward = _mean_of([triplet(query_pooled, neg, target_pooled, margins.m)
                        for neg in composed_negatives])
    if adaptive_margin_value is None:
        adaptive_margin_value = adaptive_margin(
            pair_similarity(query_pooled, target_pooled), margins)
    backward = _mean_of([triplet(target_pooled, neg, query_pooled, adaptive_margin_value)
                         for neg in target_negatives])
    return add(scale(forward, weights.query), scale(backward, weights.target))


def reconstruct_loss(query_pooled: Tensor, target_pooled: Tensor,
                     text_global_pooled: Tensor, heads: ReconstructionHeads,
                     weights: LossWeights) -> Tensor:
    """Project the composed embedding back onto its two source modalities and
    penalize the distance to each, so neither modality gets ignored."""
    d = query_pooled.shape[0]
    row = reshape(query_pooled, (1, d))
    recon_image = reshape(linear(row, heads.visual), (d,))
    recon_text = reshape(linear(row, heads.textual), (d,))
    return add(scale(l2_distance(recon_image, target_pooled), weights.image_recon),
               scale(l2_distance(recon_text, text_global_pooled), weights.text_recon))


def _require_normalized_rows(name: str, batch: Tensor) -> None:
    norms = np.sqrt(np.sum(batch.data ** 2, axis=1))
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError(f"{name} rows must be unit-normalized")


def alignment_loss(query_batch: Tensor, target_batch: Tensor,
                   eps: float = 0.05, weight: float = 0.01,
                   max_iters: int = 500, tol: float = 1e-6) -> Tensor:
    """Entropic-OT coupling cost between the batch of composed embeddings and
    the batch of target embeddings.

    The converged plan is held constant; gradients flow only through the
    cosine cost matrix.
    """
    if query_batch.data.ndim != 2 or query_batch.shape != target_batch.shape:
        raise ValueError(
            f"batches must be same-shape matrices, got {query_batch.shape} "
            f"and {target_batch.shape}")
    n = query_batch.shape[0]
    if n < 2:
        raise ValueError(f"alignment needs a batch of >= 2, got {n}")
    _require_normalized_rows("query batch", query_batch)
    _require_normalized_rows("target batch", target_batch)
    if weight == 0.0:
        return Tensor(0.0)
    # rows are unit vectors, so 1 - Q T^t is exactly the pairwise cosine cost
    cost = add(scale(matmul(query_batch, transpose(target_batch)), -1.0), 1.0)
    marginal = uniform_marginal(n)
    plan = sinkhorn(cost.data, marginal, marginal, eps, max_iters=max_iters, tol=tol)
    return scale(tensor_sum(mul(cost, Tensor(plan.gamma))), weight)


@dataclass
class QueryForward:
    """Per-query tensors a training step feeds the objective.

    All embeddings are pooled and unit-normalized. `composed_negatives` holds
    the composed embeddings of this query's counterfactual variants;
    `text_global_pooled` is the pooled global embedding of the target-side
    description used by the reconstruction term.
    """

    query_pooled: Tensor
    target_pooled: Tensor
    composed_negatives: Sequence[Tensor] = field(default_factory=list)
    text_global_pooled: Tensor | None = None


def total_loss(forwards: Sequence[QueryForward], heads: ReconstructionHeads,
               weights: LossWeights, margins: MarginConfig, eps: float = 0.05,
               adaptive_margins: Sequence[float] | None = None) -> Tensor:
    """Batch objective: mean per-query (bidirectional triplet + reconstruction)
    plus one batch-level alignment term, on a single tape.

    Backward-direction negatives for query i are the fused targets of the
    other queries in the batch.
    """
    n = len(forwards)
    if n < 2:
        raise ValueError(f"need a batch of >= 2 queries for in-batch negatives, got {n}")
    if adaptive_margins is not None and len(adaptive_margins) != n:
        raise ValueError(f"{len(adaptive_margins)} pinned margins for {n} queries")
    per_query = []
    for i, f in enumerate(forwards):
        others = [g.target_pooled for j, g in enumerate(forwards) if j != i]
        pinned = None if adaptive_margins is None else adaptive_margins[i]
        ranked = bidirectional_triplet(f.query_pooled, f.target_pooled,
                                       f.composed_negatives, others,
                                       weights, margins,
                                       adaptive_margin_value=pinned)
        recon = reconstruct_loss(f.query_pooled, f.target_pooled,
                                 f.text_global_pooled, heads, weights)
        per_query.append(add(ranked, recon))
    d = forwards[0].query_pooled.shape[0]
    query_rows = concat([reshape(f.query_pooled, (1, d)) for f in forwards], axis=0)
    target_rows = concat([reshape(f.target_pooled, (1, d)) for f in forwards], axis=0)
    align = alignment_loss(query_rows, target_rows, eps=eps, weight=weights.alignment)
    return add(_mean_of(per_query), align)
