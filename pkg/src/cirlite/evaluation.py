"""Retrieval evaluation: cosine ranking over the gallery and Recall@K.

Pooled embeddings are unit vectors, so ranking by dot product is ranking by
cosine. Ties are broken toward the smaller gallery index (stable sort on the
negated scores), which keeps rankings reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .data import SyntheticDataset
from .encoders import TokenSequence
from .model import ModelParams, load_model, query_embedding, target_embedding
from .training import validate_compatibility

DEFAULT_KS = (1, 10, 50)


@dataclass
class Metrics:
    recall_at_k: dict[int, float]
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        ks = sorted(self.recall_at_k)
        if not ks or ks[0] < 1:
            raise ValueError(f"recall cutoffs must be >= 1, got {ks}")
        values = [self.recall_at_k[k] for k in ks]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError(f"recall values outside [0, 1]: {values}")
        if any(a > b + 1e-12 for a, b in zip(values, values[1:])):
            raise ValueError(f"recall must be nondecreasing in K, got {dict(zip(ks, values))}")


def rank_rows(gallery: np.ndarray, query: np.ndarray) -> list[int]:
    """Gallery indices sorted by descending dot product with the query;
    equal scores keep ascending index order."""
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ValueError(f"gallery must be a nonempty matrix, got shape {gallery.shape}")
    if query.shape != (gallery.shape[1],):
        raise ValueError(f"query shape {query.shape} does not match gallery width "
                         f"{gallery.shape[1]}")
    scores = gallery @ query
    return [int(i) for i in np.argsort(-scores, kind="stable")]


def gallery_matrix(params: ModelParams, images: np.ndarray) -> np.ndarray:
    """Fused unit embeddings of every gallery image, one row per image."""
    with no_grad():
        return np.stack([target_embedding(params, img).data for img in images])


def retrieve(params: ModelParams, reference_image: np.ndarray,
             tokens: TokenSequence, gallery: np.ndarray) -> list[int]:
    """Rank the (pre-embedded) gallery against one composed query."""
    with no_grad():
        q = query_embedding(params, reference_image, tokens).data
    return rank_rows(gallery, q)


def recall_at_k(rankings: list[list[int]], truths: list[int], k: int) -> float:
    if k < 1:
        raise ValueError(f"recall cutoff must be >= 1, got {k}")
    if len(rankings) != len(truths):
        raise ValueError(f"{len(rankings)} rankings for {len(truths)} truths")
    if not rankings:
        raise ValueError("need at least one query")
    hits = sum(1 for ranking, truth in zip(rankings, truths) if truth in ranking[:k])
    return hits / len(rankings)


def evaluate(params: ModelParams, dataset: SyntheticDataset, split: str,
             ks: tuple[int, ...] = DEFAULT_KS) -> Metrics:
    if split not in dataset.splits:
        raise ValueError(f"unknown split {split!r}; have {sorted(dataset.splits)}")
    validate_compatibility(params.config, dataset)
    queries = dataset.splits[split]
    gallery = gallery_matrix(params, dataset.images)
    rankings = [retrieve(params, dataset.images[q.reference_image_id], q.text, gallery)
                for q in queries]
    truths = [q.target_image_id for q in queries]
    return Metrics(recall_at_k={k: recall_at_k(rankings, truths, k) for k in ks})


def evaluate_checkpoint(path, dataset: SyntheticDataset, split: str,
                        ks: tuple[int, ...] = DEFAULT_KS) -> Metrics:
    """Load a saved model and evaluate it; loss curves stored in the
    checkpoint are carried into the result."""
    params, meta = load_model(path)
    metrics = evaluate(params, dataset, split, ks)
    metrics.step_losses = list(meta.get("step_losses", []))
    metrics.epoch_losses = list(meta.get("epoch_losses", []))
    return metrics
