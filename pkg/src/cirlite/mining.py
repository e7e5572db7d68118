"""Counterfactual mining: build hard negatives for each training query.

Three families per query, named after the sidecar file fields:

* ``ics`` — keep the query's reference image, swap in the corpus texts least
  similar to the query text.
* ``tcs`` — keep the query text, swap in the reference images that belong to
  those least-similar corpus texts.
* ``pcs`` — keep the image, perturb the text itself: every adjective/noun
  slot is re-rolled to a random same-part-of-speech token, and the perturbed
  texts closest to the original survive. These are the near-miss negatives.

Similarity is scored with the artifact's own text encoder, frozen at whatever
parameters the caller hands in, so a mining pass is reproducible bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import no_grad
from .composition import pool_rows
from .encoders import TextEncoderParams, TokenSequence, text_encode

POS_TAGS = ("adjective", "noun", "other")
MASKABLE_TAGS = ("adjective", "noun")
_DUPLICATE_SIM = 1.0 - 1e-9


@dataclass(frozen=True)
class Query:
    query_id: int
    reference_image_id: int
    target_image_id: int
    text: TokenSequence


@dataclass
class MinerConfig:
    k_text_negatives: int = 3     # ics entries per query
    k_image_negatives: int = 3    # tcs entries per query
    k_perturb_candidates: int = 16
    k_perturb_selected: int = 3   # pcs entries per query
    seed: int = 0

    def __post_init__(self):
        counts = (self.k_text_negatives, self.k_image_negatives,
                  self.k_perturb_candidates, self.k_perturb_selected)
        if min(counts) < 1:
            raise ValueError(f"counterfactual counts must be positive, got {counts}")
        if self.k_perturb_selected > self.k_perturb_candidates:
            raise ValueError(
                f"cannot select {self.k_perturb_selected} texts from "
                f"{self.k_perturb_candidates} candidates")


@dataclass
class POSLexicon:
    """Token-id → part-of-speech map with per-tag replacement pools."""

    tags: dict[int, str]
    pools: dict[str, list[int]] = field(init=False)

    def __post_init__(self):
        for token, tag in self.tags.items():
            if tag not in POS_TAGS:
                raise ValueError(f"token {token} has unknown part of speech {tag!r}")
        self.pools = {tag: sorted(t for t, g in self.tags.items() if g == tag)
                      for tag in POS_TAGS}
        for tag in MASKABLE_TAGS:
            if not self.pools[tag]:
                raise ValueError(f"lexicon has no {tag} tokens to draw replacements from")

    def tag_of(self, token: int) -> str:
        if token not in self.tags:
            raise ValueError(f"token {token} is not in the lexicon")
        return self.tags[token]


@dataclass
class CounterfactualSet:
    query_id: int
    ics: list[tuple[int, TokenSequence]]   # (reference image id, negative text)
    tcs: list[tuple[int, TokenSequence]]   # (negative image id, original text)
    pcs: list[tuple[int, TokenSequence]]   # (reference image id, perturbed text)
    ics_text_ids: list[int]                # corpus query ids the ics texts came from
    pcs_truncated: bool = False

    @property
    def tcs_image_ids(self) -> list[int]:
        return [image_id for image_id, _ in self.tcs]


class TextEmbedder:
    """Pooled text-encoder embeddings with memoization over token ids."""

    def __init__(self, params: TextEncoderParams):
        self._params = params
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def pooled(self, tokens: TokenSequence) -> np.ndarray:
        key = tokens.token_ids
        if key not in self._cache:
            with no_grad():
                bundle = text_encode(tokens, self._params)
                self._cache[key] = pool_rows(bundle.global_).data.copy()
        return self._cache[key]


def text_similarity(a: TokenSequence, b: TokenSequence, embedder: TextEmbedder) -> float:
    # pooled embeddings are unit vectors, so the dot product is the cosine
    return float(np.dot(embedder.pooled(a), embedder.pooled(b)))


def mine_ics_tcs(q: Query, corpus: Sequence[Query], cfg: MinerConfig,
                 embedder: TextEmbedder) -> tuple[list, list, list[int]]:
    """Rank all other corpus texts by similarity to the query text, ascending.

    Returns (ics, tcs, ics_text_ids). Ties broken by corpus position.
    """
    candidates = [(i, c) for i, c in enumerate(corpus) if c.query_id != q.query_id]
    needed = max(cfg.k_text_negatives, cfg.k_image_negatives)
    if len(candidates) < needed:
        raise ValueError(
            f"corpus of {len(corpus)} queries is too small to mine "
            f"{needed} negatives per query")
    scored = [(text_similarity(q.text, c.text, embedder), i, c)
              for i, c in candidates]
    if all(sim >= _DUPLICATE_SIM for sim, _, _ in scored):
        raise ValueError(
            "degenerate corpus: every candidate text duplicates the query text")
    scored.sort(key=lambda entry: (entry[0], entry[1]))
    ics = [(q.reference_image_id, c.text)
           for _, _, c in scored[:cfg.k_text_negatives]]
    ics_text_ids = [c.query_id for _, _, c in scored[:cfg.k_text_negatives]]
    tcs = [(c.reference_image_id, q.text)
           for _, _, c in scored[:cfg.k_image_negatives]]
    return ics, tcs, ics_text_ids


def maskable_positions(text: TokenSequence, lex: POSLexicon) -> list[int]:
    """Indices (into the content tokens, markers excluded) that carry an
    adjective or noun."""
    return [i for i, token in enumerate(text.content)
            if lex.tag_of(token) in MASKABLE_TAGS]


def mine_pcs(q: Query, lex: POSLexicon, cfg: MinerConfig,
             embedder: TextEmbedder) -> tuple[list, bool]:
    """Perturb every adjective/noun slot of the query text, keep the nearest.

    Returns (pcs, truncated). Deterministic under (cfg.seed, q.query_id).
    """
    content = list(q.text.content)
    positions = maskable_positions(q.text, lex)
    if not positions:
        report = ", ".join(f"{i}:{lex.tag_of(t)}" for i, t in enumerate(content))
        raise ValueError(
            f"query {q.query_id} has no adjective or noun to mask "
            f"(positions {report})")
    pools = {}
    for i in positions:
        pool = [t for t in lex.pools[lex.tag_of(content[i])] if t != content[i]]
        if not pool:
            raise ValueError(
                f"no maskable replacement for position {i}: the "
                f"{lex.tag_of(content[i])} pool only contains the original token")
        pools[i] = pool

    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, q.query_id)))
    seen: set[tuple[int, ...]] = set()
    unique: list[TokenSequence] = []
    for _ in range(cfg.k_perturb_candidates):
        perturbed = content.copy()
        for i in positions:
            perturbed[i] = pools[i][rng.integers(len(pools[i]))]
        ids = (q.text.token_ids[0], *perturbed, q.text.token_ids[-1])
        if ids not in seen:
            seen.add(ids)
            unique.append(TokenSequence(token_ids=ids))

    # most-similar first; break score ties on token ids so the cut is stable
    ranked = sorted(unique,
                    key=lambda t: (-text_similarity(q.text, t, embedder),
                                   t.token_ids))
    selected = ranked[:cfg.k_perturb_selected]
    truncated = len(selected) < cfg.k_perturb_selected
    return [(q.reference_image_id, t) for t in selected], truncated


def mine_counterfactuals(q: Query, corpus: Sequence[Query], lex: POSLexicon,
                         cfg: MinerConfig, embedder: TextEmbedder) -> CounterfactualSet:
    ics, tcs, ics_text_ids = mine_ics_tcs(q, corpus, cfg, embedder)
    pcs, truncated = mine_pcs(q, lex, cfg, embedder)
    return CounterfactualSet(query_id=q.query_id, ics=ics, tcs=tcs, pcs=pcs,
                             ics_text_ids=ics_text_ids, pcs_truncated=truncated)


# -- sidecar file ---------------------------------------------------------------


def write_sidecar(path, sets: Iterable[CounterfactualSet]) -> None:
    """One JSON line per query, in query-id order regardless of input order."""
    with open(path, "w", encoding="utf-8") as stream:
        for s in sorted(sets, key=lambda s: s.query_id):
            record = {
                "query_id": s.query_id,
                "ics_text_ids": list(s.ics_text_ids),
                "tcs_image_ids": s.tcs_image_ids,
                "pcs_texts": [list(text.token_ids) for _, text in s.pcs],
                "pcs_truncated": s.pcs_truncated,
            }
            stream.write(json.dumps(record, sort_keys=True) + "\n")


def read_sidecar(path) -> list[dict]:
    with open(path, encoding="utf-8") as stream:
        return [json.loads(line) for line in stream if line.strip()]


def resolve_sidecar_record(record: dict, queries_by_id: dict[int, Query]) -> CounterfactualSet:
    """Rebuild a CounterfactualSet from a sidecar line and the query corpus."""
    q = queries_by_id[record["query_id"]]
    ics = [(q.reference_image_id, queries_by_id[i].text)
           for i in record["ics_text_ids"]]
    tcs = [(image_id, q.text) for image_id in record["tcs_image_ids"]]
    pcs = [(q.reference_image_id, TokenSequence(token_ids=tuple(ids)))
           for ids in record["pcs_texts"]]
    return CounterfactualSet(query_id=q.query_id, ics=ics, tcs=tcs, pcs=pcs,
                             ics_text_ids=list(record["ics_text_ids"]),
                             pcs_truncated=record["pcs_truncated"])
