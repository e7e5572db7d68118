"""Attention operators used by the composition blocks.

Four flavors:
  * `self_attention` — standard multi-head scaled dot-product self-attention
    with an output projection;
  * `pyramid_self_attention` — same, but queries are built from the tokens
    plus multi-scale spatial average pools, which makes the operator aware
    of the patch grid (and therefore deliberately not permutation-
    equivariant);
  * `cross_attention` — queries from one sequence, keys/values from
    another; when the key/value side is spatial, pass a `PyramidConfig` to
    add the same multi-scale pools on the key side;
  * `soft_gate` — a query-conditioned sigmoid gate over the reference
    tokens, preserving their shape.

The pooling windows for scale i cover i×i patches: centered on the patch
for odd i, anchored at the patch (top-left) for even i, clipped to the
grid with the divisor counting only in-bounds patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class PyramidConfig:
    """Pooling scales (i = 2 … n_p) plus the spatial layout of the tokens."""

    n_p: int
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.n_p < 1:
            raise ValueError(f"n_p must be >= 1, got {self.n_p}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError(f"grid {self.grid_h}x{self.grid_w} must be positive")

    @property
    def tokens(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            t = getattr(self, name)
            if t.shape != (d, d):
                raise ValueError(f"{name} must be square of width {d}, got {t.shape}")
        if d % self.heads != 0:
            raise ValueError(f"width {d} not divisible by {self.heads} heads")

    @property
    def width(self) -> int:
        return self.wq.shape[0]


@dataclass
class AttentionWeights:
    """Post-softmax attention matrix, averaged over heads."""

    matrix: Tensor


_POOL_MATRIX_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _pool_matrix(cfg: PyramidConfig) -> np.ndarray:
    key = (cfg.n_p, cfg.grid_h, cfg.grid_w)
    cached = _POOL_MATRIX_CACHE.get(key)
    if cached is not None:
        return cached
    n = cfg.tokens
    w = np.zeros((n, n))
    for i in range(2, cfg.n_p + 1):
        # odd windows center on the patch, even windows hang down-right
        offsets = range(-(i - 1) // 2, -(i - 1) // 2 + i) if i % 2 else range(i)
        for r in range(cfg.grid_h):
            for c in range(cfg.grid_w):
                cells = [
                    (r + dr) * cfg.grid_w + (c + dc)
                    for dr in offsets
                    for dc in offsets
                    if 0 <= r + dr < cfg.grid_h and 0 <= c + dc < cfg.grid_w
                ]
                for q in cells:
                    w[r * cfg.grid_w + c, q] += 1.0 / len(cells)
    _POOL_MATRIX_CACHE[key] = w
    return w


def pyramid_pool(x: Tensor, cfg: PyramidConfig) -> Tensor:
    """Σ over scales of clipped-window spatial averages; zero when n_p = 1."""
    if x.shape[0] != cfg.tokens:
        raise ValueError(
            f"pyramid_pool: {x.shape[0]} tokens do not fit grid "
            f"{cfg.grid_h}x{cfg.grid_w}")
    return ad.matmul(Tensor(_pool_matrix(cfg)), x)


def _attend(q_in: Tensor, k_in: Tensor, v_in: Tensor,
            params: AttentionParams) -> tuple[Tensor, AttentionWeights]:
    d = params.width
    if q_in.shape[1] != d or k_in.shape[1] != d or v_in.shape[1] != d:
        raise ValueError(
            f"attention: widths {q_in.shape}/{k_in.shape}/{v_in.shape} "
            f"do not match params width {d}")
    out, avg = ad.attention_core(q_in, k_in, v_in, params.wq, params.wk,
                                 params.wv, params.wo, params.heads)
    return out, AttentionWeights(Tensor(avg))


def self_attention(x: Tensor, params: AttentionParams) -> Tensor:
    out, _ = _attend(x, x, x, params)
    return out


def pyramid_self_attention(x: Tensor, params: AttentionParams,
                           cfg: PyramidConfig) -> tuple[Tensor, AttentionWeights]:
    q_in = ad.add(x, pyramid_pool(x, cfg))
    return _attend(q_in, x, x, params)


def cross_attention(query_side: Tensor, kv_side: Tensor, params: AttentionParams,
                    pyramid: PyramidConfig | None = None) -> tuple[Tensor, AttentionWeights]:
    """Attend from `query_side` into `kv_side`; output conforms to the query
    side. `pyramid` augments the key side and must only be passed when the
    key/value tokens are spatial."""
    k_in = ad.add(kv_side, pyramid_pool(kv_side, pyramid)) if pyramid else kv_side
    return _attend(query_side, k_in, kv_side, params)


def soft_gate(queries: Tensor, reference: Tensor, wg: Tensor) -> Tensor:
    """Gate the reference tokens by a query-conditioned sigmoid.

    The gate is one d-vector: sigmoid(wg @ context) where the context is
    the mean over query rows of attention-weighted reference tokens. With
    wg = 0 the gate is 0.5 everywhere.
    """
    n, d = reference.shape
    if queries.shape[1] != d:
        raise ValueError(f"soft_gate: widths {queries.shape} vs {reference.shape}")
    if wg.shape != (d, d):
        raise ValueError(f"soft_gate: gate weight must be ({d}, {d}), got {wg.shape}")
    scores = ad.scale(ad.matmul(queries, ad.transpose(reference)), 1.0 / math.sqrt(d))
    context = ad.mean(ad.matmul(ad.softmax(scores, axis=1), reference), axis=0)
    gate_row = ad.sigmoid(ad.matmul(ad.reshape(context, (1, d)), ad.transpose(wg)))
    gate = ad.matmul(Tensor(np.ones((n, 1))), gate_row)
    return ad.mul(reference, gate)


def init_attention(rng: np.random.Generator, d: int, heads: int,
                   scale: float = 0.02) -> AttentionParams:
    def w():
        return Tensor(rng.standard_normal((d, d)) * scale, requires_grad=True)

    return AttentionParams(wq=w(), wk=w(), wv=w(), wo=w(), heads=heads)
